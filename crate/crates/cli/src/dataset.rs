use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use skelgraph::data::{load_sequence, window_samples, Sample, SkeletonSequence};

/// A loaded set of sequences; frame image paths are resolved against `root`.
pub struct Dataset {
    pub root: PathBuf,
    pub sequences: Vec<(PathBuf, SkeletonSequence)>,
}

impl Dataset {
    /// Loads every `*.json` file of a directory in name order, or a single file.
    pub fn load(path: &Path) -> Result<Self> {
        let meta = std::fs::metadata(path).map_err(|e| skelgraph::Error::Io { path: path.into(), source: e })?;
        let (root, files) = if meta.is_dir() {
            let mut files: Vec<PathBuf> = std::fs::read_dir(path)
                .map_err(|e| skelgraph::Error::Io { path: path.into(), source: e })?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "json"))
                .collect();
            files.sort();
            (path.to_path_buf(), files)
        } else {
            (path.parent().unwrap_or(Path::new(".")).to_path_buf(), vec![path.to_path_buf()])
        };
        let mut sequences = files
            .into_iter()
            .map(|f| Ok((f.clone(), load_sequence(&f)?)))
            .collect::<skelgraph::Result<Vec<_>>>()?;
        for frame in sequences.iter_mut().flat_map(|(_, s)| s.frames.iter_mut()) {
            if let Some(rel) = &frame.image {
                frame.image = Some(root.join(rel).to_string_lossy().into_owned());
            }
        }
        Ok(Self { root, sequences })
    }

    pub fn fps(&self) -> Result<f64> {
        let first = self
            .sequences
            .first()
            .map(|(_, s)| s.fps)
            .ok_or_else(|| skelgraph::Error::Input("no sequences found".into()))?;
        if let Some((p, s)) = self.sequences.iter().find(|(_, s)| s.fps != first) {
            return Err(skelgraph::Error::Input(format!("{} has fps {} but the dataset uses {first}", p.display(), s.fps)).into());
        }
        Ok(first)
    }

    pub fn joints(&self) -> Option<usize> {
        self.sequences.first().map(|(_, s)| s.joints)
    }

    pub fn samples(&self, obs_len: usize, pred_len: usize, stride: usize) -> Result<Vec<Sample>> {
        let mut out = Vec::new();
        for (path, seq) in &self.sequences {
            out.extend(window_samples(seq, obs_len, pred_len, stride).with_context(|| format!("windowing {}", path.display()))?);
        }
        if out.is_empty() {
            return Err(skelgraph::Error::Input(format!(
                "no samples: no sequence in {} has the {} frames a window needs",
                self.root.display(),
                obs_len + pred_len
            ))
            .into());
        }
        Ok(out)
    }
}
