use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{Frame, SkeletonSequence};

pub const SKELSEQ_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Document {
    version: u32,
    joints: usize,
    fps: f64,
    bones: Vec<[usize; 2]>,
    path_joint: usize,
    frames: Vec<Frame>,
}

pub fn sequence_to_json(seq: &SkeletonSequence) -> Result<String> {
    let doc = Document {
        version: SKELSEQ_VERSION,
        joints: seq.joints,
        fps: seq.fps,
        bones: seq.bones.iter().map(|&(a, b)| [a, b]).collect(),
        path_joint: seq.path_joint,
        frames: seq.frames.clone(),
    };
    serde_json::to_string_pretty(&doc).map_err(|e| Error::format("skelseq", e.to_string()))
}

/// Parses and validates a SKELSEQ document. `origin` names the source in diagnostics.
pub fn parse_sequence(text: &str, origin: &str) -> Result<SkeletonSequence> {
    let doc: Document = serde_json::from_str(text)
        .map_err(|e| Error::format(format!("{origin}:{}:{}", e.line(), e.column()), e.to_string()))?;
    if doc.version != SKELSEQ_VERSION {
        return Err(Error::format(
            origin,
            format!("unsupported version {} (expected {SKELSEQ_VERSION})", doc.version),
        ));
    }
    let seq = SkeletonSequence {
        joints: doc.joints,
        fps: doc.fps,
        bones: doc.bones.into_iter().map(|[a, b]| (a, b)).collect(),
        path_joint: doc.path_joint,
        frames: doc.frames,
    };
    seq.validate().map_err(|e| match e {
        Error::Format { message, .. } => Error::format(origin, message),
        other => other,
    })?;
    Ok(seq)
}

pub fn load_sequence(path: impl AsRef<Path>) -> Result<SkeletonSequence> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_sequence(&text, &path.display().to_string())
}

/// Writes the document in one shot; callers wanting atomic replacement write to a temp file first.
pub fn save_sequence(seq: &SkeletonSequence, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    seq.validate()?;
    crate::fsutil::write_atomic(path, sequence_to_json(seq)?.as_bytes())
}
