//! Evaluation metrics: per-timestep MPJPE curves for pose and path, ADE, FDE and
//! the stability score STB_σ.
//!
//! Poses are given in meters; every curve and scalar is reported in millimeters.

use serde::{Deserialize, Serialize};

use crate::data::Vec3;
use crate::error::{Error, Result};

/// Meters to millimeters.
pub const MM_PER_M: f64 = 1000.0;

/// Horizon times (seconds) sampled into [`MetricsReport::sampled_checkpoints`].
pub const CHECKPOINT_SECONDS: [f64; 4] = [0.5, 1.0, 1.5, 2.0];

/// Joints entering an MPJPE curve.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JointSet {
    All,
    Single(usize),
}

fn distance(a: &Vec3, b: &Vec3) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
}

fn check_shapes(gt: &[Vec<Vec3>], pred: &[Vec<Vec3>]) -> Result<usize> {
    if gt.len() != pred.len() {
        return Err(Error::dim(format!(
            "ground truth has {} steps, prediction {}",
            gt.len(),
            pred.len()
        )));
    }
    let joints = gt.first().map_or(0, Vec::len);
    for (t, (g, p)) in gt.iter().zip(pred).enumerate() {
        if g.len() != joints || p.len() != joints {
            return Err(Error::dim(format!(
                "step {t}: expected {joints} joints, got {} / {}",
                g.len(),
                p.len()
            )));
        }
    }
    Ok(joints)
}

/// Per-timestep mean joint distance, in millimeters.
pub fn mpjpe_curve(gt: &[Vec<Vec3>], pred: &[Vec<Vec3>], joints: JointSet) -> Result<Vec<f64>> {
    let j = check_shapes(gt, pred)?;
    if j == 0 {
        return Err(Error::dim("poses have no joints"));
    }
    if let JointSet::Single(idx) = joints {
        if idx >= j {
            return Err(Error::dim(format!("joint {idx} out of range for J={j}")));
        }
    }
    Ok(gt
        .iter()
        .zip(pred)
        .map(|(g, p)| match joints {
            JointSet::All => {
                let total: f64 = g.iter().zip(p).map(|(a, b)| distance(a, b)).sum();
                MM_PER_M * total / j as f64
            }
            JointSet::Single(idx) => MM_PER_M * distance(&g[idx], &p[idx]),
        })
        .collect())
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn population_variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64
}

fn check_curves(pose: &[f64], path: &[f64]) -> Result<()> {
    if pose.is_empty() || path.is_empty() {
        return Err(Error::usage("metric curves must be non-empty"));
    }
    if pose.len() != path.len() {
        return Err(Error::usage(format!(
            "pose curve has {} entries, path curve {}",
            pose.len(),
            path.len()
        )));
    }
    Ok(())
}

pub fn ade(pose: &[f64], path: &[f64]) -> Result<f64> {
    check_curves(pose, path)?;
    Ok((mean(pose) + mean(path)) / 2.0)
}

pub fn fde(pose: &[f64], path: &[f64]) -> Result<f64> {
    check_curves(pose, path)?;
    Ok((pose[pose.len() - 1] + path[path.len() - 1]) / 2.0)
}

pub fn stb_sigma(pose: &[f64], path: &[f64]) -> Result<f64> {
    check_curves(pose, path)?;
    Ok(((population_variance(pose) + population_variance(path)) / 2.0).sqrt())
}

/// Curve values at one horizon time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub seconds: f64,
    pub index: usize,
    pub pose: f64,
    pub path: f64,
}

/// Indices `round(fps * s) - 1` of the checkpoint times covered by `len` steps,
/// and whether any were dropped.
pub fn checkpoint_indices(fps: f64, len: usize) -> (Vec<(f64, usize)>, bool) {
    let mut out = Vec::new();
    let mut truncated = false;
    for s in CHECKPOINT_SECONDS {
        let idx = (fps * s).round() as i64 - 1;
        if idx >= 0 && (idx as usize) < len {
            out.push((s, idx as usize));
        } else {
            truncated = true;
        }
    }
    (out, truncated)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub pose_curve: Vec<f64>,
    pub path_curve: Vec<f64>,
    pub ade: f64,
    pub fde: f64,
    pub stb_sigma: f64,
    pub sampled_checkpoints: Vec<Checkpoint>,
    pub checkpoints_truncated: bool,
    pub fps: f64,
    /// Number of samples averaged into this report.
    pub samples: usize,
}

impl MetricsReport {
    /// Assembles a report from precomputed curves (mm).
    pub fn from_curves(pose_curve: Vec<f64>, path_curve: Vec<f64>, fps: f64) -> Result<Self> {
        if !(fps > 0.0 && fps.is_finite()) {
            return Err(Error::param(format!("fps must be > 0, got {fps}")));
        }
        check_curves(&pose_curve, &path_curve)?;
        let (idx, truncated) = checkpoint_indices(fps, pose_curve.len());
        let sampled_checkpoints = idx
            .into_iter()
            .map(|(seconds, index)| Checkpoint {
                seconds,
                index,
                pose: pose_curve[index],
                path: path_curve[index],
            })
            .collect();
        Ok(Self {
            ade: ade(&pose_curve, &path_curve)?,
            fde: fde(&pose_curve, &path_curve)?,
            stb_sigma: stb_sigma(&pose_curve, &path_curve)?,
            pose_curve,
            path_curve,
            sampled_checkpoints,
            checkpoints_truncated: truncated,
            fps,
            samples: 1,
        })
    }

    /// ADE restricted to the sampled checkpoints.
    pub fn checkpoint_ade(&self) -> Option<f64> {
        if self.sampled_checkpoints.is_empty() {
            return None;
        }
        let pose: Vec<f64> = self.sampled_checkpoints.iter().map(|c| c.pose).collect();
        let path: Vec<f64> = self.sampled_checkpoints.iter().map(|c| c.path).collect();
        ade(&pose, &path).ok()
    }

    /// Element-wise mean of several reports over the same horizon.
    pub fn average(reports: &[MetricsReport]) -> Result<Self> {
        let first = reports.first().ok_or_else(|| Error::usage("no reports to average"))?;
        let n = first.pose_curve.len();
        if reports.iter().any(|r| r.pose_curve.len() != n || r.fps != first.fps) {
            return Err(Error::dim("reports differ in horizon or fps"));
        }
        let weight: usize = reports.iter().map(|r| r.samples).sum();
        let avg_vec = |f: &dyn Fn(&MetricsReport) -> &Vec<f64>| -> Vec<f64> {
            (0..n)
                .map(|i| reports.iter().map(|r| f(r)[i] * r.samples as f64).sum::<f64>() / weight as f64)
                .collect()
        };
        let avg = |f: &dyn Fn(&MetricsReport) -> f64| -> f64 {
            reports.iter().map(|r| f(r) * r.samples as f64).sum::<f64>() / weight as f64
        };
        let pose_curve = avg_vec(&|r| &r.pose_curve);
        let path_curve = avg_vec(&|r| &r.path_curve);
        let mut out = Self::from_curves(pose_curve, path_curve, first.fps)?;
        out.stb_sigma = avg(&|r| r.stb_sigma);
        out.samples = weight;
        Ok(out)
    }
}

/// Subtracts each frame's `path_joint` position from every joint of that frame.
pub fn torso_centered(poses: &[Vec<Vec3>], path_joint: usize) -> Vec<Vec<Vec3>> {
    poses
        .iter()
        .map(|frame| {
            let c = frame[path_joint];
            frame.iter().map(|p| [p[0] - c[0], p[1] - c[1], p[2] - c[2]]).collect()
        })
        .collect()
}

/// Full report for one prediction of absolute poses (meters). The pose curve
/// compares torso-centered poses; the path curve compares the torso joint.
pub fn report(gt: &[Vec<Vec3>], pred: &[Vec<Vec3>], path_joint: usize, fps: f64) -> Result<MetricsReport> {
    let j = check_shapes(gt, pred)?;
    if gt.is_empty() {
        return Err(Error::usage("empty prediction horizon"));
    }
    if path_joint >= j {
        return Err(Error::dim(format!("path joint {path_joint} out of range for J={j}")));
    }
    let pose_curve = mpjpe_curve(&torso_centered(gt, path_joint), &torso_centered(pred, path_joint), JointSet::All)?;
    let path_curve = mpjpe_curve(gt, pred, JointSet::Single(path_joint))?;
    MetricsReport::from_curves(pose_curve, path_curve, fps)
}

#[cfg(test)]
mod tests {
    use super::*;

    const GTA_PATH: [f64; 4] = [154.0, 163.0, 172.0, 186.0];
    const GTA_POSE: [f64; 4] = [198.0, 209.0, 217.0, 230.0];

    fn frames(t: usize, j: usize, f: impl Fn(usize, usize) -> Vec3) -> Vec<Vec<Vec3>> {
        (0..t).map(|t| (0..j).map(|j| f(t, j)).collect()).collect()
    }

    #[test]
    fn table_rows() {
        assert_eq!(fde(&GTA_POSE, &GTA_PATH).unwrap(), 208.0);
        assert_eq!(fde(&[298.0], &[277.0]).unwrap(), 287.5);
        assert!((ade(&GTA_POSE, &GTA_PATH).unwrap() - 191.125).abs() < 1e-12);
        // population variances: pose 545/4, path 558.75/4
        let oracle = ((136.25f64 + 139.6875) / 2.0).sqrt();
        let stb = stb_sigma(&GTA_POSE, &GTA_PATH).unwrap();
        assert!((stb - oracle).abs() < 1e-12);
        assert!((stb - 11.75).abs() < 0.01);
    }

    #[test]
    fn mpjpe_examples() {
        let gt = frames(3, 4, |t, j| [t as f64, j as f64, 0.5]);
        let off = frames(3, 4, |t, j| [t as f64, j as f64, 0.505]);
        assert!(mpjpe_curve(&gt, &gt, JointSet::All).unwrap().iter().all(|&e| e == 0.0));
        for e in mpjpe_curve(&gt, &off, JointSet::All).unwrap() {
            assert!((e - 5.0).abs() < 1e-9);
        }
        let gt = vec![vec![[0.0; 3], [0.0; 3]]];
        let pred = vec![vec![[0.003, 0.0, 0.0], [0.0, 0.005, 0.0]]];
        assert!((mpjpe_curve(&gt, &pred, JointSet::All).unwrap()[0] - 4.0).abs() < 1e-12);
        assert!((mpjpe_curve(&gt, &pred, JointSet::Single(1)).unwrap()[0] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn curve_scalar_examples() {
        assert_eq!(ade(&[7.0; 5], &[7.0; 5]).unwrap(), 7.0);
        assert_eq!(ade(&[0.0; 5], &[7.0; 5]).unwrap(), 3.5);
        assert_eq!(fde(&[0.0; 3], &[0.0; 3]).unwrap(), 0.0);
        assert_eq!(stb_sigma(&[7.0; 5], &[3.0; 5]).unwrap(), 0.0);
        let doubled = |c: &[f64]| c.iter().map(|v| 2.0 * v).collect::<Vec<_>>();
        let s = stb_sigma(&GTA_POSE, &GTA_PATH).unwrap();
        let s2 = stb_sigma(&doubled(&GTA_POSE), &doubled(&GTA_PATH)).unwrap();
        assert!((s2 - 2.0 * s).abs() < 1e-12);
        assert!(matches!(ade(&[], &[]), Err(Error::Usage(_))));
        assert!(matches!(ade(&[1.0], &[1.0, 2.0]), Err(Error::Usage(_))));
    }

    #[test]
    fn checkpoint_arithmetic() {
        let (idx, truncated) = checkpoint_indices(30.0, 60);
        assert_eq!(idx.iter().map(|c| c.1).collect::<Vec<_>>(), vec![14, 29, 44, 59]);
        assert!(!truncated);
        let (idx, truncated) = checkpoint_indices(30.0, 30);
        assert_eq!(idx.iter().map(|c| c.1).collect::<Vec<_>>(), vec![14, 29]);
        assert!(truncated);
    }

    #[test]
    fn report_from_table_curves() {
        let r = MetricsReport::from_curves(GTA_POSE.to_vec(), GTA_PATH.to_vec(), 2.0).unwrap();
        assert_eq!(r.fde, 208.0);
        assert_eq!(r.sampled_checkpoints.len(), 4);
        assert_eq!(r.checkpoint_ade(), Some(r.ade));
        assert!(MetricsReport::from_curves(vec![1.0], vec![1.0], 0.0).is_err());
    }

    #[test]
    fn identical_prediction_gives_zero_report() {
        let gt = frames(60, 5, |t, j| [0.1 * t as f64, (j as f64).sin(), 4.0]);
        let r = report(&gt, &gt, 0, 30.0).unwrap();
        assert!(r.pose_curve.iter().chain(&r.path_curve).all(|&v| v == 0.0));
        assert_eq!((r.ade, r.fde, r.stb_sigma), (0.0, 0.0, 0.0));
        assert_eq!(r.sampled_checkpoints.len(), 4);
    }

    #[test]
    fn translated_prediction_has_pose_error_zero() {
        let gt = frames(10, 4, |t, j| [0.1 * t as f64, j as f64, 4.0]);
        let pred = frames(10, 4, |t, j| [0.1 * t as f64 + 0.02, j as f64, 4.0]);
        let r = report(&gt, &pred, 0, 30.0).unwrap();
        assert!(r.pose_curve.iter().all(|&v| v.abs() < 1e-9));
        assert!(r.path_curve.iter().all(|&v| (v - 20.0).abs() < 1e-9));
        assert!(r.checkpoints_truncated);
    }

    #[test]
    fn averaging_reports() {
        let a = MetricsReport::from_curves(vec![1.0, 3.0], vec![2.0, 2.0], 30.0).unwrap();
        let b = MetricsReport::from_curves(vec![3.0, 5.0], vec![4.0, 6.0], 30.0).unwrap();
        let m = MetricsReport::average(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(m.pose_curve, vec![2.0, 4.0]);
        assert_eq!(m.path_curve, vec![3.0, 4.0]);
        assert_eq!(m.fde, (a.fde + b.fde) / 2.0);
        assert_eq!(m.stb_sigma, (a.stb_sigma + b.stb_sigma) / 2.0);
        assert_eq!(m.samples, 2);
    }

    #[test]
    fn json_field_names() {
        let r = MetricsReport::from_curves(vec![1.0], vec![1.0], 30.0).unwrap();
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        for key in ["pose_curve", "path_curve", "ade", "fde", "stb_sigma", "sampled_checkpoints"] {
            assert!(v.get(key).is_some(), "{key}");
        }
    }
}
