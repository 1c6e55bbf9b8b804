//! Training objective: mean squared joint error plus the skeleton consistency
//! terms on joint-pair cosines and pairwise joint distances.
//!
//! Every function accepts poses shaped `[..., T̃, J, 3]` (an optional leading
//! batch axis is averaged like any other axis).

use serde::{Deserialize, Serialize};

use crate::diffarray::{DiffArray, Tape, Var, COSINE_EPS};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight of the cosine term.
    pub lambda1: f64,
    /// Weight of the pairwise-distance term.
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.0005,
            lambda2: 0.1,
        }
    }
}

impl LossWeights {
    pub const ZERO: Self = Self {
        lambda1: 0.0,
        lambda2: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::param(format!(
                "loss weights must be >= 0, got lambda1={} lambda2={}",
                self.lambda1, self.lambda2
            )));
        }
        Ok(())
    }
}

/// Which joint pairs the cosine term compares.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CosinePairs {
    /// `(i, i+1)` for every joint index.
    #[default]
    Consecutive,
    /// The skeleton's bones.
    Bones,
}

impl CosinePairs {
    pub fn resolve(&self, joints: usize, bones: &[(usize, usize)]) -> Vec<(usize, usize)> {
        match self {
            CosinePairs::Consecutive => (0..joints.saturating_sub(1)).map(|i| (i, i + 1)).collect(),
            CosinePairs::Bones => bones.to_vec(),
        }
    }
}

fn joint_axis<S: Scalar>(tape: &Tape<S>, p: Var) -> Result<(usize, usize)> {
    let s = tape.shape(p);
    if s.len() < 3 || s[s.len() - 1] != 3 {
        return Err(Error::dim(format!("poses must be [..., T, J, 3], got {s:?}")));
    }
    Ok((s.len() - 2, s[s.len() - 2]))
}

fn check_pair<S: Scalar>(tape: &Tape<S>, target: Var, pred: Var) -> Result<(usize, usize)> {
    if tape.shape(target) != tape.shape(pred) {
        return Err(Error::dim(format!(
            "target {:?} and prediction {:?} differ",
            tape.shape(target),
            tape.shape(pred)
        )));
    }
    joint_axis(tape, target)
}

fn pair_cosines<S: Scalar>(tape: &mut Tape<S>, p: Var, axis: usize, pairs: &[(usize, usize)]) -> Result<Var> {
    let (a, b): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
    let pa = tape.index_select(p, axis, &a)?;
    let pb = tape.index_select(p, axis, &b)?;
    tape.cosine_last(pa, pb, S::from_f64(COSINE_EPS))
}

/// Mean absolute difference of joint-pair cosine similarities.
pub fn scl_cos<S: Scalar>(tape: &mut Tape<S>, target: Var, pred: Var, pairs: &[(usize, usize)]) -> Result<Var> {
    let (axis, joints) = check_pair(tape, target, pred)?;
    if joints < 2 || pairs.is_empty() {
        return Err(Error::dim(format!("cosine term needs J >= 2 and at least one pair (J={joints})")));
    }
    let ct = pair_cosines(tape, target, axis, pairs)?;
    let cp = pair_cosines(tape, pred, axis, pairs)?;
    let d = tape.sub(ct, cp)?;
    let d = tape.abs(d)?;
    tape.mean(d)
}

/// All unordered joint pairs `(i, j)` with `i > j`.
pub fn all_pairs(joints: usize) -> Vec<(usize, usize)> {
    (0..joints).flat_map(|j| (j + 1..joints).map(move |i| (i, j))).collect()
}

fn pair_distances<S: Scalar>(tape: &mut Tape<S>, p: Var, axis: usize, pairs: &[(usize, usize)]) -> Result<Var> {
    let (a, b): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
    let pa = tape.index_select(p, axis, &a)?;
    let pb = tape.index_select(p, axis, &b)?;
    let d = tape.sub(pa, pb)?;
    tape.norm_last(d)
}

/// Mean absolute difference of all pairwise joint distances.
pub fn scl_l2<S: Scalar>(tape: &mut Tape<S>, target: Var, pred: Var) -> Result<Var> {
    let (axis, joints) = check_pair(tape, target, pred)?;
    if joints < 2 {
        return Err(Error::dim(format!("distance term needs J >= 2 (J={joints})")));
    }
    let pairs = all_pairs(joints);
    let dt = pair_distances(tape, target, axis, &pairs)?;
    let dp = pair_distances(tape, pred, axis, &pairs)?;
    let d = tape.sub(dt, dp)?;
    let d = tape.abs(d)?;
    tape.mean(d)
}

/// `lambda1 * scl_cos + lambda2 * scl_l2`; a zero weight skips its term entirely.
pub fn scl<S: Scalar>(
    tape: &mut Tape<S>,
    target: Var,
    pred: Var,
    weights: LossWeights,
    pairs: &[(usize, usize)],
) -> Result<Option<Var>> {
    let mut acc: Option<Var> = None;
    if weights.lambda1 != 0.0 {
        let c = scl_cos(tape, target, pred, pairs)?;
        acc = Some(tape.scale(c, S::from_f64(weights.lambda1))?);
    }
    if weights.lambda2 != 0.0 {
        let l = scl_l2(tape, target, pred)?;
        let l = tape.scale(l, S::from_f64(weights.lambda2))?;
        acc = Some(match acc {
            Some(a) => tape.add(a, l)?,
            None => l,
        });
    }
    Ok(acc)
}

/// Mean squared joint error.
pub fn data_term<S: Scalar>(tape: &mut Tape<S>, target: Var, pred: Var) -> Result<Var> {
    check_pair(tape, target, pred)?;
    let joints_total = tape.value(pred).len() / 3;
    let d = tape.sub(pred, target)?;
    let sq = tape.square(d)?;
    let s = tape.sum(sq)?;
    tape.scale(s, S::one() / S::from_f64(joints_total as f64))
}

/// Full objective: data term plus weighted consistency terms.
pub fn total_loss<S: Scalar>(
    tape: &mut Tape<S>,
    target: Var,
    pred: Var,
    weights: LossWeights,
    pairs: &[(usize, usize)],
) -> Result<Var> {
    let data = data_term(tape, target, pred)?;
    match scl(tape, target, pred, weights, pairs)? {
        Some(s) => tape.add(data, s),
        None => Ok(data),
    }
}

/// Which loss [`evaluate_loss`] computes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Cos,
    L2,
    Total,
}

/// Convenience wrapper that evaluates one loss on plain arrays.
pub fn evaluate_loss<S: Scalar>(
    target: &DiffArray<S>,
    pred: &DiffArray<S>,
    kind: LossKind,
    weights: LossWeights,
    pairs: &[(usize, usize)],
) -> Result<f64> {
    let mut tape = Tape::new();
    let t = tape.constant(target.clone());
    let p = tape.constant(pred.clone());
    let out = match kind {
        LossKind::Cos => scl_cos(&mut tape, t, p, pairs)?,
        LossKind::L2 => scl_l2(&mut tape, t, p)?,
        LossKind::Total => total_loss(&mut tape, t, p, weights, pairs)?,
    };
    Ok(tape.value(out).item().as_f64())
}
