use crate::error::{Error, Result};

use super::array::DiffArray;
use super::tape::{Tape, Var};

/// Relative step used for central differences, scaled by `max(1, |x|)`.
pub const FD_STEP: f64 = 1e-5;
/// Denominator floor that keeps the relative error meaningful near zero gradients.
pub const REL_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub input: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares reverse-mode gradients of a scalar function against central differences.
///
/// `f` receives a fresh tape and one leaf per entry of `point`; every leaf is checked.
pub fn gradient_check<F>(mut f: F, point: &[DiffArray<f64>], tolerance: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut eval = |inputs: &[DiffArray<f64>], with_grad: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .map(|a| tape.leaf(a.clone().with_requires_grad(with_grad)))
            .collect();
        let out = f(&mut tape, &vars)?;
        if tape.value(out).len() != 1 {
            return Err(Error::usage("gradient_check needs a scalar-valued function"));
        }
        let value = tape.value(out).item();
        let mut grads = Vec::new();
        if with_grad {
            tape.backward(out)?;
            for (v, a) in vars.iter().zip(inputs) {
                grads.push(tape.grad(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; a.len()]));
            }
        }
        Ok((value, grads))
    };

    let (_, analytic) = eval(point, true)?;
    let mut entries = Vec::with_capacity(point.len());
    let mut probe: Vec<DiffArray<f64>> = point.to_vec();
    for (input, grad) in analytic.iter().enumerate() {
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for k in 0..point[input].len() {
            let x0 = point[input].data()[k];
            let h = FD_STEP * x0.abs().max(1.0);
            probe[input].data_mut()[k] = x0 + h;
            let (fp, _) = eval(&probe, false)?;
            probe[input].data_mut()[k] = x0 - h;
            let (fm, _) = eval(&probe, false)?;
            probe[input].data_mut()[k] = x0;
            let numeric = (fp - fm) / (2.0 * h);
            max_rel = max_rel.max(relative_error(grad[k], numeric));
            max_abs = max_abs.max((grad[k] - numeric).abs());
        }
        entries.push(GradCheckEntry {
            input,
            max_rel_error: max_rel,
            max_abs_error: max_abs,
            passed: max_rel < tolerance,
        });
    }
    Ok(GradCheckReport { tolerance, entries })
}
