use super::{Classifier, LossSpec};
use crate::error::{Error, Result};
use crate::grid::{sample_k_without_replacement, Image, RngState};

/// Minimum number of input cells probed per check.
const MIN_PROBES: usize = 64;

/// Compare the analytic input gradient against central differences on a
/// random subset of input cells (at least 64, or every cell of smaller
/// inputs). Returns the max of `|analytic - fd| / (|fd| + 1e-12)`.
pub fn finite_diff_check<M: Classifier + ?Sized>(
    model: &M,
    x: &Image,
    label: usize,
    spec: LossSpec,
    step: f64,
    rng: &mut RngState,
) -> Result<f64> {
    if step.is_nan() || step <= 0.0 {
        return Err(Error::invalid(format!("finite-difference step must be positive, got {step}")));
    }
    let analytic = model.input_gradient(x, label, spec)?;
    let cells: Vec<usize> = (0..x.len()).collect();
    let probes = sample_k_without_replacement(&cells, x.len().min(MIN_PROBES.max(x.len() / 4)), rng)?;
    let mut worst = 0.0f64;
    let mut shifted = x.clone();
    for i in probes {
        let orig = shifted.values()[i];
        shifted.values_mut()[i] = orig + step;
        let up = model.loss(&shifted, label, spec)?;
        shifted.values_mut()[i] = orig - step;
        let down = model.loss(&shifted, label, spec)?;
        shifted.values_mut()[i] = orig;
        let fd = (up - down) / (2.0 * step);
        let err = (analytic.values()[i] - fd).abs() / (fd.abs() + 1e-12);
        worst = worst.max(err);
    }
    Ok(worst)
}
