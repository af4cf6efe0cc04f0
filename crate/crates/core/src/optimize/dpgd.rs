use crate::error::{Error, Result};
use crate::grid::{Perturbation, RngState};
use crate::mask::PixelMask;
use crate::model::AttackTarget;

use super::dropout::{DropoutSampler, DropoutSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct DpgdOutcome {
    pub delta: Perturbation,
    pub loss: f64,
}

/// Dropout PGD: sign-gradient ascent on `δ` restricted to the mask `B`.
///
/// Iteration `t` draws per-pixel multipliers `m` from `rng.fork(t)`, takes the
/// gradient of `ℓ(M(x + m⊙δ), y)` with respect to `δ` (that is `m⊙∇ₓℓ`),
/// steps `δ += α·B⊙sign(g)` and projects onto `[−x, 1−x]`. Candidates are
/// scored without dropout; the best one seen, `δ_init` included, is returned.
/// Forking per iteration makes a shorter run a prefix of a longer one.
#[allow(clippy::too_many_arguments)]
pub fn dpgd(
    target: &AttackTarget<'_>,
    mask: &PixelMask,
    delta_init: &Perturbation,
    spec: DropoutSpec,
    iters: usize,
    alpha: f64,
    rng: &RngState,
) -> Result<DpgdOutcome> {
    let x = target.x;
    if !x.same_shape(delta_init) {
        return Err(Error::shape(format!("perturbation {:?} vs input {:?}", delta_init.dims(), x.dims())));
    }
    if (mask.height(), mask.width()) != (x.height(), x.width()) {
        return Err(Error::shape("mask dims differ from the image"));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::invalid(format!("step size must be positive, got {alpha}")));
    }
    let sampler = spec.sampler()?;
    let support = mask.support();

    let mut best_loss = target.loss_at(delta_init)?;
    if !best_loss.is_finite() {
        return Err(Error::NonFiniteLoss { iteration: 0 });
    }
    let mut best = delta_init.clone();
    if support.is_empty() {
        return Ok(DpgdOutcome { delta: best, loss: best_loss });
    }
    let mut delta = delta_init.clone();
    let mut dropped = delta.clone();
    for t in 0..iters {
        let mut it_rng = rng.fork(t as u64);
        let multipliers: Vec<f64> = match sampler {
            DropoutSampler::Ones => Vec::new(),
            _ => (0..x.pixels()).map(|_| sampler.draw(&mut it_rng)).collect(),
        };
        let grad = if multipliers.is_empty() {
            target.model.input_gradient(&x.add(&delta)?, target.label, target.loss)?
        } else {
            for (p, &m) in multipliers.iter().enumerate() {
                for (o, &d) in dropped.pixel_mut(p).iter_mut().zip(delta.pixel(p)) {
                    *o = m * d;
                }
            }
            target.model.input_gradient(&x.add(&dropped)?, target.label, target.loss)?
        };
        for &p in &support {
            let m = multipliers.get(p).copied().unwrap_or(1.0);
            let (lo, g) = (x.pixel(p), grad.pixel(p));
            for ((d, &xv), &gv) in delta.pixel_mut(p).iter_mut().zip(lo).zip(g) {
                let step = m * gv;
                if !step.is_finite() {
                    return Err(Error::NonFinite(format!("gradient at iteration {}", t + 1)));
                }
                let s = if step > 0.0 { 1.0 } else if step < 0.0 { -1.0 } else { 0.0 };
                *d = (*d + alpha * s).max(-xv).min(1.0 - xv);
            }
        }
        let loss = target.loss_at(&delta)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { iteration: t + 1 });
        }
        if loss > best_loss {
            best_loss = loss;
            best.clone_from(&delta);
        }
    }
    Ok(DpgdOutcome { delta: best, loss: best_loss })
}
