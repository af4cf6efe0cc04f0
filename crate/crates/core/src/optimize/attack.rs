use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid3D, Image, Perturbation, RngState};
use crate::mask::{validate_patch_mask, KernelSpec, PixelMask};
use crate::model::{AttackTarget, Classifier, LossSpec};
use crate::par::Execution;
use crate::trim::{trim_step, ScoringMode};

use super::dpgd::dpgd;
use super::dropout::{DropoutFamily, DropoutSpec};
use super::schedule::{build_schedule, max_trim_steps, TrimSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    /// PGD iterations per DPGD call.
    pub iterations: usize,
    pub step_size: f64,
    pub mc_samples: usize,
    /// Upper bound on trim steps; capped at the schedule maximum.
    pub n_trim: usize,
    pub n_restarts: usize,
    pub dropout: DropoutFamily,
    pub loss: LossSpec,
    pub seed: u64,
    pub execution: Execution,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            iterations: 100,
            step_size: 0.05,
            mc_samples: 1000,
            n_trim: 11,
            n_restarts: 11,
            dropout: DropoutFamily::Bernoulli,
            loss: LossSpec::CrossEntropy,
            seed: 0,
            execution: Execution::default(),
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::invalid("PGD iterations must be at least 1"));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::invalid(format!("step size must be positive, got {}", self.step_size)));
        }
        if self.mc_samples == 0 {
            return Err(Error::invalid("Monte-Carlo sample count must be at least 1"));
        }
        if self.n_trim == 0 {
            return Err(Error::invalid("n_trim must be at least 1"));
        }
        if self.n_restarts == 0 {
            return Err(Error::invalid("n_restarts must be at least 1"));
        }
        Ok(())
    }
}

/// Losses around one trim.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseTrace {
    pub l0_curr: usize,
    pub l0_next: usize,
    /// Best loss of the DPGD run on the `l0_curr` mask.
    pub dpgd_loss: f64,
    /// Loss right after projecting onto the trimmed mask.
    pub trimmed_loss: f64,
    pub mode: ScoringMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRecord {
    pub eps0: usize,
    pub delta: Perturbation,
    pub mask: PixelMask,
    /// Pixels selected by the final mask.
    pub pixel_l0: usize,
    /// Pixels where `δ` is actually non-zero (clipping can zero a selected pixel).
    pub perturbed_pixels: usize,
    pub success: bool,
    pub best_loss: f64,
    pub trace: Vec<PhaseTrace>,
    /// Final DPGD on the trimmed mask, without dropout.
    pub final_loss: f64,
    /// Index of the winning restart (0 for a single run).
    pub restart: usize,
    /// Seed the winning run was started from.
    pub seed: u64,
    pub trim_steps: usize,
    pub schedule: Vec<usize>,
}

impl AttackRecord {
    /// `x + δ ∈ [0, 1]`, `δ` inside the mask, and the L0 budget holds.
    pub fn check_feasible(&self, x: &Image) -> Result<()> {
        if !x.same_shape(&self.delta) {
            return Err(Error::shape("record perturbation does not match the input"));
        }
        for (i, (&d, &xv)) in self.delta.values().iter().zip(x.values()).enumerate() {
            let v = xv + d;
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("x+δ = {v} outside [0, 1] at cell {i}")));
            }
        }
        if !PixelMask::nonzero_pixels(&self.delta).is_subset_of(&self.mask) {
            return Err(Error::invalid("perturbation escapes its mask"));
        }
        if self.pixel_l0 != self.mask.count() || self.pixel_l0 > self.eps0 {
            return Err(Error::invalid(format!("pixel L0 {} vs budget {}", self.pixel_l0, self.eps0)));
        }
        Ok(())
    }
}

/// Seed of restart `r`; restart 0 reuses the master seed.
pub fn restart_seed(master: u64, restart: usize) -> u64 {
    if restart == 0 {
        master
    } else {
        RngState::new(master).fork_seed(0x7265_7374_0000 + restart as u64)
    }
}

/// Trim steps used by restart `r` (0-based).
pub fn restart_steps(n_trim: usize, restart: usize, max_steps: usize) -> usize {
    n_trim.saturating_sub(restart).max(1).min(max_steps)
}

fn check_kernel(x: &Image, eps0: usize, k: KernelSpec) -> Result<()> {
    let n = k.patches_for_budget(eps0)?;
    let (ah, aw) = k.anchor_dims(x.height(), x.width())?;
    if n > ah * aw {
        return Err(Error::invalid(format!("{n} patches of {k} do not fit: only {} anchor positions", ah * aw)));
    }
    Ok(())
}

/// One attack run with a fixed number of trim steps.
///
/// Random streams are forked from the run seed: 0 initializes `δ`, 1 drives
/// the final DPGD, and trim `j` uses `100 + 2j` for DPGD and `101 + 2j` for
/// scoring.
pub fn attack_once(
    target: &AttackTarget<'_>,
    eps0: usize,
    kernel: Option<KernelSpec>,
    n_steps: usize,
    seed: u64,
    cfg: &AttackConfig,
) -> Result<AttackRecord> {
    cfg.validate()?;
    let x = target.x;
    let (h, w) = (x.height(), x.width());
    if let Some(k) = kernel {
        check_kernel(x, eps0, k)?;
    }
    let schedule: TrimSchedule = build_schedule(h * w, eps0, n_steps)?;
    let root = RngState::new(seed);

    let mut init_rng = root.fork(0);
    let init: Vec<f64> = (0..x.len()).map(|_| init_rng.uniform(-1.0, 1.0)).collect();
    let mut delta = Grid3D::new(h, w, x.channels(), init)?;
    delta.clip_to_box(x)?;
    let mut mask = PixelMask::full(h, w)?;

    let mut trace = Vec::with_capacity(schedule.steps());
    for (j, (l0_curr, l0_next)) in schedule.pairs().enumerate() {
        let spec = DropoutSpec::new(cfg.dropout, l0_next as f64 / l0_curr as f64)?;
        let opt = dpgd(target, &mask, &delta, spec, cfg.iterations, cfg.step_size, &root.fork(100 + 2 * j as u64))?;
        let trimmed = trim_step(
            target,
            &opt.delta,
            &mask,
            l0_next,
            kernel,
            cfg.mc_samples,
            &root.fork(101 + 2 * j as u64),
            cfg.execution,
        )?;
        trace.push(PhaseTrace { l0_curr, l0_next, dpgd_loss: opt.loss, trimmed_loss: trimmed.loss, mode: trimmed.mode });
        mask = trimmed.mask;
        delta = trimmed.delta;
    }
    let fin = dpgd(target, &mask, &delta, DropoutSpec::identity(), cfg.iterations, cfg.step_size, &root.fork(1))?;
    let success = target.is_fooled(&fin.delta)?;
    let record = AttackRecord {
        eps0,
        pixel_l0: mask.count(),
        perturbed_pixels: fin.delta.pixel_l0(),
        mask,
        delta: fin.delta,
        success,
        best_loss: fin.loss,
        final_loss: fin.loss,
        trace,
        restart: 0,
        seed,
        trim_steps: schedule.steps(),
        schedule: schedule.targets().to_vec(),
    };
    if let Some(k) = kernel {
        let n = eps0 / k.size();
        if !validate_patch_mask(&record.mask, k, n).valid {
            return Err(Error::invalid(format!("final mask is not a union of {n} {k} patches")));
        }
    }
    Ok(record)
}

fn target<'a>(model: &'a dyn Classifier, x: &'a Image, label: usize, cfg: &AttackConfig) -> Result<AttackTarget<'a>> {
    AttackTarget::new(model, x, label, cfg.loss)
}

/// Sparse attack: trims down to exactly `eps0` pixels, using `cfg.n_trim`
/// steps (capped at the schedule maximum) and `cfg.seed`.
pub fn pgd_trim(model: &dyn Classifier, x: &Image, label: usize, eps0: usize, cfg: &AttackConfig) -> Result<AttackRecord> {
    let t = target(model, x, label, cfg)?;
    let steps = cfg.n_trim.min(max_trim_steps(x.pixels(), eps0)?);
    attack_once(&t, eps0, None, steps, cfg.seed, cfg)
}

/// Patch attack: keeps `eps0 / (kh·kw)` possibly overlapping `k`-shaped
/// patches. Intermediate targets that are not multiples of the kernel size
/// keep `⌊l0 / (kh·kw)⌋` patches.
pub fn pgd_trim_kernel(
    model: &dyn Classifier,
    x: &Image,
    label: usize,
    eps0: usize,
    k: KernelSpec,
    cfg: &AttackConfig,
) -> Result<AttackRecord> {
    let t = target(model, x, label, cfg)?;
    check_kernel(x, eps0, k)?;
    let steps = cfg.n_trim.min(max_trim_steps(x.pixels(), eps0)?);
    attack_once(&t, eps0, Some(k), steps, cfg.seed, cfg)
}

/// Run `cfg.n_restarts` attacks, restart `r` with `max(1, n_trim − r)` trim
/// steps and its own seed. The winner is the first run that is best by
/// success, then by loss.
pub fn run_with_restarts(
    model: &dyn Classifier,
    x: &Image,
    label: usize,
    eps0: usize,
    kernel: Option<KernelSpec>,
    cfg: &AttackConfig,
) -> Result<AttackRecord> {
    cfg.validate()?;
    let t = target(model, x, label, cfg)?;
    if let Some(k) = kernel {
        check_kernel(x, eps0, k)?;
    }
    let max = max_trim_steps(x.pixels(), eps0)?;
    let mut best: Option<AttackRecord> = None;
    for r in 0..cfg.n_restarts {
        let mut rec = attack_once(&t, eps0, kernel, restart_steps(cfg.n_trim, r, max), restart_seed(cfg.seed, r), cfg)?;
        rec.restart = r;
        let better = match &best {
            None => true,
            Some(b) => (rec.success && !b.success) || (rec.success == b.success && rec.best_loss > b.best_loss),
        };
        if better {
            best = Some(rec);
        }
    }
    Ok(best.expect("at least one restart"))
}
