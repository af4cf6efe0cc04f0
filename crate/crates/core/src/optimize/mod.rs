//! Dropout, DPGD, trimming schedules, and the sparse and patch attacks.

mod attack;
mod dpgd;
mod dropout;
mod schedule;

pub use attack::{
    attack_once, pgd_trim, pgd_trim_kernel, restart_seed, restart_steps, run_with_restarts, AttackConfig, AttackRecord,
    PhaseTrace,
};
pub use dpgd::{dpgd, DpgdOutcome};
pub use dropout::{cb_mean, rectified_normal_params, DropoutFamily, DropoutSampler, DropoutSpec};
pub use schedule::{build_schedule, max_trim_steps, TrimSchedule};

/// `H × W` per-pixel dropout multipliers.
pub fn dropout_sample(spec: DropoutSpec, height: usize, width: usize, rng: &mut crate::grid::RngState) -> crate::Result<crate::Grid2D> {
    spec.sample(height, width, rng)
}
