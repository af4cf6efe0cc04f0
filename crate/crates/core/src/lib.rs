//! Sparse and patch adversarial attacks built on point-wise trimming of dense
//! perturbations.
//!
//! A dense perturbation is optimized with dropout-regularized sign-gradient
//! ascent, then repeatedly trimmed: every surviving pixel is scored by the
//! average attack loss over random masks that keep it, and only the best
//! pixels (or the best kernel-shaped patches) survive into the next round.
//!
//! Module map:
//! - [`grid`]: dense 2-D/3-D grids, pooling, top-k, seeded sampling.
//! - [`model`]: the [`model::Classifier`] trait, three toy networks with
//!   analytic input gradients, training, and weight-file I/O.
//! - [`mask`]: pixel masks, patch anchors and footprints, mask sampling.
//! - [`trim`]: Monte-Carlo and exhaustive point-wise scoring, top-k and
//!   max-out patch selection.
//! - [`optimize`]: dropout, DPGD, trimming schedules, the sparse/patch attacks
//!   and restarts.
//! - [`harness`]: datasets, experiments, ASR curves and the verification suite.

pub mod error;
pub mod grid;
pub mod harness;
pub mod mask;
pub mod model;
pub mod optimize;
pub mod par;
pub mod trim;

pub use error::{Error, Result};
pub use grid::{Grid2D, Grid3D, Image, Perturbation, RngState};
pub use mask::{AnchorMask, KernelSpec, PixelMask};
pub use model::{Classifier, LossSpec, ToyModel};

pub use optimize::{AttackConfig, AttackRecord, DropoutFamily, DropoutSpec, TrimSchedule};
pub use par::Execution;
