//! Differentiable classifiers with analytic input gradients.
//!
//! Attacks only talk to the [`Classifier`] trait. The bundled [`ToyModel`]
//! zoo (linear softmax, one-hidden-layer MLP, single conv + average pool +
//! linear) exists to produce attackable fixtures at desk scale; everything is
//! computed in `f64`.

mod gradcheck;
mod io;
mod loss;
mod nets;
mod train;

pub use gradcheck::finite_diff_check;
pub use io::{load_weights, read_weights, save_weights, write_weights, WEIGHT_MAGIC, WEIGHT_VERSION};
pub use loss::{loss, loss_gradient, LossSpec};
pub use nets::{Architecture, Param, ToyModel};
pub use train::{accuracy, train_toy, TrainReport, TrainSpec};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid3D, Image};

/// Expected input dimensions of a classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InputShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl InputShape {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Self { height, width, channels }
    }

    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn of(x: &Grid3D) -> Self {
        let (height, width, channels) = x.dims();
        Self { height, width, channels }
    }

    pub(crate) fn check(&self, x: &Grid3D) -> Result<()> {
        if InputShape::of(x) == *self {
            Ok(())
        } else {
            Err(Error::shape(format!("model expects {self:?}, got {:?}", InputShape::of(x))))
        }
    }
}

/// Class scores produced by a forward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Logits(pub Vec<f64>);

impl Logits {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Index of the strictly largest score, or `None` if the maximum is tied.
    pub fn argmax_unique(&self) -> Option<usize> {
        let mut best: Option<usize> = None;
        let mut tied = false;
        for (i, &v) in self.0.iter().enumerate() {
            match best {
                None => best = Some(i),
                Some(b) if v > self.0[b] => {
                    best = Some(i);
                    tied = false;
                }
                Some(b) if v == self.0[b] => tied = true,
                _ => {}
            }
        }
        if tied {
            None
        } else {
            best
        }
    }
}

/// A differentiable classifier `M: X -> Y`.
///
/// Implementations must be deterministic and safe to call concurrently.
pub trait Classifier: Send + Sync {
    fn input_shape(&self) -> InputShape;

    fn num_classes(&self) -> usize;

    fn forward(&self, x: &Image) -> Result<Logits>;

    /// Vector-Jacobian product: gradient w.r.t. the input of `d_logits · M(x)`.
    fn backward(&self, x: &Image, d_logits: &[f64]) -> Result<Grid3D>;

    fn loss(&self, x: &Image, label: usize, spec: LossSpec) -> Result<f64> {
        loss(&self.forward(x)?, label, spec)
    }

    fn input_gradient(&self, x: &Image, label: usize, spec: LossSpec) -> Result<Grid3D> {
        let logits = self.forward(x)?;
        let d = loss_gradient(&logits, label, spec)?;
        self.backward(x, &d)
    }

    /// Untargeted success predicate: the unique argmax differs from `label`.
    /// A tied argmax counts as not fooled.
    fn is_fooled(&self, x: &Image, label: usize) -> Result<bool> {
        Ok(matches!(self.forward(x)?.argmax_unique(), Some(c) if c != label))
    }

    fn predict(&self, x: &Image) -> Result<Option<usize>> {
        Ok(self.forward(x)?.argmax_unique())
    }
}


/// A classifier bound to one labelled sample and an attack criterion.
#[derive(Clone, Copy)]
pub struct AttackTarget<'a> {
    pub model: &'a dyn Classifier,
    pub x: &'a Image,
    pub label: usize,
    pub loss: LossSpec,
}

impl<'a> AttackTarget<'a> {
    pub fn new(model: &'a dyn Classifier, x: &'a Image, label: usize, loss: LossSpec) -> Result<Self> {
        model.input_shape().check(x)?;
        if label >= model.num_classes() {
            return Err(Error::invalid(format!("label {label} out of range for {} classes", model.num_classes())));
        }
        Ok(Self { model, x, label, loss })
    }

    /// `ℓ(M(x + δ), y)`.
    pub fn loss_at(&self, delta: &Grid3D) -> Result<f64> {
        self.model.loss(&self.x.add(delta)?, self.label, self.loss)
    }

    /// `ℓ(M(x + B⊙δ), y)` where `B` is given by its set pixel indices.
    pub fn loss_with_pixels(&self, delta: &Grid3D, pixels: &[usize]) -> Result<f64> {
        let mut xd = self.x.clone();
        for &p in pixels {
            for (a, &d) in xd.pixel_mut(p).iter_mut().zip(delta.pixel(p)) {
                *a += d;
            }
        }
        self.model.loss(&xd, self.label, self.loss)
    }

    pub fn is_fooled(&self, delta: &Grid3D) -> Result<bool> {
        self.model.is_fooled(&self.x.add(delta)?, self.label)
    }
}

impl std::fmt::Debug for AttackTarget<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AttackTarget").field("label", &self.label).field("loss", &self.loss).finish_non_exhaustive()
    }
}
