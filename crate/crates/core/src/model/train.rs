use serde::{Deserialize, Serialize};

use super::nets::{Architecture, ToyModel};
use super::{loss, loss_gradient, Classifier, InputShape, Logits, LossSpec};
use crate::error::{Error, Result};
use crate::grid::{Image, RngState};

/// Mini-batch SGD with momentum on the cross-entropy loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainSpec {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub momentum: f64,
}

impl Default for TrainSpec {
    fn default() -> Self {
        Self { epochs: 10, learning_rate: 0.05, batch_size: 32, momentum: 0.9 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean training loss of each epoch.
    pub epoch_losses: Vec<f64>,
    pub train_accuracy: f64,
}

/// Fraction of samples whose unique argmax equals the label.
pub fn accuracy<M: Classifier + ?Sized>(model: &M, images: &[Image], labels: &[usize]) -> Result<f64> {
    if images.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for (x, &y) in images.iter().zip(labels) {
        if model.predict(x)? == Some(y) {
            correct += 1;
        }
    }
    Ok(correct as f64 / images.len() as f64)
}

/// Train a toy classifier. Initialization and batch order come from `rng`, so
/// the result is a pure function of the inputs and the seed. With zero epochs
/// the freshly initialized model is returned.
pub fn train_toy(
    images: &[Image],
    labels: &[usize],
    classes: usize,
    arch: Architecture,
    spec: &TrainSpec,
    rng: &mut RngState,
) -> Result<(ToyModel, TrainReport)> {
    if images.is_empty() || images.len() != labels.len() {
        return Err(Error::invalid(format!("{} images vs {} labels", images.len(), labels.len())));
    }
    if spec.batch_size == 0 || spec.learning_rate.is_nan() || spec.learning_rate <= 0.0 {
        return Err(Error::invalid("batch size and learning rate must be positive"));
    }
    let shape = InputShape::of(&images[0]);
    for x in images {
        shape.check(x)?;
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::invalid(format!("label {bad} out of range for {classes} classes")));
    }

    let mut model = ToyModel::init(arch, shape, classes, &mut rng.fork(0))?;
    let mut velocity: Vec<Vec<f64>> = model.params().iter().map(|p| vec![0.0; p.data.len()]).collect();
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut epoch_losses = Vec::with_capacity(spec.epochs);

    for epoch in 0..spec.epochs {
        let mut shuffle = rng.fork(1 + epoch as u64);
        for i in (1..order.len()).rev() {
            order.swap(i, shuffle.below(i + 1));
        }
        let mut total = 0.0;
        for batch in order.chunks(spec.batch_size) {
            let mut grads: Vec<Vec<f64>> = model.params().iter().map(|p| vec![0.0; p.data.len()]).collect();
            for &i in batch {
                let y = labels[i];
                let mut sample_loss = 0.0;
                model.forward_with_param_grads(images[i].values(), &mut grads, |z| {
                    let logits = Logits(z.to_vec());
                    sample_loss = loss(&logits, y, LossSpec::CrossEntropy).unwrap_or(f64::NAN);
                    loss_gradient(&logits, y, LossSpec::CrossEntropy).unwrap_or_else(|_| vec![0.0; z.len()])
                });
                total += sample_loss;
            }
            if !total.is_finite() {
                return Err(Error::Divergence { epoch, loss: total });
            }
            let scale = spec.learning_rate / batch.len() as f64;
            for ((p, g), v) in model.params_mut().iter_mut().zip(&grads).zip(&mut velocity) {
                for ((w, &gi), vi) in p.data.iter_mut().zip(g).zip(v.iter_mut()) {
                    *vi = spec.momentum * *vi - scale * gi;
                    *w += *vi;
                }
            }
        }
        let mean = total / images.len() as f64;
        if !mean.is_finite() || model.params().iter().any(|p| p.data.iter().any(|v| !v.is_finite())) {
            return Err(Error::Divergence { epoch, loss: mean });
        }
        epoch_losses.push(mean);
    }
    let train_accuracy = accuracy(&model, images, labels)?;
    Ok((model, TrainReport { epoch_losses, train_accuracy }))
}
