use serde::{Deserialize, Serialize};

use super::Logits;
use crate::error::{Error, Result};

/// Attack criterion. Larger is more adversarial for both kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossSpec {
    #[default]
    CrossEntropy,
    /// `max_{c != y} z_c - z_y`; positive exactly when the sample is misclassified.
    Margin,
}

impl std::str::FromStr for LossSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ce" | "cross-entropy" | "xent" => Ok(LossSpec::CrossEntropy),
            "margin" => Ok(LossSpec::Margin),
            other => Err(Error::invalid(format!("unknown loss '{other}' (expected cross-entropy or margin)"))),
        }
    }
}

fn check_label(logits: &Logits, label: usize) -> Result<()> {
    if label >= logits.len() {
        return Err(Error::invalid(format!("label {label} out of range for {} classes", logits.len())));
    }
    if logits.len() < 2 {
        return Err(Error::invalid("need at least two classes"));
    }
    Ok(())
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Strongest wrong class; ties go to the lowest index.
fn runner_up(z: &[f64], label: usize) -> usize {
    let mut best = usize::MAX;
    for (c, &v) in z.iter().enumerate() {
        if c != label && (best == usize::MAX || v > z[best]) {
            best = c;
        }
    }
    best
}

pub fn loss(logits: &Logits, label: usize, spec: LossSpec) -> Result<f64> {
    check_label(logits, label)?;
    let z = logits.as_slice();
    Ok(match spec {
        LossSpec::CrossEntropy => (log_sum_exp(z) - z[label]).max(0.0),
        LossSpec::Margin => z[runner_up(z, label)] - z[label],
    })
}

/// Gradient of [`loss`] with respect to the logits.
pub fn loss_gradient(logits: &Logits, label: usize, spec: LossSpec) -> Result<Vec<f64>> {
    check_label(logits, label)?;
    let z = logits.as_slice();
    Ok(match spec {
        LossSpec::CrossEntropy => {
            let lse = log_sum_exp(z);
            let mut g: Vec<f64> = z.iter().map(|v| (v - lse).exp()).collect();
            g[label] -= 1.0;
            g
        }
        LossSpec::Margin => {
            let mut g = vec![0.0; z.len()];
            g[runner_up(z, label)] = 1.0;
            g[label] = -1.0;
            g
        }
    })
}
