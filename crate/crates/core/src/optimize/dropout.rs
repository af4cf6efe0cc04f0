//! Per-pixel dropout multipliers used while optimizing a perturbation that is
//! about to be trimmed. All families have mean equal to the keep rate `p`, and
//! none rescales by `1/p`: the multipliers stand in for the binary projection
//! `B⊙δ`, not for activation-preserving dropout.
//!
//! - Bernoulli: `m ∈ {0, 1}`, `P(m = 1) = p`.
//! - Continuous Bernoulli: `m ∈ (0, 1)` with density `∝ λ^m (1-λ)^(1-m)`;
//!   `λ` is found by bisection so that the mean is `p`.
//! - Gaussian: rectified normal `max(0, z)`, `z ~ N(μ, σ²)`, with `(μ, σ)`
//!   solved so the rectified variable has mean `p` and standard deviation
//!   `sqrt(p(1-p))` (those of the Bernoulli it replaces).

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::grid::{Grid2D, RngState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DropoutFamily {
    Identity,
    #[default]
    Bernoulli,
    ContinuousBernoulli,
    Gaussian,
}

impl std::str::FromStr for DropoutFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" | "none" => Ok(DropoutFamily::Identity),
            "bernoulli" => Ok(DropoutFamily::Bernoulli),
            "continuous-bernoulli" | "cb" => Ok(DropoutFamily::ContinuousBernoulli),
            "gaussian" => Ok(DropoutFamily::Gaussian),
            other => Err(Error::invalid(format!("unknown dropout family '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DropoutSpec {
    pub family: DropoutFamily,
    pub keep: f64,
}

/// Tolerance of the continuous-Bernoulli parameter search.
const LAMBDA_TOL: f64 = 1e-10;

impl DropoutSpec {
    pub fn new(family: DropoutFamily, keep: f64) -> Result<Self> {
        if !(keep > 0.0 && keep <= 1.0) {
            return Err(Error::invalid(format!("dropout keep rate must be in (0, 1], got {keep}")));
        }
        Ok(Self { family, keep })
    }

    pub fn identity() -> Self {
        Self { family: DropoutFamily::Identity, keep: 1.0 }
    }

    /// Whether every multiplier is exactly one.
    pub fn is_identity(&self) -> bool {
        self.family == DropoutFamily::Identity || self.keep == 1.0
    }

    /// Pre-solve the family parameters.
    pub fn sampler(&self) -> Result<DropoutSampler> {
        if self.is_identity() {
            return Ok(DropoutSampler::Ones);
        }
        let p = self.keep;
        Ok(match self.family {
            DropoutFamily::Identity => DropoutSampler::Ones,
            DropoutFamily::Bernoulli => DropoutSampler::Bernoulli { p },
            DropoutFamily::ContinuousBernoulli => DropoutSampler::ContinuousBernoulli { lambda: cb_lambda_for_mean(p) },
            DropoutFamily::Gaussian => {
                let (mu, sigma) = rectified_normal_params(p)?;
                DropoutSampler::RectifiedNormal { mu, sigma }
            }
        })
    }

    /// `height × width` multipliers.
    pub fn sample(&self, height: usize, width: usize, rng: &mut RngState) -> Result<Grid2D> {
        Ok(self.sampler()?.sample(height, width, rng))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DropoutSampler {
    Ones,
    Bernoulli { p: f64 },
    ContinuousBernoulli { lambda: f64 },
    RectifiedNormal { mu: f64, sigma: f64 },
}

impl DropoutSampler {
    pub fn draw(&self, rng: &mut RngState) -> f64 {
        match *self {
            DropoutSampler::Ones => 1.0,
            DropoutSampler::Bernoulli { p } => (rng.uniform(0.0, 1.0) < p) as u8 as f64,
            DropoutSampler::ContinuousBernoulli { lambda } => cb_inverse_cdf(lambda, rng.uniform(0.0, 1.0)),
            DropoutSampler::RectifiedNormal { mu, sigma } => {
                let z: f64 = StandardNormal.sample(rng);
                (mu + sigma * z).max(0.0)
            }
        }
    }

    pub fn sample(&self, height: usize, width: usize, rng: &mut RngState) -> Grid2D {
        let values = (0..height * width).map(|_| self.draw(rng)).collect();
        Grid2D::new(height, width, values).expect("multipliers are finite")
    }
}

/// Mean of the continuous Bernoulli distribution with parameter `lambda`.
pub fn cb_mean(lambda: f64) -> f64 {
    let t = 1.0 - 2.0 * lambda;
    if t.abs() < 1e-2 {
        // Series around λ = 1/2; the closed form cancels catastrophically there.
        0.5 - t / 6.0 - 2.0 * t.powi(3) / 45.0
    } else {
        lambda / (2.0 * lambda - 1.0) + 1.0 / (2.0 * t.atanh())
    }
}

fn cb_lambda_for_mean(p: f64) -> f64 {
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    while hi - lo > LAMBDA_TOL {
        let mid = 0.5 * (lo + hi);
        if cb_mean(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn cb_inverse_cdf(lambda: f64, u: f64) -> f64 {
    if (lambda - 0.5).abs() < 1e-7 {
        return u;
    }
    let num = (u * (2.0 * lambda - 1.0) / (1.0 - lambda)).ln_1p();
    let den = (lambda / (1.0 - lambda)).ln();
    (num / den).clamp(0.0, 1.0)
}

fn std_normal_cdf(a: f64) -> f64 {
    0.5 * erfc(-a / std::f64::consts::SQRT_2)
}

fn std_normal_pdf(a: f64) -> f64 {
    (-0.5 * a * a).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// First and second raw moments of `max(0, z)`, `z ~ N(a, 1)`.
fn rectified_moments(a: f64) -> (f64, f64) {
    let (cdf, pdf) = (std_normal_cdf(a), std_normal_pdf(a));
    (a * cdf + pdf, (a * a + 1.0) * cdf + a * pdf)
}

/// `(μ, σ)` such that `max(0, N(μ, σ²))` has mean `p` and variance `p(1-p)`.
///
/// With `a = μ/σ`, matching both moments reduces to `E2(a) / E1(a)² = 1/p`,
/// whose left side falls monotonically from `+∞` to `1` as `a` grows.
pub fn rectified_normal_params(p: f64) -> Result<(f64, f64)> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::invalid(format!("rectified normal needs p in (0, 1), got {p}")));
    }
    let target = 1.0 / p;
    let ratio = |a: f64| {
        let (m1, m2) = rectified_moments(a);
        m2 / (m1 * m1)
    };
    let (mut lo, mut hi) = (-12.0f64, 1e4f64);
    if !(ratio(lo) > target && ratio(hi) < target) {
        return Err(Error::invalid(format!("cannot match rectified normal moments for p = {p}")));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if ratio(mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let a = 0.5 * (lo + hi);
    let sigma = p / rectified_moments(a).0;
    Ok((a * sigma, sigma))
}
