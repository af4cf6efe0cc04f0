//! Dense grid primitives shared by the rest of the crate.
//!
//! [`Grid2D`] holds per-pixel quantities (scores, counts, masks before they are
//! typed); [`Grid3D`] holds images and perturbations in row-major
//! height × width × channel order, so the channels of one pixel are contiguous.

mod rng;

pub use rng::{sample_k_without_replacement, RngState};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A height × width grid of finite reals in row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid2D {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl Grid2D {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::shape(format!("grid dims must be positive, got {height}x{width}")));
        }
        if values.len() != height * width {
            return Err(Error::shape(format!(
                "{height}x{width} grid needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("grid cell {i} is {}", values[i])));
        }
        Ok(Self { height, width, values })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        assert!(height > 0 && width > 0 && value.is_finite());
        Self { height, width, values: vec![value; height * width] }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.values[row * self.width + col] = value;
    }

    /// Extract the `height × width` window whose top-left corner is `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Grid2D> {
        if top + height > self.height || left + width > self.width || height == 0 || width == 0 {
            return Err(Error::shape(format!(
                "crop {height}x{width} at ({top},{left}) outside {}x{} grid",
                self.height, self.width
            )));
        }
        let mut values = Vec::with_capacity(height * width);
        for r in top..top + height {
            values.extend_from_slice(&self.values[r * self.width + left..r * self.width + left + width]);
        }
        Ok(Grid2D { height, width, values })
    }
}

/// Amounts of padding added on each side by [`pad2d`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Padding {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Padding {
    pub fn new(top: usize, bottom: usize, left: usize, right: usize) -> Self {
        Self { top, bottom, left, right }
    }
}

pub fn pad2d(g: &Grid2D, pad: Padding, fill: f64) -> Grid2D {
    let height = g.height + pad.top + pad.bottom;
    let width = g.width + pad.left + pad.right;
    let mut values = vec![fill; height * width];
    for r in 0..g.height {
        let dst = (r + pad.top) * width + pad.left;
        values[dst..dst + g.width].copy_from_slice(&g.values[r * g.width..(r + 1) * g.width]);
    }
    Grid2D { height, width, values }
}

fn pool2d(g: &Grid2D, kh: usize, kw: usize, init: f64, fold: impl Fn(f64, f64) -> f64) -> Result<Grid2D> {
    if kh == 0 || kw == 0 || kh > g.height || kw > g.width {
        return Err(Error::shape(format!(
            "kernel {kh}x{kw} does not fit in {}x{} grid",
            g.height, g.width
        )));
    }
    let oh = g.height - kh + 1;
    let ow = g.width - kw + 1;
    let mut values = Vec::with_capacity(oh * ow);
    for i in 0..oh {
        for j in 0..ow {
            let mut acc = init;
            for r in i..i + kh {
                for &v in &g.values[r * g.width + j..r * g.width + j + kw] {
                    acc = fold(acc, v);
                }
            }
            values.push(acc);
        }
    }
    Ok(Grid2D { height: oh, width: ow, values })
}

/// Stride-1 max pooling without implicit padding.
pub fn max_pool2d(g: &Grid2D, kh: usize, kw: usize) -> Result<Grid2D> {
    pool2d(g, kh, kw, f64::NEG_INFINITY, f64::max)
}

/// Stride-1 sum pooling without implicit padding.
pub fn sum_pool2d(g: &Grid2D, kh: usize, kw: usize) -> Result<Grid2D> {
    pool2d(g, kh, kw, 0.0, |a, b| a + b)
}

/// Row-major indices of the `k` largest cells, sorted by descending value and
/// then ascending index.
pub fn top_k_cells(g: &Grid2D, k: usize) -> Result<Vec<usize>> {
    top_k_indices(&g.values, k)
}

/// [`top_k_cells`] over a raw slice. Accepts `-inf` entries, which rank last.
pub fn top_k_indices(values: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > values.len() {
        return Err(Error::invalid(format!("top-k needs 0 < k <= {}, got {k}", values.len())));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("NaN in top-k input".into()));
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    let cmp = |a: &usize, b: &usize| values[*b].total_cmp(&values[*a]).then(a.cmp(b));
    if k < order.len() {
        order.select_nth_unstable_by(k - 1, cmp);
        order.truncate(k);
    }
    order.sort_by(cmp);
    Ok(order)
}

/// Image or perturbation: height × width × channels reals, channel-minor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid3D {
    height: usize,
    width: usize,
    channels: usize,
    values: Vec<f64>,
}

/// Input sample `x`; values are expected in the unit interval.
pub type Image = Grid3D;
/// Additive perturbation `δ`.
pub type Perturbation = Grid3D;

impl Grid3D {
    pub fn new(height: usize, width: usize, channels: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::shape(format!(
                "grid dims must be positive, got {height}x{width}x{channels}"
            )));
        }
        if values.len() != height * width * channels {
            return Err(Error::shape(format!(
                "{height}x{width}x{channels} grid needs {} values, got {}",
                height * width * channels,
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("grid cell {i} is {}", values[i])));
        }
        Ok(Self { height, width, channels, values })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        assert!(height > 0 && width > 0 && channels > 0 && value.is_finite());
        Self { height, width, channels, values: vec![value; height * width * channels] }
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn zeros_like(other: &Grid3D) -> Self {
        Self::zeros(other.height, other.width, other.channels)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Mutable access to the raw values. Callers must keep them finite.
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.values[(row * self.width + col) * self.channels + ch]
    }

    /// Channels of the pixel with row-major index `pixel`.
    #[inline]
    pub fn pixel(&self, pixel: usize) -> &[f64] {
        &self.values[pixel * self.channels..(pixel + 1) * self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, pixel: usize) -> &mut [f64] {
        &mut self.values[pixel * self.channels..(pixel + 1) * self.channels]
    }

    pub fn same_shape(&self, other: &Grid3D) -> bool {
        self.dims() == other.dims()
    }

    fn check_shape(&self, other: &Grid3D) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::shape(format!("{:?} vs {:?}", self.dims(), other.dims())))
        }
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Grid3D {
        self.with_values(self.values.iter().map(|&v| f(v)).collect())
    }

    fn zip(&self, other: &Grid3D, f: impl Fn(f64, f64) -> f64) -> Result<Grid3D> {
        self.check_shape(other)?;
        let values = self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect();
        Ok(self.with_values(values))
    }

    fn with_values(&self, values: Vec<f64>) -> Grid3D {
        Grid3D { height: self.height, width: self.width, channels: self.channels, values }
    }

    /// Element-wise sign with `sign(0) = 0`.
    pub fn sign(&self) -> Grid3D {
        self.map(|v| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 })
    }

    pub fn scale(&self, factor: f64) -> Grid3D {
        self.map(|v| v * factor)
    }

    pub fn add(&self, other: &Grid3D) -> Result<Grid3D> {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Grid3D) -> Result<Grid3D> {
        self.zip(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Grid3D) -> Result<Grid3D> {
        self.zip(other, |a, b| a * b)
    }

    /// Clamp every value into `[lo, hi]`.
    pub fn clip_scalar(&self, lo: f64, hi: f64) -> Grid3D {
        self.map(|v| v.clamp(lo, hi))
    }

    /// Clamp cell-wise into `[lo[i], hi[i]]`.
    pub fn clip(&self, lo: &Grid3D, hi: &Grid3D) -> Result<Grid3D> {
        self.check_shape(lo)?;
        self.check_shape(hi)?;
        let values = self
            .values
            .iter()
            .zip(lo.values.iter().zip(&hi.values))
            .map(|(&v, (&l, &h))| v.max(l).min(h))
            .collect();
        Ok(self.with_values(values))
    }

    /// Project a perturbation so that `x + δ` stays in the unit interval,
    /// i.e. `clip(δ, −x, 1 − x)`, in place.
    pub fn clip_to_box(&mut self, x: &Image) -> Result<()> {
        self.check_shape(x)?;
        for (d, &xv) in self.values.iter_mut().zip(&x.values) {
            *d = d.max(-xv).min(1.0 - xv);
        }
        Ok(())
    }

    /// Number of pixels with at least one non-zero channel.
    pub fn pixel_l0(&self) -> usize {
        self.values.chunks(self.channels).filter(|px| px.iter().any(|&v| v != 0.0)).count()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}
