//! Pixel masks and patch anchors.
//!
//! A [`PixelMask`] selects pixels (all channels of a selected pixel move
//! together). A patch is the `kh × kw` footprint whose TOP-LEFT corner is its
//! anchor; an [`AnchorMask`] marks anchors on the `(H-kh+1) × (W-kw+1)` grid of
//! positions where a footprint fits inside the image.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{max_pool2d, pad2d, sample_k_without_replacement, Grid2D, Grid3D, Padding, RngState};

/// A binary height × width grid.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BitGrid {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BitGrid {
    fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 || bits.len() != height * width {
            return Err(Error::shape(format!("{height}x{width} bit grid with {} bits", bits.len())));
        }
        Ok(Self { height, width, bits })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    /// Number of set cells.
    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    #[inline]
    pub fn is_set(&self, index: usize) -> bool {
        self.bits[index]
    }

    /// Row-major indices of set cells, ascending.
    pub fn support(&self) -> Vec<usize> {
        self.bits.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect()
    }

    pub fn to_grid(&self) -> Grid2D {
        Grid2D::new(self.height, self.width, self.bits.iter().map(|&b| b as u8 as f64).collect())
            .expect("bit grid dims are positive")
    }

    fn from_grid(g: &Grid2D) -> Self {
        Self { height: g.height(), width: g.width(), bits: g.values().iter().map(|&v| v != 0.0).collect() }
    }

    fn from_indices(height: usize, width: usize, indices: &[usize]) -> Result<Self> {
        let mut bits = vec![false; height * width];
        for &i in indices {
            *bits.get_mut(i).ok_or_else(|| Error::shape(format!("index {i} outside {height}x{width} grid")))? = true;
        }
        Self::new(height, width, bits)
    }

    /// Run-length encoding: `"HxW:r0,r1,..."` with runs alternating between
    /// unset and set cells in row-major order, starting with an (possibly
    /// zero-length) unset run.
    pub fn to_rle(&self) -> String {
        let mut runs = Vec::new();
        let mut current = false;
        let mut run = 0usize;
        for &b in &self.bits {
            if b == current {
                run += 1;
            } else {
                runs.push(run.to_string());
                current = b;
                run = 1;
            }
        }
        runs.push(run.to_string());
        format!("{}x{}:{}", self.height, self.width, runs.join(","))
    }

    fn from_rle(s: &str) -> Result<Self> {
        let bad = |m: &str| Error::invalid(format!("bad mask encoding '{s}': {m}"));
        let (dims, body) = s.split_once(':').ok_or_else(|| bad("missing ':'"))?;
        let (h, w) = dims.split_once('x').ok_or_else(|| bad("missing 'x' in dims"))?;
        let h: usize = h.parse().map_err(|_| bad("height"))?;
        let w: usize = w.parse().map_err(|_| bad("width"))?;
        let mut bits = Vec::with_capacity(h * w);
        let mut value = false;
        for run in body.split(',') {
            let n: usize = run.parse().map_err(|_| bad("run length"))?;
            if bits.len() + n > h * w {
                return Err(bad("runs exceed grid size"));
            }
            bits.extend(std::iter::repeat_n(value, n));
            value = !value;
        }
        if bits.len() != h * w {
            return Err(bad("runs do not cover the grid"));
        }
        Self::new(h, w, bits)
    }
}

macro_rules! bit_grid_newtype {
    ($name:ident) => {
        impl std::ops::Deref for $name {
            type Target = BitGrid;

            fn deref(&self) -> &BitGrid {
                &self.0
            }
        }

        impl $name {
            pub fn empty(height: usize, width: usize) -> Result<Self> {
                BitGrid::new(height, width, vec![false; height * width]).map($name)
            }

            pub fn full(height: usize, width: usize) -> Result<Self> {
                BitGrid::new(height, width, vec![true; height * width]).map($name)
            }

            pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
                BitGrid::new(height, width, bits).map($name)
            }

            /// Mask with exactly the given row-major cells set.
            pub fn from_indices(height: usize, width: usize, indices: &[usize]) -> Result<Self> {
                BitGrid::from_indices(height, width, indices).map($name)
            }

            pub fn from_cells(height: usize, width: usize, cells: &[(usize, usize)]) -> Result<Self> {
                let idx: Vec<usize> = cells.iter().map(|&(r, c)| r * width + c).collect();
                if cells.iter().any(|&(r, c)| r >= height || c >= width) {
                    return Err(Error::shape(format!("cell outside {height}x{width} grid")));
                }
                Self::from_indices(height, width, &idx)
            }

            pub fn from_rle(s: &str) -> Result<Self> {
                BitGrid::from_rle(s).map($name)
            }

            /// Set cells as `(row, col)` pairs, row-major order.
            pub fn cells(&self) -> Vec<(usize, usize)> {
                self.support().into_iter().map(|i| (i / self.width(), i % self.width())).collect()
            }
        }

        impl Serialize for $name {
            fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
                s.serialize_str(&self.to_rle())
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                $name::from_rle(&s).map_err(serde::de::Error::custom)
            }
        }
    };
}

/// Binary selector over image pixels (`B`).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PixelMask(BitGrid);

/// Binary selector over valid top-left patch anchors.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct AnchorMask(BitGrid);

bit_grid_newtype!(PixelMask);
bit_grid_newtype!(AnchorMask);

impl PixelMask {
    pub fn is_subset_of(&self, other: &PixelMask) -> bool {
        self.bits.len() == other.bits.len() && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    /// Pixels set in both masks.
    pub fn intersection(&self, other: &PixelMask) -> Result<PixelMask> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::shape("mask dims differ"));
        }
        Ok(PixelMask(BitGrid {
            height: self.height,
            width: self.width,
            bits: self.bits.iter().zip(&other.bits).map(|(&a, &b)| a && b).collect(),
        }))
    }

    /// Pixels of `delta` with at least one non-zero channel.
    pub fn nonzero_pixels(delta: &Grid3D) -> PixelMask {
        let bits = (0..delta.pixels()).map(|p| delta.pixel(p).iter().any(|&v| v != 0.0)).collect();
        PixelMask(BitGrid { height: delta.height(), width: delta.width(), bits })
    }
}

/// Patch kernel `K = (kh, kw)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct KernelSpec {
    pub kh: usize,
    pub kw: usize,
}

impl KernelSpec {
    pub fn new(kh: usize, kw: usize) -> Result<Self> {
        if kh == 0 || kw == 0 {
            return Err(Error::invalid(format!("kernel dims must be positive, got {kh}x{kw}")));
        }
        Ok(Self { kh, kw })
    }

    /// Pixels per footprint.
    pub fn size(&self) -> usize {
        self.kh * self.kw
    }

    pub fn fits(&self, height: usize, width: usize) -> bool {
        self.kh <= height && self.kw <= width
    }

    fn check_fits(&self, height: usize, width: usize) -> Result<()> {
        if self.fits(height, width) {
            Ok(())
        } else {
            Err(Error::shape(format!("kernel {self} larger than {height}x{width} image")))
        }
    }

    /// Anchor-grid dims for an image of the given size.
    pub fn anchor_dims(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        self.check_fits(height, width)?;
        Ok((height - self.kh + 1, width - self.kw + 1))
    }

    /// Number of patches for an `eps0` pixel budget; `eps0` must be a multiple
    /// of the footprint size.
    pub fn patches_for_budget(&self, eps0: usize) -> Result<usize> {
        if eps0 == 0 || !eps0.is_multiple_of(self.size()) {
            return Err(Error::invalid(format!(
                "eps0 = {eps0} is not divisible by the {self} kernel size {}",
                self.size()
            )));
        }
        Ok(eps0 / self.size())
    }

    /// Row-major pixel indices of the footprint anchored at `(row, col)`.
    pub fn footprint(&self, row: usize, col: usize, width: usize) -> impl Iterator<Item = usize> + '_ {
        let kw = self.kw;
        (row..row + self.kh).flat_map(move |r| (col..col + kw).map(move |c| r * width + c))
    }
}

impl std::fmt::Display for KernelSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}", self.kh, self.kw)
    }
}

impl std::str::FromStr for KernelSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| Error::invalid(format!("bad kernel '{s}', expected e.g. 2x2")))?;
        let parse = |t: &str| t.trim().parse::<usize>().map_err(|_| Error::invalid(format!("bad kernel '{s}'")));
        KernelSpec::new(parse(h)?, parse(w)?)
    }
}

/// Project `delta` onto the mask: unset pixels lose all channels.
pub fn apply_mask(mask: &PixelMask, delta: &Grid3D) -> Result<Grid3D> {
    if (mask.height(), mask.width()) != (delta.height(), delta.width()) {
        return Err(Error::shape(format!(
            "mask {}x{} vs perturbation {:?}",
            mask.height(),
            mask.width(),
            delta.dims()
        )));
    }
    let mut out = delta.clone();
    for p in 0..mask.len() {
        if !mask.is_set(p) {
            out.pixel_mut(p).iter_mut().for_each(|v| *v = 0.0);
        }
    }
    Ok(out)
}

/// Anchors whose footprint intersects the mask support (`MaxPool(B, K)`).
pub fn anchor_grid(mask: &PixelMask, k: KernelSpec) -> Result<AnchorMask> {
    k.check_fits(mask.height(), mask.width())?;
    let pooled = max_pool2d(&mask.to_grid(), k.kh, k.kw)?;
    Ok(AnchorMask(BitGrid::from_grid(&pooled)))
}

/// Union of the footprints of every set anchor, computed as
/// `MaxPool(Pad(A, (kh-1, kh-1), (kw-1, kw-1)), K)`.
pub fn expand_anchors(anchors: &AnchorMask, k: KernelSpec, height: usize, width: usize) -> Result<PixelMask> {
    let (ah, aw) = k.anchor_dims(height, width)?;
    if (anchors.height(), anchors.width()) != (ah, aw) {
        return Err(Error::shape(format!(
            "anchor grid {}x{} inconsistent with {height}x{width} image and {k} kernel (expected {ah}x{aw})",
            anchors.height(),
            anchors.width()
        )));
    }
    let padded = pad2d(&anchors.to_grid(), Padding::new(k.kh - 1, k.kh - 1, k.kw - 1, k.kw - 1), 0.0);
    let pooled = max_pool2d(&padded, k.kh, k.kw)?;
    Ok(PixelMask(BitGrid::from_grid(&pooled)))
}

/// Direct footprint union for a list of anchor indices on the anchor grid.
pub(crate) fn footprint_union(anchor_idx: &[usize], k: KernelSpec, height: usize, width: usize) -> PixelMask {
    let aw = width - k.kw + 1;
    let mut bits = vec![false; height * width];
    for &a in anchor_idx {
        for p in k.footprint(a / aw, a % aw, width) {
            bits[p] = true;
        }
    }
    PixelMask(BitGrid { height, width, bits })
}

/// Uniformly random `k`-subset of the support.
pub fn sample_sparse_mask(support: &PixelMask, k: usize, rng: &mut RngState) -> Result<PixelMask> {
    let chosen = sample_k_without_replacement(&support.support(), k, rng)?;
    PixelMask::from_indices(support.height(), support.width(), &chosen)
}

/// Union of `n_patches` distinct anchors drawn uniformly from `anchors`.
/// Image dims are implied by the anchor grid and the kernel.
pub fn sample_patch_mask(anchors: &AnchorMask, n_patches: usize, k: KernelSpec, rng: &mut RngState) -> Result<PixelMask> {
    let (height, width) = (anchors.height() + k.kh - 1, anchors.width() + k.kw - 1);
    let chosen = sample_k_without_replacement(&anchors.support(), n_patches, rng)?;
    Ok(footprint_union(&chosen, k, height, width))
}

/// Result of [`validate_patch_mask`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchValidation {
    pub valid: bool,
    /// One set of `n_patches` distinct anchors `(row, col)` whose footprints
    /// union to the mask, when valid.
    pub witness: Option<Vec<(usize, usize)>>,
}

/// Decide whether `mask` is the union of exactly `n_patches` distinct
/// kernel footprints (overlap allowed).
///
/// Only anchors whose footprint lies inside the mask can take part. A union
/// of `m` such footprints can be padded to any `n` with `m <= n <= #candidates`
/// by adding redundant candidates, so the search looks for a minimum cover by
/// branch and bound: the first uncovered pixel must be covered by one of the
/// candidates containing it.
pub fn validate_patch_mask(mask: &PixelMask, k: KernelSpec, n_patches: usize) -> PatchValidation {
    let invalid = PatchValidation { valid: false, witness: None };
    let (h, w) = (mask.height(), mask.width());
    if !k.fits(h, w) {
        return invalid;
    }
    if mask.count() == 0 {
        return if n_patches == 0 { PatchValidation { valid: true, witness: Some(vec![]) } } else { invalid };
    }
    if n_patches == 0 {
        return invalid;
    }
    let aw = w - k.kw + 1;
    let candidates: Vec<usize> = (0..(h - k.kh + 1) * aw)
        .filter(|&a| k.footprint(a / aw, a % aw, w).all(|p| mask.is_set(p)))
        .collect();
    if candidates.len() < n_patches {
        return invalid;
    }
    let mut covering: Vec<Vec<usize>> = vec![Vec::new(); h * w];
    for (ci, &a) in candidates.iter().enumerate() {
        for p in k.footprint(a / aw, a % aw, w) {
            covering[p].push(ci);
        }
    }
    if mask.support().iter().any(|&p| covering[p].is_empty()) {
        return invalid;
    }

    struct Search<'a> {
        k: KernelSpec,
        w: usize,
        aw: usize,
        candidates: &'a [usize],
        covering: &'a [Vec<usize>],
        support: Vec<usize>,
        best: Option<Vec<usize>>,
    }

    impl Search<'_> {
        fn run(&mut self, cover: &mut [u32], chosen: &mut Vec<usize>, limit: usize) {
            if let Some(best) = &self.best {
                if chosen.len() >= best.len() {
                    return;
                }
            }
            let Some(&p) = self.support.iter().find(|&&p| cover[p] == 0) else {
                self.best = Some(chosen.clone());
                return;
            };
            if chosen.len() == limit {
                return;
            }
            for &ci in &self.covering[p] {
                let a = self.candidates[ci];
                for q in self.k.footprint(a / self.aw, a % self.aw, self.w) {
                    cover[q] += 1;
                }
                chosen.push(ci);
                self.run(cover, chosen, limit);
                chosen.pop();
                for q in self.k.footprint(a / self.aw, a % self.aw, self.w) {
                    cover[q] -= 1;
                }
            }
        }
    }

    let mut search = Search { k, w, aw, candidates: &candidates, covering: &covering, support: mask.support(), best: None };
    search.run(&mut vec![0; h * w], &mut Vec::new(), n_patches);
    let Some(mut chosen) = search.best else {
        return invalid;
    };
    for ci in 0..candidates.len() {
        if chosen.len() == n_patches {
            break;
        }
        if !chosen.contains(&ci) {
            chosen.push(ci);
        }
    }
    let mut witness: Vec<(usize, usize)> = chosen.iter().map(|&ci| (candidates[ci] / aw, candidates[ci] % aw)).collect();
    witness.sort_unstable();
    PatchValidation { valid: true, witness: Some(witness) }
}
