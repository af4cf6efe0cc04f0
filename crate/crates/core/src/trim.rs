//! Point-wise scoring of a dense perturbation and mask extrapolation.
//!
//! Each pixel of the current support is scored by the mean attack loss over
//! random masks that keep it, `E[ℓ(M(x + B⊙δ), y) | p ∈ B]`. Sparse trimming
//! keeps the top-scoring pixels; patch trimming greedily picks the footprint
//! with the largest score sum and zeroes its scores before picking the next
//! one (max-out), so overlapping patches are not credited twice.
//!
//! Monte-Carlo sample `i` always draws its mask from `rng.fork(i)` and the
//! per-sample losses are accumulated in sample order, so sequential and
//! parallel evaluation give bit-identical scores.

use itertools::Itertools;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{sample_k_without_replacement, sum_pool2d, top_k_indices, Grid2D, Perturbation, RngState};
use crate::mask::{anchor_grid, apply_mask, footprint_union, KernelSpec, PixelMask};
use crate::model::AttackTarget;
use crate::par::{self, Execution};

/// Default ceiling on the number of masks the exhaustive scorer enumerates.
pub const DEFAULT_ENUMERATION_CAP: usize = 100_000;

/// Accumulated loss (`BLoss`) and inclusion count (`BCount`) per pixel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreGrid {
    height: usize,
    width: usize,
    loss_sum: Vec<f64>,
    count: Vec<u64>,
}

impl ScoreGrid {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width, loss_sum: vec![0.0; height * width], count: vec![0; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Add one evaluated mask: `BLoss += ℓ·B`, `BCount += B`.
    pub fn accumulate(&mut self, pixels: &[usize], loss: f64) {
        for &p in pixels {
            self.loss_sum[p] += loss;
            self.count[p] += 1;
        }
    }

    pub fn count(&self, pixel: usize) -> u64 {
        self.count[pixel]
    }

    pub fn counts(&self) -> &[u64] {
        &self.count
    }

    pub fn loss_sums(&self) -> &[f64] {
        &self.loss_sum
    }

    /// `BLoss / BCount`, undefined where the pixel was never sampled.
    pub fn average(&self, pixel: usize) -> Option<f64> {
        (self.count[pixel] > 0).then(|| self.loss_sum[pixel] / self.count[pixel] as f64)
    }

    /// Averaged scores with never-sampled pixels at `-inf`.
    pub fn scores(&self) -> Vec<f64> {
        (0..self.count.len()).map(|p| self.average(p).unwrap_or(f64::NEG_INFINITY)).collect()
    }

    /// Pixels with a defined score.
    pub fn scored(&self) -> PixelMask {
        PixelMask::from_bits(self.height, self.width, self.count.iter().map(|&c| c > 0).collect())
            .expect("score grid dims are positive")
    }
}

/// How a score grid was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoringMode {
    MonteCarlo,
    Exhaustive,
}

/// `C(n, k)`, saturating at `u128::MAX`.
pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = match acc.checked_mul((n - i) as u128) {
            Some(v) => v / (i as u128 + 1),
            None => return u128::MAX,
        };
    }
    acc
}

fn check_target(target: &AttackTarget<'_>, delta: &Perturbation, support: &PixelMask) -> Result<()> {
    if !target.x.same_shape(delta) {
        return Err(Error::shape(format!("perturbation {:?} vs input {:?}", delta.dims(), target.x.dims())));
    }
    if (support.height(), support.width()) != (delta.height(), delta.width()) {
        return Err(Error::shape("support mask dims differ from the image"));
    }
    Ok(())
}

/// Evaluate every mask (given as pixel lists) and fold the losses into a grid
/// in input order.
fn evaluate_masks(
    target: &AttackTarget<'_>,
    delta: &Perturbation,
    n: usize,
    exec: Execution,
    mask_of: impl Fn(usize) -> Result<Vec<usize>> + Sync + Send,
) -> Result<ScoreGrid> {
    let evaluated = par::map_indexed(exec, n, |i| {
        let pixels = mask_of(i)?;
        let loss = target.loss_with_pixels(delta, &pixels)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("loss of scoring mask {i}")));
        }
        Ok((pixels, loss))
    });
    let mut grid = ScoreGrid::new(delta.height(), delta.width());
    for item in evaluated {
        let (pixels, loss) = item?;
        grid.accumulate(&pixels, loss);
    }
    Ok(grid)
}

/// Monte-Carlo estimate over `mc` uniformly drawn `l0_next`-subsets of the support.
pub fn pointwise_scores(
    target: &AttackTarget<'_>,
    delta: &Perturbation,
    support: &PixelMask,
    l0_next: usize,
    mc: usize,
    rng: &RngState,
    exec: Execution,
) -> Result<ScoreGrid> {
    check_target(target, delta, support)?;
    let cells = support.support();
    if l0_next >= cells.len() {
        return Err(Error::invalid(format!("nothing to trim: target L0 {l0_next} >= support size {}", cells.len())));
    }
    if mc == 0 {
        return Err(Error::invalid("need at least one Monte-Carlo sample"));
    }
    evaluate_masks(target, delta, mc, exec, |i| sample_k_without_replacement(&cells, l0_next, &mut rng.fork(i as u64)))
}

/// Exact expectation over every `l0_next`-subset of the support.
pub fn exhaustive_scores(
    target: &AttackTarget<'_>,
    delta: &Perturbation,
    support: &PixelMask,
    l0_next: usize,
    cap: usize,
    exec: Execution,
) -> Result<ScoreGrid> {
    check_target(target, delta, support)?;
    let cells = support.support();
    if l0_next >= cells.len() {
        return Err(Error::invalid(format!("nothing to trim: target L0 {l0_next} >= support size {}", cells.len())));
    }
    let total = binomial(cells.len(), l0_next);
    if total > cap as u128 {
        return Err(Error::invalid(format!("C({}, {l0_next}) = {total} masks exceeds enumeration cap {cap}", cells.len())));
    }
    let masks: Vec<Vec<usize>> = cells.iter().copied().combinations(l0_next).collect();
    evaluate_masks(target, delta, masks.len(), exec, |i| Ok(masks[i].clone()))
}

/// Exhaustive when every mask fits in the Monte-Carlo budget, sampled otherwise.
pub fn score_sparse(
    target: &AttackTarget<'_>,
    delta: &Perturbation,
    support: &PixelMask,
    l0_next: usize,
    mc: usize,
    rng: &RngState,
    exec: Execution,
) -> Result<(ScoreGrid, ScoringMode)> {
    if binomial(support.count(), l0_next) <= mc as u128 {
        Ok((exhaustive_scores(target, delta, support, l0_next, mc.max(1), exec)?, ScoringMode::Exhaustive))
    } else {
        Ok((pointwise_scores(target, delta, support, l0_next, mc, rng, exec)?, ScoringMode::MonteCarlo))
    }
}

struct PatchGeometry {
    k: KernelSpec,
    height: usize,
    width: usize,
    anchors: Vec<usize>,
    support: PixelMask,
}

impl PatchGeometry {
    fn new(delta: &Perturbation, support: &PixelMask, k: KernelSpec, n_patches: usize) -> Result<Self> {
        let anchors = anchor_grid(support, k)?.support();
        if n_patches > anchors.len() {
            return Err(Error::invalid(format!("{n_patches} patches requested but only {} anchors are valid", anchors.len())));
        }
        Ok(Self { k, height: delta.height(), width: delta.width(), anchors, support: support.clone() })
    }

    /// Pixels of the chosen footprints that lie in the current support.
    fn pixels(&self, chosen_anchor_positions: &[usize]) -> Vec<usize> {
        footprint_union(chosen_anchor_positions, self.k, self.height, self.width)
            .support()
            .into_iter()
            .filter(|&p| self.support.is_set(p))
            .collect()
    }
}

/// Monte-Carlo scores over unions of `n_patches` random anchors of
/// `anchor_grid(support, K)`. Only pixels inside the support are credited.
#[allow(clippy::too_many_arguments)]
pub fn pointwise_scores_patch(
    target: &AttackTarget<'_>,
    delta: &Perturbation,
    support: &PixelMask,
    k: KernelSpec,
    n_patches: usize,
    mc: usize,
    rng: &RngState,
    exec: Execution,
) -> Result<ScoreGrid> {
    check_target(target, delta, support)?;
    if mc == 0 {
        return Err(Error::invalid("need at least one Monte-Carlo sample"));
    }
    let geo = PatchGeometry::new(delta, support, k, n_patches)?;
    evaluate_masks(target, delta, mc, exec, |i| {
        let chosen = sample_k_without_replacement(&geo.anchors, n_patches, &mut rng.fork(i as u64))?;
        Ok(geo.pixels(&chosen))
    })
}

pub fn exhaustive_scores_patch(
    target: &AttackTarget<'_>,
    delta: &Perturbation,
    support: &PixelMask,
    k: KernelSpec,
    n_patches: usize,
    cap: usize,
    exec: Execution,
) -> Result<ScoreGrid> {
    check_target(target, delta, support)?;
    let geo = PatchGeometry::new(delta, support, k, n_patches)?;
    let total = binomial(geo.anchors.len(), n_patches);
    if total > cap as u128 {
        return Err(Error::invalid(format!(
            "C({}, {n_patches}) = {total} anchor sets exceeds enumeration cap {cap}",
            geo.anchors.len()
        )));
    }
    let sets: Vec<Vec<usize>> = geo.anchors.iter().copied().combinations(n_patches).collect();
    evaluate_masks(target, delta, sets.len(), exec, |i| Ok(geo.pixels(&sets[i])))
}

#[allow(clippy::too_many_arguments)]
pub fn score_patches(
    target: &AttackTarget<'_>,
    delta: &Perturbation,
    support: &PixelMask,
    k: KernelSpec,
    n_patches: usize,
    mc: usize,
    rng: &RngState,
    exec: Execution,
) -> Result<(ScoreGrid, ScoringMode)> {
    let anchors = anchor_grid(support, k)?.count();
    if binomial(anchors, n_patches) <= mc as u128 {
        Ok((exhaustive_scores_patch(target, delta, support, k, n_patches, mc.max(1), exec)?, ScoringMode::Exhaustive))
    } else {
        Ok((pointwise_scores_patch(target, delta, support, k, n_patches, mc, rng, exec)?, ScoringMode::MonteCarlo))
    }
}

/// Keep the `l0_next` best-scoring pixels. Unscored pixels rank below every
/// scored one and are never selected.
pub fn trim_sparse(scores: &ScoreGrid, l0_next: usize) -> Result<PixelMask> {
    let scored = scores.counts().iter().filter(|&&c| c > 0).count();
    if scored < l0_next {
        return Err(Error::invalid(format!("only {scored} scored pixels, cannot keep {l0_next}")));
    }
    if l0_next == 0 {
        return PixelMask::empty(scores.height, scores.width);
    }
    let keep = top_k_indices(&scores.scores(), l0_next)?;
    PixelMask::from_indices(scores.height, scores.width, &keep)
}

/// Max-out patch selection. Returns the chosen anchors `(row, col)` in pick
/// order and the union of their footprints.
///
/// Footprint sums use the averaged score of scored pixels and zero elsewhere;
/// an anchor is eligible if its footprint contains at least one scored pixel
/// and it has not been picked yet. Ties go to the lowest row-major anchor.
pub fn trim_patches_with_anchors(
    scores: &ScoreGrid,
    k: KernelSpec,
    n_patches: usize,
) -> Result<(Vec<(usize, usize)>, PixelMask)> {
    let (h, w) = (scores.height, scores.width);
    let (_, aw) = k.anchor_dims(h, w)?;
    let mut eligible: Vec<bool> = anchor_grid(&scores.scored(), k)?.bits().to_vec();
    let available = eligible.iter().filter(|&&e| e).count();
    if n_patches > available {
        return Err(Error::invalid(format!("{n_patches} patches requested but only {available} anchors touch scored pixels")));
    }
    let mut values: Vec<f64> = (0..h * w).map(|p| scores.average(p).unwrap_or(0.0)).collect();
    let mut chosen = Vec::with_capacity(n_patches);
    for _ in 0..n_patches {
        let sums = sum_pool2d(&Grid2D::new(h, w, values.clone())?, k.kh, k.kw)?;
        let best = sums
            .values()
            .iter()
            .enumerate()
            .filter(|(a, _)| eligible[*a])
            .fold(None::<(usize, f64)>, |acc, (a, &s)| match acc {
                Some((_, bs)) if bs >= s => acc,
                _ => Some((a, s)),
            })
            .map(|(a, _)| a)
            .expect("eligible anchors remain");
        eligible[best] = false;
        for p in k.footprint(best / aw, best % aw, w) {
            values[p] = 0.0;
        }
        chosen.push(best);
    }
    let mask = footprint_union(&chosen, k, h, w);
    Ok((chosen.into_iter().map(|a| (a / aw, a % aw)).collect(), mask))
}

pub fn trim_patches(scores: &ScoreGrid, k: KernelSpec, n_patches: usize) -> Result<PixelMask> {
    trim_patches_with_anchors(scores, k, n_patches).map(|(_, m)| m)
}

/// Result of one trim: the new mask, the projected perturbation and its loss.
#[derive(Debug, Clone, PartialEq)]
pub struct TrimOutcome {
    pub mask: PixelMask,
    pub delta: Perturbation,
    pub loss: f64,
    pub mode: ScoringMode,
}

/// Score, select and project in one call. `kernel = None` is the sparse
/// variant; with a kernel, `l0_next / (kh·kw)` patches are kept.
#[allow(clippy::too_many_arguments)]
pub fn trim_step(
    target: &AttackTarget<'_>,
    delta: &Perturbation,
    support: &PixelMask,
    l0_next: usize,
    kernel: Option<KernelSpec>,
    mc: usize,
    rng: &RngState,
    exec: Execution,
) -> Result<TrimOutcome> {
    let (mask, mode) = match kernel {
        None => {
            let (scores, mode) = score_sparse(target, delta, support, l0_next, mc, rng, exec)?;
            (trim_sparse(&scores, l0_next)?, mode)
        }
        Some(k) => {
            let n = l0_next / k.size();
            let (scores, mode) = score_patches(target, delta, support, k, n, mc, rng, exec)?;
            (trim_patches(&scores, k, n)?, mode)
        }
    };
    let delta = apply_mask(&mask, delta)?;
    let loss = target.loss_at(&delta)?;
    Ok(TrimOutcome { mask, delta, loss, mode })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid3D;
    use crate::mask::validate_patch_mask;
    use crate::model::{InputShape, LossSpec, ToyModel};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    /// Two-class linear model whose margin for label 0 is `w·(x+δ)`.
    fn separable(w: &[f64], h: usize, wd: usize) -> ToyModel {
        let mut weights = vec![0.0; w.len()];
        weights.extend_from_slice(w);
        ToyModel::linear(InputShape::new(h, wd, 1), weights, vec![0.0, 0.0]).unwrap()
    }

    fn image(vals: &[f64], h: usize, w: usize) -> Grid3D {
        Grid3D::new(h, w, 1, vals.to_vec()).unwrap()
    }

    #[test]
    fn single_pixel_perturbation_hand_evaluation() {
        // CE on a 3-class linear model so the loss is not separable.
        let shape = InputShape::new(1, 5, 1);
        let mut rng = RngState::new(3);
        let w: Vec<f64> = (0..15).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let m = ToyModel::linear(shape, w, vec![0.1, 0.2, 0.3]).unwrap();
        let x = image(&[0.2, 0.4, 0.6, 0.8, 0.5], 1, 5);
        let t = AttackTarget::new(&m, &x, 1, LossSpec::CrossEntropy).unwrap();
        let mut delta = Grid3D::zeros(1, 5, 1);
        delta.values_mut()[2] = 0.3;
        let support = PixelMask::full(1, 5).unwrap();
        let (k, mcount) = (2usize, 5usize);
        let s = exhaustive_scores(&t, &delta, &support, k, 1000, Execution::Sequential).unwrap();

        let l_pert = t.loss_at(&delta).unwrap();
        let l_clean = t.loss_at(&Grid3D::zeros(1, 5, 1)).unwrap();
        let frac = (k - 1) as f64 / (mcount - 1) as f64;
        assert_abs_diff_eq!(s.average(2).unwrap(), l_pert, epsilon = 1e-12);
        for q in [0, 1, 3, 4] {
            assert_abs_diff_eq!(s.average(q).unwrap(), frac * l_pert + (1.0 - frac) * l_clean, epsilon = 1e-12);
        }
    }

    #[test]
    fn exhaustive_counts() {
        let m = separable(&[1.0, 2.0, 3.0, 4.0], 1, 4);
        let x = image(&[0.5; 4], 1, 4);
        let t = AttackTarget::new(&m, &x, 0, LossSpec::Margin).unwrap();
        let d = Grid3D::filled(1, 4, 1, 0.1);
        let s = exhaustive_scores(&t, &d, &PixelMask::full(1, 4).unwrap(), 2, 100, Execution::Sequential).unwrap();
        assert_eq!(s.counts(), &[3, 3, 3, 3]);
        assert!(exhaustive_scores(&t, &d, &PixelMask::full(1, 4).unwrap(), 2, 5, Execution::Sequential).is_err());
        assert!(exhaustive_scores(&t, &d, &PixelMask::full(1, 4).unwrap(), 4, 100, Execution::Sequential).is_err());
        let rng = RngState::new(0);
        assert!(pointwise_scores(&t, &d, &PixelMask::full(1, 4).unwrap(), 4, 10, &rng, Execution::Sequential).is_err());
    }

    #[test]
    fn monte_carlo_matches_exhaustive() {
        let m = separable(&[0.8, -0.3, 0.5, 0.1], 1, 4);
        let x = image(&[0.2, 0.9, 0.4, 0.7], 1, 4);
        let t = AttackTarget::new(&m, &x, 0, LossSpec::Margin).unwrap();
        let d = image(&[0.8, -0.9, 0.6, 0.3], 1, 4);
        let support = PixelMask::full(1, 4).unwrap();
        let exact = exhaustive_scores(&t, &d, &support, 2, 100, Execution::Sequential).unwrap();
        let mc = pointwise_scores(&t, &d, &support, 2, 100_000, &RngState::new(9), Execution::Parallel).unwrap();
        for p in 0..4 {
            assert_abs_diff_eq!(mc.average(p).unwrap(), exact.average(p).unwrap(), epsilon = 0.01);
        }
    }

    #[test]
    fn separable_ordering_follows_contributions() {
        let w = [0.3, -1.2, 0.7, 0.05, -0.4, 1.1];
        let m = separable(&w, 2, 3);
        let x = image(&[0.5; 6], 2, 3);
        let t = AttackTarget::new(&m, &x, 0, LossSpec::Margin).unwrap();
        let d = image(&[0.5, -0.5, 0.5, 0.5, -0.5, 0.5], 2, 3);
        let s = exhaustive_scores(&t, &d, &PixelMask::full(2, 3).unwrap(), 3, 1000, Execution::Sequential).unwrap();
        let mut by_contrib: Vec<usize> = (0..6).collect();
        by_contrib.sort_by(|&a, &b| (w[b] * d.values()[b]).total_cmp(&(w[a] * d.values()[a])));
        let mut by_score: Vec<usize> = (0..6).collect();
        by_score.sort_by(|&a, &b| s.average(b).unwrap().total_cmp(&s.average(a).unwrap()));
        assert_eq!(by_score, by_contrib);
    }

    #[test]
    fn unit_kernel_patch_scoring_equals_sparse() {
        let w: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let m = separable(&w, 3, 4);
        let x = image(&[0.3; 12], 3, 4);
        let t = AttackTarget::new(&m, &x, 0, LossSpec::CrossEntropy).unwrap();
        let d = Grid3D::new(3, 4, 1, (0..12).map(|i| (i as f64 * 0.71).cos() * 0.5).collect()).unwrap();
        let support = PixelMask::from_indices(3, 4, &[0, 2, 3, 5, 6, 9, 10, 11]).unwrap();
        let rng = RngState::new(77);
        let k1 = KernelSpec::new(1, 1).unwrap();
        let a = pointwise_scores(&t, &d, &support, 3, 200, &rng, Execution::Sequential).unwrap();
        let b = pointwise_scores_patch(&t, &d, &support, k1, 3, 200, &rng, Execution::Sequential).unwrap();
        assert_eq!(a, b);
        let a = exhaustive_scores(&t, &d, &support, 3, 1000, Execution::Sequential).unwrap();
        let b = exhaustive_scores_patch(&t, &d, &support, k1, 3, 1000, Execution::Sequential).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_anchor_shares_one_score() {
        let m = separable(&[0.4; 9], 3, 3);
        let x = image(&[0.5; 9], 3, 3);
        let t = AttackTarget::new(&m, &x, 0, LossSpec::Margin).unwrap();
        let d = Grid3D::filled(3, 3, 1, 0.2);
        let k = KernelSpec::new(3, 3).unwrap();
        let s = pointwise_scores_patch(&t, &d, &PixelMask::full(3, 3).unwrap(), k, 1, 20, &RngState::new(1), Execution::Sequential)
            .unwrap();
        let first = s.average(0).unwrap();
        assert!((0..9).all(|p| s.average(p) == Some(first) && s.count(p) == 20));
    }

    #[test]
    fn patch_sampling_is_uniform_over_anchors() {
        let m = separable(&[0.1; 9], 3, 3);
        let x = image(&[0.5; 9], 3, 3);
        let t = AttackTarget::new(&m, &x, 0, LossSpec::Margin).unwrap();
        let d = Grid3D::filled(3, 3, 1, 0.2);
        let k = KernelSpec::new(2, 2).unwrap();
        let mc = 10_000;
        let s = pointwise_scores_patch(&t, &d, &PixelMask::full(3, 3).unwrap(), k, 1, mc, &RngState::new(5), Execution::Parallel)
            .unwrap();
        // Each corner pixel belongs to exactly one anchor's footprint.
        for corner in [0, 2, 6, 8] {
            let f = s.count(corner) as f64 / mc as f64;
            assert!((f - 0.25).abs() <= 0.02, "corner {corner}: {f}");
        }
        assert_eq!(s.count(4), mc as u64);
    }

    fn grid_from(avgs: &[f64], h: usize, w: usize) -> ScoreGrid {
        let mut g = ScoreGrid::new(h, w);
        for (p, &v) in avgs.iter().enumerate() {
            g.accumulate(&[p], v);
        }
        g
    }

    #[test]
    fn trim_sparse_examples() {
        let g = grid_from(&[0.1, 0.9, 0.5, 0.9], 1, 4);
        assert_eq!(trim_sparse(&g, 2).unwrap().support(), vec![1, 3]);
        assert_eq!(trim_sparse(&g, 4).unwrap().count(), 4);
        assert_eq!(trim_sparse(&grid_from(&[0.3; 4], 1, 4), 2).unwrap().support(), vec![0, 1]);

        let mut partial = ScoreGrid::new(1, 4);
        partial.accumulate(&[2], -5.0);
        partial.accumulate(&[3], -1.0);
        assert_eq!(trim_sparse(&partial, 2).unwrap().support(), vec![2, 3]);
        assert!(trim_sparse(&partial, 3).is_err());
    }

    #[test]
    fn trim_patches_examples() {
        let g = grid_from(&[1., 0., 0., 0., 1., 0., 0., 0., 1.], 3, 3);
        let k = KernelSpec::new(2, 2).unwrap();
        let (anchors, mask) = trim_patches_with_anchors(&g, k, 1).unwrap();
        assert_eq!(anchors, vec![(0, 0)]);
        assert_eq!(mask.cells(), vec![(0, 0), (0, 1), (1, 0), (1, 1)]);
        let (anchors, mask) = trim_patches_with_anchors(&g, k, 2).unwrap();
        assert_eq!(anchors, vec![(0, 0), (1, 1)]);
        assert_eq!(mask.count(), 7);
        assert_eq!(trim_patches(&g, k, 0).unwrap().count(), 0);
        assert!(trim_patches(&g, k, 5).is_err());
    }

    #[test]
    fn trim_patches_never_repeats_anchor_with_negative_scores() {
        let g = grid_from(&[-1.0; 9], 3, 3);
        let (anchors, _) = trim_patches_with_anchors(&g, KernelSpec::new(2, 2).unwrap(), 4).unwrap();
        let mut sorted = anchors.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), 4);
    }

    #[test]
    fn binomial_values() {
        assert_eq!(binomial(8, 2), 28);
        assert_eq!(binomial(12, 3), 220);
        assert_eq!(binomial(4, 5), 0);
        assert_eq!(binomial(196, 98), u128::MAX);
        assert_eq!(binomial(2000, 1000), u128::MAX);
    }

    proptest! {
        #[test]
        fn trim_outputs_respect_budget(seed in any::<u64>(), kh in 1usize..3, kw in 1usize..4, n in 0usize..4, keep in 0usize..10) {
            let mut rng = RngState::new(seed);
            let mut g = ScoreGrid::new(5, 6);
            for p in 0..30 {
                if rng.uniform(0.0, 1.0) < 0.7 {
                    g.accumulate(&[p], rng.uniform(-1.0, 1.0));
                }
            }
            let scored = g.scored();
            let k = KernelSpec::new(kh, kw).unwrap();
            if let Ok(mask) = trim_patches(&g, k, n) {
                prop_assert!(validate_patch_mask(&mask, k, n).valid);
                prop_assert!(mask.count() <= n * k.size());
            }
            if keep <= scored.count() {
                let m = trim_sparse(&g, keep).unwrap();
                prop_assert_eq!(m.count(), keep);
                prop_assert!(m.is_subset_of(&scored));
            }
        }
    }
}
