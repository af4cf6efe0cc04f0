//! Self-check suite: gradient, scoring, schedule, patch, attack-behaviour,
//! feasibility, best-tracking and dropout checks, each against an oracle that
//! does not share code with the path under test where that is practical.

use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use itertools::Itertools;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{Grid3D, Image, RngState};
use crate::mask::{validate_patch_mask, KernelSpec, PixelMask};
use crate::model::{accuracy, finite_diff_check, train_toy, Architecture, AttackTarget, Classifier, InputShape, LossSpec, ToyModel, TrainSpec};
use crate::optimize::{
    build_schedule, dpgd, max_trim_steps, pgd_trim, pgd_trim_kernel, AttackConfig, AttackRecord, DropoutFamily, DropoutSpec,
};
use crate::par::Execution;
use crate::trim::{exhaustive_scores, pointwise_scores, score_sparse, ScoringMode};

use super::dataset::{load_idx_split, Dataset};
use super::experiment::{run_experiment_on, AttackKind, ExperimentPlan, ROWS_FILE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    /// Reduced instance counts; seconds.
    Quick,
    /// Instance counts of the acceptance criteria; minutes.
    Full,
}

#[derive(Debug, Clone)]
pub struct VerifyOptions {
    pub scale: Scale,
    pub seed: u64,
    pub execution: Execution,
    /// Directory holding `train-*`/`test-*` IDX files of 14×14 digits.
    pub data_dir: PathBuf,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self { scale: Scale::Quick, seed: 2024, execution: Execution::default(), data_dir: bundled_digits() }
    }
}

/// The digits set shipped in the source tree.
pub fn bundled_digits() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/digits14")
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckReport {
    pub id: u8,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl std::fmt::Display for CheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "[{verdict}] {:>2} {:<28} {:>8.2}s  {}", self.id, self.name, self.seconds, self.detail)
    }
}

/// Feasibility and rerun results gathered by the attack checks.
#[derive(Debug, Default, Clone)]
struct Tally {
    records: usize,
    infeasible: Vec<String>,
    nondeterministic: Vec<String>,
}

impl Tally {
    fn observe(&mut self, what: String, x: &Image, rec: &AttackRecord, rerun: &AttackRecord) {
        self.records += 1;
        if let Err(e) = rec.check_feasible(x) {
            self.infeasible.push(format!("{what}: {e}"));
        }
        if rec != rerun {
            self.nondeterministic.push(what);
        }
    }
}

fn pick(scale: Scale, quick: usize, full: usize) -> usize {
    match scale {
        Scale::Quick => quick,
        Scale::Full => full,
    }
}

fn random_image(shape: InputShape, rng: &mut RngState) -> Result<Image> {
    Grid3D::new(shape.height, shape.width, shape.channels, (0..shape.len()).map(|_| rng.uniform(0.0, 1.0)).collect())
}

fn gradients(opts: &VerifyOptions) -> Result<(bool, String)> {
    let shape = InputShape::new(8, 8, 2);
    let archs = [Architecture::Linear, Architecture::Mlp { hidden: 16 }, Architecture::Conv { filters: 4, kernel: 3 }];
    let mut parts = Vec::new();
    let mut ok = true;
    for (a, arch) in archs.into_iter().enumerate() {
        let mut worst = 0.0f64;
        for probe in 0..10u64 {
            let mut rng = RngState::new(opts.seed).fork(a as u64).fork(probe);
            let m = ToyModel::init(arch, shape, 5, &mut rng)?;
            let x = random_image(shape, &mut rng)?;
            let y = rng.below(5);
            worst = worst.max(finite_diff_check(&m, &x, y, LossSpec::CrossEntropy, 1e-5, &mut rng)?);
        }
        ok &= worst <= 1e-4;
        parts.push(format!("{arch}: {worst:.2e}"));
    }
    Ok((ok, format!("max rel err {} (tol 1e-4)", parts.join(", "))))
}

fn mc_vs_exhaustive(opts: &VerifyOptions) -> Result<(bool, String)> {
    const MC: usize = 20_000;
    let mut worst = 0.0f64;
    let mut exact_dispatch = true;
    for (case, ((h, w), l0)) in [(1, 8), (3, 4)].into_iter().cartesian_product([2usize, 3]).enumerate() {
        let mut rng = RngState::new(opts.seed).fork(10 + case as u64);
        let shape = InputShape::new(h, w, 1);
        let m = ToyModel::init(Architecture::Mlp { hidden: 8 }, shape, 3, &mut rng)?;
        let x = random_image(shape, &mut rng)?;
        let mut d = Grid3D::new(h, w, 1, (0..h * w).map(|_| rng.uniform(-1.0, 1.0)).collect())?;
        d.clip_to_box(&x)?;
        let t = AttackTarget::new(&m, &x, rng.below(3), LossSpec::CrossEntropy)?;
        let support = PixelMask::full(h, w)?;
        let exact = exhaustive_scores(&t, &d, &support, l0, usize::MAX, opts.execution)?;
        let mc = pointwise_scores(&t, &d, &support, l0, MC, &rng.fork(1), opts.execution)?;
        for p in 0..h * w {
            if let (Some(a), Some(b)) = (exact.average(p), mc.average(p)) {
                worst = worst.max((a - b).abs());
            }
        }
        let (dispatched, mode) = score_sparse(&t, &d, &support, l0, MC, &rng.fork(1), opts.execution)?;
        exact_dispatch &= mode == ScoringMode::Exhaustive && dispatched == exact;
    }
    Ok((
        worst <= 0.02 && exact_dispatch,
        format!("max |MC - exact| = {worst:.4} (tol 0.02), exhaustive dispatch exact: {exact_dispatch}"),
    ))
}

/// Two-class linear model whose margin for label 0 is `w·x`.
fn separable(w: &[f64], shape: InputShape) -> Result<ToyModel> {
    let mut weights = vec![0.0; w.len()];
    weights.extend_from_slice(w);
    ToyModel::linear(shape, weights, vec![0.0, 0.0])
}

fn separable_recovery(opts: &VerifyOptions, tally: &mut Tally) -> Result<(bool, String)> {
    let n = pick(opts.scale, 20, 100);
    let shape = InputShape::new(1, 8, 1);
    let mut hits = 0;
    for i in 0..n {
        let mut rng = RngState::new(opts.seed).fork(1000 + i as u64);
        let w: Vec<f64> = (0..8).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let x = random_image(shape, &mut rng)?;
        let m = separable(&w, shape)?;
        let cfg = AttackConfig { seed: rng.fork_seed(0), execution: opts.execution, ..AttackConfig::default() };
        let rec = pgd_trim(&m, &x, 0, 2, &cfg)?;
        tally.observe(format!("separable #{i}"), &x, &rec, &pgd_trim(&m, &x, 0, 2, &cfg)?);
        let gain: Vec<f64> = w.iter().zip(x.values()).map(|(&wi, &xi)| (wi * (1.0 - xi)).max(-wi * xi)).collect();
        let best = (0..8)
            .tuple_combinations::<(usize, usize)>()
            .max_by(|a, b| (gain[a.0] + gain[a.1]).total_cmp(&(gain[b.0] + gain[b.1])))
            .expect("28 pairs");
        if rec.mask.support() == vec![best.0, best.1] {
            hits += 1;
        }
    }
    let need = (95 * n).div_ceil(100);
    Ok((hits >= need, format!("{hits}/{n} masks match the brute-force optimum (need {need})")))
}

fn schedule_arithmetic(_opts: &VerifyOptions) -> Result<(bool, String)> {
    let small = build_schedule(16, 2, 3)?;
    let full = build_schedule(50176, 224, max_trim_steps(50176, 224)?)?;
    let mut ok = small.targets() == [16, 8, 4, 2] && full.targets() == [50176, 32768, 16384, 8192, 4096, 2048, 1024, 512, 256, 224];
    let mut cases = 0;
    for n in [15usize, 16, 17, 64, 100, 196, 784, 1000, 3072, 50176] {
        for e in [1usize, 2, 3, 7, 14] {
            if e >= n {
                continue;
            }
            cases += 1;
            let oracle = (n as f64).log2().ceil() as usize - (e as f64).log2().floor() as usize;
            ok &= max_trim_steps(n, e)? == oracle && build_schedule(n, e, oracle)?.steps() == oracle;
        }
    }
    ok &= cases == 50;
    Ok((ok, format!("examples reproduced; {cases} grid cases checked")))
}

fn patch_validity(opts: &VerifyOptions, tally: &mut Tally) -> Result<(bool, String)> {
    let runs = pick(opts.scale, 60, 1000);
    let shape = InputShape::new(8, 8, 1);
    let kernels = [KernelSpec::new(1, 1)?, KernelSpec::new(2, 2)?, KernelSpec::new(2, 4)?];
    let (mut invalid, mut mismatched) = (Vec::new(), 0);
    for i in 0..runs {
        let k = kernels[i % 3];
        let mut rng = RngState::new(opts.seed).fork(5000 + i as u64);
        let m = ToyModel::init(Architecture::Mlp { hidden: 8 }, shape, 4, &mut rng)?;
        let x = random_image(shape, &mut rng)?;
        let y = rng.below(4);
        let max_patches = if k.size() == 1 { 16 } else { 32 / k.size() };
        let eps0 = k.size() * (1 + rng.below(max_patches));
        let cfg = AttackConfig { iterations: 10, mc_samples: 64, seed: rng.fork_seed(0), execution: opts.execution, ..Default::default() };
        let rec = pgd_trim_kernel(&m, &x, y, eps0, k, &cfg)?;
        tally.observe(format!("patch #{i} {k} eps0={eps0}"), &x, &rec, &pgd_trim_kernel(&m, &x, y, eps0, k, &cfg)?);
        if !validate_patch_mask(&rec.mask, k, eps0 / k.size()).valid || rec.pixel_l0 > eps0 {
            invalid.push(i);
        }
        if k.size() == 1 && pgd_trim(&m, &x, y, eps0, &cfg)? != rec {
            mismatched += 1;
        }
    }
    Ok((
        invalid.is_empty() && mismatched == 0,
        format!("{runs} runs, {} invalid masks, {mismatched} 1x1 runs differing from the sparse attack", invalid.len()),
    ))
}

fn temp_dir(tag: &str) -> PathBuf {
    let nanos = std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map_or(0, |d| d.as_nanos());
    std::env::temp_dir().join(format!("pgdtrim-verify-{tag}-{}-{nanos}", std::process::id()))
}

struct TempDir(PathBuf);

impl Drop for TempDir {
    fn drop(&mut self) {
        let _ = fs::remove_dir_all(&self.0);
    }
}

fn digits_asr(opts: &VerifyOptions, tally: &mut Tally) -> Result<(bool, String)> {
    let n = pick(opts.scale, 20, 100);
    let train = load_idx_split(&opts.data_dir, "train")?;
    let test = load_idx_split(&opts.data_dir, "test")?;
    if train.shape != InputShape::new(14, 14, 1) {
        return Err(Error::invalid(format!("expected 14x14 digits, found {:?}", train.shape)));
    }
    let (model, _) = train_toy(
        &train.images,
        &train.labels,
        10,
        Architecture::Mlp { hidden: 64 },
        &TrainSpec::default(),
        &mut RngState::new(opts.seed),
    )?;
    let acc = accuracy(&model, &test.images, &test.labels)?;
    let correct: Vec<usize> =
        (0..test.len()).filter(|&i| model.predict(&test.images[i]).ok().flatten() == Some(test.labels[i])).take(n).collect();
    if correct.len() < n {
        return Ok((false, format!("only {} initially-correct samples", correct.len())));
    }
    let data = Dataset::new(
        "digits14-correct",
        correct.iter().map(|&i| test.images[i].clone()).collect(),
        correct.iter().map(|&i| test.labels[i]).collect(),
        Some(10),
    )?;
    let cfg = AttackConfig {
        iterations: 100,
        mc_samples: 500,
        n_trim: 5,
        n_restarts: 3,
        seed: opts.seed,
        execution: opts.execution,
        ..Default::default()
    };
    let mut plan = ExperimentPlan::new(AttackKind::Sparse, cfg);
    plan.eps0 = vec![2, 4, 8, 14];
    let (a, b) = (TempDir(temp_dir("a")), TempDir(temp_dir("b")));
    let first = run_experiment_on(&model, &data, &plan, &a.0, &mut |_| {})?;
    run_experiment_on(&model, &data, &plan, &b.0, &mut |_| {})?;
    let same_bytes = fs::read(a.0.join(ROWS_FILE)).map_err(|e| Error::io(a.0.join(ROWS_FILE), e))?
        == fs::read(b.0.join(ROWS_FILE)).map_err(|e| Error::io(b.0.join(ROWS_FILE), e))?;

    tally.records += first.rows.len();
    for r in &first.rows {
        if let Some(e) = &r.error {
            tally.infeasible.push(format!("digits sample {} eps0={}: {e}", r.sample, r.eps0));
        } else if r.rederive_success(&model, &data.images[r.sample])? != r.success {
            tally.infeasible.push(format!("digits sample {} eps0={}: success flag not re-derivable", r.sample, r.eps0));
        }
    }
    if !same_bytes {
        tally.nondeterministic.push("digits rows.jsonl differs between runs".into());
    }

    let mut violations = 0;
    for s in 0..n {
        let flags: Vec<bool> = first.rows.iter().filter(|r| r.sample == s).map(|r| r.success).collect();
        violations += flags.windows(2).filter(|w| w[0] && !w[1]).count();
    }
    let asr: Vec<String> = first.curve.iter().map(|p| format!("{}:{:.2}", p.eps0, p.asr.unwrap_or(f64::NAN))).collect();
    let asr14 = first.curve.iter().find(|p| p.eps0 == 14).and_then(|p| p.asr).unwrap_or(0.0);
    Ok((
        acc >= 0.9 && asr14 >= 0.9 && violations == 0,
        format!("clean acc {acc:.3}; ASR {} over {n} samples; {violations} monotonicity violations", asr.join(" ")),
    ))
}

fn feasibility(tally: &Tally) -> (bool, String) {
    let mut detail = format!(
        "{} records/rows, {} infeasible, {} not reproducible",
        tally.records,
        tally.infeasible.len(),
        tally.nondeterministic.len()
    );
    if let Some(first) = tally.infeasible.first().or(tally.nondeterministic.first()) {
        detail.push_str(&format!("; first: {first}"));
    }
    (tally.records > 0 && tally.infeasible.is_empty() && tally.nondeterministic.is_empty(), detail)
}

fn best_tracking(opts: &VerifyOptions) -> Result<(bool, String)> {
    let n = pick(opts.scale, 10, 50);
    let shape = InputShape::new(5, 5, 2);
    let mut bad = 0;
    for i in 0..n {
        let mut rng = RngState::new(opts.seed).fork(9000 + i as u64);
        let m = ToyModel::init(Architecture::Mlp { hidden: 12 }, shape, 4, &mut rng)?;
        let x = random_image(shape, &mut rng)?;
        let t = AttackTarget::new(&m, &x, rng.below(4), LossSpec::CrossEntropy)?;
        let bits: Vec<bool> = (0..25).map(|_| rng.uniform(0.0, 1.0) < 0.5).collect();
        let mask = PixelMask::from_bits(5, 5, bits)?;
        let mut init = Grid3D::zeros(5, 5, 2);
        for p in mask.support() {
            for v in init.pixel_mut(p) {
                *v = rng.uniform(-1.0, 1.0);
            }
        }
        init.clip_to_box(&x)?;
        let spec = DropoutSpec::new(DropoutFamily::Bernoulli, rng.uniform(0.2, 1.0))?;
        let step_rng = rng.fork(1);
        let l_init = t.loss_at(&init)?;
        let short = dpgd(&t, &mask, &init, spec, 10, 0.05, &step_rng)?;
        let long = dpgd(&t, &mask, &init, spec, 100, 0.05, &step_rng)?;
        if !(short.loss >= l_init && long.loss >= short.loss) {
            bad += 1;
        }
    }
    Ok((bad == 0, format!("{n} instances, {bad} violations of loss(100) >= loss(10) >= loss(init)")))
}

fn dropout_means(opts: &VerifyOptions) -> Result<(bool, String)> {
    let draws = pick(opts.scale, 100_000, 1_000_000);
    let mut worst = 0.0f64;
    for (f, family) in [DropoutFamily::Bernoulli, DropoutFamily::ContinuousBernoulli, DropoutFamily::Gaussian].into_iter().enumerate() {
        for (j, p) in [0.25, 0.5, 0.9].into_iter().enumerate() {
            let sampler = DropoutSpec::new(family, p)?.sampler()?;
            let mut rng = RngState::new(opts.seed).fork(20_000 + 10 * f as u64 + j as u64);
            let (mut sum, mut sq) = (0.0, 0.0);
            for _ in 0..draws {
                let v = sampler.draw(&mut rng);
                sum += v;
                sq += v * v;
            }
            let mean = sum / draws as f64;
            let se = ((sq / draws as f64 - mean * mean).max(0.0) / draws as f64).sqrt();
            worst = worst.max((mean - p).abs() / se);
        }
    }
    Ok((worst <= 3.0, format!("{draws} draws per case, worst |mean - p| = {worst:.2} standard errors (tol 3)")))
}

fn timed(id: u8, name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckReport {
    let start = Instant::now();
    let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    CheckReport { id, name, passed, detail, seconds: start.elapsed().as_secs_f64() }
}

/// Run every check in order, reporting each as it completes.
pub fn run_suite(opts: &VerifyOptions, on_report: &mut dyn FnMut(&CheckReport)) -> Vec<CheckReport> {
    let mut tally = Tally::default();
    let mut out = Vec::new();
    let mut push = |r: CheckReport| {
        on_report(&r);
        out.push(r);
    };
    push(timed(1, "gradient oracle", || gradients(opts)));
    push(timed(2, "monte-carlo vs exhaustive", || mc_vs_exhaustive(opts)));
    push(timed(3, "separable recovery", || separable_recovery(opts, &mut tally)));
    push(timed(4, "schedule arithmetic", || schedule_arithmetic(opts)));
    push(timed(5, "patch validity", || patch_validity(opts, &mut tally)));
    push(timed(6, "digits ASR behaviour", || digits_asr(opts, &mut tally)));
    push(timed(7, "feasibility & determinism", || Ok(feasibility(&tally))));
    push(timed(8, "dpgd best-tracking", || best_tracking(opts)));
    push(timed(9, "dropout means", || dropout_means(opts)));
    out
}
