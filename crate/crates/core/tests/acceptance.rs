//! Acceptance suite. Each criterion prints one PASS/FAIL line (written past
//! the test harness's output capture) and the test fails if any criterion does.

use std::io::Write;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use pgdtrim::harness::load_idx_split;
use pgdtrim::mask::validate_patch_mask;
use pgdtrim::model::{train_toy, Architecture, AttackTarget, InputShape, TrainSpec};
use pgdtrim::optimize::{
    build_schedule, dpgd, dropout_sample, max_trim_steps, pgd_trim, pgd_trim_kernel, run_with_restarts,
};
use pgdtrim::trim::{exhaustive_scores, pointwise_scores, score_sparse, ScoringMode};
use pgdtrim::{
    AttackConfig, AttackRecord, Classifier, DropoutFamily, DropoutSpec, Execution, Grid3D, Image, KernelSpec, LossSpec,
    PixelMask, RngState, ToyModel,
};

const GRAD_STEP: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;
const MC_SAMPLES: usize = 20_000;
const MC_TOL: f64 = 0.02;
const RECOVERY_INSTANCES: usize = 100;
const RECOVERY_NEEDED: usize = 95;
const PATCH_RUNS: usize = 1000;
const MIN_CLEAN_ACCURACY: f64 = 0.9;
const ASR_SAMPLES: usize = 100;
const MIN_ASR_AT_14: f64 = 0.9;
const BUDGETS: [usize; 4] = [2, 4, 8, 14];
const TRACKING_INSTANCES: usize = 50;
const DROPOUT_DRAWS: usize = 1_000_000;
const DROPOUT_SE: f64 = 3.0;

type Outcome = Result<String, String>;

struct Attack {
    label: String,
    x: Image,
    record: AttackRecord,
    rerun: Box<dyn Fn() -> AttackRecord>,
}

fn say(line: &str) {
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{line}");
}

fn image(shape: InputShape, rng: &mut RngState) -> Image {
    Grid3D::new(shape.height, shape.width, shape.channels, (0..shape.len()).map(|_| rng.uniform(0.0, 1.0)).collect()).unwrap()
}

fn argmax_fooled(model: &dyn Classifier, x: &Image, delta: &Grid3D, y: usize) -> bool {
    let xd = Grid3D::new(x.height(), x.width(), x.channels(), x.values().iter().zip(delta.values()).map(|(a, b)| a + b).collect())
        .unwrap();
    let z = model.forward(&xd).unwrap().0;
    let top = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let winners: Vec<usize> = (0..z.len()).filter(|&c| z[c] == top).collect();
    winners.len() == 1 && winners[0] != y
}

fn criterion_1() -> Outcome {
    let shape = InputShape::new(7, 7, 3);
    let mut report = Vec::new();
    let mut worst_all = 0.0f64;
    for (a, arch) in [Architecture::Linear, Architecture::Mlp { hidden: 20 }, Architecture::Conv { filters: 3, kernel: 3 }]
        .into_iter()
        .enumerate()
    {
        let mut worst = 0.0f64;
        for probe in 0..10 {
            let mut rng = RngState::new(100 + 10 * a as u64 + probe);
            let m = ToyModel::init(arch, shape, 6, &mut rng).unwrap();
            let x = image(shape, &mut rng);
            let y = rng.below(6);
            let g = m.input_gradient(&x, y, LossSpec::CrossEntropy).unwrap();
            for i in 0..x.len() {
                let mut up = x.clone();
                up.values_mut()[i] += GRAD_STEP;
                let mut down = x.clone();
                down.values_mut()[i] -= GRAD_STEP;
                let fd = (m.loss(&up, y, LossSpec::CrossEntropy).unwrap() - m.loss(&down, y, LossSpec::CrossEntropy).unwrap())
                    / (2.0 * GRAD_STEP);
                let a = g.values()[i];
                worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-12));
            }
        }
        worst_all = worst_all.max(worst);
        report.push(format!("{arch} {worst:.1e}"));
    }
    let msg = format!("max relative error {}", report.join(", "));
    if worst_all <= GRAD_TOL {
        Ok(msg)
    } else {
        Err(msg)
    }
}

/// Per-pixel average loss over every `k`-subset of `cells`, by direct enumeration.
fn brute_force_scores(m: &dyn Classifier, x: &Image, delta: &Grid3D, y: usize, cells: &[usize], k: usize) -> Vec<Option<f64>> {
    fn subsets(n: usize, k: usize, start: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            subsets(n, k, i + 1, cur, out);
            cur.pop();
        }
    }
    let mut all = Vec::new();
    subsets(cells.len(), k, 0, &mut Vec::new(), &mut all);
    let c = x.channels();
    let mut sum = vec![0.0; x.pixels()];
    let mut cnt = vec![0usize; x.pixels()];
    for s in all {
        let mut xd = x.clone();
        for &j in &s {
            let p = cells[j];
            for ch in 0..c {
                xd.values_mut()[p * c + ch] += delta.values()[p * c + ch];
            }
        }
        let l = m.loss(&xd, y, LossSpec::CrossEntropy).unwrap();
        for &j in &s {
            sum[cells[j]] += l;
            cnt[cells[j]] += 1;
        }
    }
    sum.iter().zip(&cnt).map(|(&s, &n)| (n > 0).then(|| s / n as f64)).collect()
}

fn criterion_2() -> Outcome {
    let mut worst_mc = 0.0f64;
    let mut worst_exact = 0.0f64;
    let mut dispatch_ok = true;
    for (case, (h, w, k)) in [(1, 8, 2), (1, 8, 3), (3, 4, 2), (3, 4, 3)].into_iter().enumerate() {
        let mut rng = RngState::new(200 + case as u64);
        let shape = InputShape::new(h, w, 3);
        let m = ToyModel::init(Architecture::Mlp { hidden: 10 }, shape, 4, &mut rng).unwrap();
        let x = image(shape, &mut rng);
        let mut d = Grid3D::new(h, w, 3, (0..shape.len()).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap();
        d.clip_to_box(&x).unwrap();
        let y = rng.below(4);
        let t = AttackTarget::new(&m, &x, y, LossSpec::CrossEntropy).unwrap();
        let support = PixelMask::full(h, w).unwrap();
        let oracle = brute_force_scores(&m, &x, &d, y, &support.support(), k);
        let exact = exhaustive_scores(&t, &d, &support, k, usize::MAX, Execution::Parallel).unwrap();
        let mc = pointwise_scores(&t, &d, &support, k, MC_SAMPLES, &RngState::new(300 + case as u64), Execution::Parallel).unwrap();
        for (p, o) in oracle.iter().enumerate() {
            let o = o.expect("every support pixel is scored");
            worst_exact = worst_exact.max((exact.average(p).unwrap() - o).abs());
            worst_mc = worst_mc.max((mc.average(p).unwrap() - o).abs());
        }
        let (dispatched, mode) = score_sparse(&t, &d, &support, k, MC_SAMPLES, &RngState::new(1), Execution::Parallel).unwrap();
        dispatch_ok &= mode == ScoringMode::Exhaustive && dispatched == exact;
    }
    let msg = format!(
        "max |MC - exact| {worst_mc:.4} (tol {MC_TOL}); exhaustive vs brute force {worst_exact:.1e}; dispatch exact {dispatch_ok}"
    );
    if worst_mc <= MC_TOL && worst_exact <= 1e-12 && dispatch_ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn separable(w: &[f64]) -> ToyModel {
    let mut weights = vec![0.0; w.len()];
    weights.extend_from_slice(w);
    ToyModel::linear(InputShape::new(1, w.len(), 1), weights, vec![0.0, 0.0]).unwrap()
}

fn criterion_3(attacks: &mut Vec<Attack>) -> Outcome {
    let mut hits = 0;
    for i in 0..RECOVERY_INSTANCES {
        let mut rng = RngState::new(3000 + i as u64);
        let w: Vec<f64> = (0..8).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let x = image(InputShape::new(1, 8, 1), &mut rng);
        let cfg = AttackConfig { seed: i as u64, ..AttackConfig::default() };
        let m = separable(&w);
        let rec = pgd_trim(&m, &x, 0, 2, &cfg).map_err(|e| e.to_string())?;

        // Each fixed 2-pixel mask is solved in closed form: every pixel moves
        // to whichever box edge gains more margin.
        let gain: Vec<f64> = (0..8).map(|j| (w[j] * (1.0 - x.values()[j])).max(-w[j] * x.values()[j])).collect();
        let mut best = (f64::NEG_INFINITY, 0, 0);
        for a in 0..8 {
            for b in a + 1..8 {
                if gain[a] + gain[b] > best.0 {
                    best = (gain[a] + gain[b], a, b);
                }
            }
        }
        if rec.mask.support() == [best.1, best.2] {
            hits += 1;
        }
        let (mm, xx) = (m.clone(), x.clone());
        attacks.push(Attack {
            label: format!("separable #{i}"),
            x,
            record: rec,
            rerun: Box::new(move || pgd_trim(&mm, &xx, 0, 2, &cfg).unwrap()),
        });
    }
    let msg = format!("{hits}/{RECOVERY_INSTANCES} final masks equal the brute-force optimum (need {RECOVERY_NEEDED})");
    if hits >= RECOVERY_NEEDED {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn criterion_4() -> Outcome {
    let small = build_schedule(16, 2, 3).map_err(|e| e.to_string())?;
    if small.targets() != [16, 8, 4, 2] {
        return Err(format!("(16, 2, 3) gave {:?}", small.targets()));
    }
    let big = build_schedule(50176, 224, max_trim_steps(50176, 224).unwrap()).unwrap();
    if big.targets() != [50176, 32768, 16384, 8192, 4096, 2048, 1024, 512, 256, 224] {
        return Err(format!("(50176, 224, full) gave {:?}", big.targets()));
    }
    let mut rng = RngState::new(4);
    for case in 0..50 {
        let n = 2 + rng.below(100_000);
        let e = 1 + rng.below(n - 1);
        let mut c = 0;
        while (1usize << c) < n {
            c += 1;
        }
        let mut f = 0;
        while (1usize << (f + 1)) <= e {
            f += 1;
        }
        let got = max_trim_steps(n, e).unwrap();
        if got != c - f {
            return Err(format!("case {case}: max steps for ({n}, {e}) = {got}, expected {}", c - f));
        }
        let mut expect = vec![n];
        expect.extend((f + 1..c).rev().map(|p| 1usize << p));
        expect.push(e);
        let full = build_schedule(n, e, got).unwrap();
        if full.targets() != expect.as_slice() {
            return Err(format!("case {case}: full schedule {:?}, expected {expect:?}", full.targets()));
        }
    }
    Ok("both examples reproduced; 50 random (N, eps0) cases match the step formula and full schedule".into())
}

fn criterion_5(attacks: &mut Vec<Attack>) -> Outcome {
    let shape = InputShape::new(8, 8, 1);
    let kernels = [KernelSpec::new(1, 1).unwrap(), KernelSpec::new(2, 2).unwrap(), KernelSpec::new(2, 4).unwrap()];
    let mut failures = Vec::new();
    for i in 0..PATCH_RUNS {
        let k = kernels[i % 3];
        let mut rng = RngState::new(5000 + i as u64);
        let m = ToyModel::init(Architecture::Mlp { hidden: 6 }, shape, 3, &mut rng).unwrap();
        let x = image(shape, &mut rng);
        let y = rng.below(3);
        let n = 1 + rng.below(if k.size() == 1 { 20 } else { 24 / k.size() });
        let eps0 = n * k.size();
        let cfg = AttackConfig { iterations: 8, mc_samples: 48, n_restarts: 1, seed: i as u64, ..AttackConfig::default() };
        let rec = pgd_trim_kernel(&m, &x, y, eps0, k, &cfg).map_err(|e| format!("run {i}: {e}"))?;
        let v = validate_patch_mask(&rec.mask, k, n);
        // The witness must reproduce the mask footprint by footprint.
        let witness_ok = v.witness.as_ref().is_some_and(|anchors| {
            let mut cover = vec![false; 64];
            for &(r, c) in anchors {
                for dr in 0..k.kh {
                    for dc in 0..k.kw {
                        cover[(r + dr) * 8 + c + dc] = true;
                    }
                }
            }
            let distinct = anchors.iter().collect::<std::collections::BTreeSet<_>>().len() == n;
            distinct && anchors.len() == n && cover.as_slice() == rec.mask.bits()
        });
        if !v.valid || !witness_ok || rec.pixel_l0 > eps0 {
            failures.push(format!("run {i} ({k}, eps0 {eps0})"));
        }
        if k.size() == 1 && pgd_trim(&m, &x, y, eps0, &cfg).unwrap() != rec {
            failures.push(format!("run {i}: 1x1 record differs from the sparse attack"));
        }
        let (mm, xx) = (m.clone(), x.clone());
        attacks.push(Attack {
            label: format!("patch #{i}"),
            x,
            record: rec,
            rerun: Box::new(move || pgd_trim_kernel(&mm, &xx, y, eps0, k, &cfg).unwrap()),
        });
    }
    if failures.is_empty() {
        Ok(format!("{PATCH_RUNS} runs valid with verified witnesses; 1x1 runs identical to the sparse attack"))
    } else {
        Err(format!("{} failures, first: {}", failures.len(), failures[0]))
    }
}

fn digits_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/digits14")
}

fn criterion_6(attacks: &mut Vec<Attack>) -> Outcome {
    let train = load_idx_split(&digits_dir(), "train").map_err(|e| e.to_string())?;
    let test = load_idx_split(&digits_dir(), "test").map_err(|e| e.to_string())?;
    let (model, _) =
        train_toy(&train.images, &train.labels, 10, Architecture::Mlp { hidden: 64 }, &TrainSpec::default(), &mut RngState::new(6))
            .map_err(|e| e.to_string())?;
    let correct: Vec<usize> = (0..test.len())
        .filter(|&i| {
            let z = model.forward(&test.images[i]).unwrap().0;
            let top = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            z.iter().filter(|&&v| v == top).count() == 1 && z[test.labels[i]] == top
        })
        .collect();
    let acc = correct.len() as f64 / test.len() as f64;
    if acc < MIN_CLEAN_ACCURACY || correct.len() < ASR_SAMPLES {
        return Err(format!("clean accuracy {acc:.3} with {} correct samples", correct.len()));
    }
    let model = std::sync::Arc::new(model);
    let cfg = AttackConfig { iterations: 100, mc_samples: 500, n_trim: 5, n_restarts: 3, seed: 66, ..AttackConfig::default() };
    let mut successes = [0usize; BUDGETS.len()];
    let mut violations = 0;
    for (s, &i) in correct.iter().take(ASR_SAMPLES).enumerate() {
        let (x, y) = (&test.images[i], test.labels[i]);
        let mut flags = Vec::new();
        for (b, &eps0) in BUDGETS.iter().enumerate() {
            let c = AttackConfig { seed: cfg.seed + 1000 * s as u64 + eps0 as u64, ..cfg };
            let rec = run_with_restarts(model.as_ref(), x, y, eps0, None, &c).map_err(|e| e.to_string())?;
            let fooled = argmax_fooled(model.as_ref(), x, &rec.delta, y);
            if fooled != rec.success {
                return Err(format!("sample {i} eps0 {eps0}: record success flag disagrees with the model"));
            }
            successes[b] += fooled as usize;
            flags.push(fooled);
            let (mm, xx) = (model.clone(), x.clone());
            attacks.push(Attack {
                label: format!("digits sample {i} eps0 {eps0}"),
                x: x.clone(),
                record: rec,
                rerun: Box::new(move || run_with_restarts(mm.as_ref(), &xx, y, eps0, None, &c).unwrap()),
            });
        }
        violations += flags.windows(2).filter(|w| w[0] && !w[1]).count();
    }
    let asr: Vec<f64> = successes.iter().map(|&s| s as f64 / ASR_SAMPLES as f64).collect();
    let curve: Vec<String> = BUDGETS.iter().zip(&asr).map(|(e, a)| format!("{e}:{a:.2}")).collect();
    let msg = format!("clean acc {acc:.3}; ASR {}; {violations} monotonicity violations", curve.join(" "));
    if asr[3] >= MIN_ASR_AT_14 && violations == 0 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn criterion_7(attacks: &[Attack]) -> Outcome {
    for a in attacks {
        let (x, r) = (&a.x, &a.record);
        for (i, (xv, dv)) in x.values().iter().zip(r.delta.values()).enumerate() {
            if !(0.0..=1.0).contains(&(xv + dv)) {
                return Err(format!("{}: x+delta = {} at cell {i}", a.label, xv + dv));
            }
        }
        for p in 0..x.pixels() {
            if !r.mask.is_set(p) && r.delta.pixel(p).iter().any(|&v| v != 0.0) {
                return Err(format!("{}: pixel {p} perturbed outside the mask", a.label));
            }
        }
        if r.mask.count() > r.eps0 {
            return Err(format!("{}: mask has {} pixels for budget {}", a.label, r.mask.count(), r.eps0));
        }
        let again = (a.rerun)();
        if serde_json::to_string(&again).unwrap() != serde_json::to_string(r).unwrap() || again != *r {
            return Err(format!("{}: rerun with the same seed differs", a.label));
        }
    }
    Ok(format!("{} records feasible, mask-contained and bit-identical on rerun", attacks.len()))
}

fn criterion_8() -> Outcome {
    let shape = InputShape::new(6, 6, 1);
    for i in 0..TRACKING_INSTANCES {
        let mut rng = RngState::new(8000 + i as u64);
        let m = ToyModel::init(Architecture::Conv { filters: 3, kernel: 3 }, shape, 5, &mut rng).unwrap();
        let x = image(shape, &mut rng);
        let y = rng.below(5);
        let t = AttackTarget::new(&m, &x, y, LossSpec::CrossEntropy).unwrap();
        let keep: Vec<usize> = (0..36).filter(|_| rng.uniform(0.0, 1.0) < 0.6).collect();
        let mask = PixelMask::from_indices(6, 6, &keep).unwrap();
        let mut init = Grid3D::zeros(6, 6, 1);
        for &p in &keep {
            init.values_mut()[p] = rng.uniform(-1.0, 1.0).clamp(-x.values()[p], 1.0 - x.values()[p]);
        }
        let family = [DropoutFamily::Bernoulli, DropoutFamily::ContinuousBernoulli, DropoutFamily::Gaussian][i % 3];
        let spec = DropoutSpec::new(family, rng.uniform(0.1, 1.0)).unwrap();
        let step_rng = RngState::new(9000 + i as u64);
        let l_init = m.loss(&x.add(&init).unwrap(), y, LossSpec::CrossEntropy).unwrap();
        let short = dpgd(&t, &mask, &init, spec, 10, 0.05, &step_rng).unwrap();
        let long = dpgd(&t, &mask, &init, spec, 100, 0.05, &step_rng).unwrap();
        let l_short = m.loss(&x.add(&short.delta).unwrap(), y, LossSpec::CrossEntropy).unwrap();
        if l_short != short.loss {
            return Err(format!("instance {i}: reported loss is not the loss of the returned perturbation"));
        }
        if !(short.loss >= l_init && long.loss >= short.loss) {
            return Err(format!("instance {i}: init {l_init}, 10 iters {}, 100 iters {}", short.loss, long.loss));
        }
    }
    Ok(format!("{TRACKING_INSTANCES} instances: loss(100) >= loss(10) >= loss(init)"))
}

fn criterion_9() -> Outcome {
    let mut worst = 0.0f64;
    let mut lines = Vec::new();
    for (f, family) in [DropoutFamily::Bernoulli, DropoutFamily::ContinuousBernoulli, DropoutFamily::Gaussian].into_iter().enumerate() {
        for (j, p) in [0.25, 0.5, 0.9].into_iter().enumerate() {
            let spec = DropoutSpec::new(family, p).unwrap();
            let g = dropout_sample(spec, 1000, DROPOUT_DRAWS / 1000, &mut RngState::new(90 + 3 * f as u64 + j as u64)).unwrap();
            let v = g.values();
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0);
            let z = (mean - p).abs() / (var / n).sqrt();
            if family == DropoutFamily::Bernoulli && v.iter().any(|&a| a != 0.0 && a != 1.0) {
                return Err("bernoulli multiplier outside {0, 1}".into());
            }
            if v.iter().any(|&a| a < 0.0) {
                return Err(format!("{family:?} produced a negative multiplier"));
            }
            worst = worst.max(z);
            lines.push(format!("{family:?}@{p}: {z:.2}"));
        }
    }
    let msg = format!("worst deviation {worst:.2} SE (tol {DROPOUT_SE}); {}", lines.join(", "));
    if worst <= DROPOUT_SE {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn run(id: u8, limit: Duration, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = f();
    let took = start.elapsed();
    let (ok, detail) = match outcome {
        Ok(d) if took <= limit => (true, d),
        Ok(d) => (false, format!("{d}; exceeded {limit:?}")),
        Err(d) => (false, d),
    };
    say(&format!("criterion {id}: {} ({:.1}s) {detail}", if ok { "PASS" } else { "FAIL" }, took.as_secs_f64()));
    ok
}

#[test]
fn acceptance_criteria() {
    let mut attacks = Vec::new();
    let results = [
        run(1, Duration::from_secs(10), criterion_1),
        run(2, Duration::from_secs(60), criterion_2),
        run(3, Duration::from_secs(120), || criterion_3(&mut attacks)),
        run(4, Duration::from_secs(1), criterion_4),
        run(5, Duration::from_secs(300), || criterion_5(&mut attacks)),
        run(6, Duration::from_secs(1800), || criterion_6(&mut attacks)),
        run(7, Duration::from_secs(3600), || criterion_7(&attacks)),
        run(8, Duration::from_secs(60), criterion_8),
        run(9, Duration::from_secs(30), criterion_9),
    ];
    let failed: Vec<usize> = results.iter().enumerate().filter(|(_, &ok)| !ok).map(|(i, _)| i + 1).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
