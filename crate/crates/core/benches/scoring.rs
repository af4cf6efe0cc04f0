//! Sequential versus rayon-parallel Monte-Carlo scoring and sweeps.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use pgdtrim::harness::{run_experiment_on, synthetic_blobs, AttackKind, ExperimentPlan};
use pgdtrim::model::{AttackTarget, InputShape};
use pgdtrim::trim::pointwise_scores;
use pgdtrim::{AttackConfig, Execution, Grid3D, LossSpec, PixelMask, RngState, ToyModel};

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn scoring(c: &mut Criterion) {
    let shape = InputShape::new(14, 14, 1);
    let mut rng = RngState::new(0);
    let m = ToyModel::init(pgdtrim::model::Architecture::Mlp { hidden: 64 }, shape, 10, &mut rng).unwrap();
    let x = Grid3D::new(14, 14, 1, (0..196).map(|_| rng.uniform(0.0, 1.0)).collect()).unwrap();
    let mut delta = Grid3D::new(14, 14, 1, (0..196).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap();
    delta.clip_to_box(&x).unwrap();
    let t = AttackTarget::new(&m, &x, 3, LossSpec::CrossEntropy).unwrap();
    let support = PixelMask::full(14, 14).unwrap();

    let mut group = c.benchmark_group("pointwise_scores_mc1000");
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| pointwise_scores(&t, &delta, &support, 64, 1000, &RngState::new(1), exec).unwrap())
        });
    }
    group.finish();
}

fn sweep(c: &mut Criterion) {
    let shape = InputShape::new(8, 8, 1);
    let mut rng = RngState::new(2);
    let data = synthetic_blobs(16, shape, 4, 0.2, &mut rng).unwrap();
    let m = ToyModel::init(pgdtrim::model::Architecture::Mlp { hidden: 16 }, shape, 4, &mut rng).unwrap();
    let mut group = c.benchmark_group("sweep_16_samples");
    group.sample_size(10);
    for (name, exec) in MODES {
        let cfg = AttackConfig { iterations: 20, mc_samples: 100, n_trim: 3, n_restarts: 1, execution: exec, ..Default::default() };
        let mut plan = ExperimentPlan::new(AttackKind::Sparse, cfg);
        plan.eps0 = vec![4];
        plan.initially_correct_only = false;
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                let dir = tempfile::tempdir().unwrap();
                run_experiment_on(&m, &data, &plan, dir.path(), &mut |_| {}).unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, scoring, sweep);
criterion_main!(benches);
