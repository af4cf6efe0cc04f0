use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use pgdtrim::harness::verify::{self, Scale, VerifyOptions};
use pgdtrim::harness::{
    asr_csv_string, asr_curve, load_idx_split, parse_ppm, read_rows_file, run_experiment, AttackKind,
    DatasetSource, Dataset, ExperimentConfig, ExperimentPlan,
};
use pgdtrim::model::{accuracy, load_weights, save_weights, train_toy, Architecture, TrainSpec};
use pgdtrim::optimize::run_with_restarts;
use pgdtrim::{AttackConfig, Classifier, DropoutFamily, Execution, KernelSpec, LossSpec, RngState};

#[derive(Parser)]
#[command(name = "pgdtrim", version, about = "Sparse and patch adversarial attacks by point-wise trimming")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a toy classifier and write its weight file.
    TrainToy(TrainArgs),
    /// Attack one image and print the attack record as JSON.
    Attack(AttackArgs),
    /// Attack every sample at every budget; writes rows, timings and an ASR summary.
    Sweep(SweepArgs),
    /// Run the built-in oracle and invariant checks.
    Verify(VerifyArgs),
    /// Turn a rows.jsonl file into an ASR-per-budget CSV.
    Asr(AsrArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Directory with `{split}-images.idx3-ubyte` and `{split}-labels.idx1-ubyte`.
    #[arg(long, conflicts_with_all = ["images", "ppm_dir"])]
    data: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
    /// IDX image file (use with --labels).
    #[arg(long, requires = "labels")]
    images: Option<PathBuf>,
    /// IDX label file.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Directory of binary PPM files (use with --ppm-labels).
    #[arg(long, requires = "ppm_labels")]
    ppm_dir: Option<PathBuf>,
    /// `filename,label` CSV for --ppm-dir.
    #[arg(long)]
    ppm_labels: Option<PathBuf>,
}

impl DataArgs {
    fn source(&self) -> Result<DatasetSource> {
        if let Some(dir) = &self.data {
            return Ok(DatasetSource::Idx {
                images: dir.join(format!("{}-images.idx3-ubyte", self.split)),
                labels: dir.join(format!("{}-labels.idx1-ubyte", self.split)),
            });
        }
        if let (Some(images), Some(labels)) = (&self.images, &self.labels) {
            return Ok(DatasetSource::Idx { images: images.clone(), labels: labels.clone() });
        }
        if let (Some(dir), Some(labels)) = (&self.ppm_dir, &self.ppm_labels) {
            return Ok(DatasetSource::Ppm { dir: dir.clone(), labels: labels.clone() });
        }
        bail!("no dataset given: use --data DIR, --images/--labels, or --ppm-dir/--ppm-labels")
    }

    fn load(&self) -> Result<Dataset> {
        let src = self.source()?;
        src.load().with_context(|| format!("loading dataset {src:?}"))
    }
}

#[derive(Args)]
struct AttackFlags {
    /// PGD iterations per DPGD run.
    #[arg(long, default_value_t = 100)]
    iterations: usize,
    #[arg(long, default_value_t = 0.05)]
    step_size: f64,
    /// Monte-Carlo masks per trim.
    #[arg(long, default_value_t = 1000)]
    mc: usize,
    /// Maximum trim steps.
    #[arg(long, default_value_t = 11)]
    n_trim: usize,
    #[arg(long, default_value_t = 11)]
    restarts: usize,
    /// identity | bernoulli | continuous-bernoulli | gaussian
    #[arg(long, default_value = "bernoulli")]
    dropout: DropoutFamily,
    /// cross-entropy | margin
    #[arg(long, default_value = "cross-entropy")]
    loss: LossSpec,
    /// Run Monte-Carlo scoring and sample batches on one thread.
    #[arg(long)]
    sequential: bool,
}

impl AttackFlags {
    fn config(&self, seed: u64) -> AttackConfig {
        AttackConfig {
            iterations: self.iterations,
            step_size: self.step_size,
            mc_samples: self.mc,
            n_trim: self.n_trim,
            n_restarts: self.restarts,
            dropout: self.dropout,
            loss: self.loss,
            seed,
            execution: if self.sequential { Execution::Sequential } else { Execution::Parallel },
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// linear | mlp[:HIDDEN] | conv[:FILTERSxKERNEL]
    #[arg(long, default_value = "mlp:64")]
    arch: Architecture,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    /// Number of classes; defaults to one more than the largest label.
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Evaluate on this split of --data after training.
    #[arg(long)]
    eval_split: Option<String>,
    /// Weight file to write.
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct AttackArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Attack one PPM image instead of a dataset sample (use with --label).
    #[arg(long, conflicts_with_all = ["data", "images", "ppm_dir"], requires = "label")]
    ppm: Option<PathBuf>,
    /// True label; defaults to the dataset label.
    #[arg(long)]
    label: Option<usize>,
    /// Sample index within the dataset.
    #[arg(long, default_value_t = 0)]
    index: usize,
    #[arg(long)]
    model: PathBuf,
    /// L0 budget in pixels.
    #[arg(long)]
    eps0: usize,
    /// Patch shape HxW; omit for the sparse attack.
    #[arg(long)]
    kernel: Option<KernelSpec>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    flags: AttackFlags,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    model: PathBuf,
    /// sparse | patch:HxW
    #[arg(long, default_value = "sparse")]
    attack: AttackKind,
    /// Comma-separated budgets; default: powers of two up to sqrt(H*W), plus sqrt(H*W).
    #[arg(long, value_delimiter = ',')]
    eps0: Vec<usize>,
    /// Master seed (required so that every run is reproducible).
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    limit: Option<usize>,
    /// Count initially misclassified samples in the ASR denominator.
    #[arg(long)]
    all_samples: bool,
    /// Let a success at a smaller budget count at every larger one.
    #[arg(long)]
    carry_forward: bool,
    #[arg(long, env = "PGDTRIM_OUT_DIR", default_value = "pgdtrim-results")]
    out: PathBuf,
    #[command(flatten)]
    flags: AttackFlags,
}

#[derive(Args)]
struct VerifyArgs {
    /// Use the full instance counts (minutes instead of seconds).
    #[arg(long)]
    full: bool,
    /// Digits directory for the ASR check.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 2024)]
    seed: u64,
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct AsrArgs {
    /// rows.jsonl produced by `sweep`.
    #[arg(long)]
    rows: PathBuf,
    /// Count initially misclassified samples in the denominator.
    #[arg(long)]
    all_samples: bool,
    /// Write here instead of standard output.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

fn train(args: TrainArgs) -> Result<()> {
    let data = match &args.data.data {
        Some(dir) => load_idx_split(dir, &args.data.split).with_context(|| format!("loading {}", dir.display()))?,
        None => args.data.load()?,
    };
    let spec = TrainSpec { epochs: args.epochs, learning_rate: args.lr, batch_size: args.batch, momentum: args.momentum };
    let classes = args.classes.unwrap_or(data.classes);
    let (model, report) = train_toy(&data.images, &data.labels, classes, args.arch, &spec, &mut RngState::new(args.seed))?;
    save_weights(&model, &args.out).with_context(|| format!("writing {}", args.out.display()))?;
    let mut summary = serde_json::json!({
        "model": args.out,
        "arch": args.arch.to_string(),
        "train_samples": data.len(),
        "epoch_losses": report.epoch_losses,
        "train_accuracy": report.train_accuracy,
    });
    if let (Some(split), Some(dir)) = (&args.eval_split, &args.data.data) {
        let eval = load_idx_split(dir, split)?;
        summary["eval_split"] = split.clone().into();
        summary["eval_accuracy"] = accuracy(&model, &eval.images, &eval.labels)?.into();
    }
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn attack(args: AttackArgs) -> Result<()> {
    let model = load_weights(&args.model).with_context(|| format!("loading {}", args.model.display()))?;
    let (x, label) = match &args.ppm {
        Some(p) => {
            let bytes = std::fs::read(p).with_context(|| format!("reading {}", p.display()))?;
            (parse_ppm(p, &bytes)?, args.label.expect("clap requires --label"))
        }
        None => {
            let data = args.data.load()?;
            let x = data.images.get(args.index).cloned().with_context(|| format!("index {} out of range", args.index))?;
            (x, args.label.unwrap_or(data.labels[args.index]))
        }
    };
    let cfg = args.flags.config(args.seed);
    let record = run_with_restarts(&model, &x, label, args.eps0, args.kernel, &cfg)?;
    let clean = model.predict(&x)?;
    let adv = model.predict(&x.add(&record.delta)?)?;
    let out = serde_json::json!({
        "label": label,
        "clean_prediction": clean,
        "adversarial_prediction": adv,
        "kernel": args.kernel.map(|k| k.to_string()),
        "record": record,
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn sweep(args: SweepArgs) -> Result<()> {
    let mut plan = ExperimentPlan::new(args.attack, args.flags.config(args.seed));
    plan.eps0 = args.eps0;
    plan.limit = args.limit;
    plan.initially_correct_only = !args.all_samples;
    plan.carry_forward = args.carry_forward;
    let cfg = ExperimentConfig { dataset: args.data.source()?, model: args.model, out_dir: args.out, plan };
    let summary = run_experiment(&cfg, &mut |row| {
        let status = match (&row.error, row.success) {
            (Some(e), _) => format!("error: {e}"),
            (None, true) => "fooled".into(),
            (None, false) => "held".into(),
        };
        eprintln!("sample {:>5} eps0 {:>4} {}", row.sample, row.eps0, status);
    })?;
    eprintln!("{} rows computed, {} already present; output in {}", summary.computed, summary.skipped, cfg.out_dir.display());
    print!("{}", asr_csv_string(&summary.curve)?);
    Ok(())
}

fn run_verify(args: VerifyArgs) -> Result<bool> {
    let mut opts = VerifyOptions {
        scale: if args.full { Scale::Full } else { Scale::Quick },
        seed: args.seed,
        execution: if args.sequential { Execution::Sequential } else { Execution::Parallel },
        ..VerifyOptions::default()
    };
    if let Some(d) = args.data {
        opts.data_dir = d;
    }
    let reports = verify::run_suite(&opts, &mut |r| println!("{r}"));
    let failed = reports.iter().filter(|r| !r.passed).count();
    println!("{} checks, {failed} failed", reports.len());
    Ok(failed == 0)
}

fn asr(args: AsrArgs) -> Result<()> {
    let rows = read_rows_file(&args.rows)?;
    let csv = asr_csv_string(&asr_curve(&rows, &[], !args.all_samples))?;
    match args.out {
        Some(p) => std::fs::write(&p, csv).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::TrainToy(a) => train(a).map(|_| true),
        Command::Attack(a) => attack(a).map(|_| true),
        Command::Sweep(a) => sweep(a).map(|_| true),
        Command::Verify(a) => run_verify(a),
        Command::Asr(a) => asr(a).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

