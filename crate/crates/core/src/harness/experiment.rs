//! Resumable ASR sweeps over a dataset.
//!
//! Output directory layout:
//! - `rows.jsonl`: one [`ResultRow`] per (sample, ε0, attack), appended in
//!   sample order then ascending ε0.
//! - `summary.csv`: the ASR curve, rewritten from every row after each run.
//! - `timings.jsonl`: wall-clock seconds per computed row, kept apart so that
//!   `rows.jsonl` is byte-identical across reruns.
//! - `config.json`: the experiment plan; a rerun with a different plan is refused.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::grid::{Image, RngState};
use crate::mask::{KernelSpec, PixelMask};
use crate::model::{load_weights, Classifier};
use crate::optimize::{max_trim_steps, run_with_restarts, AttackConfig, AttackRecord};
use crate::par::{self, Execution};

use super::asr::{asr_curve, write_asr_csv, AsrPoint};
use super::codec::EncodedPerturbation;
use super::dataset::{list_ppm, load_idx, load_ppm, Dataset};

pub const ROWS_FILE: &str = "rows.jsonl";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const TIMINGS_FILE: &str = "timings.jsonl";
pub const CONFIG_FILE: &str = "config.json";

/// Samples attacked concurrently before their rows are flushed.
const CHUNK: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AttackKind {
    Sparse,
    Patch(KernelSpec),
}

impl AttackKind {
    pub fn kernel(&self) -> Option<KernelSpec> {
        match self {
            AttackKind::Sparse => None,
            AttackKind::Patch(k) => Some(*k),
        }
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttackKind::Sparse => write!(f, "sparse"),
            AttackKind::Patch(k) => write!(f, "patch:{k}"),
        }
    }
}

impl FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            None if s == "sparse" => Ok(AttackKind::Sparse),
            Some(("patch", k)) => Ok(AttackKind::Patch(k.parse()?)),
            _ => Err(Error::invalid(format!("attack kind must be 'sparse' or 'patch:HxW', got '{s}'"))),
        }
    }
}

impl Serialize for AttackKind {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for AttackKind {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// Powers of two up to `⌊√(H·W)⌋`, plus `⌊√(H·W)⌋` itself.
pub fn default_eps0(height: usize, width: usize) -> Vec<usize> {
    let root = (height * width).isqrt();
    let mut out: Vec<usize> = (0..usize::BITS).map(|i| 1usize << i).take_while(|&p| p <= root).collect();
    if !root.is_power_of_two() {
        out.push(root);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "format", rename_all = "kebab-case")]
pub enum DatasetSource {
    Idx { images: PathBuf, labels: PathBuf },
    /// Every `*.ppm` in `dir`, labelled by the `filename,label` CSV.
    Ppm { dir: PathBuf, labels: PathBuf },
}

impl DatasetSource {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DatasetSource::Idx { images, labels } => load_idx(images, labels),
            DatasetSource::Ppm { dir, labels } => load_ppm(&list_ppm(dir)?, labels),
        }
    }
}

/// What to run, independent of where inputs and outputs live.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub attack: AttackKind,
    /// Empty means [`default_eps0`], restricted to multiples of the kernel size for patches.
    pub eps0: Vec<usize>,
    pub attack_config: AttackConfig,
    /// Attack at most this many samples, taken from the front of the dataset.
    pub limit: Option<usize>,
    /// Exclude initially misclassified samples from the ASR denominator.
    pub initially_correct_only: bool,
    /// A success at a smaller budget also counts at every larger budget.
    pub carry_forward: bool,
}

impl ExperimentPlan {
    pub fn new(attack: AttackKind, attack_config: AttackConfig) -> Self {
        Self { attack, eps0: Vec::new(), attack_config, limit: None, initially_correct_only: true, carry_forward: false }
    }

    /// The validated ascending budget list for `height × width` inputs.
    pub fn budgets(&self, height: usize, width: usize) -> Result<Vec<usize>> {
        let n = height * width;
        let list: Vec<usize> = if self.eps0.is_empty() {
            let k = self.attack.kernel().map_or(1, |k| k.size());
            default_eps0(height, width).into_iter().filter(|e| e % k == 0 && *e < n).collect()
        } else {
            self.eps0.clone()
        };
        let set: BTreeSet<usize> = list.iter().copied().collect();
        if set.len() != list.len() {
            return Err(Error::invalid("duplicate eps0 values"));
        }
        for &e in &set {
            max_trim_steps(n, e)?;
            if let Some(k) = self.attack.kernel() {
                k.patches_for_budget(e)?;
                let (ah, aw) = k.anchor_dims(height, width)?;
                if e / k.size() > ah * aw {
                    return Err(Error::invalid(format!("eps0 {e} needs more {k} patches than fit in {height}x{width}")));
                }
            }
        }
        Ok(set.into_iter().collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    pub model: PathBuf,
    pub out_dir: PathBuf,
    #[serde(flatten)]
    pub plan: ExperimentPlan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub sample: usize,
    pub label: usize,
    pub eps0: usize,
    pub attack: String,
    pub seed: u64,
    pub initially_correct: bool,
    /// False when the clean sample was already misclassified and no attack ran.
    pub attacked: bool,
    /// Re-derived from the stored perturbation.
    pub success: bool,
    /// Success of this budget's own attack, before carry-forward.
    pub raw_success: bool,
    /// Budget whose successful perturbation this row reuses.
    pub carried_from: Option<usize>,
    /// Pixels selected by the stored mask.
    pub pixel_l0: usize,
    /// Pixels where the stored perturbation is non-zero.
    pub perturbed_pixels: usize,
    pub best_loss: Option<f64>,
    pub restart: Option<usize>,
    pub mask: Option<PixelMask>,
    pub delta: Option<EncodedPerturbation>,
    pub error: Option<String>,
}

impl ResultRow {
    pub fn blank(sample: usize, eps0: usize, attack: &str) -> Self {
        Self {
            sample,
            label: 0,
            eps0,
            attack: attack.to_string(),
            seed: 0,
            initially_correct: false,
            attacked: false,
            success: false,
            raw_success: false,
            carried_from: None,
            pixel_l0: 0,
            perturbed_pixels: 0,
            best_loss: None,
            restart: None,
            mask: None,
            delta: None,
            error: None,
        }
    }

    pub fn key(&self) -> (usize, usize, String) {
        (self.sample, self.eps0, self.attack.clone())
    }

    /// Re-apply the stored perturbation and evaluate the success predicate.
    pub fn rederive_success(&self, model: &dyn Classifier, x: &Image) -> Result<bool> {
        match &self.delta {
            Some(d) => model.is_fooled(&x.add(&d.decode_for(x)?)?, self.label),
            None => model.is_fooled(x, self.label),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TimingRow {
    sample: usize,
    eps0: usize,
    attack: String,
    seconds: f64,
}

/// Seed for one (sample, budget) attack.
pub fn row_seed(master: u64, sample: usize, eps0: usize) -> u64 {
    RngState::new(master).fork(sample as u64).fork_seed(eps0 as u64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSummary {
    pub computed: usize,
    pub skipped: usize,
    pub rows: Vec<ResultRow>,
    pub curve: Vec<AsrPoint>,
}

struct Stored {
    mask: PixelMask,
    delta: EncodedPerturbation,
    best_loss: Option<f64>,
    restart: Option<usize>,
}

fn fill_from(row: &mut ResultRow, s: &Stored, model: &dyn Classifier, x: &Image) -> Result<()> {
    let d = s.delta.decode_for(x)?;
    row.pixel_l0 = s.mask.count();
    row.perturbed_pixels = d.pixel_l0();
    row.mask = Some(s.mask.clone());
    row.delta = Some(s.delta.clone());
    row.best_loss = s.best_loss;
    row.restart = s.restart;
    row.success = model.is_fooled(&x.add(&d)?, row.label)?;
    Ok(())
}

fn stored_of(rec: &AttackRecord) -> Stored {
    Stored {
        mask: rec.mask.clone(),
        delta: EncodedPerturbation::encode(&rec.delta),
        best_loss: Some(rec.best_loss),
        restart: Some(rec.restart),
    }
}

/// All rows of one sample, ascending budget. `done` holds rows already on
/// disk; they are returned unchanged and feed carry-forward.
fn sample_rows(
    model: &dyn Classifier,
    x: &Image,
    label: usize,
    sample: usize,
    budgets: &[usize],
    plan: &ExperimentPlan,
    done: &HashMap<usize, ResultRow>,
) -> Vec<(ResultRow, Option<f64>)> {
    let attack = plan.attack.to_string();
    let correct = model.predict(x).ok().flatten() == Some(label);
    let mut out = Vec::with_capacity(budgets.len());
    let mut best_prior: Option<(usize, Stored)> = None;
    for &eps0 in budgets {
        if let Some(r) = done.get(&eps0) {
            if r.success && r.error.is_none() {
                if let (Some(mask), Some(delta)) = (&r.mask, &r.delta) {
                    let s = Stored { mask: mask.clone(), delta: delta.clone(), best_loss: r.best_loss, restart: r.restart };
                    best_prior.get_or_insert((r.carried_from.unwrap_or(eps0), s));
                }
            }
            out.push((r.clone(), None));
            continue;
        }
        let started = Instant::now();
        let seed = row_seed(plan.attack_config.seed, sample, eps0);
        let mut row = ResultRow { label, seed, initially_correct: correct, ..ResultRow::blank(sample, eps0, &attack) };
        let result: Result<()> = (|| {
            if !correct {
                row.best_loss = Some(model.loss(x, label, plan.attack_config.loss)?);
                row.success = model.is_fooled(x, label)?;
                row.raw_success = row.success;
                return Ok(());
            }
            row.attacked = true;
            let cfg = AttackConfig { seed, ..plan.attack_config };
            let rec = run_with_restarts(model, x, label, eps0, plan.attack.kernel(), &cfg)?;
            rec.check_feasible(x)?;
            let fresh = stored_of(&rec);
            fill_from(&mut row, &fresh, model, x)?;
            row.raw_success = row.success;
            match &best_prior {
                Some((from, s)) if plan.carry_forward && !row.success => {
                    fill_from(&mut row, s, model, x)?;
                    row.carried_from = Some(*from);
                }
                None if row.success => best_prior = Some((eps0, fresh)),
                _ => {}
            }
            Ok(())
        })();
        if let Err(e) = result {
            row = ResultRow {
                label,
                seed,
                initially_correct: correct,
                attacked: correct,
                error: Some(e.to_string()),
                ..ResultRow::blank(sample, eps0, &attack)
            };
        }
        out.push((row, Some(started.elapsed().as_secs_f64())));
    }
    out
}

/// Existing rows, after dropping a torn final line left by an interrupted run.
fn read_rows(path: &Path) -> Result<Vec<ResultRow>> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(path, e)),
    };
    let complete = text.rfind('\n').map_or(0, |i| i + 1);
    if complete < text.len() {
        let f = OpenOptions::new().write(true).open(path).map_err(|e| Error::io(path, e))?;
        f.set_len(complete as u64).map_err(|e| Error::io(path, e))?;
    }
    text[..complete]
        .lines()
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::invalid(format!("{} line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

pub fn read_rows_file(path: &Path) -> Result<Vec<ResultRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::invalid(format!("{} line {}: {e}", path.display(), i + 1))))
        .collect()
}

fn check_plan(out_dir: &Path, plan: &ExperimentPlan) -> Result<()> {
    let path = out_dir.join(CONFIG_FILE);
    let mut fixed = plan.clone();
    fixed.limit = None;
    fixed.attack_config.execution = Execution::default();
    let text = serde_json::to_string_pretty(&fixed)? + "\n";
    match fs::read_to_string(&path) {
        Ok(old) if old == text => Ok(()),
        Ok(_) => Err(Error::invalid(format!("{} holds a different experiment plan; use a fresh output directory", path.display()))),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => fs::write(&path, text).map_err(|e| Error::io(&path, e)),
        Err(e) => Err(Error::io(&path, e)),
    }
}

fn append_lines<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let f = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for it in items {
        serde_json::to_writer(&mut w, it)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Load inputs from disk and run [`run_experiment_on`].
pub fn run_experiment(cfg: &ExperimentConfig, progress: &mut dyn FnMut(&ResultRow)) -> Result<ExperimentSummary> {
    let data = cfg.dataset.load()?;
    let model = load_weights(&cfg.model)?;
    run_experiment_on(&model, &data, &cfg.plan, &cfg.out_dir, progress)
}

/// Attack the first `limit` samples at every budget and persist the results.
/// Rows already present in `out_dir` are not recomputed. `progress` sees each
/// newly computed row in write order.
pub fn run_experiment_on(
    model: &dyn Classifier,
    data: &Dataset,
    plan: &ExperimentPlan,
    out_dir: &Path,
    progress: &mut dyn FnMut(&ResultRow),
) -> Result<ExperimentSummary> {
    plan.attack_config.validate()?;
    if model.input_shape() != data.shape {
        return Err(Error::shape(format!("model expects {:?}, dataset has {:?}", model.input_shape(), data.shape)));
    }
    let budgets = plan.budgets(data.shape.height, data.shape.width)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    check_plan(out_dir, plan)?;

    let rows_path = out_dir.join(ROWS_FILE);
    let mut rows = read_rows(&rows_path)?;
    let attack = plan.attack.to_string();
    let mut done: HashMap<usize, HashMap<usize, ResultRow>> = HashMap::new();
    for r in rows.iter().filter(|r| r.attack == attack) {
        done.entry(r.sample).or_default().insert(r.eps0, r.clone());
    }
    File::options().create(true).append(true).open(&rows_path).map_err(|e| Error::io(&rows_path, e))?;

    let n = plan.limit.map_or(data.len(), |l| l.min(data.len()));
    let empty = HashMap::new();
    let (mut computed, mut skipped) = (0, 0);
    for start in (0..n).step_by(CHUNK) {
        let end = (start + CHUNK).min(n);
        let results = par::map_indexed(plan.attack_config.execution, end - start, |i| {
            let s = start + i;
            sample_rows(model, &data.images[s], data.labels[s], s, &budgets, plan, done.get(&s).unwrap_or(&empty))
        });
        let mut new_rows = Vec::new();
        let mut timings = Vec::new();
        for (row, secs) in results.into_iter().flatten() {
            match secs {
                Some(seconds) => {
                    timings.push(TimingRow { sample: row.sample, eps0: row.eps0, attack: row.attack.clone(), seconds });
                    new_rows.push(row);
                }
                None => skipped += 1,
            }
        }
        append_lines(&rows_path, &new_rows)?;
        append_lines(&out_dir.join(TIMINGS_FILE), &timings)?;
        for r in &new_rows {
            progress(r);
        }
        computed += new_rows.len();
        rows.extend(new_rows);
    }

    let curve = asr_curve(&rows, &budgets, plan.initially_correct_only);
    let summary_path = out_dir.join(SUMMARY_FILE);
    let f = File::create(&summary_path).map_err(|e| Error::io(&summary_path, e))?;
    write_asr_csv(&curve, BufWriter::new(f))?;
    Ok(ExperimentSummary { computed, skipped, rows, curve })
}
