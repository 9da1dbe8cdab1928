//! Declarative experiments: ingest, leave-one-subject-out folds, training of
//! every requested mode, test scoring and report emission.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{
    load_recordings, louo_splits_for, make_windows, synth_generate, DatasetError, LoadOptions, NormStats,
    Recording, SplitPlan, SynthParams, WindowSet,
};
use crate::evaluation::{emit_report, ConfusionMatrix, EvalError, EvalReport, FoldResult, Report, ReportFormat};
use crate::model::{ModelBundle, ModelCfg, ModelError, Net, StreamShape};
use crate::seed::stream_seed;
use crate::training::{evaluate_path, train, EvalPath, Mode, Provenance, TrainConfig, TrainData, TrainError, TrainOptions};

/// Environment variable naming the root that relative output dirs resolve
/// against.
pub const OUTPUT_ROOT_ENV: &str = "XSENSE_OUTPUT_ROOT";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("{path}: invalid `{key}`: {msg}")]
    Config { path: String, key: String, msg: String },
    #[error("{path}: {msg}")]
    Parse { path: String, msg: String },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("leakage: {0}")]
    Leakage(String),
    #[error("{failed} fold run(s) failed")]
    FoldsFailed { failed: usize },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io { path: path.display().to_string(), source }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Csv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsvSource {
    pub path: PathBuf,
    #[serde(flatten)]
    pub load: LoadOptions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetCfg {
    pub kind: DataSource,
    /// Teacher modality, used during training only.
    pub source: String,
    /// Deployed modality.
    pub target: String,
    /// Modalities concatenated for FUSED (default: source and target).
    #[serde(default)]
    pub fused: Vec<String>,
    #[serde(default = "default_window")]
    pub window_seconds: f64,
    #[serde(default = "default_slide")]
    pub slide_seconds: f64,
    /// Run only the first this many folds (0: all).
    #[serde(default)]
    pub max_folds: usize,
    #[serde(default)]
    pub synthetic: Option<SynthParams>,
    #[serde(default)]
    pub csv: Option<CsvSource>,
}

fn default_window() -> f64 {
    2.0
}

fn default_slide() -> f64 {
    0.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalCfg {
    pub modes: Vec<Mode>,
    pub baseline_mode: Mode,
    pub output_dir: PathBuf,
    pub formats: Vec<ReportFormat>,
}

impl Default for EvalCfg {
    fn default() -> Self {
        Self {
            modes: vec![Mode::Baseline, Mode::Tsr, Mode::Ctsr, Mode::Cfsr],
            baseline_mode: Mode::Baseline,
            output_dir: PathBuf::from("runs/default"),
            formats: vec![ReportFormat::Json, ReportFormat::Csv, ReportFormat::Markdown],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetCfg,
    #[serde(default)]
    pub model: ModelCfg,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalCfg,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, origin: &str) -> Result<Self, ExperimentError> {
        let cfg: Self =
            toml::from_str(text).map_err(|e| ExperimentError::Parse { path: origin.into(), msg: e.to_string() })?;
        cfg.validate(origin)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml(&text, &path.display().to_string())
    }

    /// Effective config with every default filled in.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self, origin: &str) -> Result<(), ExperimentError> {
        let bad = |key: &str, msg: String| Err(ExperimentError::Config { path: origin.into(), key: key.into(), msg });
        let d = &self.dataset;
        if d.source == d.target {
            return bad("dataset.source", "source and target must be different modalities".into());
        }
        let names: Option<Vec<String>> = match d.kind {
            DataSource::Synthetic => {
                let p = d.synthetic.clone().unwrap_or_default();
                Some(p.modalities().into_iter().map(|m| m.name).collect())
            }
            DataSource::Csv => match &d.csv {
                Some(c) => Some(c.load.modalities.iter().map(|m| m.name.clone()).collect()),
                None => return bad("dataset.csv", "kind = \"csv\" needs a [dataset.csv] block".into()),
            },
        };
        if let Some(names) = names {
            for (key, m) in [("dataset.source", &d.source), ("dataset.target", &d.target)]
                .into_iter()
                .chain(d.fused.iter().map(|m| ("dataset.fused", m)))
            {
                if !names.contains(m) {
                    return bad(key, format!("unknown modality `{m}` (have {})", names.join(", ")));
                }
            }
        }
        if !(d.window_seconds > 0.0) {
            return bad("dataset.window_seconds", "must be > 0".into());
        }
        if !(d.slide_seconds > 0.0) {
            return bad("dataset.slide_seconds", "must be > 0".into());
        }
        if self.eval.modes.is_empty() {
            return bad("eval.modes", "no modes requested".into());
        }
        for &mode in &self.eval.modes {
            self.train.validate(mode).map_err(|e| match e {
                TrainError::Config { key, msg } => ExperimentError::Config { path: origin.into(), key, msg },
                other => ExperimentError::Train(other),
            })?;
        }
        Ok(())
    }

    /// Class names in label order.
    pub fn activities(&self) -> Vec<String> {
        match (&self.dataset.kind, &self.dataset.csv) {
            (DataSource::Csv, Some(c)) => c.load.activities.clone(),
            _ => self.dataset.synthetic.clone().unwrap_or_default().activities(),
        }
    }

    fn fused_modalities(&self) -> Vec<String> {
        if self.dataset.fused.is_empty() {
            vec![self.dataset.source.clone(), self.dataset.target.clone()]
        } else {
            self.dataset.fused.clone()
        }
    }
}

/// Command-line overrides.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub modes: Option<Vec<Mode>>,
    pub force: bool,
    pub parallel_folds: usize,
    pub strict_determinism: bool,
    pub output_root: Option<PathBuf>,
}

impl RunOptions {
    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(m) = &self.modes {
            cfg.eval.modes = m.clone();
        }
        if self.strict_determinism {
            cfg.train.strict_determinism = true;
        }
    }

    pub fn output_dir(&self, cfg: &ExperimentConfig) -> PathBuf {
        let dir = &cfg.eval.output_dir;
        if dir.is_absolute() {
            return dir.clone();
        }
        let root = self
            .output_root
            .clone()
            .or_else(|| std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from));
        match root {
            Some(r) => r.join(dir),
            None => dir.clone(),
        }
    }
}

/// Windows of every subject, keyed by subject id.
pub struct Prepared {
    pub activities: Vec<String>,
    pub sample_rate: f64,
    pub paired: BTreeMap<String, WindowSet>,
    pub fused: BTreeMap<String, WindowSet>,
    pub splits: Vec<SplitPlan>,
}

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Vec<Recording>, ExperimentError> {
    let d = &cfg.dataset;
    Ok(match (&d.kind, &d.csv) {
        (DataSource::Csv, Some(c)) => load_recordings(&c.path, &c.load)?,
        _ => synth_generate(&d.synthetic.clone().unwrap_or_default()).recordings,
    })
}

fn group_windows(
    recs: &[Recording],
    src: &[String],
    dst: &[String],
    cfg: &DatasetCfg,
) -> Result<BTreeMap<String, WindowSet>, ExperimentError> {
    let mut out: BTreeMap<String, WindowSet> = BTreeMap::new();
    for rec in recs {
        let pairs = make_windows(rec, src, dst, cfg.window_seconds, cfg.slide_seconds)?;
        if pairs.is_empty() {
            continue;
        }
        let set = WindowSet::from_pairs(&pairs)?;
        match out.get_mut(&rec.subject_id) {
            Some(s) => s.extend(&set)?,
            None => {
                out.insert(rec.subject_id.clone(), set);
            }
        }
    }
    Ok(out)
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared, ExperimentError> {
    let recs = load_dataset(cfg)?;
    let activities = cfg.activities();
    let d = &cfg.dataset;
    let paired = group_windows(&recs, std::slice::from_ref(&d.source), std::slice::from_ref(&d.target), d)?;
    let fused = if cfg.eval.modes.contains(&Mode::Fused) {
        let others: Vec<String> = cfg.fused_modalities().into_iter().filter(|m| *m != d.target).collect();
        group_windows(&recs, &others, std::slice::from_ref(&d.target), d)?
            .into_iter()
            .map(|(k, v)| (k, v.fused()))
            .collect()
    } else {
        BTreeMap::new()
    };
    let subjects: Vec<String> = paired.keys().cloned().collect();
    let mut splits = louo_splits_for(&subjects)?;
    if d.max_folds > 0 {
        splits.truncate(d.max_folds);
    }
    let sample_rate = recs.first().map_or(0.0, |r| r.sample_rate);
    Ok(Prepared { activities, sample_rate, paired, fused, splits })
}

fn gather(sets: &BTreeMap<String, WindowSet>, subjects: &[String]) -> Result<WindowSet, ExperimentError> {
    let mut out: Option<WindowSet> = None;
    for s in subjects {
        let w = sets
            .get(s)
            .ok_or_else(|| ExperimentError::Leakage(format!("subject {s} has no windows")))?;
        match &mut out {
            Some(o) => o.extend(w)?,
            None => out = Some(w.clone()),
        }
    }
    out.ok_or_else(|| ExperimentError::Leakage("empty split".into()))
}

/// Normalised train/validation/test sets of one fold, statistics from the
/// training subjects only.
pub fn fold_sets(
    sets: &BTreeMap<String, WindowSet>,
    plan: &SplitPlan,
) -> Result<(WindowSet, WindowSet, WindowSet), ExperimentError> {
    let mut train = gather(sets, &plan.train_subjects)?;
    let mut val = gather(sets, std::slice::from_ref(&plan.validation_subject))?;
    let mut test = gather(sets, std::slice::from_ref(&plan.test_subject))?;
    let stats = NormStats::fit(&train);
    for s in [&mut train, &mut val, &mut test] {
        stats.normalize(s);
    }
    Ok((train, val, test))
}

/// Stored per (mode, fold).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldRecord {
    pub mode: Mode,
    pub plan: SplitPlan,
    pub result: FoldResult,
    pub best_epoch: Option<usize>,
    pub best_val_f1: Option<f64>,
    pub test_windows: usize,
    pub test_src_encoder_calls: u64,
    pub test_translator_calls: u64,
    pub provenance: Provenance,
}

fn fold_dir(out: &Path, mode: Mode, plan: &SplitPlan) -> PathBuf {
    out.join(mode.name().to_lowercase()).join(&plan.test_subject)
}

const RESULT_FILE: &str = "result.json";

fn build_bundle(
    cfg: &ExperimentConfig,
    mode: Mode,
    train: &WindowSet,
    rate: f64,
    classes: usize,
    init_seed: u64,
) -> Result<ModelBundle<f32>, ExperimentError> {
    let m = &cfg.model;
    if mode.is_paired() {
        let src = StreamShape { channels: train.src_channels, n_w: train.n_w, patch_len: m.src.resolved_patch_len(rate) };
        let dst = StreamShape { channels: train.dst_channels, n_w: train.n_w, patch_len: m.dst.resolved_patch_len(rate) };
        Ok(ModelBundle::paired(m, src, dst, classes, init_seed)?)
    } else {
        let s = StreamShape { channels: train.dst_channels, n_w: train.n_w, patch_len: m.dst.resolved_patch_len(rate) };
        Ok(ModelBundle::fused(m, s, classes, init_seed)?)
    }
}

/// Trains and tests one mode on one fold, resuming from a checkpoint left
/// by an interrupted run.
pub fn run_fold(
    cfg: &ExperimentConfig,
    data: &Prepared,
    mode: Mode,
    plan: &SplitPlan,
    dir: &Path,
) -> Result<FoldRecord, ExperimentError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let sets = if mode.is_paired() { &data.paired } else { &data.fused };
    let (train_set, val_set, test_set) = fold_sets(sets, plan)?;
    let classes = data.activities.len();
    let fold_seed = stream_seed(cfg.train.seed, &format!("fold/{}", plan.test_subject));
    let mut bundle = build_bundle(cfg, mode, &train_set, data.sample_rate, classes, stream_seed(fold_seed, "init"))?;
    let tcfg = TrainConfig { seed: stream_seed(fold_seed, "train"), ..cfg.train.clone() };
    let opts = TrainOptions {
        checkpoint: Some(dir.join("checkpoint.bin")),
        checkpoint_every: 10,
        resume: true,
        stop_after_epochs: None,
        trace_path: Some(dir.join("trace.jsonl")),
    };
    let outcome = train(&mut bundle, mode, &tcfg, TrainData { train: &train_set, validation: &val_set }, &opts)?;

    let prov = &outcome.provenance;
    if prov.train_subjects.contains(&plan.test_subject) || prov.validation_subjects.contains(&plan.test_subject) {
        return Err(ExperimentError::Leakage(format!("test subject {} reached training", plan.test_subject)));
    }
    bundle.counters().reset();
    let pred = evaluate_path(&bundle, &test_set, EvalPath::Dst)?;
    let counts = bundle.counters().snapshot();
    let calls = |n: Net| counts.get(&n).copied().unwrap_or(0);
    let cm = ConfusionMatrix::from_predictions(classes, &test_set.labels, &pred);
    let record = FoldRecord {
        mode,
        plan: plan.clone(),
        result: FoldResult::new(plan.test_subject.clone(), cm),
        best_epoch: outcome.best_epoch,
        best_val_f1: outcome.best_val_f1,
        test_windows: test_set.len(),
        test_src_encoder_calls: calls(Net::ESrc),
        test_translator_calls: calls(Net::TS2d) + calls(Net::TD2s),
        provenance: outcome.provenance,
    };
    let path = dir.join(RESULT_FILE);
    let text = serde_json::to_string_pretty(&record).map_err(|e| EvalError::Encode(e.to_string()))?;
    fs::write(&path, text).map_err(io_err(&path))?;
    log::info!("{mode} fold {}: macro-F1 {:.4}", plan.test_subject, record.result.macro_f1);
    Ok(record)
}

#[derive(Debug)]
pub struct RunSummary {
    pub output_dir: PathBuf,
    pub report: Report,
    pub records: Vec<FoldRecord>,
    pub failures: Vec<(Mode, String, String)>,
}

const ECHO_FILE: &str = "config.toml";

/// Runs every requested mode over every fold. Finished (mode, fold) pairs
/// found on disk are reused unless `force`.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunSummary, ExperimentError> {
    let mut cfg = cfg.clone();
    opts.apply(&mut cfg);
    cfg.validate("<effective config>")?;
    let out = opts.output_dir(&cfg);
    fs::create_dir_all(&out).map_err(io_err(&out))?;
    let echo = out.join(ECHO_FILE);
    let text = cfg.to_toml();
    if echo.exists() && !opts.force {
        let prev = fs::read_to_string(&echo).map_err(io_err(&echo))?;
        let prev = ExperimentConfig::from_toml(&prev, &echo.display().to_string())?;
        let mut a = prev.clone();
        let mut b = cfg.clone();
        // the mode list and determinism flag may change between resumed runs
        a.eval.modes.clear();
        b.eval.modes.clear();
        a.train.strict_determinism = false;
        b.train.strict_determinism = false;
        if a != b {
            return Err(ExperimentError::Config {
                path: echo.display().to_string(),
                key: "config".into(),
                msg: "output directory holds results of a different config; pass --force to overwrite".into(),
            });
        }
    }
    fs::write(&echo, &text).map_err(io_err(&echo))?;

    let data = prepare(&cfg)?;
    let jobs: Vec<(Mode, SplitPlan)> = cfg
        .eval
        .modes
        .iter()
        .flat_map(|&m| data.splits.iter().map(move |p| (m, p.clone())))
        .collect();
    let results: Mutex<Vec<Option<Result<FoldRecord, String>>>> = Mutex::new(vec![None; jobs.len()]);
    let next = AtomicUsize::new(0);
    let work = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        let Some((mode, plan)) = jobs.get(i) else { break };
        let dir = fold_dir(&out, *mode, plan);
        let done = dir.join(RESULT_FILE);
        let r = if done.exists() && !opts.force {
            log::info!("{mode} fold {}: reusing {}", plan.test_subject, done.display());
            read_record(&done)
        } else {
            if opts.force {
                let _ = fs::remove_dir_all(&dir);
            }
            run_fold(&cfg, &data, *mode, plan, &dir)
        };
        let r = r.map_err(|e| {
            log::error!("{mode} fold {}: {e}", plan.test_subject);
            e.to_string()
        });
        results.lock().expect("results lock")[i] = Some(r);
    };
    let workers = opts.parallel_folds.max(1);
    if workers == 1 {
        work();
    } else {
        thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(work);
            }
        });
    }

    let mut records = Vec::new();
    let mut failures = Vec::new();
    for ((mode, plan), r) in jobs.iter().zip(results.into_inner().expect("results lock")) {
        match r.expect("every job ran") {
            Ok(rec) => records.push(rec),
            Err(e) => failures.push((*mode, plan.test_subject.clone(), e)),
        }
    }
    let report = build_report(&cfg, &data.activities, &records)?;
    write_reports(&out, &report, &cfg.eval.formats)?;
    Ok(RunSummary { output_dir: out, report, records, failures })
}

pub fn read_record(path: &Path) -> Result<FoldRecord, ExperimentError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| EvalError::Encode(format!("{}: {e}", path.display())).into())
}

pub fn build_report(cfg: &ExperimentConfig, activities: &[String], records: &[FoldRecord]) -> Result<Report, ExperimentError> {
    let mut modes = Vec::new();
    for &mode in &cfg.eval.modes {
        let mut folds: Vec<FoldResult> = records.iter().filter(|r| r.mode == mode).map(|r| r.result.clone()).collect();
        if folds.is_empty() {
            continue;
        }
        folds.sort_by(|a, b| a.fold.cmp(&b.fold));
        let teacher = if mode == Mode::Baseline {
            "-".to_string()
        } else if mode == Mode::Fused {
            cfg.fused_modalities().join("+")
        } else {
            cfg.dataset.source.clone()
        };
        modes.push(EvalReport::new(mode.name(), teacher, cfg.dataset.target.clone(), activities.to_vec(), folds));
    }
    let baseline = cfg.eval.baseline_mode.name();
    let has_base = modes.iter().any(|m| m.mode == baseline);
    if has_base {
        // folds missing from either side make the comparison meaningless
        let base_folds: Vec<String> = modes.iter().find(|m| m.mode == baseline).unwrap().folds.iter().map(|f| f.fold.clone()).collect();
        let comparable: Vec<EvalReport> = modes
            .iter()
            .filter(|m| m.folds.iter().map(|f| f.fold.clone()).collect::<Vec<_>>() == base_folds)
            .cloned()
            .collect();
        let rows = crate::evaluation::improvement_table(&comparable, baseline)?;
        Ok(Report { baseline_mode: baseline.into(), modes, rows })
    } else {
        Ok(Report { baseline_mode: baseline.into(), modes, rows: Vec::new() })
    }
}

pub fn write_reports(out: &Path, report: &Report, formats: &[ReportFormat]) -> Result<(), ExperimentError> {
    for &f in formats {
        emit_report(report, f, &out.join(format!("report.{}", f.extension())))?;
    }
    Ok(())
}

/// Rebuilds the report of a finished (or partial) run from the fold results
/// of every mode stored in its output dir.
pub fn report_from_dir(out: &Path) -> Result<Report, ExperimentError> {
    let mut cfg = ExperimentConfig::load(&out.join(ECHO_FILE))?;
    cfg.eval.modes = Mode::ALL.to_vec();
    let activities = cfg.activities();
    let mut records = Vec::new();
    for &mode in &cfg.eval.modes {
        let mdir = out.join(mode.name().to_lowercase());
        let Ok(entries) = fs::read_dir(&mdir) else { continue };
        let mut dirs: Vec<PathBuf> = entries.filter_map(|e| e.ok()).map(|e| e.path()).collect();
        dirs.sort();
        for d in dirs {
            let p = d.join(RESULT_FILE);
            if p.exists() {
                records.push(read_record(&p)?);
            }
        }
    }
    build_report(&cfg, &activities, &records)
}
