//! Confusion matrices, macro-F1/accuracy, cross-fold summaries and the
//! per-class improvement table.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("report mismatch: {0}")]
    Mismatch(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{0}")]
    Encode(String),
}

/// Counts indexed `[truth][prediction]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self { classes, counts: vec![0; classes * classes] }
    }

    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Self {
        assert_eq!(counts.len(), classes * classes, "confusion counts must be classes²");
        Self { classes, counts }
    }

    pub fn from_predictions(classes: usize, truth: &[usize], pred: &[usize]) -> Self {
        let mut cm = Self::new(classes);
        for (&t, &p) in truth.iter().zip(pred) {
            cm.add(t, p);
        }
        cm
    }

    pub fn add(&mut self, truth: usize, pred: usize) {
        self.counts[truth * self.classes + pred] += 1;
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// F1 per class; a class with no true positives (including one with no
    /// support and no predictions) scores 0.
    pub fn per_class_f1(&self) -> Vec<f64> {
        (0..self.classes)
            .map(|k| {
                let tp = self.get(k, k) as f64;
                let support: u64 = (0..self.classes).map(|p| self.get(k, p)).sum();
                let predicted: u64 = (0..self.classes).map(|t| self.get(t, k)).sum();
                let denom = (support + predicted) as f64;
                if tp == 0.0 || denom == 0.0 {
                    0.0
                } else {
                    2.0 * tp / denom
                }
            })
            .collect()
    }

    pub fn macro_f1(&self) -> f64 {
        let f = self.per_class_f1();
        f.iter().sum::<f64>() / f.len().max(1) as f64
    }

    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        (0..self.classes).map(|k| self.get(k, k)).sum::<u64>() as f64 / total as f64
    }
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, v.sqrt())
}

/// Test-subject result of one fold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: String,
    pub macro_f1: f64,
    pub accuracy: f64,
    pub per_class_f1: Vec<f64>,
    pub confusion: ConfusionMatrix,
}

impl FoldResult {
    pub fn new(fold: impl Into<String>, confusion: ConfusionMatrix) -> Self {
        Self {
            fold: fold.into(),
            macro_f1: confusion.macro_f1(),
            accuracy: confusion.accuracy(),
            per_class_f1: confusion.per_class_f1(),
            confusion,
        }
    }
}

/// All folds of one training mode for one (teacher, target) pairing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: String,
    pub teacher: String,
    pub target: String,
    pub classes: Vec<String>,
    pub folds: Vec<FoldResult>,
    pub mean_f1: f64,
    pub std_f1: f64,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
}

impl EvalReport {
    pub fn new(
        mode: impl Into<String>,
        teacher: impl Into<String>,
        target: impl Into<String>,
        classes: Vec<String>,
        folds: Vec<FoldResult>,
    ) -> Self {
        let (mean_f1, std_f1) = mean_std(&folds.iter().map(|f| f.macro_f1).collect::<Vec<_>>());
        let (mean_accuracy, std_accuracy) = mean_std(&folds.iter().map(|f| f.accuracy).collect::<Vec<_>>());
        Self {
            mode: mode.into(),
            teacher: teacher.into(),
            target: target.into(),
            classes,
            folds,
            mean_f1,
            std_f1,
            mean_accuracy,
            std_accuracy,
        }
    }

    /// Per-class F1 averaged over folds.
    pub fn per_class_mean(&self) -> Vec<f64> {
        let k = self.classes.len();
        let n = self.folds.len().max(1) as f64;
        (0..k)
            .map(|c| self.folds.iter().map(|f| f.per_class_f1[c]).sum::<f64>() / n)
            .collect()
    }
}

/// One class and its F1 change.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassDelta {
    pub class: String,
    pub delta: f64,
}

/// A row of the improvement table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImprovementRow {
    pub mode: String,
    pub teacher: String,
    pub target: String,
    pub mean_f1: f64,
    pub std_f1: f64,
    pub improvement: f64,
    pub best: ClassDelta,
    pub second: ClassDelta,
    pub worst: ClassDelta,
    pub per_class_delta: Vec<f64>,
}

/// Improvement of every report over the report of `baseline_mode` with the
/// same target, with per-class deltas ranked (ties by class index).
pub fn improvement_table(reports: &[EvalReport], baseline_mode: &str) -> Result<Vec<ImprovementRow>, EvalError> {
    let mut rows = Vec::new();
    for r in reports.iter().filter(|r| r.mode != baseline_mode) {
        let base = reports
            .iter()
            .find(|b| b.mode == baseline_mode && b.target == r.target)
            .ok_or_else(|| EvalError::Mismatch(format!("no {baseline_mode} report for target {}", r.target)))?;
        rows.push(improvement_row(r, base)?);
    }
    Ok(rows)
}

pub fn improvement_row(r: &EvalReport, base: &EvalReport) -> Result<ImprovementRow, EvalError> {
    if r.classes != base.classes {
        return Err(EvalError::Mismatch(format!(
            "class vocabularies differ between {} and {}",
            r.mode, base.mode
        )));
    }
    let folds = |e: &EvalReport| e.folds.iter().map(|f| f.fold.clone()).collect::<Vec<_>>();
    if folds(r) != folds(base) {
        return Err(EvalError::Mismatch(format!("fold sets differ between {} and {}", r.mode, base.mode)));
    }
    if r.classes.len() < 2 {
        return Err(EvalError::Mismatch("need at least two classes".into()));
    }
    let deltas: Vec<f64> = r
        .per_class_mean()
        .iter()
        .zip(base.per_class_mean())
        .map(|(a, b)| a - b)
        .collect();
    let mut order: Vec<usize> = (0..deltas.len()).collect();
    order.sort_by(|&a, &b| deltas[b].total_cmp(&deltas[a]).then(a.cmp(&b)));
    let worst = (0..deltas.len())
        .min_by(|&a, &b| deltas[a].total_cmp(&deltas[b]).then(a.cmp(&b)))
        .expect("non-empty");
    let cd = |i: usize| ClassDelta { class: r.classes[i].clone(), delta: deltas[i] };
    Ok(ImprovementRow {
        mode: r.mode.clone(),
        teacher: r.teacher.clone(),
        target: r.target.clone(),
        mean_f1: r.mean_f1,
        std_f1: r.std_f1,
        improvement: r.mean_f1 - base.mean_f1,
        best: cd(order[0]),
        second: cd(order[1]),
        worst: cd(worst),
        per_class_delta: deltas,
    })
}

/// Everything emitted for one experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub baseline_mode: String,
    pub modes: Vec<EvalReport>,
    pub rows: Vec<ImprovementRow>,
}

impl Report {
    pub fn build(modes: Vec<EvalReport>, baseline_mode: &str) -> Result<Self, EvalError> {
        let rows = improvement_table(&modes, baseline_mode)?;
        Ok(Self { baseline_mode: baseline_mode.to_string(), modes, rows })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
    Markdown,
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Json => "json",
            ReportFormat::Csv => "csv",
            ReportFormat::Markdown => "md",
        }
    }
}

pub fn render_json(report: &Report) -> Result<String, EvalError> {
    serde_json::to_string_pretty(report).map_err(|e| EvalError::Encode(e.to_string()))
}

/// One row per (mode, fold) plus one `mean` and one `std` row per mode.
pub fn render_csv(report: &Report) -> Result<String, EvalError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let enc = |e: csv::Error| EvalError::Encode(e.to_string());
    w.write_record(["mode", "teacher", "target", "fold", "macro_f1", "accuracy"]).map_err(enc)?;
    for m in &report.modes {
        for f in &m.folds {
            w.write_record([&m.mode, &m.teacher, &m.target, &f.fold, &f.macro_f1.to_string(), &f.accuracy.to_string()])
                .map_err(enc)?;
        }
        w.write_record([&m.mode, &m.teacher, &m.target, "mean", &m.mean_f1.to_string(), &m.mean_accuracy.to_string()])
            .map_err(enc)?;
        w.write_record([&m.mode, &m.teacher, &m.target, "std", &m.std_f1.to_string(), &m.std_accuracy.to_string()])
            .map_err(enc)?;
    }
    let bytes = w.into_inner().map_err(|e| EvalError::Encode(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| EvalError::Encode(e.to_string()))
}

fn delta_cell(d: &ClassDelta) -> String {
    format!("{}:{:.2}", d.class, d.delta)
}

/// Improvement rows followed by the baseline rows.
pub fn render_markdown(report: &Report) -> String {
    let mut s = String::new();
    s.push_str("| mode | teacher | target | macro F1 | improvement | best | 2nd best | worst |\n");
    s.push_str("|---|---|---|---|---|---|---|---|\n");
    for r in &report.rows {
        let _ = writeln!(
            s,
            "| {} | {} | {} | {:.2} ± {:.2} | {:.2} | {} | {} | {} |",
            r.mode,
            r.teacher,
            r.target,
            r.mean_f1,
            r.std_f1,
            r.improvement,
            delta_cell(&r.best),
            delta_cell(&r.second),
            delta_cell(&r.worst)
        );
    }
    for b in report.modes.iter().filter(|m| m.mode == report.baseline_mode) {
        let _ = writeln!(
            s,
            "| {} | - | {} | {:.2} ± {:.2} | n/a | - | - | - |",
            b.mode, b.target, b.mean_f1, b.std_f1
        );
    }
    s
}

pub fn render(report: &Report, format: ReportFormat) -> Result<String, EvalError> {
    match format {
        ReportFormat::Json => render_json(report),
        ReportFormat::Csv => render_csv(report),
        ReportFormat::Markdown => Ok(render_markdown(report)),
    }
}

pub fn emit_report(report: &Report, format: ReportFormat, path: &Path) -> Result<(), EvalError> {
    let text = render(report, format)?;
    fs::write(path, text).map_err(|source| EvalError::Io { path: path.display().to_string(), source })
}

pub fn load_json_report(path: &Path) -> Result<Report, EvalError> {
    let text = fs::read_to_string(path).map_err(|source| EvalError::Io { path: path.display().to_string(), source })?;
    serde_json::from_str(&text).map_err(|e| EvalError::Encode(e.to_string()))
}
