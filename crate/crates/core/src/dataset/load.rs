use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DatasetError, ModalitySpec, Recording, Result, Stream};

/// How to interpret a recording CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoadOptions {
    pub modalities: Vec<ModalitySpec>,
    /// Activity vocabulary; a label's index here is its class id.
    pub activities: Vec<String>,
    /// Activity values whose rows are dropped (empty fields always are).
    #[serde(default)]
    pub ignore_activities: Vec<String>,
    /// Sampling rate in Hz; inferred from the median timestamp step if absent.
    #[serde(default)]
    pub sample_rate: Option<f64>,
    /// Longest run of missing samples that is interpolated, in seconds.
    #[serde(default = "default_max_gap")]
    pub max_gap_seconds: f64,
}

fn default_max_gap() -> f64 {
    1.0
}

struct Row {
    line: usize,
    t: f64,
    label: usize,
    values: Vec<f64>,
    /// A dropped row or a time gap precedes this one.
    brk: bool,
}

/// Loads `path`: header `timestamp,subject,activity,<modality>.<channel>...`,
/// one row per sample. Short missing runs are interpolated; longer ones and
/// dropped rows split a subject into separate recordings.
pub fn load_recordings(path: &Path, opts: &LoadOptions) -> Result<Vec<Recording>> {
    let file = path.display().to_string();
    let err = |line: usize, msg: String| DatasetError::Load { file: file.clone(), line, msg };
    for m in &opts.modalities {
        m.validate()?;
    }
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| err(0, e.to_string()))?;
    let header = rdr.headers().map_err(|e| err(1, e.to_string()))?.clone();
    if header.len() < 3 || &header[0] != "timestamp" || &header[1] != "subject" || &header[2] != "activity" {
        return Err(err(1, "header must start with timestamp,subject,activity".into()));
    }
    let declared: Vec<String> = opts
        .modalities
        .iter()
        .flat_map(|m| m.channel_names.iter().map(move |c| format!("{}.{c}", m.name)))
        .collect();
    let mut column_of = vec![usize::MAX; declared.len()];
    for (col, name) in header.iter().enumerate().skip(3) {
        let slot = declared
            .iter()
            .position(|d| d == name)
            .ok_or_else(|| err(1, format!("unknown column {name}")))?;
        column_of[slot] = col;
    }
    if let Some(i) = column_of.iter().position(|&c| c == usize::MAX) {
        return Err(err(1, format!("missing column {}", declared[i])));
    }

    let mut subjects: BTreeMap<String, Vec<Row>> = BTreeMap::new();
    let mut pending_break: BTreeMap<String, bool> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| err(e.position().map_or(0, |p| p.line() as usize), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let t: f64 = rec[0]
            .parse()
            .map_err(|_| err(line, format!("bad timestamp {:?}", &rec[0])))?;
        let subject = rec[1].to_string();
        let act = &rec[2];
        let rows = subjects.entry(subject.clone()).or_default();
        if let Some(prev) = rows.last() {
            if t <= prev.t {
                return Err(err(line, format!("non-monotonic timestamp {t} for subject {subject}")));
            }
        }
        if act.is_empty() || act.eq_ignore_ascii_case("null") || opts.ignore_activities.iter().any(|a| a == act) {
            pending_break.insert(subject, true);
            continue;
        }
        let label = opts
            .activities
            .iter()
            .position(|a| a == act)
            .ok_or_else(|| err(line, format!("unknown activity {act:?}")))?;
        let values = column_of
            .iter()
            .map(|&c| {
                let f = &rec[c];
                if f.is_empty() || f.eq_ignore_ascii_case("nan") {
                    Ok(f64::NAN)
                } else {
                    f.parse::<f64>().map_err(|_| err(line, format!("bad value {f:?} in {}", &header[c])))
                }
            })
            .collect::<Result<Vec<f64>>>()?;
        let brk = pending_break.remove(&subject).unwrap_or(false);
        rows.push(Row { line, t, label, values, brk });
    }

    let rate = match opts.sample_rate {
        Some(r) => r,
        None => infer_rate(&subjects).ok_or_else(|| err(0, "cannot infer the sampling rate".into()))?,
    };
    let max_gap = (opts.max_gap_seconds * rate).round() as usize;
    let mut out = Vec::new();
    for (subject, mut rows) in subjects {
        for i in 1..rows.len() {
            if rows[i].t - rows[i - 1].t > 1.5 / rate {
                rows[i].brk = true;
            }
        }
        let mut segment = 0;
        for run in split_runs(&rows) {
            for part in repair(run, declared.len(), max_gap) {
                out.push(to_recording(&subject, segment, rate, &part, opts));
                segment += 1;
            }
        }
        log::debug!("{file}: subject {subject} -> {segment} segment(s), first line {}", rows.first().map_or(0, |r| r.line));
    }
    Ok(out)
}

/// Writes `recordings` in the layout [`load_recordings`] reads. Successive
/// segments of a subject are separated by a one-second time gap.
pub fn write_recordings(path: &Path, recordings: &[Recording], activities: &[String]) -> Result<()> {
    let file = path.display().to_string();
    let err = |msg: String| DatasetError::Load { file: file.clone(), line: 0, msg };
    let first = recordings.first().ok_or_else(|| err("no recordings".into()))?;
    let layout: Vec<(String, usize)> = first.streams.iter().map(|s| (s.modality.clone(), s.channels)).collect();
    let mut wtr = csv::Writer::from_path(path).map_err(|e| err(e.to_string()))?;
    let mut header = vec!["timestamp".to_string(), "subject".into(), "activity".into()];
    for (m, c) in &layout {
        header.extend((0..*c).map(|i| format!("{m}.c{i}")));
    }
    wtr.write_record(&header).map_err(|e| err(e.to_string()))?;
    let mut clock: BTreeMap<&str, f64> = BTreeMap::new();
    for rec in recordings {
        let same = rec.streams.len() == layout.len()
            && rec.streams.iter().zip(&layout).all(|(s, (m, c))| &s.modality == m && s.channels == *c);
        if !same {
            return Err(err(format!("subject {} has a different stream layout", rec.subject_id)));
        }
        let dt = 1.0 / rec.sample_rate;
        let start = clock.get(rec.subject_id.as_str()).map_or(0.0, |t| t + 1.0);
        let mut row = Vec::with_capacity(header.len());
        for i in 0..rec.len() {
            row.clear();
            row.push(format!("{}", start + i as f64 * dt));
            row.push(rec.subject_id.clone());
            let label = activities.get(rec.labels[i]).ok_or_else(|| err(format!("label {} out of range", rec.labels[i])))?;
            row.push(label.clone());
            for s in &rec.streams {
                let n = s.len();
                row.extend((0..s.channels).map(|c| format!("{}", s.values[c * n + i])));
            }
            wtr.write_record(&row).map_err(|e| err(e.to_string()))?;
        }
        clock.insert(&rec.subject_id, start + rec.len().saturating_sub(1) as f64 * dt);
    }
    wtr.flush().map_err(|e| DatasetError::Load { file: file.clone(), line: 0, msg: e.to_string() })?;
    Ok(())
}

fn infer_rate(subjects: &BTreeMap<String, Vec<Row>>) -> Option<f64> {
    let mut steps: Vec<f64> = subjects
        .values()
        .flat_map(|rows| rows.windows(2).map(|w| w[1].t - w[0].t))
        .filter(|d| *d > 0.0)
        .collect();
    if steps.is_empty() {
        return None;
    }
    steps.sort_by(f64::total_cmp);
    Some(1.0 / steps[steps.len() / 2])
}

fn split_runs(rows: &[Row]) -> Vec<&[Row]> {
    let mut runs = Vec::new();
    let mut start = 0;
    for i in 1..=rows.len() {
        if i == rows.len() || rows[i].brk {
            if i > start {
                runs.push(&rows[start..i]);
            }
            start = i;
        }
    }
    runs
}

/// Interpolates interior missing runs of at most `max_gap` samples; any
/// other missing sample splits the run.
fn repair(run: &[Row], channels: usize, max_gap: usize) -> Vec<Vec<(usize, Vec<f64>)>> {
    let n = run.len();
    let mut cols: Vec<Vec<f64>> = (0..channels).map(|c| run.iter().map(|r| r.values[c]).collect()).collect();
    let mut valid = vec![true; n];
    for col in &mut cols {
        let mut i = 0;
        while i < n {
            if !col[i].is_nan() {
                i += 1;
                continue;
            }
            let start = i;
            while i < n && col[i].is_nan() {
                i += 1;
            }
            let len = i - start;
            if start > 0 && i < n && len <= max_gap {
                let (a, b) = (col[start - 1], col[i]);
                for k in 0..len {
                    let f = (k + 1) as f64 / (len + 1) as f64;
                    col[start + k] = a + (b - a) * f;
                }
            } else {
                for v in &mut valid[start..i] {
                    *v = false;
                }
            }
        }
    }
    let mut parts = Vec::new();
    let mut cur: Vec<(usize, Vec<f64>)> = Vec::new();
    for i in 0..n {
        if valid[i] {
            cur.push((run[i].label, cols.iter().map(|c| c[i]).collect()));
        } else if !cur.is_empty() {
            parts.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        parts.push(cur);
    }
    parts
}

fn to_recording(subject: &str, segment: usize, rate: f64, part: &[(usize, Vec<f64>)], opts: &LoadOptions) -> Recording {
    let mut offset = 0;
    let streams = opts
        .modalities
        .iter()
        .map(|m| {
            let c = m.channel_count();
            let mut values = Vec::with_capacity(c * part.len());
            for ch in offset..offset + c {
                values.extend(part.iter().map(|(_, v)| v[ch]));
            }
            offset += c;
            Stream { modality: m.name.clone(), channels: c, values }
        })
        .collect();
    Recording {
        subject_id: subject.to_string(),
        segment,
        sample_rate: rate,
        streams,
        labels: part.iter().map(|(l, _)| *l).collect(),
    }
}
