use std::collections::BTreeSet;
use std::fs;
use std::path::PathBuf;
use std::sync::mpsc;
use std::thread;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::checkpoint::{load_checkpoint, save_checkpoint, TrainState};
use super::{Adam, Mode, Phase, TrainConfig, TrainError};
use crate::dataset::WindowSet;
use crate::evaluation::ConfusionMatrix;
use crate::loss::{objective_loss, Batch, LossTerms};
use crate::model::{Ctx, Direction, Modality, ModelBundle, ModelError, Net};
use crate::numerics::{Real, Tensor};
use crate::seed;

const EVAL_BATCH: usize = 256;

/// Normalised training and validation windows of one fold.
#[derive(Clone, Copy)]
pub struct TrainData<'a> {
    pub train: &'a WindowSet,
    pub validation: &'a WindowSet,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub checkpoint: Option<PathBuf>,
    /// Write the checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
    /// Continue from `checkpoint` when it exists.
    pub resume: bool,
    /// Stop (after checkpointing) once this many epochs ran in this call.
    pub stop_after_epochs: Option<usize>,
    /// Line-delimited JSON epoch records.
    pub trace_path: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub mode: Mode,
    pub phase: String,
    pub epoch: usize,
    pub global_epoch: usize,
    pub lr: f64,
    pub batches: usize,
    pub loss: LossTerms,
    pub val_macro_f1: Option<f64>,
}

/// What the run touched.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub train_subjects: BTreeSet<String>,
    pub validation_subjects: BTreeSet<String>,
    pub train_windows: u64,
    pub validation_src_encoder_calls: u64,
    pub validation_translator_calls: u64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub completed: bool,
    pub best_val_f1: Option<f64>,
    pub best_epoch: Option<usize>,
    pub trace: Vec<EpochRecord>,
    pub provenance: Provenance,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalPath {
    /// `C(E_dst(x_dst))`, the deployed path.
    Dst,
    /// `C(T_s2d(E_src(x_src)))`, diagnostics only.
    SrcViaTranslator,
}

/// Arg-max class per window.
pub fn evaluate_path<F: Real>(bundle: &ModelBundle<F>, set: &WindowSet, path: EvalPath) -> Result<Vec<usize>, ModelError> {
    let mut out = Vec::with_capacity(set.len());
    let idx: Vec<usize> = (0..set.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let mut ctx = Ctx::eval(&bundle.params);
        let logits = match path {
            EvalPath::Dst => {
                let b: Batch<F> = set.batch(chunk, false);
                let x = ctx.input(b.dst);
                let modality = if bundle.is_paired() { Modality::Dst } else { Modality::Fused };
                let r = bundle.encode(&mut ctx, modality, x)?;
                bundle.classify(&mut ctx, &r)?
            }
            EvalPath::SrcViaTranslator => {
                let b: Batch<F> = set.batch(chunk, true);
                let x = ctx.input(b.src.expect("source requested"));
                let r = bundle.encode(&mut ctx, Modality::Src, x)?;
                let shared = bundle.translate(&mut ctx, Direction::S2d, &r)?;
                bundle.classify(&mut ctx, &shared)?
            }
        };
        out.extend(argmax_rows(ctx.graph.value(logits)));
    }
    Ok(out)
}

fn argmax_rows<F: Real>(t: &Tensor<F>) -> Vec<usize> {
    let k = t.shape()[1];
    t.data()
        .chunks(k)
        .map(|row| (0..k).fold(0, |best, j| if row[j] > row[best] { j } else { best }))
        .collect()
}

fn macro_f1_of(bundle: &ModelBundle<f32>, set: &WindowSet) -> Result<f64, ModelError> {
    let pred = evaluate_path(bundle, set, EvalPath::Dst)?;
    Ok(ConfusionMatrix::from_predictions(bundle.classes(), &set.labels, &pred).macro_f1())
}

fn epoch_batches(n: usize, batch_size: usize, min_len: usize, cfg: &TrainConfig, phase: &str, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::stream(cfg.seed, &format!("shuffle/{phase}/{epoch}")));
    order
        .chunks(batch_size)
        .filter(|c| c.len() >= min_len)
        .map(|c| c.to_vec())
        .collect()
}

#[derive(Default)]
struct TermSum {
    sum: [f64; 7],
    n: usize,
}

impl TermSum {
    fn add(&mut self, t: &LossTerms) {
        for (s, v) in self.sum.iter_mut().zip([t.l_cl, t.l_co, t.total, t.ce_dst, t.ce_src, t.nce_dst, t.nce_src]) {
            *s += v;
        }
        self.n += 1;
    }

    fn mean(&self) -> LossTerms {
        let n = self.n.max(1) as f64;
        let m = self.sum.map(|s| s / n);
        LossTerms { l_cl: m[0], l_co: m[1], total: m[2], ce_dst: m[3], ce_src: m[4], nce_dst: m[5], nce_src: m[6] }
    }
}

fn step(
    bundle: &mut ModelBundle<f32>,
    adam: &mut Adam<f32>,
    phase: &Phase,
    cfg: &TrainConfig,
    batch: &Batch<f32>,
    lr: f64,
    stream: &str,
) -> Result<LossTerms, TrainError> {
    let grads = {
        let mut ctx = Ctx::train(&bundle.params, seed::stream(cfg.seed, stream));
        let (loss, terms) = objective_loss(bundle, &mut ctx, batch, phase.objective, cfg.tau)?;
        if !terms.total.is_finite() {
            return Ok(terms);
        }
        let grads = ctx.param_grads(loss)?;
        (grads, terms)
    };
    let (grads, terms) = grads;
    adam.step(&mut bundle.params, &grads, lr);
    Ok(terms)
}

fn run_epoch(
    bundle: &mut ModelBundle<f32>,
    adam: &mut Adam<f32>,
    phase: &Phase,
    cfg: &TrainConfig,
    data: TrainData<'_>,
    epoch: usize,
    prov: &mut Provenance,
) -> Result<(LossTerms, usize), TrainError> {
    let min_len = if phase.is_contrastive() { 2 } else { 1 };
    let batches = epoch_batches(data.train.len(), cfg.batch_size, min_len, cfg, phase.name, epoch);
    for idx in &batches {
        for &i in idx {
            prov.train_subjects.insert(data.train.tags[i].subject.clone());
        }
        prov.train_windows += idx.len() as u64;
    }
    let lr = cfg.lr_at(epoch);
    let with_src = phase.needs_src();
    let mut sum = TermSum::default();
    let mut apply = |b: usize, batch: Batch<f32>, bundle: &mut ModelBundle<f32>| -> Result<(), TrainError> {
        let terms = step(bundle, adam, phase, cfg, &batch, lr, &format!("dropout/{}/{epoch}/{b}", phase.name))?;
        if !terms.total.is_finite() {
            return Err(TrainError::Diverged { phase: phase.name.into(), epoch });
        }
        sum.add(&terms);
        Ok(())
    };
    if cfg.strict_determinism {
        for (b, idx) in batches.iter().enumerate() {
            apply(b, data.train.batch(idx, with_src), bundle)?;
        }
    } else {
        // batches are assembled ahead on one producer thread, in order
        let (tx, rx) = mpsc::sync_channel::<Batch<f32>>(2);
        let train = data.train;
        thread::scope(|s| -> Result<(), TrainError> {
            let batches = &batches;
            s.spawn(move || {
                for idx in batches {
                    if tx.send(train.batch(idx, with_src)).is_err() {
                        break;
                    }
                }
            });
            for (b, batch) in rx.iter().enumerate() {
                apply(b, batch, bundle)?;
            }
            Ok(())
        })?;
    }
    Ok((sum.mean(), batches.len()))
}

/// Runs every phase of `mode`, selecting the epoch with the best target-path
/// validation macro-F1 (strictly greater wins). On completion the bundle
/// holds the selected parameters.
pub fn train(
    bundle: &mut ModelBundle<f32>,
    mode: Mode,
    cfg: &TrainConfig,
    data: TrainData<'_>,
    opts: &TrainOptions,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate(mode)?;
    if bundle.is_paired() != mode.is_paired() {
        return Err(TrainError::Config {
            key: "mode".into(),
            msg: format!("{mode} does not match the bundle layout"),
        });
    }
    let phases = cfg.phases(mode);
    let mut state = match &opts.checkpoint {
        Some(p) if opts.resume && p.exists() => {
            log::info!("{mode}: resuming from {}", p.display());
            load_checkpoint(p, bundle, mode)?
        }
        _ => TrainState::fresh(mode),
    };
    let offsets: Vec<usize> = phases
        .iter()
        .scan(0, |acc, p| {
            let o = *acc;
            *acc += p.epochs;
            Some(o)
        })
        .collect();
    let mut ran = 0;
    while state.phase < phases.len() {
        let phase = &phases[state.phase];
        let mut adam = state.adam.take().unwrap_or_else(|| {
            let ids = phase.nets.iter().flat_map(|&n| bundle.param_ids(n)).collect();
            Adam::new(&bundle.params, ids, cfg.adam())
        });
        while state.epoch < phase.epochs {
            if opts.stop_after_epochs.is_some_and(|limit| ran >= limit) {
                state.adam = Some(adam);
                return finish(bundle, state, opts, false);
            }
            let epoch = state.epoch;
            let (loss, batches) = run_epoch(bundle, &mut adam, phase, cfg, data, epoch, &mut state.provenance)?;
            let global_epoch = offsets[state.phase] + epoch;
            let val = if phase.select {
                let before = bundle.counters().snapshot();
                let f1 = macro_f1_of(bundle, data.validation)?;
                let after = bundle.counters().snapshot();
                let calls = |n: Net| after.get(&n).copied().unwrap_or(0) - before.get(&n).copied().unwrap_or(0);
                state.provenance.validation_src_encoder_calls += calls(Net::ESrc);
                state.provenance.validation_translator_calls += calls(Net::TS2d) + calls(Net::TD2s);
                for t in &data.validation.tags {
                    state.provenance.validation_subjects.insert(t.subject.clone());
                }
                if state.best_f1.is_none_or(|b| f1 > b) {
                    state.best_f1 = Some(f1);
                    state.best_epoch = Some(global_epoch);
                    state.best_params = Some(bundle.params.clone());
                }
                Some(f1)
            } else {
                None
            };
            log::debug!(
                "{mode} {} epoch {epoch}: loss {:.5} val {:?}",
                phase.name,
                loss.total,
                val
            );
            state.trace.push(EpochRecord {
                mode,
                phase: phase.name.into(),
                epoch,
                global_epoch,
                lr: cfg.lr_at(epoch),
                batches,
                loss,
                val_macro_f1: val,
            });
            state.epoch += 1;
            ran += 1;
            if let Some(p) = &opts.checkpoint {
                if opts.checkpoint_every > 0 && (global_epoch + 1).is_multiple_of(opts.checkpoint_every) {
                    state.adam = Some(adam.clone());
                    save_checkpoint(p, bundle, &state)?;
                    state.adam = None;
                }
            }
        }
        state.phase += 1;
        state.epoch = 0;
    }
    if let Some(best) = &state.best_params {
        bundle.params = best.clone();
    }
    finish(bundle, state, opts, true)
}

fn finish(
    bundle: &ModelBundle<f32>,
    state: TrainState,
    opts: &TrainOptions,
    completed: bool,
) -> Result<TrainOutcome, TrainError> {
    if let Some(p) = &opts.checkpoint {
        save_checkpoint(p, bundle, &state)?;
    }
    if let Some(p) = &opts.trace_path {
        let mut text = String::new();
        for r in &state.trace {
            text.push_str(&serde_json::to_string(r).map_err(|e| TrainError::Checkpoint(e.to_string()))?);
            text.push('\n');
        }
        fs::write(p, text).map_err(|source| TrainError::Io { path: p.display().to_string(), source })?;
    }
    Ok(TrainOutcome {
        completed,
        best_val_f1: state.best_f1,
        best_epoch: state.best_epoch,
        trace: state.trace,
        provenance: state.provenance,
    })
}
