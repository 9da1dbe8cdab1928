use std::path::Path;

use serde::{Deserialize, Serialize};

use super::run::{EpochRecord, Provenance};
use super::{Adam, AdamCfg, Mode, TrainError};
use crate::archive::Archive;
use crate::model::{ModelBundle, ParamStore};
use crate::numerics::Tensor;

/// Resumable position of a run. Shuffling and dropout draws derive from
/// `(seed, phase, epoch, batch)`, so the position is the whole rng state.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub mode: Mode,
    pub phase: usize,
    /// Next epoch to run within `phase`.
    pub epoch: usize,
    pub adam: Option<Adam<f32>>,
    pub best_f1: Option<f64>,
    pub best_epoch: Option<usize>,
    pub best_params: Option<ParamStore<f32>>,
    pub trace: Vec<EpochRecord>,
    pub provenance: Provenance,
}

impl TrainState {
    pub fn fresh(mode: Mode) -> Self {
        Self {
            mode,
            phase: 0,
            epoch: 0,
            adam: None,
            best_f1: None,
            best_epoch: None,
            best_params: None,
            trace: Vec::new(),
            provenance: Provenance::default(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct AdamMeta {
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    decoupled: bool,
    trainable: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    kind: String,
    mode: Mode,
    phase: usize,
    epoch: usize,
    adam: Option<AdamMeta>,
    best_f1: Option<f64>,
    best_epoch: Option<usize>,
    has_best: bool,
    trace: Vec<EpochRecord>,
    provenance: Provenance,
}

const KIND: &str = "checkpoint";

fn push_store(a: &mut Archive, prefix: &str, store: &ParamStore<f32>) {
    for (_, name, t) in store.iter() {
        a.push(format!("{prefix}/{name}"), t.shape().to_vec(), t.data().to_vec());
    }
}

/// Parameters, optimizer moments, best-so-far parameters and the trace,
/// written atomically.
pub fn save_checkpoint(path: &Path, bundle: &ModelBundle<f32>, state: &TrainState) -> Result<(), TrainError> {
    let adam = state.adam.as_ref().map(|o| AdamMeta {
        t: o.t,
        beta1: o.cfg.beta1,
        beta2: o.cfg.beta2,
        eps: o.cfg.eps,
        weight_decay: o.cfg.weight_decay,
        decoupled: o.cfg.decoupled,
        trainable: o.trainable().iter().map(|&id| bundle.params.name(id).to_string()).collect(),
    });
    let meta = Meta {
        kind: KIND.into(),
        mode: state.mode,
        phase: state.phase,
        epoch: state.epoch,
        adam,
        best_f1: state.best_f1,
        best_epoch: state.best_epoch,
        has_best: state.best_params.is_some(),
        trace: state.trace.clone(),
        provenance: state.provenance.clone(),
    };
    let mut a = Archive::new(serde_json::to_value(meta).map_err(|e| TrainError::Checkpoint(e.to_string()))?);
    push_store(&mut a, "param", &bundle.params);
    if let Some(best) = &state.best_params {
        push_store(&mut a, "best", best);
    }
    if let Some(o) = &state.adam {
        for (i, &id) in o.trainable().iter().enumerate() {
            let name = bundle.params.name(id);
            let (m, v) = o.moments(i);
            a.push(format!("adam_m/{name}"), m.shape().to_vec(), m.data().to_vec());
            a.push(format!("adam_v/{name}"), v.shape().to_vec(), v.data().to_vec());
        }
    }
    a.save(path)?;
    Ok(())
}

fn read_tensor(a: &Archive, name: &str, like: &Tensor<f32>) -> Result<Tensor<f32>, TrainError> {
    let s = a.get(name).ok_or_else(|| TrainError::Checkpoint(format!("missing tensor {name}")))?;
    if s.shape != like.shape() {
        return Err(TrainError::Checkpoint(format!("{name}: shape {:?}, model has {:?}", s.shape, like.shape())));
    }
    Tensor::new(s.shape.clone(), s.data.clone()).map_err(|e| TrainError::Checkpoint(e.to_string()))
}

fn read_store(a: &Archive, prefix: &str, like: &ParamStore<f32>) -> Result<ParamStore<f32>, TrainError> {
    let mut out = like.clone();
    for id in like.ids().collect::<Vec<_>>() {
        let t = read_tensor(a, &format!("{prefix}/{}", like.name(id)), like.get(id))?;
        out.set(id, t)?;
    }
    Ok(out)
}

/// Restores `bundle` parameters and returns the saved position. The bundle
/// must have the architecture the checkpoint was written from.
pub fn load_checkpoint(path: &Path, bundle: &mut ModelBundle<f32>, mode: Mode) -> Result<TrainState, TrainError> {
    let a = Archive::load(path)?;
    let meta: Meta = serde_json::from_value(a.meta.clone()).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
    if meta.kind != KIND {
        return Err(TrainError::Checkpoint(format!("{} is not a training checkpoint", path.display())));
    }
    if meta.mode != mode {
        return Err(TrainError::Checkpoint(format!("checkpoint is for {}, not {mode}", meta.mode)));
    }
    bundle.params = read_store(&a, "param", &bundle.params)?;
    let best_params = if meta.has_best { Some(read_store(&a, "best", &bundle.params)?) } else { None };
    let adam = match meta.adam {
        Some(m) => {
            let ids = m
                .trainable
                .iter()
                .map(|n| bundle.params.id(n).ok_or_else(|| TrainError::Checkpoint(format!("unknown parameter {n}"))))
                .collect::<Result<Vec<_>, _>>()?;
            let cfg = AdamCfg {
                beta1: m.beta1,
                beta2: m.beta2,
                eps: m.eps,
                weight_decay: m.weight_decay,
                decoupled: m.decoupled,
            };
            let mut o = Adam::new(&bundle.params, ids.clone(), cfg);
            o.t = m.t;
            for (i, id) in ids.into_iter().enumerate() {
                let name = bundle.params.name(id).to_string();
                let like = bundle.params.get(id);
                let mm = read_tensor(&a, &format!("adam_m/{name}"), like)?;
                let vv = read_tensor(&a, &format!("adam_v/{name}"), like)?;
                o.set_moments(i, mm, vv);
            }
            Some(o)
        }
        None => None,
    };
    Ok(TrainState {
        mode,
        phase: meta.phase,
        epoch: meta.epoch,
        adam,
        best_f1: meta.best_f1,
        best_epoch: meta.best_epoch,
        best_params,
        trace: meta.trace,
        provenance: meta.provenance,
    })
}
