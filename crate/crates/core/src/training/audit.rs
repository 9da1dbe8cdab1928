use std::collections::BTreeSet;

use serde::Serialize;

use super::{Adam, Mode, TrainConfig, TrainError};
use crate::loss::{objective_loss, Batch, LossTerms};
use crate::model::{Ctx, ModelBundle, Net};
use crate::seed;

/// Outcome of one optimizer step of one phase, compared against the mode
/// table.
#[derive(Clone, Debug, Serialize)]
pub struct PhaseAudit {
    pub mode: Mode,
    pub phase: String,
    pub expected: BTreeSet<Net>,
    pub updated: BTreeSet<Net>,
    /// Parameters of expected networks that did not move.
    pub frozen_expected: Vec<String>,
    /// Parameters outside the expected networks that moved.
    pub moved_unexpected: Vec<String>,
    pub terms: LossTerms,
}

impl PhaseAudit {
    pub fn passed(&self) -> bool {
        self.expected == self.updated && self.frozen_expected.is_empty() && self.moved_unexpected.is_empty()
    }
}

/// Takes one step of phase `phase_index` of `mode` on a copy of `bundle`
/// and records which parameters changed.
pub fn audit_phase(
    bundle: &ModelBundle<f32>,
    mode: Mode,
    phase_index: usize,
    cfg: &TrainConfig,
    batch: &Batch<f32>,
) -> Result<PhaseAudit, TrainError> {
    let phases = cfg.phases(mode);
    let phase = phases
        .get(phase_index)
        .ok_or_else(|| TrainError::Config { key: "phase".into(), msg: format!("{mode} has {} phase(s)", phases.len()) })?;
    let mut work = bundle.clone();
    let ids = phase.nets.iter().flat_map(|&n| work.param_ids(n)).collect();
    let mut adam = Adam::new(&work.params, ids, cfg.adam());
    let (grads, terms) = {
        let mut ctx = Ctx::train(&work.params, seed::stream(cfg.seed, "audit"));
        let (loss, terms) = objective_loss(&work, &mut ctx, batch, phase.objective, cfg.tau)?;
        (ctx.param_grads(loss)?, terms)
    };
    adam.step(&mut work.params, &grads, cfg.lr_at(0));

    let expected: BTreeSet<Net> = phase.nets.iter().copied().filter(|n| !bundle.param_ids(*n).is_empty()).collect();
    let mut updated = BTreeSet::new();
    let (mut frozen_expected, mut moved_unexpected) = (Vec::new(), Vec::new());
    for id in bundle.params.ids() {
        let net = bundle.net_of(id);
        let moved = bundle.params.get(id).data() != work.params.get(id).data();
        if moved {
            updated.insert(net);
        }
        let name = bundle.params.name(id).to_string();
        match (expected.contains(&net), moved) {
            (true, false) => frozen_expected.push(name),
            (false, true) => moved_unexpected.push(name),
            _ => {}
        }
    }
    Ok(PhaseAudit {
        mode,
        phase: phase.name.into(),
        expected,
        updated,
        frozen_expected,
        moved_unexpected,
        terms,
    })
}
