//! Training protocols, optimizer schedule, checkpoints and target-only
//! model selection.

mod adam;
mod audit;
mod checkpoint;
mod run;
#[cfg(test)]
mod tests;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::archive::ArchiveError;
use crate::loss::Objective;
use crate::model::{ModelError, Net};

pub use adam::{adam_update, Adam, AdamCfg};
pub use audit::{audit_phase, PhaseAudit};
pub use checkpoint::{load_checkpoint, save_checkpoint, TrainState};
pub use run::{evaluate_path, train, EpochRecord, EvalPath, Provenance, TrainData, TrainOptions, TrainOutcome};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid `{key}`: {msg}")]
    Config { key: String, msg: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Archive(#[from] ArchiveError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("non-finite loss in phase {phase}, epoch {epoch}")]
    Diverged { phase: String, epoch: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Mode {
    Baseline,
    Tsr,
    Ctsr,
    Cfsr,
    Fused,
}

impl Mode {
    pub const ALL: [Mode; 5] = [Mode::Baseline, Mode::Tsr, Mode::Ctsr, Mode::Cfsr, Mode::Fused];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Baseline => "BASELINE",
            Mode::Tsr => "TSR",
            Mode::Ctsr => "CTSR",
            Mode::Cfsr => "CFSR",
            Mode::Fused => "FUSED",
        }
    }

    /// Trains the two-encoder bundle (everything except FUSED).
    pub fn is_paired(self) -> bool {
        self != Mode::Fused
    }

    pub fn uses_contrastive(self) -> bool {
        matches!(self, Mode::Ctsr | Mode::Cfsr)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| format!("unknown mode `{s}` (expected one of BASELINE, TSR, CTSR, CFSR, FUSED)"))
    }
}

/// One optimisation stage of a mode.
#[derive(Clone, Debug, PartialEq)]
pub struct Phase {
    pub name: &'static str,
    pub objective: Objective,
    /// Networks whose parameters the optimizer owns.
    pub nets: Vec<Net>,
    pub epochs: usize,
    /// Validate on the target path and keep the best epoch.
    pub select: bool,
}

impl Phase {
    pub fn needs_src(&self) -> bool {
        !matches!(self.objective, Objective::TargetCe)
    }

    pub fn is_contrastive(&self) -> bool {
        matches!(self.objective, Objective::Contrastive | Objective::Joint { .. })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightDecay {
    Coupled,
    Decoupled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub tau: f64,
    pub lambda: f64,
    pub batch_size: usize,
    pub lr0: f64,
    pub weight_decay: f64,
    pub weight_decay_kind: WeightDecay,
    pub lr_drop_every: usize,
    pub lr_drop_factor: f64,
    pub epochs_cls: usize,
    pub epochs_contrastive: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Assemble batches on the training thread instead of a prefetch thread.
    pub strict_determinism: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            tau: 0.07,
            lambda: 1.0,
            batch_size: 128,
            lr0: 0.001,
            weight_decay: 0.0001,
            weight_decay_kind: WeightDecay::Coupled,
            lr_drop_every: 100,
            lr_drop_factor: 10.0,
            epochs_cls: 500,
            epochs_contrastive: 100,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            strict_determinism: false,
        }
    }
}

impl TrainConfig {
    /// `lr0 * factor^(-floor(epoch / every))`, epochs counted within a phase.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = (epoch / self.lr_drop_every.max(1)) as i32;
        self.lr0 / self.lr_drop_factor.powi(drops)
    }

    pub fn adam(&self) -> AdamCfg {
        AdamCfg {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
            decoupled: self.weight_decay_kind == WeightDecay::Decoupled,
        }
    }

    pub fn validate(&self, mode: Mode) -> Result<(), TrainError> {
        let bad = |key: &str, msg: &str| Err(TrainError::Config { key: format!("train.{key}"), msg: msg.into() });
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad("tau", "must be > 0");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda", "must be >= 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be >= 1");
        }
        if mode.uses_contrastive() && self.batch_size < 2 {
            return bad("batch_size", "contrastive modes need at least 2 windows per batch");
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad("lr0", "must be > 0");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay", "must be >= 0");
        }
        if self.lr_drop_every == 0 {
            return bad("lr_drop_every", "must be >= 1");
        }
        if !(self.lr_drop_factor > 0.0) {
            return bad("lr_drop_factor", "must be > 0");
        }
        if self.epochs_cls == 0 {
            return bad("epochs_cls", "must be >= 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1", "moment decays must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("eps", "must be > 0");
        }
        Ok(())
    }

    /// The mode table: which objective runs in which phase and which
    /// networks it updates.
    pub fn phases(&self, mode: Mode) -> Vec<Phase> {
        let main = |objective, nets: &[Net]| Phase {
            name: "main",
            objective,
            nets: nets.to_vec(),
            epochs: self.epochs_cls,
            select: true,
        };
        let classification_nets = [Net::ESrc, Net::EDst, Net::TS2d, Net::Cls];
        match mode {
            Mode::Baseline | Mode::Fused => vec![main(Objective::TargetCe, &[Net::EDst, Net::Cls])],
            Mode::Tsr => vec![main(Objective::Classification, &classification_nets)],
            Mode::Ctsr => vec![main(Objective::Joint { lambda: self.lambda }, &Net::ALL)],
            Mode::Cfsr => vec![
                Phase {
                    name: "contrastive",
                    objective: Objective::Contrastive,
                    nets: vec![Net::ESrc, Net::EDst, Net::TS2d, Net::TD2s],
                    epochs: self.epochs_contrastive,
                    select: false,
                },
                Phase {
                    name: "classification",
                    objective: Objective::Classification,
                    nets: classification_nets.to_vec(),
                    epochs: self.epochs_cls,
                    select: true,
                },
            ],
        }
    }
}
