//! The five networks: per-modality encoders, two translators and the single
//! classifier, all exchanging batched [`LatentRep`] token grids.

mod bundle;
mod check;
mod classifier;
mod encoder;
pub(crate) mod layers;
mod params;
mod translator;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{NumericsError, Real, Var};

pub use bundle::{ModelBundle, ModelCfg, Net, NetCounters, StreamShape};
pub use check::param_grad_check;
pub use classifier::{Classifier, ClassifierPool};
pub use encoder::{conv_strides, Encoder, EncoderCfg, EncoderKind};
pub use layers::Ctx;
pub use params::{ParamId, ParamStore};
pub use translator::{Direction, Translator};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Which sensor stream a representation belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Src,
    Dst,
    /// All sensors concatenated channel-wise (single-encoder reference).
    Fused,
}

/// A batch of spatio-temporal token grids `[batch, tokens, patches, dim]`
/// living in a graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LatentRep {
    pub var: Var,
    pub modality: Modality,
    pub batch: usize,
    pub tokens: usize,
    pub patches: usize,
    pub dim: usize,
}

impl LatentRep {
    pub fn shape(&self) -> [usize; 4] {
        [self.batch, self.tokens, self.patches, self.dim]
    }
}

/// How a representation is reduced before similarity is computed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    /// Mean over time, then flatten tokens × dim.
    #[default]
    Time,
    /// Mean over tokens and time.
    TimeAndTokens,
}

/// Mean over the temporal axis, flattened to `[batch, tokens * dim]`
/// (or `[batch, dim]` for [`PoolKind::TimeAndTokens`]).
pub fn time_pool<F: Real>(ctx: &mut Ctx<F>, r: &LatentRep, kind: PoolKind) -> Result<Var, ModelError> {
    let m = ctx.graph.mean_axis(r.var, 2)?;
    Ok(match kind {
        PoolKind::Time => ctx.graph.reshape(m, &[r.batch, r.tokens * r.dim])?,
        PoolKind::TimeAndTokens => ctx.graph.mean_axis(m, 1)?,
    })
}

#[cfg(test)]
mod tests;
