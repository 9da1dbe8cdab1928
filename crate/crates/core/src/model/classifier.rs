use serde::{Deserialize, Serialize};

use super::layers::{Ctx, Linear};
use super::params::{Init, ParamStore};
use super::{LatentRep, Modality, ModelError};
use crate::numerics::{Real, Var};

/// Reduction applied to the token grid before the classification head.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierPool {
    /// Mean over tokens and time: the head sees `d` features.
    #[default]
    MeanTokens,
    /// Mean over time, flattened: the head sees `tokens * d` features (the
    /// space the contrastive loss aligns).
    Time,
}

/// Pooling followed by a two-layer MLP head.
#[derive(Clone, Debug)]
pub struct Classifier {
    pool: ClassifierPool,
    tokens: usize,
    d: usize,
    classes: usize,
    fc1: Linear,
    fc2: Linear,
}

impl Classifier {
    pub(crate) fn new<F: Real>(
        store: &mut ParamStore<F>,
        init: &mut Init,
        name: &str,
        pool: ClassifierPool,
        tokens: usize,
        d: usize,
        classes: usize,
    ) -> Result<Self, ModelError> {
        if classes < 2 {
            return Err(ModelError::Config(format!("need at least 2 classes, got {classes}")));
        }
        let width = match pool {
            ClassifierPool::MeanTokens => d,
            ClassifierPool::Time => tokens * d,
        };
        Ok(Self {
            pool,
            tokens,
            d,
            classes,
            fc1: Linear::new(store, init, &format!("{name}.fc1"), width, d)?,
            fc2: Linear::new(store, init, &format!("{name}.fc2"), d, classes)?,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn pool(&self) -> ClassifierPool {
        self.pool
    }

    pub(crate) fn head_bias(&self) -> super::ParamId {
        self.fc2.b.expect("head has a bias")
    }

    /// Logits `[batch, classes]`.
    pub fn forward<F: Real>(&self, ctx: &mut Ctx<F>, r: &LatentRep) -> Result<Var, ModelError> {
        if r.modality == Modality::Src {
            return Err(ModelError::Contract(
                "classifier accepts target-shaped representations only".into(),
            ));
        }
        if r.tokens != self.tokens || r.dim != self.d {
            return Err(ModelError::Shape(format!(
                "classifier expects S={} d={}, got S={} d={}",
                self.tokens, self.d, r.tokens, r.dim
            )));
        }
        let m = ctx.graph.mean_axis(r.var, 2)?;
        let pooled = match self.pool {
            ClassifierPool::MeanTokens => ctx.graph.mean_axis(m, 1)?,
            ClassifierPool::Time => ctx.graph.reshape(m, &[r.batch, r.tokens * r.dim])?,
        };
        let h = self.fc1.forward(ctx, pooled)?;
        let h = ctx.graph.gelu(h);
        self.fc2.forward(ctx, h)
    }
}
