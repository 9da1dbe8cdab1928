use serde::{Deserialize, Serialize};

use super::layers::{apply_axis, Attention, Axis, Block, Ctx, Norm};
use super::params::{Init, ParamId, ParamStore};
use super::{LatentRep, Modality, ModelError};
use crate::numerics::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    S2d,
    D2s,
}

impl Direction {
    pub fn from(self) -> Modality {
        match self {
            Direction::S2d => Modality::Src,
            Direction::D2s => Modality::Dst,
        }
    }

    pub fn to(self) -> Modality {
        match self {
            Direction::S2d => Modality::Dst,
            Direction::D2s => Modality::Src,
        }
    }
}

/// Cross-attention decoder: one learned query per (target channel, patch)
/// attends over all input tokens, then a block stack refines the result.
#[derive(Clone, Debug)]
pub struct Translator {
    direction: Direction,
    out_tokens: usize,
    patches: usize,
    d: usize,
    queries: ParamId,
    norm_q: Norm,
    norm_kv: Norm,
    cross: Attention,
    blocks: Vec<Block>,
    norm: Norm,
}

impl Translator {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new<F: Real>(
        store: &mut ParamStore<F>,
        init: &mut Init,
        name: &str,
        direction: Direction,
        out_tokens: usize,
        patches: usize,
        d: usize,
        layers: usize,
        heads: usize,
        mlp_ratio: usize,
        dropout: f64,
    ) -> Result<Self, ModelError> {
        Ok(Self {
            direction,
            out_tokens,
            patches,
            d,
            queries: store.add(format!("{name}.queries"), init.trunc_normal(&[out_tokens, patches, d]))?,
            norm_q: Norm::new(store, init, &format!("{name}.norm_q"), d)?,
            norm_kv: Norm::new(store, init, &format!("{name}.norm_kv"), d)?,
            cross: Attention::new(store, init, &format!("{name}.cross"), d, heads)?,
            blocks: (0..layers)
                .map(|i| Block::new(store, init, &format!("{name}.block{i}"), d, heads, mlp_ratio, dropout))
                .collect::<Result<_, _>>()?,
            norm: Norm::new(store, init, &format!("{name}.norm"), d)?,
        })
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    pub fn forward<F: Real>(&self, ctx: &mut Ctx<F>, r: &LatentRep) -> Result<LatentRep, ModelError> {
        if r.modality != self.direction.from() {
            return Err(ModelError::Contract(format!(
                "{:?} translator got a {:?} representation",
                self.direction, r.modality
            )));
        }
        if r.patches != self.patches || r.dim != self.d {
            return Err(ModelError::Shape(format!(
                "translator expects T={} d={}, got T={} d={}",
                self.patches, self.d, r.patches, r.dim
            )));
        }
        let (b, st, t, d) = (r.batch, self.out_tokens, self.patches, self.d);
        let kv = ctx.graph.reshape(r.var, &[b, r.tokens * t, d])?;
        let kv = self.norm_kv.forward(ctx, kv)?;
        let q = ctx.p(self.queries);
        let q = ctx.graph.reshape(q, &[st * t, d])?;
        let q = ctx.graph.expand(q, b)?;
        let qn = self.norm_q.forward(ctx, q)?;
        let a = self.cross.forward(ctx, qn, kv)?;
        let mut z = ctx.graph.add(q, a)?;
        z = ctx.graph.reshape(z, &[b, st, t, d])?;
        for (i, block) in self.blocks.iter().enumerate() {
            z = apply_axis(ctx, block, Axis::for_layer(i), z)?;
        }
        let z = self.norm.forward(ctx, z)?;
        Ok(LatentRep {
            var: z,
            modality: self.direction.to(),
            batch: b,
            tokens: st,
            patches: t,
            dim: d,
        })
    }
}
