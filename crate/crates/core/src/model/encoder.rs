use serde::{Deserialize, Serialize};

use super::layers::{apply_axis, Axis, Block, Ctx, Linear, Norm};
use super::params::{Init, ParamId, ParamStore};
use super::{LatentRep, Modality, ModelError};
use crate::numerics::{Real, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    StTransformer,
    Conv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderCfg {
    pub kind: EncoderKind,
    /// Embedding width.
    pub d: usize,
    /// Samples per temporal patch. `None` means 0.1 s at the dataset's rate.
    pub patch_len: Option<usize>,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub dropout: f64,
}

impl Default for EncoderCfg {
    fn default() -> Self {
        Self {
            kind: EncoderKind::StTransformer,
            d: 64,
            patch_len: None,
            layers: 4,
            heads: 4,
            mlp_ratio: 2,
            dropout: 0.1,
        }
    }
}

impl EncoderCfg {
    /// Patch length with the 0.1 s default resolved against `sample_rate`.
    pub fn resolved_patch_len(&self, sample_rate: f64) -> usize {
        self.patch_len
            .unwrap_or_else(|| ((0.1 * sample_rate).round() as usize).max(1))
    }

    pub fn validate(&self, n_w: usize, patch_len: usize) -> Result<(), ModelError> {
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(ModelError::Config(format!(
                "embedding dim {} must be a positive multiple of heads {}",
                self.d, self.heads
            )));
        }
        if patch_len == 0 || !n_w.is_multiple_of(patch_len) {
            return Err(ModelError::Config(format!(
                "patch_len {patch_len} must divide the window length {n_w}"
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Strides of the conv stack: a factorisation of `patch_len` into at most
/// `max_stages` factors (kernel size equals stride).
pub fn conv_strides(patch_len: usize, max_stages: usize) -> Vec<usize> {
    let mut factors = Vec::new();
    let mut n = patch_len;
    let mut p = 2;
    while n > 1 {
        while n.is_multiple_of(p) {
            factors.push(p);
            n /= p;
        }
        p += 1;
    }
    if factors.is_empty() {
        factors.push(1);
    }
    let max_stages = max_stages.max(1);
    while factors.len() > max_stages {
        factors.sort_unstable();
        let a = factors.remove(0);
        factors[0] *= a;
    }
    factors.sort_unstable();
    factors
}

#[derive(Clone, Debug)]
enum Body {
    St { patch: Linear, blocks: Vec<Block> },
    Conv { stages: Vec<(usize, Linear)> },
}

/// Maps a `[B, c, n_w]` window batch to a `[B, c, n_w / patch_len, d]`
/// token grid.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub(crate) modality: Modality,
    channels: usize,
    n_w: usize,
    patch_len: usize,
    d: usize,
    spatial: ParamId,
    temporal: ParamId,
    body: Body,
    norm: Norm,
    dropout: f64,
}

impl Encoder {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new<F: Real>(
        store: &mut ParamStore<F>,
        init: &mut Init,
        name: &str,
        modality: Modality,
        cfg: &EncoderCfg,
        channels: usize,
        n_w: usize,
        patch_len: usize,
    ) -> Result<Self, ModelError> {
        cfg.validate(n_w, patch_len)?;
        let d = cfg.d;
        let t = n_w / patch_len;
        let body = match cfg.kind {
            EncoderKind::StTransformer => Body::St {
                patch: Linear::new(store, init, &format!("{name}.patch"), patch_len, d)?,
                blocks: (0..cfg.layers)
                    .map(|i| Block::new(store, init, &format!("{name}.block{i}"), d, cfg.heads, cfg.mlp_ratio, cfg.dropout))
                    .collect::<Result<_, _>>()?,
            },
            EncoderKind::Conv => {
                let mut width = 1;
                let strides = conv_strides(patch_len, cfg.layers);
                let stages = strides
                    .iter()
                    .enumerate()
                    .map(|(i, &s)| {
                        let lin = Linear::new(store, init, &format!("{name}.conv{i}"), s * width, d);
                        width = d;
                        lin.map(|l| (s, l))
                    })
                    .collect::<Result<_, _>>()?;
                Body::Conv { stages }
            }
        };
        Ok(Self {
            modality,
            channels,
            n_w,
            patch_len,
            d,
            spatial: store.add(format!("{name}.spatial_embed"), init.trunc_normal(&[channels, 1, d]))?,
            temporal: store.add(format!("{name}.temporal_embed"), init.trunc_normal(&[t, d]))?,
            body,
            norm: Norm::new(store, init, &format!("{name}.norm"), d)?,
            dropout: cfg.dropout,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn patches(&self) -> usize {
        self.n_w / self.patch_len
    }

    pub fn forward<F: Real>(&self, ctx: &mut Ctx<F>, x: Var) -> Result<LatentRep, ModelError> {
        let s = ctx.graph.shape(x).to_vec();
        if s.len() != 3 || s[1] != self.channels || s[2] != self.n_w {
            return Err(ModelError::Shape(format!(
                "{:?} encoder expects [B, {}, {}], got {s:?}",
                self.modality, self.channels, self.n_w
            )));
        }
        let (b, c, t, d) = (s[0], self.channels, self.patches(), self.d);
        let pos = {
            let sp = ctx.p(self.spatial);
            let tp = ctx.p(self.temporal);
            ctx.graph.add(sp, tp)?
        };
        let z = match &self.body {
            Body::St { patch, blocks } => {
                let p = ctx.graph.reshape(x, &[b, c, t, self.patch_len])?;
                let tokens = patch.forward(ctx, p)?;
                let mut z = ctx.graph.add(tokens, pos)?;
                z = ctx.dropout(z, self.dropout)?;
                for (i, block) in blocks.iter().enumerate() {
                    z = apply_axis(ctx, block, Axis::for_layer(i), z)?;
                }
                z
            }
            Body::Conv { stages } => {
                let mut len = self.n_w;
                let mut width = 1;
                let mut z = x;
                let last = stages.len() - 1;
                for (i, (stride, lin)) in stages.iter().enumerate() {
                    len /= stride;
                    z = ctx.graph.reshape(z, &[b, c, len, stride * width])?;
                    z = lin.forward(ctx, z)?;
                    if i != last {
                        z = ctx.graph.gelu(z);
                    }
                    width = d;
                }
                ctx.graph.add(z, pos)?
            }
        };
        let z = self.norm.forward(ctx, z)?;
        Ok(LatentRep {
            var: z,
            modality: self.modality,
            batch: b,
            tokens: c,
            patches: t,
            dim: d,
        })
    }
}
