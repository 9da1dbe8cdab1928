use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::{Init, ParamId, ParamStore};
use super::ModelError;
use crate::numerics::{Gradients, Graph, Real, Tensor, Var};

pub(crate) const LN_EPS: f64 = 1e-5;

/// Forward-pass context: owns the graph, binds parameters lazily and carries
/// the dropout stream (absent in evaluation mode).
pub struct Ctx<'a, F: Real> {
    pub graph: Graph<F>,
    store: &'a ParamStore<F>,
    bound: Vec<Option<Var>>,
    dropout_rng: Option<ChaCha8Rng>,
    trainable: bool,
}

impl<'a, F: Real> Ctx<'a, F> {
    /// Training context: parameters are graph leaves that take gradients and
    /// dropout is active.
    pub fn train(store: &'a ParamStore<F>, dropout_rng: ChaCha8Rng) -> Self {
        Self::build(store, Some(dropout_rng), true)
    }

    /// Evaluation context: no dropout, parameters are constants.
    pub fn eval(store: &'a ParamStore<F>) -> Self {
        Self::build(store, None, false)
    }

    /// Deterministic context that still records parameter gradients (used
    /// for gradient checks and audits).
    pub fn grad_no_dropout(store: &'a ParamStore<F>) -> Self {
        Self::build(store, None, true)
    }

    fn build(store: &'a ParamStore<F>, dropout_rng: Option<ChaCha8Rng>, trainable: bool) -> Self {
        Self {
            graph: Graph::new(),
            store,
            bound: vec![None; store.len()],
            dropout_rng,
            trainable,
        }
    }

    pub fn store(&self) -> &ParamStore<F> {
        self.store
    }

    /// Graph node of a parameter; the same node is returned on every call.
    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.graph.leaf(self.store.get(id).clone(), self.trainable);
        self.bound[id.0] = Some(v);
        v
    }

    /// Parameters touched by the forward pass so far.
    pub fn bound_params(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
    }

    pub fn input(&mut self, t: Tensor<F>) -> Var {
        self.graph.constant(t)
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var, ModelError> {
        let Some(rng) = self.dropout_rng.as_mut() else {
            return Ok(x);
        };
        if p <= 0.0 {
            return Ok(x);
        }
        let keep = F::from_f64(1.0 / (1.0 - p));
        let shape = self.graph.shape(x).to_vec();
        let n = self.graph.value(x).len();
        let mask: Vec<F> = (0..n)
            .map(|_| if rng.gen::<f64>() < p { F::zero() } else { keep })
            .collect();
        let m = self.graph.constant(Tensor::new(shape, mask)?);
        Ok(self.graph.mul(x, m)?)
    }

    /// Backward pass; returns one gradient slot per registered parameter
    /// (`None` for parameters the loss does not depend on).
    pub fn param_grads(&self, loss: Var) -> Result<Vec<Option<Tensor<F>>>, ModelError> {
        let grads: Gradients<F> = self.graph.backward(loss)?;
        Ok(self
            .bound
            .iter()
            .map(|v| {
                v.and_then(|v| {
                    grads.get_raw(v).map(|_| grads.get(&self.graph, v))
                })
            })
            .collect())
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        init: &mut Init,
        name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Result<Self, ModelError> {
        Ok(Self {
            w: store.add(format!("{name}.w"), init.trunc_normal(&[fan_in, fan_out]))?,
            b: Some(store.add(format!("{name}.b"), init.zeros(&[fan_out]))?),
        })
    }

    pub fn without_bias<F: Real>(
        store: &mut ParamStore<F>,
        init: &mut Init,
        name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Result<Self, ModelError> {
        Ok(Self {
            w: store.add(format!("{name}.w"), init.trunc_normal(&[fan_in, fan_out]))?,
            b: None,
        })
    }

    pub fn forward<F: Real>(&self, ctx: &mut Ctx<F>, x: Var) -> Result<Var, ModelError> {
        let w = ctx.p(self.w);
        match self.b {
            Some(b) => {
                let b = ctx.p(b);
                Ok(ctx.graph.linear(x, w, b)?)
            }
            None => Ok(ctx.graph.matmul(x, w)?),
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn new<F: Real>(store: &mut ParamStore<F>, init: &mut Init, name: &str, d: usize) -> Result<Self, ModelError> {
        Ok(Self {
            gain: store.add(format!("{name}.gain"), init.ones(&[d]))?,
            bias: store.add(format!("{name}.bias"), init.zeros(&[d]))?,
        })
    }

    pub fn forward<F: Real>(&self, ctx: &mut Ctx<F>, x: Var) -> Result<Var, ModelError> {
        let g = ctx.p(self.gain);
        let b = ctx.p(self.bias);
        Ok(ctx.graph.layer_norm(x, g, b, LN_EPS)?)
    }
}

/// Multi-head attention with separate query and key/value inputs. The key
/// projection has no bias: softmax is invariant to it.
#[derive(Clone, Debug)]
pub(crate) struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
    d: usize,
}

impl Attention {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        init: &mut Init,
        name: &str,
        d: usize,
        heads: usize,
    ) -> Result<Self, ModelError> {
        Ok(Self {
            q: Linear::new(store, init, &format!("{name}.q"), d, d)?,
            k: Linear::without_bias(store, init, &format!("{name}.k"), d, d)?,
            v: Linear::new(store, init, &format!("{name}.v"), d, d)?,
            o: Linear::new(store, init, &format!("{name}.o"), d, d)?,
            heads,
            d,
        })
    }

    /// `q_in[N, Lq, d]` attends over `kv_in[N, Lk, d]`.
    pub fn forward<F: Real>(&self, ctx: &mut Ctx<F>, q_in: Var, kv_in: Var) -> Result<Var, ModelError> {
        let qs = ctx.graph.shape(q_in).to_vec();
        let ks = ctx.graph.shape(kv_in).to_vec();
        let (n, lq, lk) = (qs[0], qs[1], ks[1]);
        let (h, dh) = (self.heads, self.d / self.heads);
        let q = self.q.forward(ctx, q_in)?;
        let k = self.k.forward(ctx, kv_in)?;
        let v = self.v.forward(ctx, kv_in)?;
        let q = split_heads(ctx, q, n, lq, h, dh)?;
        let k = split_heads(ctx, k, n, lk, h, dh)?;
        let v = split_heads(ctx, v, n, lk, h, dh)?;
        let scores = ctx.graph.batch_matmul_nt(q, k)?;
        let scores = ctx.graph.scale(scores, F::from_f64(1.0 / (dh as f64).sqrt()));
        let att = ctx.graph.softmax(scores, 2)?;
        let mixed = ctx.graph.batch_matmul(att, v)?;
        let merged = if h == 1 {
            ctx.graph.reshape(mixed, &[n, lq, self.d])?
        } else {
            let m = ctx.graph.reshape(mixed, &[n, h, lq, dh])?;
            let m = ctx.graph.permute(m, &[0, 2, 1, 3])?;
            ctx.graph.reshape(m, &[n, lq, self.d])?
        };
        self.o.forward(ctx, merged)
    }
}

fn split_heads<F: Real>(ctx: &mut Ctx<F>, x: Var, n: usize, l: usize, h: usize, dh: usize) -> Result<Var, ModelError> {
    if h == 1 {
        return Ok(x);
    }
    let x = ctx.graph.reshape(x, &[n, l, h, dh])?;
    let x = ctx.graph.permute(x, &[0, 2, 1, 3])?;
    Ok(ctx.graph.reshape(x, &[n * h, l, dh])?)
}

/// Pre-norm transformer block: `x + attn(norm(x))`, then `x + mlp(norm(x))`.
#[derive(Clone, Debug)]
pub(crate) struct Block {
    norm1: Norm,
    attn: Attention,
    norm2: Norm,
    fc1: Linear,
    fc2: Linear,
    dropout: f64,
}

impl Block {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        init: &mut Init,
        name: &str,
        d: usize,
        heads: usize,
        mlp_ratio: usize,
        dropout: f64,
    ) -> Result<Self, ModelError> {
        let hidden = d * mlp_ratio.max(1);
        Ok(Self {
            norm1: Norm::new(store, init, &format!("{name}.norm1"), d)?,
            attn: Attention::new(store, init, &format!("{name}.attn"), d, heads)?,
            norm2: Norm::new(store, init, &format!("{name}.norm2"), d)?,
            fc1: Linear::new(store, init, &format!("{name}.fc1"), d, hidden)?,
            fc2: Linear::new(store, init, &format!("{name}.fc2"), hidden, d)?,
            dropout,
        })
    }

    /// `x[N, L, d]`.
    pub fn forward<F: Real>(&self, ctx: &mut Ctx<F>, x: Var) -> Result<Var, ModelError> {
        let y = self.norm1.forward(ctx, x)?;
        let a = self.attn.forward(ctx, y, y)?;
        let a = ctx.dropout(a, self.dropout)?;
        let x = ctx.graph.add(x, a)?;
        let y = self.norm2.forward(ctx, x)?;
        let m = self.fc1.forward(ctx, y)?;
        let m = ctx.graph.gelu(m);
        let m = self.fc2.forward(ctx, m)?;
        let m = ctx.dropout(m, self.dropout)?;
        Ok(ctx.graph.add(x, m)?)
    }
}

/// Which axis of an `[B, S, T, d]` token grid a block attends over.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Axis {
    Spatial,
    Temporal,
}

impl Axis {
    /// Blocks alternate spatial, temporal, spatial, ...
    pub fn for_layer(i: usize) -> Self {
        if i.is_multiple_of(2) {
            Axis::Spatial
        } else {
            Axis::Temporal
        }
    }
}

/// Applies `block` over one axis of `x[B, S, T, d]`.
pub(crate) fn apply_axis<F: Real>(
    ctx: &mut Ctx<F>,
    block: &Block,
    axis: Axis,
    x: Var,
) -> Result<Var, ModelError> {
    let s = ctx.graph.shape(x).to_vec();
    let (b, sp, t, d) = (s[0], s[1], s[2], s[3]);
    match axis {
        Axis::Spatial => {
            let y = ctx.graph.permute(x, &[0, 2, 1, 3])?;
            let y = ctx.graph.reshape(y, &[b * t, sp, d])?;
            let y = block.forward(ctx, y)?;
            let y = ctx.graph.reshape(y, &[b, t, sp, d])?;
            Ok(ctx.graph.permute(y, &[0, 2, 1, 3])?)
        }
        Axis::Temporal => {
            let y = ctx.graph.reshape(x, &[b * sp, t, d])?;
            let y = block.forward(ctx, y)?;
            Ok(ctx.graph.reshape(y, &[b, sp, t, d])?)
        }
    }
}
