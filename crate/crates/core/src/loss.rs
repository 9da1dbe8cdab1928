//! Classification and translator-mediated contrastive objectives.

use serde::{Deserialize, Serialize};

use crate::model::{Ctx, Direction, LatentRep, Modality, ModelBundle, ModelError};
use crate::numerics::{Real, Tensor, Var};

/// Floor applied to probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;
/// Norm clamp used by cosine similarity.
pub const COS_EPS: f64 = 1e-8;

/// `-ln p[k]` with `p[k]` clamped at [`PROB_FLOOR`].
pub fn cross_entropy(probs: &[f64], k: usize) -> f64 {
    -probs[k].max(PROB_FLOOR).ln()
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(COS_EPS);
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(COS_EPS);
    dot / (na * nb)
}

/// infoNCE for one anchor `x` with translated positive `x_t` against the
/// candidate set `cands`, temperature inside the exponential.
pub fn info_nce(x: &[f64], x_t: &[f64], cands: &[&[f64]], tau: f64) -> Result<f64, ModelError> {
    if cands.len() < 2 {
        return Err(ModelError::Contract(format!(
            "info_nce needs at least 2 candidates, got {}",
            cands.len()
        )));
    }
    if !(tau > 0.0) {
        return Err(ModelError::Contract(format!("temperature must be positive, got {tau}")));
    }
    let logits: Vec<f64> = cands.iter().map(|c| cos(c, x) / tau).collect();
    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + logits.iter().map(|l| (l - mx).exp()).sum::<f64>().ln();
    Ok(lse - cos(x_t, x) / tau)
}

/// A batch of time-aligned window pairs. `src` is absent for single-stream
/// training.
#[derive(Clone, Debug)]
pub struct Batch<F> {
    pub src: Option<Tensor<F>>,
    pub dst: Tensor<F>,
    pub labels: Vec<usize>,
}

impl<F: Real> Batch<F> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn src(&self) -> Result<&Tensor<F>, ModelError> {
        self.src
            .as_ref()
            .ok_or_else(|| ModelError::Contract("objective needs source windows".into()))
    }
}

/// Which loss terms a training step optimises.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Objective {
    /// Cross-entropy on the target path only.
    TargetCe,
    /// Cross-entropy on both the target path and the translated source path.
    Classification,
    /// Contrastive term alone.
    Contrastive,
    /// Classification plus `lambda` times the contrastive term.
    Joint { lambda: f64 },
}

impl Objective {
    fn lambda(self) -> f64 {
        match self {
            Objective::Joint { lambda } => lambda,
            Objective::Contrastive => 1.0,
            _ => 0.0,
        }
    }
}

/// Scalar values of every term of one evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub l_cl: f64,
    pub l_co: f64,
    pub total: f64,
    pub ce_dst: f64,
    pub ce_src: f64,
    pub nce_dst: f64,
    pub nce_src: f64,
}

/// Mean cross-entropy of `logits[N, K]` against `labels`.
pub fn ce_graph<F: Real>(ctx: &mut Ctx<F>, logits: Var, labels: &[usize]) -> Result<Var, ModelError> {
    let p = ctx.graph.softmax(logits, 1)?;
    let p = ctx.graph.pick(p, labels)?;
    let l = ctx.graph.clamp_log(p, F::from_f64(PROB_FLOOR));
    let m = ctx.graph.mean_all(l);
    Ok(ctx.graph.scale(m, -F::one()))
}

/// Mean over anchors `k` of infoNCE(anchors[k], positives[k], candidates)
/// with `anchors`, `positives`, `candidates` all `[N, D]`.
pub fn info_nce_graph<F: Real>(
    ctx: &mut Ctx<F>,
    anchors: Var,
    positives: Var,
    candidates: Var,
    tau: f64,
) -> Result<Var, ModelError> {
    let n = ctx.graph.shape(candidates)[0];
    if n < 2 {
        return Err(ModelError::Contract(format!("info_nce needs at least 2 candidates, got {n}")));
    }
    let inv_tau = F::from_f64(1.0 / tau);
    let a = ctx.graph.l2_normalize(anchors, COS_EPS);
    let p = ctx.graph.l2_normalize(positives, COS_EPS);
    let c = ctx.graph.l2_normalize(candidates, COS_EPS);
    let pos = ctx.graph.mul(a, p)?;
    let pos = ctx.graph.sum_axis(pos, 1)?;
    let ct = ctx.graph.permute(c, &[1, 0])?;
    let sims = ctx.graph.matmul(a, ct)?;
    let logits = ctx.graph.scale(sims, inv_tau);
    let lse = ctx.graph.logsumexp(logits);
    let pos = ctx.graph.scale(pos, inv_tau);
    let per = ctx.graph.sub(lse, pos)?;
    Ok(ctx.graph.mean_all(per))
}

/// Encoded inputs shared between the loss terms of one step.
struct Encoded {
    dst: LatentRep,
    src: Option<LatentRep>,
}

fn encode<F: Real>(
    bundle: &ModelBundle<F>,
    ctx: &mut Ctx<F>,
    batch: &Batch<F>,
    need_src: bool,
) -> Result<Encoded, ModelError> {
    let dst_modality = if bundle.is_paired() { Modality::Dst } else { Modality::Fused };
    let xd = ctx.input(batch.dst.clone());
    let dst = bundle.encode(ctx, dst_modality, xd)?;
    let src = if need_src {
        let xs = ctx.input(batch.src()?.clone());
        Some(bundle.encode(ctx, Modality::Src, xs)?)
    } else {
        None
    };
    Ok(Encoded { dst, src })
}

/// Classification loss: mean CE on the target path, plus (when `both`) mean
/// CE on the translated source path. Returns the sum and the two terms.
pub fn classification_loss<F: Real>(
    bundle: &ModelBundle<F>,
    ctx: &mut Ctx<F>,
    batch: &Batch<F>,
    both: bool,
) -> Result<(Var, LossTerms), ModelError> {
    let enc = encode(bundle, ctx, batch, both)?;
    classification_from(bundle, ctx, batch, &enc)
}

fn classification_from<F: Real>(
    bundle: &ModelBundle<F>,
    ctx: &mut Ctx<F>,
    batch: &Batch<F>,
    enc: &Encoded,
) -> Result<(Var, LossTerms), ModelError> {
    let logits = bundle.classify(ctx, &enc.dst)?;
    let ce_dst = ce_graph(ctx, logits, &batch.labels)?;
    let mut terms = LossTerms { ce_dst: value(ctx, ce_dst), ..Default::default() };
    let total = match &enc.src {
        Some(rs) => {
            let shared = bundle.translate(ctx, Direction::S2d, rs)?;
            let logits = bundle.classify(ctx, &shared)?;
            let ce_src = ce_graph(ctx, logits, &batch.labels)?;
            terms.ce_src = value(ctx, ce_src);
            ctx.graph.add(ce_dst, ce_src)?
        }
        None => ce_dst,
    };
    terms.l_cl = value(ctx, total);
    terms.total = terms.l_cl;
    Ok((total, terms))
}

/// Bidirectional contrastive loss (label-free).
pub fn contrastive_loss<F: Real>(
    bundle: &ModelBundle<F>,
    ctx: &mut Ctx<F>,
    batch: &Batch<F>,
    tau: f64,
) -> Result<(Var, LossTerms), ModelError> {
    let enc = encode(bundle, ctx, batch, true)?;
    contrastive_from(bundle, ctx, &enc, tau)
}

fn contrastive_from<F: Real>(
    bundle: &ModelBundle<F>,
    ctx: &mut Ctx<F>,
    enc: &Encoded,
    tau: f64,
) -> Result<(Var, LossTerms), ModelError> {
    let rs = enc.src.as_ref().expect("contrastive terms need the source encoding");
    let rd = &enc.dst;
    let pd = bundle.pool(ctx, rd)?;
    let ps = bundle.pool(ctx, rs)?;
    let s2d = bundle.translate(ctx, Direction::S2d, rs)?;
    let d2s = bundle.translate(ctx, Direction::D2s, rd)?;
    let ps2d = bundle.pool(ctx, &s2d)?;
    let pd2s = bundle.pool(ctx, &d2s)?;
    let nce_dst = info_nce_graph(ctx, pd, ps2d, pd, tau)?;
    let nce_src = info_nce_graph(ctx, ps, pd2s, ps, tau)?;
    let sum = ctx.graph.add(nce_dst, nce_src)?;
    let l_co = ctx.graph.scale(sum, F::from_f64(0.5));
    let terms = LossTerms {
        nce_dst: value(ctx, nce_dst),
        nce_src: value(ctx, nce_src),
        l_co: value(ctx, l_co),
        total: value(ctx, l_co),
        ..Default::default()
    };
    Ok((l_co, terms))
}

/// Builds the scalar optimised under `objective`, sharing encoder passes
/// between terms.
pub fn objective_loss<F: Real>(
    bundle: &ModelBundle<F>,
    ctx: &mut Ctx<F>,
    batch: &Batch<F>,
    objective: Objective,
    tau: f64,
) -> Result<(Var, LossTerms), ModelError> {
    match objective {
        Objective::TargetCe => classification_loss(bundle, ctx, batch, false),
        Objective::Classification => classification_loss(bundle, ctx, batch, true),
        Objective::Contrastive => contrastive_loss(bundle, ctx, batch, tau),
        Objective::Joint { .. } => {
            let enc = encode(bundle, ctx, batch, true)?;
            let (cl, mut terms) = classification_from(bundle, ctx, batch, &enc)?;
            let (co, co_terms) = contrastive_from(bundle, ctx, &enc, tau)?;
            let lambda = objective.lambda();
            let weighted = ctx.graph.scale(co, F::from_f64(lambda));
            let total = ctx.graph.add(cl, weighted)?;
            terms.l_co = co_terms.l_co;
            terms.nce_dst = co_terms.nce_dst;
            terms.nce_src = co_terms.nce_src;
            terms.total = value(ctx, total);
            Ok((total, terms))
        }
    }
}

fn value<F: Real>(ctx: &Ctx<F>, v: Var) -> f64 {
    ctx.graph.value(v).item().as_f64()
}

/// Finite-difference check of `L_CL + lambda * L_CO` through every parameter
/// of a micro model (d 8, one layer, 20-sample windows, batch 4).
pub fn composite_grad_check(seed: u64, lambda: f64, tol: f64) -> crate::numerics::GradCheckReport {
    use crate::model::{EncoderCfg, ModelCfg, StreamShape};
    use crate::numerics::gradcheck::randn;
    use rand::SeedableRng;

    let enc = EncoderCfg { d: 8, layers: 1, heads: 2, dropout: 0.0, patch_len: Some(5), ..Default::default() };
    let cfg = ModelCfg { src: enc.clone(), dst: enc, init_std: 0.3, ..Default::default() };
    let s = StreamShape { channels: 3, n_w: 20, patch_len: 5 };
    let d = StreamShape { channels: 2, n_w: 20, patch_len: 5 };
    let name = "l_cl+lambda*l_co";
    let b = match ModelBundle::<f64>::paired(&cfg, s, d, 3, seed) {
        Ok(b) => b,
        Err(e) => return crate::numerics::GradCheckReport::failed(name, tol, e.to_string()),
    };
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let x = Batch {
        src: Some(randn(&mut rng, &[4, 3, 20])),
        dst: randn(&mut rng, &[4, 2, 20]),
        labels: vec![0, 1, 2, 1],
    };
    crate::model::param_grad_check(name, &b, tol, |b, ctx| {
        Ok(objective_loss(b, ctx, &x, Objective::Joint { lambda }, 0.07)?.0)
    })
}
