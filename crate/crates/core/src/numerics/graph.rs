use super::error::{invalid, shape_err, NumericsError, Result};
use super::kernels::{self, Bcast};
use super::{Real, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Every differentiable operation the graph knows about.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    BatchMatMul,
    BatchMatMulNt,
    Add,
    Mul,
    Scale,
    Gelu,
    Relu,
    Exp,
    ClampLog,
    Softmax,
    LogSumExp,
    LayerNorm,
    Reshape,
    Permute,
    Expand,
    SumAxis,
    SumAll,
    L2Normalize,
    Pick,
}

impl OpKind {
    /// All ops that carry a gradient rule (everything but leaves).
    pub const DIFFERENTIABLE: [OpKind; 20] = [
        OpKind::MatMul,
        OpKind::BatchMatMul,
        OpKind::BatchMatMulNt,
        OpKind::Add,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::Gelu,
        OpKind::Relu,
        OpKind::Exp,
        OpKind::ClampLog,
        OpKind::Softmax,
        OpKind::LogSumExp,
        OpKind::LayerNorm,
        OpKind::Reshape,
        OpKind::Permute,
        OpKind::Expand,
        OpKind::SumAxis,
        OpKind::SumAll,
        OpKind::L2Normalize,
        OpKind::Pick,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::BatchMatMul => "batch_matmul",
            OpKind::BatchMatMulNt => "batch_matmul_nt",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::Gelu => "gelu",
            OpKind::Relu => "relu",
            OpKind::Exp => "exp",
            OpKind::ClampLog => "clamp_log",
            OpKind::Softmax => "softmax",
            OpKind::LogSumExp => "logsumexp",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Reshape => "reshape",
            OpKind::Permute => "permute",
            OpKind::Expand => "expand",
            OpKind::SumAxis => "sum_axis",
            OpKind::SumAll => "sum_all",
            OpKind::L2Normalize => "l2_normalize",
            OpKind::Pick => "pick",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        std::iter::once(OpKind::Leaf)
            .chain(OpKind::DIFFERENTIABLE)
            .find(|k| k.name() == name)
    }
}

enum Op<F> {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    BatchMatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize, trans_b: bool },
    Add { a: Var, b: Var, ba: Bcast, bb: Bcast },
    Mul { a: Var, b: Var, ba: Bcast, bb: Bcast },
    Scale { a: Var, s: F },
    Gelu { a: Var },
    Relu { a: Var },
    Exp { a: Var },
    ClampLog { a: Var, floor: F },
    Softmax { a: Var, axis: usize },
    LogSumExp { a: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<F>, rstd: Vec<F> },
    Reshape { a: Var },
    Permute { a: Var, perm: Vec<usize> },
    Expand { a: Var },
    SumAxis { a: Var, axis: usize, scale: F },
    SumAll { a: Var, scale: F },
    L2Normalize { a: Var, norms: Vec<F>, eps: F },
    Pick { a: Var, idx: Vec<usize> },
}

impl<F> Op<F> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::BatchMatMul { trans_b: false, .. } => OpKind::BatchMatMul,
            Op::BatchMatMul { trans_b: true, .. } => OpKind::BatchMatMulNt,
            Op::Add { .. } => OpKind::Add,
            Op::Mul { .. } => OpKind::Mul,
            Op::Scale { .. } => OpKind::Scale,
            Op::Gelu { .. } => OpKind::Gelu,
            Op::Relu { .. } => OpKind::Relu,
            Op::Exp { .. } => OpKind::Exp,
            Op::ClampLog { .. } => OpKind::ClampLog,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::LogSumExp { .. } => OpKind::LogSumExp,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::Permute { .. } => OpKind::Permute,
            Op::Expand { .. } => OpKind::Expand,
            Op::SumAxis { .. } => OpKind::SumAxis,
            Op::SumAll { .. } => OpKind::SumAll,
            Op::L2Normalize { .. } => OpKind::L2Normalize,
            Op::Pick { .. } => OpKind::Pick,
        }
    }
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Gradient tape for one forward/backward pass.
pub struct Graph<F: Real> {
    nodes: Vec<Node<F>>,
    non_finite: Option<OpKind>,
    zero_norm_events: usize,
    corrupt: Option<OpKind>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            non_finite: None,
            zero_norm_events: 0,
            corrupt: None,
        }
    }

    /// Test hook: gradients flowing out of every `kind` node are scaled by
    /// 1.5, so a gradient check must catch it.
    pub fn corrupt_gradient_of(&mut self, kind: OpKind) {
        self.corrupt = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of l2-normalised rows whose norm fell under the clamp.
    pub fn zero_norm_events(&self) -> usize {
        self.zero_norm_events
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<F>) -> Var {
        self.leaf(t, true)
    }

    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.leaf(t, false)
    }

    pub fn leaf(&mut self, t: Tensor<F>, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    /// Fails with the first op that produced a NaN or infinity.
    pub fn ensure_finite(&self) -> Result<()> {
        match self.non_finite {
            Some(kind) => Err(NumericsError::NonFinite { op: kind.name() }),
            None => Ok(()),
        }
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        if self.non_finite.is_none() && !value.is_finite() {
            self.non_finite = Some(op.kind());
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn data(&self, v: Var) -> &[F] {
        self.nodes[v.0].value.data()
    }

    fn make(shape: Vec<usize>, data: Vec<F>) -> Tensor<F> {
        Tensor::new(shape, data).expect("op produced consistent shape")
    }

    // ---------------------------------------------------------------- ops

    /// `a[..., k] · b[k, n]`; leading axes of `a` are treated as rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sb.len() != 2 || sa.is_empty() || sa[sa.len() - 1] != sb[0] {
            return shape_err("matmul", &sa, &sb);
        }
        let k = sb[0];
        let n = sb[1];
        let m = self.value(a).len() / k;
        let mut out = vec![F::zero(); m * n];
        kernels::mm_acc(self.data(a), self.data(b), &mut out, m, k, n);
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Self::make(shape, out), Op::MatMul { a, b, m, k, n }, rg))
    }

    /// Batched `a[B, m, k] · b[B, k, n]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bmm(a, b, false)
    }

    /// Batched `a[B, m, k] · b[B, n, k]ᵀ`.
    pub fn batch_matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bmm(a, b, true)
    }

    fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let name = if trans_b { "batch_matmul_nt" } else { "batch_matmul" };
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return shape_err(name, &sa, &sb);
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return shape_err(name, &sa, &sb);
        }
        let mut out = vec![F::zero(); batch * m * n];
        let (da, db) = (self.data(a), self.data(b));
        for i in 0..batch {
            let ab = &da[i * m * k..(i + 1) * m * k];
            let bb = &db[i * k * n..(i + 1) * k * n];
            let ob = &mut out[i * m * n..(i + 1) * m * n];
            if trans_b {
                kernels::mm_nt_acc(ab, bb, ob, m, k, n);
            } else {
                kernels::mm_acc(ab, bb, ob, m, k, n);
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Self::make(vec![batch, m, n], out),
            Op::BatchMatMul { a, b, batch, m, k, n, trans_b },
            rg,
        ))
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, false)
    }

    /// Elementwise product with numpy-style broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, true)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, F::from_f64(-1.0));
        self.add(a, nb)
    }

    fn binary(&mut self, a: Var, b: Var, is_mul: bool) -> Result<Var> {
        let name = if is_mul { "mul" } else { "add" };
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let Some(shape) = kernels::broadcast_shape(&sa, &sb) else {
            return shape_err(name, &sa, &sb);
        };
        let ba = Bcast::plan(&shape, &sa);
        let bb = Bcast::plan(&shape, &sb);
        let total: usize = shape.iter().product();
        let (xa, xb) = (self.data(a), self.data(b));
        let out: Vec<F> = match (&ba, &bb) {
            (Bcast::Same, Bcast::Same) => {
                if is_mul {
                    xa.iter().zip(xb).map(|(&x, &y)| x * y).collect()
                } else {
                    xa.iter().zip(xb).map(|(&x, &y)| x + y).collect()
                }
            }
            (Bcast::Same, Bcast::Suffix(len)) => {
                let mut out = Vec::with_capacity(total);
                for chunk in xa.chunks(*len) {
                    if is_mul {
                        out.extend(chunk.iter().zip(xb).map(|(&x, &y)| x * y));
                    } else {
                        out.extend(chunk.iter().zip(xb).map(|(&x, &y)| x + y));
                    }
                }
                out
            }
            _ => (0..total)
                .map(|i| {
                    let (x, y) = (xa[ba.index(i)], xb[bb.index(i)]);
                    if is_mul {
                        x * y
                    } else {
                        x + y
                    }
                })
                .collect(),
        };
        let rg = self.rg(&[a, b]);
        let op = if is_mul {
            Op::Mul { a, b, ba, bb }
        } else {
            Op::Add { a, b, ba, bb }
        };
        Ok(self.push(Self::make(shape, out), op, rg))
    }

    pub fn scale(&mut self, a: Var, s: F) -> Var {
        let t = self.value(a).map(|x| x * s);
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale { a, s }, rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let c = F::from_f64(GELU_C);
        let k = F::from_f64(GELU_A);
        let half = F::from_f64(0.5);
        let t = self
            .value(a)
            .map(|x| half * x * (F::one() + (c * (x + k * x * x * x)).tanh()));
        let rg = self.rg(&[a]);
        self.push(t, Op::Gelu { a }, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.max(F::zero()));
        let rg = self.rg(&[a]);
        self.push(t, Op::Relu { a }, rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.exp());
        let rg = self.rg(&[a]);
        self.push(t, Op::Exp { a }, rg)
    }

    /// `ln(max(x, floor))`; zero gradient below the floor.
    pub fn clamp_log(&mut self, a: Var, floor: F) -> Var {
        let t = self.value(a).map(|x| x.max(floor).ln());
        let rg = self.rg(&[a]);
        self.push(t, Op::ClampLog { a, floor }, rg)
    }

    /// Softmax along `axis`, max-subtracted.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return invalid("softmax", format!("axis {axis} out of range for {shape:?}"));
        }
        let (outer, n, inner) = kernels::split_axis(&shape, axis);
        let x = self.data(a);
        let mut out = vec![F::zero(); x.len()];
        for o in 0..outer {
            for j in 0..inner {
                let base = o * n * inner + j;
                let mut mx = F::neg_infinity();
                for t in 0..n {
                    mx = mx.max(x[base + t * inner]);
                }
                let mut sum = F::zero();
                for t in 0..n {
                    let e = (x[base + t * inner] - mx).exp();
                    out[base + t * inner] = e;
                    sum += e;
                }
                for t in 0..n {
                    out[base + t * inner] /= sum;
                }
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Self::make(shape, out), Op::Softmax { a, axis }, rg))
    }

    /// `log Σ exp` over the last axis, max-subtracted. The axis is removed.
    pub fn logsumexp(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let n = shape[shape.len() - 1];
        let x = self.data(a);
        let out: Vec<F> = x
            .chunks(n)
            .map(|row| {
                let mx = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
                let s: F = row.iter().map(|&v| (v - mx).exp()).sum();
                mx + s.ln()
            })
            .collect();
        let rg = self.rg(&[a]);
        self.push(Self::make(reduced(&shape, shape.len() - 1), out), Op::LogSumExp { a }, rg)
    }

    /// Normalises the last axis to zero mean / unit variance, then applies
    /// `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = shape[shape.len() - 1];
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return shape_err("layer_norm", &shape, self.shape(gain));
        }
        let eps = F::from_f64(eps);
        let nf = F::from_f64(d as f64);
        let xs = self.data(x);
        let (g, b) = (self.data(gain), self.data(bias));
        let rows = xs.len() / d;
        let mut out = Vec::with_capacity(xs.len());
        let mut xhat = Vec::with_capacity(xs.len());
        let mut rstd = Vec::with_capacity(rows);
        for row in xs.chunks(d) {
            let mean = row.iter().copied().sum::<F>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / nf;
            let r = F::one() / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            Self::make(shape, out),
            Op::LayerNorm { x, gain, bias, xhat, rstd },
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape.to_vec())?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Reshape { a }, rg))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return invalid("permute", format!("{perm:?} is not a permutation of {shape:?}"));
        }
        let (s, data) = kernels::permute(self.data(a), &shape, perm);
        let rg = self.rg(&[a]);
        Ok(self.push(Self::make(s, data), Op::Permute { a, perm: perm.to_vec() }, rg))
    }

    /// Repeats `a` along a new leading axis of extent `times`.
    pub fn expand(&mut self, a: Var, times: usize) -> Result<Var> {
        if times == 0 {
            return invalid("expand", "zero repeat count");
        }
        let mut shape = vec![times];
        shape.extend_from_slice(self.shape(a));
        let x = self.data(a);
        let mut out = Vec::with_capacity(x.len() * times);
        for _ in 0..times {
            out.extend_from_slice(x);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Self::make(shape, out), Op::Expand { a }, rg))
    }

    /// Sum over `axis`, which is removed from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, F::one())
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let n = self.shape(a).get(axis).copied().unwrap_or(1);
        self.reduce_axis(a, axis, F::one() / F::from_f64(n as f64))
    }

    fn reduce_axis(&mut self, a: Var, axis: usize, scale: F) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return invalid("sum_axis", format!("axis {axis} out of range for {shape:?}"));
        }
        let (outer, n, inner) = kernels::split_axis(&shape, axis);
        let x = self.data(a);
        let mut out = vec![F::zero(); outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for t in 0..n {
                let src = &x[(o * n + t) * inner..(o * n + t + 1) * inner];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
            for d in dst.iter_mut() {
                *d *= scale;
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(
            Self::make(reduced(&shape, axis), out),
            Op::SumAxis { a, axis, scale },
            rg,
        ))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        self.reduce_all(a, F::one())
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        self.reduce_all(a, F::one() / F::from_f64(n as f64))
    }

    fn reduce_all(&mut self, a: Var, scale: F) -> Var {
        let s = self.data(a).iter().copied().sum::<F>() * scale;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::SumAll { a, scale }, rg)
    }

    /// Divides each last-axis row by `max(‖row‖, eps)`. Rows under the clamp
    /// are counted in [`Graph::zero_norm_events`] and logged.
    pub fn l2_normalize(&mut self, a: Var, eps: f64) -> Var {
        let shape = self.shape(a).to_vec();
        let d = shape[shape.len() - 1];
        let eps = F::from_f64(eps);
        let x = self.data(a);
        let mut out = Vec::with_capacity(x.len());
        let mut norms = Vec::with_capacity(x.len() / d);
        let mut clamped = 0;
        for row in x.chunks(d) {
            let norm = row.iter().map(|&v| v * v).sum::<F>().sqrt();
            if norm <= eps {
                clamped += 1;
            }
            let den = norm.max(eps);
            norms.push(norm);
            out.extend(row.iter().map(|&v| v / den));
        }
        if clamped > 0 {
            log::warn!("l2_normalize: {clamped} near-zero row(s) clamped to eps");
            self.zero_norm_events += clamped;
        }
        let rg = self.rg(&[a]);
        self.push(Self::make(shape, out), Op::L2Normalize { a, norms, eps }, rg)
    }

    /// `out[i] = a[i, idx[i]]` for a rank-2 `a`.
    pub fn pick(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 || shape[0] != idx.len() {
            return shape_err("pick", &shape, &[idx.len()]);
        }
        let k = shape[1];
        if let Some(&bad) = idx.iter().find(|&&i| i >= k) {
            return invalid("pick", format!("index {bad} out of range {k}"));
        }
        let x = self.data(a);
        let out: Vec<F> = idx.iter().enumerate().map(|(i, &j)| x[i * k + j]).collect();
        let rg = self.rg(&[a]);
        Ok(self.push(
            Self::make(vec![idx.len()], out),
            Op::Pick { a, idx: idx.to_vec() },
            rg,
        ))
    }

    // ---------------------------------------------------------- composites

    /// `x · w + b` with `w[in, out]`, `b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add(y, b)
    }

    /// Cosine similarity of two rank-1 vectors, norms clamped at `eps`.
    pub fn cosine_similarity(&mut self, a: Var, b: Var, eps: f64) -> Result<Var> {
        if self.shape(a) != self.shape(b) || self.shape(a).len() != 1 {
            return shape_err("cosine_similarity", self.shape(a), self.shape(b));
        }
        let na = self.l2_normalize(a, eps);
        let nb = self.l2_normalize(b, eps);
        let p = self.mul(na, nb)?;
        Ok(self.sum_all(p))
    }

    // ------------------------------------------------------------ backward

    /// Reverse-mode sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if self.value(loss).len() != 1 {
            return invalid("backward", format!("loss has shape {:?}", self.shape(loss)));
        }
        let mut grads: Vec<Option<Vec<F>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                continue;
            }
            let Some(mut g) = grads[i].take() else { continue };
            if self.corrupt == Some(node.op.kind()) {
                let k = F::from_f64(1.5);
                g.iter_mut().for_each(|v| *v *= k);
            }
            self.backprop(node, &g, &mut grads);
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(NumericsError::NonFinite {
                        op: self.nodes[i].op.kind().name(),
                    });
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop(&self, node: &Node<F>, g: &[F], grads: &mut [Option<Vec<F>>]) {
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if let Some(da) = self.slot(grads, a) {
                    kernels::mm_nt_acc(g, self.data(b), da, m, n, k);
                }
                if let Some(db) = self.slot(grads, b) {
                    kernels::mm_tn_acc(self.data(a), g, db, m, k, n);
                }
            }
            &Op::BatchMatMul { a, b, batch, m, k, n, trans_b } => {
                let (xa, xb) = (self.data(a), self.data(b));
                if let Some(da) = self.slot(grads, a) {
                    for i in 0..batch {
                        let gb = &g[i * m * n..(i + 1) * m * n];
                        let bb = &xb[i * k * n..(i + 1) * k * n];
                        let out = &mut da[i * m * k..(i + 1) * m * k];
                        if trans_b {
                            kernels::mm_acc(gb, bb, out, m, n, k);
                        } else {
                            kernels::mm_nt_acc(gb, bb, out, m, n, k);
                        }
                    }
                }
                if let Some(db) = self.slot(grads, b) {
                    for i in 0..batch {
                        let gb = &g[i * m * n..(i + 1) * m * n];
                        let ab = &xa[i * m * k..(i + 1) * m * k];
                        let out = &mut db[i * k * n..(i + 1) * k * n];
                        if trans_b {
                            kernels::mm_tn_acc(gb, ab, out, m, n, k);
                        } else {
                            kernels::mm_tn_acc(ab, gb, out, m, k, n);
                        }
                    }
                }
            }
            Op::Add { a, b, ba, bb } => {
                if let Some(da) = self.slot(grads, *a) {
                    scatter(da, g, ba, |gi, _| gi);
                }
                if let Some(db) = self.slot(grads, *b) {
                    scatter(db, g, bb, |gi, _| gi);
                }
            }
            Op::Mul { a, b, ba, bb } => {
                let (xa, xb) = (self.data(*a), self.data(*b));
                if let Some(da) = self.slot(grads, *a) {
                    scatter(da, g, ba, |gi, i| gi * xb[bb.index(i)]);
                }
                if let Some(db) = self.slot(grads, *b) {
                    scatter(db, g, bb, |gi, i| gi * xa[ba.index(i)]);
                }
            }
            &Op::Scale { a, s } => {
                if let Some(da) = self.slot(grads, a) {
                    for (d, &gi) in da.iter_mut().zip(g) {
                        *d += gi * s;
                    }
                }
            }
            &Op::Gelu { a } => {
                let c = F::from_f64(GELU_C);
                let k = F::from_f64(GELU_A);
                let half = F::from_f64(0.5);
                let three_k = F::from_f64(3.0 * GELU_A);
                let x = self.data(a);
                if let Some(da) = self.slot(grads, a) {
                    for ((d, &gi), &v) in da.iter_mut().zip(g).zip(x) {
                        let t = (c * (v + k * v * v * v)).tanh();
                        let dt = (F::one() - t * t) * c * (F::one() + three_k * v * v);
                        *d += gi * (half * (F::one() + t) + half * v * dt);
                    }
                }
            }
            &Op::Relu { a } => {
                let x = self.data(a);
                if let Some(da) = self.slot(grads, a) {
                    for ((d, &gi), &v) in da.iter_mut().zip(g).zip(x) {
                        if v > F::zero() {
                            *d += gi;
                        }
                    }
                }
            }
            &Op::Exp { a } => {
                let y = node.value.data();
                if let Some(da) = self.slot(grads, a) {
                    for ((d, &gi), &v) in da.iter_mut().zip(g).zip(y) {
                        *d += gi * v;
                    }
                }
            }
            &Op::ClampLog { a, floor } => {
                let x = self.data(a);
                if let Some(da) = self.slot(grads, a) {
                    for ((d, &gi), &v) in da.iter_mut().zip(g).zip(x) {
                        if v > floor {
                            *d += gi / v;
                        }
                    }
                }
            }
            &Op::Softmax { a, axis } => {
                let y = node.value.data();
                let (outer, n, inner) = kernels::split_axis(node.value.shape(), axis);
                if let Some(da) = self.slot(grads, a) {
                    for o in 0..outer {
                        for j in 0..inner {
                            let base = o * n * inner + j;
                            let mut dot = F::zero();
                            for t in 0..n {
                                let p = base + t * inner;
                                dot += g[p] * y[p];
                            }
                            for t in 0..n {
                                let p = base + t * inner;
                                da[p] += y[p] * (g[p] - dot);
                            }
                        }
                    }
                }
            }
            &Op::LogSumExp { a } => {
                let x = self.data(a);
                let lse = node.value.data();
                let n = x.len() / lse.len();
                if let Some(da) = self.slot(grads, a) {
                    for (r, (row, drow)) in x.chunks(n).zip(da.chunks_mut(n)).enumerate() {
                        for (d, &v) in drow.iter_mut().zip(row) {
                            *d += g[r] * (v - lse[r]).exp();
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let d = self.shape(*gain)[0];
                let gn = self.data(*gain);
                if let Some(dg) = self.slot(grads, *gain) {
                    for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += grow[j] * hrow[j];
                        }
                    }
                }
                if let Some(db) = self.slot(grads, *bias) {
                    for grow in g.chunks(d) {
                        for j in 0..d {
                            db[j] += grow[j];
                        }
                    }
                }
                if let Some(dx) = self.slot(grads, *x) {
                    let nf = F::from_f64(d as f64);
                    for (r, ((grow, hrow), dxrow)) in
                        g.chunks(d).zip(xhat.chunks(d)).zip(dx.chunks_mut(d)).enumerate()
                    {
                        let mut mean_gy = F::zero();
                        let mut mean_gyh = F::zero();
                        for j in 0..d {
                            let gy = grow[j] * gn[j];
                            mean_gy += gy;
                            mean_gyh += gy * hrow[j];
                        }
                        mean_gy /= nf;
                        mean_gyh /= nf;
                        for j in 0..d {
                            let gy = grow[j] * gn[j];
                            dxrow[j] += rstd[r] * (gy - mean_gy - hrow[j] * mean_gyh);
                        }
                    }
                }
            }
            &Op::Reshape { a } => {
                if let Some(da) = self.slot(grads, a) {
                    for (d, &gi) in da.iter_mut().zip(g) {
                        *d += gi;
                    }
                }
            }
            Op::Permute { a, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let (_, back) = kernels::permute(g, node.value.shape(), &inv);
                if let Some(da) = self.slot(grads, *a) {
                    for (d, gi) in da.iter_mut().zip(back) {
                        *d += gi;
                    }
                }
            }
            &Op::Expand { a } => {
                let n = self.value(a).len();
                if let Some(da) = self.slot(grads, a) {
                    for chunk in g.chunks(n) {
                        for (d, &gi) in da.iter_mut().zip(chunk) {
                            *d += gi;
                        }
                    }
                }
            }
            &Op::SumAxis { a, axis, scale } => {
                let (outer, n, inner) = kernels::split_axis(self.shape(a), axis);
                if let Some(da) = self.slot(grads, a) {
                    for o in 0..outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for t in 0..n {
                            let dst = &mut da[(o * n + t) * inner..(o * n + t + 1) * inner];
                            for (d, &gi) in dst.iter_mut().zip(src) {
                                *d += gi * scale;
                            }
                        }
                    }
                }
            }
            &Op::SumAll { a, scale } => {
                if let Some(da) = self.slot(grads, a) {
                    let v = g[0] * scale;
                    da.iter_mut().for_each(|d| *d += v);
                }
            }
            Op::L2Normalize { a, norms, eps } => {
                let y = node.value.data();
                let d = y.len() / norms.len();
                if let Some(da) = self.slot(grads, *a) {
                    for (r, ((yrow, grow), drow)) in
                        y.chunks(d).zip(g.chunks(d)).zip(da.chunks_mut(d)).enumerate()
                    {
                        if norms[r] > *eps {
                            let dot: F = yrow.iter().zip(grow).map(|(&yv, &gv)| yv * gv).sum();
                            for j in 0..d {
                                drow[j] += (grow[j] - yrow[j] * dot) / norms[r];
                            }
                        } else {
                            for j in 0..d {
                                drow[j] += grow[j] / *eps;
                            }
                        }
                    }
                }
            }
            Op::Pick { a, idx } => {
                let k = self.shape(*a)[1];
                if let Some(da) = self.slot(grads, *a) {
                    for (i, &j) in idx.iter().enumerate() {
                        da[i * k + j] += g[i];
                    }
                }
            }
        }
    }

    /// Gradient accumulator for `v`, allocated on first use; `None` when `v`
    /// does not need a gradient.
    fn slot<'a>(&self, grads: &'a mut [Option<Vec<F>>], v: Var) -> Option<&'a mut [F]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![F::zero(); len]).as_mut_slice())
    }

    /// Shape bookkeeping for gradients of `v`.
    fn shape_of(&self, v: Var) -> Vec<usize> {
        self.nodes[v.0].value.shape().to_vec()
    }
}

fn scatter<F: Real>(dst: &mut [F], g: &[F], plan: &Bcast, f: impl Fn(F, usize) -> F) {
    match plan {
        Bcast::Same => {
            for (i, (d, &gi)) in dst.iter_mut().zip(g).enumerate() {
                *d += f(gi, i);
            }
        }
        _ => {
            for (i, &gi) in g.iter().enumerate() {
                dst[plan.index(i)] += f(gi, i);
            }
        }
    }
}

fn reduced(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s: Vec<usize> = shape
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != axis)
        .map(|(_, &d)| d)
        .collect();
    if s.is_empty() {
        s.push(1);
    }
    s
}

/// Result of [`Graph::backward`].
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Real> Gradients<F> {
    /// Gradient buffer of `v`, or `None` if nothing flowed into it.
    pub fn get_raw(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v` shaped like its value; zeros if nothing flowed in.
    pub fn get(&self, graph: &Graph<F>, v: Var) -> Tensor<F> {
        let shape = graph.shape_of(v);
        match self.get_raw(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}
