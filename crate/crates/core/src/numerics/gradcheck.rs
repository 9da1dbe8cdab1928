//! Finite-difference verification of reverse-mode gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Graph, OpKind, Result, Tensor, Var};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Floor of the relative-error denominator.
pub const REL_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub op_name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    /// Set when the check could not be evaluated (non-finite values, errors).
    pub diagnostic: Option<String>,
}

impl GradCheckReport {
    pub fn failed(op_name: &str, tolerance: f64, msg: String) -> Self {
        Self {
            op_name: op_name.to_string(),
            max_rel_error: f64::INFINITY,
            tolerance,
            passed: false,
            diagnostic: Some(msg),
        }
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<28} max_rel_err={:.3e} tol={:.0e} {}",
            self.op_name,
            self.max_rel_error,
            self.tolerance,
            if self.passed { "PASS" } else { "FAIL" }
        )?;
        if let Some(d) = &self.diagnostic {
            write!(f, " ({d})")?;
        }
        Ok(())
    }
}

/// Compares reverse-mode gradients of `op` with respect to every element of
/// every input against central differences.
///
/// A non-scalar output is reduced to a scalar by a weighted sum with fixed
/// pseudo-random weights (a plain sum would make e.g. `sum(softmax(x))`
/// identically constant). `corrupt` is forwarded to
/// [`Graph::corrupt_gradient_of`].
pub fn grad_check<Op>(
    op_name: &str,
    inputs: &[Tensor<f64>],
    tol: f64,
    corrupt: Option<OpKind>,
    op: Op,
) -> GradCheckReport
where
    Op: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor<f64>], grad: bool| -> Result<(f64, Vec<Tensor<f64>>)> {
        let mut g = Graph::new();
        if let Some(k) = corrupt {
            g.corrupt_gradient_of(k);
        }
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), grad)).collect();
        let out = op(&mut g, &vars)?;
        let loss = reduce(&mut g, out)?;
        g.ensure_finite()?;
        let value = g.value(loss).item();
        if !grad {
            return Ok((value, Vec::new()));
        }
        let grads = g.backward(loss)?;
        Ok((value, vars.iter().map(|&v| grads.get(&g, v)).collect()))
    };

    let analytic = match eval(inputs, true) {
        Ok((_, grads)) => grads,
        Err(e) => return GradCheckReport::failed(op_name, tol, e.to_string()),
    };
    let mut max_rel: f64 = 0.0;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let orig = input.data()[j];
            work[ti].data_mut()[j] = orig + FD_STEP;
            let plus = eval(&work, false);
            work[ti].data_mut()[j] = orig - FD_STEP;
            let minus = eval(&work, false);
            work[ti].data_mut()[j] = orig;
            let (plus, minus) = match (plus, minus) {
                (Ok((p, _)), Ok((m, _))) => (p, m),
                (Err(e), _) | (_, Err(e)) => {
                    return GradCheckReport::failed(op_name, tol, format!("perturbed eval: {e}"))
                }
            };
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic[ti].data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            if !rel.is_finite() {
                return GradCheckReport::failed(op_name, tol, "non-finite gradient".into());
            }
            max_rel = max_rel.max(rel);
        }
    }
    GradCheckReport {
        op_name: op_name.to_string(),
        max_rel_error: max_rel,
        tolerance: tol,
        passed: max_rel <= tol,
        diagnostic: None,
    }
}

fn reduce(g: &mut Graph<f64>, out: Var) -> Result<Var> {
    if g.value(out).len() == 1 {
        return Ok(out);
    }
    let shape = g.shape(out).to_vec();
    let n = g.value(out).len();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..1.5)).collect();
    let w = g.constant(Tensor::new(shape, w)?);
    let p = g.mul(out, w)?;
    Ok(g.sum_all(p))
}

/// Standard-normal tensor.
pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// Normal entries pushed away from zero (for ops with a kink at 0).
fn randn_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    randn(rng, shape).map(|x| if x.abs() < 0.1 { x.signum() * 0.1 + x } else { x })
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape")
}

/// One check per differentiable primitive on small random shapes.
pub fn primitive_suite(seed: u64, tol: f64, corrupt: Option<OpKind>) -> Vec<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut out = Vec::new();
    let mut check = |kind: OpKind, inputs: Vec<Tensor<f64>>, f: &dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>| {
        out.push(grad_check(kind.name(), &inputs, tol, corrupt, f));
    };

    check(OpKind::MatMul, vec![randn(r, &[3, 4]), randn(r, &[4, 2])], &|g, v| g.matmul(v[0], v[1]));
    check(OpKind::BatchMatMul, vec![randn(r, &[2, 3, 4]), randn(r, &[2, 4, 2])], &|g, v| {
        g.batch_matmul(v[0], v[1])
    });
    check(OpKind::BatchMatMulNt, vec![randn(r, &[2, 3, 4]), randn(r, &[2, 5, 4])], &|g, v| {
        g.batch_matmul_nt(v[0], v[1])
    });
    check(OpKind::Add, vec![randn(r, &[2, 3, 4]), randn(r, &[3, 1])], &|g, v| g.add(v[0], v[1]));
    check(OpKind::Mul, vec![randn(r, &[2, 3]), randn(r, &[3])], &|g, v| g.mul(v[0], v[1]));
    check(OpKind::Scale, vec![randn(r, &[5])], &|g, v| Ok(g.scale(v[0], -1.7)));
    check(OpKind::Gelu, vec![randn(r, &[6])], &|g, v| Ok(g.gelu(v[0])));
    check(OpKind::Relu, vec![randn_away_from_zero(r, &[6])], &|g, v| Ok(g.relu(v[0])));
    check(OpKind::Exp, vec![randn(r, &[4])], &|g, v| Ok(g.exp(v[0])));
    check(OpKind::ClampLog, vec![uniform(r, &[4], 0.5, 2.0)], &|g, v| Ok(g.clamp_log(v[0], 1e-12)));
    check(OpKind::Softmax, vec![randn(r, &[2, 3, 4])], &|g, v| g.softmax(v[0], 1));
    check(OpKind::LogSumExp, vec![randn(r, &[3, 5])], &|g, v| Ok(g.logsumexp(v[0])));
    check(
        OpKind::LayerNorm,
        vec![randn(r, &[4, 6]), uniform(r, &[6], 0.5, 1.5), randn(r, &[6])],
        &|g, v| g.layer_norm(v[0], v[1], v[2], 1e-5),
    );
    check(OpKind::Reshape, vec![randn(r, &[2, 6])], &|g, v| {
        let x = g.reshape(v[0], &[3, 4])?;
        // reshape alone is linear with unit weights; square it so the check
        // sees position-dependent gradients
        g.mul(x, x)
    });
    check(OpKind::Permute, vec![randn(r, &[2, 3, 4]), randn(r, &[4, 2, 3])], &|g, v| {
        let p = g.permute(v[0], &[2, 0, 1])?;
        g.mul(p, v[1])
    });
    check(OpKind::Expand, vec![randn(r, &[3])], &|g, v| {
        let e = g.expand(v[0], 4)?;
        g.mul(e, e)
    });
    check(OpKind::SumAxis, vec![randn(r, &[2, 3, 4])], &|g, v| {
        let s = g.sum_axis(v[0], 1)?;
        g.mul(s, s)
    });
    check(OpKind::SumAll, vec![randn(r, &[5])], &|g, v| {
        let s = g.mean_all(v[0]);
        g.mul(s, s)
    });
    check(OpKind::L2Normalize, vec![randn(r, &[3, 4])], &|g, v| Ok(g.l2_normalize(v[0], 1e-8)));
    check(OpKind::Pick, vec![randn(r, &[3, 5])], &|g, v| {
        let p = g.pick(v[0], &[4, 0, 2])?;
        g.mul(p, p)
    });
    out
}
