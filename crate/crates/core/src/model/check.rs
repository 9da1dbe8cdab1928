use super::{Ctx, ModelBundle, ModelError};
use crate::numerics::gradcheck::{FD_STEP, REL_FLOOR};
use crate::numerics::{GradCheckReport, Var};

/// Central-difference check of every parameter gradient of a scalar built
/// by `f` from a deterministic (dropout-free) forward pass.
pub fn param_grad_check<Fwd>(name: &str, bundle: &ModelBundle<f64>, tol: f64, f: Fwd) -> GradCheckReport
where
    Fwd: Fn(&ModelBundle<f64>, &mut Ctx<f64>) -> Result<Var, ModelError>,
{
    let fail = |msg: String| GradCheckReport::failed(name, tol, msg);
    let value = |b: &ModelBundle<f64>| -> Result<f64, ModelError> {
        let mut ctx = Ctx::eval(&b.params);
        let out = f(b, &mut ctx)?;
        ctx.graph.ensure_finite()?;
        Ok(ctx.graph.value(out).item())
    };
    let analytic = {
        let mut ctx = Ctx::grad_no_dropout(&bundle.params);
        let out = match f(bundle, &mut ctx) {
            Ok(v) => v,
            Err(e) => return fail(e.to_string()),
        };
        match ctx.param_grads(out) {
            Ok(g) => g,
            Err(e) => return fail(e.to_string()),
        }
    };
    let mut work = bundle.clone();
    let mut max_rel: f64 = 0.0;
    for id in bundle.params.ids() {
        for j in 0..bundle.params.get(id).len() {
            let orig = bundle.params.get(id).data()[j];
            work.params.get_mut(id).data_mut()[j] = orig + FD_STEP;
            let plus = value(&work);
            work.params.get_mut(id).data_mut()[j] = orig - FD_STEP;
            let minus = value(&work);
            work.params.get_mut(id).data_mut()[j] = orig;
            let (plus, minus) = match (plus, minus) {
                (Ok(p), Ok(m)) => (p, m),
                (Err(e), _) | (_, Err(e)) => return fail(format!("perturbed eval: {e}")),
            };
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic[id.index()].as_ref().map_or(0.0, |g| g.data()[j]);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            if !rel.is_finite() {
                return fail(format!("non-finite gradient at {}", bundle.params.name(id)));
            }
            if rel > max_rel {
                max_rel = rel;
                if rel > tol {
                    log::debug!("{name}: {}[{j}] analytic {a:e} numeric {numeric:e}", bundle.params.name(id));
                }
            }
        }
    }
    GradCheckReport {
        op_name: name.to_string(),
        max_rel_error: max_rel,
        tolerance: tol,
        passed: max_rel <= tol,
        diagnostic: None,
    }
}
