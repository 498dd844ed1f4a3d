use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Bound, ParamSet};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst element.
    pub worst: Option<(String, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

fn evaluate<F>(params: &ParamSet, f: &mut F) -> Result<f64>
where
    F: FnMut(&mut Graph, &Bound) -> Result<Var>,
{
    let mut g = Graph::new();
    let bound = g.bind(params);
    let loss = f(&mut g, &bound)?;
    let v = g.scalar(loss);
    if !v.is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    Ok(v)
}

/// Compare backward gradients of `f` against central differences over every
/// parameter element.
pub fn grad_check<F>(params: &ParamSet, eps: f64, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &Bound) -> Result<Var>,
{
    let mut g = Graph::new();
    let bound = g.bind(params);
    let loss = f(&mut g, &bound)?;
    if !g.scalar(loss).is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    g.backward(loss)?;
    let analytic = g.param_grads(&bound);
    drop(g);

    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        checked: 0,
    };
    for id in params.ids() {
        for j in 0..params.get(id).len() {
            let orig = params.get(id).data()[j];
            probe.get_mut(id).data_mut()[j] = orig + eps;
            let plus = evaluate(&probe, &mut f)?;
            probe.get_mut(id).data_mut()[j] = orig - eps;
            let minus = evaluate(&probe, &mut f)?;
            probe.get_mut(id).data_mut()[j] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[id.index()].as_ref().map_or(0.0, |t| t.data()[j]);
            if !a.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {}", params.name(id))));
            }
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((params.name(id).to_string(), j));
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
    }
    Ok(report)
}
