//! Central finite-difference checks for tape gradients.

use crate::error::{MissError, Result};
use crate::graph::{Graph, Tensor, Var};
use crate::params::ParamStore;

/// `‖a − n‖ / (‖a‖ + ‖n‖)`, zero when both are zero.
pub fn relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    let diff = (analytic - numeric).mapv(|x| x * x).sum().sqrt();
    let scale = analytic.mapv(|x| x * x).sum().sqrt() + numeric.mapv(|x| x * x).sum().sqrt();
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub rel_error: f64,
    /// Largest elementwise `|a − n|`.
    pub max_abs_error: f64,
    pub analytic_norm: f64,
}

impl ParamCheck {
    /// Relative error under `tol`, or both gradients zero up to `floor`.
    /// Attention key biases have an exactly zero true gradient, so only the
    /// absolute test is meaningful for them.
    pub fn passes(&self, tol: f64, floor: f64) -> bool {
        self.rel_error < tol || self.max_abs_error < floor
    }
}

/// Compares tape gradients of the scalar built by `f` with central
/// differences of step `h`, for each parameter in `names` (all parameters
/// when empty).
pub fn check<F>(ps: &ParamStore, names: &[&str], h: f64, f: F) -> Result<Vec<ParamCheck>>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = f(&mut g, ps)?;
    if g.shape(out) != (1, 1) {
        return Err(MissError::shape(format!("gradient check needs a scalar, got {:?}", g.shape(out))));
    }
    let grads = g.backward(out);
    let analytic = g.param_grads(&grads);

    let targets: Vec<String> = if names.is_empty() { ps.names().map(str::to_string).collect() } else { names.iter().map(|s| s.to_string()).collect() };
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::inference();
        let out = f(&mut g, store)?;
        Ok(g.scalar(out))
    };

    let mut report = Vec::with_capacity(targets.len());
    let mut work = ps.clone();
    for name in targets {
        let shape = ps.expect(&name)?.dim();
        let a = analytic.get(&name).cloned().unwrap_or_else(|| Tensor::zeros(shape));
        let mut numeric = Tensor::zeros(shape);
        for idx in 0..shape.0 * shape.1 {
            let (r, c) = (idx / shape.1, idx % shape.1);
            let orig = ps.expect(&name)?[[r, c]];
            work.get_mut(&name).expect("cloned store")[[r, c]] = orig + h;
            let up = eval(&work)?;
            work.get_mut(&name).expect("cloned store")[[r, c]] = orig - h;
            let down = eval(&work)?;
            work.get_mut(&name).expect("cloned store")[[r, c]] = orig;
            numeric[[r, c]] = (up - down) / (2.0 * h);
        }
        let max_abs_error = (&a - &numeric).iter().fold(0.0f64, |m, d| m.max(d.abs()));
        report.push(ParamCheck { max_abs_error, analytic_norm: a.mapv(|x| x * x).sum().sqrt(), rel_error: relative_error(&a, &numeric), name });
    }
    Ok(report)
}
