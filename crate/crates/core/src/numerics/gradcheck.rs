use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};

/// Denominator floor for relative errors, so entries whose true derivative is
/// zero are compared absolutely at this scale.
const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamGradError {
    pub param: usize,
    pub checked: usize,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    /// Flat index of the entry with the largest relative error.
    pub worst_entry: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub per_parameter: Vec<ParamGradError>,
    pub tol: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol
    }
}

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum GradCheckError {
    #[error("function value is not finite")]
    NonFiniteValue,
    #[error("non-finite {which} gradient for parameter {param} entry {entry}")]
    NonFiniteGradient { which: &'static str, param: usize, entry: usize },
    #[error("function returned {len} values, expected a scalar")]
    NotScalar { len: usize },
}

fn evaluate<F>(f: &F, params: &[Tensor<f64>]) -> Result<(f64, Graph<f64>, Var, Vec<Var>), GradCheckError>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &vars);
    let len = g.value(out).len();
    if len != 1 {
        return Err(GradCheckError::NotScalar { len });
    }
    let v = g.value(out).data()[0];
    if !v.is_finite() {
        return Err(GradCheckError::NonFiniteValue);
    }
    Ok((v, g, out, vars))
}

/// Compares reverse-mode gradients of the scalar `f` against central finite
/// differences at every entry of every parameter.
pub fn grad_check<F>(f: F, params: &[Tensor<f64>], eps: f64, tol: f64) -> Result<GradReport, GradCheckError>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    check(&f, params, eps, tol, None)
}

/// Like [`grad_check`] but probes at most `per_param` entries of each
/// parameter, chosen by `seed`.
pub fn grad_check_sampled<F>(
    f: F,
    params: &[Tensor<f64>],
    eps: f64,
    tol: f64,
    per_param: usize,
    seed: u64,
) -> Result<GradReport, GradCheckError>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    check(&f, params, eps, tol, Some((per_param, seed)))
}

fn check<F>(
    f: &F,
    params: &[Tensor<f64>],
    eps: f64,
    tol: f64,
    sampling: Option<(usize, u64)>,
) -> Result<GradReport, GradCheckError>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let (_, graph, out, vars) = evaluate(f, params)?;
    let grads = graph.backward(out);
    drop(graph);

    let mut rng = sampling.map(|(_, seed)| ChaCha8Rng::seed_from_u64(seed));
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut report = GradReport {
        max_abs_err: 0.0,
        max_rel_err: 0.0,
        per_parameter: Vec::with_capacity(params.len()),
        tol,
    };
    for (pi, p) in params.iter().enumerate() {
        let analytic: Vec<f64> = match grads.get(vars[pi]) {
            Some(g) => g.to_vec(),
            None => alloc::vec![0.0; p.len()],
        };
        if let Some(entry) = analytic.iter().position(|x| !x.is_finite()) {
            return Err(GradCheckError::NonFiniteGradient {
                which: "analytic",
                param: pi,
                entry,
            });
        }
        let entries: Vec<usize> = match (&mut rng, sampling) {
            (Some(r), Some((cap, _))) if cap < p.len() => {
                let mut e = sample(r, p.len(), cap).into_vec();
                e.sort_unstable();
                e
            }
            _ => (0..p.len()).collect(),
        };
        let mut stats = ParamGradError {
            param: pi,
            checked: entries.len(),
            max_abs_err: 0.0,
            max_rel_err: 0.0,
            worst_entry: 0,
        };
        for &e in &entries {
            let orig = p.data()[e];
            work[pi].data_mut()[e] = orig + eps;
            let plus = evaluate(f, &work)?.0;
            work[pi].data_mut()[e] = orig - eps;
            let minus = evaluate(f, &work)?.0;
            work[pi].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            if !numeric.is_finite() {
                return Err(GradCheckError::NonFiniteGradient {
                    which: "numeric",
                    param: pi,
                    entry: e,
                });
            }
            let a = analytic[e];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(REL_FLOOR);
            stats.max_abs_err = stats.max_abs_err.max(abs);
            if rel > stats.max_rel_err {
                stats.max_rel_err = rel;
                stats.worst_entry = e;
            }
        }
        report.max_abs_err = report.max_abs_err.max(stats.max_abs_err);
        report.max_rel_err = report.max_rel_err.max(stats.max_rel_err);
        report.per_parameter.push(stats);
    }
    Ok(report)
}
