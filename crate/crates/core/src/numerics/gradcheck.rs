use alloc::vec::Vec;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

/// Denominator floor for relative errors, so coordinates with vanishing
/// gradients are judged on absolute error instead.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub checked: usize,
    /// Parameter and flat coordinate of the worst disagreement.
    pub worst: (usize, usize),
}

/// Compares [`Graph::backward`] with central differences
/// `(f(p + eps) - f(p - eps)) / (2 eps)`.
///
/// `f` receives a fresh graph and one tracked leaf per entry of `params` and
/// must return a scalar. At most `per_param` coordinates of each parameter
/// are probed, chosen with `seed`.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64, per_param: usize, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::param("eps", "must be positive"));
    }
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.param(p.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get_or_zeros(&g, v)).collect();

    let mut rng = SplitMix64::new(seed);
    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        checked: 0,
        worst: (0, 0),
    };
    for (pi, p) in params.iter().enumerate() {
        let coords: Vec<usize> = if p.len() <= per_param {
            (0..p.len()).collect()
        } else {
            (0..per_param).map(|_| rng.below(p.len())).collect()
        };
        for c in coords {
            let orig = p.data()[c];
            work[pi].data_mut()[c] = orig + eps;
            let up = eval(&work)?;
            work[pi].data_mut()[c] = orig - eps;
            let down = eval(&work)?;
            work[pi].data_mut()[c] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[pi].data()[c];
            let denom = a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
            let rel = (a - numeric).abs() / denom;
            report.checked += 1;
            if rel > report.max_relative_error || !rel.is_finite() {
                report.max_relative_error = rel;
                report.worst = (pi, c);
            }
        }
    }
    Ok(report)
}
