//! Central-difference verification of analytic gradients.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Outcome of [`grad_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// `(parameter, flat index)` of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub entries_checked: usize,
    /// Closest approach to a non-differentiable point at the base
    /// parameters, as recorded by the graph.
    pub kink_distance: f64,
}

/// `|a - n| / max(1e-8, |a| + |n|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares the reverse-mode gradient of `function` with central
/// differences over every entry of every tensor in `params`.
///
/// `function` receives a fresh graph and one leaf per parameter, and
/// must return a one-element node. It is evaluated `1 + 2 * entries`
/// times, so keep the parameter count small.
pub fn grad_check<F>(function: F, params: &mut [Tensor], epsilon: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!("epsilon must be > 0, got {epsilon}")));
    }

    let eval = |params: &[Tensor]| -> Result<(Graph, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
        let root = function(&mut g, &vars)?;
        if g.value(root).len() != 1 {
            return Err(Error::NonScalarRoot(g.shape(root).to_vec()));
        }
        Ok((g, vars, root))
    };

    let (mut g, vars, root) = eval(params)?;
    let base = g.value(root).item();
    if !base.is_finite() {
        return Err(Error::NonFinite(format!("function value {base} at the base point")));
    }
    g.backward(root)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| g.grad(v).map(<[f64]>::to_vec).unwrap_or_default())
        .collect();
    let kink_distance = g.kink_distance();
    drop(g);

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        entries_checked: 0,
        kink_distance,
    };

    for p in 0..params.len() {
        for i in 0..params[p].len() {
            let original = params[p].data()[i];
            params[p].data_mut()[i] = original + epsilon;
            let plus = eval(params).map(|(g, _, r)| g.value(r).item());
            params[p].data_mut()[i] = original - epsilon;
            let minus = eval(params).map(|(g, _, r)| g.value(r).item());
            params[p].data_mut()[i] = original;
            let (plus, minus) = (plus?, minus?);
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!(
                    "function value at perturbed parameter {p}, entry {i}"
                )));
            }
            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = analytic[p][i];
            let err = relative_error(a, numeric);
            report.entries_checked += 1;
            if err > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = err;
                report.worst = Some((p, i));
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_self_matches_closed_form() {
        let mut params = vec![Tensor::vector(vec![1.0, 2.0, 3.0])];
        let r = grad_check(|g, v| g.dot(v[0], v[0]), &mut params, 1e-5).unwrap();
        assert!(r.max_relative_error < 1e-6, "{r:?}");
        assert_eq!(r.entries_checked, 3);
    }

    #[test]
    fn constant_function_has_zero_error() {
        let mut params = vec![Tensor::vector(vec![0.5, -1.0])];
        let r = grad_check(|g, _| Ok(g.constant(Tensor::scalar(4.2))), &mut params, 1e-5).unwrap();
        assert_eq!(r.max_relative_error, 0.0);
    }

    #[test]
    fn non_finite_perturbation_names_entry() {
        // sqrt at exactly zero: the minus side is NaN
        let mut params = vec![Tensor::vector(vec![1.0, 0.0])];
        let err = grad_check(
            |g, v| {
                let s = g.sqrt(v[0])?;
                g.sum(s)
            },
            &mut params,
            1e-5,
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("parameter 0, entry 1"), "{msg}");
    }

    #[test]
    fn rejects_bad_epsilon() {
        let mut params = vec![Tensor::scalar(1.0)];
        assert!(grad_check(|g, v| g.sum(v[0]), &mut params, 0.0).is_err());
    }
}
