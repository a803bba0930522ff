//! Central finite-difference gradient checking.

use super::{Graph, Real, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input, flat index)` of the worst coordinate.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
}

/// Checks `f(x)`'s gradient w.r.t. one input. See [`grad_check_multi`].
pub fn grad_check<T, F>(f: F, x: &Tensor<T>, eps: f64) -> Result<GradCheckReport>
where
    T: Real,
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    grad_check_multi(|g, v| f(g, v[0]), std::slice::from_ref(x), eps)
}

/// Compares backward-pass gradients of the scalar `f(inputs)` against central
/// differences for every coordinate of every input. The relative error uses
/// `max(|analytic|, |numeric|, 1e-6)` as denominator.
pub fn grad_check_multi<T, F>(f: F, inputs: &[Tensor<T>], eps: f64) -> Result<GradCheckReport>
where
    T: Real,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor<T>> = vars.iter().map(|&v| g.grad_tensor(v)).collect();
    drop(g);

    let eval = |xs: &[Tensor<T>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item()?.f64())
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut work = inputs.to_vec();
    for (which, grad) in analytic.iter().enumerate() {
        for idx in 0..inputs[which].numel() {
            let orig = inputs[which].data()[idx];
            work[which].data_mut()[idx] = orig + T::lit(eps);
            let plus = eval(&work)?;
            work[which].data_mut()[idx] = orig - T::lit(eps);
            let minus = eval(&work)?;
            work[which].data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.data()[idx].f64();
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            if rel > report.max_rel_error || !rel.is_finite() {
                report = GradCheckReport {
                    max_rel_error: if rel.is_finite() { rel } else { f64::INFINITY },
                    worst: (which, idx),
                    analytic: a,
                    numeric,
                };
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_zero_error() {
        let x = Tensor::<f64>::from_fn(&[4, 3], |i| (i as f64).cos());
        let r = grad_check(|g, v| Ok(g.sum(v)), &x, 1e-3).unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // mean is fine, but a deliberately broken "gradient" via stop-grad on
        // one branch must be caught: f = x * const(x)
        let x = Tensor::<f64>::from_fn(&[3], |i| 1.0 + i as f64);
        let r = grad_check(
            |g, v| {
                let c = g.constant(g.value(v).clone());
                let y = g.mul(v, c)?;
                Ok(g.sum(y))
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(r.max_rel_error > 0.4, "{r:?}");
    }
}
