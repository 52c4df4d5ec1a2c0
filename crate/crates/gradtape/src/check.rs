//! Central-difference verification of analytic gradients.

use crate::error::{GradError, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::Tensor;

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

fn eval_scalar<F>(f: &F, point: &Tensor) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let x = g.constant(point.clone());
    let y = f(&mut g, x)?;
    Ok(g.value(y).item())
}

/// Maximum over coordinates of `|analytic − numeric| / max(1e-8, |analytic| + |numeric|)`
/// for a scalar function of one tensor.
pub fn grad_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(GradError::Invalid(format!("step must be positive, got {step}")));
    }
    let mut g = Graph::new();
    let x = g.input(point.clone());
    let y = f(&mut g, x)?;
    if !g.value(y).item().is_finite() {
        return Err(GradError::NonFiniteValue(0));
    }
    let analytic = g
        .backward(y)?
        .wrt(x)
        .unwrap_or_else(|| Tensor::zeros(point.shape()));

    let mut worst: f64 = 0.0;
    let mut probe = point.clone();
    for i in 0..point.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig - step;
        let down = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(GradError::NonFiniteValue(i));
        }
        let numeric = (up - down) / (2.0 * step);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Same measure over every trainable scalar of a parameter store.
pub fn grad_check_params<F>(store: &ParamStore, f: F, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(GradError::Invalid(format!("step must be positive, got {step}")));
    }
    let mut g = Graph::new();
    let y = f(&mut g, store)?;
    if !g.value(y).item().is_finite() {
        return Err(GradError::NonFiniteValue(0));
    }
    let analytic = g.backward(y)?.for_store(store);

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let y = f(&mut g, s)?;
        Ok(g.value(y).item())
    };
    let mut probe = store.clone();
    let mut worst: f64 = 0.0;
    let mut coord = 0;
    for id in store.ids() {
        if !store.is_trainable(id) {
            coord += store.get(id).len();
            continue;
        }
        for i in 0..store.get(id).len() {
            let orig = store.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = orig + step;
            let up = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig - step;
            let down = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(GradError::NonFiniteValue(coord));
            }
            let numeric = (up - down) / (2.0 * step);
            worst = worst.max(relative_error(analytic[id.0].data()[i], numeric));
            coord += 1;
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_is_exact() {
        let err = grad_check(
            |g, x| {
                let y = g.mul(x, x)?;
                Ok(g.sum(y))
            },
            &Tensor::vector(vec![3.0]),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn rejects_non_positive_step() {
        let r = grad_check(|g, x| Ok(g.sum(x)), &Tensor::vector(vec![1.0]), 0.0);
        assert!(matches!(r, Err(GradError::Invalid(_))));
    }

    #[test]
    fn rejects_non_finite_values() {
        let r = grad_check(
            |g, x| {
                let e = g.exp(x);
                Ok(g.sum(e))
            },
            &Tensor::vector(vec![1e6]),
            1e-6,
        );
        assert!(matches!(r, Err(GradError::NonFiniteValue(_))));
    }
}
