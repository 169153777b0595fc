//! Finite-difference verification of reverse-mode gradients.
//!
//! Only differentiable points are meaningful: at a kink such as `|x|` at 0
//! the central difference returns a subgradient average that need not match
//! any one-sided derivative, so callers must keep test points away from them.

use crate::error::{Error, Result};
use crate::numerics::{Graph, NodeId, Tensor};

/// Central differences of `f` at `point`, one coordinate at a time.
pub fn central_difference<F>(mut f: F, point: &Tensor<f64>, epsilon: f64) -> Result<Tensor<f64>>
where
    F: FnMut(&Tensor<f64>) -> Result<f64>,
{
    if !(epsilon > 0.0) {
        return Err(Error::Invalid(format!("epsilon must be positive, got {epsilon}")));
    }
    let mut probe = point.clone();
    let mut out = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let x0 = point.data()[i];
        probe.data_mut()[i] = x0 + epsilon;
        let up = f(&probe)?;
        probe.data_mut()[i] = x0 - epsilon;
        let down = f(&probe)?;
        probe.data_mut()[i] = x0;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!("function value near coordinate {i}")));
        }
        out.push((up - down) / (2.0 * epsilon));
    }
    Tensor::new(point.shape().to_vec(), out)
}

/// Largest `|autodiff - central difference| / max(1, |central difference|)`
/// over all coordinates of `point`.
///
/// `f` returns the function value together with its analytic gradient.
pub fn grad_check<F>(mut f: F, point: &Tensor<f64>, epsilon: f64) -> Result<f64>
where
    F: FnMut(&Tensor<f64>) -> Result<(f64, Tensor<f64>)>,
{
    let (value, analytic) = f(point)?;
    if !value.is_finite() {
        return Err(Error::NonFinite("function value at the check point".into()));
    }
    if analytic.shape() != point.shape() {
        return Err(Error::Invalid(format!(
            "gradient shape {:?} differs from point shape {:?}",
            analytic.shape(),
            point.shape()
        )));
    }
    let numeric = central_difference(|p| f(p).map(|(v, _)| v), point, epsilon)?;
    let worst = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / n.abs().max(1.0))
        .fold(0.0, f64::max);
    Ok(worst)
}

/// Adapt a graph into the closure shape `grad_check` expects: bind `leaf`,
/// evaluate, and differentiate element `component` of `output`.
pub fn graph_function<'g>(
    graph: &'g mut Graph<f64>,
    leaf: &str,
    output: NodeId,
    component: usize,
) -> Result<impl FnMut(&Tensor<f64>) -> Result<(f64, Tensor<f64>)> + 'g> {
    let leaf_id = graph
        .leaf_id(leaf)
        .ok_or_else(|| Error::UnknownLeaf(leaf.to_string()))?;
    Ok(move |x: &Tensor<f64>| {
        graph.bind_id(leaf_id, x.data())?;
        graph.evaluate()?;
        let value = graph.value_slice(output)?[component];
        graph.backward_from(output, Some(component))?;
        let grad = graph
            .grad(leaf_id)
            .unwrap_or_else(|| Tensor::zeros(x.shape()));
        Ok((value, grad))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_is_exact_up_to_rounding() {
        let err = grad_check(
            |x| {
                let v = x.data()[0];
                Ok((v * v, Tensor::scalar(2.0 * v)))
            },
            &Tensor::scalar(3.0),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let err = grad_check(
            |x| {
                let v = x.data()[0];
                Ok((v * v, Tensor::scalar(v)))
            },
            &Tensor::scalar(3.0),
            1e-5,
        )
        .unwrap();
        assert!(err > 0.5);
    }

    #[test]
    fn rejects_nonfinite_values_and_bad_epsilon() {
        let r = grad_check(|_| Ok((f64::NAN, Tensor::scalar(0.0))), &Tensor::scalar(1.0), 1e-5);
        assert!(matches!(r, Err(Error::NonFinite(_))));
        let r = grad_check(|_| Ok((1.0, Tensor::scalar(0.0))), &Tensor::scalar(1.0), 0.0);
        assert!(r.is_err());
    }

    #[test]
    fn abs_at_kink_reports_subgradient_average() {
        // |x| at 0: the symmetric difference is 0 whatever one-sided slope is claimed
        let fd = central_difference(|x| Ok(x.data()[0].abs()), &Tensor::scalar(0.0), 1e-5).unwrap();
        assert_eq!(fd.data()[0], 0.0);
    }
}
