//! Central-finite-difference gradient verification.

use super::graph::{Graph, GradMode, NodeId};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Compares analytic gradients of `f` against central finite differences at
/// `point`, returning the maximum relative error
/// `|analytic − numeric| / (|analytic| + |numeric| + 1e-12)` over all
/// parameter elements.
///
/// `f` builds a scalar loss from leaf nodes bound to the point tensors, and
/// is re-invoked on perturbed points, so it must be a pure function of them.
/// A parameter the loss does not depend on counts as having zero gradient.
pub fn grad_check<F>(f: F, point: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    if h <= 0.0 {
        return Err(Error::InvalidData(format!("step h must be positive, got {h}")));
    }

    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let leafs: Vec<NodeId> = tensors.iter().map(|t| g.leaf(t.clone())).collect();
        let loss = f(&mut g, &leafs)?;
        if !g.value(loss).is_scalar() {
            return Err(Error::NonScalarLoss(g.value(loss).shape().to_vec()));
        }
        let v = g.value(loss).item();
        if !v.is_finite() {
            return Err(Error::NonFinite("grad_check loss".into()));
        }
        Ok(v)
    };

    // Analytic gradients at the point.
    let mut g = Graph::new();
    let leafs: Vec<NodeId> = point.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = f(&mut g, &leafs)?;
    let mut analytic: Vec<Tensor> = Vec::with_capacity(point.len());
    for (i, leaf) in leafs.iter().enumerate() {
        match g.backward(loss, &[*leaf], GradMode::First) {
            Ok(grads) => analytic.push(g.value(grads[0]).clone()),
            Err(Error::UnreachableNode(_)) => analytic.push(Tensor::zeros(point[i].shape().to_vec())),
            Err(e) => return Err(e),
        }
    }

    let mut max_err: f64 = 0.0;
    let mut perturbed: Vec<Tensor> = point.to_vec();
    for (pi, tensor) in point.iter().enumerate() {
        for ei in 0..tensor.numel() {
            let orig = tensor.data()[ei];
            perturbed[pi].data_mut()[ei] = orig + h;
            let plus = eval(&perturbed)?;
            perturbed[pi].data_mut()[ei] = orig - h;
            let minus = eval(&perturbed)?;
            perturbed[pi].data_mut()[ei] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[pi].data()[ei];
            let err = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
            max_err = max_err.max(err);
        }
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact_up_to_roundoff() {
        let point = vec![Tensor::new(vec![3], vec![0.7, -1.3, 2.1]).unwrap()];
        let err = grad_check(
            |g, p| {
                let sq = g.mul(p[0], p[0])?;
                Ok(g.reduce_sum(sq))
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "error {err}");
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let point = vec![Tensor::scalar(5.0)];
        let err = grad_check(|g, _| Ok(g.leaf(Tensor::scalar(7.0))), &point, 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn rejects_nonpositive_step() {
        let point = vec![Tensor::scalar(1.0)];
        assert!(grad_check(|g, p| Ok(g.scale(p[0], 2.0)), &point, 0.0).is_err());
    }
}
