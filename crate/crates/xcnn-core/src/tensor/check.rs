//! Finite-difference gradient checking.
//!
//! The checker is deliberately independent of the reverse pass: it only ever
//! calls the *forward* evaluation of the supplied closure, perturbing one
//! component at a time with central differences
//!
//!   numeric_i = (f(x + h e_i) - f(x - h e_i)) / (2 h)
//!
//! and reports the worst relative disagreement with the analytic gradient,
//!
//!   max_i |analytic_i - numeric_i| / max(|analytic_i|, |numeric_i|, floor)
//!
//! where `floor` guards the quotient when both sides sit at the mode's
//! finite-difference noise level ([`Element::CHECK_FLOOR`]).

use rand::seq::SliceRandom;

use crate::rng;

use super::{Element, GradTape, NodeId, Tensor, TensorError};

/// A scalar-valued differentiable program over one input tensor.
pub trait ScalarFn<E: Element>: Fn(&mut GradTape<E>, NodeId) -> Result<NodeId, TensorError> {}
impl<E: Element, F: Fn(&mut GradTape<E>, NodeId) -> Result<NodeId, TensorError>> ScalarFn<E> for F {}

/// Maximum relative error between the analytic gradient of `f` at `x` and a
/// central finite difference with the given step. Checks every component.
pub fn gradient_check<E: Element>(
    f: impl ScalarFn<E>,
    x: &Tensor<E>,
    step: f64,
) -> Result<f64, TensorError> {
    gradient_check_many(
        |tape, ids| f(tape, ids[0]),
        std::slice::from_ref(x),
        step,
        None,
        0,
    )
}

/// Multi-input variant of [`gradient_check`].
///
/// When `max_components` is set and the parameter vectors hold more entries
/// than that, a deterministic sample of components (drawn from `seed`) is
/// checked instead of all of them; the analytic gradient is still computed
/// for everything in one reverse pass.
pub fn gradient_check_many<E: Element>(
    f: impl Fn(&mut GradTape<E>, &[NodeId]) -> Result<NodeId, TensorError>,
    params: &[Tensor<E>],
    step: f64,
    max_components: Option<usize>,
    seed: u64,
) -> Result<f64, TensorError> {
    // Analytic gradients, one reverse pass.
    let mut tape = GradTape::new();
    let ids: Vec<NodeId> = params
        .iter()
        .map(|p| tape.leaf(p.clone().with_grad(true)))
        .collect();
    let root = f(&mut tape, &ids)?;
    if tape.value(root).numel() != 1 {
        return Err(TensorError::NonScalarRoot(
            tape.value(root).shape().to_vec(),
        ));
    }
    tape.backward(root)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(params)
        .map(|(&id, p)| {
            tape.grad(id)
                .map(|g| g.iter().map(|v| v.to_f64()).collect())
                .unwrap_or_else(|| vec![0.0; p.numel()])
        })
        .collect();
    drop(tape);

    // Which (param, component) pairs to probe.
    let mut components: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(pi, p)| (0..p.numel()).map(move |ci| (pi, ci)))
        .collect();
    if let Some(limit) = max_components {
        if components.len() > limit {
            components.shuffle(&mut rng::rng(seed, &[0x9c]));
            components.truncate(limit);
        }
    }

    let eval = |probe: &[Tensor<E>]| -> Result<f64, TensorError> {
        let mut tape = GradTape::new();
        let ids: Vec<NodeId> = probe.iter().map(|p| tape.leaf(p.clone())).collect();
        let root = f(&mut tape, &ids)?;
        Ok(tape.value(root).item().to_f64())
    };

    let mut probe: Vec<Tensor<E>> = params.to_vec();
    for p in probe.iter_mut() {
        p.requires_grad = false;
    }
    let mut worst = 0.0f64;
    for (pi, ci) in components {
        let original = probe[pi].data()[ci];
        probe[pi].data_mut()[ci] = E::from_f64(original.to_f64() + step);
        let up = eval(&probe)?;
        probe[pi].data_mut()[ci] = E::from_f64(original.to_f64() - step);
        let down = eval(&probe)?;
        probe[pi].data_mut()[ci] = original;

        let numeric = (up - down) / (2.0 * step);
        let a = analytic[pi][ci];
        let denom = a.abs().max(numeric.abs()).max(E::CHECK_FLOOR);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_exact_gradient() {
        let mut rng = rng::rng(11, &[1]);
        let x = Tensor::<f64>::uniform(vec![3, 4], -1.0, 1.0, &mut rng);
        let err = gradient_check(|t, x| Ok(t.sum_all(x)), &x, 1e-5).unwrap();
        assert!(err < 1e-9, "sum gradient err {err}");
    }

    #[test]
    fn sum_of_squares_checks_to_1e6_wide() {
        let mut rng = rng::rng(12, &[2]);
        let x = Tensor::<f64>::uniform(vec![5, 5], -2.0, 2.0, &mut rng);
        let f = |t: &mut GradTape<f64>, x: NodeId| {
            let sq = t.mul(x, x)?;
            Ok(t.sum_all(sq))
        };
        let err = gradient_check(f, &x, 1e-4).unwrap();
        assert!(err < 1e-6, "sum-of-squares err {err}");
    }

    #[test]
    fn product_rule_survives_finite_differences() {
        // loss = sum(a * b) over two inputs checked jointly
        let mut rng = rng::rng(13, &[3]);
        let a = Tensor::<f64>::uniform(vec![6], -1.0, 1.0, &mut rng);
        let b = Tensor::<f64>::uniform(vec![6], 0.5, 1.5, &mut rng);
        let f = |t: &mut GradTape<f64>, ids: &[NodeId]| {
            let p = t.mul(ids[0], ids[1])?;
            Ok(t.sum_all(p))
        };
        let err = gradient_check_many(f, &[a, b], 1e-5, None, 0).unwrap();
        assert!(err < 1e-8, "product err {err}");
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = rng::rng(14, &[4]);
        let a = Tensor::<f64>::uniform(vec![4, 5], -1.0, 1.0, &mut rng);
        let b = Tensor::<f64>::uniform(vec![5, 3], -1.0, 1.0, &mut rng);
        let f = |t: &mut GradTape<f64>, ids: &[NodeId]| {
            let y = t.matmul(ids[0], ids[1])?;
            let sq = t.mul(y, y)?;
            Ok(t.sum_all(sq))
        };
        let err = gradient_check_many(f, &[a, b], 1e-5, None, 0).unwrap();
        assert!(err < 1e-6, "matmul err {err}");
    }

    #[test]
    fn composite_conv_graph_checks_end_to_end() {
        // conv -> relu -> pool -> linear -> softmax-CE on a 1x8x8 input
        let mut r = rng::rng(15, &[5]);
        let x = Tensor::<f64>::uniform(vec![1, 1, 8, 8], 0.1, 1.0, &mut r);
        let w = Tensor::<f64>::uniform(vec![2, 1, 3, 3], -0.5, 0.5, &mut r);
        let b = Tensor::<f64>::uniform(vec![2], -0.1, 0.1, &mut r);
        let lw = Tensor::<f64>::uniform(vec![3, 2 * 4 * 4], -0.3, 0.3, &mut r);
        let lb = Tensor::<f64>::uniform(vec![3], -0.1, 0.1, &mut r);
        let f = |t: &mut GradTape<f64>, ids: &[NodeId]| {
            let y = t.conv2d(ids[0], ids[1], ids[2], 1, 1)?;
            let y = t.relu(y);
            let y = t.maxpool2x2(y)?;
            let y = t.reshape(y, vec![1, 2 * 4 * 4])?;
            let y = t.linear(y, ids[3], ids[4])?;
            t.weighted_cross_entropy(y, &[1], &[1.0; 3])
        };
        let err = gradient_check_many(f, &[x, w, b, lw, lb], 1e-5, None, 0).unwrap();
        assert!(err < 1e-4, "composite graph err {err}");
    }

    #[test]
    fn component_sampling_is_deterministic() {
        let mut rng = rng::rng(16, &[6]);
        let x = Tensor::<f64>::uniform(vec![32], -1.0, 1.0, &mut rng);
        let f = |t: &mut GradTape<f64>, ids: &[NodeId]| {
            let sq = t.mul(ids[0], ids[0])?;
            Ok(t.sum_all(sq))
        };
        let a = gradient_check_many(f, std::slice::from_ref(&x), 1e-5, Some(8), 3).unwrap();
        let b = gradient_check_many(f, std::slice::from_ref(&x), 1e-5, Some(8), 3).unwrap();
        assert_eq!(a, b);
    }
}
