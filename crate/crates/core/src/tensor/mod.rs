//! Dense tensors with reverse-mode automatic differentiation.
//!
//! Backward passes are recorded into the same [`Graph`] as the forward pass,
//! using the same primitives, so gradients are differentiable values. This
//! is what second-order objectives such as gradient-norm penalties need.

mod array;
mod backward;
mod error;
pub mod gradcheck;
mod graph;
mod op;
mod real;

pub use array::Tensor;
pub use error::TensorError;
pub use graph::{Gradients, Graph, Var};
pub use op::{Axis, OpKind, SteKind};
pub use real::Real;

pub(crate) use op::{log_sum_exp, ternarize_values};

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn evaluate_examples() {
        let g = Graph::<f64>::new();
        let x = g.constant(t(&[3], &[1.0, 2.0, 3.0]));
        assert_eq!(g.evaluate(x.sum().unwrap()).item(), 6.0);

        let eye = g.constant(t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
        let a_data = [0.3, -1.2, 2.0, 4.0, 0.5, -0.25, 1.5, 7.0, -3.0];
        let a = g.constant(t(&[3, 3], &a_data));
        assert_eq!(g.evaluate(eye.matmul(a).unwrap()).data(), &a_data);

        let z = g.constant(t(&[2], &[0.0, 0.0]));
        assert_eq!(g.evaluate(z.softmax().unwrap()).data(), &[0.5, 0.5]);
    }

    #[test]
    fn shape_error_names_op() {
        let g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = a.matmul(b).unwrap_err();
        assert!(matches!(err, TensorError::ShapeMismatch { op: OpKind::MatMul, .. }));
        assert!(err.to_string().starts_with("matmul"));
        let c = g.constant(Tensor::zeros(&[4]));
        let err = a.add(c).unwrap_err();
        assert!(matches!(err, TensorError::ShapeMismatch { op: OpKind::Add, .. }));
    }

    #[test]
    fn backward_examples() {
        let g = Graph::<f64>::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let f = x.mul(x).unwrap().sum().unwrap();
        let grads = g.backward(f, &[x]).unwrap();
        assert_eq!(grads.value(0).data(), &[2.0, 4.0]);

        let c = g.param(t(&[], &[3.0]));
        let konst = c.scale(2.0).unwrap();
        let grads = g.backward(konst, &[x]).unwrap();
        assert_eq!(grads.value(0).data(), &[0.0, 0.0]);
        assert!(grads.is_unreachable(0));
    }

    #[test]
    fn backward_contract_errors() {
        let g = Graph::<f64>::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let y = x.scale(3.0).unwrap();
        assert!(matches!(
            g.backward(y, &[x]),
            Err(TensorError::NonScalarRoot(_))
        ));
        let k = g.constant(t(&[2], &[1.0, 2.0]));
        let f = x.mul(k).unwrap().sum().unwrap();
        assert!(matches!(
            g.backward(f, &[k]),
            Err(TensorError::NotDifferentiable(_))
        ));
    }

    #[test]
    fn grad_of_grad_closed_form() {
        // f = Σx², ‖∇f‖² = 4Σx², derivative 8x.
        let g = Graph::<f64>::new();
        let x = g.param(t(&[2], &[1.0, -1.0]));
        let f = x.powf(2.0).unwrap().sum().unwrap();
        let gg = g.grad_of_grad(f, x, &[x]).unwrap();
        assert_eq!(gg.value(0).data(), &[8.0, -8.0]);
    }

    #[test]
    fn grad_of_grad_bias_independent() {
        // f = wᵀx + b: ∇_x f = w does not depend on b.
        let g = Graph::<f64>::new();
        let x = g.param(t(&[3], &[0.5, -1.0, 2.0]));
        let w = g.param(t(&[3], &[1.0, 2.0, 3.0]));
        let b = g.param(t(&[], &[0.7]));
        let f = x.mul(w).unwrap().sum().unwrap().add(b).unwrap();
        let gg = g.grad_of_grad(f, x, &[b, w]).unwrap();
        assert_eq!(gg.value(0).data(), &[0.0]);
        assert!(gg.is_unreachable(0));
        // ‖w‖² differentiated wrt w is 2w.
        assert_eq!(gg.value(1).data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn missing_second_derivative_is_an_error() {
        let g = Graph::<f64>::new();
        let x = g.param(t(&[2], &[0.3, -0.4]));
        let y = x
            .custom_unary("cube", |v| v * v * v, |v| 3.0 * v * v)
            .unwrap()
            .sum()
            .unwrap();
        // First order works.
        let d = g.backward(y, &[x]).unwrap();
        assert!((d.value(0).data()[0] - 0.27).abs() < 1e-12);
        // Second order does not, and says why.
        let err = g.grad_of_grad(y, x, &[x]).unwrap_err();
        assert_eq!(err, TensorError::UnsupportedDerivative("cube'".into()));
    }

    #[test]
    fn straight_through_passes_gradient_unchanged() {
        let g = Graph::<f64>::new();
        let x = g.param(t(&[4], &[0.4, -1.6, 2.5, 0.1]));
        let w = g.constant(t(&[4], &[1.5, -2.0, 0.25, 3.0]));
        let q = x.ste_round().unwrap();
        assert_eq!(q.value().data(), &[0.0, -2.0, 2.0, 0.0]);
        let f = q.mul(w).unwrap().sum().unwrap();
        let d = g.backward(f, &[x]).unwrap();
        assert_eq!(d.value(0).data(), w.value().data());

        let tq = x.ste_ternary().unwrap();
        let f = tq.mul(w).unwrap().sum().unwrap();
        let d = g.backward(f, &[x]).unwrap();
        assert_eq!(d.value(0).data(), w.value().data());
    }

    #[test]
    fn recompute_is_bit_identical() {
        let g = Graph::<f32>::new();
        let a = g.param(Tensor::from_fn(&[4, 6], |i| (i as f32 * 0.37).sin()));
        let b = g.param(Tensor::from_fn(&[6, 3], |i| (i as f32 * 0.91).cos()));
        let y = a
            .matmul(b)
            .unwrap()
            .softmax()
            .unwrap()
            .rms_norm(1e-6)
            .unwrap()
            .fro_norm_sq()
            .unwrap();
        let grads = g.backward(y, &[a, b]).unwrap();
        let before = (g.evaluate(y), grads.value(0), grads.value(1));
        g.recompute().unwrap();
        assert!(before.0.bit_eq(&g.evaluate(y)));
        assert!(before.1.bit_eq(&grads.value(0)));
        assert!(before.2.bit_eq(&grads.value(1)));
    }

    #[test]
    fn set_leaf_then_recompute() {
        let g = Graph::<f64>::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let y = x.mul(x).unwrap().sum().unwrap();
        g.set_leaf(x, t(&[2], &[3.0, 4.0])).unwrap();
        g.recompute().unwrap();
        assert_eq!(y.item(), 25.0);
        assert!(matches!(g.set_leaf(y, Tensor::scalar(1.0)), Err(TensorError::NotALeaf(_))));
    }

    #[test]
    fn finite_diff_oracle_basics() {
        let d = gradcheck::finite_diff_oracle(|x| x[0] * x[0], &[3.0], 1e-6);
        assert!((d[0] - 6.0).abs() < 1e-6);
        let d = gradcheck::finite_diff_oracle(|x| x[0].exp(), &[0.0], 1e-6);
        assert!((d[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_ignores_zero_weight_rows() {
        let g = Graph::<f64>::new();
        let logits = g.param(t(&[2, 3], &[1.0, 2.0, 3.0, 0.0, 0.0, 0.0]));
        let ce = logits.cross_entropy_weighted(&[2, usize::MAX], &[1.0, 0.0]).unwrap();
        let expected = log_sum_exp(&[1.0, 2.0, 3.0]) - 3.0;
        assert!((ce.item() - expected).abs() < 1e-14);
        let d = g.backward(ce, &[logits]).unwrap().value(0);
        assert_eq!(&d.data()[3..], &[0.0, 0.0, 0.0]);
    }
}
