//! Every primitive's derivative rule against central finite differences.

use quantlab_core::tensor::gradcheck::{finite_diff_oracle, rel_err_norm};
use quantlab_core::tensor::{Axis, Graph, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: u64 = 20;
const TOL: f64 = 1e-5;
const STEP: f64 = 1e-6;

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

type Build = dyn for<'g> Fn(&'g Graph<f64>, Var<'g, f64>) -> Result<Var<'g, f64>, TensorError>;

/// Checks d/dx Σ(op(x) ⊙ R) for a fixed random projection R.
fn check(name: &str, shape: &[usize], lo: f64, hi: f64, build: &Build) {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed * 7919 + 1);
        let n: usize = shape.iter().product();
        let x0 = uniform(&mut rng, n, lo, hi);
        let out_shape = {
            let g = Graph::<f64>::new();
            let x = g.param(Tensor::from_f64(shape, &x0).unwrap());
            build(&g, x).unwrap().shape()
        };
        let proj = uniform(&mut rng, out_shape.iter().product(), -1.0, 1.0);
        let eval = |xv: &[f64]| -> (f64, Vec<f64>) {
            let g = Graph::<f64>::new();
            let x = g.param(Tensor::from_f64(shape, xv).unwrap());
            let y = build(&g, x).unwrap();
            let r = g.constant(Tensor::from_f64(&out_shape, &proj).unwrap());
            let f = y.mul(r).unwrap().sum().unwrap();
            let d = g.backward(f, &[x]).unwrap();
            (f.item(), d.value(0).to_f64_vec())
        };
        let (_, analytic) = eval(&x0);
        let numeric = finite_diff_oracle(|xv| eval(xv).0, &x0, STEP);
        let err = rel_err_norm(&analytic, &numeric);
        assert!(err < TOL, "{name} seed {seed}: rel err {err:e}");
    }
}

#[test]
fn matmul_both_operands() {
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let a_shape = if ta { [4, 3] } else { [3, 4] };
        let b_shape = if tb { [5, 4] } else { [4, 5] };
        let bconst: Vec<f64> = (0..20).map(|i| ((i * 37 % 11) as f64 - 5.0) / 4.0).collect();
        check("matmul lhs", &a_shape, -2.0, 2.0, &move |g, x| {
            let b = g.constant(Tensor::from_f64(&b_shape, &bconst).unwrap());
            x.matmul_t(b, ta, tb)
        });
        let aconst: Vec<f64> = (0..12).map(|i| ((i * 53 % 7) as f64 - 3.0) / 2.0).collect();
        check("matmul rhs", &b_shape, -2.0, 2.0, &move |g, x| {
            let a = g.constant(Tensor::from_f64(&a_shape, &aconst).unwrap());
            a.matmul_t(x, ta, tb)
        });
    }
}

#[test]
fn broadcast_binary_ops() {
    let full: Vec<f64> = (0..12).map(|i| (i as f64 * 0.41).sin() * 1.5).collect();
    for (bshape, label) in [(vec![3, 4], "same"), (vec![], "scalar"), (vec![4], "row"), (vec![3, 1], "col")] {
        let f1 = full.clone();
        let s = bshape.clone();
        check(&format!("add rhs {label}"), &s, -2.0, 2.0, &move |g, x| {
            g.constant(Tensor::from_f64(&[3, 4], &f1).unwrap()).add(x)
        });
        let f2 = full.clone();
        check(&format!("sub rhs {label}"), &s, -2.0, 2.0, &move |g, x| {
            g.constant(Tensor::from_f64(&[3, 4], &f2).unwrap()).sub(x)
        });
        let f3 = full.clone();
        check(&format!("mul rhs {label}"), &s, -2.0, 2.0, &move |g, x| {
            g.constant(Tensor::from_f64(&[3, 4], &f3).unwrap()).mul(x)
        });
        let b: Vec<f64> = (0..s.iter().product::<usize>()).map(|i| 0.3 + i as f64 * 0.2).collect();
        let s2 = s.clone();
        check(&format!("mul lhs {label}"), &[3, 4], -2.0, 2.0, &move |g, x| {
            x.mul(g.constant(Tensor::from_f64(&s2, &b).unwrap()))
        });
    }
}

#[test]
fn scalar_affine_and_reductions() {
    check("scale", &[3, 4], -2.0, 2.0, &|_, x| x.scale(-1.7));
    check("add_scalar", &[3, 4], -2.0, 2.0, &|_, x| x.add_scalar(0.3));
    check("sum", &[3, 4], -2.0, 2.0, &|_, x| x.sum());
    check("mean", &[3, 4], -2.0, 2.0, &|_, x| x.mean());
    check("sum_last", &[3, 4], -2.0, 2.0, &|_, x| x.sum_last());
    check("sum_rows", &[3, 4], -2.0, 2.0, &|_, x| x.sum_rows());
    check("expand row", &[4], -2.0, 2.0, &|_, x| x.expand(&[3, 4]));
    check("expand col", &[3, 1], -2.0, 2.0, &|_, x| x.expand(&[3, 4]));
    check("expand scalar", &[], -2.0, 2.0, &|_, x| x.expand(&[3, 4]));
    check("fro_norm_sq", &[3, 4], -2.0, 2.0, &|_, x| x.fro_norm_sq());
}

#[test]
fn elementwise_functions() {
    check("exp", &[3, 4], -2.0, 2.0, &|_, x| x.exp());
    check("log", &[3, 4], 0.2, 2.0, &|_, x| x.log());
    check("power 3", &[3, 4], -2.0, 2.0, &|_, x| x.powf(3.0));
    check("power -0.5", &[3, 4], 0.2, 2.0, &|_, x| x.powf(-0.5));
    check("sigmoid", &[3, 4], -2.0, 2.0, &|_, x| x.sigmoid());
    check("silu", &[3, 4], -2.0, 2.0, &|_, x| x.silu());
    // Away from the clamp boundaries the mask is locally constant.
    check("clamp", &[3, 4], -2.0, 2.0, &|g, x| {
        let shifted = x.add(g.constant(Tensor::from_fn(&[3, 4], |i| if i % 2 == 0 { 5.0 } else { 0.0 })))?;
        shifted.clamp(-2.5, 2.5)
    });
}

#[test]
fn row_normalizations() {
    check("softmax", &[3, 5], -2.0, 2.0, &|_, x| x.softmax());
    check("layer_norm", &[3, 5], -2.0, 2.0, &|_, x| x.layer_norm(1e-5));
    check("rms_norm", &[3, 5], -2.0, 2.0, &|_, x| x.rms_norm(1e-6));
}

#[test]
fn indexing_and_layout() {
    check("embedding", &[5, 3], -2.0, 2.0, &|_, x| x.embedding(&[4, 0, 4, 2]));
    check("scatter_rows", &[4, 3], -2.0, 2.0, &|_, x| x.scatter_rows(&[1, 1, 0, 3], 5));
    check("transpose", &[3, 4], -2.0, 2.0, &|_, x| x.t());
    check("reshape", &[3, 4], -2.0, 2.0, &|_, x| x.reshape(&[2, 6]));
    check("slice", &[4, 5], -2.0, 2.0, &|_, x| x.slice(1..3, 2..5));
    check("pad", &[2, 3], -2.0, 2.0, &|_, x| x.pad([4, 5], 1, 2));
    check("concat rows", &[2, 3], -2.0, 2.0, &|g, x| {
        let other = g.constant(Tensor::ones(&[1, 3]));
        g.concat(&[x, other, x], Axis::Rows)
    });
    check("concat cols", &[2, 3], -2.0, 2.0, &|g, x| {
        let other = g.constant(Tensor::ones(&[2, 2]));
        g.concat(&[other, x, x], Axis::Cols)
    });
}

#[test]
fn losses_and_similarity() {
    check("cross_entropy", &[4, 6], -2.0, 2.0, &|_, x| x.cross_entropy(&[0, 5, 3, 3]));
    check("cross_entropy weighted", &[3, 4], -2.0, 2.0, &|_, x| {
        x.cross_entropy_weighted(&[1, 0, 9], &[0.5, 0.5, 0.0])
    });
    check("cosine lhs", &[3, 4], -2.0, 2.0, &|g, x| {
        x.cosine(g.constant(Tensor::from_fn(&[3, 4], |i| (i as f64).cos())))
    });
    check("cosine rhs", &[3, 4], -2.0, 2.0, &|g, x| {
        g.constant(Tensor::from_fn(&[3, 4], |i| (i as f64).cos())).cosine(x)
    });
}

/// Second derivatives: every derivative rule is itself differentiable.
#[test]
fn second_order_through_every_rule() {
    check("d/dx sum(softmax) grad", &[3, 4], -2.0, 2.0, &|g, x| {
        let f = x.exp()?.softmax()?.layer_norm(1e-5)?.rms_norm(1e-6)?.silu()?.fro_norm_sq()?;
        let d = g.backward(f, &[x])?.get(0);
        Ok(d)
    });
    check("d/dx grad of ce + cosine", &[3, 4], -2.0, 2.0, &|g, x| {
        let w = g.constant(Tensor::from_fn(&[4, 4], |i| ((i * 13 % 7) as f64 - 3.0) / 3.0));
        let h = x.matmul(w)?.sigmoid()?;
        let f = h.cross_entropy(&[0, 3, 1])?.add(h.cosine(x)?)?;
        g.backward(f, &[x]).map(|d| d.get(0))
    });
    check("d/dx grad of gather/concat", &[4, 3], -2.0, 2.0, &|g, x| {
        let e = x.embedding(&[0, 2, 2])?;
        let c = g.concat(&[e, x.slice(1..3, 0..3)?], Axis::Rows)?;
        let f = c.t()?.powf(2.0)?.log()?.sum()?;
        g.backward(f, &[x]).map(|d| d.get(0))
    });
}

/// A single-layer model: ∂‖∇_x f‖²/∂W against finite differences of the gradient norm.
#[test]
fn grad_of_grad_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let x0 = uniform(&mut rng, 3 * 4, -2.0, 2.0);
    let w0 = uniform(&mut rng, 4 * 5, -1.0, 1.0);
    let v0 = uniform(&mut rng, 5 * 6, -1.0, 1.0);
    let targets = [1usize, 5, 2];
    let model = |g: &Graph<f64>, w: &[f64]| -> (f64, Vec<f64>) {
        let x = g.param(Tensor::from_f64(&[3, 4], &x0).unwrap());
        let wv = g.param(Tensor::from_f64(&[4, 5], w).unwrap());
        let v = g.constant(Tensor::from_f64(&[5, 6], &v0).unwrap());
        let f = x
            .matmul(wv)
            .unwrap()
            .silu()
            .unwrap()
            .rms_norm(1e-6)
            .unwrap()
            .matmul(v)
            .unwrap()
            .cross_entropy(&targets)
            .unwrap();
        let gg = g.grad_of_grad(f, x, &[wv]).unwrap();
        let gx = g.backward(f, &[x]).unwrap().value(0);
        (gx.sq_norm(), gg.value(0).to_f64_vec())
    };
    let (_, analytic) = model(&Graph::new(), &w0);
    let numeric = finite_diff_oracle(|w| model(&Graph::new(), w).0, &w0, 1e-5);
    let err = rel_err_norm(&analytic, &numeric);
    assert!(err < 1e-4, "rel err {err:e}");
}
