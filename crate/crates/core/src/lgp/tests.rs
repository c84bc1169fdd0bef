use super::*;
use crate::model::ModelConfig;
use crate::quant::fake_quantize;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn model(seed: u64) -> Model<f64> {
    let cfg = ModelConfig {
        n_layer: 2,
        n_head: 2,
        d_hidden: 16,
        d_inter: 32,
        vocab_size: 256,
        max_seq_len: 16,
        use_rms_norm_before_linear: false,
    };
    Model::build(cfg, seed).unwrap()
}

fn batches(seed: u64, n: usize) -> Vec<TokenBatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let seqs: Vec<Vec<usize>> = (0..2).map(|_| (0..10).map(|_| rng.gen_range(32..127)).collect()).collect();
            TokenBatch::new(&seqs).unwrap()
        })
        .collect()
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    use rand_distr::{Distribution, StandardNormal};
    Tensor::from_fn(shape, |_| StandardNormal.sample(rng))
}

fn clip_tensor(rows: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(&[rows, 1], |_| rng.gen_range(0.6..1.1))
}

#[test]
fn fake_quant_matches_export() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for bits in [2u8, 3, 4, 8] {
        let spec = QuantSpec::new(bits, 8);
        let w = randn(&[6, 24], &mut rng);
        let (gm, bt) = (clip_tensor(18, &mut rng), clip_tensor(18, &mut rng));
        let g = Graph::new();
        let out = fake_quant(g.constant(w.clone()), g.constant(gm.clone()), g.constant(bt.clone()), &spec, None).unwrap();
        let clips: Vec<ClipParams> = gm.data().iter().zip(bt.data()).map(|(&a, &b)| ClipParams::new(a, b)).collect();
        let reference = quantize(&w, &spec, Some(&clips)).unwrap().dequantize::<f64>();
        for (a, b) in out.value().data().iter().zip(reference.data()) {
            assert!((a - b).abs() < 1e-12, "bits {bits}: {a} vs {b}");
        }
    }
}

#[test]
fn constant_groups_survive() {
    let spec = QuantSpec::new(2, 4);
    let w = Tensor::from_f64(&[1, 8], &[0.5, 0.5, 0.5, 0.5, 0.0, 0.0, 0.0, 0.0]).unwrap();
    let g = Graph::new();
    let ones = Tensor::<f64>::ones(&[2, 1]);
    let out = fake_quant(g.constant(w.clone()), g.param(ones.clone()), g.param(ones), &spec, None).unwrap();
    assert!(out.value().bit_eq(&fake_quantize(&w, &spec).unwrap()));
}

#[test]
fn rejects_ragged_groups() {
    let g = Graph::new();
    let w = g.constant(Tensor::<f64>::zeros(&[2, 6]));
    let c = g.param(Tensor::ones(&[3, 1]));
    assert!(fake_quant(w, c, c, &QuantSpec::new(2, 4), None).is_err());
}

/// Central differences of a scalar function along one coordinate.
fn central(f: &mut dyn FnMut(f64) -> f64, x: f64) -> f64 {
    let h = 1e-6 * x.abs().max(1.0);
    (f(x + h) - f(x - h)) / (2.0 * h)
}

#[test]
fn single_linear_gradient_matches_frozen_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let spec = QuantSpec::new(3, 8);
    let w = randn(&[4, 16], &mut rng);
    let x = randn(&[16, 12], &mut rng);
    let gr = randn(&[4, 12], &mut rng);
    let (gm, bt) = (clip_tensor(8, &mut rng), clip_tensor(8, &mut rng));
    let alpha = 0.7;
    let frozen = freeze_rounding(&w, &gm, &bt, &spec).unwrap();

    let objective = |gm: &Tensor<f64>, bt: &Tensor<f64>, frozen: Option<&FrozenRounding<f64>>| {
        let g = Graph::new();
        let (gv, bv) = (g.param(gm.clone()), g.param(bt.clone()));
        let wv = g.constant(w.clone());
        let delta = fake_quant(wv, gv, bv, &spec, frozen).unwrap().sub(wv).unwrap();
        let fwd = delta.matmul(g.constant(x.clone())).unwrap().fro_norm_sq().unwrap();
        let bwd = delta.matmul_t(g.constant(gr.clone()), true, false).unwrap().fro_norm_sq().unwrap();
        let joint = fwd.add(bwd.scale_f64(alpha).unwrap()).unwrap();
        let grads = g.backward(joint, &[gv, bv]).unwrap();
        (joint.item(), grads.value(0), grads.value(1))
    };
    let (_, dg, db) = objective(&gm, &bt, None);
    for r in 0..8 {
        for (which, analytic) in [(0, &dg), (1, &db)] {
            let mut f = |v: f64| {
                let (mut a, mut b) = (gm.clone(), bt.clone());
                if which == 0 { a.data_mut()[r] = v } else { b.data_mut()[r] = v }
                objective(&a, &b, Some(&frozen)).0
            };
            let x0 = if which == 0 { gm.data()[r] } else { bt.data()[r] };
            let numeric = central(&mut f, x0);
            let a = analytic.data()[r];
            let err = (a - numeric).abs() / numeric.abs().max(1e-8);
            assert!(err < 1e-3, "row {r} param {which}: {a} vs {numeric}");
        }
    }
}

#[test]
fn block_gradient_matches_frozen_differences() {
    let m = model(5);
    let bs = batches(6, 1);
    let spec = QuantSpec::new(2, 8);
    let block = 0;
    let targets = capture_block_targets(&m, &bs, block).unwrap();
    let inputs = capture_inputs(&m, &bs, block).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut clips = BlockClips::identity(&m, block, &spec).unwrap();
    for t in clips.gammas.iter_mut().chain(clips.betas.iter_mut()) {
        *t = clip_tensor(t.rows(), &mut rng);
    }
    let frozen: Vec<FrozenRounding<f64>> = (0..clips.names.len())
        .map(|k| freeze_rounding(m.param(&clips.names[k]).unwrap(), &clips.gammas[k], &clips.betas[k], &spec).unwrap())
        .collect();
    let alpha = 10.0;
    let eval = |c: &BlockClips<f64>, f: Option<&[FrozenRounding<f64>]>| {
        objective_and_gradient(&m, c, &spec, &inputs[0], &targets, 0, &bs[0], alpha, f).unwrap()
    };
    let (j0, grads) = eval(&clips, None);
    let (j1, _) = eval(&clips, Some(&frozen));
    assert!((j0 - j1).abs() <= 1e-12 * j0.abs().max(1.0));
    let n = clips.names.len();
    // q_proj gamma, down_proj beta
    for (slot, row) in [(0, 3), (n + 6, 5), (4, 0)] {
        let mut f = |v: f64| {
            let mut c = clips.clone();
            let mut flat = c.flat();
            flat[slot].data_mut()[row] = v;
            c.set_flat(flat);
            eval(&c, Some(&frozen)).0
        };
        let x0 = clips.flat()[slot].data()[row];
        let numeric = central(&mut f, x0);
        let a = grads[slot].data()[row];
        let err = (a - numeric).abs() / numeric.abs().max(1e-6);
        assert!(err < 1e-3, "slot {slot} row {row}: {a} vs {numeric}");
    }
}

#[test]
fn identity_clips_equal_rtn() {
    let mut m = model(8);
    let spec = QuantSpec::new(3, 16);
    let fp = m.clone();
    let clips = BlockClips::identity(&m, 1, &spec).unwrap();
    let layers = apply_block_clips(&mut m, &clips, &spec).unwrap();
    assert_eq!(layers.len(), 7);
    for name in &clips.names {
        let rtn = fake_quantize(fp.param(name).unwrap(), &spec).unwrap();
        assert!(m.param(name).unwrap().bit_eq(&rtn), "{name}");
        assert_eq!(layers[name], quantize(fp.param(name).unwrap(), &spec, None).unwrap());
    }
    assert!(m.param(&proj_name(0, PROJECTIONS[0])).unwrap().bit_eq(fp.param(&proj_name(0, PROJECTIONS[0])).unwrap()));
}

#[test]
fn targets_are_deterministic_and_definitional() {
    let m = model(9);
    let bs = batches(10, 2);
    let a = capture_block_targets(&m, &bs, 1).unwrap();
    let b = capture_block_targets(&m, &bs, 1).unwrap();
    for (x, y) in a.outputs.iter().zip(&b.outputs).chain(a.grads.iter().zip(&b.grads)) {
        assert!(x.bit_eq(y));
    }
    assert_eq!(a.outputs[0].shape(), &[20, 16]);
    for (k, batch) in bs.iter().enumerate() {
        let reference = m.input_gradient(batch, 1).unwrap();
        assert_eq!(reference.shape(), a.grads[k].shape());
        for (x, y) in reference.data().iter().zip(a.grads[k].data()) {
            assert!((x - y).abs() <= 1e-12 * x.abs().max(1e-3));
        }
    }
    assert!(capture_block_targets(&m, &bs, 2).is_err());
}

fn distill(alpha1: f64, bits: u8, seed: u64) -> BlockTrace {
    distill_with(alpha1, bits, seed, ClipOptimizer::default())
}

fn distill_with(alpha1: f64, bits: u8, seed: u64, optimizer: ClipOptimizer) -> BlockTrace {
    let m = model(seed);
    let bs = batches(seed + 100, 2);
    let cfg = LgpConfig {
        alpha1,
        spec: QuantSpec::new(bits, 8),
        optimizer,
        ..Default::default()
    };
    let targets = capture_block_targets(&m, &bs, 0).unwrap();
    let inputs = capture_inputs(&m, &bs, 0).unwrap();
    lgp_distill_block(&m, 0, &inputs, &targets, &bs, &cfg).unwrap().1
}

#[test]
fn plain_descent_is_a_valid_alternative() {
    let t = distill_with(100.0, 3, 11, ClipOptimizer::Sgd);
    assert!(t.last.joint(100.0) < t.initial.joint(100.0));
}

#[test]
fn fitting_term_drops_at_eight_bits() {
    let t = distill(0.0, 8, 11);
    assert_eq!(t.epochs.len(), 40);
    assert!(t.last.fit <= 0.9 * t.initial.fit, "{:?} -> {:?}", t.initial, t.last);
}

#[test]
fn gradient_term_prefers_positive_alpha() {
    let base = distill(0.0, 2, 12);
    let scale = choose_alpha1(base.initial, &[1e-2, 1e-1, 1.0, 1e1, 1e2, 1e3, 1e4], None).chosen;
    let lgp = distill(scale, 2, 12);
    assert!(lgp.last.grad < base.last.grad, "{scale}: {:?} vs {:?}", lgp.last, base.last);
    assert!(lgp.last.joint(scale) <= lgp.initial.joint(scale));
    for t in lgp.epochs.iter().chain(&base.epochs) {
        assert!(t.fit >= 0.0 && t.grad >= 0.0);
    }
}

#[test]
fn alpha_choice_examples() {
    let mags: Vec<f64> = (0..=10).map(|e| 10f64.powi(e)).collect();
    let c = choose_alpha1(LgpTerms { fit: 1.0, grad: 1e-6 }, &mags, None);
    assert_eq!(c.chosen, 1e6);
    assert_eq!(c.qualifying, vec![1e5, 1e6, 1e7]);

    let d = choose_alpha1(LgpTerms { fit: 1.0, grad: 0.0 }, &[1e8, 1e4, 1e6], None);
    assert!(d.degenerate);
    assert_eq!(d.chosen, 1e4);

    let mut downstream = |a: f64| (a.log10() - 7.0).abs();
    let e = choose_alpha1(LgpTerms { fit: 1.0, grad: 1e-6 }, &mags, Some(&mut downstream));
    assert_eq!(e.chosen, 1e7);
}

#[test]
fn alpha_search_is_stable_across_calibration_draws() {
    let m = model(13);
    let mags: Vec<f64> = (-4..=8).map(|e| 10f64.powi(e)).collect();
    let spec = QuantSpec::new(2, 8);
    let chosen: Vec<f64> = (0..3)
        .map(|s| alpha1_scale_search(&m, &batches(200 + s, 2), 0, &spec, &mags).unwrap().chosen)
        .collect();
    let logs: Vec<f64> = chosen.iter().map(|c| c.log10()).collect();
    let spread = logs.iter().cloned().fold(f64::MIN, f64::max) - logs.iter().cloned().fold(f64::MAX, f64::min);
    assert!(spread <= 1.0, "{chosen:?}");
}

#[test]
fn config_validation() {
    assert!(LgpConfig::default().validate().is_ok());
    let bad = [
        LgpConfig { alpha1: -1.0, ..Default::default() },
        LgpConfig { epochs: 0, ..Default::default() },
        LgpConfig { learning_rate: f64::NAN, ..Default::default() },
        LgpConfig {
            spec: QuantSpec { symmetric: true, ..QuantSpec::new(2, 8) },
            ..Default::default()
        },
    ];
    for c in bad {
        assert!(c.validate().is_err(), "{c:?}");
    }
    let parsed: LgpConfig = serde_json::from_str(r#"{"alpha1": 5.0}"#).unwrap();
    assert_eq!(parsed.epochs, 40);
    assert!(serde_json::from_str::<LgpConfig>(r#"{"alpha": 5.0}"#).is_err());
}
