use super::*;
use crate::corpus::synthetic_text;
use crate::model::ModelConfig;
use crate::quant::ternarize;

fn config(n_layer: usize) -> ModelConfig {
    ModelConfig {
        n_layer,
        n_head: 2,
        d_hidden: 16,
        d_inter: 32,
        vocab_size: 256,
        max_seq_len: 16,
        use_rms_norm_before_linear: false,
    }
}

fn lgr_config(alpha2: f64, steps: usize) -> LgrConfig {
    LgrConfig {
        alpha2,
        schedule: TrainSchedule {
            steps,
            batch_size: 4,
            seq_len: 12,
            lr: 1e-2,
            warmup: 5,
            ..Default::default()
        },
        c_avg_every: 5,
        probe_sequences: 4,
        ..Default::default()
    }
}

fn batch() -> TokenBatch {
    TokenBatch::new(&[b"the cat sat".map(|c| c as usize), b"on the mat!".map(|c| c as usize)]).unwrap()
}

#[test]
fn baseline_has_no_smooth_term_and_learns() {
    let m = Model::<f64>::build(config(2), 1).unwrap();
    let text = synthetic_text(4000, 2);
    let r = qat_train(&m, &text, &lgr_config(0.0, 60)).unwrap();
    assert_eq!(r.model.precision(), Precision::Ternary);
    for t in &r.trace {
        assert_eq!(t.total, t.l_lm);
        assert_eq!(t.l_smooth, 0.0);
    }
    let head: f64 = r.trace[..5].iter().map(|t| t.l_lm).sum::<f64>() / 5.0;
    let tail: f64 = r.trace[55..].iter().map(|t| t.l_lm).sum::<f64>() / 5.0;
    assert!(tail.is_finite() && tail < head, "{head} -> {tail}");
    assert_eq!(r.c_avg_trace.len(), 13);
    assert_eq!(r.c_avg_trace.last().unwrap().step, 60);
}

#[test]
fn breakdown_identity_and_bit_identical_warmup() {
    let m = Model::<f64>::build(config(2), 3).unwrap();
    let text = synthetic_text(4000, 4);
    let lgr = qat_train(&m, &text, &lgr_config(0.5, 12)).unwrap();
    let base = qat_train(&m, &text, &lgr_config(0.0, 12)).unwrap();
    assert_eq!(lgr.activation_step, 6);
    for t in &lgr.trace {
        assert_eq!(t.total, t.l_lm + t.alpha2 * t.l_smooth);
        assert!(t.l_smooth >= 0.0);
    }
    // Steps 0..6 use the same objective, so the model entering step 6 is shared.
    for s in 0..=6 {
        assert_eq!(lgr.trace[s].l_lm.to_bits(), base.trace[s].l_lm.to_bits(), "step {s}");
    }
    assert_eq!(lgr.trace[5].l_smooth, 0.0);
    assert!(lgr.trace[6].l_smooth > 0.0);
    assert_eq!(lgr.c_avg_trace[..2], base.c_avg_trace[..2]);
    assert_ne!(lgr.trace[7].l_lm, base.trace[7].l_lm);
}

#[test]
fn single_prediction_is_one_squared_norm() {
    let m = Model::<f64>::build(config(2), 5).unwrap();
    let b = TokenBatch::single(&[104, 105]).unwrap();
    for layer in [0, 1] {
        let g = m.input_gradient(&b, layer).unwrap();
        assert!(g.row(1).iter().all(|&v| v == 0.0));
        let expect = g.sq_norm();
        let got = smooth_loss(&m, &b, layer).unwrap();
        assert!((got - expect).abs() <= 1e-14 * expect, "{got} vs {expect}");
    }
}

#[test]
fn smooth_term_is_mean_over_predicted_positions() {
    let m = Model::<f64>::build(config(2), 6).unwrap();
    let b = batch();
    let g = m.input_gradient(&b, 1).unwrap();
    let expect = g.sq_norm() / (2.0 * 10.0);
    let got = smooth_loss(&m, &b, 1).unwrap();
    assert!((got - expect).abs() <= 1e-13 * expect);
}

#[test]
fn smooth_gradient_matches_finite_differences() {
    let m = Model::<f64>::build(config(1), 7).unwrap();
    let b = batch();
    let g = Graph::new();
    let p = m.bind(&g);
    let (_, ls) = lgr_terms(&m, &g, &p, &b, 1).unwrap();
    let grads = g.backward(ls, p.vars()).unwrap();
    let probes = [
        ("layers.0.attn.q_proj.weight", 3),
        ("layers.0.attn.v_proj.weight", 17),
        ("layers.0.mlp.down_proj.weight", 40),
        ("layers.0.input_layernorm.weight", 2),
        ("embed.weight", 104 * 16 + 5),
        ("lm_head.weight", 101 * 16 + 9),
    ];
    for (name, idx) in probes {
        let i = m.index_of(name).unwrap();
        let analytic = grads.value(i).data()[idx];
        let at = |v: f64| {
            let mut mm = m.clone();
            let mut t = mm.param(name).unwrap().clone();
            t.data_mut()[idx] = v;
            mm.set_param(name, t).unwrap();
            smooth_loss(&mm, &b, 1).unwrap()
        };
        let x0 = m.param(name).unwrap().data()[idx];
        let h = 1e-5 * x0.abs().max(0.1);
        let numeric = (at(x0 + h) - at(x0 - h)) / (2.0 * h);
        let err = (analytic - numeric).abs() / numeric.abs().max(1e-10);
        assert!(err < 1e-4, "{name}[{idx}]: {analytic} vs {numeric}");
    }
}

#[test]
fn ste_gradient_equals_gradient_at_ternary_weights() {
    let mut latent = Model::<f64>::build(config(2), 8).unwrap();
    latent.set_precision(Precision::Ternary);
    let mut surgery = latent.clone();
    surgery.set_precision(Precision::Fp);
    for name in latent.names().to_vec() {
        if Model::<f64>::is_projection(&name) {
            let w = latent.param(&name).unwrap();
            let t = ternarize(w).unwrap();
            surgery.set_param(&name, Tensor::from_f64(w.shape(), &t.dequantize()).unwrap()).unwrap();
        }
    }
    let b = batch();
    let grads_of = |m: &Model<f64>| {
        let g = Graph::new();
        let p = m.bind(&g);
        let (ll, ls) = lgr_terms(m, &g, &p, &b, 1).unwrap();
        let total = ll.add(ls.scale_f64(0.3).unwrap()).unwrap();
        let gr = g.backward(total, p.vars()).unwrap();
        (total.item(), (0..gr.len()).map(|i| gr.value(i)).collect::<Vec<_>>())
    };
    let (va, ga) = grads_of(&latent);
    let (vb, gb) = grads_of(&surgery);
    assert_eq!(va, vb);
    for (k, (a, b)) in ga.iter().zip(&gb).enumerate() {
        assert!(a.bit_eq(b), "{}", latent.names()[k]);
    }
}

#[test]
fn frozen_embedding_stays_put() {
    let m = Model::<f64>::build(config(1), 9).unwrap();
    let text = synthetic_text(2000, 9);
    let cfg = LgrConfig {
        frozen_embedding: true,
        ..lgr_config(0.01, 6)
    };
    let r = qat_train(&m, &text, &cfg).unwrap();
    for name in ["embed.weight", "pos_embed.weight"] {
        assert!(r.model.param(name).unwrap().bit_eq(m.param(name).unwrap()));
    }
    assert!(!r.model.param("lm_head.weight").unwrap().bit_eq(m.param("lm_head.weight").unwrap()));
}

#[test]
fn divergence_reports_the_trace() {
    let m = Model::<f64>::build(config(1), 10).unwrap();
    let text = synthetic_text(2000, 10);
    let mut cfg = lgr_config(0.01, 5);
    cfg.schedule.lr = f64::NAN;
    cfg.schedule.grad_clip = 0.0;
    match qat_train(&m, &text, &cfg) {
        Err(LgrError::Diverged { step, trace, .. }) => {
            assert_eq!(step, 1);
            assert_eq!(trace.len(), 1);
        }
        other => panic!("expected divergence, got {:?}", other.map(|r| r.trace.len())),
    }
}

#[test]
fn config_validation() {
    assert!(LgrConfig::default().validate(2).is_ok());
    assert!(LgrConfig { alpha2: -0.1, ..Default::default() }.validate(2).is_err());
    assert!(LgrConfig { reg_layer: 2, ..Default::default() }.validate(4).is_err());
    assert!(LgrConfig { activation_fraction: 1.5, ..Default::default() }.validate(2).is_err());
    assert_eq!(lgr_config(0.01, 10).activation_step(), 5);
    assert_eq!(LgrConfig { activation_fraction: 0.0, ..lgr_config(0.01, 10) }.activation_step(), 0);
}
