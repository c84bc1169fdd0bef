use proptest::prelude::*;

use super::*;

fn row(data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(&[1, data.len()], data).unwrap()
}

#[test]
fn exact_grid_group() {
    let p = quant_params(&[0.0, 1.0, 2.0, 3.0], 2, false, None);
    assert_eq!(p, QuantParams { h: 1.0, z: 0 });
    let q = quantize(&row(&[0.0, 1.0, 2.0, 3.0]), &QuantSpec::new(2, 64), None).unwrap();
    assert_eq!(q.codes(), &[0, 1, 2, 3]);
    assert_eq!(q.dequantize::<f64>().data(), &[0.0, 1.0, 2.0, 3.0]);
}

#[test]
fn hand_computed_asymmetric_example() {
    // h = 2/3; -1.5/h = -2.25 rounds to -2, so z = 2; codes round(-2.25)+2, round(0.75)+2.
    let p = quant_params(&[-1.5, 0.5], 2, false, None);
    assert_eq!(p.h, (2.0f64 / 3.0) as f32);
    assert_eq!(p.z, 2);
    let q = quantize(&row(&[-1.5, 0.5]), &QuantSpec::new(2, 64), None).unwrap();
    assert_eq!(q.codes(), &[0, 3]);
    let back = q.dequantize::<f64>();
    let h = p.h as f64;
    assert!((back.data()[0] + 4.0 / 3.0).abs() < 1e-6);
    assert!((back.data()[1] - 2.0 / 3.0).abs() < 1e-6);
    assert!((back.data()[0] + 1.5).abs() <= h && (back.data()[1] - 0.5).abs() <= h);
}

#[test]
fn constant_groups_are_exact() {
    for c in [5.0, -5.0, 0.0, 1e-3] {
        let q = quantize(&row(&[c, c, c]), &QuantSpec::new(3, 64), None).unwrap();
        let codes = q.codes();
        assert!(codes.iter().all(|&x| x == codes[0]));
        for v in q.dequantize::<f64>().data() {
            assert!((v - c).abs() < 1e-6, "{c} -> {v}");
        }
    }
    assert_eq!(quant_params(&[0.0, 0.0], 4, false, None).h, EPS_SCALE);
}

#[test]
fn eight_bit_error_bound() {
    let w: Vec<f64> = (0..64).map(|i| ((i * 37 % 64) as f64 / 7.0).sin() * 3.0).collect();
    let q = quantize(&row(&w), &QuantSpec::new(8, 64), None).unwrap();
    let (lo, hi) = w.iter().fold((f64::MAX, f64::MIN), |(a, b), &x| (a.min(x), b.max(x)));
    let h = q.params()[0].h as f64;
    assert!(h <= (hi - lo) / 255.0 * (1.0 + 1e-6));
    for (a, b) in q.dequantize::<f64>().data().iter().zip(&w) {
        assert!((a - b).abs() <= h);
    }
}

#[test]
fn rejects_invalid_input() {
    let spec = QuantSpec::new(2, 4);
    assert_eq!(quantize(&row(&[1.0, f64::NAN]), &spec, None), Err(QuantError::NonFinite));
    assert!(matches!(
        quantize(&row(&[1.0]), &QuantSpec::new(9, 4), None),
        Err(QuantError::InvalidSpec(_))
    ));
    assert!(matches!(
        quantize(&row(&[1.0, 2.0]), &spec, Some(&[])),
        Err(QuantError::ClipCount { .. })
    ));
}

#[test]
fn ternarize_examples() {
    let t = ternarize(&row(&[1.0, -1.0, 1.0, -1.0])).unwrap();
    assert_eq!(t.scale, 1.0);
    assert_eq!(t.codes, vec![1, -1, 1, -1]);
    assert_eq!(t.dequantize(), vec![1.0, -1.0, 1.0, -1.0]);

    let t = ternarize(&row(&[0.4, 2.0])).unwrap();
    assert!((t.scale - 1.2).abs() < 1e-15);
    assert_eq!(t.codes, vec![0, 1]);

    let t = ternarize(&Tensor::<f64>::zeros(&[2, 2])).unwrap();
    assert_eq!(t.codes, vec![0; 4]);
    assert_eq!(t.scale, 1e-8);
}

#[test]
fn ragged_final_group() {
    let w: Vec<f64> = (0..10).map(|i| i as f64 * 0.3 - 1.0).collect();
    let q = quantize(&row(&w), &QuantSpec::new(3, 4), None).unwrap();
    assert_eq!(q.params().len(), 3);
    let members: Vec<usize> = q.layout().members(2).collect();
    assert_eq!(members, vec![8, 9]);
}

#[test]
fn output_axis_groups_run_down_columns() {
    let w = Tensor::from_fn(&[4, 3], |i| i as f64);
    let q = quantize_along(&w, &QuantSpec::new(4, 2), GroupAxis::Output, None).unwrap();
    assert_eq!(q.params().len(), 6);
    let members: Vec<usize> = q.layout().members(1).collect();
    assert_eq!(members, vec![6, 9]);
    let t = q.transposed();
    assert_eq!(t.group_axis(), GroupAxis::Input);
    assert_eq!(t.dequantize::<f64>(), q.dequantize::<f64>().transpose2());
}

#[test]
fn clip_shrinks_the_range() {
    let g = [-2.0, -1.0, 0.5, 3.0];
    let base = quant_params(&g, 3, false, None);
    let clipped = quant_params(&g, 3, false, Some(ClipParams::new(0.5, 0.5)));
    assert!((clipped.h as f64 - base.h as f64 / 2.0).abs() < 1e-6);
    assert_eq!(ClipParams::new(5.0, -1.0), ClipParams { gamma: 1.2, beta: ClipParams::MIN });
}

#[test]
fn corrupted_block_is_rejected() {
    let q = quantize(&row(&[0.1, 0.2, 0.3]), &QuantSpec::new(2, 2), None).unwrap();
    let mut buf = Vec::new();
    q.write_block("w", &mut buf);
    assert!(QuantizedLinear::read_block(&buf[..buf.len() - 1]).is_err());
    let mut bad = buf.clone();
    bad[4 + 1 + 4 + 8] = 0;
    assert!(matches!(QuantizedLinear::read_block(&bad), Err(QuantError::Format(_))));
}

fn group_strategy() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-4.0f64..4.0, 2..96).prop_filter("non-constant", |v| {
        let (lo, hi) = v.iter().fold((f64::MAX, f64::MIN), |(a, b), &x| (a.min(x), b.max(x)));
        hi - lo > 1e-6
    })
}

proptest! {
    #[test]
    fn round_trip_error_is_at_most_h(w in group_strategy(), bits in 1u8..=8) {
        let n = w.len();
        let q = quantize(&row(&w), &QuantSpec::new(bits, n), None).unwrap();
        let h = q.params()[0].h as f64;
        for (a, b) in q.dequantize::<f64>().data().iter().zip(&w) {
            prop_assert!((a - b).abs() <= h, "|{a} - {b}| > {h}");
        }
    }

    #[test]
    fn codes_are_monotone(w in group_strategy(), bits in 1u8..=8) {
        let n = w.len();
        let q = quantize(&row(&w), &QuantSpec::new(bits, n), None).unwrap();
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&a, &b| w[a].total_cmp(&w[b]));
        for pair in idx.windows(2) {
            prop_assert!(q.codes()[pair[0]] <= q.codes()[pair[1]]);
        }
        prop_assert!(q.codes().iter().all(|&c| c as u32 <= QuantSpec::new(bits, n).qmax()));
    }

    #[test]
    fn packing_round_trips(bits in 1u8..=8, raw in prop::collection::vec(any::<u8>(), 0..200)) {
        let codes: Vec<u8> = raw.iter().map(|&c| (c as u16 % (1u16 << bits)) as u8).collect();
        let packed = pack_codes(&codes, bits);
        prop_assert_eq!(packed.len(), (codes.len() * bits as usize).div_ceil(8));
        prop_assert_eq!(unpack_codes(&packed, bits, codes.len()), codes);
    }

    #[test]
    fn block_round_trip_is_bit_exact(
        rows in 1usize..5,
        cols in 1usize..20,
        bits in 1u8..=8,
        gs in 1usize..8,
        output_axis in any::<bool>(),
        seed in 0u64..1000,
    ) {
        let w = Tensor::<f32>::from_fn(&[rows, cols], |i| ((i as f64 + seed as f64) * 0.731).sin() as f32);
        let axis = if output_axis { GroupAxis::Output } else { GroupAxis::Input };
        let q = quantize_along(&w, &QuantSpec::new(bits, gs), axis, None).unwrap();
        let mut buf = vec![0xAB];
        q.write_block("layers.0.attn.q_proj.weight", &mut buf);
        let (name, back, used) = QuantizedLinear::read_block(&buf[1..]).unwrap();
        prop_assert_eq!(name, "layers.0.attn.q_proj.weight");
        prop_assert_eq!(used, buf.len() - 1);
        prop_assert!(back.dequantize::<f32>().bit_eq(&q.dequantize::<f32>()));
        prop_assert_eq!(back, q);
    }

    #[test]
    fn dequantize_is_idempotent_on_the_grid(w in group_strategy(), bits in 2u8..=8) {
        let n = w.len();
        let (lo, hi) = w.iter().fold((f64::MAX, f64::MIN), |(a, b), &x| (a.min(x), b.max(x)));
        prop_assume!(hi - lo > 0.5);
        let spec = QuantSpec::new(bits, n);
        let once = quantize(&row(&w), &spec, None).unwrap().dequantize::<f64>();
        let twice = quantize(&once, &spec, None).unwrap().dequantize::<f64>();
        let h = quantize(&row(&w), &spec, None).unwrap().params()[0].h as f64;
        for (a, b) in once.data().iter().zip(twice.data()) {
            prop_assert!((a - b).abs() <= 1e-5 * h, "{a} vs {b}");
        }
    }

    #[test]
    fn ternary_scale_is_mean_abs(w in prop::collection::vec(-3.0f64..3.0, 1..64)) {
        let t = ternarize(&row(&w)).unwrap();
        let mean = w.iter().map(|x| x.abs()).sum::<f64>() / w.len() as f64;
        if mean > 0.0 {
            prop_assert_eq!(t.scale, mean);
        }
        prop_assert!(t.codes.iter().all(|c| (-1..=1).contains(c)));
    }
}

mod model_rtn {
    use super::*;
    use crate::corpus::synthetic_text;
    use crate::model::{train_baseline, Model, ModelConfig, TokenBatch, TrainSchedule};

    fn trained() -> Model<f32> {
        let cfg = ModelConfig {
            n_layer: 2,
            n_head: 2,
            d_hidden: 32,
            d_inter: 64,
            vocab_size: 256,
            max_seq_len: 32,
            use_rms_norm_before_linear: false,
        };
        let mut m = Model::build(cfg, 0).unwrap();
        let sched = TrainSchedule {
            steps: 150,
            batch_size: 8,
            seq_len: 32,
            lr: 1e-2,
            warmup: 10,
            ..Default::default()
        };
        train_baseline(&mut m, &synthetic_text(50_000, 0), &sched).unwrap();
        m
    }

    #[test]
    fn passthrough_and_bit_width_effects() {
        let m = trained();
        let held: Vec<usize> = synthetic_text(33 * 8, 99).iter().map(|&b| b as usize).collect();
        let seqs: Vec<&[usize]> = held.chunks(32).take(8).collect();
        let batch = TokenBatch::new(&seqs).unwrap();
        let base = m.lm_loss(&batch).unwrap();

        let same = quantize_model_rtn(&m, None).unwrap();
        assert!(same.model.bit_eq(&m));
        assert!(same.layers.is_empty());

        let q8 = quantize_model_rtn(&m, Some(&QuantSpec::new(8, 32))).unwrap();
        let l8 = q8.model.lm_loss(&batch).unwrap();
        assert!(((l8 - base) / base).abs() < 0.01, "{base} -> {l8}");
        assert_eq!(q8.layers.len(), 2 * 7);
        assert!(q8.model.param("embed.weight").unwrap().bit_eq(m.param("embed.weight").unwrap()));

        let q2 = quantize_model_rtn(&m, Some(&QuantSpec::new(2, 32))).unwrap();
        assert!(q2.model.lm_loss(&batch).unwrap() > base);
    }
}
