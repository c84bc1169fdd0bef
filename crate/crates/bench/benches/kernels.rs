use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use quantlab_core::gptq::{build_hessian, gptq_quantize};
use quantlab_core::quant::quantize;
use quantlab_core::{Graph, Model, ModelConfig, QuantSpec, Tensor, TokenBatch};

fn random(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [64, 128, 256] {
        let (a, b) = (random(&[n, n], 1), random(&[n, n], 2));
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                let g = Graph::new();
                let y = g.constant(a.clone()).matmul(g.constant(b.clone())).unwrap();
                black_box(y.value());
            })
        });
    }
    group.finish();
}

fn model_step(c: &mut Criterion) {
    let config = ModelConfig {
        n_layer: 4,
        n_head: 4,
        d_hidden: 32,
        d_inter: 96,
        vocab_size: 256,
        max_seq_len: 64,
        use_rms_norm_before_linear: false,
    };
    let model = Model::<f32>::build(config, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let seqs: Vec<Vec<usize>> = (0..16).map(|_| (0..32).map(|_| rng.gen_range(0..256)).collect()).collect();
    let batch = TokenBatch::new(&seqs).unwrap();
    c.bench_function("forward 4x32", |b| b.iter(|| black_box(model.lm_loss(&batch).unwrap())));
    c.bench_function("forward+backward 4x32", |b| {
        b.iter(|| {
            let g = Graph::new();
            let p = model.bind(&g);
            let f = model.forward(&p, &batch, None).unwrap();
            let loss = model.loss(f.logits, &batch).unwrap();
            black_box(g.backward(loss, p.vars()).unwrap());
        })
    });
}

fn quantizers(c: &mut Criterion) {
    let w = random(&[128, 128], 4).cast::<f64>();
    let x = random(&[128, 512], 5).cast::<f64>();
    let spec = QuantSpec::new(4, 64);
    c.bench_function("rtn 128x128", |b| b.iter(|| black_box(quantize(&w, &spec, None).unwrap())));
    c.bench_function("gptq 128x128", |b| {
        b.iter(|| {
            let h = build_hessian(&x, 0.01).unwrap();
            black_box(gptq_quantize(&w, &h, &spec).unwrap())
        })
    });
}

criterion_group!(benches, matmul, model_step, quantizers);
criterion_main!(benches);
