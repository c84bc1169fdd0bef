use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{Graph, Real, Tensor, Var};

use super::{Bound, Model, ModelError, TokenBatch};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSchedule {
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub lr: f64,
    pub warmup: usize,
    /// Final learning rate as a fraction of `lr`.
    pub min_lr_frac: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 8,
            seq_len: 64,
            lr: 3e-3,
            warmup: 50,
            min_lr_frac: 0.1,
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.95,
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

impl TrainSchedule {
    /// Linear warmup followed by cosine decay to `min_lr_frac * lr`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.lr * (step + 1) as f64 / self.warmup as f64;
        }
        let span = self.steps.saturating_sub(self.warmup).max(1) as f64;
        let t = ((step - self.warmup) as f64 / span).min(1.0);
        let floor = self.lr * self.min_lr_frac;
        floor + (self.lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// AdamW with decoupled weight decay; decay skips rank-1 parameters.
#[derive(Debug, Clone)]
pub struct AdamW<T: Real> {
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    t: i32,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl<T: Real> AdamW<T> {
    pub fn new(params: &[Tensor<T>], beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        Self {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            t: 0,
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
        }
    }

    /// Applies one update; `grads[i] == None` leaves parameter `i` untouched.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Option<Tensor<T>>], lr: f64) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let decay = if params[i].rank() > 1 { self.weight_decay } else { 0.0 };
            let p = params[i].data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for j in 0..p.len() {
                let gj = g.data()[j].as_f64();
                let mj = b1 * m[j].as_f64() + (1.0 - b1) * gj;
                let vj = b2 * v[j].as_f64() + (1.0 - b2) * gj * gj;
                m[j] = T::of(mj);
                v[j] = T::of(vj);
                let upd = (mj / c1) / ((vj / c2).sqrt() + self.eps);
                let pj = p[j].as_f64();
                p[j] = T::of(pj - lr * (upd + decay * pj));
            }
        }
    }
}

/// Draws `batch` random windows of `seq` tokens.
pub fn sample_batch(corpus: &[u8], batch: usize, seq: usize, rng: &mut impl Rng) -> Result<TokenBatch, ModelError> {
    if corpus.len() < seq {
        return Err(ModelError::Empty(format!(
            "corpus of {} tokens is shorter than one window of {seq}",
            corpus.len()
        )));
    }
    let seqs: Vec<Vec<usize>> = (0..batch)
        .map(|_| {
            let start = rng.gen_range(0..=corpus.len() - seq);
            corpus[start..start + seq].iter().map(|&b| b as usize).collect()
        })
        .collect();
    TokenBatch::new(&seqs)
}

/// Scales gradients in place so their global norm is at most `clip`.
pub(crate) fn clip_grads<T: Real>(grads: &mut [Option<Tensor<T>>], clip: f64) {
    if clip <= 0.0 {
        return;
    }
    let norm = grads
        .iter()
        .flatten()
        .map(|g| g.sq_norm().as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > clip {
        let s = T::of(clip / norm);
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
}

/// Generic optimization loop shared by baseline and quantization-aware training.
///
/// `objective` builds the scalar loss for one batch; parameters selected by
/// `trainable` are updated with AdamW. Returns the per-step loss trace.
pub(crate) fn optimize<T: Real>(
    model: &mut Model<T>,
    corpus: &[u8],
    sched: &TrainSchedule,
    trainable: impl Fn(&str) -> bool,
    mut objective: impl for<'g> FnMut(
        &Model<T>,
        &'g Graph<T>,
        &Bound<'g, T>,
        &TokenBatch,
        usize,
    ) -> Result<Var<'g, T>, ModelError>,
) -> Result<Vec<f64>, ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(sched.seed);
    let mut opt = AdamW::new(model.tensors(), sched.beta1, sched.beta2, sched.weight_decay);
    let mask: Vec<bool> = model.names().iter().map(|n| trainable(n)).collect();
    let mut trace = Vec::with_capacity(sched.steps);
    for step in 0..sched.steps {
        let batch = sample_batch(corpus, sched.batch_size, sched.seq_len, &mut rng)?;
        let g = Graph::new();
        let p = model.bind_with(&g, |n| trainable(n));
        let loss = objective(model, &g, &p, &batch, step)?;
        let value = loss.item().as_f64();
        if !value.is_finite() {
            return Err(ModelError::Diverged { step, loss: value });
        }
        let wrt: Vec<Var<'_, T>> = p
            .vars()
            .iter()
            .zip(&mask)
            .filter(|(_, &m)| m)
            .map(|(v, _)| *v)
            .collect();
        let grads = g.backward(loss, &wrt)?;
        let mut it = grads.iter();
        let mut full: Vec<Option<Tensor<T>>> = mask
            .iter()
            .map(|&m| m.then(|| it.next().expect("one gradient per target").value().as_ref().clone()))
            .collect();
        clip_grads(&mut full, sched.grad_clip);
        opt.step(model.tensors_mut(), &full, sched.lr_at(step));
        trace.push(value);
    }
    Ok(trace)
}

/// Full-precision language-model training; returns the per-step loss trace.
pub fn train_baseline<T: Real>(
    model: &mut Model<T>,
    corpus: &[u8],
    sched: &TrainSchedule,
) -> Result<Vec<f64>, ModelError> {
    if sched.steps > 0 {
        model.check_batch(&TokenBatch::single(&vec![0; sched.seq_len])?, 2)?;
    }
    optimize(model, corpus, sched, |_| true, |m, _, p, batch, _| {
        let f = m.forward(p, batch, None)?;
        m.loss(f.logits, batch)
    })
}
