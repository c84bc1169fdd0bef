//! Quantization-aware training of ternary models with a gradient regularizer.
//!
//! The total loss is `L = L_lm + α₂·L_smooth`, where `L_smooth` is the mean
//! squared norm of the per-sequence input gradient at hidden state
//! `x^(reg_layer)`, taken over predicted positions. Latent weights stay full
//! precision and are ternarized in the forward pass; the regularizer's own
//! parameter gradient flows through the same straight-through estimator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{clip_grads, sample_batch, AdamW, Bound, Model, ModelError, Precision, TokenBatch, TrainSchedule};
use crate::smoothness::compute_c_avg;
use crate::tensor::{Graph, Real, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum LgrError {
    #[error("invalid LGR config: {0}")]
    Config(String),
    #[error("training diverged at step {step} (loss {loss})")]
    Diverged {
        step: usize,
        loss: f64,
        trace: Vec<LossBreakdown>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LgrConfig {
    pub alpha2: f64,
    /// Hidden state whose input gradient is regularized; 0 is the embedding output.
    pub reg_layer: usize,
    /// Fraction of the steps after which the regularizer switches on.
    pub activation_fraction: f64,
    pub schedule: TrainSchedule,
    /// Keep token and position embeddings fixed.
    pub frozen_embedding: bool,
    /// Steps between smoothness probes; 0 probes only at the end.
    pub c_avg_every: usize,
    pub probe_sequences: usize,
    pub probe_seed: u64,
}

impl Default for LgrConfig {
    fn default() -> Self {
        Self {
            alpha2: 0.01,
            reg_layer: 1,
            activation_fraction: 0.5,
            schedule: TrainSchedule::default(),
            frozen_embedding: false,
            c_avg_every: 100,
            probe_sequences: 16,
            probe_seed: 0x5eed,
        }
    }
}

impl LgrConfig {
    pub fn validate(&self, n_layer: usize) -> Result<(), LgrError> {
        if !(self.alpha2 >= 0.0 && self.alpha2.is_finite()) {
            return Err(LgrError::Config(format!("alpha2 must be finite and >= 0, got {}", self.alpha2)));
        }
        if self.reg_layer > 1 || self.reg_layer > n_layer {
            return Err(LgrError::Config(format!("reg_layer must be 0 or 1, got {}", self.reg_layer)));
        }
        if !(0.0..=1.0).contains(&self.activation_fraction) {
            return Err(LgrError::Config(format!(
                "activation_fraction must lie in [0, 1], got {}",
                self.activation_fraction
            )));
        }
        if self.schedule.seq_len < 2 {
            return Err(LgrError::Config("seq_len must be >= 2".into()));
        }
        Ok(())
    }

    /// First step at which the regularizer contributes.
    pub fn activation_step(&self) -> usize {
        (self.activation_fraction * self.schedule.steps as f64).ceil() as usize
    }
}

/// One logged step; `total = l_lm + α₂·l_smooth` in the model's precision.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub step: usize,
    pub l_lm: f64,
    /// Zero before activation, where the term is not computed.
    pub l_smooth: f64,
    pub total: f64,
    pub alpha2: f64,
    pub lr: f64,
}

/// `L_smooth` for a forward pass already built on `g`.
///
/// Gradients are scaled by `B` so each sequence contributes its own loss
/// gradient; the mean runs over the `B·(T-1)` predicted positions.
pub fn smooth_loss_from<'g, T: Real>(
    g: &'g Graph<T>,
    loss: Var<'g, T>,
    hidden: Var<'g, T>,
    batch: &TokenBatch,
) -> Result<Var<'g, T>, ModelError> {
    let b = batch.batch() as f64;
    let positions = b * (batch.seq() - 1) as f64;
    let gx = g.backward(loss, &[hidden])?.get(0);
    Ok(gx.fro_norm_sq()?.scale_f64(b * b / positions)?)
}

/// Builds `(l_lm, l_smooth)` on `g` with the given bound parameters.
pub fn lgr_terms<'g, T: Real>(
    model: &Model<T>,
    g: &'g Graph<T>,
    p: &Bound<'g, T>,
    batch: &TokenBatch,
    reg_layer: usize,
) -> Result<(Var<'g, T>, Var<'g, T>), ModelError> {
    model.check_batch(batch, 2)?;
    let f = model.forward(p, batch, None)?;
    let hidden = *f.hidden.get(reg_layer).ok_or(ModelError::LayerIndex {
        index: reg_layer,
        n_layer: model.config().n_layer,
    })?;
    let l_lm = model.loss(f.logits, batch)?;
    let l_smooth = smooth_loss_from(g, l_lm, hidden, batch)?;
    Ok((l_lm, l_smooth))
}

/// Value of `L_smooth` for `model` on `batch`.
pub fn smooth_loss<T: Real>(model: &Model<T>, batch: &TokenBatch, reg_layer: usize) -> Result<f64, ModelError> {
    let g = Graph::new();
    let p = model.bind(&g);
    Ok(lgr_terms(model, &g, &p, batch, reg_layer)?.1.item().as_f64())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CAvgSample {
    pub step: usize,
    pub c_avg: f64,
}

#[derive(Debug, Clone)]
pub struct QatResult<T: Real> {
    pub model: Model<T>,
    pub trace: Vec<LossBreakdown>,
    pub c_avg_trace: Vec<CAvgSample>,
    pub activation_step: usize,
}

fn is_embedding(name: &str) -> bool {
    name == "embed.weight" || name == "pos_embed.weight"
}

/// Fixed probe windows for smoothness sampling, disjoint from the training stream.
pub fn probe_set(corpus: &[u8], cfg: &LgrConfig) -> Result<Vec<Vec<usize>>, ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.probe_seed);
    let b = sample_batch(corpus, cfg.probe_sequences, cfg.schedule.seq_len, &mut rng)?;
    Ok((0..b.batch()).map(|i| b.sequence(i).to_vec()).collect())
}

/// Ternary QAT from `init`, with the regularizer active from
/// [`LgrConfig::activation_step`] on. `α₂ = 0` is the plain ternary baseline.
pub fn qat_train<T: Real>(init: &Model<T>, corpus: &[u8], cfg: &LgrConfig) -> Result<QatResult<T>, LgrError> {
    cfg.validate(init.config().n_layer)?;
    let sched = &cfg.schedule;
    let mut model = init.clone();
    model.set_precision(Precision::Ternary);
    model.check_batch(&TokenBatch::single(&vec![0; sched.seq_len])?, 2)?;
    let probes = probe_set(corpus, cfg)?;
    let trainable = |n: &str| !(cfg.frozen_embedding && is_embedding(n));
    let mask: Vec<bool> = model.names().iter().map(|n| trainable(n)).collect();
    let mut opt = AdamW::new(model.tensors(), sched.beta1, sched.beta2, sched.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(sched.seed);
    let activation_step = cfg.activation_step();
    let mut trace = Vec::with_capacity(sched.steps);
    let mut c_avg_trace = Vec::new();

    for step in 0..sched.steps {
        if cfg.c_avg_every > 0 && step % cfg.c_avg_every == 0 {
            c_avg_trace.push(CAvgSample {
                step,
                c_avg: compute_c_avg(&model, &probes, cfg.reg_layer)?,
            });
        }
        let batch = sample_batch(corpus, sched.batch_size, sched.seq_len, &mut rng)?;
        let g = Graph::new();
        let p = model.bind_with(&g, trainable);
        let active = cfg.alpha2 > 0.0 && step >= activation_step;
        let (total, l_lm, l_smooth) = if active {
            let (l_lm, l_smooth) = lgr_terms(&model, &g, &p, &batch, cfg.reg_layer)?;
            (l_lm.add(l_smooth.scale_f64(cfg.alpha2)?)?, l_lm, Some(l_smooth))
        } else {
            let f = model.forward(&p, &batch, None)?;
            let l = model.loss(f.logits, &batch)?;
            (l, l, None)
        };
        let lr = sched.lr_at(step);
        let record = LossBreakdown {
            step,
            l_lm: l_lm.item().as_f64(),
            l_smooth: l_smooth.map_or(0.0, |v| v.item().as_f64()),
            total: total.item().as_f64(),
            alpha2: if active { cfg.alpha2 } else { 0.0 },
            lr,
        };
        if !record.total.is_finite() {
            return Err(LgrError::Diverged {
                step,
                loss: record.total,
                trace,
            });
        }
        trace.push(record);

        let wrt: Vec<Var<'_, T>> = p.vars().iter().zip(&mask).filter(|(_, &m)| m).map(|(v, _)| *v).collect();
        let grads = g.backward(total, &wrt)?;
        let mut it = grads.iter();
        let mut full: Vec<Option<Tensor<T>>> = mask
            .iter()
            .map(|&m| m.then(|| it.next().expect("one gradient per target").value().as_ref().clone()))
            .collect();
        clip_grads(&mut full, sched.grad_clip);
        opt.step(model.tensors_mut(), &full, lr);
    }
    c_avg_trace.push(CAvgSample {
        step: sched.steps,
        c_avg: compute_c_avg(&model, &probes, cfg.reg_layer)?,
    });
    Ok(QatResult {
        model,
        trace,
        c_avg_trace,
        activation_step,
    })
}

#[cfg(test)]
mod tests;
