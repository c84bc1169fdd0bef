//! Reverse perplexity over the one-token neighborhood of a context.
//!
//! For context `c` and rank `k`, the evaluated model proposes its `k`-th most
//! likely next token `w_k`; the reference model then scores `c + w_k`.
//! `rppl_k = exp(mean NLL)` of that extended sequence.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::model::{rank_log_probs, Model, ModelError, TokenBatch};
use crate::tensor::Real;

/// Which positions of `c + w` enter the mean NLL.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    /// Every predicted position of the extended sequence.
    #[default]
    FullSequence,
    /// Only the appended token.
    AppendedTokenOnly,
}

/// How per-context values are combined for each `k`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveAggregation {
    /// `exp` of the mean over contexts of the mean NLL.
    #[default]
    LogMean,
    /// Arithmetic mean of per-context perplexities.
    Arithmetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NeighborhoodSpec {
    pub context_length: usize,
    pub n_contexts: usize,
    pub k_max: usize,
    pub scope: Scope,
    pub aggregation: CurveAggregation,
    pub seed: u64,
}

impl Default for NeighborhoodSpec {
    fn default() -> Self {
        Self {
            context_length: 128,
            n_contexts: 128,
            k_max: 40,
            scope: Scope::FullSequence,
            aggregation: CurveAggregation::LogMean,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RpplCurve {
    pub k_values: Vec<usize>,
    pub rppl: Vec<f64>,
    pub n_contexts: usize,
    pub context_length: usize,
    pub scope: Scope,
    pub aggregation: CurveAggregation,
    /// `per_context[c][k - 1]` is the perplexity of context `c` extended by its rank-`k` token.
    pub per_context: Vec<Vec<f64>>,
}

impl RpplCurve {
    /// `(rppl(k_max) - rppl(1)) / rppl(1)`.
    pub fn normalized_slope(&self) -> f64 {
        let first = self.rppl[0];
        (self.rppl[self.rppl.len() - 1] - first) / first
    }
}

/// Draws `n` windows of `len` tokens from `corpus` with a fixed seed.
pub fn sample_contexts(corpus: &[u8], n: usize, len: usize, seed: u64) -> Result<Vec<Vec<usize>>, ModelError> {
    if len == 0 || corpus.len() < len {
        return Err(ModelError::Empty(format!(
            "corpus of {} bytes cannot supply contexts of length {len}",
            corpus.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let start = rng.gen_range(0..=corpus.len() - len);
            corpus[start..start + len].iter().map(|&b| b as usize).collect()
        })
        .collect())
}

/// Mean NLL of each rank-`k` extension of one context, `k = 1..=k_max`.
fn context_nlls<Q: Real, R: Real>(
    model_q: &Model<Q>,
    model_ref: &Model<R>,
    context: &[usize],
    k_max: usize,
    scope: Scope,
) -> Result<Vec<f64>, ModelError> {
    let t = context.len();
    let lp_q = model_q.log_probs(context)?;
    let ranked = rank_log_probs(lp_q.row(t - 1), k_max);
    // Causal masking: logits for c are unchanged by appending w, so one pass of c suffices.
    let lp_ref = model_ref.log_probs(context)?;
    let prefix: f64 = (0..t - 1).map(|i| -lp_ref.get2(i, context[i + 1])).sum();
    let last = lp_ref.row(t - 1);
    Ok(ranked
        .iter()
        .map(|&(w, _)| match scope {
            Scope::FullSequence => (prefix - last[w]) / t as f64,
            Scope::AppendedTokenOnly => -last[w],
        })
        .collect())
}

pub fn rppl_curve<Q: Real, R: Real>(
    model_q: &Model<Q>,
    model_ref: &Model<R>,
    contexts: &[Vec<usize>],
    spec: &NeighborhoodSpec,
) -> Result<RpplCurve, ModelError> {
    let vq = model_q.config().vocab_size;
    let vr = model_ref.config().vocab_size;
    if vq != vr {
        return Err(ModelError::Config(format!("vocabulary mismatch: {vq} vs {vr}")));
    }
    if spec.k_max == 0 || spec.k_max > vq {
        return Err(ModelError::Config(format!("k_max {} outside 1..={vq}", spec.k_max)));
    }
    if contexts.is_empty() {
        return Err(ModelError::Empty("no contexts".into()));
    }
    for c in contexts {
        // The extended sequence must still fit the position table.
        let max = model_ref.config().max_seq_len.min(model_q.config().max_seq_len) - 1;
        if c.is_empty() || c.len() > max {
            return Err(ModelError::SeqLen {
                len: c.len(),
                min: 1,
                max,
            });
        }
    }
    let nlls: Vec<Vec<f64>> = contexts
        .par_iter()
        .map(|c| context_nlls(model_q, model_ref, c, spec.k_max, spec.scope))
        .collect::<Result<_, _>>()?;
    let n = contexts.len() as f64;
    let rppl = (0..spec.k_max)
        .map(|k| match spec.aggregation {
            CurveAggregation::LogMean => (nlls.iter().map(|c| c[k]).sum::<f64>() / n).exp(),
            CurveAggregation::Arithmetic => nlls.iter().map(|c| c[k].exp()).sum::<f64>() / n,
        })
        .collect();
    Ok(RpplCurve {
        k_values: (1..=spec.k_max).collect(),
        rppl,
        n_contexts: contexts.len(),
        context_length: contexts[0].len(),
        scope: spec.scope,
        aggregation: spec.aggregation,
        per_context: nlls.into_iter().map(|c| c.into_iter().map(f64::exp).collect()).collect(),
    })
}

/// Default ratio to `rppl_1` under which a candidate still counts as effective.
pub const DEFAULT_THRESHOLD_RATIO: f64 = 1.5;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EffectiveCandidates {
    pub per_context: Vec<usize>,
    pub mean: f64,
}

/// Longest prefix `k` with every `rppl_j ≤ ratio · rppl_1` for `j ≤ k`.
pub fn effective_count(curve: &[f64], ratio: f64) -> usize {
    let Some(&first) = curve.first() else { return 0 };
    curve.iter().take_while(|&&v| v <= ratio * first).count()
}

pub fn effective_candidates(curve: &RpplCurve, ratio: f64) -> Result<EffectiveCandidates, ModelError> {
    if !(ratio > 1.0) {
        return Err(ModelError::Config(format!("threshold ratio must exceed 1, got {ratio}")));
    }
    let per_context: Vec<usize> = curve.per_context.iter().map(|c| effective_count(c, ratio)).collect();
    let mean = per_context.iter().sum::<usize>() as f64 / per_context.len().max(1) as f64;
    Ok(EffectiveCandidates { per_context, mean })
}

/// Mean NLL of `c + w` under `model_ref`, from a full forward pass of the extended sequence.
pub fn directional_derivative<T: Real>(model_ref: &Model<T>, context: &[usize], token: usize) -> Result<f64, ModelError> {
    let mut seq = context.to_vec();
    seq.push(token);
    model_ref.lm_loss(&TokenBatch::single(&seq)?)
}
