//! Input-gradient smoothness proxies.
//!
//! The per-sequence score is the 2-norm of the gradient of that sequence's
//! loss with respect to the hidden states of every token at one layer.
//! `c_avg` is its mean over a sample set and `c_lower` its supremum.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::model::{Model, ModelError, TapSite, TokenBatch};
use crate::tensor::{Graph, OpKind, Real, Tensor, TensorError};

/// Sequences per backward pass; each sequence's rows are rescaled to its own loss.
const CHUNK: usize = 16;

/// How per-token gradients collapse into one per-sequence score.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// 2-norm of all per-token gradients concatenated.
    #[default]
    Concat,
    /// Mean of per-token 2-norms.
    TokenMean,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SmoothnessReport {
    pub c_avg: f64,
    pub c_lower: f64,
    pub per_sequence_scores: Vec<f64>,
    /// Norms of every predicted position's gradient, in sequence order.
    pub per_token_norms: Vec<f64>,
    pub sample_count: usize,
    pub aggregation: Aggregation,
}

impl SmoothnessReport {
    /// Builds a report from per-sequence gradient matrices (tokens as rows).
    ///
    /// The final row of each matrix belongs to a position with no target; it
    /// enters the sequence score but not `per_token_norms`.
    pub fn from_gradients(grads: &[Tensor<f64>], aggregation: Aggregation) -> Result<Self, ModelError> {
        if grads.is_empty() {
            return Err(ModelError::Empty("sample set".into()));
        }
        let mut scores = Vec::with_capacity(grads.len());
        let mut per_token = Vec::new();
        for g in grads {
            let norms: Vec<f64> = (0..g.rows())
                .map(|r| g.row(r).iter().map(|v| v * v).sum::<f64>().sqrt())
                .collect();
            scores.push(match aggregation {
                Aggregation::Concat => norms.iter().map(|n| n * n).sum::<f64>().sqrt(),
                Aggregation::TokenMean => norms.iter().sum::<f64>() / norms.len() as f64,
            });
            per_token.extend_from_slice(&norms[..norms.len().saturating_sub(1).max(1)]);
        }
        let c_avg = scores.iter().sum::<f64>() / scores.len() as f64;
        let c_lower = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(Self {
            // A mean never exceeds the maximum, but rounding can push it one ulp over.
            c_avg: c_avg.min(c_lower),
            c_lower,
            sample_count: scores.len(),
            per_sequence_scores: scores,
            per_token_norms: per_token,
            aggregation,
        })
    }

    pub fn median(&self) -> f64 {
        median(&self.per_sequence_scores)
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

/// Per-sequence input gradients at `x^(layer)`, one `S × d` matrix per sequence.
pub fn sequence_gradients<T: Real>(
    model: &Model<T>,
    samples: &[Vec<usize>],
    layer: usize,
) -> Result<Vec<Tensor<f64>>, ModelError> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(CHUNK) {
        // Equal lengths share one pass; ragged sets fall back to one sequence at a time.
        let uniform = chunk.iter().all(|s| s.len() == chunk[0].len());
        let groups: Vec<&[Vec<usize>]> = if uniform {
            vec![chunk]
        } else {
            chunk.chunks(1).collect()
        };
        for group in groups {
            let batch = TokenBatch::new(group)?;
            let grad = model.input_gradient(&batch, layer)?.cast::<f64>();
            let (s, d) = (batch.seq(), grad.cols());
            for b in 0..batch.batch() {
                let rows = grad.data()[b * s * d..(b + 1) * s * d].to_vec();
                out.push(Tensor::new(vec![s, d], rows)?);
            }
        }
    }
    Ok(out)
}

pub fn smoothness_report<T: Real>(
    model: &Model<T>,
    samples: &[Vec<usize>],
    layer: usize,
    aggregation: Aggregation,
) -> Result<SmoothnessReport, ModelError> {
    if samples.is_empty() {
        return Err(ModelError::Empty("sample set".into()));
    }
    SmoothnessReport::from_gradients(&sequence_gradients(model, samples, layer)?, aggregation)
}

pub fn compute_c_avg<T: Real>(model: &Model<T>, samples: &[Vec<usize>], layer: usize) -> Result<f64, ModelError> {
    Ok(smoothness_report(model, samples, layer, Aggregation::Concat)?.c_avg)
}

pub fn compute_c_lower<T: Real>(model: &Model<T>, samples: &[Vec<usize>], layer: usize) -> Result<f64, ModelError> {
    Ok(smoothness_report(model, samples, layer, Aggregation::Concat)?.c_lower)
}

/// `c_lower` over each prefix `samples[..=i]`, computed from a single report.
pub fn c_lower_prefixes(report: &SmoothnessReport) -> Vec<f64> {
    report
        .per_sequence_scores
        .iter()
        .scan(f64::NEG_INFINITY, |m, &s| {
            *m = m.max(s);
            Some(*m)
        })
        .collect()
}

pub const HISTOGRAM_BINS: usize = 32;
pub const MIN_DISTRIBUTION_SAMPLES: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<usize>,
}

impl Histogram {
    /// Equal-width bins over `[lo, hi]`; values outside are clamped to the edge bins.
    pub fn new(values: &[f64], lo: f64, hi: f64, bins: usize) -> Self {
        let mut counts = vec![0; bins];
        let width = (hi - lo) / bins as f64;
        for &v in values {
            let b = if width > 0.0 { ((v - lo) / width).floor() } else { 0.0 };
            counts[(b.max(0.0) as usize).min(bins - 1)] += 1;
        }
        Self { lo, hi, counts }
    }

    pub fn edges(&self) -> Vec<f64> {
        let n = self.counts.len();
        (0..=n).map(|i| self.lo + (self.hi - self.lo) * i as f64 / n as f64).collect()
    }
}

/// Histograms of several score sets over one shared range.
pub fn shared_histograms(sets: &[&[f64]], bins: usize) -> Vec<Histogram> {
    let all = sets.iter().flat_map(|s| s.iter().copied());
    let (lo, hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (lo, hi) = if lo.is_finite() { (lo, hi) } else { (0.0, 0.0) };
    sets.iter().map(|s| Histogram::new(s, lo, hi, bins)).collect()
}

/// Per-sequence scores at layer 0 for a sample set of at least 32 sequences.
pub fn smoothness_score_distribution<T: Real>(
    model: &Model<T>,
    samples: &[Vec<usize>],
) -> Result<SmoothnessReport, ModelError> {
    if samples.len() < MIN_DISTRIBUTION_SAMPLES {
        return Err(ModelError::Empty(format!(
            "score distribution needs at least {MIN_DISTRIBUTION_SAMPLES} sequences, got {}",
            samples.len()
        )));
    }
    smoothness_report(model, samples, 0, Aggregation::Concat)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProfileEntry {
    pub layer: usize,
    pub site: &'static str,
    pub mean_norm: f64,
}

/// Mean per-token gradient norm at every block tap.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerGradientProfile {
    pub model_tag: String,
    pub entries: Vec<ProfileEntry>,
}

impl LayerGradientProfile {
    pub fn norm(&self, layer: usize, site: TapSite) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.layer == layer && e.site == site.name())
            .map(|e| e.mean_norm)
    }

    /// Mean of the `site` norm over `layers`.
    pub fn mean_over(&self, layers: std::ops::Range<usize>, site: TapSite) -> f64 {
        let n = layers.len() as f64;
        layers.filter_map(|l| self.norm(l, site)).sum::<f64>() / n
    }
}

/// Per-sequence gradients at every block tap, averaged over predicted tokens.
pub fn layer_gradient_profile<T: Real>(
    model: &Model<T>,
    batch: &TokenBatch,
    model_tag: &str,
) -> Result<LayerGradientProfile, ModelError> {
    model.check_batch(batch, 2)?;
    let g = Graph::new();
    let p = model.bind(&g);
    let f = model.forward(&p, batch, None)?;
    let loss = model.loss(f.logits, batch)?;
    let mut wrt = Vec::new();
    for taps in &f.taps {
        wrt.extend(TapSite::BLOCK_SITES.iter().map(|&s| taps.get(s)));
    }
    let grads = g.backward(loss, &wrt)?;
    let (b, s) = (batch.batch(), batch.seq());
    let mut entries = Vec::new();
    for layer in 0..f.taps.len() {
        for (k, site) in TapSite::BLOCK_SITES.iter().enumerate() {
            let gt = grads.value(layer * TapSite::BLOCK_SITES.len() + k).cast::<f64>();
            let mut total = 0.0;
            let mut count = 0;
            for r in 0..gt.rows() {
                if r % s == s - 1 {
                    continue;
                }
                total += gt.row(r).iter().map(|v| v * v).sum::<f64>().sqrt() * b as f64;
                count += 1;
            }
            entries.push(ProfileEntry {
                layer,
                site: site.name(),
                mean_norm: total / count as f64,
            });
        }
    }
    Ok(LayerGradientProfile {
        model_tag: model_tag.to_string(),
        entries,
    })
}

/// Purely linear network `f(X) = mean_t (W_L ⋯ W_1 x_t)` with a 1-row final map.
///
/// Its per-token input gradient is constant, which makes the bound
/// `c_lower ≤ C_upper = Π ‖W_i‖₂` checkable.
#[derive(Debug, Clone)]
pub struct LinearChain {
    pub weights: Vec<Tensor<f64>>,
}

impl LinearChain {
    pub fn new(weights: Vec<Tensor<f64>>) -> Result<Self, TensorError> {
        for pair in weights.windows(2) {
            if pair[1].cols() != pair[0].rows() {
                return Err(TensorError::ShapeMismatch {
                    op: OpKind::MatMul,
                    lhs: pair[1].shape().to_vec(),
                    rhs: pair[0].shape().to_vec(),
                });
            }
        }
        match weights.last() {
            Some(w) if w.rows() == 1 => Ok(Self { weights }),
            _ => Err(TensorError::InvalidArgument {
                op: OpKind::MatMul,
                msg: "final map of a linear chain must have one output".into(),
            }),
        }
    }

    pub fn c_upper(&self) -> f64 {
        self.weights
            .iter()
            .map(|w| {
                let m = DMatrix::from_row_slice(w.rows(), w.cols(), w.data());
                m.singular_values().max()
            })
            .product()
    }

    /// Gradient of `f` with respect to each token of `x` (tokens as rows), via the graph.
    pub fn input_gradient(&self, x: &Tensor<f64>) -> Result<Tensor<f64>, TensorError> {
        let g = Graph::new();
        let xv = g.param(x.clone());
        let mut h = xv;
        for w in &self.weights {
            h = h.matmul_t(g.constant(w.clone()), false, true)?;
        }
        let f = h.mean()?;
        Ok(g.backward(f, &[xv])?.value(0))
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    use super::*;
    use crate::model::ModelConfig;

    fn randn(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = Normal::new(0.0, 1.0).unwrap();
        Tensor::from_fn(&[rows, cols], |_| n.sample(rng))
    }

    fn model() -> Model<f64> {
        let cfg = ModelConfig {
            n_layer: 2,
            n_head: 2,
            d_hidden: 16,
            d_inter: 24,
            vocab_size: 256,
            max_seq_len: 16,
            use_rms_norm_before_linear: false,
        };
        Model::build(cfg, 21).unwrap()
    }

    fn samples(n: usize, len: usize) -> Vec<Vec<usize>> {
        (0..n).map(|i| (0..len).map(|t| (i * 31 + t * 7 + 65) % 256).collect()).collect()
    }

    #[test]
    fn report_statistics() {
        let g = vec![
            Tensor::from_f64(&[2, 2], &[3.0, 4.0, 0.0, 0.0]).unwrap(),
            Tensor::from_f64(&[2, 2], &[0.0, 1.0, 0.0, 0.0]).unwrap(),
        ];
        let r = SmoothnessReport::from_gradients(&g, Aggregation::Concat).unwrap();
        assert_eq!(r.per_sequence_scores, vec![5.0, 1.0]);
        assert_eq!((r.c_avg, r.c_lower), (3.0, 5.0));
        assert_eq!(r.per_token_norms, vec![5.0, 1.0]);
        let r = SmoothnessReport::from_gradients(&g, Aggregation::TokenMean).unwrap();
        assert_eq!(r.per_sequence_scores, vec![2.5, 0.5]);
        assert!(SmoothnessReport::from_gradients(&[], Aggregation::Concat).is_err());
    }

    #[test]
    fn single_sample_has_equal_bounds() {
        let m = model();
        let r = smoothness_report(&m, &samples(1, 8), 0, Aggregation::Concat).unwrap();
        assert_eq!(r.c_avg, r.c_lower);
        assert_eq!(r.sample_count, 1);
    }

    #[test]
    fn scores_match_the_model_input_gradient() {
        let m = model();
        let s = samples(3, 6);
        let r = smoothness_report(&m, &s, 1, Aggregation::Concat).unwrap();
        for (i, seq) in s.iter().enumerate() {
            let g = m.input_gradient(&TokenBatch::single(seq).unwrap(), 1).unwrap();
            let want = g.sq_norm().sqrt();
            assert!((r.per_sequence_scores[i] - want).abs() < 1e-12 * want.max(1.0));
        }
        assert_eq!(r, smoothness_report(&m, &s, 1, Aggregation::Concat).unwrap());
    }

    #[test]
    fn ragged_samples_are_supported() {
        let m = model();
        let s = vec![vec![1, 2, 3], vec![4, 5, 6, 7, 8]];
        let r = smoothness_report(&m, &s, 0, Aggregation::Concat).unwrap();
        assert_eq!(r.sample_count, 2);
        assert_eq!(r.per_token_norms.len(), 2 + 4);
    }

    #[test]
    fn c_lower_never_decreases_with_more_samples() {
        let m = model();
        let s = samples(10, 6);
        let r = smoothness_report(&m, &s, 0, Aggregation::Concat).unwrap();
        let pre = c_lower_prefixes(&r);
        assert!(pre.windows(2).all(|w| w[1] >= w[0]));
        assert_eq!(*pre.last().unwrap(), r.c_lower);
        assert!(r.c_lower >= r.c_avg);
        assert!(r.per_sequence_scores.iter().all(|v| v.is_finite() && *v > 0.0));
    }

    #[test]
    fn distribution_requires_enough_samples() {
        let m = model();
        assert!(smoothness_score_distribution(&m, &samples(31, 4)).is_err());
        let a = smoothness_score_distribution(&m, &samples(32, 4)).unwrap();
        let b = smoothness_score_distribution(&m, &samples(32, 4)).unwrap();
        let h = shared_histograms(&[&a.per_sequence_scores, &b.per_sequence_scores], HISTOGRAM_BINS);
        assert_eq!(h[0], h[1]);
        assert_eq!(h[0].counts.iter().sum::<usize>(), 32);
        assert_eq!(h[0].edges().len(), HISTOGRAM_BINS + 1);
    }

    #[test]
    fn histogram_binning() {
        let h = Histogram::new(&[0.0, 0.5, 1.0, 2.0, -1.0], 0.0, 1.0, 2);
        assert_eq!(h.counts, vec![2, 3]);
    }

    #[test]
    fn profile_covers_every_tap() {
        let m = model();
        let batch = TokenBatch::new(&samples(2, 6)).unwrap();
        let p = layer_gradient_profile(&m, &batch, "fp").unwrap();
        assert_eq!(p.entries.len(), 2 * 4);
        assert!(p.entries.iter().all(|e| e.mean_norm >= 0.0 && e.mean_norm.is_finite()));
        assert!(p.norm(1, TapSite::PostAttentionLayernormOut).unwrap() > 0.0);
        // Layer 0 input tap is x^(0); its mean norm matches the direct input gradient.
        let g = m.input_gradient(&batch, 0).unwrap();
        let mut total = 0.0;
        for r in 0..g.rows() {
            if r % 6 != 5 {
                total += g.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            }
        }
        let want = total / 10.0;
        assert!((p.norm(0, TapSite::InputLayernormIn).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn constant_gradient_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let chain = LinearChain::new(vec![randn(1, 5, &mut rng)]).unwrap();
        let grads: Vec<_> = (0..4)
            .map(|_| chain.input_gradient(&randn(6, 5, &mut rng)).unwrap())
            .collect();
        let r = SmoothnessReport::from_gradients(&grads, Aggregation::Concat).unwrap();
        assert!((r.c_avg - r.c_lower).abs() < 1e-15);
    }

    #[test]
    fn linear_chain_sandwich() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let chain = LinearChain::new(vec![randn(7, 5, &mut rng), randn(4, 7, &mut rng), randn(1, 4, &mut rng)])
                .unwrap();
            let grads: Vec<_> = (0..8)
                .map(|_| chain.input_gradient(&randn(3, 5, &mut rng)).unwrap())
                .collect();
            let r = SmoothnessReport::from_gradients(&grads, Aggregation::Concat).unwrap();
            assert!(r.c_avg <= r.c_lower && r.c_lower <= chain.c_upper());
        }
        assert!(LinearChain::new(vec![randn(2, 3, &mut rng)]).is_err());
    }
}
