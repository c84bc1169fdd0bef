//! Experiment building blocks and the table-producing runs behind each subcommand.
//!
//! Every random draw comes from a stream keyed by the seed and a purpose tag,
//! so a table depends only on the config, the seed list and the bit widths.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use quantlab_core::checkpoint::Checkpoint;
use quantlab_core::corpus::{ingest_corpus, mixed_text, split_corpus, Split, SPLIT_BLOCK};
use quantlab_core::gptq::{capture_calibration, gptq_quantize_model, CalibrationRecord};
use quantlab_core::lgp::{alpha1_scale_search, lgp_quantize_model, LgpConfig, LgpResult};
use quantlab_core::lgr::{qat_train, LgrConfig, LossBreakdown, QatResult};
use quantlab_core::model::{sample_batch, train_baseline, Model, TokenBatch, TrainSchedule};
use quantlab_core::neighborhood::{effective_candidates, rppl_curve, sample_contexts, RpplCurve, DEFAULT_THRESHOLD_RATIO};
use quantlab_core::quant::{quantize_model_rtn, QuantSpec, QuantizedModel};
use quantlab_core::smoothness::{layer_gradient_profile, shared_histograms, smoothness_report, HISTOGRAM_BINS};
use quantlab_core::weightspace::{anisotropy_sweep, default_alpha_grid, rank_profile, CosineMode};

use crate::artifacts::OutputDir;
use crate::config::ExperimentConfig;
use crate::error::HarnessError;

/// Experiments run in single precision.
pub type FpModel = Model<f32>;

type Result<T> = std::result::Result<T, HarnessError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Rtn,
    Gptq,
    Lgp,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Self::Rtn => "rtn",
            Self::Gptq => "gptq",
            Self::Lgp => "lgp",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Train,
    Quantize,
    Smoothness,
    Rppl,
    GradientProfile,
    Anisotropy,
    Feasibility,
    AblateAlpha1,
    AblateRegLayer,
}

impl Experiment {
    pub const ALL: [Experiment; 9] = [
        Self::Train,
        Self::Quantize,
        Self::Smoothness,
        Self::Rppl,
        Self::GradientProfile,
        Self::Anisotropy,
        Self::Feasibility,
        Self::AblateAlpha1,
        Self::AblateRegLayer,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Quantize => "quantize",
            Self::Smoothness => "smoothness",
            Self::Rppl => "rppl",
            Self::GradientProfile => "gradient-profile",
            Self::Anisotropy => "anisotropy",
            Self::Feasibility => "feasibility",
            Self::AblateAlpha1 => "ablate-alpha1",
            Self::AblateRegLayer => "ablate-reg-layer",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|e| e.name() == name)
    }

    /// Whether the run sweeps bit widths.
    pub fn uses_bits(self) -> bool {
        matches!(self, Self::Quantize | Self::Smoothness | Self::Rppl | Self::Anisotropy | Self::AblateAlpha1)
    }

    pub fn uses_method(self) -> bool {
        matches!(self, Self::Quantize | Self::Smoothness | Self::Rppl)
    }
}

/// Resolved command-line choices for one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    pub seeds: Vec<u64>,
    pub bits: Vec<u8>,
    pub method: Option<Method>,
}

const CALIB_STREAM: u64 = 0x6361_6c69_6272;
const HELDOUT_STREAM: u64 = 0x6865_6c64;
const PROBE_STREAM: u64 = 0x7072_6f62;
const CONTEXT_STREAM: u64 = 0x6374_78;

fn stream(seed: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ tag)
}

fn stream_seed(seed: u64, tag: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ tag
}

/// Corpus for `seed`: the configured file, or a generated stream keyed by the seed.
pub fn load_corpus(cfg: &ExperimentConfig, seed: u64) -> Result<Split> {
    let tokens = match &cfg.corpus_path {
        Some(p) => ingest_corpus(p)?,
        None => mixed_text(cfg.synthetic_bytes, 100 + seed),
    };
    let split = split_corpus(&tokens, SPLIT_BLOCK, seed);
    if split.heldout.len() < cfg.eval.seq_len.max(cfg.neighborhood.context_length) {
        return Err(HarnessError::Input(format!(
            "corpus of {} bytes leaves too little held-out text",
            tokens.len()
        )));
    }
    Ok(split)
}

/// Trained (or loaded) full-precision model and its loss trace.
pub fn fp_model(cfg: &ExperimentConfig, seed: u64, split: &Split) -> Result<(FpModel, Vec<f64>)> {
    if let Some(path) = &cfg.fp_checkpoint {
        let ck = Checkpoint::<f32>::load(path)?;
        if ck.model.config() != &cfg.model {
            return Err(HarnessError::Config(format!(
                "checkpoint {} does not match the [model] section",
                path.display()
            )));
        }
        return Ok((ck.model, Vec::new()));
    }
    let mut model = Model::build(cfg.model, seed)?;
    let sched = TrainSchedule { seed, ..cfg.train };
    let losses = train_baseline(&mut model, &split.train, &sched)?;
    Ok((model, losses))
}

fn draw_batches(text: &[u8], n: usize, batch: usize, seq: usize, rng: &mut ChaCha8Rng) -> Result<Vec<TokenBatch>> {
    Ok((0..n).map(|_| sample_batch(text, batch, seq, rng)).collect::<std::result::Result<_, _>>()?)
}

pub fn calibration_batches(cfg: &ExperimentConfig, split: &Split, seed: u64) -> Result<Vec<TokenBatch>> {
    let c = &cfg.calibration;
    draw_batches(&split.train, c.batches, c.batch_size, c.seq_len, &mut stream(seed, CALIB_STREAM))
}

pub fn heldout_batches(cfg: &ExperimentConfig, split: &Split, seed: u64) -> Result<Vec<TokenBatch>> {
    let e = &cfg.eval;
    draw_batches(&split.heldout, e.heldout_batches, e.heldout_batch_size, e.seq_len, &mut stream(seed, HELDOUT_STREAM))
}

pub fn probe_samples(cfg: &ExperimentConfig, split: &Split, seed: u64) -> Result<Vec<Vec<usize>>> {
    Ok(sample_contexts(&split.heldout, cfg.eval.probe_samples, cfg.eval.seq_len, stream_seed(seed, PROBE_STREAM))?)
}

pub fn rppl_contexts(cfg: &ExperimentConfig, split: &Split, seed: u64) -> Result<Vec<Vec<usize>>> {
    let n = &cfg.neighborhood;
    let key = stream_seed(seed, CONTEXT_STREAM) ^ n.seed;
    Ok(sample_contexts(&split.heldout, n.n_contexts, n.context_length, key)?)
}

/// Mean held-out loss; a non-finite value is a numerical failure.
pub fn heldout_loss(model: &FpModel, batches: &[TokenBatch]) -> Result<f64> {
    let mut total = 0.0;
    for b in batches {
        total += model.lm_loss(b)?;
    }
    let mean = total / batches.len() as f64;
    if !mean.is_finite() {
        return Err(HarnessError::Numerical(format!("held-out loss is {mean}")));
    }
    Ok(mean)
}

pub fn spec_for(cfg: &ExperimentConfig, method: Method, bits: u8) -> QuantSpec {
    let base = if method == Method::Lgp { cfg.lgp.spec } else { cfg.quant };
    QuantSpec { bits, ..base }
}

pub fn quantize(
    cfg: &ExperimentConfig,
    method: Method,
    fp: &FpModel,
    bits: u8,
    calib: &[TokenBatch],
) -> Result<QuantizedModel<f32>> {
    let spec = spec_for(cfg, method, bits);
    Ok(match method {
        Method::Rtn => quantize_model_rtn(fp, Some(&spec))?,
        Method::Gptq => gptq_quantize_model(fp, calib, &spec, cfg.calibration.damping)?,
        Method::Lgp => {
            let r = run_lgp(cfg, fp, calib, spec, cfg.lgp.alpha1)?;
            QuantizedModel {
                model: r.model,
                layers: r.layers,
            }
        }
    })
}

pub fn run_lgp(cfg: &ExperimentConfig, fp: &FpModel, calib: &[TokenBatch], spec: QuantSpec, alpha1: f64) -> Result<LgpResult<f32>> {
    let lc = LgpConfig { spec, alpha1, ..cfg.lgp };
    Ok(lgp_quantize_model(fp, calib, &lc)?)
}

/// QAT settings for `seed`: the configured regularizer section with the
/// training and probe streams keyed by the seed.
pub fn qat_config(cfg: &ExperimentConfig, seed: u64, alpha2: f64, reg_layer: usize) -> LgrConfig {
    LgrConfig {
        alpha2,
        reg_layer,
        schedule: TrainSchedule { seed, ..cfg.lgr.schedule },
        probe_seed: stream_seed(seed, PROBE_STREAM) ^ cfg.lgr.probe_seed,
        ..cfg.lgr
    }
}

/// Ternary QAT from `fp` with the given regularizer settings.
pub fn qat(cfg: &ExperimentConfig, fp: &FpModel, split: &Split, seed: u64, alpha2: f64, reg_layer: usize) -> Result<QatResult<f32>> {
    Ok(qat_train(fp, &split.train, &qat_config(cfg, seed, alpha2, reg_layer))?)
}

/// Mean `l_lm` over the last tenth of a trace (at least one step).
pub fn final_l_lm(trace: &[LossBreakdown]) -> f64 {
    tail_mean(&trace.iter().map(|t| t.l_lm).collect::<Vec<_>>())
}

pub fn tail_mean(values: &[f64]) -> f64 {
    let n = (values.len() / 10).max(1).min(values.len());
    values[values.len() - n..].iter().sum::<f64>() / n.max(1) as f64
}

fn model_tag(method: Method, bits: u8) -> String {
    format!("{}_w{bits}", method.name())
}

fn calibration_records(cfg: &ExperimentConfig, fp: &FpModel, split: &Split, seed: u64) -> Result<BTreeMap<String, CalibrationRecord>> {
    Ok(capture_calibration(fp, &calibration_batches(cfg, split, seed)?)?)
}

#[derive(Debug, Serialize)]
pub struct LossRow {
    pub seed: u64,
    pub variant: &'static str,
    pub step: usize,
    pub l_lm: f64,
    pub l_smooth: f64,
    pub total: f64,
    pub alpha2: f64,
    pub lr: f64,
}

#[derive(Debug, Serialize)]
pub struct CAvgRow {
    pub seed: u64,
    pub variant: &'static str,
    pub step: usize,
    pub c_avg: f64,
}

#[derive(Debug, Serialize)]
pub struct TrainSummaryRow {
    pub seed: u64,
    pub variant: &'static str,
    pub final_l_lm: f64,
    pub heldout_loss: f64,
    pub c_avg: f64,
    pub checkpoint: String,
}

fn run_train(cfg: &ExperimentConfig, opts: &RunOptions, out: &mut OutputDir) -> Result<()> {
    let (mut losses, mut c_avgs, mut summary) = (Vec::new(), Vec::new(), Vec::new());
    let layer = cfg.lgr.reg_layer;
    for &seed in &opts.seeds {
        let split = load_corpus(cfg, seed)?;
        let held = heldout_batches(cfg, &split, seed)?;
        let probes = probe_samples(cfg, &split, seed)?;
        let (fp, trace) = fp_model(cfg, seed, &split)?;
        let sched = TrainSchedule { seed, ..cfg.train };
        losses.extend(trace.iter().enumerate().map(|(step, &l)| LossRow {
            seed,
            variant: "fp",
            step,
            l_lm: l,
            l_smooth: 0.0,
            total: l,
            alpha2: 0.0,
            lr: sched.lr_at(step),
        }));
        let fp_c = smoothness_report(&fp, &probes, layer, cfg.eval.aggregation)?.c_avg;
        c_avgs.push(CAvgRow { seed, variant: "fp", step: trace.len(), c_avg: fp_c });
        let save = |name: String, model: &FpModel, out: &mut OutputDir| -> Result<String> {
            let path = out.path_for(&name);
            Checkpoint::new(model.clone()).save(path)?;
            Ok(name)
        };
        summary.push(TrainSummaryRow {
            seed,
            variant: "fp",
            final_l_lm: if trace.is_empty() { f64::NAN } else { tail_mean(&trace) },
            heldout_loss: heldout_loss(&fp, &held)?,
            c_avg: fp_c,
            checkpoint: save(format!("fp_seed{seed}.qlab"), &fp, out)?,
        });
        for (variant, alpha2) in [("b158", 0.0), ("b158_lgr", cfg.lgr.alpha2)] {
            let r = qat(cfg, &fp, &split, seed, alpha2, layer)?;
            losses.extend(r.trace.iter().map(|t| LossRow {
                seed,
                variant,
                step: t.step,
                l_lm: t.l_lm,
                l_smooth: t.l_smooth,
                total: t.total,
                alpha2: t.alpha2,
                lr: t.lr,
            }));
            c_avgs.extend(r.c_avg_trace.iter().map(|c| CAvgRow { seed, variant, step: c.step, c_avg: c.c_avg }));
            summary.push(TrainSummaryRow {
                seed,
                variant,
                final_l_lm: final_l_lm(&r.trace),
                heldout_loss: heldout_loss(&r.model, &held)?,
                c_avg: smoothness_report(&r.model, &probes, layer, cfg.eval.aggregation)?.c_avg,
                checkpoint: save(format!("{variant}_seed{seed}.qlab"), &r.model, out)?,
            });
        }
    }
    out.write_csv("train_loss.csv", &losses)?;
    out.write_csv("c_avg_trace.csv", &c_avgs)?;
    out.write_csv("train_summary.csv", &summary)
}

#[derive(Debug, Serialize)]
pub struct QuantRow {
    pub seed: u64,
    pub model: String,
    pub bits: Option<u8>,
    pub group_size: Option<usize>,
    pub heldout_loss: f64,
    pub heldout_ppl: f64,
    pub c_avg: f64,
    pub c_lower: f64,
    pub checkpoint: String,
}

fn run_quantize(cfg: &ExperimentConfig, opts: &RunOptions, out: &mut OutputDir) -> Result<()> {
    let method = opts.method.unwrap_or_default();
    let mut rows = Vec::new();
    for &seed in &opts.seeds {
        let split = load_corpus(cfg, seed)?;
        let held = heldout_batches(cfg, &split, seed)?;
        let probes = probe_samples(cfg, &split, seed)?;
        let calib = calibration_batches(cfg, &split, seed)?;
        let (fp, _) = fp_model(cfg, seed, &split)?;
        let mut row = |tag: String, bits: Option<u8>, q: &QuantizedModel<f32>, out: &mut OutputDir| -> Result<()> {
            let loss = heldout_loss(&q.model, &held)?;
            let rep = smoothness_report(&q.model, &probes, cfg.eval.smooth_layer, cfg.eval.aggregation)?;
            let name = format!("{tag}_seed{seed}.qlab");
            let mut ck = Checkpoint::new(q.model.clone());
            ck.quantized = q.layers.clone();
            ck.save(out.path_for(&name))?;
            rows.push(QuantRow {
                seed,
                model: tag,
                bits,
                group_size: bits.map(|b| spec_for(cfg, method, b).group_size),
                heldout_loss: loss,
                heldout_ppl: loss.exp(),
                c_avg: rep.c_avg,
                c_lower: rep.c_lower,
                checkpoint: name,
            });
            Ok(())
        };
        let plain = QuantizedModel { model: fp.clone(), layers: BTreeMap::new() };
        row("fp".into(), None, &plain, out)?;
        for &bits in &opts.bits {
            let q = quantize(cfg, method, &fp, bits, &calib)?;
            row(model_tag(method, bits), Some(bits), &q, out)?;
        }
    }
    out.write_csv("quantize.csv", &rows)
}

#[derive(Debug, Serialize)]
pub struct SmoothRow {
    pub seed: u64,
    pub model: String,
    pub bits: Option<u8>,
    pub layer: usize,
    pub c_avg: f64,
    pub c_lower: f64,
    pub median: f64,
    pub samples: usize,
}

#[derive(Debug, Serialize)]
pub struct ScoreRow {
    pub seed: u64,
    pub model: String,
    pub index: usize,
    pub score: f64,
}

#[derive(Debug, Serialize)]
pub struct HistogramRow {
    pub seed: u64,
    pub model: String,
    pub bin: usize,
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

fn run_smoothness(cfg: &ExperimentConfig, opts: &RunOptions, out: &mut OutputDir) -> Result<()> {
    let method = opts.method.unwrap_or_default();
    let layer = cfg.eval.smooth_layer;
    let (mut rows, mut scores, mut hist) = (Vec::new(), Vec::new(), Vec::new());
    for &seed in &opts.seeds {
        let split = load_corpus(cfg, seed)?;
        let probes = probe_samples(cfg, &split, seed)?;
        let calib = calibration_batches(cfg, &split, seed)?;
        let (fp, _) = fp_model(cfg, seed, &split)?;
        let mut models = vec![("fp".to_string(), None, fp.clone())];
        for &bits in &opts.bits {
            models.push((model_tag(method, bits), Some(bits), quantize(cfg, method, &fp, bits, &calib)?.model));
        }
        let mut reports = Vec::new();
        for (tag, bits, m) in &models {
            let rep = smoothness_report(m, &probes, layer, cfg.eval.aggregation)?;
            rows.push(SmoothRow {
                seed,
                model: tag.clone(),
                bits: *bits,
                layer,
                c_avg: rep.c_avg,
                c_lower: rep.c_lower,
                median: rep.median(),
                samples: rep.sample_count,
            });
            scores.extend(rep.per_sequence_scores.iter().enumerate().map(|(index, &score)| ScoreRow {
                seed,
                model: tag.clone(),
                index,
                score,
            }));
            reports.push(rep);
        }
        let sets: Vec<&[f64]> = reports.iter().map(|r| r.per_sequence_scores.as_slice()).collect();
        for ((tag, _, _), h) in models.iter().zip(shared_histograms(&sets, HISTOGRAM_BINS)) {
            let edges = h.edges();
            hist.extend(h.counts.iter().enumerate().map(|(bin, &count)| HistogramRow {
                seed,
                model: tag.clone(),
                bin,
                lo: edges[bin],
                hi: edges[bin + 1],
                count,
            }));
        }
    }
    out.write_csv("smoothness.csv", &rows)?;
    out.write_csv("smoothness_scores.csv", &scores)?;
    out.write_csv("smoothness_histogram.csv", &hist)
}

#[derive(Debug, Serialize)]
pub struct RpplRow {
    pub seed: u64,
    pub model: String,
    pub k: usize,
    pub rppl: f64,
}

#[derive(Debug, Serialize)]
pub struct RpplSummaryRow {
    pub seed: u64,
    pub model: String,
    pub normalized_slope: f64,
    pub effective_candidates: f64,
    /// Share of contexts whose curve is non-decreasing in `k`.
    pub monotone_fraction: f64,
}

/// Share of per-context curves that never decrease.
pub fn monotone_fraction(curve: &RpplCurve) -> f64 {
    let ok = curve.per_context.iter().filter(|c| c.windows(2).all(|w| w[0] <= w[1])).count();
    ok as f64 / curve.per_context.len().max(1) as f64
}

fn run_rppl(cfg: &ExperimentConfig, opts: &RunOptions, out: &mut OutputDir) -> Result<()> {
    let method = opts.method.unwrap_or_default();
    let (mut rows, mut summary) = (Vec::new(), Vec::new());
    for &seed in &opts.seeds {
        let split = load_corpus(cfg, seed)?;
        let contexts = rppl_contexts(cfg, &split, seed)?;
        let calib = calibration_batches(cfg, &split, seed)?;
        let (fp, _) = fp_model(cfg, seed, &split)?;
        let mut models = vec![("fp".to_string(), fp.clone())];
        for &bits in &opts.bits {
            models.push((model_tag(method, bits), quantize(cfg, method, &fp, bits, &calib)?.model));
        }
        for (tag, m) in &models {
            let curve = rppl_curve(m, &fp, &contexts, &cfg.neighborhood)?;
            rows.extend(curve.k_values.iter().zip(&curve.rppl).map(|(&k, &rppl)| RpplRow {
                seed,
                model: tag.clone(),
                k,
                rppl,
            }));
            summary.push(RpplSummaryRow {
                seed,
                model: tag.clone(),
                normalized_slope: curve.normalized_slope(),
                effective_candidates: effective_candidates(&curve, DEFAULT_THRESHOLD_RATIO)?.mean,
                monotone_fraction: monotone_fraction(&curve),
            });
        }
    }
    out.write_csv("rppl.csv", &rows)?;
    out.write_csv("rppl_summary.csv", &summary)
}

#[derive(Debug, Serialize)]
pub struct ProfileRow {
    pub seed: u64,
    pub model: &'static str,
    pub layer: usize,
    pub site: &'static str,
    pub mean_norm: f64,
}

fn run_gradient_profile(cfg: &ExperimentConfig, opts: &RunOptions, out: &mut OutputDir) -> Result<()> {
    let mut rows = Vec::new();
    for &seed in &opts.seeds {
        let split = load_corpus(cfg, seed)?;
        let batch = TokenBatch::new(&probe_samples(cfg, &split, seed)?)?;
        let (fp, _) = fp_model(cfg, seed, &split)?;
        let ternary = qat(cfg, &fp, &split, seed, 0.0, cfg.lgr.reg_layer)?.model;
        for (tag, m) in [("fp", &fp), ("b158", &ternary)] {
            let p = layer_gradient_profile(m, &batch, tag)?;
            rows.extend(p.entries.iter().map(|e| ProfileRow {
                seed,
                model: tag,
                layer: e.layer,
                site: e.site,
                mean_norm: e.mean_norm,
            }));
        }
    }
    out.write_csv("gradient_profile.csv", &rows)
}

#[derive(Debug, Serialize)]
pub struct AnisotropyRow {
    pub seed: u64,
    pub site: String,
    pub bits: u8,
    pub alpha: f64,
    pub cos_fwd: f64,
    pub cos_bwd: f64,
}

fn run_anisotropy(cfg: &ExperimentConfig, opts: &RunOptions, out: &mut OutputDir) -> Result<()> {
    let mut rows = Vec::new();
    for &seed in &opts.seeds {
        let split = load_corpus(cfg, seed)?;
        let (fp, _) = fp_model(cfg, seed, &split)?;
        let records = calibration_records(cfg, &fp, &split, seed)?;
        let rec = records
            .get(&cfg.anisotropy_site)
            .ok_or_else(|| HarnessError::Config(format!("anisotropy_site `{}` is not a projection", cfg.anisotropy_site)))?;
        let w = fp.param(&cfg.anisotropy_site)?.cast::<f64>();
        for &bits in &opts.bits {
            let spec = spec_for(cfg, Method::Gptq, bits);
            let sweep = anisotropy_sweep(&w, &rec.x, &rec.g, &spec, &default_alpha_grid(), cfg.calibration.damping, CosineMode::Flattened)?;
            rows.extend(sweep.points.iter().map(|p| AnisotropyRow {
                seed,
                site: cfg.anisotropy_site.clone(),
                bits,
                alpha: p.alpha,
                cos_fwd: p.cos_fwd,
                cos_bwd: p.cos_bwd,
            }));
        }
    }
    out.write_csv("anisotropy.csv", &rows)
}

#[derive(Debug, Serialize)]
pub struct FeasibilityRow {
    pub seed: u64,
    pub layer_name: String,
    pub rank_x: usize,
    pub rank_g: usize,
    pub d_in: usize,
    pub d_out: usize,
    pub condition_holds: bool,
    pub borderline: bool,
}

fn run_feasibility(cfg: &ExperimentConfig, opts: &RunOptions, out: &mut OutputDir) -> Result<()> {
    let mut rows = Vec::new();
    for &seed in &opts.seeds {
        let split = load_corpus(cfg, seed)?;
        let (fp, _) = fp_model(cfg, seed, &split)?;
        let records = calibration_records(cfg, &fp, &split, seed)?;
        rows.extend(rank_profile(&records).into_iter().map(|r| FeasibilityRow {
            seed,
            layer_name: r.layer_name,
            rank_x: r.rank_x,
            rank_g: r.rank_g,
            d_in: r.d_in,
            d_out: r.d_out,
            condition_holds: r.condition_holds,
            borderline: r.borderline,
        }));
    }
    out.write_csv("feasibility.csv", &rows)
}

#[derive(Debug, Serialize)]
pub struct AlphaRow {
    pub seed: u64,
    pub bits: u8,
    pub alpha1: f64,
    pub heldout_loss: f64,
    /// Sums over blocks of the final distillation terms.
    pub fit: f64,
    pub grad: f64,
}

#[derive(Debug, Serialize)]
pub struct AlphaSearchRow {
    pub seed: u64,
    pub bits: u8,
    pub fit: f64,
    pub grad: f64,
    pub chosen: f64,
    pub qualifying: String,
    pub degenerate: bool,
}

fn run_ablate_alpha1(cfg: &ExperimentConfig, opts: &RunOptions, out: &mut OutputDir) -> Result<()> {
    let (mut rows, mut search) = (Vec::new(), Vec::new());
    let magnitudes: Vec<f64> = cfg.alpha1_grid.iter().copied().filter(|&a| a > 0.0).collect();
    for &seed in &opts.seeds {
        let split = load_corpus(cfg, seed)?;
        let held = heldout_batches(cfg, &split, seed)?;
        let calib = calibration_batches(cfg, &split, seed)?;
        let (fp, _) = fp_model(cfg, seed, &split)?;
        for &bits in &opts.bits {
            let spec = spec_for(cfg, Method::Lgp, bits);
            if !magnitudes.is_empty() {
                let c = alpha1_scale_search(&fp, &calib, 0, &spec, &magnitudes)?;
                search.push(AlphaSearchRow {
                    seed,
                    bits,
                    fit: c.terms.fit,
                    grad: c.terms.grad,
                    chosen: c.chosen,
                    qualifying: c.qualifying.iter().map(|a| a.to_string()).collect::<Vec<_>>().join(";"),
                    degenerate: c.degenerate,
                });
            }
            for &alpha1 in &cfg.alpha1_grid {
                let r = run_lgp(cfg, &fp, &calib, spec, alpha1)?;
                rows.push(AlphaRow {
                    seed,
                    bits,
                    alpha1,
                    heldout_loss: heldout_loss(&r.model, &held)?,
                    fit: r.traces.iter().map(|t| t.last.fit).sum(),
                    grad: r.traces.iter().map(|t| t.last.grad).sum(),
                });
            }
        }
    }
    out.write_csv("ablate_alpha1.csv", &rows)?;
    if !search.is_empty() {
        out.write_csv("alpha1_search.csv", &search)?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct RegLayerRow {
    pub seed: u64,
    pub variant: &'static str,
    pub reg_layer: Option<usize>,
    pub alpha2: f64,
    pub final_l_lm: f64,
    pub heldout_loss: f64,
    pub c_avg_layer0: f64,
    pub c_avg_layer1: f64,
}

fn run_ablate_reg_layer(cfg: &ExperimentConfig, opts: &RunOptions, out: &mut OutputDir) -> Result<()> {
    let mut rows = Vec::new();
    for &seed in &opts.seeds {
        let split = load_corpus(cfg, seed)?;
        let held = heldout_batches(cfg, &split, seed)?;
        let probes = probe_samples(cfg, &split, seed)?;
        let (fp, _) = fp_model(cfg, seed, &split)?;
        let runs = [("b158", None, 0.0), ("lgr", Some(0), cfg.lgr.alpha2), ("lgr", Some(1), cfg.lgr.alpha2)];
        for (variant, reg_layer, alpha2) in runs {
            let r = qat(cfg, &fp, &split, seed, alpha2, reg_layer.unwrap_or(cfg.lgr.reg_layer))?;
            let c = |l| smoothness_report(&r.model, &probes, l, cfg.eval.aggregation).map(|rep| rep.c_avg);
            rows.push(RegLayerRow {
                seed,
                variant,
                reg_layer,
                alpha2,
                final_l_lm: final_l_lm(&r.trace),
                heldout_loss: heldout_loss(&r.model, &held)?,
                c_avg_layer0: c(0)?,
                c_avg_layer1: c(1)?,
            });
        }
    }
    out.write_csv("ablate_reg_layer.csv", &rows)
}

/// Runs `exp` and writes its tables into `out`.
pub fn run_experiment(exp: Experiment, cfg: &ExperimentConfig, opts: &RunOptions, out: &mut OutputDir) -> Result<()> {
    if exp.uses_bits() && opts.bits.is_empty() {
        return Err(HarnessError::Config(format!("`{}` needs at least one bit width", exp.name())));
    }
    if opts.method == Some(Method::Lgp) {
        cfg.lgp.validate()?;
    }
    match exp {
        Experiment::Train => run_train(cfg, opts, out),
        Experiment::Quantize => run_quantize(cfg, opts, out),
        Experiment::Smoothness => run_smoothness(cfg, opts, out),
        Experiment::Rppl => run_rppl(cfg, opts, out),
        Experiment::GradientProfile => run_gradient_profile(cfg, opts, out),
        Experiment::Anisotropy => run_anisotropy(cfg, opts, out),
        Experiment::Feasibility => run_feasibility(cfg, opts, out),
        Experiment::AblateAlpha1 => run_ablate_alpha1(cfg, opts, out),
        Experiment::AblateRegLayer => run_ablate_reg_layer(cfg, opts, out),
    }
}
