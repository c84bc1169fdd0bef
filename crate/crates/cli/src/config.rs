//! Experiment configuration: one TOML document, unknown keys rejected at every level.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use quantlab_core::lgp::LgpConfig;
use quantlab_core::lgr::LgrConfig;
use quantlab_core::model::{ModelConfig, TrainSchedule};
use quantlab_core::neighborhood::NeighborhoodSpec;
use quantlab_core::quant::QuantSpec;
use quantlab_core::smoothness::Aggregation;

use crate::error::HarnessError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationConfig {
    pub batches: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    /// Hessian damping as a fraction of the mean diagonal.
    pub damping: f64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            batches: 4,
            batch_size: 8,
            seq_len: 64,
            damping: 0.01,
        }
    }
}

/// Held-out evaluation and smoothness probing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub seq_len: usize,
    pub heldout_batches: usize,
    pub heldout_batch_size: usize,
    /// Sequences per smoothness report; the score distribution needs at least 32.
    pub probe_samples: usize,
    pub smooth_layer: usize,
    pub aggregation: Aggregation,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            seq_len: 64,
            heldout_batches: 4,
            heldout_batch_size: 8,
            probe_samples: 64,
            smooth_layer: 0,
            aggregation: Aggregation::Concat,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    /// Bit widths swept by `quantize`, `smoothness`, `rppl` and `anisotropy`.
    pub bits: Vec<u8>,
    /// Byte corpus; when absent a generated corpus of `synthetic_bytes` is used per seed.
    pub corpus_path: Option<PathBuf>,
    pub synthetic_bytes: usize,
    /// Full-precision checkpoint to start from instead of training.
    pub fp_checkpoint: Option<PathBuf>,
    pub output_dir: PathBuf,
    /// Projection examined by `anisotropy`.
    pub anisotropy_site: String,
    /// Magnitudes tried by `ablate-alpha1`.
    pub alpha1_grid: Vec<f64>,
    pub model: ModelConfig,
    pub train: TrainSchedule,
    pub quant: QuantSpec,
    pub calibration: CalibrationConfig,
    pub eval: EvalConfig,
    pub lgp: LgpConfig,
    pub lgr: LgrConfig,
    pub neighborhood: NeighborhoodSpec,
}

impl Default for ExperimentConfig {
    /// Desk-scale preset: 4 layers, width 128, 4 heads, sequences of 256.
    fn default() -> Self {
        let train = TrainSchedule {
            seq_len: 256,
            ..TrainSchedule::default()
        };
        Self {
            seeds: vec![0],
            bits: vec![8, 4, 3, 2],
            corpus_path: None,
            synthetic_bytes: 1 << 20,
            fp_checkpoint: None,
            output_dir: PathBuf::from("runs/default"),
            anisotropy_site: "layers.0.attn.q_proj.weight".into(),
            alpha1_grid: vec![0.0, 1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0],
            model: ModelConfig::default(),
            train,
            quant: QuantSpec::new(4, 64),
            calibration: CalibrationConfig::default(),
            eval: EvalConfig::default(),
            lgp: LgpConfig::default(),
            lgr: LgrConfig {
                schedule: TrainSchedule {
                    steps: 400,
                    warmup: 20,
                    lr: 2e-3,
                    ..train
                },
                ..LgrConfig::default()
            },
            neighborhood: NeighborhoodSpec {
                context_length: 128,
                ..NeighborhoodSpec::default()
            },
        }
    }
}

impl ExperimentConfig {
    /// Small preset that trains in under a minute on one core.
    pub fn toy() -> Self {
        let model = ModelConfig {
            n_layer: 4,
            n_head: 4,
            d_hidden: 32,
            d_inter: 96,
            vocab_size: 256,
            max_seq_len: 64,
            use_rms_norm_before_linear: false,
        };
        let train = TrainSchedule {
            steps: 800,
            batch_size: 16,
            seq_len: 32,
            lr: 3e-3,
            warmup: 50,
            ..TrainSchedule::default()
        };
        let quant = QuantSpec::new(2, 16);
        Self {
            seeds: vec![0, 1, 2, 3, 4],
            synthetic_bytes: 300_000,
            output_dir: PathBuf::from("runs/toy"),
            model,
            train,
            quant,
            calibration: CalibrationConfig {
                seq_len: 32,
                ..CalibrationConfig::default()
            },
            eval: EvalConfig {
                seq_len: 32,
                ..EvalConfig::default()
            },
            lgp: LgpConfig {
                spec: quant,
                ..LgpConfig::default()
            },
            lgr: LgrConfig {
                schedule: TrainSchedule {
                    steps: 600,
                    warmup: 20,
                    lr: 2e-3,
                    ..train
                },
                // The penalty is ~1e-3 of the loss here, so it needs a long active phase to register.
                activation_fraction: 0.25,
                c_avg_every: 100,
                probe_sequences: 32,
                ..LgrConfig::default()
            },
            neighborhood: NeighborhoodSpec {
                context_length: 32,
                ..NeighborhoodSpec::default()
            },
            ..Self::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        self.model.validate()?;
        self.quant.validate()?;
        self.lgp.validate()?;
        self.lgr.validate(self.model.n_layer)?;
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        for &b in &self.bits {
            QuantSpec { bits: b, ..self.quant }.validate()?;
        }
        let max = self.model.max_seq_len;
        for (name, len) in [
            ("train.seq_len", self.train.seq_len),
            ("lgr.schedule.seq_len", self.lgr.schedule.seq_len),
            ("calibration.seq_len", self.calibration.seq_len),
            ("eval.seq_len", self.eval.seq_len),
            ("neighborhood.context_length + 1", self.neighborhood.context_length + 1),
        ] {
            if len < 2 || len > max {
                return bad(format!("{name} = {len} must lie in [2, model.max_seq_len = {max}]"));
            }
        }
        if self.neighborhood.k_max == 0 || self.neighborhood.k_max > self.model.vocab_size {
            return bad(format!("neighborhood.k_max = {} must lie in [1, vocab]", self.neighborhood.k_max));
        }
        if self.eval.smooth_layer > self.model.n_layer {
            return bad(format!("eval.smooth_layer = {} exceeds n_layer", self.eval.smooth_layer));
        }
        if self.calibration.batches == 0 || self.eval.heldout_batches == 0 || self.eval.probe_samples == 0 {
            return bad("calibration.batches, eval.heldout_batches and eval.probe_samples must be positive".into());
        }
        if !(self.calibration.damping >= 0.0) {
            return bad(format!("calibration.damping = {} must be >= 0", self.calibration.damping));
        }
        if self.alpha1_grid.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
            return bad("alpha1_grid entries must be finite and >= 0".into());
        }
        if self.corpus_path.is_none() && self.synthetic_bytes < 4 * quantlab_core::corpus::SPLIT_BLOCK {
            return bad(format!("synthetic_bytes = {} is too small to split", self.synthetic_bytes));
        }
        Ok(())
    }
}
