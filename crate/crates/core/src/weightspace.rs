//! Geometry of quantized weight space.
//!
//! The anisotropy sweep interpolates between the forward-optimal solution
//! `Ŵ_a` and the backward-optimal `Ŵ_s` and scores each point by how well it
//! preserves `WX` and `WᵀG`. The feasibility check asks whether a nonzero
//! `ΔW` can satisfy `ΔW X = 0` and `ΔWᵀ G = 0` at once.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::gptq::{build_hessian, from_dmatrix, gptq_backward, gptq_quantize, to_dmatrix, CalibrationRecord, GptqError};
use crate::quant::{QuantSpec, QuantizedLinear};
use crate::tensor::Tensor;

/// How two matrices are compared.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CosineMode {
    /// Cosine of the flattened matrices.
    #[default]
    Flattened,
    /// Mean of per-column cosines.
    ColumnMean,
}

fn cosine(a: &DMatrix<f64>, b: &DMatrix<f64>, mode: CosineMode) -> f64 {
    let cos = |x: &[f64], y: &[f64]| {
        let (mut dot, mut nx, mut ny) = (0.0, 0.0, 0.0);
        for (p, q) in x.iter().zip(y) {
            dot += p * q;
            nx += p * p;
            ny += q * q;
        }
        if nx == 0.0 && ny == 0.0 {
            1.0
        } else if nx == 0.0 || ny == 0.0 {
            0.0
        } else {
            // sqrt(x * x) is exact, so identical inputs score exactly 1.
            (dot / (nx * ny).sqrt()).clamp(-1.0, 1.0)
        }
    };
    match mode {
        CosineMode::Flattened => cos(a.as_slice(), b.as_slice()),
        CosineMode::ColumnMean => {
            // Column-major storage: each column is contiguous.
            let n = a.ncols();
            (0..n)
                .map(|j| cos(a.column(j).as_slice(), b.column(j).as_slice()))
                .sum::<f64>()
                / n as f64
        }
    }
}

/// `(cos(WX, ŴX), cos(WᵀG, ŴᵀG))`.
pub fn preservation_scores(
    w: &Tensor<f64>,
    w_hat: &Tensor<f64>,
    x: &Tensor<f64>,
    g: &Tensor<f64>,
    mode: CosineMode,
) -> (f64, f64) {
    let (wm, wh) = (to_dmatrix(w), to_dmatrix(w_hat));
    let (xm, gm) = (to_dmatrix(x), to_dmatrix(g));
    let fwd = cosine(&(&wm * &xm), &(&wh * &xm), mode);
    let bwd = cosine(&(wm.transpose() * &gm), &(wh.transpose() * &gm), mode);
    (fwd, bwd)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AnisotropyPoint {
    pub alpha: f64,
    pub cos_fwd: f64,
    pub cos_bwd: f64,
    pub bits: u8,
}

#[derive(Debug, Clone)]
pub struct AnisotropySweep {
    pub w_a: QuantizedLinear,
    pub w_s: QuantizedLinear,
    pub points: Vec<AnisotropyPoint>,
}

impl AnisotropySweep {
    /// `(1 - α) Ŵ_a + α Ŵ_s`; off-grid for interior `α`.
    pub fn interpolate(&self, alpha: f64) -> Tensor<f64> {
        interpolate(&self.w_a.dequantize(), &self.w_s.dequantize(), alpha)
    }

    /// `cos_fwd - cos_bwd` at `α = 0`.
    pub fn gap_at_zero(&self) -> f64 {
        let p = self.points.iter().find(|p| p.alpha == 0.0).unwrap_or(&self.points[0]);
        p.cos_fwd - p.cos_bwd
    }
}

fn interpolate(a: &Tensor<f64>, s: &Tensor<f64>, alpha: f64) -> Tensor<f64> {
    a.zip_map(s, |x, y| (1.0 - alpha) * x + alpha * y)
}

/// `0, 0.1, …, 1`.
pub fn default_alpha_grid() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

pub fn anisotropy_sweep(
    w: &Tensor<f64>,
    x: &Tensor<f64>,
    g: &Tensor<f64>,
    spec: &QuantSpec,
    alphas: &[f64],
    damping_frac: f64,
    mode: CosineMode,
) -> Result<AnisotropySweep, GptqError> {
    let w_a = gptq_quantize(w, &build_hessian(x, damping_frac)?, spec)?;
    let w_s = gptq_backward(w, g, spec, damping_frac)?;
    let (da, ds) = (w_a.dequantize::<f64>(), w_s.dequantize::<f64>());
    let points = alphas
        .iter()
        .map(|&alpha| {
            let w_hat = interpolate(&da, &ds, alpha);
            let (cos_fwd, cos_bwd) = preservation_scores(w, &w_hat, x, g, mode);
            AnisotropyPoint {
                alpha,
                cos_fwd,
                cos_bwd,
                bits: spec.bits,
            }
        })
        .collect();
    Ok(AnisotropySweep { w_a, w_s, points })
}

/// Numerical rank with the usual `σ_max · max(dims) · ε` tolerance, widened by 64.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NumericalRank {
    pub rank: usize,
    pub tolerance: f64,
    /// Some singular value lies within a factor 10 of the tolerance.
    pub borderline: bool,
}

/// SVD of `m` padded with zero columns so that `U` spans the whole row space.
fn full_left_svd(m: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let (r, c) = m.shape();
    let padded = if c < r { m.clone().resize_horizontally(r, 0.0) } else { m.clone() };
    let svd = padded.svd(true, false);
    (svd.u.expect("requested U"), svd.singular_values)
}

fn rank_of(sv: &DVector<f64>, dims: (usize, usize)) -> NumericalRank {
    let smax = sv.iter().copied().fold(0.0, f64::max);
    let tolerance = smax * dims.0.max(dims.1) as f64 * f64::EPSILON * 64.0;
    let rank = sv.iter().filter(|&&s| s > tolerance).count();
    let borderline = tolerance > 0.0 && sv.iter().any(|&s| s > tolerance / 10.0 && s < tolerance * 10.0);
    NumericalRank {
        rank,
        tolerance,
        borderline,
    }
}

pub fn numerical_rank(m: &Tensor<f64>) -> NumericalRank {
    let dm = to_dmatrix(m);
    rank_of(&dm.singular_values(), dm.shape())
}

/// Unit vector orthogonal to the column space of `m`, if one exists.
fn left_null_vector(m: &DMatrix<f64>) -> (NumericalRank, Option<DVector<f64>>) {
    let (u, sv) = full_left_svd(m);
    let rank = rank_of(&sv, m.shape());
    if rank.rank >= m.nrows() {
        return (rank, None);
    }
    let j = sv.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).map(|(j, _)| j).unwrap();
    (rank, Some(u.column(j).into_owned()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeasibilityReport {
    pub rank_x: usize,
    pub rank_g: usize,
    pub d_in: usize,
    pub d_out: usize,
    /// `rank(X) + rank(G) < min(d_in, d_out)`.
    pub condition_holds: bool,
    pub borderline: bool,
    /// Rank-one `ΔW = u vᵀ` with `vᵀX = 0` and `uᵀG = 0`, unit Frobenius norm.
    #[serde(skip)]
    pub witness: Option<Tensor<f64>>,
    pub residual_fwd: Option<f64>,
    pub residual_bwd: Option<f64>,
}

impl FeasibilityReport {
    pub fn feasible(&self) -> bool {
        self.witness.is_some()
    }
}

/// `(‖ΔW X‖_F, ‖ΔWᵀ G‖_F)`.
pub fn joint_residuals(delta: &Tensor<f64>, x: &Tensor<f64>, g: &Tensor<f64>) -> (f64, f64) {
    let d = to_dmatrix(delta);
    ((&d * to_dmatrix(x)).norm(), (d.transpose() * to_dmatrix(g)).norm())
}

/// `X` is `d_in × n`, `G` is `d_out × m`.
pub fn nullspace_feasibility(x: &Tensor<f64>, g: &Tensor<f64>) -> FeasibilityReport {
    let (xm, gm) = (to_dmatrix(x), to_dmatrix(g));
    let (d_in, d_out) = (xm.nrows(), gm.nrows());
    let (rx, v) = left_null_vector(&xm);
    let (rg, u) = left_null_vector(&gm);
    let witness = match (u, v) {
        (Some(u), Some(v)) => Some(from_dmatrix::<f64>(&(u * v.transpose()))),
        _ => None,
    };
    let (residual_fwd, residual_bwd) = match &witness {
        Some(w) => {
            let (f, b) = joint_residuals(w, x, g);
            (Some(f), Some(b))
        }
        None => (None, None),
    };
    FeasibilityReport {
        rank_x: rx.rank,
        rank_g: rg.rank,
        d_in,
        d_out,
        condition_holds: rx.rank + rg.rank < d_in.min(d_out),
        borderline: rx.borderline || rg.borderline,
        witness,
        residual_fwd,
        residual_bwd,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankRow {
    pub layer_name: String,
    pub rank_x: usize,
    pub rank_g: usize,
    pub d_in: usize,
    pub d_out: usize,
    pub condition_holds: bool,
    pub borderline: bool,
}

/// Per-projection ranks of the captured `X` and `G`.
pub fn rank_profile(calib: &BTreeMap<String, CalibrationRecord>) -> Vec<RankRow> {
    calib
        .values()
        .map(|rec| {
            let r = nullspace_feasibility(&rec.x, &rec.g);
            RankRow {
                layer_name: rec.layer_name.clone(),
                rank_x: r.rank_x,
                rank_g: r.rank_g,
                d_in: r.d_in,
                d_out: r.d_out,
                condition_holds: r.condition_holds,
                borderline: r.borderline,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    use super::*;
    use crate::gptq::capture_calibration;
    use crate::model::{Model, ModelConfig, TokenBatch};

    fn randn(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = Normal::new(0.0, 1.0).unwrap();
        Tensor::from_fn(&[rows, cols], |_| n.sample(rng))
    }

    fn low_rank(rows: usize, cols: usize, rank: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        from_dmatrix(&(to_dmatrix(&randn(rows, rank, rng)) * to_dmatrix(&randn(rank, cols, rng))))
    }

    #[test]
    fn identity_quantization_scores_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (w, x, g) = (randn(6, 8, &mut rng), randn(8, 20, &mut rng), randn(6, 20, &mut rng));
        for mode in [CosineMode::Flattened, CosineMode::ColumnMean] {
            let (f, b) = preservation_scores(&w, &w, &x, &g, mode);
            assert!((f - 1.0).abs() < 1e-12 && (b - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn scores_are_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (w, x, g) = (randn(6, 8, &mut rng), randn(8, 20, &mut rng), randn(6, 20, &mut rng));
        let w_hat = w.map(|v| (v * 2.0).round() / 2.0);
        let (f, b) = preservation_scores(&w, &w_hat, &x, &g, CosineMode::Flattened);
        let (f2, b2) = preservation_scores(&w, &w_hat, &x.map(|v| v * 7.5), &g.map(|v| v * 0.01), CosineMode::Flattened);
        assert!((f - f2).abs() < 1e-12 && (b - b2).abs() < 1e-12);
        assert!((-1.0..=1.0).contains(&f) && (-1.0..=1.0).contains(&b));
    }

    #[test]
    fn sweep_endpoints_match_the_solvers() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (w, x, g) = (randn(12, 16, &mut rng), randn(16, 40, &mut rng), randn(12, 40, &mut rng));
        let spec = QuantSpec::new(2, 8);
        let sweep = anisotropy_sweep(&w, &x, &g, &spec, &default_alpha_grid(), 0.01, CosineMode::Flattened).unwrap();
        let a = gptq_quantize(&w, &build_hessian(&x, 0.01).unwrap(), &spec).unwrap();
        let s = gptq_backward(&w, &g, &spec, 0.01).unwrap();
        assert_eq!(sweep.w_a, a);
        assert_eq!(sweep.w_s, s);
        assert!(sweep.interpolate(0.0).bit_eq(&a.dequantize()));
        assert!(sweep.interpolate(1.0).bit_eq(&s.dequantize()));
        let (f0, b0) = preservation_scores(&w, &a.dequantize(), &x, &g, CosineMode::Flattened);
        assert_eq!((sweep.points[0].cos_fwd, sweep.points[0].cos_bwd), (f0, b0));
        let (f1, b1) = preservation_scores(&w, &s.dequantize(), &x, &g, CosineMode::Flattened);
        assert_eq!((sweep.points[10].cos_fwd, sweep.points[10].cos_bwd), (f1, b1));
        assert_eq!(sweep.points.len(), 11);
    }

    #[test]
    fn constructed_rank_example() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = low_rank(4, 10, 2, &mut rng);
        let g = low_rank(4, 10, 1, &mut rng);
        let r = nullspace_feasibility(&x, &g);
        assert_eq!((r.rank_x, r.rank_g), (2, 1));
        assert!(r.condition_holds && r.feasible());
        assert!(r.residual_fwd.unwrap() < 1e-10 && r.residual_bwd.unwrap() < 1e-10);
        let w = r.witness.as_ref().unwrap();
        assert!((w.sq_norm().sqrt() - 1.0).abs() < 1e-12);
        // Residuals are linear in ΔW.
        let (f1, b1) = joint_residuals(w, &x, &g);
        let (f2, b2) = joint_residuals(&w.map(|v| 2.0 * v), &x, &g);
        assert!((f2 - 2.0 * f1).abs() <= 1e-15 + 1e-12 * f1);
        assert!((b2 - 2.0 * b1).abs() <= 1e-15 + 1e-12 * b1);
    }

    #[test]
    fn full_rank_inputs_are_infeasible() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let r = nullspace_feasibility(&randn(5, 20, &mut rng), &low_rank(6, 20, 1, &mut rng));
        assert_eq!(r.rank_x, 5);
        assert!(!r.condition_holds && !r.feasible());
        assert!(r.residual_fwd.is_none());
    }

    #[test]
    fn zero_inputs_accept_any_direction() {
        let r = nullspace_feasibility(&Tensor::zeros(&[3, 4]), &Tensor::zeros(&[5, 2]));
        assert_eq!((r.rank_x, r.rank_g), (0, 0));
        assert!(r.condition_holds);
        let w = r.witness.unwrap();
        assert_eq!(w.shape(), &[5, 3]);
        assert!((w.sq_norm() - 1.0).abs() < 1e-12);
        assert_eq!(r.residual_fwd, Some(0.0));
    }

    #[test]
    fn random_low_rank_instances_admit_witnesses() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for i in 0..100 {
            let (d_in, d_out) = (6 + i % 7, 5 + i % 5);
            let limit = d_in.min(d_out);
            let rx = 1 + i % (limit / 2);
            let rg = (limit - rx - 1).max(1).min(1 + i % 3);
            let x = low_rank(d_in, 30, rx, &mut rng);
            let g = low_rank(d_out, 30, rg, &mut rng);
            let r = nullspace_feasibility(&x, &g);
            assert_eq!((r.rank_x, r.rank_g), (rx, rg));
            assert!(r.condition_holds, "instance {i}");
            let scale = x.sq_norm().sqrt().max(g.sq_norm().sqrt());
            assert!(r.residual_fwd.unwrap() < 1e-8 * scale);
            assert!(r.residual_bwd.unwrap() < 1e-8 * scale);
        }
    }

    #[test]
    fn rank_ignores_column_order_and_respects_column_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = randn(12, 5, &mut rng);
        let perm = Tensor::from_fn(&[12, 5], |i| x.get2(i / 5, 4 - i % 5));
        assert_eq!(numerical_rank(&x).rank, 5);
        assert_eq!(numerical_rank(&perm).rank, 5);
        let lr = low_rank(12, 9, 3, &mut rng);
        let lr_perm = Tensor::from_fn(&[12, 9], |i| lr.get2(i / 9, (i % 9 + 4) % 9));
        assert_eq!(numerical_rank(&lr).rank, 3);
        assert_eq!(numerical_rank(&lr_perm).rank, 3);
    }

    #[test]
    fn rank_profile_over_calibration() {
        let cfg = ModelConfig {
            n_layer: 1,
            n_head: 2,
            d_hidden: 64,
            d_inter: 96,
            vocab_size: 256,
            max_seq_len: 40,
            use_rms_norm_before_linear: false,
        };
        let m = Model::<f64>::build(cfg, 8).unwrap();
        let batch = TokenBatch::single(&(0..32).map(|t| (t * 13 + 40) % 256).collect::<Vec<_>>()).unwrap();
        let calib = capture_calibration(&m, &[batch]).unwrap();
        let rows = rank_profile(&calib);
        assert_eq!(rows.len(), 7);
        for r in &rows {
            assert!(r.rank_x <= 32 && r.rank_g <= 32);
        }
    }
}
