//! Hessian-based layer-wise quantization.
//!
//! [`gptq_quantize`] minimizes `‖(W - Ŵ) X‖_F` column by column, pushing each
//! column's rounding error onto the not-yet-quantized columns through the
//! upper Cholesky factor of `H⁻¹`. [`gptq_backward`] solves the transposed
//! problem `‖(W - Ŵ)ᵀ G‖_F` by running the same solver on `Wᵀ` with `G Gᵀ`.

mod calib;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::model::{proj_name, Model, ModelError, Precision, TokenBatch, PROJECTIONS};
use crate::quant::{quant_params, GroupAxis, QuantError, QuantParams, QuantSpec, QuantizedLinear, QuantizedModel};
use crate::tensor::{Real, Tensor};

pub use calib::{capture_calibration, CalibrationRecord};

/// Floor applied to `mean(diag(XXᵀ))` when `X` is all zeros.
pub const EPS_GUARD: f64 = 1e-8;
const MAX_ESCALATIONS: usize = 3;

#[derive(Debug, Error)]
pub enum GptqError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("Cholesky factorization failed after {escalations} damping escalations (final damping {damping})")]
    Cholesky { escalations: usize, damping: f64 },
    #[error("input contains NaN or infinite values")]
    NonFinite,
    #[error("empty input: {0}")]
    Empty(String),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Damped Hessian `H = X Xᵀ + λ·mean(diag(X Xᵀ))·I` together with the upper
/// Cholesky factor of its inverse.
#[derive(Debug, Clone)]
pub struct HessianEst {
    pub h: DMatrix<f64>,
    /// Relative damping actually applied, after any escalation.
    pub damping: f64,
    pub escalations: usize,
    /// Set when `X Xᵀ` has a zero diagonal mean.
    pub degenerate: bool,
    inv_upper: DMatrix<f64>,
}

impl HessianEst {
    pub fn dim(&self) -> usize {
        self.h.nrows()
    }

    /// Upper-triangular `U` with `H⁻¹ = Uᵀ U`.
    pub fn inv_upper(&self) -> &DMatrix<f64> {
        &self.inv_upper
    }
}

pub(crate) fn to_dmatrix<T: Real>(t: &Tensor<T>) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.cols(), &t.to_f64_vec())
}

pub(crate) fn from_dmatrix<T: Real>(m: &DMatrix<f64>) -> Tensor<T> {
    let (r, c) = m.shape();
    Tensor::from_fn(&[r, c], |i| T::of(m[(i / c, i % c)]))
}

/// Builds the damped Hessian of the `d × n` matrix `x` (features as rows).
pub fn build_hessian<T: Real>(x: &Tensor<T>, damping_frac: f64) -> Result<HessianEst, GptqError> {
    if x.numel() == 0 {
        return Err(GptqError::Empty("calibration matrix has no entries".into()));
    }
    if !x.is_finite() {
        return Err(GptqError::NonFinite);
    }
    let xm = to_dmatrix(x);
    hessian_from_gram(&xm * xm.transpose(), damping_frac)
}

pub(crate) fn hessian_from_gram(gram: DMatrix<f64>, damping_frac: f64) -> Result<HessianEst, GptqError> {
    let d = gram.nrows();
    let mean_diag = gram.diagonal().sum() / d as f64;
    let degenerate = mean_diag <= 0.0;
    let scale = if degenerate { EPS_GUARD } else { mean_diag };
    let mut damping = damping_frac;
    for escalations in 0..=MAX_ESCALATIONS {
        let mut h = gram.clone();
        for i in 0..d {
            h[(i, i)] += damping * scale;
        }
        if let Some(inv_upper) = inverse_upper_factor(&h) {
            return Ok(HessianEst {
                h,
                damping,
                escalations,
                degenerate,
                inv_upper,
            });
        }
        if escalations < MAX_ESCALATIONS {
            log::warn!("Cholesky failed at damping {damping}; escalating");
            damping *= 10.0;
        }
    }
    Err(GptqError::Cholesky {
        escalations: MAX_ESCALATIONS,
        damping,
    })
}

fn inverse_upper_factor(h: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let inv = h.clone().cholesky()?.inverse();
    let inv = (&inv + inv.transpose()) * 0.5;
    let u = inv.cholesky()?.l().transpose();
    u.iter().all(|v| v.is_finite()).then_some(u)
}

/// Column-processing options.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GptqOptions {
    /// Process columns by descending Hessian diagonal. Implies static groups.
    pub act_order: bool,
    /// Fix every group's scale and zero-point from the original weights up front.
    pub static_groups: bool,
}

/// Forward-objective solver; groups run along the input dimension.
pub fn gptq_quantize<T: Real>(w: &Tensor<T>, h: &HessianEst, spec: &QuantSpec) -> Result<QuantizedLinear, GptqError> {
    gptq_quantize_with(w, h, spec, GptqOptions::default())
}

pub fn gptq_quantize_with<T: Real>(
    w: &Tensor<T>,
    h: &HessianEst,
    spec: &QuantSpec,
    opts: GptqOptions,
) -> Result<QuantizedLinear, GptqError> {
    spec.validate()?;
    if w.rank() != 2 || w.cols() != h.dim() {
        return Err(GptqError::Shape(format!(
            "weight {:?} against Hessian of size {}",
            w.shape(),
            h.dim()
        )));
    }
    if !w.is_finite() {
        return Err(GptqError::NonFinite);
    }
    let (rows, cols) = (w.rows(), w.cols());
    let gs = spec.group_size;
    let groups_per_row = cols.div_ceil(gs);
    let qmax = spec.qmax();
    let mut wm = to_dmatrix(w);
    let static_groups = opts.static_groups || opts.act_order;

    let mut params = vec![QuantParams { h: 1.0, z: 0 }; rows * groups_per_row];
    let group_params = |wm: &DMatrix<f64>, r: usize, g: usize| {
        let end = ((g + 1) * gs).min(cols);
        let vals: Vec<f64> = (g * gs..end).map(|c| wm[(r, c)]).collect();
        quant_params(&vals, spec.bits, spec.symmetric, None)
    };
    if static_groups {
        for r in 0..rows {
            for g in 0..groups_per_row {
                params[r * groups_per_row + g] = group_params(&wm, r, g);
            }
        }
    }

    let mut order: Vec<usize> = (0..cols).collect();
    if opts.act_order {
        order.sort_by(|&a, &b| h.h[(b, b)].total_cmp(&h.h[(a, a)]).then(a.cmp(&b)));
    }
    // Factor of the permuted Hessian when reordering, otherwise the stored one.
    let u = if opts.act_order {
        let perm = DMatrix::from_fn(cols, cols, |i, j| h.h[(order[i], order[j])]);
        inverse_upper_factor(&perm).ok_or(GptqError::Cholesky {
            escalations: 0,
            damping: h.damping,
        })?
    } else {
        h.inv_upper.clone()
    };

    let mut codes = vec![0u8; rows * cols];
    let mut err = vec![0.0; rows];
    for (k, &j) in order.iter().enumerate() {
        let g = j / gs;
        if !static_groups && j % gs == 0 {
            for r in 0..rows {
                params[r * groups_per_row + g] = group_params(&wm, r, g);
            }
        }
        let d = u[(k, k)];
        for r in 0..rows {
            let p = params[r * groups_per_row + g];
            let c = p.code(wm[(r, j)], qmax);
            codes[r * cols + j] = c;
            err[r] = (wm[(r, j)] - p.dequant(c)) / d;
        }
        for (kk, &jj) in order.iter().enumerate().skip(k + 1) {
            let ukj = u[(k, kk)];
            if ukj != 0.0 {
                for r in 0..rows {
                    wm[(r, jj)] -= err[r] * ukj;
                }
            }
        }
    }
    Ok(QuantizedLinear::from_parts(
        (rows, cols),
        spec.bits,
        gs,
        GroupAxis::Input,
        params,
        codes,
    )?)
}

/// Backward-objective solver: minimizes `‖(W - Ŵ)ᵀ G‖_F`.
///
/// Runs [`gptq_quantize`] on `Wᵀ` with the Hessian of `G`, then transposes,
/// so groups of the result run along the output dimension of `W`.
pub fn gptq_backward<T: Real>(
    w: &Tensor<T>,
    g: &Tensor<T>,
    spec: &QuantSpec,
    damping_frac: f64,
) -> Result<QuantizedLinear, GptqError> {
    if w.rank() != 2 || g.rank() != 2 || g.rows() != w.rows() {
        return Err(GptqError::Shape(format!("weight {:?} against G {:?}", w.shape(), g.shape())));
    }
    let hg = build_hessian(g, damping_frac)?;
    Ok(gptq_quantize(&w.transpose2(), &hg, spec)?.transposed())
}

/// `‖A X‖_F` for `A = W - Ŵ` given as a `d_out × d_in` tensor.
pub fn forward_error<T: Real>(delta: &Tensor<T>, x: &Tensor<T>) -> f64 {
    (to_dmatrix(delta) * to_dmatrix(x)).norm()
}

/// `‖Aᵀ G‖_F`.
pub fn backward_error<T: Real>(delta: &Tensor<T>, g: &Tensor<T>) -> f64 {
    (to_dmatrix(delta).transpose() * to_dmatrix(g)).norm()
}

/// Importance score used to pick full-precision columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColumnCriterion {
    /// `‖w_i - ŵ_i‖ · ‖x_i‖`: contribution of column `i` to the activation error.
    ActivationError,
    /// `‖w_iᵀ G‖`: norm of the input gradient of feature `i`.
    GradMagnitude,
}

/// Mixed-precision layer with some columns restored to full precision.
#[derive(Debug, Clone)]
pub struct MixedPrecision<T: Real> {
    pub columns: Vec<usize>,
    pub scores: Vec<f64>,
    pub weight: Tensor<T>,
}

/// Restores the top `ceil(budget · d_in)` columns by `criterion` (ties by index).
pub fn select_important_columns<T: Real>(
    w: &Tensor<T>,
    w_hat: &Tensor<T>,
    x: &Tensor<T>,
    g: &Tensor<T>,
    budget: f64,
    criterion: ColumnCriterion,
) -> Result<MixedPrecision<T>, GptqError> {
    if w.shape() != w_hat.shape() || x.rows() != w.cols() || g.rows() != w.rows() {
        return Err(GptqError::Shape(format!(
            "W {:?}, Ŵ {:?}, X {:?}, G {:?}",
            w.shape(),
            w_hat.shape(),
            x.shape(),
            g.shape()
        )));
    }
    let (rows, cols) = (w.rows(), w.cols());
    let wm = to_dmatrix(w);
    let scores: Vec<f64> = match criterion {
        ColumnCriterion::ActivationError => {
            let dm = &wm - to_dmatrix(w_hat);
            let xm = to_dmatrix(x);
            (0..cols).map(|i| dm.column(i).norm() * xm.row(i).norm()).collect()
        }
        ColumnCriterion::GradMagnitude => {
            let grad = wm.transpose() * to_dmatrix(g);
            (0..cols).map(|i| grad.row(i).norm()).collect()
        }
    };
    let k = ((budget.clamp(0.0, 1.0) * cols as f64).ceil() as usize).min(cols);
    let mut idx: Vec<usize> = (0..cols).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut columns = idx[..k].to_vec();
    columns.sort_unstable();
    let mut out = w_hat.clone();
    for &c in &columns {
        for r in 0..rows {
            out.data_mut()[r * cols + c] = w.data()[r * cols + c];
        }
    }
    Ok(MixedPrecision {
        columns,
        scores,
        weight: out,
    })
}

/// Quantizes every projection block by block.
///
/// Calibration inputs for block `i` come from the model with blocks `0..i`
/// already quantized, so later blocks see the error of earlier ones.
pub fn gptq_quantize_model<T: Real>(
    model: &Model<T>,
    batches: &[TokenBatch],
    spec: &QuantSpec,
    damping: f64,
) -> Result<QuantizedModel<T>, GptqError> {
    let mut out = model.clone();
    let mut layers = std::collections::BTreeMap::new();
    for block in 0..model.config().n_layer {
        let recs = capture_calibration(&out, batches)?;
        for proj in PROJECTIONS {
            let name = proj_name(block, proj);
            let h = build_hessian(&recs[&name].x, damping)?;
            let q = gptq_quantize(out.param(&name)?, &h, spec)?;
            out.set_param(&name, q.dequantize())?;
            layers.insert(name, q);
        }
    }
    out.set_precision(Precision::Quantized { bits: spec.bits });
    Ok(QuantizedModel { model: out, layers })
}
