//! Uniform fixed-point quantization.
//!
//! Asymmetric mode maps a group `w` onto `{0, .., 2^N - 1}` with
//! `h = (γ·max - β·min) / (2^N - 1)`, `z = -round(β·min / h)`,
//! `code = clamp(round(w / h) + z, 0, 2^N - 1)` and `ŵ = h·(code - z)`.
//! Rounding is ties-to-even throughout.

mod pack;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Model, Precision};
use crate::tensor::{Real, Tensor};

pub use pack::{pack_codes, unpack_codes};

/// Scale used for an all-zero group.
pub const EPS_SCALE: f32 = 1e-8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QuantError {
    #[error("invalid quantization spec: {0}")]
    InvalidSpec(String),
    #[error("input contains NaN or infinite values")]
    NonFinite,
    #[error("expected a matrix or vector, got shape {0:?}")]
    BadShape(Vec<usize>),
    #[error("clip parameter count {got} does not match group count {expected}")]
    ClipCount { expected: usize, got: usize },
    #[error("malformed packed block: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantSpec {
    pub bits: u8,
    pub group_size: usize,
    pub symmetric: bool,
}

impl Default for QuantSpec {
    fn default() -> Self {
        Self {
            bits: 4,
            group_size: 64,
            symmetric: false,
        }
    }
}

impl QuantSpec {
    pub fn new(bits: u8, group_size: usize) -> Self {
        Self {
            bits,
            group_size,
            symmetric: false,
        }
    }

    pub fn validate(&self) -> Result<(), QuantError> {
        if !(1..=8).contains(&self.bits) {
            return Err(QuantError::InvalidSpec(format!("bits must be in 1..=8, got {}", self.bits)));
        }
        if self.group_size == 0 {
            return Err(QuantError::InvalidSpec("group_size must be positive".into()));
        }
        Ok(())
    }

    pub fn qmax(&self) -> u32 {
        (1u32 << self.bits) - 1
    }
}

/// Per-group scale and zero-point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantParams {
    pub h: f32,
    pub z: i16,
}

impl QuantParams {
    /// Code for a single value, without the `[0, qmax]` clamp.
    pub fn raw_code(&self, w: f64) -> f64 {
        (w / self.h as f64).round_ties_even() + self.z as f64
    }

    pub fn code(&self, w: f64, qmax: u32) -> u8 {
        self.raw_code(w).clamp(0.0, qmax as f64) as u8
    }

    pub fn dequant(&self, code: u8) -> f64 {
        self.h as f64 * (code as f64 - self.z as f64)
    }
}

/// Learnable clipping factors for one group.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipParams {
    pub gamma: f64,
    pub beta: f64,
}

impl ClipParams {
    pub const MAX: f64 = 1.2;
    pub const MIN: f64 = 1e-4;

    pub fn new(gamma: f64, beta: f64) -> Self {
        Self {
            gamma: gamma.clamp(Self::MIN, Self::MAX),
            beta: beta.clamp(Self::MIN, Self::MAX),
        }
    }
}

impl Default for ClipParams {
    fn default() -> Self {
        Self { gamma: 1.0, beta: 1.0 }
    }
}

/// Axis along which consecutive weights share quantization parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupAxis {
    /// Groups run along a row (over input features).
    Input,
    /// Groups run along a column (over output features).
    Output,
}

/// Scale and zero-point for one group.
///
/// A constant group `c` is represented exactly: `h = |c|` with the zero-point
/// chosen so that one code dequantizes to `c`. An all-zero group gets
/// `h = EPS_SCALE`, `z = 0`.
pub fn quant_params(group: &[f64], bits: u8, symmetric: bool, clip: Option<ClipParams>) -> QuantParams {
    let qmax = ((1u32 << bits) - 1) as f64;
    let clip = clip.unwrap_or_default();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &w in group {
        lo = lo.min(w);
        hi = hi.max(w);
    }
    if symmetric {
        let m = clip.gamma * hi.abs().max(lo.abs());
        if m == 0.0 {
            return QuantParams { h: EPS_SCALE, z: 0 };
        }
        let z = 1i16 << (bits - 1);
        return QuantParams {
            h: (2.0 * m / qmax) as f32,
            z,
        };
    }
    if hi == lo {
        return constant_params(hi);
    }
    let (hi, lo) = (clip.gamma * hi, clip.beta * lo);
    // Keeps |z| well inside i16 for narrow groups far from zero.
    let floor = hi.abs().max(lo.abs()) / 16384.0;
    let h = ((hi - lo) / qmax).max(floor).max(EPS_SCALE as f64) as f32;
    let z = -(lo / h as f64).round_ties_even();
    QuantParams {
        h,
        z: z.clamp(i16::MIN as f64, i16::MAX as f64) as i16,
    }
}

fn constant_params(c: f64) -> QuantParams {
    if c == 0.0 {
        QuantParams { h: EPS_SCALE, z: 0 }
    } else if c > 0.0 {
        QuantParams { h: c as f32, z: 0 }
    } else {
        QuantParams { h: (-c) as f32, z: 1 }
    }
}

/// Group-quantized matrix of shape `(d_out, d_in)` with one code per weight.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedLinear {
    pub(crate) d_out: usize,
    pub(crate) d_in: usize,
    pub(crate) bits: u8,
    pub(crate) group_size: usize,
    pub(crate) axis: GroupAxis,
    pub(crate) params: Vec<QuantParams>,
    pub(crate) codes: Vec<u8>,
}

/// Index layout of groups for a `(rows, cols)` matrix.
#[derive(Debug, Clone, Copy)]
pub struct GroupLayout {
    pub rows: usize,
    pub cols: usize,
    pub group_size: usize,
    pub axis: GroupAxis,
}

impl GroupLayout {
    fn line_len(&self) -> usize {
        match self.axis {
            GroupAxis::Input => self.cols,
            GroupAxis::Output => self.rows,
        }
    }

    fn lines(&self) -> usize {
        match self.axis {
            GroupAxis::Input => self.rows,
            GroupAxis::Output => self.cols,
        }
    }

    pub fn groups_per_line(&self) -> usize {
        self.line_len().div_ceil(self.group_size)
    }

    pub fn group_count(&self) -> usize {
        self.lines() * self.groups_per_line()
    }

    /// Group id of element `(r, c)`.
    pub fn group_of(&self, r: usize, c: usize) -> usize {
        let (line, pos) = match self.axis {
            GroupAxis::Input => (r, c),
            GroupAxis::Output => (c, r),
        };
        line * self.groups_per_line() + pos / self.group_size
    }

    /// Flat row-major indices of the elements of group `g`.
    pub fn members(&self, g: usize) -> impl Iterator<Item = usize> + '_ {
        let gpl = self.groups_per_line();
        let (line, k) = (g / gpl, g % gpl);
        let start = k * self.group_size;
        let end = (start + self.group_size).min(self.line_len());
        (start..end).map(move |p| match self.axis {
            GroupAxis::Input => line * self.cols + p,
            GroupAxis::Output => p * self.cols + line,
        })
    }
}

fn matrix_dims(shape: &[usize]) -> Result<(usize, usize), QuantError> {
    match *shape {
        [n] => Ok((1, n)),
        [r, c] => Ok((r, c)),
        _ => Err(QuantError::BadShape(shape.to_vec())),
    }
}

/// Round-to-nearest quantization of a matrix with groups along `axis`.
pub fn quantize_along<T: Real>(
    w: &Tensor<T>,
    spec: &QuantSpec,
    axis: GroupAxis,
    clip: Option<&[ClipParams]>,
) -> Result<QuantizedLinear, QuantError> {
    spec.validate()?;
    if !w.is_finite() {
        return Err(QuantError::NonFinite);
    }
    let (d_out, d_in) = matrix_dims(w.shape())?;
    let layout = GroupLayout {
        rows: d_out,
        cols: d_in,
        group_size: spec.group_size,
        axis,
    };
    let n_groups = layout.group_count();
    if let Some(c) = clip {
        if c.len() != n_groups {
            return Err(QuantError::ClipCount {
                expected: n_groups,
                got: c.len(),
            });
        }
    }
    let data = w.to_f64_vec();
    let qmax = spec.qmax();
    let mut params = Vec::with_capacity(n_groups);
    let mut codes = vec![0u8; data.len()];
    let mut buf = Vec::with_capacity(spec.group_size);
    for g in 0..n_groups {
        buf.clear();
        buf.extend(layout.members(g).map(|i| data[i]));
        let p = quant_params(&buf, spec.bits, spec.symmetric, clip.map(|c| c[g]));
        for i in layout.members(g) {
            codes[i] = p.code(data[i], qmax);
        }
        params.push(p);
    }
    Ok(QuantizedLinear {
        d_out,
        d_in,
        bits: spec.bits,
        group_size: spec.group_size,
        axis,
        params,
        codes,
    })
}

/// Quantizes with groups along the input dimension.
pub fn quantize<T: Real>(
    w: &Tensor<T>,
    spec: &QuantSpec,
    clip: Option<&[ClipParams]>,
) -> Result<QuantizedLinear, QuantError> {
    quantize_along(w, spec, GroupAxis::Input, clip)
}

/// Applies quantize-then-dequantize, returning a tensor of the input's shape.
pub fn fake_quantize<T: Real>(w: &Tensor<T>, spec: &QuantSpec) -> Result<Tensor<T>, QuantError> {
    let q = quantize(w, spec, None)?;
    Ok(q.dequantize::<T>().reshaped(w.shape()).expect("same element count"))
}

impl QuantizedLinear {
    /// Assembles a layer from explicit parts, validating every invariant.
    pub fn from_parts(
        shape: (usize, usize),
        bits: u8,
        group_size: usize,
        axis: GroupAxis,
        params: Vec<QuantParams>,
        codes: Vec<u8>,
    ) -> Result<Self, QuantError> {
        QuantSpec::new(bits, group_size).validate()?;
        let layout = GroupLayout {
            rows: shape.0,
            cols: shape.1,
            group_size,
            axis,
        };
        if params.len() != layout.group_count() {
            return Err(QuantError::Format(format!(
                "expected {} groups, found {}",
                layout.group_count(),
                params.len()
            )));
        }
        if codes.len() != shape.0 * shape.1 {
            return Err(QuantError::Format(format!(
                "expected {} codes, found {}",
                shape.0 * shape.1,
                codes.len()
            )));
        }
        let qmax = (1u32 << bits) - 1;
        if codes.iter().any(|&c| c as u32 > qmax) {
            return Err(QuantError::Format(format!("code exceeds {qmax}")));
        }
        if params.iter().any(|p| !(p.h.is_finite() && p.h > 0.0)) {
            return Err(QuantError::Format("non-positive scale".into()));
        }
        Ok(Self {
            d_out: shape.0,
            d_in: shape.1,
            bits,
            group_size,
            axis,
            params,
            codes,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.d_out, self.d_in)
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn group_axis(&self) -> GroupAxis {
        self.axis
    }

    pub fn params(&self) -> &[QuantParams] {
        &self.params
    }

    pub fn codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn layout(&self) -> GroupLayout {
        GroupLayout {
            rows: self.d_out,
            cols: self.d_in,
            group_size: self.group_size,
            axis: self.axis,
        }
    }

    /// Parameters of the group containing element `(r, c)`.
    pub fn params_at(&self, r: usize, c: usize) -> QuantParams {
        self.params[self.layout().group_of(r, c)]
    }

    pub fn dequantize<T: Real>(&self) -> Tensor<T> {
        let layout = self.layout();
        let mut out = vec![T::zero(); self.codes.len()];
        for (g, p) in self.params.iter().enumerate() {
            for i in layout.members(g) {
                out[i] = T::of(p.dequant(self.codes[i]));
            }
        }
        Tensor::new(vec![self.d_out, self.d_in], out).expect("codes match shape")
    }

    /// Returns a transposed copy; input-axis groups become output-axis groups.
    pub fn transposed(&self) -> Self {
        let mut codes = vec![0u8; self.codes.len()];
        for r in 0..self.d_out {
            for c in 0..self.d_in {
                codes[c * self.d_out + r] = self.codes[r * self.d_in + c];
            }
        }
        Self {
            d_out: self.d_in,
            d_in: self.d_out,
            bits: self.bits,
            group_size: self.group_size,
            axis: match self.axis {
                GroupAxis::Input => GroupAxis::Output,
                GroupAxis::Output => GroupAxis::Input,
            },
            params: self.params.clone(),
            codes,
        }
    }

    /// Serializes the layer as a named packed block.
    pub fn write_block(&self, name: &str, out: &mut Vec<u8>) {
        pack::write_block(self, name, out)
    }

    /// Parses one block, returning its name, the layer, and the bytes consumed.
    pub fn read_block(bytes: &[u8]) -> Result<(String, Self, usize), QuantError> {
        pack::read_block(bytes)
    }
}

/// Ternary codes in `{-1, 0, 1}` with an absolute-mean scale.
#[derive(Debug, Clone, PartialEq)]
pub struct Ternary {
    pub scale: f64,
    pub codes: Vec<i8>,
}

impl Ternary {
    pub fn dequantize(&self) -> Vec<f64> {
        self.codes.iter().map(|&c| self.scale * c as f64).collect()
    }
}

/// `scale = mean|W|`, `codes = clamp(round(W / scale), -1, 1)`; an all-zero
/// input gets `scale = 1e-8` and zero codes.
pub fn ternarize<T: Real>(w: &Tensor<T>) -> Result<Ternary, QuantError> {
    if !w.is_finite() {
        return Err(QuantError::NonFinite);
    }
    let data = w.to_f64_vec();
    let (scale, codes) = crate::tensor::ternarize_values(&data);
    Ok(Ternary {
        scale,
        codes: codes.into_iter().map(|c| c as i8).collect(),
    })
}

/// A model whose projections hold dequantized values, plus their packed form.
#[derive(Debug, Clone)]
pub struct QuantizedModel<T: Real> {
    pub model: Model<T>,
    pub layers: BTreeMap<String, QuantizedLinear>,
}

/// Round-to-nearest quantization of every attention and MLP projection.
///
/// Embeddings, norm gains and the output head stay full precision. With
/// `spec = None` the model is returned unchanged.
pub fn quantize_model_rtn<T: Real>(
    model: &Model<T>,
    spec: Option<&QuantSpec>,
) -> Result<QuantizedModel<T>, QuantError> {
    let mut out = model.clone();
    let mut layers = BTreeMap::new();
    let Some(spec) = spec else {
        return Ok(QuantizedModel { model: out, layers });
    };
    for (name, w) in model.iter() {
        if !Model::<T>::is_projection(name) {
            continue;
        }
        let q = quantize(w, spec, None)?;
        out.set_param(name, q.dequantize())
            .expect("dequantized shape matches");
        layers.insert(name.to_string(), q);
    }
    out.set_precision(Precision::Quantized { bits: spec.bits });
    Ok(QuantizedModel { model: out, layers })
}

#[cfg(test)]
mod tests;
