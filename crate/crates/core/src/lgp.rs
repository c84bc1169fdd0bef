//! Learnable-clipping post-training quantization with gradient preservation.
//!
//! Blocks are distilled shallow to deep. For block `i` the clipping factors
//! `(γ, β)` of every projection group minimize
//!
//! ```text
//! ‖z_fp - z_q‖²_F + α₁ ‖∇_X f_fp - ∇_X f_q‖²_F
//! ```
//!
//! where `z` is the block output, `X` the block input, and `∇_X f` the
//! per-sequence gradient of the language-modeling loss at that input. The
//! quantized gradient is taken through the remaining full-precision blocks, so
//! the second term needs a derivative of a derivative. Rounding is
//! straight-through.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{proj_name, Model, ModelError, Precision, TokenBatch, PROJECTIONS};
use crate::quant::{quant_params, quantize, ClipParams, QuantError, QuantParams, QuantSpec, QuantizedLinear};
use crate::tensor::{Graph, OpKind, Real, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum LgpError {
    #[error("invalid LGP config: {0}")]
    Config(String),
    #[error("distillation of block {block} diverged after {restarts} learning-rate halvings")]
    Diverged { block: usize, restarts: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Update rule for the clipping factors.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipOptimizer {
    /// Plain gradient descent.
    Sgd,
    /// Adam without weight decay; step size is independent of the loss scale.
    #[default]
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LgpConfig {
    pub alpha1: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub spec: QuantSpec,
    pub optimizer: ClipOptimizer,
    pub max_restarts: usize,
}

impl Default for LgpConfig {
    fn default() -> Self {
        Self {
            alpha1: 0.0,
            epochs: 40,
            learning_rate: 0.01,
            spec: QuantSpec::new(2, 64),
            optimizer: ClipOptimizer::Adam,
            max_restarts: 3,
        }
    }
}

impl LgpConfig {
    pub fn validate(&self) -> Result<(), LgpError> {
        self.spec.validate()?;
        if !(self.alpha1 >= 0.0 && self.alpha1.is_finite()) {
            return Err(LgpError::Config(format!("alpha1 must be finite and >= 0, got {}", self.alpha1)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(LgpError::Config(format!("learning_rate must be finite and > 0, got {}", self.learning_rate)));
        }
        if self.epochs == 0 {
            return Err(LgpError::Config("epochs must be >= 1".into()));
        }
        if self.spec.symmetric {
            return Err(LgpError::Config("learnable clipping uses asymmetric groups".into()));
        }
        Ok(())
    }
}

/// Frozen full-precision targets of one block, one entry per calibration batch.
#[derive(Debug, Clone)]
pub struct BlockTargets<T: Real> {
    pub block: usize,
    /// `z_fp`, tokens × d_hidden.
    pub outputs: Vec<Tensor<T>>,
    /// `∇_X f_fp`, tokens × d_hidden, per-sequence scaling.
    pub grads: Vec<Tensor<T>>,
}

/// Block outputs and input gradients of the full-precision model.
pub fn capture_block_targets<T: Real>(
    fp: &Model<T>,
    batches: &[TokenBatch],
    block: usize,
) -> Result<BlockTargets<T>, ModelError> {
    let n = fp.config().n_layer;
    if block >= n {
        return Err(ModelError::LayerIndex { index: block, n_layer: n });
    }
    let mut outputs = Vec::with_capacity(batches.len());
    let mut grads = Vec::with_capacity(batches.len());
    for batch in batches {
        fp.check_batch(batch, 2)?;
        let g = Graph::new();
        let p = fp.bind(&g);
        let f = fp.forward(&p, batch, None)?;
        let loss = fp.loss(f.logits, batch)?;
        let gx = g.backward(loss, &[f.hidden[block]])?.value(0);
        let b = T::of(batch.batch() as f64);
        outputs.push(f.hidden[block + 1].value().as_ref().clone());
        grads.push(gx.map(|v| v * b));
    }
    Ok(BlockTargets { block, outputs, grads })
}

/// Hidden states `x^(layer)` of `model` for each batch.
pub fn capture_inputs<T: Real>(
    model: &Model<T>,
    batches: &[TokenBatch],
    layer: usize,
) -> Result<Vec<Tensor<T>>, ModelError> {
    batches
        .iter()
        .map(|batch| {
            let g = Graph::new();
            let p = model.bind_with(&g, |_| false);
            let x = model.embed(&p, batch)?;
            let f = model.forward_from(&p, 0, x, batch, None)?;
            Ok(f.hidden[layer].value().as_ref().clone())
        })
        .collect()
}

/// Offsets that turn every non-smooth step of the quantizer into a constant shift.
///
/// `scale` covers the f32 rounding and flooring of `h`, `zero_point` and
/// `codes` the integer rounding. Adding a constant offset has derivative one,
/// so gradients follow the straight-through rule; when the offsets are held
/// fixed the surrogate is smooth in `(γ, β)`. Codes outside `[0, qmax]` are
/// replaced by the constant bound, as a clamp would, with `keep` masking them.
#[derive(Debug, Clone)]
pub struct FrozenRounding<T: Real> {
    pub scale: Tensor<T>,
    pub zero_point: Tensor<T>,
    pub codes: Tensor<T>,
    pub keep: Tensor<T>,
    pub saturated: Tensor<T>,
}

fn group_extrema<T: Real>(w: &Tensor<T>, rows: usize, gs: usize) -> (Tensor<T>, Tensor<T>) {
    let mut hi = Vec::with_capacity(rows);
    let mut lo = Vec::with_capacity(rows);
    for r in 0..rows {
        let g = &w.data()[r * gs..(r + 1) * gs];
        hi.push(g.iter().copied().fold(g[0], |a, b| if b > a { b } else { a }));
        lo.push(g.iter().copied().fold(g[0], |a, b| if b < a { b } else { a }));
    }
    (Tensor::new(vec![rows, 1], hi).unwrap(), Tensor::new(vec![rows, 1], lo).unwrap())
}

/// Group count of a `d_out × d_in` weight under `spec`; groups must tile rows exactly.
pub fn clip_rows(shape: &[usize], spec: &QuantSpec) -> Result<usize, TensorError> {
    let (o, i) = (shape[0], shape[1]);
    if i % spec.group_size != 0 {
        return Err(TensorError::InvalidArgument {
            op: OpKind::SteQuantize,
            msg: format!("group size {} does not divide d_in = {i}", spec.group_size),
        });
    }
    Ok(o * i / spec.group_size)
}

fn offset<T: Real>(target: impl Iterator<Item = f64>, current: &Tensor<T>) -> Tensor<T> {
    let data = target.zip(current.data()).map(|(t, c)| T::of(t - c.as_f64())).collect();
    Tensor::new(current.shape().to_vec(), data).unwrap()
}

/// Differentiable quantize-dequantize with learnable clipping.
///
/// `gamma` and `beta` are `[groups, 1]`; the weight is treated as data. The
/// forward value matches [`quantize`] followed by dequantization, up to
/// floating-point rounding of the offsets.
pub fn fake_quant<'g, T: Real>(
    w: Var<'g, T>,
    gamma: Var<'g, T>,
    beta: Var<'g, T>,
    spec: &QuantSpec,
    frozen: Option<&FrozenRounding<T>>,
) -> Result<Var<'g, T>, TensorError> {
    fake_quant_with_offsets(w, gamma, beta, spec, frozen).map(|(v, _)| v)
}

fn fake_quant_with_offsets<'g, T: Real>(
    w: Var<'g, T>,
    gamma: Var<'g, T>,
    beta: Var<'g, T>,
    spec: &QuantSpec,
    frozen: Option<&FrozenRounding<T>>,
) -> Result<(Var<'g, T>, FrozenRounding<T>), TensorError> {
    let g = w.graph();
    let shape = w.shape();
    let rows = clip_rows(&shape, spec)?;
    let gs = spec.group_size;
    let qmax = spec.qmax() as f64;
    let wv = w.value();
    let (hi, lo) = group_extrema(&wv, rows, gs);
    let (gv, bv) = (gamma.value(), beta.value());
    let wf = wv.to_f64_vec();
    let reference: Vec<QuantParams> = (0..rows)
        .map(|r| {
            let clip = ClipParams {
                gamma: gv.data()[r].as_f64(),
                beta: bv.data()[r].as_f64(),
            };
            quant_params(&wf[r * gs..(r + 1) * gs], spec.bits, false, Some(clip))
        })
        .collect();

    let wg = w.reshape(&[rows, gs])?;
    let blo = beta.mul(g.constant(lo))?;
    let h_raw = gamma.mul(g.constant(hi))?.sub(blo)?.scale_f64(1.0 / qmax)?;
    let h_off = match frozen {
        Some(f) => f.scale.clone(),
        None => offset(reference.iter().map(|p| p.h as f64), &h_raw.value()),
    };
    let h = h_raw.add(g.constant(h_off.clone()))?;
    let hinv = h.powf_f64(-1.0)?;
    let z_raw = blo.mul(hinv)?.neg()?;
    let z_off = match frozen {
        Some(f) => f.zero_point.clone(),
        None => offset(reference.iter().map(|p| p.z as f64), &z_raw.value()),
    };
    let z = z_raw.add(g.constant(z_off.clone()))?;
    let u = wg.mul(hinv)?;
    let (c_off, keep, saturated) = match frozen {
        Some(f) => (f.codes.clone(), f.keep.clone(), f.saturated.clone()),
        None => {
            let n = rows * gs;
            let (mut keep, mut sat) = (Vec::with_capacity(n), Vec::with_capacity(n));
            let mut target = Vec::with_capacity(n);
            for i in 0..n {
                let p = reference[i / gs];
                let r = (wf[i] / p.h as f64).round_ties_even();
                let code = r + p.z as f64;
                let inside = (0.0..=qmax).contains(&code);
                keep.push(T::of(if inside { 1.0 } else { 0.0 }));
                sat.push(T::of(if inside { 0.0 } else { code.clamp(0.0, qmax) }));
                target.push(r);
            }
            (
                offset(target.into_iter(), &u.value()),
                Tensor::new(vec![rows, gs], keep)?,
                Tensor::new(vec![rows, gs], sat)?,
            )
        }
    };
    let codes = u
        .add(g.constant(c_off.clone()))?
        .add(z)?
        .mul(g.constant(keep.clone()))?
        .add(g.constant(saturated.clone()))?;
    let out = codes.sub(z)?.mul(h)?.reshape(&shape)?;
    Ok((
        out,
        FrozenRounding {
            scale: h_off,
            zero_point: z_off,
            codes: c_off,
            keep,
            saturated,
        },
    ))
}

/// Offsets of [`fake_quant`] at the given point, for use as fixed shifts.
pub fn freeze_rounding<T: Real>(
    w: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    spec: &QuantSpec,
) -> Result<FrozenRounding<T>, TensorError> {
    let g = Graph::new();
    let (_, f) = fake_quant_with_offsets(
        g.constant(w.clone()),
        g.constant(gamma.clone()),
        g.constant(beta.clone()),
        spec,
        None,
    )?;
    Ok(f)
}

/// Clipping factors of every projection in one block, as `[groups, 1]` tensors.
#[derive(Debug, Clone)]
pub struct BlockClips<T: Real> {
    pub names: Vec<String>,
    pub gammas: Vec<Tensor<T>>,
    pub betas: Vec<Tensor<T>>,
}

impl<T: Real> BlockClips<T> {
    /// `γ = β = 1` for every group.
    pub fn identity(model: &Model<T>, block: usize, spec: &QuantSpec) -> Result<Self, LgpError> {
        let mut names = Vec::new();
        let mut gammas = Vec::new();
        let mut betas = Vec::new();
        for proj in PROJECTIONS {
            let name = proj_name(block, proj);
            let rows = clip_rows(model.param(&name)?.shape(), spec)?;
            names.push(name);
            gammas.push(Tensor::ones(&[rows, 1]));
            betas.push(Tensor::ones(&[rows, 1]));
        }
        Ok(Self { names, gammas, betas })
    }

    pub fn clip_params(&self, k: usize) -> Vec<ClipParams> {
        self.gammas[k]
            .data()
            .iter()
            .zip(self.betas[k].data())
            .map(|(g, b)| ClipParams::new(g.as_f64(), b.as_f64()))
            .collect()
    }

    fn flat(&self) -> Vec<Tensor<T>> {
        self.gammas.iter().chain(&self.betas).cloned().collect()
    }

    fn set_flat(&mut self, flat: Vec<Tensor<T>>) {
        let n = self.names.len();
        let mut it = flat.into_iter();
        self.gammas = it.by_ref().take(n).collect();
        self.betas = it.collect();
    }
}

/// Values of both objective terms.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LgpTerms {
    pub fit: f64,
    pub grad: f64,
}

impl LgpTerms {
    pub fn joint(&self, alpha1: f64) -> f64 {
        self.fit + alpha1 * self.grad
    }
}

struct Objective<'g, T: Real> {
    joint: Var<'g, T>,
    fit: Var<'g, T>,
    grad: Var<'g, T>,
    clip_vars: Vec<Var<'g, T>>,
}

#[allow(clippy::too_many_arguments)]
fn build_objective<'g, T: Real>(
    g: &'g Graph<T>,
    model: &Model<T>,
    clips: &BlockClips<T>,
    spec: &QuantSpec,
    input: &Tensor<T>,
    target_out: &Tensor<T>,
    target_grad: &Tensor<T>,
    batch: &TokenBatch,
    alpha1: f64,
    frozen: Option<&[FrozenRounding<T>]>,
    block: usize,
) -> Result<Objective<'g, T>, LgpError> {
    let p = model.bind_with(g, |_| false);
    let gam: Vec<Var<'g, T>> = clips.gammas.iter().map(|t| g.param(t.clone())).collect();
    let bet: Vec<Var<'g, T>> = clips.betas.iter().map(|t| g.param(t.clone())).collect();
    let hook = |name: &str, w: Var<'g, T>| -> Result<Var<'g, T>, TensorError> {
        match clips.names.iter().position(|n| n == name) {
            Some(k) => fake_quant(w, gam[k], bet[k], spec, frozen.map(|f| &f[k])),
            None => Ok(w),
        }
    };
    let x = g.param(input.clone());
    let f = model.forward_from(&p, block, x, batch, Some(&hook))?;
    let fit = f.hidden[1].sub(g.constant(target_out.clone()))?.fro_norm_sq()?;
    let loss = model.loss(f.logits, batch)?;
    let gx = g.backward(loss, &[x])?.get(0).scale_f64(batch.batch() as f64)?;
    let grad = gx.sub(g.constant(target_grad.clone()))?.fro_norm_sq()?;
    let joint = if alpha1 > 0.0 { fit.add(grad.scale_f64(alpha1)?)? } else { fit };
    Ok(Objective {
        joint,
        fit,
        grad,
        clip_vars: gam.into_iter().chain(bet).collect(),
    })
}

/// Objective terms summed over batches, without updating anything.
pub fn evaluate_terms<T: Real>(
    model: &Model<T>,
    clips: &BlockClips<T>,
    spec: &QuantSpec,
    inputs: &[Tensor<T>],
    targets: &BlockTargets<T>,
    batches: &[TokenBatch],
) -> Result<LgpTerms, LgpError> {
    let mut out = LgpTerms::default();
    for (b, batch) in batches.iter().enumerate() {
        let g = Graph::new();
        let o = build_objective(
            &g,
            model,
            clips,
            spec,
            &inputs[b],
            &targets.outputs[b],
            &targets.grads[b],
            batch,
            0.0,
            None,
            targets.block,
        )?;
        out.fit += o.fit.item().as_f64();
        out.grad += o.grad.item().as_f64();
    }
    Ok(out)
}

/// Joint objective at `clips` with rounding frozen, plus its gradient in clip order
/// (all `γ` tensors, then all `β` tensors).
#[allow(clippy::too_many_arguments)]
pub fn objective_and_gradient<T: Real>(
    model: &Model<T>,
    clips: &BlockClips<T>,
    spec: &QuantSpec,
    input: &Tensor<T>,
    targets: &BlockTargets<T>,
    batch_index: usize,
    batch: &TokenBatch,
    alpha1: f64,
    frozen: Option<&[FrozenRounding<T>]>,
) -> Result<(f64, Vec<Tensor<T>>), LgpError> {
    let g = Graph::new();
    let o = build_objective(
        &g,
        model,
        clips,
        spec,
        input,
        &targets.outputs[batch_index],
        &targets.grads[batch_index],
        batch,
        alpha1,
        frozen,
        targets.block,
    )?;
    let grads = g.backward(o.joint, &o.clip_vars)?;
    Ok((o.joint.item().as_f64(), (0..grads.len()).map(|i| grads.value(i)).collect()))
}

/// Per-epoch means of both terms, evaluated before each step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockTrace {
    pub block: usize,
    pub initial: LgpTerms,
    pub epochs: Vec<LgpTerms>,
    pub last: LgpTerms,
    pub restarts: usize,
}

enum Stepper<T: Real> {
    Sgd,
    Adam(crate::model::AdamW<T>),
}

/// Learns the clipping factors of one block and returns them with the trace.
pub fn lgp_distill_block<T: Real>(
    model: &Model<T>,
    block: usize,
    inputs: &[Tensor<T>],
    targets: &BlockTargets<T>,
    batches: &[TokenBatch],
    cfg: &LgpConfig,
) -> Result<(BlockClips<T>, BlockTrace), LgpError> {
    cfg.validate()?;
    if batches.is_empty() || inputs.len() != batches.len() || targets.outputs.len() != batches.len() {
        return Err(LgpError::Config("one input and target per calibration batch required".into()));
    }
    let mut clips = BlockClips::identity(model, block, &cfg.spec)?;
    let initial = evaluate_terms(model, &clips, &cfg.spec, inputs, targets, batches)?;
    let new_stepper = |clips: &BlockClips<T>| match cfg.optimizer {
        ClipOptimizer::Sgd => Stepper::Sgd,
        ClipOptimizer::Adam => Stepper::Adam(crate::model::AdamW::new(&clips.flat(), 0.9, 0.999, 0.0)),
    };
    let mut stepper = new_stepper(&clips);
    let mut lr = cfg.learning_rate;
    let mut restarts = 0;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut epoch = 0;
    while epoch < cfg.epochs {
        let snapshot = clips.clone();
        let mut terms = LgpTerms::default();
        let mut diverged = false;
        for (b, batch) in batches.iter().enumerate() {
            let g = Graph::new();
            let o = build_objective(
                &g,
                model,
                &clips,
                &cfg.spec,
                &inputs[b],
                &targets.outputs[b],
                &targets.grads[b],
                batch,
                cfg.alpha1,
                None,
                block,
            )?;
            let joint = o.joint.item().as_f64();
            if !joint.is_finite() {
                diverged = true;
                break;
            }
            terms.fit += o.fit.item().as_f64();
            terms.grad += o.grad.item().as_f64();
            let grads = g.backward(o.joint, &o.clip_vars)?;
            let grads: Vec<Option<Tensor<T>>> = (0..grads.len()).map(|i| Some(grads.value(i))).collect();
            if grads.iter().flatten().any(|t| !t.is_finite()) {
                diverged = true;
                break;
            }
            let mut flat = clips.flat();
            match &mut stepper {
                Stepper::Sgd => {
                    for (p, gr) in flat.iter_mut().zip(&grads) {
                        let gr = gr.as_ref().unwrap();
                        *p = p.zip_map(gr, |a, d| T::of(a.as_f64() - lr * d.as_f64()));
                    }
                }
                Stepper::Adam(opt) => opt.step(&mut flat, &grads, lr),
            }
            for p in &mut flat {
                *p = p.map(|v| T::of(v.as_f64().clamp(ClipParams::MIN, ClipParams::MAX)));
            }
            clips.set_flat(flat);
        }
        if diverged {
            if restarts == cfg.max_restarts {
                return Err(LgpError::Diverged { block, restarts });
            }
            restarts += 1;
            lr *= 0.5;
            log::warn!("block {block} epoch {epoch}: non-finite loss, halving lr to {lr}");
            clips = snapshot;
            stepper = new_stepper(&clips);
            continue;
        }
        epochs.push(terms);
        epoch += 1;
    }
    let mut last = evaluate_terms(model, &clips, &cfg.spec, inputs, targets, batches)?;
    if last.joint(cfg.alpha1) > initial.joint(cfg.alpha1) {
        log::warn!("block {block}: distillation ended above its start, keeping gamma = beta = 1");
        clips = BlockClips::identity(model, block, &cfg.spec)?;
        last = initial;
    }
    Ok((
        clips,
        BlockTrace {
            block,
            initial,
            epochs,
            last,
            restarts,
        },
    ))
}

#[derive(Debug, Clone)]
pub struct LgpResult<T: Real> {
    pub model: Model<T>,
    pub layers: BTreeMap<String, QuantizedLinear>,
    pub clips: BTreeMap<String, Vec<ClipParams>>,
    pub traces: Vec<BlockTrace>,
}

/// Writes the clipped quantization of one block into `model`.
pub fn apply_block_clips<T: Real>(
    model: &mut Model<T>,
    clips: &BlockClips<T>,
    spec: &QuantSpec,
) -> Result<BTreeMap<String, QuantizedLinear>, LgpError> {
    let mut out = BTreeMap::new();
    for (k, name) in clips.names.iter().enumerate() {
        let q = quantize(model.param(name)?, spec, Some(&clips.clip_params(k)))?;
        model.set_param(name, q.dequantize())?;
        out.insert(name.clone(), q);
    }
    Ok(out)
}

/// Shallow-to-deep distillation of every block.
pub fn lgp_quantize_model<T: Real>(
    fp: &Model<T>,
    batches: &[TokenBatch],
    cfg: &LgpConfig,
) -> Result<LgpResult<T>, LgpError> {
    cfg.validate()?;
    let mut model = fp.clone();
    let mut layers = BTreeMap::new();
    let mut clip_map = BTreeMap::new();
    let mut traces = Vec::new();
    for block in 0..fp.config().n_layer {
        let targets = capture_block_targets(fp, batches, block)?;
        let inputs = capture_inputs(&model, batches, block)?;
        let (clips, trace) = lgp_distill_block(&model, block, &inputs, &targets, batches, cfg)?;
        log::info!(
            "block {block}: fit {:.4e} -> {:.4e}, grad {:.4e} -> {:.4e}",
            trace.initial.fit,
            trace.last.fit,
            trace.initial.grad,
            trace.last.grad
        );
        layers.extend(apply_block_clips(&mut model, &clips, &cfg.spec)?);
        for (k, name) in clips.names.iter().enumerate() {
            clip_map.insert(name.clone(), clips.clip_params(k));
        }
        traces.push(trace);
    }
    model.set_precision(Precision::Quantized { bits: cfg.spec.bits });
    Ok(LgpResult {
        model,
        layers,
        clips: clip_map,
        traces,
    })
}

/// Outcome of the `α₁` magnitude search.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlphaChoice {
    pub chosen: f64,
    /// Magnitudes whose weighted gradient term lies within `[0.1, 10]×` the fitting term.
    pub qualifying: Vec<f64>,
    pub terms: LgpTerms,
    /// The gradient term was zero, so `α₁` has no effect.
    pub degenerate: bool,
}

/// Picks the magnitude that brings `α₁·grad` to the scale of `fit`.
///
/// Among qualifying magnitudes, `tie_break` (lower is better) decides when given;
/// otherwise the ratio closest to 1 in log space wins.
pub fn choose_alpha1(
    terms: LgpTerms,
    magnitudes: &[f64],
    tie_break: Option<&mut dyn FnMut(f64) -> f64>,
) -> AlphaChoice {
    let mut sorted = magnitudes.to_vec();
    sorted.sort_by(f64::total_cmp);
    if terms.grad <= 0.0 || terms.fit <= 0.0 {
        log::warn!("gradient term is zero; alpha1 has no effect, using the smallest magnitude");
        return AlphaChoice {
            chosen: sorted[0],
            qualifying: Vec::new(),
            terms,
            degenerate: true,
        };
    }
    let ratio = |a: f64| a * terms.grad / terms.fit;
    let qualifying: Vec<f64> = sorted
        .iter()
        .copied()
        .filter(|&a| (0.1 * (1.0 - 1e-9)..=10.0 * (1.0 + 1e-9)).contains(&ratio(a)))
        .collect();
    let closeness = |a: &f64| ratio(*a).log10().abs();
    let pool = if qualifying.is_empty() { &sorted } else { &qualifying };
    let chosen = match tie_break {
        Some(f) if qualifying.len() > 1 => {
            let scores: Vec<f64> = qualifying.iter().map(|&a| f(a)).collect();
            let best = (0..qualifying.len()).min_by(|&i, &j| scores[i].total_cmp(&scores[j])).unwrap();
            qualifying[best]
        }
        _ => *pool.iter().min_by(|a, b| closeness(a).total_cmp(&closeness(b))).unwrap(),
    };
    AlphaChoice {
        chosen,
        qualifying,
        terms,
        degenerate: false,
    }
}

/// Evaluates both terms at `γ = β = 1` for `block` and applies [`choose_alpha1`].
pub fn alpha1_scale_search<T: Real>(
    fp: &Model<T>,
    batches: &[TokenBatch],
    block: usize,
    spec: &QuantSpec,
    magnitudes: &[f64],
) -> Result<AlphaChoice, LgpError> {
    if magnitudes.is_empty() {
        return Err(LgpError::Config("no alpha1 magnitudes to search".into()));
    }
    let targets = capture_block_targets(fp, batches, block)?;
    let inputs = capture_inputs(fp, batches, block)?;
    let clips = BlockClips::identity(fp, block, spec)?;
    let terms = evaluate_terms(fp, &clips, spec, &inputs, &targets, batches)?;
    Ok(choose_alpha1(terms, magnitudes, None))
}

#[cfg(test)]
mod tests;
