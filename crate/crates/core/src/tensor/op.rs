use std::fmt;
use std::ops::Range;
use std::rc::Rc;

use super::error::TensorError;
use super::{Real, Tensor};

/// Primitive operation kinds recorded in the graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    Scale,
    AddScalar,
    Sum,
    Mean,
    SumLast,
    SumRows,
    Expand,
    Exp,
    Log,
    Power,
    Sigmoid,
    Silu,
    Softmax,
    LayerNorm,
    RmsNorm,
    Embedding,
    ScatterRows,
    Transpose,
    Reshape,
    Concat,
    Slice,
    Pad,
    CrossEntropy,
    SteQuantize,
    Clamp,
    FroNormSq,
    Cosine,
    Custom,
    CustomGrad,
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::AddScalar => "add_scalar",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::SumLast => "sum_last",
            OpKind::SumRows => "sum_rows",
            OpKind::Expand => "expand",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Power => "power",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Silu => "silu",
            OpKind::Softmax => "softmax",
            OpKind::LayerNorm => "layer_norm",
            OpKind::RmsNorm => "rms_norm",
            OpKind::Embedding => "embedding",
            OpKind::ScatterRows => "scatter_rows",
            OpKind::Transpose => "transpose",
            OpKind::Reshape => "reshape",
            OpKind::Concat => "concat",
            OpKind::Slice => "slice",
            OpKind::Pad => "pad",
            OpKind::CrossEntropy => "cross_entropy",
            OpKind::SteQuantize => "ste_quantize",
            OpKind::Clamp => "clamp",
            OpKind::FroNormSq => "fro_norm_sq",
            OpKind::Cosine => "cosine",
            OpKind::Custom => "custom",
            OpKind::CustomGrad => "custom_grad",
        };
        f.write_str(s)
    }
}

/// How the right operand of a binary op is broadcast against the left one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Bcast {
    Same,
    /// Right operand holds one element.
    Scalar,
    /// Right operand is a trailing vector repeated over every row.
    Row,
    /// Right operand is a column (`[.., 1]`) repeated over every column.
    Col,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

/// Forward rule of a straight-through quantizer. The backward rule is always identity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SteKind {
    /// Round to nearest, ties to even.
    Round,
    /// Absolute-mean ternarization: `s * clamp(round(w / s), -1, 1)` with `s = mean|w|`.
    Ternary,
}

pub(crate) type ScalarFn<T> = Rc<dyn Fn(T) -> T>;

#[derive(Clone)]
pub(crate) enum Op<T: Real> {
    Leaf,
    MatMul { ta: bool, tb: bool },
    Add(Bcast),
    Sub(Bcast),
    Mul(Bcast),
    Scale(T),
    AddScalar(T),
    Sum,
    Mean,
    SumLast,
    SumRows,
    Expand { kind: Bcast, shape: Vec<usize> },
    Exp,
    Log,
    Power(T),
    Sigmoid,
    Silu,
    Softmax,
    LayerNorm(T),
    RmsNorm(T),
    Embedding(Rc<[usize]>),
    ScatterRows { ids: Rc<[usize]>, rows: usize },
    Transpose,
    Reshape(Vec<usize>),
    Concat(Axis),
    Slice { rows: Range<usize>, cols: Range<usize> },
    Pad { shape: [usize; 2], row0: usize, col0: usize },
    CrossEntropy { targets: Rc<[usize]>, weights: Rc<[T]> },
    Ste(SteKind),
    Clamp { lo: T, hi: T },
    FroNormSq,
    Cosine,
    Custom { name: Rc<str>, f: ScalarFn<T>, df: ScalarFn<T> },
    CustomGrad { name: Rc<str>, df: ScalarFn<T> },
}

impl<T: Real> Op<T> {
    pub(crate) fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Add(_) => OpKind::Add,
            Op::Sub(_) => OpKind::Sub,
            Op::Mul(_) => OpKind::Mul,
            Op::Scale(_) => OpKind::Scale,
            Op::AddScalar(_) => OpKind::AddScalar,
            Op::Sum => OpKind::Sum,
            Op::Mean => OpKind::Mean,
            Op::SumLast => OpKind::SumLast,
            Op::SumRows => OpKind::SumRows,
            Op::Expand { .. } => OpKind::Expand,
            Op::Exp => OpKind::Exp,
            Op::Log => OpKind::Log,
            Op::Power(_) => OpKind::Power,
            Op::Sigmoid => OpKind::Sigmoid,
            Op::Silu => OpKind::Silu,
            Op::Softmax => OpKind::Softmax,
            Op::LayerNorm(_) => OpKind::LayerNorm,
            Op::RmsNorm(_) => OpKind::RmsNorm,
            Op::Embedding(_) => OpKind::Embedding,
            Op::ScatterRows { .. } => OpKind::ScatterRows,
            Op::Transpose => OpKind::Transpose,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Concat(_) => OpKind::Concat,
            Op::Slice { .. } => OpKind::Slice,
            Op::Pad { .. } => OpKind::Pad,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::Ste(_) => OpKind::SteQuantize,
            Op::Clamp { .. } => OpKind::Clamp,
            Op::FroNormSq => OpKind::FroNormSq,
            Op::Cosine => OpKind::Cosine,
            Op::Custom { .. } => OpKind::Custom,
            Op::CustomGrad { .. } => OpKind::CustomGrad,
        }
    }
}

/// Classifies how `b` broadcasts against `a`.
pub(crate) fn broadcast_kind(op: OpKind, a: &[usize], b: &[usize]) -> Result<Bcast, TensorError> {
    if a == b {
        return Ok(Bcast::Same);
    }
    let numel_a: usize = a.iter().product();
    let numel_b: usize = b.iter().product();
    let mismatch = || TensorError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    if numel_b == 1 {
        return Ok(Bcast::Scalar);
    }
    if a.is_empty() {
        return Err(mismatch());
    }
    let cols = *a.last().unwrap();
    let rows = numel_a / cols.max(1);
    if b.last() == Some(&1) && numel_b == rows && b.len() == a.len() {
        return Ok(Bcast::Col);
    }
    let leading_ones = b.len() >= 1 && b[..b.len() - 1].iter().all(|&d| d == 1);
    if leading_ones && b.last() == Some(&cols) {
        return Ok(Bcast::Row);
    }
    Err(mismatch())
}

#[inline]
fn bcast_index(kind: Bcast, i: usize, cols: usize) -> usize {
    match kind {
        Bcast::Same => i,
        Bcast::Scalar => 0,
        Bcast::Row => i % cols,
        Bcast::Col => i / cols,
    }
}

fn binary<T: Real>(a: &Tensor<T>, b: &Tensor<T>, kind: Bcast, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let cols = a.cols().max(1);
    let bd = b.data();
    let data = a
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| f(x, bd[bcast_index(kind, i, cols)]))
        .collect();
    Tensor::new(a.shape().to_vec(), data).expect("broadcast keeps lhs shape")
}

fn require_rank2<T: Real>(op: OpKind, t: &Tensor<T>) -> Result<(usize, usize), TensorError> {
    if t.rank() != 2 {
        return Err(TensorError::InvalidArgument {
            op,
            msg: format!("expected a rank-2 tensor, got shape {:?}", t.shape()),
        });
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn keepdim_shape(shape: &[usize]) -> Vec<usize> {
    if shape.is_empty() {
        Vec::new()
    } else {
        let mut s = shape.to_vec();
        *s.last_mut().unwrap() = 1;
        s
    }
}

pub(crate) fn matmul<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    ta: bool,
    tb: bool,
) -> Result<Tensor<T>, TensorError> {
    let (ra, ca) = require_rank2(OpKind::MatMul, a)?;
    let (rb, cb) = require_rank2(OpKind::MatMul, b)?;
    let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
    let (kb, n) = if tb { (cb, rb) } else { (rb, cb) };
    if k != kb {
        return Err(TensorError::ShapeMismatch {
            op: OpKind::MatMul,
            lhs: vec![m, k],
            rhs: vec![kb, n],
        });
    }
    let mut out = vec![T::zero(); m * n];
    if m > 0 && n > 0 && k > 0 {
        let (rsa, csa) = if ta { (1, ca as isize) } else { (ca as isize, 1) };
        let (rsb, csb) = if tb { (1, cb as isize) } else { (cb as isize, 1) };
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.data(),
            rsa,
            csa,
            b.data(),
            rsb,
            csb,
            T::zero(),
            &mut out,
            n as isize,
            1,
        );
    }
    Tensor::new(vec![m, n], out)
}

pub(crate) fn ternarize_values<T: Real>(x: &[T]) -> (T, Vec<T>) {
    let n = x.len().max(1);
    let mean_abs = x.iter().map(|v| v.abs()).sum::<T>() / T::of(n as f64);
    let scale = if mean_abs > T::zero() {
        mean_abs
    } else {
        T::of(1e-8)
    };
    let codes = x
        .iter()
        .map(|&v| (v / scale).round_ties_even().max(-T::one()).min(T::one()))
        .collect();
    (scale, codes)
}

/// Evaluates one primitive on concrete inputs.
pub(crate) fn eval<T: Real>(op: &Op<T>, xs: &[&Tensor<T>]) -> Result<Tensor<T>, TensorError> {
    let kind = op.kind();
    match op {
        Op::Leaf => unreachable!("leaves carry their own value"),
        Op::MatMul { ta, tb } => matmul(xs[0], xs[1], *ta, *tb),
        Op::Add(k) => Ok(binary(xs[0], xs[1], *k, |a, b| a + b)),
        Op::Sub(k) => Ok(binary(xs[0], xs[1], *k, |a, b| a - b)),
        Op::Mul(k) => Ok(binary(xs[0], xs[1], *k, |a, b| a * b)),
        Op::Scale(c) => Ok(xs[0].map(|v| v * *c)),
        Op::AddScalar(c) => Ok(xs[0].map(|v| v + *c)),
        Op::Sum => Ok(Tensor::scalar(xs[0].data().iter().copied().sum())),
        Op::Mean => {
            let n = xs[0].numel().max(1);
            Ok(Tensor::scalar(
                xs[0].data().iter().copied().sum::<T>() / T::of(n as f64),
            ))
        }
        Op::SumLast => {
            let x = xs[0];
            let c = x.cols();
            let data = x.data().chunks(c.max(1)).map(|r| r.iter().copied().sum()).collect();
            Tensor::new(keepdim_shape(x.shape()), data)
        }
        Op::SumRows => {
            let x = xs[0];
            let c = x.cols();
            let mut out = vec![T::zero(); c];
            for r in x.data().chunks(c.max(1)) {
                for (o, &v) in out.iter_mut().zip(r) {
                    *o += v;
                }
            }
            Tensor::new(vec![c], out)
        }
        Op::Expand { shape, .. } => {
            let x = xs[0];
            let target = Tensor::<T>::zeros(shape);
            let found = broadcast_kind(kind, shape, x.shape())?;
            Ok(binary(&target, x, found, |_, b| b))
        }
        Op::Exp => Ok(xs[0].map(|v| v.exp())),
        Op::Log => Ok(xs[0].map(|v| v.ln())),
        Op::Power(p) => Ok(xs[0].map(|v| v.powf(*p))),
        Op::Sigmoid => Ok(xs[0].map(sigmoid)),
        Op::Silu => Ok(xs[0].map(|v| v * sigmoid(v))),
        Op::Softmax => {
            let x = xs[0];
            let c = x.cols().max(1);
            let mut out = Vec::with_capacity(x.numel());
            for r in x.data().chunks(c) {
                softmax_row(r, &mut out);
            }
            Tensor::new(x.shape().to_vec(), out)
        }
        Op::LayerNorm(eps) => {
            let x = xs[0];
            let c = x.cols().max(1);
            let n = T::of(c as f64);
            let mut out = Vec::with_capacity(x.numel());
            for r in x.data().chunks(c) {
                let mu = r.iter().copied().sum::<T>() / n;
                let var = r.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / n;
                let inv = (var + *eps).powf(T::of(-0.5));
                out.extend(r.iter().map(|&v| (v - mu) * inv));
            }
            Tensor::new(x.shape().to_vec(), out)
        }
        Op::RmsNorm(eps) => {
            let x = xs[0];
            let c = x.cols().max(1);
            let n = T::of(c as f64);
            let mut out = Vec::with_capacity(x.numel());
            for r in x.data().chunks(c) {
                let ms = r.iter().map(|&v| v * v).sum::<T>() / n;
                let inv = (ms + *eps).powf(T::of(-0.5));
                out.extend(r.iter().map(|&v| v * inv));
            }
            Tensor::new(x.shape().to_vec(), out)
        }
        Op::Embedding(ids) => {
            let table = xs[0];
            let (v, d) = require_rank2(kind, table)?;
            let mut out = Vec::with_capacity(ids.len() * d);
            for &id in ids.iter() {
                if id >= v {
                    return Err(TensorError::InvalidArgument {
                        op: kind,
                        msg: format!("index {id} out of range for table of {v} rows"),
                    });
                }
                out.extend_from_slice(table.row(id));
            }
            Tensor::new(vec![ids.len(), d], out)
        }
        Op::ScatterRows { ids, rows } => {
            let src = xs[0];
            let (n, d) = require_rank2(kind, src)?;
            if n != ids.len() {
                return Err(TensorError::InvalidArgument {
                    op: kind,
                    msg: format!("{} indices for {n} source rows", ids.len()),
                });
            }
            let mut out = vec![T::zero(); rows * d];
            for (i, &id) in ids.iter().enumerate() {
                if id >= *rows {
                    return Err(TensorError::InvalidArgument {
                        op: kind,
                        msg: format!("index {id} out of range for {rows} rows"),
                    });
                }
                for (o, &s) in out[id * d..(id + 1) * d].iter_mut().zip(src.row(i)) {
                    *o += s;
                }
            }
            Tensor::new(vec![*rows, d], out)
        }
        Op::Transpose => {
            require_rank2(kind, xs[0])?;
            Ok(xs[0].transpose2())
        }
        Op::Reshape(shape) => {
            let n: usize = shape.iter().product();
            if n != xs[0].numel() {
                return Err(TensorError::ShapeMismatch {
                    op: kind,
                    lhs: xs[0].shape().to_vec(),
                    rhs: shape.clone(),
                });
            }
            Tensor::new(shape.clone(), xs[0].data().to_vec())
        }
        Op::Concat(axis) => concat(xs, *axis),
        Op::Slice { rows, cols } => {
            let x = xs[0];
            let (r, c) = require_rank2(kind, x)?;
            if rows.end > r || cols.end > c || rows.start > rows.end || cols.start > cols.end {
                return Err(TensorError::InvalidArgument {
                    op: kind,
                    msg: format!("slice {rows:?} x {cols:?} outside {r} x {c}"),
                });
            }
            let mut out = Vec::with_capacity(rows.len() * cols.len());
            for i in rows.clone() {
                out.extend_from_slice(&x.row(i)[cols.clone()]);
            }
            Tensor::new(vec![rows.len(), cols.len()], out)
        }
        Op::Pad { shape, row0, col0 } => {
            let x = xs[0];
            let (r, c) = require_rank2(kind, x)?;
            if row0 + r > shape[0] || col0 + c > shape[1] {
                return Err(TensorError::InvalidArgument {
                    op: kind,
                    msg: format!("{r} x {c} block at ({row0}, {col0}) exceeds {shape:?}"),
                });
            }
            let mut out = vec![T::zero(); shape[0] * shape[1]];
            for i in 0..r {
                let dst = (row0 + i) * shape[1] + col0;
                out[dst..dst + c].copy_from_slice(x.row(i));
            }
            Tensor::new(shape.to_vec(), out)
        }
        Op::CrossEntropy { targets, weights } => {
            let x = xs[0];
            let (m, v) = require_rank2(kind, x)?;
            if targets.len() != m || weights.len() != m {
                return Err(TensorError::InvalidArgument {
                    op: kind,
                    msg: format!("{} targets / {} weights for {m} rows", targets.len(), weights.len()),
                });
            }
            let mut total = T::zero();
            for r in 0..m {
                if weights[r] == T::zero() {
                    continue;
                }
                let t = targets[r];
                if t >= v {
                    return Err(TensorError::InvalidArgument {
                        op: kind,
                        msg: format!("target {t} out of range for {v} classes"),
                    });
                }
                let row = x.row(r);
                total += weights[r] * (log_sum_exp(row) - row[t]);
            }
            Ok(Tensor::scalar(total))
        }
        Op::Ste(SteKind::Round) => Ok(xs[0].map(|v| v.round_ties_even())),
        Op::Ste(SteKind::Ternary) => {
            let (scale, codes) = ternarize_values(xs[0].data());
            Tensor::new(
                xs[0].shape().to_vec(),
                codes.into_iter().map(|c| c * scale).collect(),
            )
        }
        Op::Clamp { lo, hi } => Ok(xs[0].map(|v| v.max(*lo).min(*hi))),
        Op::FroNormSq => Ok(Tensor::scalar(xs[0].sq_norm())),
        Op::Cosine => {
            let (a, b) = (xs[0], xs[1]);
            if a.shape() != b.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: kind,
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            Ok(Tensor::scalar(cosine(a.data(), b.data())))
        }
        Op::Custom { f, .. } => Ok(xs[0].map(|v| f(v))),
        Op::CustomGrad { df, .. } => {
            let (x, g) = (xs[0], xs[1]);
            Ok(x.zip_map(g, |xv, gv| gv * df(xv)))
        }
    }
}

fn concat<T: Real>(xs: &[&Tensor<T>], axis: Axis) -> Result<Tensor<T>, TensorError> {
    if xs.is_empty() {
        return Err(TensorError::InvalidArgument {
            op: OpKind::Concat,
            msg: "nothing to concatenate".into(),
        });
    }
    let (r0, c0) = require_rank2(OpKind::Concat, xs[0])?;
    for x in &xs[1..] {
        let (r, c) = require_rank2(OpKind::Concat, x)?;
        let ok = match axis {
            Axis::Rows => c == c0,
            Axis::Cols => r == r0,
        };
        if !ok {
            return Err(TensorError::ShapeMismatch {
                op: OpKind::Concat,
                lhs: xs[0].shape().to_vec(),
                rhs: x.shape().to_vec(),
            });
        }
    }
    match axis {
        Axis::Rows => {
            let rows: usize = xs.iter().map(|x| x.shape()[0]).sum();
            let mut out = Vec::with_capacity(rows * c0);
            for x in xs {
                out.extend_from_slice(x.data());
            }
            Tensor::new(vec![rows, c0], out)
        }
        Axis::Cols => {
            let cols: usize = xs.iter().map(|x| x.shape()[1]).sum();
            let mut out = Vec::with_capacity(r0 * cols);
            for i in 0..r0 {
                for x in xs {
                    out.extend_from_slice(x.row(i));
                }
            }
            Tensor::new(vec![r0, cols], out)
        }
    }
}

#[inline]
pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn log_sum_exp<T: Real>(row: &[T]) -> T {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    if !m.is_finite() {
        return m;
    }
    m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln()
}

pub(crate) fn softmax_row<T: Real>(row: &[T], out: &mut Vec<T>) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let start = out.len();
    let mut s = T::zero();
    for &v in row {
        let e = (v - m).exp();
        s += e;
        out.push(e);
    }
    for o in &mut out[start..] {
        *o = *o / s;
    }
}

pub(crate) fn cosine<T: Real>(a: &[T], b: &[T]) -> T {
    let dot: T = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
    let na: T = a.iter().map(|&x| x * x).sum();
    let nb: T = b.iter().map(|&x| x * x).sum();
    let denom = (na * nb).sqrt();
    if denom > T::zero() {
        dot / denom
    } else {
        T::zero()
    }
}
