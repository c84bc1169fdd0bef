//! Derivative rules. Each rule emits graph nodes built from the same
//! primitives, which is what makes higher-order differentiation work.

use super::error::TensorError;
use super::graph::Var;
use super::op::{Axis, Bcast, Op};
use super::{Real, Tensor};

type Contribs<'g, T> = Vec<Option<Var<'g, T>>>;

/// Sums `g` back down to `shape` after a broadcast of kind `kind`.
fn reduce_to<'g, T: Real>(g: Var<'g, T>, kind: Bcast, shape: &[usize]) -> Result<Var<'g, T>, TensorError> {
    let r = match kind {
        Bcast::Same => return Ok(g),
        Bcast::Scalar => g.sum()?,
        Bcast::Row => g.sum_rows()?,
        Bcast::Col => g.sum_last()?,
    };
    if r.shape() == shape {
        Ok(r)
    } else {
        r.reshape(shape)
    }
}

pub(crate) fn vjp<'g, T: Real>(
    op: &Op<T>,
    out: Var<'g, T>,
    xs: &[Var<'g, T>],
    g: Var<'g, T>,
    need: &[bool],
) -> Result<Contribs<'g, T>, TensorError> {
    let graph = out.graph();
    let one = |v: Var<'g, T>| -> Result<Contribs<'g, T>, TensorError> { Ok(vec![Some(v)]) };
    match op {
        Op::Leaf => Ok(Vec::new()),
        Op::MatMul { ta, tb } => {
            let (a, b) = (xs[0], xs[1]);
            let da = if need[0] {
                Some(if !ta {
                    g.matmul_t(b, false, !tb)?
                } else {
                    b.matmul_t(g, *tb, true)?
                })
            } else {
                None
            };
            let db = if need[1] {
                Some(if !tb {
                    a.matmul_t(g, !ta, false)?
                } else {
                    g.matmul_t(a, true, *ta)?
                })
            } else {
                None
            };
            Ok(vec![da, db])
        }
        Op::Add(k) => {
            let db = if need[1] {
                Some(reduce_to(g, *k, &xs[1].shape())?)
            } else {
                None
            };
            Ok(vec![Some(g), db])
        }
        Op::Sub(k) => {
            let db = if need[1] {
                Some(reduce_to(g, *k, &xs[1].shape())?.neg()?)
            } else {
                None
            };
            Ok(vec![Some(g), db])
        }
        Op::Mul(k) => {
            let (a, b) = (xs[0], xs[1]);
            let da = if need[0] { Some(g.mul(b)?) } else { None };
            let db = if need[1] {
                Some(reduce_to(g.mul(a)?, *k, &b.shape())?)
            } else {
                None
            };
            Ok(vec![da, db])
        }
        Op::Scale(c) => one(g.scale(*c)?),
        Op::AddScalar(_) => one(g),
        Op::Sum => one(g.bcast_to(Bcast::Scalar, &xs[0].shape())?),
        Op::Mean => {
            let shape = xs[0].shape();
            let n: usize = shape.iter().product();
            one(g
                .bcast_to(Bcast::Scalar, &shape)?
                .scale(T::of(1.0 / n.max(1) as f64))?)
        }
        Op::SumLast => one(g.bcast_to(Bcast::Col, &xs[0].shape())?),
        Op::SumRows => one(g.bcast_to(Bcast::Row, &xs[0].shape())?),
        Op::Expand { kind, .. } => one(reduce_to(g, *kind, &xs[0].shape())?),
        Op::Exp => one(g.mul(out)?),
        Op::Log => one(g.mul(xs[0].powf(-T::one())?)?),
        Op::Power(p) => {
            let d = xs[0].powf(*p - T::one())?.scale(*p)?;
            one(g.mul(d)?)
        }
        Op::Sigmoid => {
            let d = out.mul(out.neg()?.add_scalar(T::one())?)?;
            one(g.mul(d)?)
        }
        Op::Silu => {
            let x = xs[0];
            let s = x.sigmoid()?;
            let inner = x.mul(s.neg()?.add_scalar(T::one())?)?.add_scalar(T::one())?;
            one(g.mul(s.mul(inner)?)?)
        }
        Op::Softmax => {
            let t = g.mul(out)?.sum_last()?;
            one(g.sub(t)?.mul(out)?)
        }
        Op::LayerNorm(eps) => {
            let x = xs[0];
            let centered = x.sub(x.mean_last()?)?;
            let r = centered
                .powf(T::of(2.0))?
                .mean_last()?
                .add_scalar(*eps)?
                .powf(T::of(-0.5))?;
            let proj = out.mul(g.mul(out)?.mean_last()?)?;
            one(g.sub(g.mean_last()?)?.sub(proj)?.mul(r)?)
        }
        Op::RmsNorm(eps) => {
            let x = xs[0];
            let r = x
                .powf(T::of(2.0))?
                .mean_last()?
                .add_scalar(*eps)?
                .powf(T::of(-0.5))?;
            let proj = out.mul(g.mul(out)?.mean_last()?)?;
            one(g.sub(proj)?.mul(r)?)
        }
        Op::Embedding(ids) => {
            let rows = xs[0].shape()[0];
            one(g.scatter_rows(ids, rows)?)
        }
        Op::ScatterRows { ids, .. } => one(g.embedding(ids)?),
        Op::Transpose => one(g.t()?),
        Op::Reshape(_) => one(g.reshape(&xs[0].shape())?),
        Op::Concat(axis) => {
            let gs = g.shape();
            let mut offset = 0;
            let mut res = Vec::with_capacity(xs.len());
            for (x, &needed) in xs.iter().zip(need) {
                let s = x.shape();
                let (rows, cols, step) = match axis {
                    Axis::Rows => (offset..offset + s[0], 0..gs[1], s[0]),
                    Axis::Cols => (0..gs[0], offset..offset + s[1], s[1]),
                };
                res.push(if needed { Some(g.slice(rows, cols)?) } else { None });
                offset += step;
            }
            Ok(res)
        }
        Op::Slice { rows, cols } => {
            let s = xs[0].shape();
            one(g.pad([s[0], s[1]], rows.start, cols.start)?)
        }
        Op::Pad { row0, col0, .. } => {
            let s = xs[0].shape();
            one(g.slice(*row0..row0 + s[0], *col0..col0 + s[1])?)
        }
        Op::CrossEntropy { targets, weights } => {
            let x = xs[0];
            let shape = x.shape();
            let (m, v) = (shape[0], shape[1]);
            let mut onehot = vec![T::zero(); m * v];
            for r in 0..m {
                if weights[r] != T::zero() {
                    onehot[r * v + targets[r]] = T::one();
                }
            }
            let onehot = graph.constant(Tensor::new(shape.clone(), onehot)?);
            let w = graph.constant(Tensor::new(vec![m, 1], weights.to_vec())?);
            let d = x.softmax()?.sub(onehot)?.mul(w)?.mul(g)?;
            one(d)
        }
        Op::Ste(_) => one(g),
        Op::Clamp { lo, hi } => {
            let x = xs[0].value();
            let mask = x.map(|v| if v >= *lo && v <= *hi { T::one() } else { T::zero() });
            one(g.mul(graph.constant(mask))?)
        }
        Op::FroNormSq => one(xs[0].scale(T::of(2.0))?.mul(g)?),
        Op::Cosine => {
            let (a, b) = (xs[0], xs[1]);
            let na = a.fro_norm_sq()?;
            let nb = b.fro_norm_sq()?;
            let inv_ab = na.mul(nb)?.powf(T::of(-0.5))?;
            let da = if need[0] {
                let c_over = out.mul(na.powf(-T::one())?)?;
                Some(b.mul(inv_ab)?.sub(a.mul(c_over)?)?.mul(g)?)
            } else {
                None
            };
            let db = if need[1] {
                let c_over = out.mul(nb.powf(-T::one())?)?;
                Some(a.mul(inv_ab)?.sub(b.mul(c_over)?)?.mul(g)?)
            } else {
                None
            };
            Ok(vec![da, db])
        }
        Op::Custom { name, df, .. } => {
            let d = xs[0].push_op(
                Op::CustomGrad {
                    name: format!("{name}'").into(),
                    df: df.clone(),
                },
                &[g],
            )?;
            one(d)
        }
        Op::CustomGrad { name, .. } => Err(TensorError::UnsupportedDerivative(name.to_string())),
    }
}
