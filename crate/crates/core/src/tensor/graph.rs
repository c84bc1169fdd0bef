use std::cell::RefCell;
use std::fmt;
use std::ops::Range;
use std::rc::Rc;

use super::error::TensorError;
use super::op::{broadcast_kind, eval, Axis, Bcast, Op, OpKind, SteKind};
use super::{Real, Tensor};

struct Node<T: Real> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    inputs: Vec<usize>,
    requires_grad: bool,
}

/// Define-by-run computation graph.
///
/// Every operation is evaluated eagerly when it is recorded. Node ids are
/// assigned in construction order, which is also a topological order.
/// Backward passes append new nodes built from the same primitives, so a
/// gradient can itself be differentiated.
pub struct Graph<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> fmt::Debug for Graph<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph").field("nodes", &self.len()).finish()
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Real> {
    graph: &'g Graph<T>,
    id: usize,
}

impl<T: Real> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var(#{} {} {:?})", self.id, self.op_kind(), self.shape())
    }
}

/// Result of a backward pass, aligned with the requested `wrt` list.
#[derive(Debug)]
pub struct Gradients<'g, T: Real> {
    grads: Vec<Var<'g, T>>,
    unreachable: Vec<bool>,
}

impl<'g, T: Real> Gradients<'g, T> {
    pub fn get(&self, i: usize) -> Var<'g, T> {
        self.grads[i]
    }

    pub fn value(&self, i: usize) -> Tensor<T> {
        self.grads[i].value().as_ref().clone()
    }

    /// True when `wrt[i]` had no path to the root; its gradient is then all zeros.
    pub fn is_unreachable(&self, i: usize) -> bool {
        self.unreachable[i]
    }

    pub fn any_unreachable(&self) -> bool {
        self.unreachable.iter().any(|&u| u)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = Var<'g, T>> + '_ {
        self.grads.iter().copied()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op: Op::Leaf,
            inputs: Vec::new(),
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// Leaf that can be differentiated against.
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    pub fn scalar(&self, value: T) -> Var<'_, T> {
        self.constant(Tensor::scalar(value))
    }

    /// Returns the current value of `v`.
    pub fn evaluate(&self, v: Var<'_, T>) -> Tensor<T> {
        v.value().as_ref().clone()
    }

    /// Replaces the value held by a leaf. Call [`Graph::recompute`] to refresh dependents.
    pub fn set_leaf(&self, v: Var<'_, T>, value: Tensor<T>) -> Result<(), TensorError> {
        let mut nodes = self.nodes.borrow_mut();
        let node = &mut nodes[v.id];
        if !matches!(node.op, Op::Leaf) {
            return Err(TensorError::NotALeaf(v.id));
        }
        if node.value.shape() != value.shape() {
            return Err(TensorError::ShapeMismatch {
                op: OpKind::Leaf,
                lhs: node.value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        node.value = Rc::new(value);
        Ok(())
    }

    /// Re-evaluates every non-leaf node in construction order.
    pub fn recompute(&self) -> Result<(), TensorError> {
        let n = self.len();
        for id in 0..n {
            let (op, inputs) = {
                let nodes = self.nodes.borrow();
                let node = &nodes[id];
                if matches!(node.op, Op::Leaf) {
                    continue;
                }
                let inputs: Vec<Rc<Tensor<T>>> =
                    node.inputs.iter().map(|&i| nodes[i].value.clone()).collect();
                (node.op.clone(), inputs)
            };
            let refs: Vec<&Tensor<T>> = inputs.iter().map(|r| r.as_ref()).collect();
            let value = eval(&op, &refs)?;
            self.nodes.borrow_mut()[id].value = Rc::new(value);
        }
        Ok(())
    }

    fn push<'g>(&'g self, op: Op<T>, inputs: &[Var<'g, T>]) -> Result<Var<'g, T>, TensorError> {
        for v in inputs {
            if !std::ptr::eq(v.graph, self) {
                return Err(TensorError::ForeignNode);
            }
        }
        let (values, requires_grad) = {
            let nodes = self.nodes.borrow();
            let values: Vec<Rc<Tensor<T>>> =
                inputs.iter().map(|v| nodes[v.id].value.clone()).collect();
            let rg = inputs.iter().any(|v| nodes[v.id].requires_grad);
            (values, rg)
        };
        let refs: Vec<&Tensor<T>> = values.iter().map(|r| r.as_ref()).collect();
        let value = eval(&op, &refs)?;
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            inputs: inputs.iter().map(|v| v.id).collect(),
            requires_grad,
        });
        Ok(Var {
            graph: self,
            id: nodes.len() - 1,
        })
    }

    /// Concatenates rank-2 values along `axis`.
    pub fn concat<'g>(&'g self, parts: &[Var<'g, T>], axis: Axis) -> Result<Var<'g, T>, TensorError> {
        self.push(Op::Concat(axis), parts)
    }

    /// Reverse-mode gradient of a scalar `root` with respect to each of `wrt`.
    ///
    /// The returned gradients are nodes of this graph and may be used as the
    /// root of another backward pass. Members of `wrt` with no path to `root`
    /// get a zero gradient and are flagged in [`Gradients::is_unreachable`].
    pub fn backward<'g>(
        &'g self,
        root: Var<'g, T>,
        wrt: &[Var<'g, T>],
    ) -> Result<Gradients<'g, T>, TensorError> {
        for v in wrt.iter().chain(std::iter::once(&root)) {
            if !std::ptr::eq(v.graph, self) {
                return Err(TensorError::ForeignNode);
            }
        }
        let root_shape = root.shape();
        if root_shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarRoot(root_shape));
        }
        for v in wrt {
            if !v.requires_grad() {
                return Err(TensorError::NotDifferentiable(v.id));
            }
        }

        let n = root.id + 1;
        let min_id = wrt.iter().map(|v| v.id).min().unwrap_or(n);
        let mut relevant = vec![false; n];
        {
            let nodes = self.nodes.borrow();
            let mut desc = vec![false; n];
            for v in wrt {
                if v.id < n {
                    desc[v.id] = true;
                }
            }
            for id in min_id..n {
                if !desc[id] {
                    desc[id] = nodes[id].inputs.iter().any(|&i| desc[i]);
                }
            }
            let mut anc = vec![false; n];
            anc[root.id] = true;
            for id in (min_id..n).rev() {
                if anc[id] {
                    for &i in &nodes[id].inputs {
                        anc[i] = true;
                    }
                }
            }
            for id in min_id..n {
                relevant[id] = desc[id] && anc[id];
            }
        }

        let mut adj: Vec<Option<Var<'g, T>>> = vec![None; n];
        if relevant[root.id] {
            adj[root.id] = Some(self.constant(Tensor::ones(&root_shape)));
        }
        for id in (min_id..n).rev() {
            if !relevant[id] {
                continue;
            }
            let Some(g) = adj[id] else { continue };
            let (op, inputs) = {
                let nodes = self.nodes.borrow();
                (nodes[id].op.clone(), nodes[id].inputs.clone())
            };
            if inputs.is_empty() {
                continue;
            }
            let need: Vec<bool> = inputs.iter().map(|&i| relevant[i]).collect();
            if !need.iter().any(|&b| b) {
                continue;
            }
            let xs: Vec<Var<'g, T>> = inputs.iter().map(|&i| Var { graph: self, id: i }).collect();
            let out = Var { graph: self, id };
            let contribs = super::backward::vjp(&op, out, &xs, g, &need)?;
            for ((&i, c), &needed) in inputs.iter().zip(contribs).zip(&need) {
                if !needed {
                    continue;
                }
                let Some(c) = c else { continue };
                adj[i] = Some(match adj[i] {
                    Some(prev) => prev.add(c)?,
                    None => c,
                });
            }
        }

        let mut grads = Vec::with_capacity(wrt.len());
        let mut unreachable = Vec::with_capacity(wrt.len());
        for v in wrt {
            match adj.get(v.id).copied().flatten() {
                Some(g) => {
                    grads.push(g);
                    unreachable.push(false);
                }
                None => {
                    if v.id != root.id {
                        log::warn!("backward: node #{} has no path to the root", v.id);
                    }
                    let g = if v.id == root.id {
                        self.constant(Tensor::ones(&root_shape))
                    } else {
                        self.constant(Tensor::zeros(&v.shape()))
                    };
                    grads.push(g);
                    unreachable.push(v.id != root.id);
                }
            }
        }
        Ok(Gradients { grads, unreachable })
    }

    /// Gradient of `‖∇_inner root‖²` with respect to each of `outer`.
    pub fn grad_of_grad<'g>(
        &'g self,
        root: Var<'g, T>,
        inner: Var<'g, T>,
        outer: &[Var<'g, T>],
    ) -> Result<Gradients<'g, T>, TensorError> {
        let g = self.backward(root, &[inner])?.get(0);
        let norm = g.fro_norm_sq()?;
        self.backward(norm, outer)
    }
}

macro_rules! unary {
    ($(#[$m:meta])* $name:ident, $op:expr) => {
        $(#[$m])*
        pub fn $name(self) -> Result<Var<'g, T>, TensorError> {
            self.graph.push($op, &[self])
        }
    };
}

impl<'g, T: Real> Var<'g, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.graph.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// Value of a single-element node.
    pub fn item(&self) -> T {
        self.graph.nodes.borrow()[self.id].value.data()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    pub fn op_kind(&self) -> OpKind {
        self.graph.nodes.borrow()[self.id].op.kind()
    }

    fn binary(self, other: Var<'g, T>, kind: OpKind) -> Result<Var<'g, T>, TensorError> {
        let b = broadcast_kind(kind, &self.shape(), &other.shape())?;
        let op = match kind {
            OpKind::Add => Op::Add(b),
            OpKind::Sub => Op::Sub(b),
            OpKind::Mul => Op::Mul(b),
            _ => unreachable!(),
        };
        self.graph.push(op, &[self, other])
    }

    /// Matrix product `self · other`.
    pub fn matmul(self, other: Var<'g, T>) -> Result<Var<'g, T>, TensorError> {
        self.matmul_t(other, false, false)
    }

    /// Matrix product with optional transposition of either operand.
    pub fn matmul_t(self, other: Var<'g, T>, ta: bool, tb: bool) -> Result<Var<'g, T>, TensorError> {
        self.graph.push(Op::MatMul { ta, tb }, &[self, other])
    }

    /// Elementwise sum; `other` may broadcast as a scalar, trailing row, or column.
    pub fn add(self, other: Var<'g, T>) -> Result<Var<'g, T>, TensorError> {
        self.binary(other, OpKind::Add)
    }

    pub fn sub(self, other: Var<'g, T>) -> Result<Var<'g, T>, TensorError> {
        self.binary(other, OpKind::Sub)
    }

    pub fn mul(self, other: Var<'g, T>) -> Result<Var<'g, T>, TensorError> {
        self.binary(other, OpKind::Mul)
    }

    pub fn scale(self, c: T) -> Result<Var<'g, T>, TensorError> {
        self.graph.push(Op::Scale(c), &[self])
    }

    pub fn scale_f64(self, c: f64) -> Result<Var<'g, T>, TensorError> {
        self.scale(T::of(c))
    }

    pub fn neg(self) -> Result<Var<'g, T>, TensorError> {
        self.scale(-T::one())
    }

    pub fn add_scalar(self, c: T) -> Result<Var<'g, T>, TensorError> {
        self.graph.push(Op::AddScalar(c), &[self])
    }

    unary!(
        /// Sum of all elements (rank-0 result).
        sum,
        Op::Sum
    );
    unary!(
        /// Mean of all elements (rank-0 result).
        mean,
        Op::Mean
    );
    unary!(
        /// Sum over the trailing axis, keeping it with size 1.
        sum_last,
        Op::SumLast
    );
    unary!(
        /// Sum over all leading axes, leaving a vector of the trailing size.
        sum_rows,
        Op::SumRows
    );
    unary!(exp, Op::Exp);
    unary!(log, Op::Log);
    unary!(sigmoid, Op::Sigmoid);
    unary!(silu, Op::Silu);
    unary!(
        /// Softmax over the trailing axis.
        softmax,
        Op::Softmax
    );
    unary!(
        /// Transpose of a rank-2 value.
        t,
        Op::Transpose
    );
    unary!(
        /// Straight-through rounding: forward rounds ties-to-even, backward is identity.
        ste_round,
        Op::Ste(SteKind::Round)
    );
    unary!(
        /// Straight-through absolute-mean ternarization.
        ste_ternary,
        Op::Ste(SteKind::Ternary)
    );
    unary!(
        /// Squared Frobenius norm (rank-0 result).
        fro_norm_sq,
        Op::FroNormSq
    );

    pub fn mean_last(self) -> Result<Var<'g, T>, TensorError> {
        let n = *self.shape().last().unwrap_or(&1);
        self.sum_last()?.scale(T::of(1.0 / n as f64))
    }

    pub fn powf(self, p: T) -> Result<Var<'g, T>, TensorError> {
        self.graph.push(Op::Power(p), &[self])
    }

    pub fn powf_f64(self, p: f64) -> Result<Var<'g, T>, TensorError> {
        self.powf(T::of(p))
    }

    pub fn layer_norm(self, eps: T) -> Result<Var<'g, T>, TensorError> {
        self.graph.push(Op::LayerNorm(eps), &[self])
    }

    pub fn rms_norm(self, eps: T) -> Result<Var<'g, T>, TensorError> {
        self.graph.push(Op::RmsNorm(eps), &[self])
    }

    /// Broadcasts `self` to `shape`.
    pub fn expand(self, shape: &[usize]) -> Result<Var<'g, T>, TensorError> {
        let kind = broadcast_kind(OpKind::Expand, shape, &self.shape())?;
        self.graph.push(
            Op::Expand {
                kind,
                shape: shape.to_vec(),
            },
            &[self],
        )
    }

    /// Gathers rows `ids` of a `[rows, d]` table.
    pub fn embedding(self, ids: &[usize]) -> Result<Var<'g, T>, TensorError> {
        self.graph.push(Op::Embedding(ids.into()), &[self])
    }

    /// Adds row `i` of `self` into row `ids[i]` of a zero `[rows, d]` result.
    pub fn scatter_rows(self, ids: &[usize], rows: usize) -> Result<Var<'g, T>, TensorError> {
        self.graph.push(
            Op::ScatterRows {
                ids: ids.into(),
                rows,
            },
            &[self],
        )
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g, T>, TensorError> {
        self.graph.push(Op::Reshape(shape.to_vec()), &[self])
    }

    pub fn slice(self, rows: Range<usize>, cols: Range<usize>) -> Result<Var<'g, T>, TensorError> {
        self.graph.push(Op::Slice { rows, cols }, &[self])
    }

    /// Places `self` into a zero `[shape]` matrix at `(row0, col0)`.
    pub fn pad(self, shape: [usize; 2], row0: usize, col0: usize) -> Result<Var<'g, T>, TensorError> {
        self.graph.push(Op::Pad { shape, row0, col0 }, &[self])
    }

    /// Weighted cross-entropy `Σ_r w_r (logsumexp(x_r) − x_r[t_r])` over rows of logits.
    ///
    /// Rows with zero weight are skipped and their target is ignored.
    pub fn cross_entropy_weighted(
        self,
        targets: &[usize],
        weights: &[T],
    ) -> Result<Var<'g, T>, TensorError> {
        self.graph.push(
            Op::CrossEntropy {
                targets: targets.into(),
                weights: weights.into(),
            },
            &[self],
        )
    }

    /// Mean cross-entropy over all rows.
    pub fn cross_entropy(self, targets: &[usize]) -> Result<Var<'g, T>, TensorError> {
        let m = targets.len().max(1);
        let w = vec![T::of(1.0 / m as f64); targets.len()];
        self.cross_entropy_weighted(targets, &w)
    }

    pub fn clamp(self, lo: T, hi: T) -> Result<Var<'g, T>, TensorError> {
        self.graph.push(Op::Clamp { lo, hi }, &[self])
    }

    /// Cosine similarity of the flattened values (rank-0 result).
    pub fn cosine(self, other: Var<'g, T>) -> Result<Var<'g, T>, TensorError> {
        self.graph.push(Op::Cosine, &[self, other])
    }

    /// Elementwise user function with a user derivative.
    ///
    /// The derivative node has no derivative rule of its own, so this op
    /// supports first-order differentiation only.
    pub fn custom_unary(
        self,
        name: &str,
        f: impl Fn(T) -> T + 'static,
        df: impl Fn(T) -> T + 'static,
    ) -> Result<Var<'g, T>, TensorError> {
        self.graph.push(
            Op::Custom {
                name: name.into(),
                f: Rc::new(f),
                df: Rc::new(df),
            },
            &[self],
        )
    }

    pub(crate) fn push_op(self, op: Op<T>, others: &[Var<'g, T>]) -> Result<Var<'g, T>, TensorError> {
        let mut inputs = Vec::with_capacity(others.len() + 1);
        inputs.push(self);
        inputs.extend_from_slice(others);
        self.graph.push(op, &inputs)
    }

    pub(crate) fn bcast_to(self, kind: Bcast, shape: &[usize]) -> Result<Var<'g, T>, TensorError> {
        if kind == Bcast::Same {
            return Ok(self);
        }
        self.graph.push(
            Op::Expand {
                kind,
                shape: shape.to_vec(),
            },
            &[self],
        )
    }
}
