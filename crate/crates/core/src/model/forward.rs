use crate::tensor::{log_sum_exp, Axis, Graph, Real, Tensor, TensorError, Var};

use super::{Model, ModelError, Precision, RMS_EPS};

/// `B` equal-length token sequences, stored flat in row-major order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    tokens: Vec<usize>,
    batch: usize,
    seq: usize,
}

impl TokenBatch {
    pub fn new<S: AsRef<[usize]>>(seqs: &[S]) -> Result<Self, ModelError> {
        let seq = seqs
            .first()
            .map(|s| s.as_ref().len())
            .ok_or_else(|| ModelError::Empty("batch has no sequences".into()))?;
        if seq == 0 {
            return Err(ModelError::Empty("sequence has no tokens".into()));
        }
        let mut tokens = Vec::with_capacity(seq * seqs.len());
        for s in seqs {
            let s = s.as_ref();
            if s.len() != seq {
                return Err(ModelError::SeqLen {
                    len: s.len(),
                    min: seq,
                    max: seq,
                });
            }
            tokens.extend_from_slice(s);
        }
        Ok(Self {
            tokens,
            batch: seqs.len(),
            seq,
        })
    }

    pub fn single(tokens: &[usize]) -> Result<Self, ModelError> {
        Self::new(&[tokens])
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn seq(&self) -> usize {
        self.seq
    }

    pub fn sequence(&self, b: usize) -> &[usize] {
        &self.tokens[b * self.seq..(b + 1) * self.seq]
    }

    /// Next-token targets and cross-entropy weights. The last position of each
    /// sequence has weight zero; the rest share `1 / (B (S - 1))`.
    pub fn targets<T: Real>(&self) -> (Vec<usize>, Vec<T>) {
        let n = self.batch * (self.seq.max(2) - 1);
        let w = T::of(1.0 / n as f64);
        let mut targets = Vec::with_capacity(self.tokens.len());
        let mut weights = Vec::with_capacity(self.tokens.len());
        for b in 0..self.batch {
            let s = self.sequence(b);
            for t in 0..self.seq {
                if t + 1 < self.seq {
                    targets.push(s[t + 1]);
                    weights.push(w);
                } else {
                    targets.push(0);
                    weights.push(T::zero());
                }
            }
        }
        (targets, weights)
    }
}

/// Parameters of a model recorded as leaves of one graph.
pub struct Bound<'g, T: Real> {
    vars: Vec<Var<'g, T>>,
}

impl<'g, T: Real> Bound<'g, T> {
    pub fn vars(&self) -> &[Var<'g, T>] {
        &self.vars
    }
}

/// Rewrites a projection weight before use. Receives the parameter name.
pub type WeightHook<'h, 'g, T> = dyn Fn(&str, Var<'g, T>) -> Result<Var<'g, T>, TensorError> + 'h;

/// Input and output of one projection, `Y = X Wᵀ` with tokens as rows.
#[derive(Debug, Clone)]
pub struct LinearSite<'g, T: Real> {
    pub name: String,
    pub input: Var<'g, T>,
    pub output: Var<'g, T>,
}

/// Named gradient tap points of one block.
#[derive(Debug, Clone)]
pub struct LayerTaps<'g, T: Real> {
    pub input_layernorm_in: Var<'g, T>,
    pub input_layernorm_out: Var<'g, T>,
    pub post_attention_layernorm_in: Var<'g, T>,
    pub post_attention_layernorm_out: Var<'g, T>,
    pub linears: Vec<LinearSite<'g, T>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TapSite {
    EmbeddingOut,
    InputLayernormIn,
    InputLayernormOut,
    PostAttentionLayernormIn,
    PostAttentionLayernormOut,
}

impl TapSite {
    pub const BLOCK_SITES: [TapSite; 4] = [
        TapSite::InputLayernormIn,
        TapSite::InputLayernormOut,
        TapSite::PostAttentionLayernormIn,
        TapSite::PostAttentionLayernormOut,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TapSite::EmbeddingOut => "embedding_out",
            TapSite::InputLayernormIn => "input_layernorm_in",
            TapSite::InputLayernormOut => "input_layernorm_out",
            TapSite::PostAttentionLayernormIn => "post_attention_layernorm_in",
            TapSite::PostAttentionLayernormOut => "post_attention_layernorm_out",
        }
    }
}

impl<'g, T: Real> LayerTaps<'g, T> {
    pub fn get(&self, site: TapSite) -> Var<'g, T> {
        match site {
            TapSite::EmbeddingOut | TapSite::InputLayernormIn => self.input_layernorm_in,
            TapSite::InputLayernormOut => self.input_layernorm_out,
            TapSite::PostAttentionLayernormIn => self.post_attention_layernorm_in,
            TapSite::PostAttentionLayernormOut => self.post_attention_layernorm_out,
        }
    }
}

/// Nodes recorded by one forward pass.
pub struct Forward<'g, T: Real> {
    /// `x^(0) .. x^(n_layer)`; `x^(0)` is the token plus position embedding.
    pub hidden: Vec<Var<'g, T>>,
    pub taps: Vec<LayerTaps<'g, T>>,
    pub logits: Var<'g, T>,
}

impl<'g, T: Real> Forward<'g, T> {
    pub fn embedding_out(&self) -> Var<'g, T> {
        self.hidden[0]
    }
}

impl<T: Real> Model<T> {
    /// Records every parameter as a differentiable leaf of `g`.
    pub fn bind<'g>(&self, g: &'g Graph<T>) -> Bound<'g, T> {
        Bound {
            vars: self.tensors().iter().map(|t| g.param(t.clone())).collect(),
        }
    }

    /// Records parameters selected by `trainable` as leaves that accept
    /// gradients and the rest as constants.
    pub fn bind_with<'g>(&self, g: &'g Graph<T>, trainable: impl Fn(&str) -> bool) -> Bound<'g, T> {
        Bound {
            vars: self
                .iter()
                .map(|(n, t)| {
                    if trainable(n) {
                        g.param(t.clone())
                    } else {
                        g.constant(t.clone())
                    }
                })
                .collect(),
        }
    }

    fn var<'g>(&self, p: &Bound<'g, T>, name: &str) -> Result<Var<'g, T>, ModelError> {
        self.index_of(name)
            .map(|i| p.vars[i])
            .ok_or_else(|| ModelError::UnknownParam(name.to_string()))
    }

    fn weight<'g>(
        &self,
        p: &Bound<'g, T>,
        name: &str,
        hook: Option<&WeightHook<'_, 'g, T>>,
    ) -> Result<Var<'g, T>, ModelError> {
        let mut w = self.var(p, name)?;
        if self.precision() == Precision::Ternary {
            w = w.ste_ternary()?;
        }
        if let Some(h) = hook {
            w = h(name, w)?;
        }
        Ok(w)
    }

    fn linear<'g>(
        &self,
        x: Var<'g, T>,
        w: Var<'g, T>,
        name: String,
        sites: &mut Vec<LinearSite<'g, T>>,
    ) -> Result<Var<'g, T>, ModelError> {
        let x = if self.config().use_rms_norm_before_linear {
            x.rms_norm(T::of(RMS_EPS))?
        } else {
            x
        };
        let y = x.matmul_t(w, false, true)?;
        sites.push(LinearSite {
            name,
            input: x,
            output: y,
        });
        Ok(y)
    }

    fn norm<'g>(&self, p: &Bound<'g, T>, x: Var<'g, T>, name: &str) -> Result<Var<'g, T>, ModelError> {
        Ok(x.rms_norm(T::of(RMS_EPS))?.mul(self.var(p, name)?)?)
    }

    /// Validates token ids and length bounds.
    pub fn check_batch(&self, batch: &TokenBatch, min_len: usize) -> Result<(), ModelError> {
        let cfg = self.config();
        if batch.seq() < min_len || batch.seq() > cfg.max_seq_len {
            return Err(ModelError::SeqLen {
                len: batch.seq(),
                min: min_len,
                max: cfg.max_seq_len,
            });
        }
        if let Some(&id) = batch.tokens().iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(ModelError::Token {
                id,
                vocab: cfg.vocab_size,
            });
        }
        Ok(())
    }

    /// `x^(0)`: token embedding plus learned position embedding.
    pub fn embed<'g>(&self, p: &Bound<'g, T>, batch: &TokenBatch) -> Result<Var<'g, T>, ModelError> {
        self.check_batch(batch, 1)?;
        let positions: Vec<usize> = (0..batch.batch()).flat_map(|_| 0..batch.seq()).collect();
        let tok = self.var(p, "embed.weight")?.embedding(batch.tokens())?;
        let pos = self.var(p, "pos_embed.weight")?.embedding(&positions)?;
        Ok(tok.add(pos)?)
    }

    /// Block `i` applied to `x^(i)` of shape `[B S, d]`.
    pub fn block<'g>(
        &self,
        p: &Bound<'g, T>,
        i: usize,
        x: Var<'g, T>,
        batch: &TokenBatch,
        hook: Option<&WeightHook<'_, 'g, T>>,
    ) -> Result<(Var<'g, T>, LayerTaps<'g, T>), ModelError> {
        let cfg = self.config();
        let g = x.graph();
        let (b_n, s) = (batch.batch(), batch.seq());
        let hd = cfg.head_dim();
        let mut sites = Vec::with_capacity(7);
        let mut lin = |x: Var<'g, T>, proj: &str| -> Result<Var<'g, T>, ModelError> {
            let name = super::proj_name(i, proj);
            let w = self.weight(p, &name, hook)?;
            self.linear(x, w, name, &mut sites)
        };

        let h = self.norm(p, x, &format!("layers.{i}.input_layernorm.weight"))?;
        let q = lin(h, "attn.q_proj")?;
        let k = lin(h, "attn.k_proj")?;
        let v = lin(h, "attn.v_proj")?;
        let mask = g.constant(Tensor::from_fn(&[s, s], |idx| {
            if idx % s > idx / s {
                T::of(-1e9)
            } else {
                T::zero()
            }
        }));
        let inv_sqrt = T::of(1.0 / (hd as f64).sqrt());
        let mut seqs = Vec::with_capacity(b_n);
        for b in 0..b_n {
            let rows = b * s..(b + 1) * s;
            let mut heads = Vec::with_capacity(cfg.n_head);
            for head in 0..cfg.n_head {
                let cols = head * hd..(head + 1) * hd;
                let qs = q.slice(rows.clone(), cols.clone())?;
                let ks = k.slice(rows.clone(), cols.clone())?;
                let vs = v.slice(rows.clone(), cols)?;
                let att = qs.matmul_t(ks, false, true)?.scale(inv_sqrt)?.add(mask)?.softmax()?;
                heads.push(att.matmul(vs)?);
            }
            seqs.push(if heads.len() == 1 {
                heads[0]
            } else {
                g.concat(&heads, Axis::Cols)?
            });
        }
        let attn = if seqs.len() == 1 {
            seqs[0]
        } else {
            g.concat(&seqs, Axis::Rows)?
        };
        let x2 = x.add(lin(attn, "attn.o_proj")?)?;

        let h2 = self.norm(p, x2, &format!("layers.{i}.post_attention_layernorm.weight"))?;
        let gate = lin(h2, "mlp.gate_proj")?.silu()?;
        let up = lin(h2, "mlp.up_proj")?;
        let out = x2.add(lin(gate.mul(up)?, "mlp.down_proj")?)?;
        Ok((
            out,
            LayerTaps {
                input_layernorm_in: x,
                input_layernorm_out: h,
                post_attention_layernorm_in: x2,
                post_attention_layernorm_out: h2,
                linears: sites,
            },
        ))
    }

    /// Final norm and output head applied to `x^(n_layer)`.
    pub fn head<'g>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>, ModelError> {
        let h = self.norm(p, x, "final_norm.weight")?;
        Ok(h.matmul_t(self.var(p, "lm_head.weight")?, false, true)?)
    }

    pub fn forward<'g>(
        &self,
        p: &Bound<'g, T>,
        batch: &TokenBatch,
        hook: Option<&WeightHook<'_, 'g, T>>,
    ) -> Result<Forward<'g, T>, ModelError> {
        let x0 = self.embed(p, batch)?;
        self.forward_from(p, 0, x0, batch, hook)
    }

    /// Runs blocks `start..n_layer` and the head from a given `x^(start)`.
    pub fn forward_from<'g>(
        &self,
        p: &Bound<'g, T>,
        start: usize,
        x: Var<'g, T>,
        batch: &TokenBatch,
        hook: Option<&WeightHook<'_, 'g, T>>,
    ) -> Result<Forward<'g, T>, ModelError> {
        let n = self.config().n_layer;
        if start > n {
            return Err(ModelError::LayerIndex { index: start, n_layer: n });
        }
        let mut hidden = vec![x];
        let mut taps = Vec::with_capacity(n - start);
        let mut x = x;
        for i in start..n {
            let (out, t) = self.block(p, i, x, batch, hook)?;
            taps.push(t);
            hidden.push(out);
            x = out;
        }
        let logits = self.head(p, x)?;
        Ok(Forward { hidden, taps, logits })
    }

    /// Mean next-token cross-entropy over all predicted positions.
    pub fn loss<'g>(&self, logits: Var<'g, T>, batch: &TokenBatch) -> Result<Var<'g, T>, ModelError> {
        let (targets, weights) = batch.targets::<T>();
        Ok(logits.cross_entropy_weighted(&targets, &weights)?)
    }

    /// Scalar language-modeling loss of a batch.
    pub fn lm_loss(&self, batch: &TokenBatch) -> Result<f64, ModelError> {
        self.check_batch(batch, 2)?;
        let g = Graph::new();
        let p = self.bind_with(&g, |_| false);
        let f = self.forward(&p, batch, None)?;
        Ok(self.loss(f.logits, batch)?.item().as_f64())
    }

    /// Per-token gradient of each sequence's own loss with respect to `x^(layer)`.
    ///
    /// The batch loss is the mean of the per-sequence losses, so each block of
    /// rows is scaled by `B` to recover the per-sequence gradient.
    pub fn input_gradient(&self, batch: &TokenBatch, layer: usize) -> Result<Tensor<T>, ModelError> {
        let n = self.config().n_layer;
        if layer > n {
            return Err(ModelError::LayerIndex { index: layer, n_layer: n });
        }
        self.check_batch(batch, 2)?;
        let g = Graph::new();
        let p = self.bind(&g);
        let f = self.forward(&p, batch, None)?;
        let loss = self.loss(f.logits, batch)?;
        let grad = g.backward(loss, &[f.hidden[layer]])?.value(0);
        let b = T::of(batch.batch() as f64);
        Ok(grad.map(|v| v * b))
    }

    /// Row-wise log-softmax of the logits for every position of one sequence.
    pub fn log_probs(&self, tokens: &[usize]) -> Result<Tensor<f64>, ModelError> {
        let batch = TokenBatch::single(tokens)?;
        self.check_batch(&batch, 1)?;
        let g = Graph::new();
        let p = self.bind_with(&g, |_| false);
        let logits = self.forward(&p, &batch, None)?.logits.value().cast::<f64>();
        let v = logits.cols();
        let mut out = logits.into_data();
        for row in out.chunks_mut(v) {
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|x| *x -= lse);
        }
        Ok(Tensor::new(vec![tokens.len(), v], out)?)
    }

    /// Top-`k_max` next tokens after `context`, by descending probability with
    /// ties broken by ascending token id.
    pub fn next_token_ranking(&self, context: &[usize], k_max: usize) -> Result<Vec<(usize, f64)>, ModelError> {
        let lp = self.log_probs(context)?;
        let last = lp.row(context.len() - 1);
        Ok(rank_log_probs(last, k_max)
            .into_iter()
            .map(|(t, l)| (t, l.exp()))
            .collect())
    }
}

/// Sorts `(token, log_prob)` by descending log-probability, ascending id on ties.
pub(crate) fn rank_log_probs(lp: &[f64], k_max: usize) -> Vec<(usize, f64)> {
    let mut idx: Vec<usize> = (0..lp.len()).collect();
    idx.sort_by(|&a, &b| lp[b].total_cmp(&lp[a]).then(a.cmp(&b)));
    idx.truncate(k_max.min(lp.len()));
    idx.into_iter().map(|t| (t, lp[t])).collect()
}
