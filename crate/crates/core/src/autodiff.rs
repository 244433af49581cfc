//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every primitive applied during one forward pass. Leaf
//! tensors are borrowed, so registering model parameters costs nothing.
//! [`Tape::backward`] walks the tape once in reverse and returns a
//! [`Gradients`] table; a second call on the same tape is an error.
//!
//! Nodes only carry gradient work when some leaf upstream of them has
//! `requires_grad` set, so freezing most of a model also skips most of the
//! backward pass.

use crate::error::{shape_err, Error, Result};
use crate::fpenv::FlushDenormals;
use crate::tensor::{Scalar, Tensor};

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Value<'a, T: Scalar> {
    Borrowed(&'a Tensor<T>),
    Owned(Tensor<T>),
}

impl<T: Scalar> Value<'_, T> {
    fn tensor(&self) -> &Tensor<T> {
        match self {
            Value::Borrowed(t) => t,
            Value::Owned(t) => t,
        }
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Sum(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    LayerNorm {
        x: Var,
        params: Var,
        normalized: Vec<T>,
        inv_std: Vec<T>,
    },
    Gelu {
        x: Var,
        deriv: Vec<T>,
    },
    Softmax(Var),
    CausalAttention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        seq_len: usize,
        probs: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        log_norm: Vec<f64>,
    },
}

struct Node<'a, T: Scalar> {
    value: Value<'a, T>,
    op: Op<T>,
    needs_grad: bool,
    is_param: bool,
}

/// Record of one forward computation.
pub struct Tape<'a, T: Scalar = f32> {
    nodes: Vec<Node<'a, T>>,
    consumed: bool,
}

impl<T: Scalar> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward pass, indexed by leaf [`Var`].
#[derive(Debug)]
pub struct Gradients<T: Scalar = f32> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf registered with `requires_grad`. Leaves that did
    /// not influence the loss get zeros.
    pub fn get(&self, var: Var) -> Option<&[T]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, var: Var) -> Option<Vec<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn add_into<T: Scalar>(slot: &mut Option<Vec<T>>, len: usize, f: impl FnOnce(&mut [T])) {
    let buf = slot.get_or_insert_with(|| vec![T::zero(); len]);
    f(buf);
}

/// GELU value and derivative, evaluated in the tensor's own precision.
fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    let c = T::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
    let a = T::from_f64(0.044_715);
    let half = T::from_f64(0.5);
    let one = T::one();
    let x2 = x * x;
    let inner = c * (x + a * x2 * x);
    let th = inner.fast_tanh();
    let y = half * x * (one + th);
    let dy = half * (one + th) + half * x * (one - th * th) * c * (one + T::from_f64(3.0) * a * x2);
    (y, dy)
}

impl<'a, T: Scalar> Tape<'a, T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Value<'a, T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            is_param: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Registers a borrowed leaf. `requires_grad` decides whether the
    /// backward pass produces a gradient for it.
    pub fn leaf(&mut self, tensor: &'a Tensor<T>, requires_grad: bool) -> Var {
        let v = self.push(Value::Borrowed(tensor), Op::Leaf, requires_grad);
        self.nodes[v.0].is_param = requires_grad;
        v
    }

    /// Registers an owned leaf, e.g. an input batch.
    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.push(Value::Owned(tensor), Op::Leaf, false)
    }

    /// Owned leaf that receives a gradient (used by gradient checks).
    pub fn variable(&mut self, tensor: Tensor<T>) -> Var {
        let v = self.push(Value::Owned(tensor), Op::Leaf, true);
        self.nodes[v.0].is_param = true;
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.nodes[v.0].value.tensor()
    }

    /// Value of a one-element node as `f64`.
    pub fn scalar(&self, v: Var) -> Option<f64> {
        self.value(v).item().map(Scalar::as_f64)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = crate::tensor::matmul(self.value(a), self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Value::Owned(out), Op::MatMul(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return shape_err("add", format!("{:?} vs {:?}", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| *x + *y).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Value::Owned(out), Op::Add(a, b), ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return shape_err("mul", format!("{:?} vs {:?}", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| *x * *y).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Value::Owned(out), Op::Mul(a, b), ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total: f64 = self.value(x).data().iter().map(|v| v.as_f64()).sum();
        let out = Tensor::scalar(T::from_f64(total));
        let ng = self.needs(x);
        self.push(Value::Owned(out), Op::Sum(x), ng)
    }

    /// Row lookup: `out[i] = table[ids[i]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (rows, cols) = t.dims2("gather")?;
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(Error::Vocabulary {
                    id,
                    vocab: rows,
                });
            }
            data.extend_from_slice(&t.data()[id * cols..(id + 1) * cols]);
        }
        let out = Tensor::from_parts(vec![ids.len(), cols], data);
        let ng = self.needs(table);
        Ok(self.push(
            Value::Owned(out),
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    /// Row-wise layer normalization; `params` is `[2, d]` holding the gain
    /// row followed by the bias row.
    pub fn layer_norm(&mut self, x: Var, params: Var) -> Result<Var> {
        let tx = self.value(x);
        let (n, d) = tx.dims2("layer_norm")?;
        let tp = self.value(params);
        if tp.shape() != [2, d] {
            return shape_err("layer_norm", format!("params {:?} for width {d}", tp.shape()));
        }
        let (gain, bias) = tp.data().split_at(d);
        let mut out = vec![T::zero(); n * d];
        let mut normalized = vec![T::zero(); n * d];
        let mut inv_std = vec![T::zero(); n];
        for r in 0..n {
            let row = &tx.data()[r * d..(r + 1) * d];
            let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / d as f64;
            let var = row
                .iter()
                .map(|v| {
                    let c = v.as_f64() - mean;
                    c * c
                })
                .sum::<f64>()
                / d as f64;
            let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = T::from_f64(rstd);
            for c in 0..d {
                let xh = T::from_f64((row[c].as_f64() - mean) * rstd);
                normalized[r * d + c] = xh;
                out[r * d + c] = xh * gain[c] + bias[c];
            }
        }
        let out = Tensor::from_parts(vec![n, d], out);
        let ng = self.needs(x) || self.needs(params);
        Ok(self.push(
            Value::Owned(out),
            Op::LayerNorm {
                x,
                params,
                normalized,
                inv_std,
            },
            ng,
        ))
    }

    /// GELU, tanh approximation. The derivative is kept for the backward
    /// pass when one is needed.
    pub fn gelu(&mut self, x: Var) -> Var {
        let ng = self.needs(x);
        let tx = self.value(x);
        let mut data = vec![T::zero(); tx.numel()];
        let mut deriv = Vec::new();
        if ng {
            deriv = vec![T::zero(); tx.numel()];
            for ((y, d), v) in data.iter_mut().zip(deriv.iter_mut()).zip(tx.data()) {
                (*y, *d) = gelu_parts(*v);
            }
        } else {
            for (y, v) in data.iter_mut().zip(tx.data()) {
                *y = gelu_parts(*v).0;
            }
        }
        let out = Tensor::from_parts(tx.shape().to_vec(), data);
        self.push(Value::Owned(out), Op::Gelu { x, deriv }, ng)
    }

    /// Softmax over the last axis of a matrix.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (n, d) = tx.dims2("softmax")?;
        let mut out = vec![T::zero(); n * d];
        for r in 0..n {
            softmax_row(&tx.data()[r * d..(r + 1) * d], &mut out[r * d..(r + 1) * d]);
        }
        let out = Tensor::from_parts(vec![n, d], out);
        let ng = self.needs(x);
        Ok(self.push(Value::Owned(out), Op::Softmax(x), ng))
    }

    /// Multi-head causal self-attention over `rows / seq_len` independent
    /// sequences packed row-wise. `q`, `k`, `v` are `[rows, d]` with the
    /// heads laid out as contiguous column blocks.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        seq_len: usize,
    ) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (rows, d) = tq.dims2("causal_attention")?;
        if tk.shape() != tq.shape() || tv.shape() != tq.shape() {
            return shape_err("causal_attention", "q, k, v shapes differ");
        }
        if heads == 0 || d % heads != 0 || seq_len == 0 || rows % seq_len != 0 {
            return shape_err(
                "causal_attention",
                format!("{rows}x{d} with {heads} heads, seq_len {seq_len}"),
            );
        }
        let dh = d / heads;
        let batch = rows / seq_len;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        let mut out = vec![T::zero(); rows * d];
        let mut probs = vec![T::zero(); batch * heads * seq_len * seq_len];
        let mut scores = vec![T::zero(); seq_len];
        for b in 0..batch {
            for h in 0..heads {
                let col = h * dh;
                for i in 0..seq_len {
                    let qi = &qd[(b * seq_len + i) * d + col..][..dh];
                    for (j, s) in scores.iter_mut().enumerate().take(i + 1) {
                        let kj = &kd[(b * seq_len + j) * d + col..][..dh];
                        let dot = qi
                            .iter()
                            .zip(kj)
                            .fold(T::zero(), |acc, (x, y)| acc + *x * *y);
                        *s = dot * T::from_f64(scale);
                    }
                    let base = ((b * heads + h) * seq_len + i) * seq_len;
                    let p = &mut probs[base..base + i + 1];
                    softmax_row(&scores[..=i], p);
                    let o = &mut out[(b * seq_len + i) * d + col..][..dh];
                    for (j, &pj) in p.iter().enumerate() {
                        let vj = &vd[(b * seq_len + j) * d + col..][..dh];
                        for (oc, vc) in o.iter_mut().zip(vj) {
                            *oc = *oc + pj * *vc;
                        }
                    }
                }
            }
        }
        let out = Tensor::from_parts(vec![rows, d], out);
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(
            Value::Owned(out),
            Op::CausalAttention {
                q,
                k,
                v,
                heads,
                seq_len,
                probs,
            },
            ng,
        ))
    }

    /// Weighted token cross-entropy: `Σ_t w_t · −log softmax(logits_t)[y_t]`.
    /// Rows with zero weight are skipped entirely.
    pub fn weighted_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[f64],
    ) -> Result<Var> {
        let tl = self.value(logits);
        let (n, vocab) = tl.dims2("cross_entropy")?;
        if targets.len() != n || weights.len() != n {
            return shape_err(
                "cross_entropy",
                format!(
                    "{n} logit rows, {} targets, {} weights",
                    targets.len(),
                    weights.len()
                ),
            );
        }
        if weights.iter().all(|w| *w == 0.0) {
            return Err(Error::EmptySupervision);
        }
        let mut total = 0.0f64;
        let mut log_norm = vec![0.0f64; n];
        for t in 0..n {
            if weights[t] == 0.0 {
                continue;
            }
            if targets[t] >= vocab {
                return Err(Error::Vocabulary {
                    id: targets[t],
                    vocab,
                });
            }
            let row = &tl.data()[t * vocab..(t + 1) * vocab];
            let max = row.iter().fold(T::neg_infinity(), |m, v| m.max(*v));
            let sum = sum_exp_shifted(row, max);
            let lse = max.as_f64() + sum.ln();
            log_norm[t] = lse;
            total += weights[t] * (lse - row[targets[t]].as_f64());
        }
        let out = Tensor::scalar(T::from_f64(total));
        let ng = self.needs(logits);
        Ok(self.push(
            Value::Owned(out),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                log_norm,
            },
            ng,
        ))
    }

    /// Mean cross-entropy over the positions where `mask` is set.
    pub fn masked_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<Var> {
        if mask.len() != targets.len() {
            return shape_err(
                "masked_cross_entropy",
                format!("{} targets vs {} mask entries", targets.len(), mask.len()),
            );
        }
        let count = mask.iter().filter(|m| **m).count();
        if count == 0 {
            return Err(Error::EmptySupervision);
        }
        let w = 1.0 / count as f64;
        let weights: Vec<f64> = mask.iter().map(|m| if *m { w } else { 0.0 }).collect();
        self.weighted_cross_entropy(logits, targets, &weights)
    }

    /// Reverse pass from a scalar `loss`. Consumes the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::TapeReuse);
        }
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        self.consumed = true;
        let _fp = FlushDenormals::new();

        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads)?;
        }

        let mut out: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (idx, node) in self.nodes.iter().enumerate() {
            if node.is_param {
                let len = node.value.tensor().numel();
                out[idx] = Some(grads[idx].take().unwrap_or_else(|| vec![T::zero(); len]));
            }
        }
        Ok(Gradients { grads: out })
    }

    fn backprop_node(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = ta.dims2("matmul")?;
                let n = tb.dims2("matmul")?.1;
                if self.needs(*a) {
                    add_into(&mut grads[a.0], m * k, |ga| {
                        T::gemm(m, n, k, g, false, tb.data(), true, ga, true)
                    });
                }
                if self.needs(*b) {
                    add_into(&mut grads[b.0], k * n, |gb| {
                        T::gemm(k, m, n, ta.data(), true, g, false, gb, true)
                    });
                }
            }
            Op::Add(a, b) => {
                for p in [*a, *b] {
                    if self.needs(p) {
                        add_into(&mut grads[p.0], g.len(), |gp| {
                            gp.iter_mut().zip(g).for_each(|(x, y)| *x = *x + *y)
                        });
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    add_into(&mut grads[a.0], g.len(), |ga| {
                        for ((x, gi), bi) in ga.iter_mut().zip(g).zip(tb.data()) {
                            *x = *x + *gi * *bi;
                        }
                    });
                }
                if self.needs(*b) {
                    add_into(&mut grads[b.0], g.len(), |gb| {
                        for ((x, gi), ai) in gb.iter_mut().zip(g).zip(ta.data()) {
                            *x = *x + *gi * *ai;
                        }
                    });
                }
            }
            Op::Sum(x) => {
                let len = self.value(*x).numel();
                add_into(&mut grads[x.0], len, |gx| {
                    gx.iter_mut().for_each(|v| *v = *v + g[0])
                });
            }
            Op::Gather { table, ids } => {
                let tt = self.value(*table);
                let (rows, cols) = tt.dims2("gather")?;
                add_into(&mut grads[table.0], rows * cols, |gt| {
                    for (i, &id) in ids.iter().enumerate() {
                        let src = &g[i * cols..(i + 1) * cols];
                        let dst = &mut gt[id * cols..(id + 1) * cols];
                        dst.iter_mut().zip(src).for_each(|(d, s)| *d = *d + *s);
                    }
                });
            }
            Op::LayerNorm {
                x,
                params,
                normalized,
                inv_std,
            } => {
                let (n, d) = self.value(*x).dims2("layer_norm")?;
                let gain = &self.value(*params).data()[..d];
                if self.needs(*params) {
                    add_into(&mut grads[params.0], 2 * d, |gp| {
                        let (gg, gb) = gp.split_at_mut(d);
                        for r in 0..n {
                            for c in 0..d {
                                let dy = g[r * d + c];
                                gg[c] = gg[c] + dy * normalized[r * d + c];
                                gb[c] = gb[c] + dy;
                            }
                        }
                    });
                }
                if self.needs(*x) {
                    add_into(&mut grads[x.0], n * d, |gx| {
                        for r in 0..n {
                            let xh = &normalized[r * d..(r + 1) * d];
                            let dy = &g[r * d..(r + 1) * d];
                            let mut mean_dxh = 0.0f64;
                            let mut mean_dxh_xh = 0.0f64;
                            for c in 0..d {
                                let dxh = (dy[c] * gain[c]).as_f64();
                                mean_dxh += dxh;
                                mean_dxh_xh += dxh * xh[c].as_f64();
                            }
                            mean_dxh /= d as f64;
                            mean_dxh_xh /= d as f64;
                            let rstd = inv_std[r].as_f64();
                            for c in 0..d {
                                let dxh = (dy[c] * gain[c]).as_f64();
                                let v = rstd * (dxh - mean_dxh - xh[c].as_f64() * mean_dxh_xh);
                                gx[r * d + c] = gx[r * d + c] + T::from_f64(v);
                            }
                        }
                    });
                }
            }
            Op::Gelu { x, deriv } => {
                add_into(&mut grads[x.0], g.len(), |gx| {
                    for ((d, gi), di) in gx.iter_mut().zip(g).zip(deriv) {
                        *d = *d + *gi * *di;
                    }
                });
            }
            Op::Softmax(x) => {
                let y = node.value.tensor();
                let (n, d) = y.dims2("softmax")?;
                add_into(&mut grads[x.0], n * d, |gx| {
                    for r in 0..n {
                        let yr = &y.data()[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| (*a * *b).as_f64()).sum();
                        for c in 0..d {
                            let v = yr[c].as_f64() * (gr[c].as_f64() - dot);
                            gx[r * d + c] = gx[r * d + c] + T::from_f64(v);
                        }
                    }
                });
            }
            Op::CausalAttention {
                q,
                k,
                v,
                heads,
                seq_len,
                probs,
            } => self.backprop_attention(*q, *k, *v, *heads, *seq_len, probs, g, grads)?,
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                log_norm,
            } => {
                let tl = self.value(*logits);
                let (n, vocab) = tl.dims2("cross_entropy")?;
                let upstream = g[0].as_f64();
                add_into(&mut grads[logits.0], n * vocab, |gl| {
                    for t in 0..n {
                        if weights[t] == 0.0 {
                            continue;
                        }
                        let scale = upstream * weights[t];
                        let row = &tl.data()[t * vocab..(t + 1) * vocab];
                        let dst = &mut gl[t * vocab..(t + 1) * vocab];
                        let lse = T::from_f64(log_norm[t]);
                        let s = T::from_f64(scale);
                        for (d, v) in dst.iter_mut().zip(row) {
                            *d = *d + s * (*v - lse).fast_exp();
                        }
                        dst[targets[t]] = dst[targets[t]] - s;
                    }
                });
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        seq_len: usize,
        probs: &[T],
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) -> Result<()> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (rows, d) = tq.dims2("causal_attention")?;
        let dh = d / heads;
        let batch = rows / seq_len;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        let mut dq = vec![T::zero(); rows * d];
        let mut dk = vec![T::zero(); rows * d];
        let mut dv = vec![T::zero(); rows * d];
        let mut dp = vec![T::zero(); seq_len];
        for b in 0..batch {
            for h in 0..heads {
                let col = h * dh;
                for i in 0..seq_len {
                    let gi = &g[(b * seq_len + i) * d + col..][..dh];
                    let base = ((b * heads + h) * seq_len + i) * seq_len;
                    let p = &probs[base..base + i + 1];
                    let mut dot = 0.0f64;
                    for j in 0..=i {
                        let vj = &vd[(b * seq_len + j) * d + col..][..dh];
                        let s = gi.iter().zip(vj).fold(T::zero(), |acc, (x, y)| acc + *x * *y);
                        dp[j] = s;
                        dot += (s * p[j]).as_f64();
                        let dvj = &mut dv[(b * seq_len + j) * d + col..][..dh];
                        for (dst, gc) in dvj.iter_mut().zip(gi) {
                            *dst = *dst + p[j] * *gc;
                        }
                    }
                    let qi_off = (b * seq_len + i) * d + col;
                    for j in 0..=i {
                        let ds = p[j] * (dp[j] - T::from_f64(dot)) * scale;
                        let kj_off = (b * seq_len + j) * d + col;
                        for c in 0..dh {
                            dq[qi_off + c] = dq[qi_off + c] + ds * kd[kj_off + c];
                            dk[kj_off + c] = dk[kj_off + c] + ds * qd[qi_off + c];
                        }
                    }
                }
            }
        }
        for (var, buf) in [(q, dq), (k, dk), (v, dv)] {
            if self.needs(var) {
                add_into(&mut grads[var.0], rows * d, |dst| {
                    dst.iter_mut().zip(&buf).for_each(|(x, y)| *x = *x + *y)
                });
            }
        }
        Ok(())
    }
}

/// `Σ exp(x_i − shift)` with eight interleaved `f64` accumulators, so the
/// loop vectorizes while the summation order stays fixed.
fn sum_exp_shifted<T: Scalar>(x: &[T], shift: T) -> f64 {
    let mut acc = [0.0f64; 8];
    let chunks = x.chunks_exact(8);
    let tail = chunks.remainder();
    for c in chunks {
        for (a, v) in acc.iter_mut().zip(c) {
            *a += (*v - shift).fast_exp().as_f64();
        }
    }
    let mut total = acc.iter().sum::<f64>();
    for v in tail {
        total += (*v - shift).fast_exp().as_f64();
    }
    total
}

fn softmax_row<T: Scalar>(x: &[T], out: &mut [T]) {
    let max = x.iter().fold(T::neg_infinity(), |m, v| m.max(*v));
    let sum = sum_exp_shifted(x, max);
    let inv = T::from_f64(1.0 / sum);
    for (o, v) in out.iter_mut().zip(x) {
        *o = (*v - max).fast_exp() * inv;
    }
}
