//! Reverse-mode differentiation over matrix-valued nodes.
//!
//! A [`Tape`] records every operation of a forward pass as an append-only
//! list of nodes whose inputs always refer to earlier nodes. [`Tape::backward`]
//! walks the list once in reverse and returns one gradient per trainable leaf
//! (see [`ParamStore`]).
//!
//! The operation set is exactly what the language model needs: dense
//! products, elementwise arithmetic, row softmax, layer norm, embedding
//! lookup, dropout, label-smoothed cross entropy and two fused attention
//! kernels (scaled dot-product and multi-linear). The fused kernels process a
//! stack of equal-length sequences at once.
//!
//! [`finite_diff_check`] is the independent oracle for all of it.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{chunk_bounds, gemm_acc, gemm_tn_acc, s, softmax_in_place, Matrix, Scalar};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// Named, ordered collection of trainable matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Matrix<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix<T>) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Matrix<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Matrix<T>)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Total number of scalars held.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(Matrix::is_finite)
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Matrix::cast).collect(),
        }
    }
}

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a particular tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId {
    tape: u64,
    index: usize,
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf {
        param: Option<ParamId>,
    },
    MatMul(usize, usize),
    MatMulT(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, T),
    Relu(usize),
    SoftmaxRows(usize),
    Sum(usize),
    ConcatCols(Vec<usize>),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        normalized: Matrix<T>,
        inv_std: Vec<T>,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    Dropout {
        x: usize,
        mask: Matrix<T>,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        probs: Matrix<T>,
        smoothing: T,
        pad: Option<usize>,
        count: usize,
    },
    ScaledDot {
        q: usize,
        k: usize,
        v: usize,
        seq_len: usize,
        probs: Vec<Matrix<T>>,
    },
    MultiLinear {
        q: usize,
        k: usize,
        v: usize,
        w: usize,
        seq_len: usize,
        chunks: usize,
        causal: bool,
    },
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
}

/// Append-only computation record.
#[derive(Debug)]
pub struct Tape<T> {
    id: u64,
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradient of a scalar loss with respect to each trainable leaf.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    grads: BTreeMap<ParamId, Matrix<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: ParamId) -> Option<&Matrix<T>> {
        self.grads.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Matrix<T>)> {
        self.grads.iter().map(|(&k, v)| (k, v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// L2 norm over every gradient entry, accumulated in `f64` in parameter
    /// order.
    pub fn global_norm(&self) -> f64 {
        self.grads
            .values()
            .flat_map(|m| m.data().iter())
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales so the global norm is at most `max_norm`. Returns the norm
    /// before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            let k: T = s(max_norm / norm);
            for g in self.grads.values_mut() {
                for v in g.data_mut() {
                    *v *= k;
                }
            }
        }
        norm
    }

    /// First parameter whose gradient holds a non-finite entry.
    pub fn first_non_finite(&self) -> Option<ParamId> {
        self.grads
            .iter()
            .find(|(_, g)| !g.is_finite())
            .map(|(&id, _)| id)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, n: NodeId) -> Result<usize> {
        if n.tape != self.id || n.index >= self.nodes.len() {
            return Err(Error::arg("node does not belong to this tape"));
        }
        Ok(n.index)
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    pub fn value(&self, n: NodeId) -> Result<&Matrix<T>> {
        Ok(&self.nodes[self.idx(n)?].value)
    }

    /// Value of a `1×1` node.
    pub fn scalar(&self, n: NodeId) -> Result<T> {
        let v = self.value(n)?;
        if v.shape() != (1, 1) {
            return Err(Error::arg(format!("node has shape {:?}, not scalar", v.shape())));
        }
        Ok(v.get(0, 0))
    }

    /// Non-trainable input.
    pub fn constant(&mut self, value: Matrix<T>) -> NodeId {
        self.push(value, Op::Leaf { param: None })
    }

    /// Trainable leaf bound to `id` in `store`.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> NodeId {
        self.push(store.get(id).clone(), Op::Leaf { param: Some(id) })
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let v = self.nodes[ia].value.matmul(&self.nodes[ib].value)?;
        Ok(self.push(v, Op::MatMul(ia, ib)))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let v = self.nodes[ia].value.matmul_t(&self.nodes[ib].value)?;
        Ok(self.push(v, Op::MatMulT(ia, ib)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let v = self.nodes[ia].value.add(&self.nodes[ib].value)?;
        Ok(self.push(v, Op::Add(ia, ib)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let v = self.nodes[ia].value.sub(&self.nodes[ib].value)?;
        Ok(self.push(v, Op::Sub(ia, ib)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let v = self.nodes[ia].value.hadamard(&self.nodes[ib].value)?;
        Ok(self.push(v, Op::Mul(ia, ib)))
    }

    /// Adds a `1×cols` row to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (ia, ir) = (self.idx(a)?, self.idx(row)?);
        let bias = &self.nodes[ir].value;
        let x = &self.nodes[ia].value;
        if bias.rows() != 1 || bias.cols() != x.cols() {
            return Err(Error::dim(format!(
                "add_row: bias {:?} for input {:?}",
                bias.shape(),
                x.shape()
            )));
        }
        let mut v = x.clone();
        for r in 0..v.rows() {
            for (o, &b) in v.row_mut(r).iter_mut().zip(bias.data()) {
                *o += b;
            }
        }
        Ok(self.push(v, Op::AddRow(ia, ir)))
    }

    pub fn scale(&mut self, a: NodeId, k: T) -> Result<NodeId> {
        let ia = self.idx(a)?;
        let v = self.nodes[ia].value.scale(k);
        Ok(self.push(v, Op::Scale(ia, k)))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let ia = self.idx(a)?;
        let v = self.nodes[ia].value.map(|x| x.max(T::zero()));
        Ok(self.push(v, Op::Relu(ia)))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let ia = self.idx(a)?;
        let v = crate::tensor::softmax_rows(&self.nodes[ia].value)?;
        Ok(self.push(v, Op::SoftmaxRows(ia)))
    }

    /// Sum of all entries, as a `1×1` node.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let ia = self.idx(a)?;
        let v = Matrix::filled(1, 1, self.nodes[ia].value.sum());
        Ok(self.push(v, Op::Sum(ia)))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let idx = parts
            .iter()
            .map(|&p| self.idx(p))
            .collect::<Result<Vec<_>>>()?;
        let mats: Vec<Matrix<T>> = idx.iter().map(|&i| self.nodes[i].value.clone()).collect();
        let v = Matrix::concat_cols(&mats)?;
        Ok(self.push(v, Op::ConcatCols(idx)))
    }

    /// Row-wise layer normalization `gain ⊙ (x − μ)/√(σ² + 1e-5) + bias`.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let (ix, ig, ib) = (self.idx(x)?, self.idx(gain)?, self.idx(bias)?);
        let xv = &self.nodes[ix].value;
        let (g, b) = (&self.nodes[ig].value, &self.nodes[ib].value);
        let cols = xv.cols();
        if g.shape() != (1, cols) || b.shape() != (1, cols) {
            return Err(Error::dim(format!(
                "layer_norm: gain {:?} / bias {:?} for width {cols}",
                g.shape(),
                b.shape()
            )));
        }
        let n: T = s(cols as f64);
        let eps: T = s(1e-5);
        let mut normalized = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.rows());
        let mut out = Matrix::zeros(xv.rows(), cols);
        for r in 0..xv.rows() {
            let row = normalized.row_mut(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
            let o = out.row_mut(r);
            for c in 0..cols {
                o[c] = row[c] * g.data()[c] + b.data()[c];
            }
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x: ix,
                gain: ig,
                bias: ib,
                normalized,
                inv_std,
            },
        ))
    }

    /// Gathers rows `ids` of `table`.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let it = self.idx(table)?;
        let t = &self.nodes[it].value;
        if let Some(&bad) = ids.iter().find(|&&i| i >= t.rows()) {
            return Err(Error::Input(format!(
                "token id {bad} outside vocabulary of {}",
                t.rows()
            )));
        }
        let mut v = Matrix::zeros(ids.len(), t.cols());
        for (r, &id) in ids.iter().enumerate() {
            v.row_mut(r).copy_from_slice(t.row(id));
        }
        Ok(self.push(
            v,
            Op::Embedding {
                table: it,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Inverted dropout: zeroes each entry with probability `p` and scales
    /// survivors by `1/(1−p)`.
    pub fn dropout<R: Rng>(&mut self, x: NodeId, p: f64, rng: &mut R) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::arg(format!("dropout probability {p} outside [0, 1)")));
        }
        let ix = self.idx(x)?;
        if p == 0.0 {
            return Ok(x);
        }
        let keep: T = s(1.0 / (1.0 - p));
        let (rows, cols) = self.nodes[ix].value.shape();
        let mask = Matrix::from_fn(rows, cols, |_, _| {
            if rng.random::<f64>() < p {
                T::zero()
            } else {
                keep
            }
        });
        let v = self.nodes[ix].value.hadamard(&mask)?;
        Ok(self.push(v, Op::Dropout { x: ix, mask }))
    }

    /// Mean label-smoothed cross entropy over rows whose target is not `pad`.
    ///
    /// The smoothed target puts `1 − ε` on the target class and `ε/(V − 1)`
    /// on every other class.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        smoothing: f64,
        pad: Option<usize>,
    ) -> Result<NodeId> {
        let il = self.idx(logits)?;
        let (loss, probs, count) =
            label_smoothed_ce_parts(&self.nodes[il].value, targets, smoothing, pad)?;
        Ok(self.push(
            Matrix::filled(1, 1, loss),
            Op::CrossEntropy {
                logits: il,
                targets: targets.to_vec(),
                probs,
                smoothing: s(smoothing),
                pad,
                count,
            },
        ))
    }

    /// Scaled dot-product attention applied independently to consecutive
    /// blocks of `seq_len` rows.
    pub fn scaled_dot_attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        seq_len: usize,
        causal: bool,
    ) -> Result<NodeId> {
        let (iq, ik, iv) = (self.idx(q)?, self.idx(k)?, self.idx(v)?);
        let (qm, km, vm) = (
            &self.nodes[iq].value,
            &self.nodes[ik].value,
            &self.nodes[iv].value,
        );
        check_stacked(qm, km, vm, seq_len)?;
        if qm.cols() != km.cols() {
            return Err(Error::dim("scaled_dot_attention: query/key widths differ"));
        }
        let mut out = Matrix::zeros(qm.rows(), vm.cols());
        let mut probs = Vec::with_capacity(qm.rows() / seq_len);
        for seq in 0..qm.rows() / seq_len {
            let (lo, hi) = (seq * seq_len, (seq + 1) * seq_len);
            let (qs, ks, vs) = (
                qm.rows_range(lo, hi)?,
                km.rows_range(lo, hi)?,
                vm.rows_range(lo, hi)?,
            );
            let p = attention_probs(&qs, &ks, causal)?;
            let o = p.matmul(&vs)?;
            for r in 0..seq_len {
                out.row_mut(lo + r).copy_from_slice(o.row(r));
            }
            probs.push(p);
        }
        Ok(self.push(
            out,
            Op::ScaledDot {
                q: iq,
                k: ik,
                v: iv,
                seq_len,
                probs,
            },
        ))
    }

    /// Multi-linear attention kernel on consecutive blocks of `seq_len` rows.
    ///
    /// `w` is the `1×R` channel-weight row; only the first `R` columns of `q`
    /// and `k` are contracted. Output has `chunks · v.cols()` columns: chunk
    /// `c` holds `Q diag(w) K_cᵀ V_c` over key positions in chunk `c`.
    pub fn multi_linear_attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        w: NodeId,
        seq_len: usize,
        chunks: usize,
        causal: bool,
    ) -> Result<NodeId> {
        let (iq, ik, iv, iw) = (self.idx(q)?, self.idx(k)?, self.idx(v)?, self.idx(w)?);
        let (qm, km, vm, wm) = (
            &self.nodes[iq].value,
            &self.nodes[ik].value,
            &self.nodes[iv].value,
            &self.nodes[iw].value,
        );
        check_stacked(qm, km, vm, seq_len)?;
        if wm.rows() != 1 || wm.cols() > qm.cols() || wm.cols() > km.cols() || wm.cols() == 0 {
            return Err(Error::dim(format!(
                "multi_linear_attention: weights {:?} for projections of width {}",
                wm.shape(),
                qm.cols()
            )));
        }
        if chunks == 0 {
            return Err(Error::arg("multi_linear_attention: zero chunks"));
        }
        let dv = vm.cols();
        let mut out = Matrix::zeros(qm.rows(), chunks * dv);
        for seq in 0..qm.rows() / seq_len {
            let (lo, hi) = (seq * seq_len, (seq + 1) * seq_len);
            let qs = qm.rows_range(lo, hi)?;
            let ks = km.rows_range(lo, hi)?;
            let vs = vm.rows_range(lo, hi)?;
            let o = multi_linear_seq(&qs, &ks, &vs, wm.data(), chunks, causal)?;
            for r in 0..seq_len {
                out.row_mut(lo + r).copy_from_slice(o.row(r));
            }
        }
        Ok(self.push(
            out,
            Op::MultiLinear {
                q: iq,
                k: ik,
                v: iv,
                w: iw,
                seq_len,
                chunks,
                causal,
            },
        ))
    }

    /// Reverse pass from a scalar node. Every trainable leaf on the tape gets
    /// an entry (zero when the loss does not depend on it); a parameter bound
    /// more than once accumulates.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        let il = self.idx(loss)?;
        if self.nodes[il].value.shape() != (1, 1) {
            return Err(Error::arg(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[il].value.shape()
            )));
        }
        let mut grads: Vec<Option<Matrix<T>>> = vec![None; il + 1];
        grads[il] = Some(Matrix::filled(1, 1, T::one()));
        let mut out = BTreeMap::new();
        for node in &self.nodes {
            if let Op::Leaf { param: Some(p) } = node.op {
                let (r, c) = node.value.shape();
                out.entry(p).or_insert_with(|| Matrix::zeros(r, c));
            }
        }
        for i in (0..=il).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf { param } => {
                    if let Some(p) = param {
                        out.get_mut(p).expect("registered").add_assign(&g)?;
                    }
                }
                Op::MatMul(a, b) => {
                    let da = g.matmul_t(&self.nodes[*b].value)?;
                    let db = self.nodes[*a].value.t_matmul(&g)?;
                    accumulate(&mut grads, *a, da)?;
                    accumulate(&mut grads, *b, db)?;
                }
                Op::MatMulT(a, b) => {
                    let da = g.matmul(&self.nodes[*b].value)?;
                    let db = g.t_matmul(&self.nodes[*a].value)?;
                    accumulate(&mut grads, *a, da)?;
                    accumulate(&mut grads, *b, db)?;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, g)?;
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.scale(-T::one()))?;
                    accumulate(&mut grads, *a, g)?;
                }
                Op::Mul(a, b) => {
                    let da = g.hadamard(&self.nodes[*b].value)?;
                    let db = g.hadamard(&self.nodes[*a].value)?;
                    accumulate(&mut grads, *a, da)?;
                    accumulate(&mut grads, *b, db)?;
                }
                Op::AddRow(a, r) => {
                    let mut db = Matrix::zeros(1, g.cols());
                    for row in 0..g.rows() {
                        for (o, &v) in db.data_mut().iter_mut().zip(g.row(row)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *r, db)?;
                    accumulate(&mut grads, *a, g)?;
                }
                Op::Scale(a, k) => accumulate(&mut grads, *a, g.scale(*k))?,
                Op::Relu(a) => {
                    let x = &self.nodes[*a].value;
                    let mut d = g;
                    for (dv, &xv) in d.data_mut().iter_mut().zip(x.data()) {
                        if xv <= T::zero() {
                            *dv = T::zero();
                        }
                    }
                    accumulate(&mut grads, *a, d)?;
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut d = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let dot: T = y.row(r).iter().zip(g.row(r)).map(|(&p, &q)| p * q).sum();
                        for c in 0..y.cols() {
                            d.set(r, c, y.get(r, c) * (g.get(r, c) - dot));
                        }
                    }
                    accumulate(&mut grads, *a, d)?;
                }
                Op::Sum(a) => {
                    let (r, c) = self.nodes[*a].value.shape();
                    accumulate(&mut grads, *a, Matrix::filled(r, c, g.get(0, 0)))?;
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.nodes[p].value.cols();
                        accumulate(&mut grads, p, g.cols_range(offset, offset + w)?)?;
                        offset += w;
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    normalized,
                    inv_std,
                } => {
                    let gv = &self.nodes[*gain].value;
                    let cols = g.cols();
                    let n: T = s(cols as f64);
                    let mut dgain = Matrix::zeros(1, cols);
                    let mut dbias = Matrix::zeros(1, cols);
                    let mut dx = Matrix::zeros(g.rows(), cols);
                    for r in 0..g.rows() {
                        let xhat = normalized.row(r);
                        let gr = g.row(r);
                        let mut sum_d = T::zero();
                        let mut sum_dx = T::zero();
                        for c in 0..cols {
                            dgain.data_mut()[c] += gr[c] * xhat[c];
                            dbias.data_mut()[c] += gr[c];
                            let dxhat = gr[c] * gv.data()[c];
                            sum_d += dxhat;
                            sum_dx += dxhat * xhat[c];
                        }
                        let row = dx.row_mut(r);
                        for c in 0..cols {
                            let dxhat = gr[c] * gv.data()[c];
                            row[c] = inv_std[r] * (dxhat - sum_d / n - xhat[c] * sum_dx / n);
                        }
                    }
                    accumulate(&mut grads, *gain, dgain)?;
                    accumulate(&mut grads, *bias, dbias)?;
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::Embedding { table, ids } => {
                    let (rows, cols) = self.nodes[*table].value.shape();
                    let mut dt = Matrix::zeros(rows, cols);
                    for (r, &id) in ids.iter().enumerate() {
                        for (o, &v) in dt.row_mut(id).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *table, dt)?;
                }
                Op::Dropout { x, mask } => accumulate(&mut grads, *x, g.hadamard(mask)?)?,
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                    smoothing,
                    pad,
                    count,
                } => {
                    let scale = g.get(0, 0) / s::<T>((*count).max(1) as f64);
                    let vocab = probs.cols();
                    let off = if vocab > 1 {
                        *smoothing / s::<T>((vocab - 1) as f64)
                    } else {
                        T::zero()
                    };
                    let mut d = Matrix::zeros(probs.rows(), vocab);
                    for (r, &t) in targets.iter().enumerate() {
                        if Some(t) == *pad {
                            continue;
                        }
                        let row = d.row_mut(r);
                        for c in 0..vocab {
                            let q = if c == t { T::one() - *smoothing } else { off };
                            row[c] = (probs.get(r, c) - q) * scale;
                        }
                    }
                    accumulate(&mut grads, *logits, d)?;
                }
                Op::ScaledDot {
                    q,
                    k,
                    v,
                    seq_len,
                    probs,
                    ..
                } => {
                    let (qm, km, vm) = (
                        &self.nodes[*q].value,
                        &self.nodes[*k].value,
                        &self.nodes[*v].value,
                    );
                    let scale = T::one() / s::<T>(qm.cols() as f64).sqrt();
                    let mut dq = Matrix::zeros(qm.rows(), qm.cols());
                    let mut dk = Matrix::zeros(km.rows(), km.cols());
                    let mut dv = Matrix::zeros(vm.rows(), vm.cols());
                    for (seq, p) in probs.iter().enumerate() {
                        let (lo, hi) = (seq * seq_len, (seq + 1) * seq_len);
                        let go = g.rows_range(lo, hi)?;
                        let qs = qm.rows_range(lo, hi)?;
                        let ks = km.rows_range(lo, hi)?;
                        let vs = vm.rows_range(lo, hi)?;
                        let dvs = p.t_matmul(&go)?;
                        let dp = go.matmul_t(&vs)?;
                        let mut ds = Matrix::zeros(*seq_len, *seq_len);
                        for r in 0..*seq_len {
                            let dot: T =
                                p.row(r).iter().zip(dp.row(r)).map(|(&a, &b)| a * b).sum();
                            for c in 0..*seq_len {
                                ds.set(r, c, p.get(r, c) * (dp.get(r, c) - dot) * scale);
                            }
                        }
                        let dqs = ds.matmul(&ks)?;
                        let dks = ds.t_matmul(&qs)?;
                        for r in 0..*seq_len {
                            dq.row_mut(lo + r).copy_from_slice(dqs.row(r));
                            dk.row_mut(lo + r).copy_from_slice(dks.row(r));
                            dv.row_mut(lo + r).copy_from_slice(dvs.row(r));
                        }
                    }
                    accumulate(&mut grads, *q, dq)?;
                    accumulate(&mut grads, *k, dk)?;
                    accumulate(&mut grads, *v, dv)?;
                }
                Op::MultiLinear {
                    q,
                    k,
                    v,
                    w,
                    seq_len,
                    chunks,
                    causal,
                } => {
                    let (qm, km, vm, wm) = (
                        &self.nodes[*q].value,
                        &self.nodes[*k].value,
                        &self.nodes[*v].value,
                        &self.nodes[*w].value,
                    );
                    let mut dq = Matrix::zeros(qm.rows(), qm.cols());
                    let mut dk = Matrix::zeros(km.rows(), km.cols());
                    let mut dv = Matrix::zeros(vm.rows(), vm.cols());
                    let mut dw = Matrix::zeros(1, wm.cols());
                    for seq in 0..qm.rows() / seq_len {
                        let (lo, hi) = (seq * seq_len, (seq + 1) * seq_len);
                        let parts = multi_linear_seq_backward(
                            &qm.rows_range(lo, hi)?,
                            &km.rows_range(lo, hi)?,
                            &vm.rows_range(lo, hi)?,
                            wm.data(),
                            *chunks,
                            *causal,
                            &g.rows_range(lo, hi)?,
                        )?;
                        for r in 0..*seq_len {
                            dq.row_mut(lo + r).copy_from_slice(parts.dq.row(r));
                            dk.row_mut(lo + r).copy_from_slice(parts.dk.row(r));
                            dv.row_mut(lo + r).copy_from_slice(parts.dv.row(r));
                        }
                        dw.add_assign(&parts.dw)?;
                    }
                    accumulate(&mut grads, *q, dq)?;
                    accumulate(&mut grads, *k, dk)?;
                    accumulate(&mut grads, *v, dv)?;
                    accumulate(&mut grads, *w, dw)?;
                }
            }
        }
        Ok(Gradients { grads: out })
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Matrix<T>>], i: usize, g: Matrix<T>) -> Result<()> {
    match &mut grads[i] {
        Some(existing) => existing.add_assign(&g),
        slot => {
            *slot = Some(g);
            Ok(())
        }
    }
}

fn check_stacked<T: Scalar>(q: &Matrix<T>, k: &Matrix<T>, v: &Matrix<T>, seq_len: usize) -> Result<()> {
    if seq_len == 0 || !q.rows().is_multiple_of(seq_len) {
        return Err(Error::dim(format!(
            "{} rows do not split into sequences of length {seq_len}",
            q.rows()
        )));
    }
    if k.rows() != q.rows() || v.rows() != q.rows() {
        return Err(Error::dim(format!(
            "query/key/value row counts differ: {} / {} / {}",
            q.rows(),
            k.rows(),
            v.rows()
        )));
    }
    Ok(())
}

/// `softmax(Q Kᵀ / √d)` with future keys masked to `−∞` when `causal`.
pub(crate) fn attention_probs<T: Scalar>(q: &Matrix<T>, k: &Matrix<T>, causal: bool) -> Result<Matrix<T>> {
    let scale = T::one() / s::<T>(q.cols() as f64).sqrt();
    let mut scores = q.matmul_t(k)?.scale(scale);
    for r in 0..scores.rows() {
        let row = scores.row_mut(r);
        if causal {
            for v in row.iter_mut().skip(r + 1) {
                *v = T::neg_infinity();
            }
        }
        softmax_in_place(row);
    }
    Ok(scores)
}

/// Channel-weighted position scores `S = Q_R diag(w) K_Rᵀ`, future keys
/// zeroed when `causal`.
fn multi_linear_scores<T: Scalar>(q: &Matrix<T>, k: &Matrix<T>, w: &[T], causal: bool) -> Result<Matrix<T>> {
    let rank = w.len();
    let qw = q.cols_range(0, rank)?.scale_cols(w)?;
    let mut scores = qw.matmul_t(&k.cols_range(0, rank)?)?;
    if causal {
        for r in 0..scores.rows() {
            for v in scores.row_mut(r).iter_mut().skip(r + 1) {
                *v = T::zero();
            }
        }
    }
    Ok(scores)
}

/// Forward multi-linear kernel for one sequence.
pub(crate) fn multi_linear_seq<T: Scalar>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    w: &[T],
    chunks: usize,
    causal: bool,
) -> Result<Matrix<T>> {
    let n = q.rows();
    let dv = v.cols();
    let scores = multi_linear_scores(q, k, w, causal)?;
    let mut out = Matrix::zeros(n, chunks * dv);
    for (c, (start, end)) in chunk_bounds(n, chunks).into_iter().enumerate() {
        for a in 0..n {
            let orow = &mut out.row_mut(a)[c * dv..(c + 1) * dv];
            for b in start..end {
                let sab = scores.get(a, b);
                if sab == T::zero() {
                    continue;
                }
                for (o, &vv) in orow.iter_mut().zip(v.row(b)) {
                    *o += sab * vv;
                }
            }
        }
    }
    Ok(out)
}

struct MultiLinearGrads<T> {
    dq: Matrix<T>,
    dk: Matrix<T>,
    dv: Matrix<T>,
    dw: Matrix<T>,
}

fn multi_linear_seq_backward<T: Scalar>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    w: &[T],
    chunks: usize,
    causal: bool,
    dout: &Matrix<T>,
) -> Result<MultiLinearGrads<T>> {
    let n = q.rows();
    let dvw = v.cols();
    let rank = w.len();
    let scores = multi_linear_scores(q, k, w, causal)?;
    let mut ds = Matrix::zeros(n, n);
    let mut dv = Matrix::zeros(n, dvw);
    for (c, (start, end)) in chunk_bounds(n, chunks).into_iter().enumerate() {
        for a in 0..n {
            let grow = &dout.row(a)[c * dvw..(c + 1) * dvw];
            let last = if causal { end.min(a + 1) } else { end };
            for b in start..last {
                let dot: T = grow.iter().zip(v.row(b)).map(|(&x, &y)| x * y).sum();
                ds.set(a, b, dot);
                let sab = scores.get(a, b);
                for (o, &gv) in dv.row_mut(b).iter_mut().zip(grow) {
                    *o += sab * gv;
                }
            }
        }
    }
    let qr = q.cols_range(0, rank)?;
    let kr = k.cols_range(0, rank)?;
    // G = dS · K_R ; dQ_R = G diag(w) ; dw = colsum(Q_R ⊙ G)
    let mut gq = Matrix::zeros(n, rank);
    gemm_acc(&ds, &kr, &mut gq);
    let mut gk = Matrix::zeros(n, rank);
    gemm_tn_acc(&ds, &qr, &mut gk);
    let mut dw = Matrix::zeros(1, rank);
    for a in 0..n {
        for r in 0..rank {
            dw.data_mut()[r] += qr.get(a, r) * gq.get(a, r);
        }
    }
    let mut dq = Matrix::zeros(n, q.cols());
    let mut dk = Matrix::zeros(n, k.cols());
    for a in 0..n {
        for r in 0..rank {
            dq.set(a, r, gq.get(a, r) * w[r]);
            dk.set(a, r, gk.get(a, r) * w[r]);
        }
    }
    Ok(MultiLinearGrads { dq, dk, dv, dw })
}

/// Loss, row probabilities and counted rows for label-smoothed cross entropy.
pub(crate) fn label_smoothed_ce_parts<T: Scalar>(
    logits: &Matrix<T>,
    targets: &[usize],
    smoothing: f64,
    pad: Option<usize>,
) -> Result<(T, Matrix<T>, usize)> {
    let vocab = logits.cols();
    if targets.len() != logits.rows() {
        return Err(Error::dim(format!(
            "{} targets for {} logit rows",
            targets.len(),
            logits.rows()
        )));
    }
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::arg(format!("label smoothing {smoothing} outside [0, 1)")));
    }
    if smoothing > 0.0 && vocab < 2 {
        return Err(Error::arg("label smoothing needs at least two classes"));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
        return Err(Error::Input(format!("target id {bad} outside {vocab} classes")));
    }
    if !logits.is_finite() {
        return Err(Error::Numeric("non-finite logits".into()));
    }
    let eps: T = s(smoothing);
    let off = if vocab > 1 {
        eps / s::<T>((vocab - 1) as f64)
    } else {
        T::zero()
    };
    let mut probs = logits.clone();
    let mut total = T::zero();
    let mut count = 0;
    for (r, &t) in targets.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<T>().ln();
        softmax_in_place(probs.row_mut(r));
        if Some(t) == pad {
            continue;
        }
        // −Σ q_v (z_v − lse) = lse − Σ q_v z_v
        let mut expected = T::zero();
        for (c, &z) in row.iter().enumerate() {
            let q = if c == t { T::one() - eps } else { off };
            expected += q * z;
        }
        total += lse - expected;
        count += 1;
    }
    let loss = if count == 0 {
        T::zero()
    } else {
        total / s::<T>(count as f64)
    };
    Ok((loss, probs, count))
}

/// Finite-difference result for one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    /// Flat indices that were probed; all of them unless subsampled.
    pub coordinates: Vec<usize>,
    pub subsampled: bool,
    pub max_rel_error: f64,
    pub worst_coordinate: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_error)
            .fold(0.0, f64::max)
    }
}

/// `|a − b| / max(1e-8, |a| + |b|)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
}

/// Compares [`Tape::backward`] against central differences
/// `(f(p + ε e) − f(p − ε e)) / 2ε` for every parameter in `store`.
///
/// `loss` builds the scalar loss on a fresh tape. Parameters larger than
/// `max_coords` are probed on a seeded random subset of coordinates, which is
/// recorded in the report.
pub fn finite_diff_check<T, F>(
    store: &ParamStore<T>,
    eps: f64,
    max_coords: Option<usize>,
    seed: u64,
    loss: F,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &ParamStore<T>) -> Result<NodeId>,
{
    if eps <= 0.0 {
        return Err(Error::arg("finite difference step must be positive"));
    }
    let mut tape = Tape::new();
    let out = loss(&mut tape, store)?;
    let grads = tape.backward(out)?;
    let eval = |st: &ParamStore<T>| -> Result<f64> {
        let mut t = Tape::new();
        let n = loss(&mut t, st)?;
        Ok(t.scalar(n)?.as_f64())
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = Vec::with_capacity(store.len());
    let mut probe = store.clone();
    for (id, name, value) in store.iter() {
        let len = value.len();
        let (coordinates, subsampled) = match max_coords {
            Some(m) if m < len => {
                let mut c = sample(&mut rng, len, m).into_vec();
                c.sort_unstable();
                (c, true)
            }
            _ => ((0..len).collect(), false),
        };
        let analytic = grads.get(id);
        let mut worst = 0.0;
        let mut worst_at = None;
        for &i in &coordinates {
            let orig = value.data()[i];
            probe.get_mut(id).data_mut()[i] = s::<T>(orig.as_f64() + eps);
            let up = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = s::<T>(orig.as_f64() - eps);
            let down = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::Numeric(format!(
                    "loss not finite when probing {name}[{i}]"
                )));
            }
            let numeric = (up - down) / (2.0 * eps);
            let exact = analytic.map_or(0.0, |g| g.data()[i].as_f64());
            let err = relative_error(exact, numeric);
            if err > worst || worst_at.is_none() {
                worst = err;
                worst_at = Some(i);
            }
        }
        report.push(ParamCheck {
            name: name.to_string(),
            coordinates,
            subsampled,
            max_rel_error: worst,
            worst_coordinate: worst_at,
        });
    }
    Ok(GradCheckReport { params: report })
}
