//! Attention layers and their compression accounting.
//!
//! Two baselines (scaled dot-product and multi-head) sit next to the
//! tensorized layers:
//!
//! * **Single-block attention** contracts channel-weighted columns of the
//!   projected queries, keys and values against a diagonal core. Two tensor
//!   forms are provided. [`single_block_tensor`] is the literal Tucker term
//!   `T[a,b,c] = Σ_r w_r Q[a,r] K[b,r] V[c,r]`; [`row_coupled_tensor`] indexes
//!   the values by key position, `T'[a,b,m] = Σ_r w_r Q[a,r] K[b,r] V[b,m]`,
//!   and summing it over its second index is exactly
//!   [`linear_attention`] `= Q diag(w) Kᵀ V`.
//! * **Multi-linear attention** averages `h` single-block terms that share
//!   `Wq`, `Wk`, `Wv`, splits the result into `h` key-position chunks, sums
//!   each chunk and concatenates before the output map. Because the average
//!   is linear in the core weights it equals one block with the averaged
//!   weights, which is how it is evaluated.
//!
//! With a causal mask, key positions after the query position contribute
//! nothing; there is no renormalization.

use rand::distr::Open01;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{attention_probs, multi_linear_seq};
use crate::error::{Error, Result};
use crate::tensor::{s, softmax, Matrix, Scalar, Tensor3};

/// Which attention layer a model uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    MultiLinear,
    MultiHead,
}

impl std::fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AttentionKind::MultiLinear => "multi_linear",
            AttentionKind::MultiHead => "multi_head",
        })
    }
}

/// How the multi-linear tensor is reduced back to a matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    /// `h` key-position chunks, summed and concatenated; `Wo` is `(h·d, d_model)`.
    #[default]
    Chunked,
    /// Sum over every key position; `Wo` is `(d, d_model)`.
    Sum,
}

impl std::fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AttentionMode::Chunked => "chunked",
            AttentionMode::Sum => "sum",
        })
    }
}

/// Trainable superdiagonal of a core tensor.
///
/// The raw vector `g` is unconstrained; the layer always uses
/// [`DiagonalCore::weights`] `= softmax(g)`, a point on the simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagonalCore<T> {
    g: Vec<T>,
}

impl<T: Scalar> DiagonalCore<T> {
    pub fn new(g: Vec<T>) -> Result<Self> {
        if g.is_empty() {
            return Err(Error::arg("core rank must be at least 1"));
        }
        Ok(Self { g })
    }

    pub fn rank(&self) -> usize {
        self.g.len()
    }

    pub fn raw(&self) -> &[T] {
        &self.g
    }

    pub fn weights(&self) -> Vec<T> {
        softmax(&self.g).expect("finite core")
    }
}

/// Draws `g` i.i.d. uniform on the open interval (0, 1).
pub fn init_core<T: Scalar>(rank: usize, seed: u64) -> Result<DiagonalCore<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    init_core_with(rank, &mut rng)
}

pub(crate) fn init_core_with<T: Scalar, R: Rng>(rank: usize, rng: &mut R) -> Result<DiagonalCore<T>> {
    if rank < 1 {
        return Err(Error::arg("core rank must be at least 1"));
    }
    DiagonalCore::new((0..rank).map(|_| s(rng.sample::<f64, _>(Open01))).collect())
}

/// Xavier-normal matrix: `N(0, 2 / (rows + cols))`.
pub fn xavier_normal<T: Scalar, R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Matrix<T> {
    let std = (2.0 / (rows + cols) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    Matrix::from_fn(rows, cols, |_, _| s(rng.sample(normal)))
}

/// Parameters of one multi-linear attention layer: one shared projection
/// triple, `h` diagonal cores and the output map.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<T> {
    pub wq: Matrix<T>,
    pub wk: Matrix<T>,
    pub wv: Matrix<T>,
    pub cores: Vec<DiagonalCore<T>>,
    pub wo: Matrix<T>,
    pub mode: AttentionMode,
}

impl<T: Scalar> AttentionParams<T> {
    pub fn new(
        wq: Matrix<T>,
        wk: Matrix<T>,
        wv: Matrix<T>,
        cores: Vec<DiagonalCore<T>>,
        wo: Matrix<T>,
        mode: AttentionMode,
    ) -> Result<Self> {
        let (d_model, d) = wq.shape();
        if wk.shape() != (d_model, d) || wv.shape() != (d_model, d) {
            return Err(Error::dim("Wq, Wk and Wv must share one shape"));
        }
        let rank = cores
            .first()
            .ok_or_else(|| Error::arg("at least one core is required"))?
            .rank();
        if cores.iter().any(|c| c.rank() != rank) {
            return Err(Error::arg("all cores must share one rank"));
        }
        if rank > d {
            return Err(Error::arg(format!("core rank {rank} exceeds projection width {d}")));
        }
        let wo_rows = match mode {
            AttentionMode::Chunked => cores.len() * d,
            AttentionMode::Sum => d,
        };
        if wo.shape() != (wo_rows, d_model) {
            return Err(Error::dim(format!(
                "Wo is {:?}, expected ({wo_rows}, {d_model}) in {mode} mode",
                wo.shape()
            )));
        }
        Ok(Self {
            wq,
            wk,
            wv,
            cores,
            wo,
            mode,
        })
    }

    /// Xavier-normal projections and uniform (0, 1) cores.
    pub fn init<R: Rng>(dims: AttentionDims, rng: &mut R) -> Result<Self> {
        let AttentionDims {
            d_model,
            d,
            heads,
            rank,
            mode,
        } = dims;
        let wq = xavier_normal(d_model, d, rng);
        let wk = xavier_normal(d_model, d, rng);
        let wv = xavier_normal(d_model, d, rng);
        let cores = (0..heads)
            .map(|_| init_core_with(rank, rng))
            .collect::<Result<Vec<_>>>()?;
        let wo_rows = match mode {
            AttentionMode::Chunked => heads * d,
            AttentionMode::Sum => d,
        };
        let wo = xavier_normal(wo_rows, d_model, rng);
        Self::new(wq, wk, wv, cores, wo, mode)
    }

    pub fn heads(&self) -> usize {
        self.cores.len()
    }

    pub fn rank(&self) -> usize {
        self.cores[0].rank()
    }

    /// `w̄ = (1/h) Σ_j softmax(g_j)`.
    pub fn averaged_weights(&self) -> Vec<T> {
        let h: T = s(self.cores.len() as f64);
        let mut avg = vec![T::zero(); self.rank()];
        for core in &self.cores {
            for (a, w) in avg.iter_mut().zip(core.weights()) {
                *a += w;
            }
        }
        avg.into_iter().map(|v| v / h).collect()
    }

    /// Number of allocated scalars.
    pub fn scalar_count(&self) -> usize {
        self.wq.len()
            + self.wk.len()
            + self.wv.len()
            + self.cores.iter().map(DiagonalCore::rank).sum::<usize>()
            + self.wo.len()
    }
}

/// Parameters of a standard multi-head layer: independent projections per
/// head.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadParams<T> {
    pub wq: Vec<Matrix<T>>,
    pub wk: Vec<Matrix<T>>,
    pub wv: Vec<Matrix<T>>,
    pub wo: Matrix<T>,
}

impl<T: Scalar> MultiHeadParams<T> {
    pub fn new(wq: Vec<Matrix<T>>, wk: Vec<Matrix<T>>, wv: Vec<Matrix<T>>, wo: Matrix<T>) -> Result<Self> {
        let heads = wq.len();
        if heads == 0 || wk.len() != heads || wv.len() != heads {
            return Err(Error::arg("need the same non-zero number of Wq, Wk and Wv matrices"));
        }
        let shape = wq[0].shape();
        if wq.iter().chain(&wk).chain(&wv).any(|m| m.shape() != shape) {
            return Err(Error::dim("all per-head projections must share one shape"));
        }
        if wo.shape() != (heads * shape.1, shape.0) {
            return Err(Error::dim(format!(
                "Wo is {:?}, expected ({}, {})",
                wo.shape(),
                heads * shape.1,
                shape.0
            )));
        }
        Ok(Self { wq, wk, wv, wo })
    }

    pub fn init<R: Rng>(d_model: usize, d: usize, heads: usize, rng: &mut R) -> Result<Self> {
        let mut wq = Vec::with_capacity(heads);
        let mut wk = Vec::with_capacity(heads);
        let mut wv = Vec::with_capacity(heads);
        for _ in 0..heads {
            wq.push(xavier_normal(d_model, d, rng));
            wk.push(xavier_normal(d_model, d, rng));
            wv.push(xavier_normal(d_model, d, rng));
        }
        let wo = xavier_normal(heads * d, d_model, rng);
        Self::new(wq, wk, wv, wo)
    }

    pub fn heads(&self) -> usize {
        self.wq.len()
    }

    pub fn scalar_count(&self) -> usize {
        self.wq
            .iter()
            .chain(&self.wk)
            .chain(&self.wv)
            .map(Matrix::len)
            .sum::<usize>()
            + self.wo.len()
    }
}

/// Orthonormal basis stored as the columns of `E (m, n)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisSet<T> {
    e: Matrix<T>,
}

impl<T: Scalar> BasisSet<T> {
    /// Rejects `E` unless `EᵀE = I` within 1e-8.
    pub fn new(e: Matrix<T>) -> Result<Self> {
        let gram = e.t_matmul(&e)?;
        let err = gram.max_abs_diff(&Matrix::identity(e.cols())).as_f64();
        if err > 1e-8 {
            return Err(Error::arg(format!(
                "basis columns are not orthonormal (max |EᵀE − I| = {err:e})"
            )));
        }
        Ok(Self { e })
    }

    /// Orthonormal basis of the span of `vectors`' columns (modified
    /// Gram-Schmidt; numerically dependent columns are dropped).
    pub fn spanning(vectors: &Matrix<T>) -> Result<Self> {
        let m = vectors.rows();
        let tol: T = s(1e-10);
        let mut basis: Vec<Vec<T>> = Vec::new();
        for c in 0..vectors.cols() {
            let mut v: Vec<T> = (0..m).map(|r| vectors.get(r, c)).collect();
            let scale = v.iter().fold(T::zero(), |a, &x| a.max(x.abs()));
            for _ in 0..2 {
                for b in &basis {
                    let dot: T = v.iter().zip(b).map(|(&x, &y)| x * y).sum();
                    for (x, &y) in v.iter_mut().zip(b) {
                        *x -= dot * y;
                    }
                }
            }
            let norm = v.iter().map(|&x| x * x).sum::<T>().sqrt();
            if norm > tol * scale.max(T::one()) {
                basis.push(v.into_iter().map(|x| x / norm).collect());
            }
        }
        if basis.is_empty() {
            return Err(Error::arg("cannot build a basis from zero vectors"));
        }
        let e = Matrix::from_fn(m, basis.len(), |r, c| basis[c][r]);
        Self::new(e)
    }

    pub fn matrix(&self) -> &Matrix<T> {
        &self.e
    }

    pub fn dim(&self) -> usize {
        self.e.cols()
    }

    /// `E · coefficients`: columns that are linear combinations of the basis.
    pub fn combine(&self, coefficients: &Matrix<T>) -> Result<Matrix<T>> {
        self.e.matmul(coefficients)
    }
}

/// `softmax(Q Kᵀ / √d) · V`, optionally causal.
pub fn scaled_dot_attention<T: Scalar>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    causal: bool,
) -> Result<Matrix<T>> {
    if q.cols() == 0 || q.shape() != k.shape() || v.rows() != k.rows() {
        return Err(Error::dim(format!(
            "scaled_dot_attention: Q {:?}, K {:?}, V {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    if causal && q.rows() != k.rows() {
        return Err(Error::dim("causal attention needs as many queries as keys"));
    }
    attention_probs(q, k, causal)?.matmul(v)
}

/// `Concat(head_1, …, head_h) · Wo` with `head_i` the scaled dot-product
/// attention of the `i`-th projections.
pub fn multi_head_attention<T: Scalar>(
    p: &MultiHeadParams<T>,
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    causal: bool,
) -> Result<Matrix<T>> {
    let heads = (0..p.heads())
        .map(|i| {
            scaled_dot_attention(
                &q.matmul(&p.wq[i])?,
                &k.matmul(&p.wk[i])?,
                &v.matmul(&p.wv[i])?,
                causal,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Matrix::concat_cols(&heads)?.matmul(&p.wo)
}

fn check_factor_triple<T: Scalar>(w: &[T], q: &Matrix<T>, k: &Matrix<T>, v: &Matrix<T>) -> Result<()> {
    if q.rows() != k.rows() || k.rows() != v.rows() || q.cols() != k.cols() {
        return Err(Error::dim(format!(
            "factor shapes Q {:?}, K {:?}, V {:?} do not conform",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    if w.is_empty() || w.len() > q.cols() {
        return Err(Error::arg(format!(
            "rank {} must lie in 1..={}",
            w.len(),
            q.cols()
        )));
    }
    Ok(())
}

/// Single-block Tucker term with diagonal core:
/// `T[a,b,c] = Σ_{r<R} w_r Q[a,r] K[b,r] V[c,r]`, shape `(N, N, N)`.
///
/// Materializes `N³` entries; for verification only.
pub fn single_block_tensor<T: Scalar>(
    w: &[T],
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
) -> Result<Tensor3<T>> {
    check_factor_triple(w, q, k, v)?;
    if v.cols() != q.cols() {
        return Err(Error::dim("single_block_tensor needs Q, K and V of one shape"));
    }
    let n = q.rows();
    Ok(Tensor3::from_fn([n, n, n], |a, b, c| {
        w.iter()
            .enumerate()
            .map(|(r, &wr)| wr * q.get(a, r) * k.get(b, r) * v.get(c, r))
            .sum()
    }))
}

/// Row-coupled single-block tensor
/// `T'[a,b,m] = Σ_{r<R} w_r Q[a,r] K[b,r] V[b,m]`, shape `(N, N, d_v)`.
pub fn row_coupled_tensor<T: Scalar>(
    w: &[T],
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
) -> Result<Tensor3<T>> {
    check_factor_triple(w, q, k, v)?;
    let n = q.rows();
    Ok(Tensor3::from_fn([n, n, v.cols()], |a, b, m| {
        let score: T = w
            .iter()
            .enumerate()
            .map(|(r, &wr)| wr * q.get(a, r) * k.get(b, r))
            .sum();
        score * v.get(b, m)
    }))
}

/// `out[a, m] = Σ_b T[a, b, m]`.
pub fn sum_second_index<T: Scalar>(t: &Tensor3<T>) -> Matrix<T> {
    let [n1, n2, n3] = t.shape();
    Matrix::from_fn(n1, n3, |a, m| (0..n2).map(|b| t.get(a, b, m)).sum())
}

/// `Q_R diag(w) K_Rᵀ V`, evaluated as matrix products in `O(N² d)`.
pub fn linear_attention<T: Scalar>(
    w: &[T],
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
) -> Result<Matrix<T>> {
    check_factor_triple(w, q, k, v)?;
    multi_linear_seq(q, k, v, w, 1, false)
}

/// Multi-linear attention layer.
///
/// Projects once with the shared `Wq`, `Wk`, `Wv`, averages the core weights
/// and evaluates the chunked (or summed) tensor reduction without
/// materializing it, then applies `Wo`.
pub fn multi_linear_attention<T: Scalar>(
    p: &AttentionParams<T>,
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    causal: bool,
) -> Result<Matrix<T>> {
    let qp = q.matmul(&p.wq)?;
    let kp = k.matmul(&p.wk)?;
    let vp = v.matmul(&p.wv)?;
    if qp.rows() != kp.rows() || kp.rows() != vp.rows() {
        return Err(Error::dim("queries, keys and values must have equal length"));
    }
    let chunks = match p.mode {
        AttentionMode::Sum => 1,
        AttentionMode::Chunked => {
            if p.heads() > qp.rows() {
                return Err(Error::arg(format!(
                    "{} chunks exceed sequence length {}",
                    p.heads(),
                    qp.rows()
                )));
            }
            p.heads()
        }
    };
    let w = p.averaged_weights();
    multi_linear_seq(&qp, &kp, &vp, &w, chunks, causal)?.matmul(&p.wo)
}

/// `‖Y − Y E Eᵀ‖_F`: how far the rows of `Y` reach outside the span of the
/// basis.
pub fn span_residual<T: Scalar>(y: &Matrix<T>, basis: &BasisSet<T>) -> Result<T> {
    let e = basis.matrix();
    if y.cols() != e.rows() {
        return Err(Error::dim(format!(
            "rows of length {} against basis vectors of length {}",
            y.cols(),
            e.rows()
        )));
    }
    let projected = y.matmul(e)?.matmul_t(e)?;
    Ok(y.sub(&projected)?.frobenius_norm())
}

/// Projection-parameter compression of multi-linear over multi-head
/// attention with `R = d`: `3 h d_model / (3 d_model + h)`.
pub fn compression_ratio(heads: usize, d_model: usize) -> f64 {
    let (h, dm) = (heads as f64, d_model as f64);
    3.0 * h * dm / (3.0 * dm + h)
}

/// Rank-aware compression `3 h d_model d / (3 d_model d + R h)`.
pub fn compression_ratio_rank(heads: usize, d_model: usize, d: usize, rank: usize) -> Result<f64> {
    if heads == 0 || d_model == 0 || d == 0 || rank == 0 {
        return Err(Error::arg("compression_ratio_rank needs positive arguments"));
    }
    if rank > d {
        return Err(Error::arg(format!("rank {rank} exceeds d = {d}")));
    }
    let (h, dm, d, r) = (heads as f64, d_model as f64, d as f64, rank as f64);
    Ok(3.0 * h * dm * d / (3.0 * dm * d + r * h))
}

/// Shape of one attention layer for parameter accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionDims {
    pub d_model: usize,
    pub d: usize,
    pub heads: usize,
    pub rank: usize,
    pub mode: AttentionMode,
}

/// Closed-form parameter count of one attention layer.
///
/// Multi-head: `3 h d_model d`; multi-linear: `3 d_model d + h R`. With
/// `include_wo` the output map is added (`h d d_model`, or `d d_model` for a
/// multi-linear layer in [`AttentionMode::Sum`]).
pub fn count_attention_params(kind: AttentionKind, dims: AttentionDims, include_wo: bool) -> usize {
    let AttentionDims {
        d_model,
        d,
        heads,
        rank,
        mode,
    } = dims;
    match kind {
        AttentionKind::MultiHead => {
            3 * heads * d_model * d + if include_wo { heads * d * d_model } else { 0 }
        }
        AttentionKind::MultiLinear => {
            let wo = match mode {
                AttentionMode::Chunked => heads * d * d_model,
                AttentionMode::Sum => d * d_model,
            };
            3 * d_model * d + heads * rank + if include_wo { wo } else { 0 }
        }
    }
}
