//! Dense matrix and 3-order tensor kernels.
//!
//! Everything is stored row-major. A [`Tensor3`] of shape `(n1, n2, n3)`
//! keeps entry `(a, b, c)` at `(a * n2 + b) * n3 + c`. The kernels here are
//! the algebra the attention layers are defined in terms of: mode products,
//! Tucker and block-term reconstruction, slicing, chunked split/concat and
//! the numerically stable row softmax.
//!
//! All functions are pure; inputs are never mutated.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floating point element type. Implemented for `f32` (training) and `f64`
/// (verification).
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + 'static
{
    fn from_f64_lossy(x: f64) -> Self;

    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64_lossy(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64_lossy(x: f64) -> Self {
        x
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

#[inline]
pub(crate) fn s<T: Scalar>(x: f64) -> T {
    T::from_f64_lossy(x)
}

/// Dense row-major matrix.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Debug> Debug for Matrix<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows.min(8) {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            writeln!(f, "  {:?}", &row[..self.cols.min(8)])?;
        }
        write!(f, "]")
    }
}

impl<T: Scalar> Matrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn row_vector(values: &[T]) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        let cols = self.cols;
        &mut self.data[r * cols..(r + 1) * cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::dim(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        gemm_acc(self, other, &mut out);
        Ok(out)
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: &Self) -> Result<Self> {
        if self.cols != other.cols {
            return Err(Error::dim(format!(
                "matmul_t {}x{} by ({}x{})ᵀ",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        self.matmul(&other.transpose())
    }

    /// `selfᵀ · other`.
    pub fn t_matmul(&self, other: &Self) -> Result<Self> {
        if self.rows != other.rows {
            return Err(Error::dim(format!(
                "t_matmul ({}x{})ᵀ by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Self::zeros(self.cols, other.cols);
        gemm_tn_acc(self, other, &mut out);
        Ok(out)
    }

    fn check_same_shape(&self, other: &Self, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::dim(format!(
                "{what}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "add")?;
        Ok(self.zip_map(other, |a, b| a + b))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "sub")?;
        Ok(self.zip_map(other, |a, b| a - b))
    }

    pub fn hadamard(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "hadamard")?;
        Ok(self.zip_map(other, |a, b| a * b))
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.check_same_shape(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, k: T) -> Self {
        self.map(|v| v * k)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn frobenius_norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    /// Largest absolute entrywise difference; infinite on shape mismatch.
    pub fn max_abs_diff(&self, other: &Self) -> T {
        if self.shape() != other.shape() {
            return T::infinity();
        }
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }

    /// Columns `[start, end)`.
    pub fn cols_range(&self, start: usize, end: usize) -> Result<Self> {
        if start > end || end > self.cols {
            return Err(Error::Bounds(format!(
                "column range {start}..{end} of {} columns",
                self.cols
            )));
        }
        Ok(Self::from_fn(self.rows, end - start, |r, c| {
            self.get(r, start + c)
        }))
    }

    /// Rows `[start, end)`.
    pub fn rows_range(&self, start: usize, end: usize) -> Result<Self> {
        if start > end || end > self.rows {
            return Err(Error::Bounds(format!(
                "row range {start}..{end} of {} rows",
                self.rows
            )));
        }
        Ok(Self {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        })
    }

    pub fn concat_cols(parts: &[Self]) -> Result<Self> {
        let rows = parts.first().map_or(0, |p| p.rows);
        if parts.iter().any(|p| p.rows != rows) {
            return Err(Error::dim("concat_cols: row counts differ"));
        }
        let cols = parts.iter().map(|p| p.cols).sum();
        let mut out = Self::zeros(rows, cols);
        for r in 0..rows {
            let mut offset = 0;
            for p in parts {
                out.row_mut(r)[offset..offset + p.cols].copy_from_slice(p.row(r));
                offset += p.cols;
            }
        }
        Ok(out)
    }

    pub fn concat_rows(parts: &[Self]) -> Result<Self> {
        let cols = parts.first().map_or(0, |p| p.cols);
        if parts.iter().any(|p| p.cols != cols) {
            return Err(Error::dim("concat_rows: column counts differ"));
        }
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Ok(Self {
            rows: data.len() / cols.max(1),
            cols,
            data,
        })
    }

    /// Multiplies column `c` by `weights[c]`.
    pub fn scale_cols(&self, weights: &[T]) -> Result<Self> {
        if weights.len() != self.cols {
            return Err(Error::dim(format!(
                "scale_cols: {} weights for {} columns",
                weights.len(),
                self.cols
            )));
        }
        let mut out = self.clone();
        for r in 0..out.rows {
            for (v, &w) in out.row_mut(r).iter_mut().zip(weights) {
                *v *= w;
            }
        }
        Ok(out)
    }

    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
        }
    }
}

impl Matrix<f64> {
    /// Builds a matrix from row literals.
    ///
    /// Panics on ragged rows; intended for fixtures.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self::from_fn(rows.len(), cols, |r, c| rows[r][c])
    }
}

/// `out += a · b`, i-k-j order so the inner loop is a contiguous axpy.
pub(crate) fn gemm_acc<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>, out: &mut Matrix<T>) {
    debug_assert_eq!(a.cols, b.rows);
    debug_assert_eq!(out.shape(), (a.rows, b.cols));
    let n = b.cols;
    for i in 0..a.rows {
        let out_row = &mut out.data[i * n..(i + 1) * n];
        for (k, &aik) in a.row(i).iter().enumerate() {
            if aik == T::zero() {
                continue;
            }
            let b_row = &b.data[k * n..(k + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
}

/// `out += aᵀ · b`.
pub(crate) fn gemm_tn_acc<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>, out: &mut Matrix<T>) {
    debug_assert_eq!(a.rows, b.rows);
    debug_assert_eq!(out.shape(), (a.cols, b.cols));
    let n = b.cols;
    for k in 0..a.rows {
        let b_row = &b.data[k * n..(k + 1) * n];
        for (i, &aki) in a.row(k).iter().enumerate() {
            if aki == T::zero() {
                continue;
            }
            let out_row = &mut out.data[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aki * bv;
            }
        }
    }
}

/// One of the three axes of a [`Tensor3`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Axis {
    First,
    Second,
    Third,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::First, Axis::Second, Axis::Third];

    #[inline]
    pub fn index(self) -> usize {
        match self {
            Axis::First => 0,
            Axis::Second => 1,
            Axis::Third => 2,
        }
    }
}

/// Dense 3-order tensor.
#[derive(Clone, PartialEq)]
pub struct Tensor3<T> {
    shape: [usize; 3],
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor3<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor3 {:?} {:?}", self.shape, &self.data[..self.data.len().min(16)])
    }
}

impl<T: Scalar> Tensor3<T> {
    pub fn new(shape: [usize; 3], data: Vec<T>) -> Result<Self> {
        let len = shape.iter().product::<usize>();
        if data.len() != len {
            return Err(Error::dim(format!(
                "tensor {shape:?} needs {len} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: [usize; 3]) -> Self {
        Self {
            shape,
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn from_fn(shape: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.iter().product());
        for a in 0..shape[0] {
            for b in 0..shape[1] {
                for c in 0..shape[2] {
                    data.push(f(a, b, c));
                }
            }
        }
        Self { shape, data }
    }

    /// Superdiagonal tensor of shape `(R, R, R)` with `weights` at `(r, r, r)`.
    pub fn superdiagonal(weights: &[T]) -> Self {
        let r = weights.len();
        let mut t = Self::zeros([r, r, r]);
        for (i, &w) in weights.iter().enumerate() {
            t.set(i, i, i, w);
        }
        t
    }

    #[inline]
    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    fn offset(&self, a: usize, b: usize, c: usize) -> usize {
        (a * self.shape[1] + b) * self.shape[2] + c
    }

    #[inline]
    pub fn get(&self, a: usize, b: usize, c: usize) -> T {
        self.data[self.offset(a, b, c)]
    }

    #[inline]
    pub fn set(&mut self, a: usize, b: usize, c: usize, v: T) {
        let o = self.offset(a, b, c);
        self.data[o] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::dim(format!(
                "tensor add: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Self {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a + b)
                .collect(),
        })
    }

    pub fn scale(&self, k: T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| v * k).collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    /// Largest absolute entrywise difference; infinite on shape mismatch.
    pub fn max_abs_diff(&self, other: &Self) -> T {
        if self.shape != other.shape {
            return T::infinity();
        }
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }
}

/// Outer product `u ∘ v ∘ w`.
pub fn outer3<T: Scalar>(u: &[T], v: &[T], w: &[T]) -> Result<Tensor3<T>> {
    if u.is_empty() || v.is_empty() || w.is_empty() {
        return Err(Error::dim("outer3: empty factor vector"));
    }
    Ok(Tensor3::from_fn([u.len(), v.len(), w.len()], |a, b, c| {
        u[a] * v[b] * w[c]
    }))
}

/// Mode product `T •_axis M`: contracts `axis` of `t` against the columns of
/// `m`, replacing that dimension with `m.rows()`.
pub fn mode_product<T: Scalar>(t: &Tensor3<T>, m: &Matrix<T>, axis: Axis) -> Result<Tensor3<T>> {
    let z = axis.index();
    if m.cols() != t.shape[z] {
        return Err(Error::dim(format!(
            "mode_product along {axis:?}: matrix has {} columns, tensor dimension is {}",
            m.cols(),
            t.shape[z]
        )));
    }
    let mut shape = t.shape;
    shape[z] = m.rows();
    let mut out = Tensor3::zeros(shape);
    for a in 0..shape[0] {
        for b in 0..shape[1] {
            for c in 0..shape[2] {
                let idx = [a, b, c];
                let p = idx[z];
                let mut acc = T::zero();
                for q in 0..m.cols() {
                    let mut src = idx;
                    src[z] = q;
                    acc += m.get(p, q) * t.get(src[0], src[1], src[2]);
                }
                out.set(a, b, c, acc);
            }
        }
    }
    Ok(out)
}

/// Tucker reconstruction `G •1 X1 •2 X2 •3 X3`.
pub fn tucker3<T: Scalar>(
    core: &Tensor3<T>,
    x1: &Matrix<T>,
    x2: &Matrix<T>,
    x3: &Matrix<T>,
) -> Result<Tensor3<T>> {
    let t = mode_product(core, x1, Axis::First)?;
    let t = mode_product(&t, x2, Axis::Second)?;
    mode_product(&t, x3, Axis::Third)
}

/// One Tucker term of a block-term decomposition.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockTerm<T> {
    pub core: Tensor3<T>,
    pub factors: [Matrix<T>; 3],
}

impl<T: Scalar> BlockTerm<T> {
    pub fn reconstruct(&self) -> Result<Tensor3<T>> {
        tucker3(&self.core, &self.factors[0], &self.factors[1], &self.factors[2])
    }

    fn outer_shape(&self) -> [usize; 3] {
        [
            self.factors[0].rows(),
            self.factors[1].rows(),
            self.factors[2].rows(),
        ]
    }
}

/// Factors of a 3-order block-term decomposition: `P ≥ 1` Tucker terms that
/// share core and factor shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockTermFactors<T> {
    blocks: Vec<BlockTerm<T>>,
}

impl<T: Scalar> BlockTermFactors<T> {
    pub fn new(blocks: Vec<BlockTerm<T>>) -> Result<Self> {
        let first = blocks
            .first()
            .ok_or_else(|| Error::arg("block-term decomposition needs at least one block"))?;
        let core_shape = first.core.shape();
        let outer = first.outer_shape();
        for (i, b) in blocks.iter().enumerate() {
            for (k, f) in b.factors.iter().enumerate() {
                if f.cols() != b.core.shape()[k] {
                    return Err(Error::dim(format!(
                        "block {i}: factor {k} has {} columns, core dimension is {}",
                        f.cols(),
                        b.core.shape()[k]
                    )));
                }
            }
            if b.core.shape() != core_shape || b.outer_shape() != outer {
                return Err(Error::dim(format!(
                    "block {i}: core {:?} / outer {:?} differ from block 0 ({core_shape:?} / {outer:?})",
                    b.core.shape(),
                    b.outer_shape()
                )));
            }
        }
        Ok(Self { blocks })
    }

    /// Like [`BlockTermFactors::new`] but also requires `R1 = R2 = R3`.
    pub fn with_equal_ranks(blocks: Vec<BlockTerm<T>>) -> Result<Self> {
        let f = Self::new(blocks)?;
        let [r1, r2, r3] = f.blocks[0].core.shape();
        if r1 != r2 || r2 != r3 {
            return Err(Error::arg(format!(
                "core ranks must be equal, got ({r1}, {r2}, {r3})"
            )));
        }
        Ok(f)
    }

    pub fn blocks(&self) -> &[BlockTerm<T>] {
        &self.blocks
    }

    pub fn into_blocks(self) -> Vec<BlockTerm<T>> {
        self.blocks
    }
}

/// Block-term reconstruction: the sum of every block's Tucker term.
pub fn btd3<T: Scalar>(f: &BlockTermFactors<T>) -> Result<Tensor3<T>> {
    let mut iter = f.blocks.iter();
    let first = iter.next().expect("validated non-empty");
    let mut acc = first.reconstruct()?;
    for b in iter {
        acc = acc.add(&b.reconstruct()?)?;
    }
    Ok(acc)
}

/// 2-D section of `t` with `axis` fixed at `index`; the two remaining axes
/// keep their order.
pub fn slice<T: Scalar>(t: &Tensor3<T>, axis: Axis, index: usize) -> Result<Matrix<T>> {
    let [n1, n2, n3] = t.shape;
    if index >= t.shape[axis.index()] {
        return Err(Error::Bounds(format!(
            "slice index {index} on {axis:?} of size {}",
            t.shape[axis.index()]
        )));
    }
    Ok(match axis {
        Axis::First => Matrix::from_fn(n2, n3, |b, c| t.get(index, b, c)),
        Axis::Second => Matrix::from_fn(n1, n3, |a, c| t.get(a, index, c)),
        Axis::Third => Matrix::from_fn(n1, n2, |a, b| t.get(a, b, index)),
    })
}

/// Inverse of [`slice`]: stacks equally shaped sections along `axis`.
pub fn stack<T: Scalar>(slices: &[Matrix<T>], axis: Axis) -> Result<Tensor3<T>> {
    let first = slices
        .first()
        .ok_or_else(|| Error::arg("stack: no slices"))?;
    if slices.iter().any(|m| m.shape() != first.shape()) {
        return Err(Error::dim("stack: slices differ in shape"));
    }
    let (p, q) = first.shape();
    let n = slices.len();
    Ok(match axis {
        Axis::First => Tensor3::from_fn([n, p, q], |a, b, c| slices[a].get(b, c)),
        Axis::Second => Tensor3::from_fn([p, n, q], |a, b, c| slices[b].get(a, c)),
        Axis::Third => Tensor3::from_fn([p, q, n], |a, b, c| slices[c].get(a, b)),
    })
}

/// Boundaries of `chunks` contiguous chunks over `len` positions. The first
/// `len % chunks` chunks hold one extra element; when `chunks > len` the
/// trailing chunks are empty.
pub fn chunk_bounds(len: usize, chunks: usize) -> Vec<(usize, usize)> {
    let base = len / chunks;
    let extra = len % chunks;
    let mut bounds = Vec::with_capacity(chunks);
    let mut start = 0;
    for c in 0..chunks {
        let size = base + usize::from(c < extra);
        bounds.push((start, start + size));
        start += size;
    }
    bounds
}

/// Splits the second axis of `t (N, n2, m)` into `h` contiguous chunks, sums
/// within each chunk, and concatenates the resulting `(N, m)` matrices along
/// columns in chunk order.
pub fn split_concat<T: Scalar>(t: &Tensor3<T>, h: usize) -> Result<Matrix<T>> {
    let [n, n2, m] = t.shape;
    if h < 1 || h > n2 {
        return Err(Error::arg(format!(
            "split_concat: chunk count {h} outside 1..={n2}"
        )));
    }
    let mut out = Matrix::zeros(n, h * m);
    for (chunk, (start, end)) in chunk_bounds(n2, h).into_iter().enumerate() {
        for a in 0..n {
            for b in start..end {
                for c in 0..m {
                    let v = out.get(a, chunk * m + c) + t.get(a, b, c);
                    out.set(a, chunk * m + c, v);
                }
            }
        }
    }
    Ok(out)
}

/// In-place stable softmax of one row.
pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Scalar>(m: &Matrix<T>) -> Result<Matrix<T>> {
    if !m.is_finite() {
        return Err(Error::arg("softmax_rows: non-finite input"));
    }
    let mut out = m.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    Ok(out)
}

/// Softmax of a single vector.
pub fn softmax<T: Scalar>(v: &[T]) -> Result<Vec<T>> {
    Ok(softmax_rows(&Matrix::row_vector(v))?.into_data())
}
