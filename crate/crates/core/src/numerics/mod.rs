//! Dense row-major matrices and the handful of kernels a small decoder needs.
//!
//! Every matrix product goes through [`gemm`], which books its FLOPs into a
//! [`FlopsLedger`] under a caller-chosen [`FlopCategory`]. The count is the
//! mathematical one (`2·m·k·n`, one multiply and one add per MAC), no matter
//! which kernel ran.

mod ledger;
mod rng;

pub use ledger::{FlopCategory, FlopsLedger, RoleFlops, RowRole};
pub use rng::SeededRng;

use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Debug;

use num_traits::Float;

use crate::{Error, Result};

/// Scalar type the engine can run in. Inference uses `f32`; gradient
/// verification and training use `f64`.
pub trait Real: Float + Default + Debug + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `c = alpha·a·b + beta·c` over strided views, via `matrixmultiply`.
    ///
    /// # Safety
    /// Pointers and strides must describe in-bounds matrices of the given
    /// shapes; `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn blocked_gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Real for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    unsafe fn blocked_gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Real for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    unsafe fn blocked_gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Row-major matrix. `data.len() == rows * cols` always holds.
#[derive(Clone, PartialEq)]
pub struct Tensor2<T = f32> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T> Debug for Tensor2<T> {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "Tensor2[{}x{}]", self.rows, self.cols)
    }
}

impl<T: Real> Tensor2<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                op: "from_vec",
                detail: alloc::format!("{} values for a {rows}x{cols} matrix", data.len()),
            });
        }
        Ok(Self { rows, cols, data })
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

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| if r == c { T::one() } else { T::zero() })
    }

    /// Fills with independent N(0, std²) draws from `rng`.
    pub fn randn(rows: usize, cols: usize, std: f64, rng: &mut SeededRng) -> Self {
        Self::from_fn(rows, cols, |_, _| T::from_f64(rng.normal() * std))
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
    pub fn data(&self) -> &[T] {
        &self.data
    }
    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
    pub fn into_vec(self) -> Vec<T> {
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
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Copies rows `start..end` into a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        Self {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn cast<U: Real>(&self) -> Tensor2<U> {
        Tensor2 {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape {
                op: "add_assign",
                detail: alloc::format!("{:?} vs {:?}", self.shape(), other.shape()),
            });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + *b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: T) {
        for v in &mut self.data {
            *v = *v * s;
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn view(&self) -> MatRef<'_, T> {
        MatRef { data: &self.data, offset: 0, rows: self.rows, cols: self.cols, rs: self.cols, cs: 1 }
    }

    pub fn view_mut(&mut self) -> MatMut<'_, T> {
        let (rows, cols) = self.shape();
        MatMut { data: &mut self.data, offset: 0, rows, cols, rs: cols, cs: 1 }
    }
}

/// Read-only strided window into a slice.
#[derive(Clone, Copy)]
pub struct MatRef<'a, T> {
    data: &'a [T],
    offset: usize,
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a, T: Real> MatRef<'a, T> {
    pub fn new(data: &'a [T], offset: usize, rows: usize, cols: usize, rs: usize, cs: usize) -> Self {
        let view = Self { data, offset, rows, cols, rs, cs };
        assert!(view.in_bounds(data.len()), "strided view out of bounds");
        view
    }

    fn in_bounds(&self, len: usize) -> bool {
        self.rows == 0 || self.cols == 0 || self.offset + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs < len
    }

    pub fn t(self) -> Self {
        Self { rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs, ..self }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> T {
        self.data[self.offset + r * self.rs + c * self.cs]
    }

    pub fn rows(&self) -> usize {
        self.rows
    }
    pub fn cols(&self) -> usize {
        self.cols
    }
}

/// Mutable strided window into a slice.
pub struct MatMut<'a, T> {
    data: &'a mut [T],
    offset: usize,
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a, T: Real> MatMut<'a, T> {
    pub fn new(data: &'a mut [T], offset: usize, rows: usize, cols: usize, rs: usize, cs: usize) -> Self {
        let ok = rows == 0 || cols == 0 || offset + (rows - 1) * rs + (cols - 1) * cs < data.len();
        assert!(ok, "strided view out of bounds");
        Self { data, offset, rows, cols, rs, cs }
    }
}

/// Products at or below this many rows (or with a tiny inner dimension) run
/// through the plain loop kernel; the blocked kernel only pays off above it.
const SMALL_ROWS: usize = 4;
const SMALL_VOLUME: usize = 8 * 8 * 8;

/// `c = a·b + beta·c`, booking `2·m·k·n` FLOPs under `category`.
///
/// The loop kernel accumulates each entry in ascending `k` order starting
/// from zero, exactly like a textbook triple loop, except when both
/// operands are contiguous along `k`, where it uses split partial sums.
pub fn gemm<T: Real>(
    a: MatRef<'_, T>,
    b: MatRef<'_, T>,
    beta: T,
    c: MatMut<'_, T>,
    ledger: &mut FlopsLedger,
    category: FlopCategory,
) -> Result<()> {
    if a.cols != b.rows || c.rows != a.rows || c.cols != b.cols {
        return Err(Error::Shape {
            op: "gemm",
            detail: alloc::format!(
                "[{}x{}]·[{}x{}] into [{}x{}]",
                a.rows, a.cols, b.rows, b.cols, c.rows, c.cols
            ),
        });
    }
    let (m, k, n) = (a.rows, a.cols, b.cols);
    ledger.book(category, 2 * (m as u64) * (k as u64) * (n as u64));
    if m == 0 || n == 0 {
        return Ok(());
    }
    if m <= SMALL_ROWS || m * k * n <= SMALL_VOLUME || k == 0 {
        loop_gemm(a, b, beta, c);
    } else {
        // SAFETY: every view was bounds-checked at construction and `c` is a
        // distinct mutable borrow, so it cannot alias `a` or `b`.
        unsafe {
            T::blocked_gemm(
                m,
                k,
                n,
                T::one(),
                a.data.as_ptr().add(a.offset),
                a.rs as isize,
                a.cs as isize,
                b.data.as_ptr().add(b.offset),
                b.rs as isize,
                b.cs as isize,
                beta,
                c.data.as_mut_ptr().add(c.offset),
                c.rs as isize,
                c.cs as isize,
            );
        }
    }
    Ok(())
}

fn loop_gemm<T: Real>(a: MatRef<'_, T>, b: MatRef<'_, T>, beta: T, c: MatMut<'_, T>) {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let MatMut { data: cd, offset: co, rs: crs, cs: ccs, .. } = c;
    if b.cs == 1 && ccs == 1 {
        // i-k-j: rows of b are contiguous, vectorises over j.
        let mut acc = vec![T::zero(); n];
        for i in 0..m {
            acc.iter_mut().for_each(|v| *v = T::zero());
            for kk in 0..k {
                let aik = a.at(i, kk);
                let brow = &b.data[b.offset + kk * b.rs..b.offset + kk * b.rs + n];
                for (acc_j, &bkj) in acc.iter_mut().zip(brow) {
                    *acc_j = *acc_j + aik * bkj;
                }
            }
            let crow = &mut cd[co + i * crs..co + i * crs + n];
            for (cv, &s) in crow.iter_mut().zip(&acc) {
                *cv = if beta == T::zero() { s } else { beta * *cv + s };
            }
        }
    } else if a.cs == 1 && b.rs == 1 {
        // Contiguous dot products (`x·Kᵀ` in attention).
        for i in 0..m {
            let arow = &a.data[a.offset + i * a.rs..a.offset + i * a.rs + k];
            for j in 0..n {
                let bcol = &b.data[b.offset + j * b.cs..b.offset + j * b.cs + k];
                let s = dot(arow, bcol);
                let cv = &mut cd[co + i * crs + j * ccs];
                *cv = if beta == T::zero() { s } else { beta * *cv + s };
            }
        }
    } else {
        // i-j-k: dot products; same per-entry summation order as above.
        for i in 0..m {
            for j in 0..n {
                let mut s = T::zero();
                for kk in 0..k {
                    s = s + a.at(i, kk) * b.at(kk, j);
                }
                let cv = &mut cd[co + i * crs + j * ccs];
                *cv = if beta == T::zero() { s } else { beta * *cv + s };
            }
        }
    }
}

/// Dot product with eight interleaved partial sums so it vectorises.
#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ac, bc) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ar, br) = (ac.remainder(), bc.remainder());
    for (x, y) in ac.zip(bc) {
        for l in 0..8 {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (x, y) in ar.iter().zip(br) {
        s = s + *x * *y;
    }
    s
}

/// Plain matrix product of two owned matrices.
pub fn matmul<T: Real>(
    a: &Tensor2<T>,
    b: &Tensor2<T>,
    ledger: &mut FlopsLedger,
    category: FlopCategory,
) -> Result<Tensor2<T>> {
    if a.cols != b.rows {
        return Err(Error::Shape {
            op: "matmul",
            detail: alloc::format!("[{}x{}]·[{}x{}]", a.rows, a.cols, b.rows, b.cols),
        });
    }
    let mut out = Tensor2::zeros(a.rows, b.cols);
    gemm(a.view(), b.view(), T::zero(), out.view_mut(), ledger, category)?;
    Ok(out)
}

/// `aᵀ·b` without materialising the transpose.
pub fn matmul_tn<T: Real>(
    a: &Tensor2<T>,
    b: &Tensor2<T>,
    ledger: &mut FlopsLedger,
    category: FlopCategory,
) -> Result<Tensor2<T>> {
    let mut out = Tensor2::zeros(a.cols, b.cols);
    gemm(a.view().t(), b.view(), T::zero(), out.view_mut(), ledger, category)?;
    Ok(out)
}

/// `a·bᵀ` without materialising the transpose.
pub fn matmul_nt<T: Real>(
    a: &Tensor2<T>,
    b: &Tensor2<T>,
    ledger: &mut FlopsLedger,
    category: FlopCategory,
) -> Result<Tensor2<T>> {
    let mut out = Tensor2::zeros(a.rows, b.rows);
    gemm(a.view(), b.view().t(), T::zero(), out.view_mut(), ledger, category)?;
    Ok(out)
}

/// Numerically stable softmax over the first `valid` entries of `row`;
/// the remaining entries are set to zero (masked out).
pub fn softmax_prefix<T: Real>(row: &mut [T], valid: usize) {
    let (live, masked) = row.split_at_mut(valid);
    masked.iter_mut().for_each(|v| *v = T::zero());
    if live.is_empty() {
        return;
    }
    let max = live.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut sum = 0.0f64;
    for v in live.iter_mut() {
        *v = (*v - max).exp();
        sum += v.as_f64();
    }
    let inv = T::from_f64(1.0 / sum);
    live.iter_mut().for_each(|v| *v = *v * inv);
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Real>(a: &Tensor2<T>) -> Tensor2<T> {
    let mut out = a.clone();
    let cols = out.cols;
    for r in 0..out.rows {
        softmax_prefix(out.row_mut(r), cols);
    }
    out
}

/// Per-row statistics kept by [`layer_norm`] for the backward pass.
#[derive(Clone, Debug)]
pub struct NormStats<T> {
    /// `(x - mean) / sqrt(var + eps)` before gain and bias.
    pub normalized: Tensor2<T>,
    pub inv_std: Vec<T>,
}

/// Layer normalisation over columns, statistics accumulated in `f64`.
pub fn layer_norm<T: Real>(a: &Tensor2<T>, gain: &[T], bias: &[T], eps: f64) -> Result<Tensor2<T>> {
    Ok(layer_norm_with_stats(a, gain, bias, eps)?.0)
}

pub fn layer_norm_with_stats<T: Real>(
    a: &Tensor2<T>,
    gain: &[T],
    bias: &[T],
    eps: f64,
) -> Result<(Tensor2<T>, NormStats<T>)> {
    if gain.len() != a.cols || bias.len() != a.cols {
        return Err(Error::Shape {
            op: "layer_norm",
            detail: alloc::format!("gain {} / bias {} for {} columns", gain.len(), bias.len(), a.cols),
        });
    }
    let cols = a.cols;
    let mut out = Tensor2::zeros(a.rows, cols);
    let mut normalized = Tensor2::zeros(a.rows, cols);
    let mut inv_std = Vec::with_capacity(a.rows);
    for r in 0..a.rows {
        let row = a.row(r);
        let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / cols as f64;
        let rstd = 1.0 / num_traits::Float::sqrt(var + eps);
        inv_std.push(T::from_f64(rstd));
        for (c, v) in row.iter().enumerate() {
            let nv = T::from_f64((v.as_f64() - mean) * rstd);
            normalized.data[r * cols + c] = nv;
            out.data[r * cols + c] = nv * gain[c] + bias[c];
        }
    }
    Ok((out, NormStats { normalized, inv_std }))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// GELU, tanh approximation.
#[inline]
pub fn gelu<T: Real>(x: T) -> T {
    let u = x.as_f64();
    let t = num_traits::Float::tanh(GELU_C * (u + GELU_K * u * u * u));
    T::from_f64(0.5 * u * (1.0 + t))
}

/// Derivative of [`gelu`].
#[inline]
pub fn gelu_grad<T: Real>(x: T) -> T {
    let u = x.as_f64();
    let t = num_traits::Float::tanh(GELU_C * (u + GELU_K * u * u * u));
    let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * u * u);
    T::from_f64(0.5 * (1.0 + t) + 0.5 * u * dt)
}

pub fn gelu_in_place<T: Real>(a: &mut Tensor2<T>) {
    a.data.iter_mut().for_each(|v| *v = gelu(*v));
}

/// `log Σ exp(row)` computed in `f64`.
pub fn log_sum_exp<T: Real>(row: &[T]) -> f64 {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
    if !max.is_finite() {
        return max;
    }
    let s: f64 = row.iter().map(|v| num_traits::Float::exp(v.as_f64() - max)).sum();
    max + num_traits::Float::ln(s)
}
