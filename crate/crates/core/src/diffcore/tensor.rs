use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major array with shape metadata.
///
/// Gradients are not stored here; they live in the [`Tape`](super::Tape)
/// node that owns the value during a differentiable computation.
#[derive(Clone, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<S>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {:?} needs {} values, got {}", shape, numel, data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, S::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: S) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: S) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros([n, n]);
        for i in 0..n {
            t.data[i * n + i] = S::one();
        }
        t
    }

    /// Builds a 2-D tensor from nested rows of `f64` literals.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::shape("from_rows", "ragged rows"));
        }
        let data = rows.iter().flat_map(|row| row.iter().map(|&v| S::of(v))).collect();
        Self::new([r, c], data)
    }

    pub fn from_f64(shape: impl Into<Vec<usize>>, values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| S::of(v)).collect())
    }

    pub fn random_uniform<R: Rng + ?Sized>(
        shape: impl Into<Vec<usize>>,
        low: f64,
        high: f64,
        rng: &mut R,
    ) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| S::of(rng.random_range(low..high))).collect();
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {:?}", self.shape, shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Element of a 2-D tensor.
    pub fn at2(&self, i: usize, j: usize) -> S {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.shape[1] + j]
    }

    pub fn set2(&mut self, i: usize, j: usize, v: S) {
        debug_assert_eq!(self.rank(), 2);
        let c = self.shape[1];
        self.data[i * c + j] = v;
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    /// Row slice of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[S] {
        let c = self.shape[1];
        &self.data[i * c..(i + 1) * c]
    }

    pub fn transpose2(&self) -> Self {
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = Self::zeros([c, r]);
        for i in 0..r {
            for j in 0..c {
                out.data[j * r + i] = self.data[i * c + j];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> S {
        self.data.iter().fold(S::zero(), |m, v| m.max(v.abs()))
    }

    /// Largest absolute entrywise difference; shapes must agree.
    pub fn max_abs_diff(&self, other: &Self) -> S {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(S::zero(), |m, (a, b)| m.max((*a - *b).abs()))
    }

    pub fn sum(&self) -> S {
        self.data.iter().copied().sum()
    }

    /// Converts to another scalar type.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::of(v.as_f64())).collect(),
        }
    }
}

impl<S: fmt::Debug> fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        write!(f, "Tensor{:?} [", self.shape)?;
        for (i, v) in self.data.iter().take(PREVIEW).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v:?}")?;
        }
        if self.data.len() > PREVIEW {
            write!(f, ", ...")?;
        }
        write!(f, "]")
    }
}

/// `orow += Σ_p coef[p] · rows[p]`, four source rows per pass over `orow`.
#[inline]
fn accumulate_rows<S: Scalar>(orow: &mut [S], coef: &[S], rows: &[S], n: usize) {
    let k = coef.len();
    let mut p = 0;
    while p + 4 <= k {
        let (c0, c1, c2, c3) = (coef[p], coef[p + 1], coef[p + 2], coef[p + 3]);
        let r0 = &rows[p * n..(p + 1) * n];
        let r1 = &rows[(p + 1) * n..(p + 2) * n];
        let r2 = &rows[(p + 2) * n..(p + 3) * n];
        let r3 = &rows[(p + 3) * n..(p + 4) * n];
        for j in 0..n {
            orow[j] += c0 * r0[j] + c1 * r1[j] + c2 * r2[j] + c3 * r3[j];
        }
        p += 4;
    }
    while p < k {
        let c = coef[p];
        if c != S::zero() {
            axpy(c, &rows[p * n..(p + 1) * n], orow);
        }
        p += 1;
    }
}

/// `a · b` for row-major `m×k` and `k×n` slices, accumulated into `out` (`m×n`).
pub(crate) fn gemm_acc<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    gemm_acc_strided(a, k, b, out, m, k, n);
}

/// [`gemm_acc`] where row `i` of `a` starts at `i * lda`; rows may overlap.
pub(crate) fn gemm_acc_strided<S: Scalar>(a: &[S], lda: usize, b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    let b = &b[..k * n];
    for i in 0..m {
        accumulate_rows(&mut out[i * n..(i + 1) * n], &a[i * lda..i * lda + k], b, n);
    }
}

/// `g · bᵀ` accumulated into `out` (`m×k`), with `g` `m×n` and `b` `k×n`.
pub(crate) fn gemm_nt_acc<S: Scalar>(g: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    gemm_nt_acc_strided(g, b, out, k, m, k, n);
}

/// [`gemm_nt_acc`] where row `i` of `out` starts at `i * ldo`; overlapping
/// rows accumulate.
pub(crate) fn gemm_nt_acc_strided<S: Scalar>(g: &[S], b: &[S], out: &mut [S], ldo: usize, m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let orow = &mut out[i * ldo..i * ldo + k];
        let mut p = 0;
        while p + 4 <= k {
            let r0 = &b[p * n..(p + 1) * n];
            let r1 = &b[(p + 1) * n..(p + 2) * n];
            let r2 = &b[(p + 2) * n..(p + 3) * n];
            let r3 = &b[(p + 3) * n..(p + 4) * n];
            let mut acc = [[S::zero(); 4]; 4];
            let mut j = 0;
            while j + 4 <= n {
                for l in 0..4 {
                    let gv = grow[j + l];
                    acc[0][l] += gv * r0[j + l];
                    acc[1][l] += gv * r1[j + l];
                    acc[2][l] += gv * r2[j + l];
                    acc[3][l] += gv * r3[j + l];
                }
                j += 4;
            }
            for (q, row) in [r0, r1, r2, r3].into_iter().enumerate() {
                let mut s = (acc[q][0] + acc[q][2]) + (acc[q][1] + acc[q][3]);
                for jj in j..n {
                    s += grow[jj] * row[jj];
                }
                orow[p + q] += s;
            }
            p += 4;
        }
        while p < k {
            orow[p] += dot(grow, &b[p * n..(p + 1) * n]);
            p += 1;
        }
    }
}

/// `aᵀ · g` accumulated into `out` (`k×n`), with `a` `m×k` and `g` `m×n`.
pub(crate) fn gemm_tn_acc<S: Scalar>(a: &[S], g: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    gemm_tn_acc_strided(a, k, g, out, m, k, n);
}

/// [`gemm_tn_acc`] where row `i` of `a` starts at `i * lda`.
pub(crate) fn gemm_tn_acc_strided<S: Scalar>(a: &[S], lda: usize, g: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    let mut i = 0;
    let mut coef = [S::zero(); 4];
    while i + 4 <= m {
        let g4 = &g[i * n..(i + 4) * n];
        for p in 0..k {
            for (l, c) in coef.iter_mut().enumerate() {
                *c = a[(i + l) * lda + p];
            }
            accumulate_rows(&mut out[p * n..(p + 1) * n], &coef, g4, n);
        }
        i += 4;
    }
    while i < m {
        let arow = &a[i * lda..i * lda + k];
        let grow = &g[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av != S::zero() {
                axpy(av, grow, &mut out[p * n..(p + 1) * n]);
            }
        }
        i += 1;
    }
}

#[inline]
pub(crate) fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    // Independent lanes let the compiler vectorize the reduction.
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut lanes = [S::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (xa, xb) in (&mut ca).zip(&mut cb) {
        for l in 0..8 {
            lanes[l] += xa[l] * xb[l];
        }
    }
    let mut acc = S::zero();
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        acc += x * y;
    }
    let pairs = [lanes[0] + lanes[4], lanes[1] + lanes[5], lanes[2] + lanes[6], lanes[3] + lanes[7]];
    acc + (pairs[0] + pairs[2]) + (pairs[1] + pairs[3])
}

#[inline]
pub(crate) fn axpy<S: Scalar>(alpha: S, x: &[S], y: &mut [S]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}
