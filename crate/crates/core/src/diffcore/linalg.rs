//! Dense symmetric positive-definite solves used by the regularized pseudoinverse.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Lower-triangular Cholesky factor of an `n×n` SPD matrix (row-major).
pub(crate) struct Cholesky<S> {
    n: usize,
    l: Vec<S>,
}

impl<S: Scalar> Cholesky<S> {
    pub(crate) fn factor(a: &[S], n: usize) -> Result<Self> {
        let mut l = vec![S::zero(); n * n];
        for j in 0..n {
            let mut d = a[j * n + j];
            for k in 0..j {
                d -= l[j * n + k] * l[j * n + k];
            }
            if !(d > S::zero()) || !d.is_finite() {
                return Err(Error::Numerical(format!(
                    "normal matrix is not positive definite at pivot {j} (pivot value {d}); {}",
                    diagnostics(a, n)
                )));
            }
            let djj = d.sqrt();
            l[j * n + j] = djj;
            for i in (j + 1)..n {
                let mut s = a[i * n + j];
                for k in 0..j {
                    s -= l[i * n + k] * l[j * n + k];
                }
                l[i * n + j] = s / djj;
            }
        }
        Ok(Self { n, l })
    }

    /// Solves `A x = b` in place.
    pub(crate) fn solve_in_place(&self, b: &mut [S]) {
        let n = self.n;
        for i in 0..n {
            let mut s = b[i];
            for k in 0..i {
                s -= self.l[i * n + k] * b[k];
            }
            b[i] = s / self.l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = b[i];
            for k in (i + 1)..n {
                s -= self.l[k * n + i] * b[k];
            }
            b[i] = s / self.l[i * n + i];
        }
    }

    pub(crate) fn inverse(&self) -> Vec<S> {
        let n = self.n;
        let mut inv = vec![S::zero(); n * n];
        let mut col = vec![S::zero(); n];
        for j in 0..n {
            col.iter_mut().for_each(|c| *c = S::zero());
            col[j] = S::one();
            self.solve_in_place(&mut col);
            for i in 0..n {
                inv[i * n + j] = col[i];
            }
        }
        // symmetrize away round-off
        for i in 0..n {
            for j in (i + 1)..n {
                let avg = (inv[i * n + j] + inv[j * n + i]) * S::of(0.5);
                inv[i * n + j] = avg;
                inv[j * n + i] = avg;
            }
        }
        inv
    }

    /// Ratio of the largest to the smallest squared Cholesky pivot, a cheap
    /// lower bound on the condition number.
    pub(crate) fn pivot_ratio(&self) -> S {
        let n = self.n;
        let (mut lo, mut hi) = (S::infinity(), S::zero());
        for i in 0..n {
            let d = self.l[i * n + i] * self.l[i * n + i];
            lo = lo.min(d);
            hi = hi.max(d);
        }
        hi / lo
    }
}

fn diagnostics<S: Scalar>(a: &[S], n: usize) -> String {
    let diag: Vec<S> = (0..n).map(|i| a[i * n + i]).collect();
    let lo = diag.iter().copied().fold(S::infinity(), S::min);
    let hi = diag.iter().copied().fold(S::neg_infinity(), S::max);
    format!("n={n}, diagonal range [{lo}, {hi}], diagonal ratio {}", hi / lo)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_of_spd() {
        let a = [4.0f64, 2.0, 2.0, 3.0];
        let inv = Cholesky::factor(&a, 2).unwrap().inverse();
        // closed form 1/8 * [[3,-2],[-2,4]]
        let want = [0.375, -0.25, -0.25, 0.5];
        for (x, y) in inv.iter().zip(want) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn indefinite_matrix_is_rejected_with_diagnostics() {
        let a = [1.0, 2.0, 2.0, 1.0];
        let err = Cholesky::factor(&a, 2).err().unwrap().to_string();
        assert!(err.contains("positive definite"));
        assert!(err.contains("diagonal range"));
    }

    #[test]
    fn pivot_ratio_of_identity_is_one() {
        let c = Cholesky::factor(&[1.0, 0.0, 0.0, 1.0], 2).unwrap();
        assert_eq!(c.pivot_ratio(), 1.0);
    }
}
