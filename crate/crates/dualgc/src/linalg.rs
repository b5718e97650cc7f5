//! Dense linear algebra kernels.
//!
//! Pure-Rust LU factorization with partial pivoting, used to evaluate the
//! resolvent in graph diffusion. Keeping the kernel in-crate avoids an
//! external BLAS/LAPACK link and lets results stay bitwise reproducible:
//! every destructive update is row-indexed, so the parallel and sequential
//! builds produce identical floating-point output.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::par;

/// LU factorization `P·A = L·U` stored compactly.
pub struct Lu {
    /// n×n matrix whose strict lower triangle holds L (unit diagonal implied)
    /// and whose upper triangle holds U.
    lu: Array2<f64>,
    /// Row permutation: pivot row chosen at each elimination step.
    perm: Vec<usize>,
}

impl Lu {
    /// Factor a square matrix. Fails on non-square input or a numerically
    /// singular pivot.
    pub fn factor(a: &Array2<f64>) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::ShapeMismatch {
                expected: format!("{n}x{n}"),
                got: format!("{}x{}", a.nrows(), a.ncols()),
            });
        }
        let mut lu = a.clone();
        let mut perm = Vec::with_capacity(n);

        for k in 0..n {
            // Partial pivot: largest |entry| in column k at or below the diagonal.
            let mut pivot = k;
            let mut best = lu[[k, k]].abs();
            for r in (k + 1)..n {
                let v = lu[[r, k]].abs();
                if v > best {
                    best = v;
                    pivot = r;
                }
            }
            if !best.is_finite() || best < 1e-300 {
                return Err(Error::InvalidParameter(format!(
                    "matrix is singular at elimination step {k}"
                )));
            }
            perm.push(pivot);
            if pivot != k {
                for c in 0..n {
                    lu.swap([k, c], [pivot, c]);
                }
            }

            let inv_piv = 1.0 / lu[[k, k]];
            for r in (k + 1)..n {
                lu[[r, k]] *= inv_piv;
            }

            // Trailing update, one row per work unit.
            let tail = n - k - 1;
            if tail == 0 {
                continue;
            }
            let pivot_row: Vec<f64> = ((k + 1)..n).map(|c| lu[[k, c]]).collect();
            let mut rows: Vec<(usize, Vec<f64>)> = ((k + 1)..n)
                .map(|r| {
                    let row: Vec<f64> = ((k + 1)..n).map(|c| lu[[r, c]]).collect();
                    (r, row)
                })
                .collect();
            let factors: Vec<f64> = ((k + 1)..n).map(|r| lu[[r, k]]).collect();
            par::for_each_indexed(&mut rows, |i, (_, row)| {
                let f = factors[i];
                for (v, p) in row.iter_mut().zip(&pivot_row) {
                    *v -= f * p;
                }
            });
            for (r, row) in rows {
                for (j, v) in row.into_iter().enumerate() {
                    lu[[r, k + 1 + j]] = v;
                }
            }
        }

        Ok(Self { lu, perm })
    }

    /// Solve `A·X = B` for X given the B columns packed in an n×m matrix.
    pub fn solve(&self, b: &Array2<f64>) -> Result<Array2<f64>> {
        let n = self.lu.nrows();
        if b.nrows() != n {
            return Err(Error::ShapeMismatch {
                expected: format!("{n} rows"),
                got: format!("{} rows", b.nrows()),
            });
        }
        let m = b.ncols();
        let mut x = b.clone();
        // Apply the row permutation.
        for (k, &p) in self.perm.iter().enumerate() {
            if p != k {
                for c in 0..m {
                    x.swap([k, c], [p, c]);
                }
            }
        }

        // Triangular solves, one right-hand-side column per work unit.
        let mut cols: Vec<Vec<f64>> = (0..m).map(|c| x.column(c).to_vec()).collect();
        let lu = &self.lu;
        par::for_each_indexed(&mut cols, |_, col| {
            // Forward: L·y = Pb (unit diagonal).
            for i in 1..n {
                let mut s = col[i];
                for j in 0..i {
                    s -= lu[[i, j]] * col[j];
                }
                col[i] = s;
            }
            // Backward: U·x = y.
            for i in (0..n).rev() {
                let mut s = col[i];
                for j in (i + 1)..n {
                    s -= lu[[i, j]] * col[j];
                }
                col[i] = s / lu[[i, i]];
            }
        });
        for (c, col) in cols.into_iter().enumerate() {
            for (r, v) in col.into_iter().enumerate() {
                x[[r, c]] = v;
            }
        }
        Ok(x)
    }
}

/// Invert a square matrix via LU.
pub fn invert(a: &Array2<f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    let lu = Lu::factor(a)?;
    lu.solve(&Array2::eye(n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn solves_small_system() {
        let a = array![[4.0, 1.0], [2.0, 3.0]];
        let b = array![[1.0], [2.0]];
        let x = Lu::factor(&a).unwrap().solve(&b).unwrap();
        // Solution of [[4,1],[2,3]] x = [1,2]: x = [0.1, 0.6]
        assert!((x[[0, 0]] - 0.1).abs() < 1e-12);
        assert!((x[[1, 0]] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn inverse_roundtrip() {
        let a = array![[2.0, 1.0, 0.0], [1.0, 3.0, 1.0], [0.0, 1.0, 2.0]];
        let inv = invert(&a).unwrap();
        let prod = a.dot(&inv);
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((prod[[i, j]] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_singular() {
        let a = array![[1.0, 2.0], [2.0, 4.0]];
        assert!(Lu::factor(&a).is_err());
    }

    #[test]
    fn needs_pivoting() {
        // Zero on the leading diagonal forces a row swap.
        let a = array![[0.0, 1.0], [1.0, 0.0]];
        let b = array![[3.0], [5.0]];
        let x = Lu::factor(&a).unwrap().solve(&b).unwrap();
        assert!((x[[0, 0]] - 5.0).abs() < 1e-12);
        assert!((x[[1, 0]] - 3.0).abs() < 1e-12);
    }
}
