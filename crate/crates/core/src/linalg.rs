//! Dense symmetric positive definite solves.
//!
//! Both regressor trainers reduce to normal equations `(G + r·I) X = B`
//! with `G` a Gram matrix of feature vectors. The factorization is a
//! blocked right-looking Cholesky; trailing updates go through `ndarray`
//! matrix multiplication, which carries the bulk of the flops.

use crate::error::{Error, Result};
use ndarray::{s, Array2, ArrayView1};

const BLOCK: usize = 96;

/// Lower-triangular Cholesky factor of an SPD matrix.
pub struct CholeskyFactor {
    l: Array2<f64>,
}

/// Factorize `a = L·Lᵀ` in place. Fails with [`Error::SingularSystem`]
/// if a pivot is not strictly positive.
pub fn factorize(mut a: Array2<f64>) -> Result<CholeskyFactor> {
    let n = a.nrows();
    debug_assert_eq!(n, a.ncols());
    let mut j = 0;
    while j < n {
        let nb = BLOCK.min(n - j);
        // Diagonal block, unblocked. Columns left of j were already
        // folded in by earlier trailing updates.
        for k in j..j + nb {
            let mut d = a[[k, k]];
            for t in j..k {
                d -= a[[k, t]] * a[[k, t]];
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::SingularSystem);
            }
            let d = d.sqrt();
            a[[k, k]] = d;
            for r in (k + 1)..(j + nb) {
                let mut s = a[[r, k]];
                for t in j..k {
                    s -= a[[r, t]] * a[[k, t]];
                }
                a[[r, k]] = s / d;
            }
        }
        let panel_top = j + nb;
        if panel_top < n {
            // Panel solve: A[panel_top.., j..j+nb] <- that block · L_jj⁻ᵀ.
            for r in panel_top..n {
                for k in j..j + nb {
                    let mut s = a[[r, k]];
                    for t in j..k {
                        s -= a[[r, t]] * a[[k, t]];
                    }
                    a[[r, k]] = s / a[[k, k]];
                }
            }
            // Trailing update: A[p.., p..] -= panel · panelᵀ, one block
            // column at a time so memory stays bounded.
            let panel = a.slice(s![panel_top.., j..j + nb]).to_owned();
            let mut cb = panel_top;
            while cb < n {
                let cw = BLOCK.min(n - cb);
                let u = panel.slice(s![cb - panel_top.., ..]);
                let v = panel.slice(s![cb - panel_top..cb - panel_top + cw, ..]);
                let prod = u.dot(&v.t());
                let mut target = a.slice_mut(s![cb.., cb..cb + cw]);
                target -= &prod;
                cb += cw;
            }
        }
        j += nb;
    }
    Ok(CholeskyFactor { l: a })
}

impl CholeskyFactor {
    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    /// Solve `A x = b` for a single right-hand side.
    pub fn solve_vec(&self, b: ArrayView1<f64>) -> Array2<f64> {
        let n = self.dim();
        debug_assert_eq!(b.len(), n);
        let mut rhs = Array2::zeros((1, n));
        rhs.row_mut(0).assign(&b);
        self.solve_rows(&rhs)
    }

    /// Solve `A xᵢ = bᵢ` for every row `bᵢ` of `rows`; the output has the
    /// same row layout.
    pub fn solve_rows(&self, rows: &Array2<f64>) -> Array2<f64> {
        let n = self.dim();
        let k = rows.nrows();
        debug_assert_eq!(rows.ncols(), n);
        // Work array is n×k so the innermost axpy runs over contiguous
        // right-hand sides.
        let mut y = rows.t().as_standard_layout().into_owned();
        let ys = y.as_slice_mut().expect("standard layout");
        let ls = self.l.as_slice().expect("standard layout");
        // Forward: L y = b.
        for r in 0..n {
            let (done, rest) = ys.split_at_mut(r * k);
            let yr = &mut rest[..k];
            for t in 0..r {
                let c = ls[r * n + t];
                if c != 0.0 {
                    let yt = &done[t * k..t * k + k];
                    for (a, b) in yr.iter_mut().zip(yt) {
                        *a -= c * b;
                    }
                }
            }
            let d = ls[r * n + r];
            for a in yr.iter_mut() {
                *a /= d;
            }
        }
        // Backward: Lᵀ x = y.
        for r in (0..n).rev() {
            let (head, tail) = ys.split_at_mut((r + 1) * k);
            let yr = &mut head[r * k..];
            for t in r + 1..n {
                let c = ls[t * n + r];
                if c != 0.0 {
                    let yt = &tail[(t - r - 1) * k..(t - r - 1) * k + k];
                    for (a, b) in yr.iter_mut().zip(yt) {
                        *a -= c * b;
                    }
                }
            }
            let d = ls[r * n + r];
            for a in yr.iter_mut() {
                *a /= d;
            }
        }
        y.t().as_standard_layout().into_owned()
    }
}

/// Solve the ridge normal equations `(gram + ridge_abs·I) Xᵀ = rhsᵀ` where
/// `rhs` holds one right-hand side per row. Returns the solutions as rows.
pub fn ridge_solve_rows(
    mut gram: Array2<f64>,
    rhs: &Array2<f64>,
    ridge_abs: f64,
) -> Result<Array2<f64>> {
    debug_assert!(ridge_abs >= 0.0);
    if ridge_abs > 0.0 {
        for i in 0..gram.nrows() {
            gram[[i, i]] += ridge_abs;
        }
    }
    let factor = factorize(gram)?;
    Ok(factor.solve_rows(rhs))
}

/// Fit the linear map `M` (targets x features) minimizing
/// `sum_i ||y_i - M x_i||^2 + r·||M||_F^2` over sample rows of `x` and `y`.
/// The effective ridge is `ridge_rel` scaled by `trace(XᵀX)/F` so the knob
/// is dimensionless; `ridge_rel = 0` requests a plain least-squares solve
/// and fails on singular systems.
pub fn ridge_regression(x: &Array2<f64>, y: &Array2<f64>, ridge_rel: f64) -> Result<Array2<f64>> {
    if x.nrows() == 0 {
        return Err(Error::EmptyInput("regression needs at least one sample"));
    }
    if x.nrows() != y.nrows() {
        return Err(Error::DimensionMismatch {
            context: "regression samples vs targets",
            expected: x.nrows(),
            actual: y.nrows(),
        });
    }
    let f = x.ncols();
    let gram = x.t().dot(x);
    let trace: f64 = gram.diag().sum();
    let ridge_abs = ridge_rel * trace / f as f64;
    let rhs = y.t().dot(x);
    ridge_solve_rows(gram, &rhs, ridge_abs)
}
