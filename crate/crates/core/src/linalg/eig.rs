//! Symmetric eigendecomposition via cyclic Jacobi rotations.
//!
//! Jacobi is slower than tridiagonalization but its eigenvectors are
//! orthonormal to machine precision, which is what the whitening and SVD
//! checks downstream lean on. Inputs are symmetrized as (S + S^T)/2 before
//! decomposition.

use super::{add_flops, Matrix};
use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 60;

/// Result of [`sym_eig`].
///
/// Satisfies `V diag(lambda) V^T = S` and `V^T V = I` within tight tolerance;
/// eigenvalues ascending. The sign of each eigenvector is fixed so that its
/// largest-magnitude entry (first such index on ties) is positive.
#[derive(Debug, Clone)]
pub struct SymEig {
    /// Eigenvalues in ascending order.
    pub eigenvalues: Vec<f64>,
    /// Orthonormal eigenvectors as columns, ordered like `eigenvalues`.
    pub eigenvectors: Matrix,
}

/// Eigendecomposition of a symmetric matrix.
pub fn sym_eig(s: &Matrix) -> Result<SymEig> {
    if !s.is_square() {
        return Err(Error::Shape(format!(
            "sym_eig: matrix is {}x{}",
            s.rows(),
            s.cols()
        )));
    }
    let n = s.rows();
    if n == 0 {
        return Ok(SymEig {
            eigenvalues: vec![],
            eigenvectors: Matrix::zeros(0, 0),
        });
    }

    let mut a = s.symmetrize();
    let mut v = Matrix::identity(n);
    let scale = a.frobenius_norm().max(1.0);

    let mut converged = false;
    for _sweep in 0..MAX_SWEEPS {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[(p, q)] * a[(p, q)];
            }
        }
        if (2.0 * off).sqrt() <= 1e-14 * scale {
            converged = true;
            break;
        }
        for p in 0..n - 1 {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                add_flops(26 * n as u64);
                let tau = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let sn = t * c;

                let app = a[(p, p)];
                let aqq = a[(q, q)];
                a[(p, p)] = app - t * apq;
                a[(q, q)] = aqq + t * apq;
                a[(p, q)] = 0.0;
                a[(q, p)] = 0.0;
                for k in 0..n {
                    if k != p && k != q {
                        let akp = a[(k, p)];
                        let akq = a[(k, q)];
                        let new_p = c * akp - sn * akq;
                        let new_q = sn * akp + c * akq;
                        a[(k, p)] = new_p;
                        a[(p, k)] = new_p;
                        a[(k, q)] = new_q;
                        a[(q, k)] = new_q;
                    }
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - sn * vkq;
                    v[(k, q)] = sn * vkp + c * vkq;
                }
            }
        }
    }
    if !converged {
        // One last check: the final sweep may have finished the job.
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[(p, q)] * a[(p, q)];
            }
        }
        if (2.0 * off).sqrt() > 1e-14 * scale {
            return Err(Error::Numeric(format!(
                "sym_eig: no convergence in {MAX_SWEEPS} sweeps (off-diagonal {:.3e})",
                (2.0 * off).sqrt()
            )));
        }
    }

    // Sort ascending; ties keep the lower original index first.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(i, i)].partial_cmp(&a[(j, j)]).unwrap().then(i.cmp(&j)));

    let mut eigenvalues = Vec::with_capacity(n);
    let mut eigenvectors = Matrix::zeros(n, n);
    for (new_col, &old_col) in order.iter().enumerate() {
        eigenvalues.push(a[(old_col, old_col)]);
        // Deterministic sign: largest-|entry|, first index on ties, positive.
        let mut best_row = 0;
        let mut best_abs = -1.0;
        for r in 0..n {
            let va = v[(r, old_col)].abs();
            if va > best_abs {
                best_abs = va;
                best_row = r;
            }
        }
        let flip = if v[(best_row, old_col)] < 0.0 {
            -1.0
        } else {
            1.0
        };
        for r in 0..n {
            eigenvectors[(r, new_col)] = flip * v[(r, old_col)];
        }
    }

    Ok(SymEig {
        eigenvalues,
        eigenvectors,
    })
}
