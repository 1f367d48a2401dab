//! Linear solves via LU with partial pivoting.

use super::{add_flops, Matrix};
use crate::error::{Error, Result};

/// Solve `A X = B` for `X` by Gaussian elimination with partial pivoting.
///
/// Pivot selection takes the first strictly-largest magnitude, so the
/// elimination order is deterministic.
pub fn solve(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if !a.is_square() {
        return Err(Error::Shape(format!(
            "solve: coefficient matrix is {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    if a.rows() != b.rows() {
        return Err(Error::Shape(format!(
            "solve: {}x{} incompatible with rhs {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let n = a.rows();
    let m = b.cols();
    add_flops((2 * n * n * n / 3 + 2 * n * n * m) as u64);

    let mut lu = a.clone();
    let mut x = b.clone();

    for col in 0..n {
        let mut max_val = lu[(col, col)].abs();
        let mut max_row = col;
        for row in (col + 1)..n {
            let v = lu[(row, col)].abs();
            if v > max_val {
                max_val = v;
                max_row = row;
            }
        }
        if max_val < 1e-300 {
            return Err(Error::Numeric("solve: singular coefficient matrix".into()));
        }
        if max_row != col {
            for j in 0..n {
                let t = lu[(col, j)];
                lu[(col, j)] = lu[(max_row, j)];
                lu[(max_row, j)] = t;
            }
            for j in 0..m {
                let t = x[(col, j)];
                x[(col, j)] = x[(max_row, j)];
                x[(max_row, j)] = t;
            }
        }
        let pivot = lu[(col, col)];
        for row in (col + 1)..n {
            let factor = lu[(row, col)] / pivot;
            if factor == 0.0 {
                continue;
            }
            lu[(row, col)] = 0.0;
            for j in (col + 1)..n {
                let v = lu[(col, j)];
                lu[(row, j)] -= factor * v;
            }
            for j in 0..m {
                let v = x[(col, j)];
                x[(row, j)] -= factor * v;
            }
        }
    }

    for col in (0..n).rev() {
        let pivot = lu[(col, col)];
        for j in 0..m {
            let mut s = x[(col, j)];
            for k in (col + 1)..n {
                s -= lu[(col, k)] * x[(k, j)];
            }
            x[(col, j)] = s / pivot;
        }
    }
    Ok(x)
}

/// Determinant via the same pivoted elimination.
pub fn det(a: &Matrix) -> Result<f64> {
    if !a.is_square() {
        return Err(Error::Shape(format!(
            "det: matrix is {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    let n = a.rows();
    let mut lu = a.clone();
    let mut sign = 1.0f64;
    for col in 0..n {
        let mut max_val = lu[(col, col)].abs();
        let mut max_row = col;
        for row in (col + 1)..n {
            let v = lu[(row, col)].abs();
            if v > max_val {
                max_val = v;
                max_row = row;
            }
        }
        if max_val == 0.0 {
            return Ok(0.0);
        }
        if max_row != col {
            sign = -sign;
            for j in 0..n {
                let t = lu[(col, j)];
                lu[(col, j)] = lu[(max_row, j)];
                lu[(max_row, j)] = t;
            }
        }
        let pivot = lu[(col, col)];
        for row in (col + 1)..n {
            let factor = lu[(row, col)] / pivot;
            for j in col..n {
                let v = lu[(col, j)];
                lu[(row, j)] -= factor * v;
            }
        }
    }
    let mut d = sign;
    for i in 0..n {
        d *= lu[(i, i)];
    }
    Ok(d)
}
