//! Dense real-64 matrix kernels.
//!
//! Everything downstream (projectors, whitening, the trainer) is built on the
//! [`Matrix`] type defined here: a row-major `Vec<f64>` with explicitly fixed
//! accumulation orders so results are bit-reproducible across runs. There is
//! no internal parallelism and no reliance on hardware FMA.

mod eig;
mod expm;
mod invsqrt;
mod solve;

pub use eig::{sym_eig, SymEig};
pub use expm::{expm, expm_frechet};
pub use invsqrt::{inv_sqrt_psd, InvSqrtMethod};
pub use solve::{det, solve};

use std::cell::Cell;
use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

thread_local! {
    static FLOP_COUNT: Cell<u64> = const { Cell::new(0) };
}

/// Reset the thread-local floating-point operation counter.
pub fn reset_flop_counter() {
    FLOP_COUNT.with(|c| c.set(0));
}

/// Total floating-point operations recorded on this thread since the last
/// reset. Counts are analytic per kernel call (2mnk for a matmul, etc.), so
/// identical inputs always yield identical counts.
pub fn flop_count() -> u64 {
    FLOP_COUNT.with(|c| c.get())
}

pub(crate) fn add_flops(n: u64) {
    FLOP_COUNT.with(|c| c.set(c.get().wrapping_add(n)));
}

/// Dense real matrix, row-major.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows.min(8) {
            write!(f, "  ")?;
            for c in 0..self.cols.min(8) {
                write!(f, "{:>12.5e} ", self[(r, c)])?;
            }
            writeln!(f, "{}", if self.cols > 8 { "..." } else { "" })?;
        }
        if self.rows > 8 {
            writeln!(f, "  ...")?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    /// All-zero matrix.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Identity matrix of side `n`.
    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Build from a flat row-major vector. Fails if the length does not match.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "data length {} does not equal {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Build from nested rows (test-friendly). Panics on ragged input.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Matrix {
            rows: r,
            cols: c,
            data,
        }
    }

    /// Build entrywise from a function of (row, col).
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Matrix::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                m.data[r * cols + c] = f(r, c);
            }
        }
        m
    }

    /// Entries drawn i.i.d. from N(0, std^2), row-major draw order.
    pub fn random_normal<R: Rng>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        Matrix::from_fn(rows, cols, |_, _| {
            let g: f64 = rng.sample(StandardNormal);
            std * g
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Row `r` as a contiguous slice.
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Errors unless every entry is finite.
    pub fn validate_finite(&self, what: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Data(format!(
                "{what}: non-finite entry in {}x{} matrix",
                self.rows, self.cols
            )))
        }
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    /// Entrywise sum; panics on shape mismatch (internal use).
    pub fn add(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.shape(), other.shape(), "add: shape mismatch");
        add_flops(self.data.len() as u64);
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }

    /// Entrywise difference; panics on shape mismatch (internal use).
    pub fn sub(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.shape(), other.shape(), "sub: shape mismatch");
        add_flops(self.data.len() as u64);
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }

    pub fn scale(&self, s: f64) -> Matrix {
        add_flops(self.data.len() as u64);
        let data = self.data.iter().map(|a| a * s).collect();
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        assert_eq!(self.shape(), other.shape(), "add_assign: shape mismatch");
        add_flops(self.data.len() as u64);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Frobenius norm; accumulation in index order.
    pub fn frobenius_norm(&self) -> f64 {
        let mut s = 0.0;
        for v in &self.data {
            s += v * v;
        }
        s.sqrt()
    }

    /// Induced 1-norm: maximum absolute column sum.
    pub fn one_norm(&self) -> f64 {
        let mut best = 0.0f64;
        for c in 0..self.cols {
            let mut s = 0.0;
            for r in 0..self.rows {
                s += self.data[r * self.cols + c].abs();
            }
            best = best.max(s);
        }
        best
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// First `k` rows as a new matrix.
    pub fn top_rows(&self, k: usize) -> Matrix {
        assert!(k <= self.rows, "top_rows: k out of range");
        Matrix {
            rows: k,
            cols: self.cols,
            data: self.data[..k * self.cols].to_vec(),
        }
    }

    /// Symmetrized copy (self + self^T)/2. Panics unless square.
    pub fn symmetrize(&self) -> Matrix {
        assert!(self.is_square(), "symmetrize: matrix not square");
        let n = self.rows;
        Matrix::from_fn(n, n, |r, c| {
            0.5 * (self.data[r * n + c] + self.data[c * n + r])
        })
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

/// Matrix product `a * b`.
///
/// The loop nest is fixed (i, k, j) with the k-sum accumulated in ascending
/// order for every output entry, so results are bit-reproducible and match a
/// naive (i, j, k) triple loop exactly.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Shape(format!(
            "matmul: {}x{} incompatible with {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    add_flops(2 * (a.rows * a.cols * b.cols) as u64);
    let mut out = Matrix::zeros(a.rows, b.cols);
    let n = b.cols;
    for i in 0..a.rows {
        let arow = a.row(i);
        let orow = &mut out.data[i * n..(i + 1) * n];
        for (k, &aik) in arow.iter().enumerate() {
            let brow = &b.data[k * n..(k + 1) * n];
            for j in 0..n {
                orow[j] += aik * brow[j];
            }
        }
    }
    Ok(out)
}

/// `a * b^T` without materializing the transpose. Same accumulation order
/// guarantees as [`matmul`].
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::Shape(format!(
            "matmul_nt: {}x{} incompatible with ({}x{})^T",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    add_flops(2 * (a.rows * a.cols * b.rows) as u64);
    let mut out = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let arow = a.row(i);
        for j in 0..b.rows {
            let brow = b.row(j);
            let mut s = 0.0;
            for k in 0..a.cols {
                s += arow[k] * brow[k];
            }
            out.data[i * b.rows + j] = s;
        }
    }
    Ok(out)
}

/// `a^T * b` without materializing the transpose. Same accumulation order
/// guarantees as [`matmul`].
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(Error::Shape(format!(
            "matmul_tn: ({}x{})^T incompatible with {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    add_flops(2 * (a.cols * a.rows * b.cols) as u64);
    let mut out = Matrix::zeros(a.cols, b.cols);
    let n = b.cols;
    for k in 0..a.rows {
        let arow = a.row(k);
        let brow = b.row(k);
        for (i, &aki) in arow.iter().enumerate() {
            let orow = &mut out.data[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += aki * brow[j];
            }
        }
    }
    Ok(out)
}
