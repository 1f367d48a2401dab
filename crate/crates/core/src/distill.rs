//! The distillation objective and its diagnostic instruments.
//!
//! Alongside the L2 training loss this module carries the structural
//! measurements the projector is judged by: the batch Gram (kernel) matrix,
//! the relative kernel-preservation error under a projection, the euclidean
//! cross-correlation matrix between student and teacher feature columns, and
//! the diversity lower bound that whitened targets induce on the pairwise
//! column loss.

use crate::error::{Error, Result};
use crate::linalg::{matmul, matmul_nt, Matrix};

/// Batch kernel matrix K = z z^T. Computed with symmetric accumulation: the
/// upper triangle is mirrored, so K is exactly symmetric.
pub fn gram(z: &Matrix) -> Matrix {
    let b = z.rows();
    let mut k = Matrix::zeros(b, b);
    for i in 0..b {
        let ri = z.row(i);
        for j in i..b {
            let rj = z.row(j);
            let mut s = 0.0;
            for c in 0..z.cols() {
                s += ri[c] * rj[c];
            }
            k[(i, j)] = s;
            k[(j, i)] = s;
        }
    }
    k
}

/// Mean-reduced L2 distillation loss between projected student features and
/// (normalized) teacher features, plus its gradient w.r.t. the projection:
///
/// ```text
///   loss = sum((z_proj - z_t)^2) / b,    grad = 2 (z_proj - z_t) / b
/// ```
pub fn l2_distill_loss(z_proj: &Matrix, z_t: &Matrix) -> Result<(f64, Matrix)> {
    if z_proj.shape() != z_t.shape() {
        return Err(Error::Shape(format!(
            "l2_distill_loss: {}x{} vs {}x{}",
            z_proj.rows(),
            z_proj.cols(),
            z_t.rows(),
            z_t.cols()
        )));
    }
    let b = z_proj.rows() as f64;
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(z_proj.rows(), z_proj.cols());
    for r in 0..z_proj.rows() {
        for c in 0..z_proj.cols() {
            let d = z_proj[(r, c)] - z_t[(r, c)];
            loss += d * d;
            grad[(r, c)] = 2.0 * d / b;
        }
    }
    Ok((loss / b, grad))
}

/// Euclidean cross-correlation matrix: `C[i][j]` is the distance between
/// student feature column j and teacher feature column i. Not symmetric in
/// general; its diagonal vanishes when the two feature sets coincide.
pub fn cross_corr(z_s: &Matrix, z_t: &Matrix) -> Result<Matrix> {
    if z_s.shape() != z_t.shape() {
        return Err(Error::Shape(format!(
            "cross_corr: {}x{} vs {}x{}",
            z_s.rows(),
            z_s.cols(),
            z_t.rows(),
            z_t.cols()
        )));
    }
    let (b, d) = z_s.shape();
    let mut c = Matrix::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            let mut s = 0.0;
            for r in 0..b {
                let diff = z_s[(r, j)] - z_t[(r, i)];
                s += diff * diff;
            }
            c[(i, j)] = s.sqrt();
        }
    }
    Ok(c)
}

/// Which relaxation the diversity bound was evaluated with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundForm {
    /// Every off-diagonal pair distance is >= 1, so the fully relaxed bound
    /// `const - lambda * sum C^2` applies.
    Relaxed,
    /// Some pair distance fell below 1; the bound uses the Cauchy-Schwarz
    /// stage before the sqrt relaxation instead.
    PreRelaxation,
}

impl BoundForm {
    pub fn label(&self) -> &'static str {
        match self {
            BoundForm::Relaxed => "relaxed",
            BoundForm::PreRelaxation => "pre_relaxation",
        }
    }
}

/// Report produced by [`diversity_bound`].
#[derive(Debug, Clone)]
pub struct DiversityBoundReport {
    /// Pairwise column loss: sum over ordered pairs i != j of
    /// `||z_s[:,j] - z_t[:,i]||^2` (raw sum, no batch reduction).
    pub loss: f64,
    /// Active lower bound the `holds` flag was evaluated against.
    pub bound: f64,
    /// The constant of the relaxed bound, 2 d (d - 1).
    pub const_term: f64,
    /// The multiplier of the relaxed bound (the derivation yields exactly 3).
    pub lambda: f64,
    pub holds: bool,
    pub form: BoundForm,
}

impl DiversityBoundReport {
    /// One CSV row: `loss,bound,const,lambda,holds,form`.
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            fmt_f64(self.loss),
            fmt_f64(self.bound),
            fmt_f64(self.const_term),
            fmt_f64(self.lambda),
            self.holds,
            self.form.label()
        )
    }

    pub fn csv_header() -> &'static str {
        "loss,bound,const,lambda,holds,form"
    }
}

fn fmt_f64(v: f64) -> String {
    format!("{v:.9e}")
}

const BOUND_TOL: f64 = 1e-8;
const WHITENING_TOL: f64 = 1e-2;

/// Evaluate the whitening diversity bound on one batch.
///
/// Requires `z_t_whitened` to satisfy the whitening condition within 1e-2
/// (Gram residual in Frobenius norm); otherwise the bound has no guarantee
/// and a precondition error naming the residual is returned.
///
/// The relaxed bound `2 d (d-1) - 3 sum C^2` needs every pair distance to be
/// at least 1 for its final sqrt-to-square relaxation. When a pair violates
/// that, the report falls back to the pre-relaxation Cauchy-Schwarz bound
/// `sum [C^2 + 2 - 2 sqrt(C^2 ||v||^2)]` (with v the actual column cross
/// terms) and flags which form was used.
pub fn diversity_bound(z_s: &Matrix, z_t_whitened: &Matrix) -> Result<DiversityBoundReport> {
    if z_s.shape() != z_t_whitened.shape() {
        return Err(Error::Shape(format!(
            "diversity_bound: {}x{} vs {}x{}",
            z_s.rows(),
            z_s.cols(),
            z_t_whitened.rows(),
            z_t_whitened.cols()
        )));
    }
    let (b, d) = z_s.shape();
    if d < 2 {
        return Err(Error::Config(
            "diversity_bound: needs at least 2 feature columns".into(),
        ));
    }
    let gram_t = crate::linalg::matmul_tn(z_t_whitened, z_t_whitened)?;
    let resid = gram_t.sub(&Matrix::identity(d)).frobenius_norm();
    if resid > WHITENING_TOL {
        return Err(Error::Precondition(format!(
            "diversity_bound: teacher features not whitened (Gram residual {resid:.3e} > {WHITENING_TOL:e})"
        )));
    }

    let c = cross_corr(z_s, z_t_whitened)?;
    let mut sum_c2 = 0.0;
    let mut min_c = f64::INFINITY;
    for i in 0..d {
        for j in 0..d {
            if i != j {
                sum_c2 += c[(i, j)] * c[(i, j)];
                min_c = min_c.min(c[(i, j)]);
            }
        }
    }
    let loss = sum_c2;
    let const_term = 2.0 * d as f64 * (d as f64 - 1.0);
    let lambda = 3.0;

    let (bound, form) = if min_c >= 1.0 {
        (const_term - lambda * sum_c2, BoundForm::Relaxed)
    } else {
        // Pre-relaxation stage: per ordered pair,
        // C^2 + 2 - 2 sqrt(C^2 * ||z_t[:,j] + z_t[:,i]||^2).
        let mut bound = 0.0;
        for i in 0..d {
            for j in 0..d {
                if i == j {
                    continue;
                }
                let mut v2 = 0.0;
                for r in 0..b {
                    let v = z_t_whitened[(r, j)] + z_t_whitened[(r, i)];
                    v2 += v * v;
                }
                let c2 = c[(i, j)] * c[(i, j)];
                bound += c2 + 2.0 - 2.0 * (c2 * v2).sqrt();
            }
        }
        (bound, BoundForm::PreRelaxation)
    };

    Ok(DiversityBoundReport {
        loss,
        bound,
        const_term,
        lambda,
        holds: loss >= bound - BOUND_TOL,
        form,
    })
}

/// Relative Gram distortion introduced by a projection:
/// `||(zp)(zp)^T - z z^T||_F / ||z z^T||_F`.
pub fn kernel_preservation_error(z: &Matrix, p: &Matrix) -> Result<f64> {
    if z.cols() != p.rows() {
        return Err(Error::Shape(format!(
            "kernel_preservation_error: features {}x{} vs projection {}x{}",
            z.rows(),
            z.cols(),
            p.rows(),
            p.cols()
        )));
    }
    let projected = matmul(z, p)?;
    kernel_preservation_error_mapped(z, &projected)
}

/// Same measurement for projectors that are maps rather than matrices: the
/// Gram of `mapped` is compared against the Gram of `z`.
pub fn kernel_preservation_error_mapped(z: &Matrix, mapped: &Matrix) -> Result<f64> {
    if z.rows() != mapped.rows() {
        return Err(Error::Shape(format!(
            "kernel_preservation_error: batch {} vs {}",
            z.rows(),
            mapped.rows()
        )));
    }
    let before = matmul_nt(z, z)?;
    let after = matmul_nt(mapped, mapped)?;
    let denom = before.frobenius_norm();
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok(after.sub(&before).frobenius_norm() / denom)
}
