//! Teacher-feature normalization.
//!
//! Three policies: per-feature standardization over the batch (discriminative
//! tasks), a per-sample layer-norm variant, and batch whitening that enforces
//! `Z^T Z = I` on the centered features (generative tasks). All of them act
//! on the teacher branch only; no gradients ever flow through here.
//!
//! Conventions: population variance (divide by n), and whitening against the
//! raw centered Gram `z_c^T z_c` with no 1/b factor, so the decorrelation
//! condition holds for the matrix itself rather than for a covariance.

use crate::error::{Error, Result};
use crate::linalg::{inv_sqrt_psd, matmul, matmul_tn, InvSqrtMethod, Matrix};

/// Which normalization the teacher branch applies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NormalizerKind {
    None,
    Standardize { eps: f64 },
    LayerNorm { eps: f64 },
    Whiten { eps: f64, method: InvSqrtMethod },
}

impl NormalizerKind {
    pub fn label(&self) -> &'static str {
        match self {
            NormalizerKind::None => "none",
            NormalizerKind::Standardize { .. } => "standardize",
            NormalizerKind::LayerNorm { .. } => "layernorm",
            NormalizerKind::Whiten { .. } => "whiten",
        }
    }

    pub fn apply(&self, z: &Matrix) -> Result<Matrix> {
        match self {
            NormalizerKind::None => Ok(z.clone()),
            NormalizerKind::Standardize { eps } => standardize(z, *eps),
            NormalizerKind::LayerNorm { eps } => layer_norm(z, *eps),
            NormalizerKind::Whiten { eps, method } => whiten(z, *eps, *method),
        }
    }
}

/// Per-feature standardization over the batch: each column ends with mean 0
/// and population variance 1. Columns whose variance falls at or below `eps`
/// are mapped to zeros instead of being blown up by a near-zero denominator.
pub fn standardize(z: &Matrix, eps: f64) -> Result<Matrix> {
    let (b, d) = z.shape();
    if b < 2 {
        return Err(Error::Config(format!(
            "standardize: batch must be >= 2, got {b}"
        )));
    }
    if eps <= 0.0 {
        return Err(Error::Config(format!(
            "standardize: eps must be > 0, got {eps}"
        )));
    }
    let mut out = Matrix::zeros(b, d);
    for c in 0..d {
        let mut mean = 0.0;
        for r in 0..b {
            mean += z[(r, c)];
        }
        mean /= b as f64;
        let mut var = 0.0;
        for r in 0..b {
            let v = z[(r, c)] - mean;
            var += v * v;
        }
        var /= b as f64;
        if var > eps {
            let inv = 1.0 / var.sqrt();
            for r in 0..b {
                out[(r, c)] = (z[(r, c)] - mean) * inv;
            }
        }
        // else: column stays zero
    }
    Ok(out)
}

/// Per-sample normalization: each row ends with mean 0 and population
/// variance 1, with the same eps guard as [`standardize`]. Mirrors per-token
/// layer norm.
pub fn layer_norm(z: &Matrix, eps: f64) -> Result<Matrix> {
    let (b, d) = z.shape();
    if d < 2 {
        return Err(Error::Config(format!(
            "layer_norm: row width must be >= 2, got {d}"
        )));
    }
    if eps <= 0.0 {
        return Err(Error::Config(format!(
            "layer_norm: eps must be > 0, got {eps}"
        )));
    }
    let mut out = Matrix::zeros(b, d);
    for r in 0..b {
        let row = z.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let mut var = 0.0;
        for &v in row {
            let u = v - mean;
            var += u * u;
        }
        var /= d as f64;
        if var > eps {
            let inv = 1.0 / var.sqrt();
            let orow = out.row_mut(r);
            for (o, &v) in orow.iter_mut().zip(row) {
                *o = (v - mean) * inv;
            }
        }
    }
    Ok(out)
}

/// Batch whitening: center columns, then right-multiply by
/// `(z_c^T z_c + eps I)^(-1/2)`. For b > d and full column rank the result
/// satisfies `z_w^T z_w = I` up to the eps regularization, i.e. unit-length,
/// pairwise-orthogonal feature columns.
pub fn whiten(z: &Matrix, eps: f64, method: InvSqrtMethod) -> Result<Matrix> {
    let z_c = center_columns(z);
    let gram = matmul_tn(&z_c, &z_c)?;
    let root = inv_sqrt_psd(&gram, eps, method)?;
    matmul(&z_c, &root)
}

fn center_columns(z: &Matrix) -> Matrix {
    let (b, d) = z.shape();
    let mut means = vec![0.0; d];
    for r in 0..b {
        for c in 0..d {
            means[c] += z[(r, c)];
        }
    }
    for m in &mut means {
        *m /= b as f64;
    }
    Matrix::from_fn(b, d, |r, c| z[(r, c)] - means[c])
}
