//! Projector families for feature distillation.
//!
//! The main act is the orthogonal projector: an unconstrained square
//! parameter A is antisymmetrized to W = A - A^T, mapped onto the rotation
//! group by the matrix exponential (or a Cayley transform), and truncated to
//! its first `d_s` rows. The result has orthonormal rows for every value of
//! A, so gradient descent on A moves along the Stiefel manifold without any
//! projection step, and the student's batch Gram matrix survives the
//! projection untouched.
//!
//! The baselines it is compared against (a free linear map, a one-hidden-layer
//! MLP, an ensemble of linear maps, and a handcrafted truncated-SVD teacher
//! target) live here too, each with forward and gradient contracts.

use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{self, matmul, matmul_nt, matmul_tn, sym_eig, Matrix};
use crate::nets::Activation;

/// Which surjection onto the orthogonal group backs the projector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OrthoMethod {
    /// Matrix exponential of the skew parameter (Padé evaluated).
    Expm,
    /// Cayley transform (I - W)(I + W)^-1.
    Cayley,
}

impl OrthoMethod {
    pub fn label(&self) -> &'static str {
        match self {
            OrthoMethod::Expm => "expm",
            OrthoMethod::Cayley => "cayley",
        }
    }
}

/// Trainable parameter of the orthogonal projector.
///
/// `a` is unconstrained; only its antisymmetric part W = a - a^T reaches the
/// manifold map. Requires `d_s <= d_t`: a student wider than its teacher has
/// no defined truncation semantics here.
#[derive(Debug, Clone)]
pub struct SkewParam {
    a: Matrix,
    d_s: usize,
    d_t: usize,
}

impl SkewParam {
    pub fn new(a: Matrix, d_s: usize, d_t: usize) -> Result<Self> {
        if d_s > d_t {
            return Err(Error::Config(format!(
                "student wider than teacher unsupported (d_s = {d_s} > d_t = {d_t})"
            )));
        }
        if !a.is_square() || a.rows() != d_t {
            return Err(Error::Shape(format!(
                "skew parameter must be {d_t}x{d_t}, got {}x{}",
                a.rows(),
                a.cols()
            )));
        }
        Ok(SkewParam { a, d_s, d_t })
    }

    /// Near-identity initialization: entries of A drawn from N(0, 0.01^2) so
    /// early training resembles truncated-identity matching.
    pub fn init<R: Rng>(d_s: usize, d_t: usize, rng: &mut R) -> Result<Self> {
        SkewParam::new(Matrix::random_normal(d_t, d_t, 0.01, rng), d_s, d_t)
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn a_mut(&mut self) -> &mut Matrix {
        &mut self.a
    }

    pub fn d_s(&self) -> usize {
        self.d_s
    }

    pub fn d_t(&self) -> usize {
        self.d_t
    }
}

/// Antisymmetrize: W = a - a^T. Exact by construction (each entry is one
/// floating-point subtraction), so W + W^T is the zero bit pattern.
pub fn skew(a: &Matrix) -> Result<Matrix> {
    if !a.is_square() {
        return Err(Error::Shape(format!(
            "skew: matrix is {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    let n = a.rows();
    Ok(Matrix::from_fn(n, n, |r, c| a[(r, c)] - a[(c, r)]))
}

/// Materialize the projection matrix P in R^{d_s x d_t}: the first `d_s`
/// rows of exp(W) (or of the Cayley image of W).
pub fn build_projection(p: &SkewParam, method: OrthoMethod) -> Result<Matrix> {
    let w = skew(&p.a)?;
    let full = match method {
        OrthoMethod::Expm => linalg::expm(&w)?,
        OrthoMethod::Cayley => cayley(&w)?,
    };
    Ok(full.top_rows(p.d_s))
}

/// Cayley image (I - W)(I + W)^-1 of a skew matrix. For real skew W the
/// eigenvalues of I + W sit on 1 + iR, so the solve cannot hit a singular
/// matrix.
fn cayley(w: &Matrix) -> Result<Matrix> {
    let n = w.rows();
    let eye = Matrix::identity(n);
    let f = eye.sub(w); // I - W, equal to (I + W)^T
    let xt = linalg::solve(&f, &f.transpose())?;
    Ok(xt.transpose())
}

/// Apply the projector: `z_s * p`.
pub fn project(z_s: &Matrix, p: &Matrix) -> Result<Matrix> {
    matmul(z_s, p)
}

/// Gradient of a scalar loss with respect to the skew parameter `a`, given
/// the loss gradient `upstream` with respect to P.
///
/// The upstream block is zero-padded to the full d_t x d_t cotangent G; the
/// exponential is pulled back through the adjoint identity
/// `<L(W, E), G> = <E, L(W^T, G)>`, and the antisymmetrization contributes
/// `grad_a = grad_W - grad_W^T`. The Cayley path uses the closed-form adjoint
/// of its rational map instead.
pub fn grad_orthogonal(p: &SkewParam, method: OrthoMethod, upstream: &Matrix) -> Result<Matrix> {
    if upstream.rows() != p.d_s || upstream.cols() != p.d_t {
        return Err(Error::Shape(format!(
            "grad_orthogonal: upstream is {}x{}, expected {}x{}",
            upstream.rows(),
            upstream.cols(),
            p.d_s,
            p.d_t
        )));
    }
    let d_t = p.d_t;
    let mut g = Matrix::zeros(d_t, d_t);
    for r in 0..p.d_s {
        for c in 0..d_t {
            g[(r, c)] = upstream[(r, c)];
        }
    }
    let w = skew(&p.a)?;
    let grad_w = match method {
        OrthoMethod::Expm => {
            let (_, l) = linalg::expm_frechet(&w.transpose(), &g)?;
            l
        }
        OrthoMethod::Cayley => {
            // P_full = 2(I+W)^-1 - I, so dP = -2 (I+W)^-1 dW (I+W)^-1 and the
            // adjoint is grad_W = -2 (I-W)^-1 G (I-W)^-1.
            let n = w.rows();
            let f = Matrix::identity(n).sub(&w); // (I + W)^T
            let k = linalg::solve(&f, &g)?;
            let kt = linalg::solve(&f.transpose(), &k.transpose())?;
            kt.transpose().scale(-2.0)
        }
    };
    Ok(grad_w.sub(&grad_w.transpose()))
}

/// Handcrafted distillation target: teacher features projected onto their
/// top-`rank` right-singular directions, computed through the
/// eigendecomposition of the centered Gram `z_c^T z_c`. Columns are ordered
/// by descending singular value. This is the target used when the loss lives
/// in the student's (smaller) space.
pub fn svd_teacher_target(z_t: &Matrix, rank: usize) -> Result<Matrix> {
    let (b, d) = z_t.shape();
    if rank > b.min(d) {
        return Err(Error::Config(format!(
            "svd_teacher_target: rank {rank} exceeds min(batch {b}, dim {d})"
        )));
    }
    let z_c = center_columns(z_t);
    let s = matmul_tn(&z_c, &z_c)?;
    let e = sym_eig(&s)?;
    // Ascending eigenvalues: the top-`rank` directions are the last columns.
    let mut vk = Matrix::zeros(d, rank);
    for j in 0..rank {
        let src = d - 1 - j;
        for r in 0..d {
            vk[(r, j)] = e.eigenvectors[(r, src)];
        }
    }
    matmul(&z_c, &vk)
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

/// Which projector family a run trains.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ProjectorKind {
    Orthogonal {
        method: OrthoMethod,
    },
    Linear,
    Mlp {
        hidden: usize,
        activation: Activation,
    },
    Ensemble {
        n: usize,
    },
    SvdTarget {
        rank: usize,
    },
}

impl ProjectorKind {
    pub fn label(&self) -> &'static str {
        match self {
            ProjectorKind::Orthogonal { .. } => "orthogonal",
            ProjectorKind::Linear => "linear",
            ProjectorKind::Mlp { .. } => "mlp",
            ProjectorKind::Ensemble { .. } => "ensemble",
            ProjectorKind::SvdTarget { .. } => "svd_target",
        }
    }
}

/// Projector family plus its dimensions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectorSpec {
    pub kind: ProjectorKind,
    pub d_s: usize,
    pub d_t: usize,
}

/// Trainable state for one projector.
#[derive(Debug, Clone)]
pub enum ProjectorState {
    Orthogonal {
        param: SkewParam,
        method: OrthoMethod,
    },
    Linear {
        p: Matrix,
    },
    Mlp {
        w1: Matrix,
        b1: Vec<f64>,
        w2: Matrix,
        b2: Vec<f64>,
        activation: Activation,
    },
    Ensemble {
        mats: Vec<Matrix>,
    },
    /// Parameter-free; the distillation target is rebuilt from the teacher
    /// batch and matched in the student's space.
    SvdTarget {
        rank: usize,
    },
}

/// Forward cache so the (expensive) projection matrix is built once per step.
#[derive(Debug, Clone)]
pub enum ProjCache {
    Dense { p: Matrix },
    Mlp { pre: Matrix, hid: Matrix },
}

/// Parameter gradients in the same order as [`ProjectorState::params_mut`].
pub type ProjGrads = Vec<Vec<f64>>;

impl ProjectorState {
    pub fn init<R: Rng>(spec: &ProjectorSpec, rng: &mut R) -> Result<Self> {
        if spec.d_s > spec.d_t {
            return Err(Error::Config(format!(
                "student wider than teacher unsupported (d_s = {} > d_t = {})",
                spec.d_s, spec.d_t
            )));
        }
        let linear_std = 1.0 / (spec.d_s as f64).sqrt();
        Ok(match spec.kind {
            ProjectorKind::Orthogonal { method } => ProjectorState::Orthogonal {
                param: SkewParam::init(spec.d_s, spec.d_t, rng)?,
                method,
            },
            ProjectorKind::Linear => ProjectorState::Linear {
                p: Matrix::random_normal(spec.d_s, spec.d_t, linear_std, rng),
            },
            ProjectorKind::Mlp { hidden, activation } => {
                let h = if hidden == 0 { spec.d_t } else { hidden };
                ProjectorState::Mlp {
                    w1: Matrix::random_normal(spec.d_s, h, (2.0 / spec.d_s as f64).sqrt(), rng),
                    b1: vec![0.0; h],
                    w2: Matrix::random_normal(h, spec.d_t, (2.0 / h as f64).sqrt(), rng),
                    b2: vec![0.0; spec.d_t],
                    activation,
                }
            }
            ProjectorKind::Ensemble { n } => {
                if n == 0 {
                    return Err(Error::Config("ensemble size must be >= 1".into()));
                }
                let mats = (0..n)
                    .map(|_| Matrix::random_normal(spec.d_s, spec.d_t, linear_std, rng))
                    .collect();
                ProjectorState::Ensemble { mats }
            }
            ProjectorKind::SvdTarget { rank } => {
                let r = if rank == 0 { spec.d_s } else { rank };
                ProjectorState::SvdTarget { rank: r }
            }
        })
    }

    /// The projection as one matrix, where the family admits one.
    pub fn effective_matrix(&self) -> Result<Option<Matrix>> {
        Ok(match self {
            ProjectorState::Orthogonal { param, method } => Some(build_projection(param, *method)?),
            ProjectorState::Linear { p } => Some(p.clone()),
            ProjectorState::Ensemble { mats } => {
                let mut acc = Matrix::zeros(mats[0].rows(), mats[0].cols());
                for m in mats {
                    acc.add_assign(m);
                }
                Some(acc.scale(1.0 / mats.len() as f64))
            }
            ProjectorState::Mlp { .. } | ProjectorState::SvdTarget { .. } => None,
        })
    }

    /// Map student features into the teacher space. Not defined for the
    /// SVD-target family, whose loss lives in the student space.
    pub fn forward(&self, z_s: &Matrix) -> Result<(Matrix, ProjCache)> {
        match self {
            ProjectorState::Orthogonal { param, method } => {
                let p = build_projection(param, *method)?;
                let out = project(z_s, &p)?;
                Ok((out, ProjCache::Dense { p }))
            }
            ProjectorState::Linear { p } => {
                let out = project(z_s, p)?;
                Ok((out, ProjCache::Dense { p: p.clone() }))
            }
            ProjectorState::Ensemble { .. } => {
                let p = self
                    .effective_matrix()?
                    .expect("ensemble has an effective matrix");
                let out = project(z_s, &p)?;
                Ok((out, ProjCache::Dense { p }))
            }
            ProjectorState::Mlp {
                w1,
                b1,
                w2,
                b2,
                activation,
            } => {
                let mut pre = matmul(z_s, w1)?;
                for r in 0..pre.rows() {
                    let row = pre.row_mut(r);
                    for (v, b) in row.iter_mut().zip(b1) {
                        *v += b;
                    }
                }
                let hid =
                    Matrix::from_fn(pre.rows(), pre.cols(), |r, c| activation.apply(pre[(r, c)]));
                let mut out = matmul(&hid, w2)?;
                for r in 0..out.rows() {
                    let row = out.row_mut(r);
                    for (v, b) in row.iter_mut().zip(b2) {
                        *v += b;
                    }
                }
                Ok((out, ProjCache::Mlp { pre, hid }))
            }
            ProjectorState::SvdTarget { .. } => Err(Error::Config(
                "svd_target projector has no student-side forward map".into(),
            )),
        }
    }

    /// Backpropagate `grad_out` (gradient w.r.t. the projected features).
    /// Returns parameter gradients (ordered like [`Self::params_mut`]) and the
    /// gradient w.r.t. the student features.
    pub fn backward(
        &self,
        cache: &ProjCache,
        z_s: &Matrix,
        grad_out: &Matrix,
    ) -> Result<(ProjGrads, Matrix)> {
        match (self, cache) {
            (ProjectorState::Orthogonal { param, method }, ProjCache::Dense { p }) => {
                let upstream = matmul_tn(z_s, grad_out)?; // dL/dP
                let grad_a = grad_orthogonal(param, *method, &upstream)?;
                let grad_z = matmul_nt(grad_out, p)?;
                Ok((vec![grad_a.data().to_vec()], grad_z))
            }
            (ProjectorState::Linear { .. }, ProjCache::Dense { p }) => {
                let grad_p = matmul_tn(z_s, grad_out)?;
                let grad_z = matmul_nt(grad_out, p)?;
                Ok((vec![grad_p.data().to_vec()], grad_z))
            }
            (ProjectorState::Ensemble { mats }, ProjCache::Dense { p }) => {
                let n = mats.len() as f64;
                let shared = matmul_tn(z_s, grad_out)?.scale(1.0 / n);
                let grad_z = matmul_nt(grad_out, p)?;
                let grads = mats.iter().map(|_| shared.data().to_vec()).collect();
                Ok((grads, grad_z))
            }
            (
                ProjectorState::Mlp {
                    w1, w2, activation, ..
                },
                ProjCache::Mlp { pre, hid },
            ) => {
                let grad_w2 = matmul_tn(hid, grad_out)?;
                let grad_b2 = column_sums(grad_out);
                let mut grad_hid = matmul_nt(grad_out, w2)?;
                for r in 0..grad_hid.rows() {
                    for c in 0..grad_hid.cols() {
                        grad_hid[(r, c)] *= activation.derivative(pre[(r, c)]);
                    }
                }
                let grad_w1 = matmul_tn(z_s, &grad_hid)?;
                let grad_b1 = column_sums(&grad_hid);
                let grad_z = matmul_nt(&grad_hid, w1)?;
                Ok((
                    vec![
                        grad_w1.data().to_vec(),
                        grad_b1,
                        grad_w2.data().to_vec(),
                        grad_b2,
                    ],
                    grad_z,
                ))
            }
            (ProjectorState::SvdTarget { .. }, _) => Err(Error::Config(
                "svd_target projector has no parameters to backpropagate".into(),
            )),
            _ => Err(Error::Precondition(
                "projector cache does not match projector kind".into(),
            )),
        }
    }

    /// Mutable views of every trainable tensor, in a fixed documented order.
    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            ProjectorState::Orthogonal { param, .. } => vec![param.a_mut().data_mut()],
            ProjectorState::Linear { p } => vec![p.data_mut()],
            ProjectorState::Ensemble { mats } => mats.iter_mut().map(|m| m.data_mut()).collect(),
            ProjectorState::Mlp { w1, b1, w2, b2, .. } => vec![
                w1.data_mut(),
                b1.as_mut_slice(),
                w2.data_mut(),
                b2.as_mut_slice(),
            ],
            ProjectorState::SvdTarget { .. } => vec![],
        }
    }
}

fn column_sums(m: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for r in 0..m.rows() {
        for (c, v) in m.row(r).iter().enumerate() {
            out[c] += v;
        }
    }
    out
}
