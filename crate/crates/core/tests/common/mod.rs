//! Shared test oracles, independent of the library's computation paths.
//!
//! The matrix-exponential oracle is a literal 60-term Taylor sum evaluated in
//! double-double (~31 significant digits) arithmetic, so partial-sum
//! cancellation at 1-norms up to 10 stays far below the tolerances it is
//! used to check.

#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use vkd_core::Matrix;

/// Double-double value: hi + lo with |lo| <= ulp(hi)/2.
#[derive(Debug, Clone, Copy)]
pub struct Dd {
    hi: f64,
    lo: f64,
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    let err = (a - (s - bb)) + (b - bb);
    (s, err)
}

fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let err = b - (s - a);
    (s, err)
}

fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    // fma gives the exact rounding error of the product.
    let err = a.mul_add(b, -p);
    (p, err)
}

impl Dd {
    pub const ZERO: Dd = Dd { hi: 0.0, lo: 0.0 };

    pub fn from_f64(v: f64) -> Dd {
        Dd { hi: v, lo: 0.0 }
    }

    pub fn value(self) -> f64 {
        self.hi + self.lo
    }

    pub fn add(self, other: Dd) -> Dd {
        let (s1, s2) = two_sum(self.hi, other.hi);
        let s2 = s2 + self.lo + other.lo;
        let (hi, lo) = quick_two_sum(s1, s2);
        Dd { hi, lo }
    }

    pub fn mul(self, other: Dd) -> Dd {
        let (p1, p2) = two_prod(self.hi, other.hi);
        let p2 = p2 + self.hi * other.lo + self.lo * other.hi;
        let (hi, lo) = quick_two_sum(p1, p2);
        Dd { hi, lo }
    }

    pub fn div_f64(self, d: f64) -> Dd {
        let q1 = self.hi / d;
        let (p, e) = two_prod(q1, d);
        // remainder = self - q1*d, evaluated in dd
        let (r1, r2) = two_sum(self.hi, -p);
        let r2 = r2 + self.lo - e;
        let q2 = (r1 + r2) / d;
        let (hi, lo) = quick_two_sum(q1, q2);
        Dd { hi, lo }
    }
}

fn dd_matmul(a: &[Dd], b: &[Dd], n: usize) -> Vec<Dd> {
    let mut out = vec![Dd::ZERO; n * n];
    for i in 0..n {
        for l in 0..n {
            let a_il = a[i * n + l];
            for j in 0..n {
                out[i * n + j] = out[i * n + j].add(a_il.mul(b[l * n + j]));
            }
        }
    }
    out
}

/// 60-term Taylor sum for exp(w) in double-double arithmetic.
pub fn taylor_expm_dd(w: &Matrix, terms: usize) -> Matrix {
    taylor_expm_dd_scaled(w, terms, 0)
}

/// Taylor oracle with argument reduction: exp(w) = exp(w / 2^s)^(2^s), the
/// inner sum and the squarings both in double-double. Needed when the plain
/// series does not converge in `terms` terms (1-norms well above ~10).
pub fn taylor_expm_dd_scaled(w: &Matrix, terms: usize, squarings: u32) -> Matrix {
    assert!(w.is_square());
    let n = w.rows();
    let scale = 0.5f64.powi(squarings as i32);
    let w_dd: Vec<Dd> = w.data().iter().map(|&v| Dd::from_f64(v * scale)).collect();

    // sum = I, term = I
    let mut sum = vec![Dd::ZERO; n * n];
    let mut term = vec![Dd::ZERO; n * n];
    for i in 0..n {
        sum[i * n + i] = Dd::from_f64(1.0);
        term[i * n + i] = Dd::from_f64(1.0);
    }
    for k in 1..=terms {
        // term <- term * w / k
        let mut next = dd_matmul(&term, &w_dd, n);
        for v in next.iter_mut() {
            *v = v.div_f64(k as f64);
        }
        for (s, t) in sum.iter_mut().zip(&next) {
            *s = s.add(*t);
        }
        term = next;
    }
    for _ in 0..squarings {
        sum = dd_matmul(&sum, &sum, n);
    }
    Matrix::from_vec(n, n, sum.into_iter().map(Dd::value).collect()).unwrap()
}

/// Random skew-symmetric matrix rescaled to the requested 1-norm.
pub fn random_skew_with_norm<R: Rng>(d: usize, one_norm: f64, rng: &mut R) -> Matrix {
    let a = Matrix::random_normal(d, d, 1.0, rng);
    let w = a.sub(&a.transpose());
    let cur = w.one_norm();
    if cur == 0.0 {
        return w;
    }
    w.scale(one_norm / cur)
}

pub fn rel_frobenius(a: &Matrix, b: &Matrix) -> f64 {
    a.sub(b).frobenius_norm() / b.frobenius_norm().max(1e-300)
}

pub fn orthogonality_residual(p: &Matrix) -> f64 {
    let gram = vkd_core::linalg::matmul_nt(p, p).unwrap();
    gram.sub(&Matrix::identity(p.rows())).frobenius_norm()
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod dd_sanity {
    use super::*;

    #[test]
    fn dd_recovers_cancellation_lost_in_f64() {
        // (1 + 1e-18) - 1 vanishes in f64 but survives in dd.
        let a = Dd::from_f64(1.0).add(Dd::from_f64(1e-18));
        let diff = a.add(Dd::from_f64(-1.0));
        assert!((diff.value() - 1e-18).abs() < 1e-30);
    }

    #[test]
    fn taylor_oracle_matches_closed_form_rotation() {
        let t = 0.3f64;
        let w = Matrix::from_rows(&[&[0.0, t], &[-t, 0.0]]);
        let e = taylor_expm_dd(&w, 60);
        assert!((e[(0, 0)] - t.cos()).abs() < 1e-15);
        assert!((e[(0, 1)] - t.sin()).abs() < 1e-15);
    }
}
