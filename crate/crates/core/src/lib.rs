//! Orthogonal-projection feature distillation.
//!
//! A reference implementation of feature distillation through a
//! Stiefel-manifold projector: a skew-symmetric parameter is mapped through
//! the matrix exponential (or a Cayley transform) onto the orthogonal group,
//! truncated to the student width, and trained by gradient descent alongside
//! the student. Teacher features can be standardized, layer-normed, or
//! whitened before matching. Everything is real-64, single-threaded by
//! default, and bit-deterministic under a fixed seed.
//!
//! Module map:
//! - [`linalg`]: dense kernels (products, symmetric eigendecomposition, the
//!   Padé matrix exponential and its Fréchet derivative, PSD inverse roots).
//! - [`projector`]: the orthogonal projector and the baseline families it is
//!   compared against (linear, MLP, ensemble, truncated-SVD target).
//! - [`normalizer`]: teacher-side standardization / layer norm / whitening.
//! - [`distill`]: the L2 objective, Gram diagnostics, the cross-correlation
//!   matrix and the whitening diversity bound.
//! - [`nets`]: small MLPs with manual backprop plus synthetic data.
//! - [`trainer`]: deterministic teacher/distillation loops, the ablation
//!   sweep and the projector timing bench.
//! - [`io`]: the bit-exact feature-dump format, config parsing, CSV output.

pub mod distill;
pub mod error;
pub mod io;
pub mod linalg;
pub mod nets;
pub mod normalizer;
pub mod projector;
pub mod trainer;

pub use error::{Error, Result};
pub use linalg::{Matrix, SymEig};
