//! Desk-scale differentiable networks.
//!
//! Teacher and student are plain MLPs with hand-written forward/backward.
//! The feature tap sits directly before the classifier: `forward` returns the
//! penultimate activation alongside the logits, and `backward` accepts a
//! second upstream gradient injected at that feature node so the distillation
//! branch and the task loss can both flow into the same parameters.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::{matmul, matmul_nt, matmul_tn, Matrix};

/// Pointwise nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    /// tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
    Gelu,
    Tanh,
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

impl Activation {
    pub fn apply(&self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Gelu => {
                let u = GELU_C * (x + GELU_A * x * x * x);
                0.5 * x * (1.0 + u.tanh())
            }
            Activation::Tanh => x.tanh(),
        }
    }

    pub fn derivative(&self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => {
                let u = GELU_C * (x + GELU_A * x * x * x);
                let t = u.tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Gelu => "gelu",
            Activation::Tanh => "tanh",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "gelu" => Ok(Activation::Gelu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::Config(format!("unknown activation '{other}'"))),
        }
    }
}

/// Feed-forward network. `layer_dims` chains input through hidden layers to
/// the class logits; the activation is applied after every layer except the
/// last. The feature tap is the (post-activation) output of the
/// second-to-last layer.
#[derive(Debug, Clone)]
pub struct Mlp {
    layer_dims: Vec<usize>,
    weights: Vec<Matrix>,
    biases: Vec<Vec<f64>>,
    activation: Activation,
    version: u64,
}

/// Intermediates retained by [`Mlp::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct Cache {
    inputs: Vec<Matrix>,
    preacts: Vec<Matrix>,
    batch: usize,
    version: u64,
}

/// Parameter gradients, aligned with [`Mlp::params_mut`].
#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub d_weights: Vec<Matrix>,
    pub d_biases: Vec<Vec<f64>>,
}

impl MlpGrads {
    pub fn max_abs(&self) -> f64 {
        let mut m = 0.0f64;
        for w in &self.d_weights {
            m = m.max(w.max_abs());
        }
        for b in &self.d_biases {
            for v in b {
                m = m.max(v.abs());
            }
        }
        m
    }
}

impl Mlp {
    /// He-initialized network; biases start at zero.
    pub fn init<R: Rng>(layer_dims: &[usize], activation: Activation, rng: &mut R) -> Result<Self> {
        if layer_dims.len() < 2 {
            return Err(Error::Config(
                "network needs at least [input, output] dims".into(),
            ));
        }
        if layer_dims.contains(&0) {
            return Err(Error::Config("zero-width layer".into()));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in layer_dims.windows(2) {
            let std = (2.0 / w[0] as f64).sqrt();
            weights.push(Matrix::random_normal(w[0], w[1], std, rng));
            biases.push(vec![0.0; w[1]]);
        }
        Ok(Mlp {
            layer_dims: layer_dims.to_vec(),
            weights,
            biases,
            activation,
            version: 0,
        })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    /// Width of the feature tap (input width of the classifier layer).
    pub fn feature_dim(&self) -> usize {
        self.layer_dims[self.layer_dims.len() - 2]
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    /// Forward pass: penultimate activation, logits, and the backward cache.
    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, Matrix, Cache)> {
        if x.cols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "forward: input is {}x{}, expected width {}",
                x.rows(),
                x.cols(),
                self.input_dim()
            )));
        }
        let n_layers = self.weights.len();
        let mut inputs = Vec::with_capacity(n_layers);
        let mut preacts = Vec::with_capacity(n_layers);
        let mut cur = x.clone();
        for l in 0..n_layers {
            inputs.push(cur.clone());
            let mut pre = matmul(&cur, &self.weights[l])?;
            for r in 0..pre.rows() {
                let row = pre.row_mut(r);
                for (v, b) in row.iter_mut().zip(&self.biases[l]) {
                    *v += b;
                }
            }
            if l < n_layers - 1 {
                cur = Matrix::from_fn(pre.rows(), pre.cols(), |r, c| {
                    self.activation.apply(pre[(r, c)])
                });
            } else {
                cur = pre.clone();
            }
            preacts.push(pre);
        }
        let features = if n_layers >= 2 {
            inputs[n_layers - 1].clone()
        } else {
            x.clone()
        };
        let cache = Cache {
            inputs,
            preacts,
            batch: x.rows(),
            version: self.version,
        };
        Ok((features, cur, cache))
    }

    /// Backward pass with two upstream gradients: `grad_logits` from the task
    /// loss and `grad_features` injected at the feature tap. The two sum at
    /// the feature node.
    pub fn backward(
        &self,
        cache: &Cache,
        grad_logits: &Matrix,
        grad_features: &Matrix,
    ) -> Result<MlpGrads> {
        if cache.version != self.version || cache.inputs.len() != self.weights.len() {
            return Err(Error::Precondition(
                "backward: cache is stale (parameters changed since forward)".into(),
            ));
        }
        if grad_logits.rows() != cache.batch || grad_logits.cols() != self.output_dim() {
            return Err(Error::Shape(format!(
                "backward: grad_logits is {}x{}, expected {}x{}",
                grad_logits.rows(),
                grad_logits.cols(),
                cache.batch,
                self.output_dim()
            )));
        }
        if grad_features.rows() != cache.batch || grad_features.cols() != self.feature_dim() {
            return Err(Error::Shape(format!(
                "backward: grad_features is {}x{}, expected {}x{}",
                grad_features.rows(),
                grad_features.cols(),
                cache.batch,
                self.feature_dim()
            )));
        }
        let n_layers = self.weights.len();
        let mut d_weights = vec![Matrix::zeros(0, 0); n_layers];
        let mut d_biases = vec![Vec::new(); n_layers];

        let mut g = grad_logits.clone();
        for l in (0..n_layers).rev() {
            let g_pre = if l == n_layers - 1 {
                g.clone()
            } else {
                let mut gp = g.clone();
                let pre = &cache.preacts[l];
                for r in 0..gp.rows() {
                    for c in 0..gp.cols() {
                        gp[(r, c)] *= self.activation.derivative(pre[(r, c)]);
                    }
                }
                gp
            };
            d_weights[l] = matmul_tn(&cache.inputs[l], &g_pre)?;
            d_biases[l] = column_sums(&g_pre);
            if l > 0 {
                g = matmul_nt(&g_pre, &self.weights[l])?;
                if l == n_layers - 1 {
                    g.add_assign(grad_features);
                }
            }
        }
        Ok(MlpGrads {
            d_weights,
            d_biases,
        })
    }

    /// Mutable parameter views in a fixed order (W0, b0, W1, b1, ...).
    /// Bumps the version, invalidating outstanding caches.
    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.version += 1;
        let mut out = Vec::with_capacity(2 * self.weights.len());
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            out.push(w.data_mut());
            out.push(b.as_mut_slice());
        }
        out
    }

    /// Parameters flattened into the `params_mut` order, for byte-level
    /// comparisons and checksums.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            for v in w.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for v in b {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
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

/// Mean softmax cross-entropy with log-sum-exp stabilization.
/// Returns the loss and its gradient (softmax - onehot)/b w.r.t. the logits.
pub fn softmax_ce(logits: &Matrix, labels: &[u32]) -> Result<(f64, Matrix)> {
    let (b, k) = logits.shape();
    if labels.len() != b {
        return Err(Error::Shape(format!(
            "softmax_ce: {} labels for batch {b}",
            labels.len()
        )));
    }
    for (i, &y) in labels.iter().enumerate() {
        if y as usize >= k {
            return Err(Error::Data(format!(
                "softmax_ce: label {y} at row {i} outside [0, {k})"
            )));
        }
    }
    let mut grad = Matrix::zeros(b, k);
    let mut loss = 0.0;
    for r in 0..b {
        let row = logits.row(r);
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        let mut sum = 0.0;
        for &v in row {
            sum += (v - m).exp();
        }
        let lse = m + sum.ln();
        loss += lse - row[labels[r] as usize];
        for c in 0..k {
            let p = (row[c] - lse).exp();
            grad[(r, c)] = p / b as f64;
        }
        grad[(r, labels[r] as usize)] -= 1.0 / b as f64;
    }
    Ok((loss / b as f64, grad))
}

/// Synthetic Gaussian-mixture classification task.
///
/// Class means are drawn once from N(0, I) and rescaled (upward only) so
/// every pair sits at least 6 cluster_spread apart, which keeps a
/// nearest-mean classifier near-perfect and a trained teacher strong.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticTask {
    pub n_classes: usize,
    pub input_dim: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
    pub cluster_spread: f64,
}

impl Default for SyntheticTask {
    fn default() -> Self {
        SyntheticTask {
            n_classes: 5,
            input_dim: 16,
            n_train: 512,
            n_test: 512,
            seed: 7,
            cluster_spread: 1.0,
        }
    }
}

/// A labelled batch of inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSet {
    pub x: Matrix,
    pub labels: Vec<u32>,
}

impl DataSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Generate (train, test) splits. Deterministic: identical (seed, params)
/// produce identical bytes. Labels are assigned round-robin, so class counts
/// are balanced within one sample.
pub fn gen_synthetic(task: &SyntheticTask) -> Result<(DataSet, DataSet)> {
    use rand::SeedableRng;
    if task.n_classes < 2 {
        return Err(Error::Config("task needs at least 2 classes".into()));
    }
    if task.input_dim == 0 || task.n_train == 0 || task.n_test == 0 {
        return Err(Error::Config("task dimensions must be positive".into()));
    }
    if task.cluster_spread < 0.0 {
        return Err(Error::Config("cluster_spread must be >= 0".into()));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(task.seed);
    let mut means = Matrix::random_normal(task.n_classes, task.input_dim, 1.0, &mut rng);

    let mut min_dist = f64::INFINITY;
    for i in 0..task.n_classes {
        for j in (i + 1)..task.n_classes {
            let mut d2 = 0.0;
            for c in 0..task.input_dim {
                let d = means[(i, c)] - means[(j, c)];
                d2 += d * d;
            }
            min_dist = min_dist.min(d2.sqrt());
        }
    }
    if min_dist <= 0.0 {
        return Err(Error::Numeric("degenerate class means".into()));
    }
    let required = 6.0 * task.cluster_spread;
    if min_dist < required {
        means = means.scale(required / min_dist);
    }

    let mut draw = |n: usize| -> DataSet {
        let mut x = Matrix::zeros(n, task.input_dim);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let label = (i % task.n_classes) as u32;
            labels.push(label);
            for c in 0..task.input_dim {
                let g: f64 = rng.sample(StandardNormal);
                x[(i, c)] = means[(label as usize, c)] + task.cluster_spread * g;
            }
        }
        DataSet { x, labels }
    };
    let train = draw(task.n_train);
    let test = draw(task.n_test);
    train.x.validate_finite("synthetic train data")?;
    test.x.validate_finite("synthetic test data")?;
    Ok((train, test))
}

/// Average a stack of `t` token matrices (each b x d) along the token axis.
pub fn mean_pool(tokens: &[Matrix]) -> Result<Matrix> {
    let Some(first) = tokens.first() else {
        return Err(Error::Shape("mean_pool: empty token stack (t = 0)".into()));
    };
    let shape = first.shape();
    let mut acc = Matrix::zeros(shape.0, shape.1);
    for (i, t) in tokens.iter().enumerate() {
        if t.shape() != shape {
            return Err(Error::Shape(format!(
                "mean_pool: token {i} is {}x{}, expected {}x{}",
                t.rows(),
                t.cols(),
                shape.0,
                shape.1
            )));
        }
        acc.add_assign(t);
    }
    Ok(acc.scale(1.0 / tokens.len() as f64))
}
