//! Deterministic training loops.
//!
//! Teacher pretraining, distillation with total loss CE + beta * L_distill,
//! a plain CE loop for the beta = 0 equivalence contract, the projector
//! ablation sweep, and the projector timing bench.
//!
//! Determinism contract: every run derives independent ChaCha streams from
//! the config seed (teacher init, teacher shuffle, student init, projector
//! init, student shuffle, probe — in that order of stream ids). Optional
//! branches draw only from their own stream, so disabling distillation never
//! shifts the draws seen by the student. Two runs with equal configs produce
//! byte-identical metrics CSVs; wall-clock timing is kept out of the
//! serialized rows for exactly that reason (the `wall_ms` column is written
//! as zero, measured timing goes to the in-memory rows and the bench).

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::distill::{
    diversity_bound, kernel_preservation_error_mapped, l2_distill_loss, DiversityBoundReport,
};
use crate::error::{Error, Result};
use crate::linalg::{flop_count, matmul_nt, reset_flop_counter, Matrix};
use crate::nets::SyntheticTask;
use crate::nets::{gen_synthetic, softmax_ce, Activation, DataSet, Mlp};
use crate::normalizer::NormalizerKind;
use crate::projector::{
    svd_teacher_target, OrthoMethod, ProjCache, ProjectorKind, ProjectorSpec, ProjectorState,
};

/// Residual ceiling the rebuilt projection must satisfy after every step.
const ORTH_GUARD: f64 = 1e-8;

// Stream ids for seed derivation.
const STREAM_TEACHER_INIT: u64 = 1;
const STREAM_TEACHER_SHUFFLE: u64 = 2;
const STREAM_STUDENT_INIT: u64 = 3;
const STREAM_PROJECTOR_INIT: u64 = 4;
const STREAM_STUDENT_SHUFFLE: u64 = 5;
const STREAM_PROBE: u64 = 6;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(
        seed ^ stream.wrapping_mul(0xa076_1d64_78bd_642f),
    ))
}

/// Optimizer family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    SgdMomentum,
    AdamW,
}

impl OptimizerKind {
    pub fn label(&self) -> &'static str {
        match self {
            OptimizerKind::SgdMomentum => "sgd_momentum",
            OptimizerKind::AdamW => "adamw",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sgd_momentum" => Ok(OptimizerKind::SgdMomentum),
            "adamw" => Ok(OptimizerKind::AdamW),
            other => Err(Error::Config(format!("unknown optimizer '{other}'"))),
        }
    }
}

/// Projector family selector, expanded into a [`ProjectorSpec`] together
/// with the auxiliary config fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProjectorFamily {
    Orthogonal,
    Linear,
    Mlp,
    Ensemble,
    SvdTarget,
}

impl ProjectorFamily {
    pub const ALL: [ProjectorFamily; 5] = [
        ProjectorFamily::Orthogonal,
        ProjectorFamily::Linear,
        ProjectorFamily::Mlp,
        ProjectorFamily::Ensemble,
        ProjectorFamily::SvdTarget,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            ProjectorFamily::Orthogonal => "orthogonal",
            ProjectorFamily::Linear => "linear",
            ProjectorFamily::Mlp => "mlp",
            ProjectorFamily::Ensemble => "ensemble",
            ProjectorFamily::SvdTarget => "svd_target",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "orthogonal" => Ok(ProjectorFamily::Orthogonal),
            "linear" => Ok(ProjectorFamily::Linear),
            "mlp" => Ok(ProjectorFamily::Mlp),
            "ensemble" => Ok(ProjectorFamily::Ensemble),
            "svd_target" => Ok(ProjectorFamily::SvdTarget),
            other => Err(Error::Config(format!("unknown projector '{other}'"))),
        }
    }
}

/// Normalizer family selector (expanded with eps / whitening backend).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormalizerFamily {
    None,
    Standardize,
    LayerNorm,
    Whiten,
}

impl NormalizerFamily {
    pub fn label(&self) -> &'static str {
        match self {
            NormalizerFamily::None => "none",
            NormalizerFamily::Standardize => "standardize",
            NormalizerFamily::LayerNorm => "layernorm",
            NormalizerFamily::Whiten => "whiten",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(NormalizerFamily::None),
            "standardize" => Ok(NormalizerFamily::Standardize),
            "layernorm" => Ok(NormalizerFamily::LayerNorm),
            "whiten" => Ok(NormalizerFamily::Whiten),
            other => Err(Error::Config(format!("unknown normalizer '{other}'"))),
        }
    }
}

/// Whitening backend selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WhitenBackend {
    Eig,
    Ns,
}

impl WhitenBackend {
    pub fn label(&self) -> &'static str {
        match self {
            WhitenBackend::Eig => "eig",
            WhitenBackend::Ns => "ns",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "eig" => Ok(WhitenBackend::Eig),
            "ns" => Ok(WhitenBackend::Ns),
            other => Err(Error::Config(format!("unknown whiten_method '{other}'"))),
        }
    }
}

/// Full experiment description. Defaults are the documented desk-scale
/// configuration; see the config-key table in the README for the file keys.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: u32,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    /// Weight of the distillation term in the total loss.
    pub beta: f64,
    pub optimizer: OptimizerKind,
    pub projector: ProjectorFamily,
    pub projector_method: OrthoMethod,
    /// Hidden width of the MLP projector; 0 means d_t.
    pub mlp_hidden: usize,
    pub mlp_activation: Activation,
    pub ensemble_n: usize,
    /// Rank of the SVD target; 0 means d_s.
    pub svd_rank: usize,
    pub d_s: usize,
    pub d_t: usize,
    pub normalizer: NormalizerFamily,
    pub whiten_method: WhitenBackend,
    pub ns_iters: u32,
    pub eps: f64,
    pub task: SyntheticTask,
    pub eval_every: u32,
    /// Activation used by the teacher and student networks.
    pub activation: Activation,
    /// Number of seeds a sweep expands to (seed, seed+1, ...).
    pub sweep_seeds: u32,
    /// Iterations per projector for the timing bench (first 3 are warmup).
    pub bench_iters: u32,
    /// Optional feature-dump paths replacing the synthetic task. Both must
    /// be set together; labels are required in the dumps.
    pub train_dump: String,
    pub test_dump: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 42,
            epochs: 50,
            batch_size: 64,
            lr: 1e-3,
            weight_decay: 0.05,
            momentum: 0.9,
            beta: 1.0,
            optimizer: OptimizerKind::AdamW,
            projector: ProjectorFamily::Orthogonal,
            projector_method: OrthoMethod::Expm,
            mlp_hidden: 0,
            mlp_activation: Activation::Relu,
            ensemble_n: 3,
            svd_rank: 0,
            d_s: 32,
            d_t: 128,
            normalizer: NormalizerFamily::Standardize,
            whiten_method: WhitenBackend::Eig,
            ns_iters: 5,
            eps: 1e-5,
            task: SyntheticTask::default(),
            eval_every: 1,
            activation: Activation::Relu,
            sweep_seeds: 1,
            bench_iters: 10,
            train_dump: String::new(),
            test_dump: String::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beta < 0.0 {
            return Err(Error::Config(format!(
                "beta must be >= 0, got {}",
                self.beta
            )));
        }
        if self.lr <= 0.0 {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size must be >= 2 (standardization precondition), got {}",
                self.batch_size
            )));
        }
        if self.eps <= 0.0 {
            return Err(Error::Config(format!("eps must be > 0, got {}", self.eps)));
        }
        if self.d_s > self.d_t {
            return Err(Error::Config(format!(
                "student wider than teacher unsupported (d_s = {} > d_t = {})",
                self.d_s, self.d_t
            )));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be >= 1".into()));
        }
        if self.ensemble_n == 0 {
            return Err(Error::Config("ensemble_n must be >= 1".into()));
        }
        if self.train_dump.is_empty() != self.test_dump.is_empty() {
            return Err(Error::Config(
                "train_dump and test_dump must be set together".into(),
            ));
        }
        Ok(())
    }

    pub fn projector_spec(&self) -> ProjectorSpec {
        let kind = match self.projector {
            ProjectorFamily::Orthogonal => ProjectorKind::Orthogonal {
                method: self.projector_method,
            },
            ProjectorFamily::Linear => ProjectorKind::Linear,
            ProjectorFamily::Mlp => ProjectorKind::Mlp {
                hidden: self.mlp_hidden,
                activation: self.mlp_activation,
            },
            ProjectorFamily::Ensemble => ProjectorKind::Ensemble { n: self.ensemble_n },
            ProjectorFamily::SvdTarget => ProjectorKind::SvdTarget {
                rank: self.svd_rank,
            },
        };
        ProjectorSpec {
            kind,
            d_s: self.d_s,
            d_t: self.d_t,
        }
    }

    pub fn normalizer_kind(&self) -> NormalizerKind {
        let method = match self.whiten_method {
            WhitenBackend::Eig => crate::linalg::InvSqrtMethod::Eig,
            WhitenBackend::Ns => crate::linalg::InvSqrtMethod::NewtonSchulz(self.ns_iters),
        };
        match self.normalizer {
            NormalizerFamily::None => NormalizerKind::None,
            NormalizerFamily::Standardize => NormalizerKind::Standardize { eps: self.eps },
            NormalizerFamily::LayerNorm => NormalizerKind::LayerNorm { eps: self.eps },
            NormalizerFamily::Whiten => NormalizerKind::Whiten {
                eps: self.eps,
                method,
            },
        }
    }

    /// Teacher architecture for data of the given width.
    pub fn teacher_dims(&self, input_dim: usize) -> Vec<usize> {
        vec![input_dim, 256, 256, self.d_t, self.task.n_classes]
    }

    /// Student architecture for data of the given width.
    pub fn student_dims(&self, input_dim: usize) -> Vec<usize> {
        vec![input_dim, 64, self.d_s, self.task.n_classes]
    }

    /// The (train, test) splits: the synthetic task by default, or feature
    /// dumps when `train_dump`/`test_dump` are set. Input width is taken
    /// from the data.
    pub fn load_data(&self) -> Result<(DataSet, DataSet)> {
        if self.train_dump.is_empty() {
            return gen_synthetic(&self.task);
        }
        let train = crate::io::read_dataset(std::path::Path::new(&self.train_dump))?;
        let test = crate::io::read_dataset(std::path::Path::new(&self.test_dump))?;
        if train.x.cols() != test.x.cols() {
            return Err(Error::Config(format!(
                "train dump width {} != test dump width {}",
                train.x.cols(),
                test.x.cols()
            )));
        }
        if train.is_empty() || test.is_empty() {
            return Err(Error::Data(
                "feature dumps must contain at least one row".into(),
            ));
        }
        for ds in [&train, &test] {
            for &l in &ds.labels {
                if l as usize >= self.task.n_classes {
                    return Err(Error::Data(format!(
                        "dump label {l} outside [0, {})",
                        self.task.n_classes
                    )));
                }
            }
        }
        Ok((train, test))
    }

    fn svd_rank_effective(&self) -> usize {
        if self.svd_rank == 0 {
            self.d_s
        } else {
            self.svd_rank
        }
    }
}

/// One logged scalar row.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: u32,
    pub train_ce: f64,
    pub distill_loss: f64,
    pub test_acc: f64,
    pub gram_err: f64,
    pub orth_err: f64,
    /// Measured mean wall-clock per training step. Carried in memory only;
    /// the CSV serialization writes 0 so identical configs produce identical
    /// bytes.
    pub wall_ms: f64,
}

impl MetricsRow {
    pub fn csv_header() -> &'static str {
        "epoch,train_ce,distill_loss,test_acc,gram_err,orth_err,wall_ms"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch,
            fmt(self.train_ce),
            fmt(self.distill_loss),
            fmt(self.test_acc),
            fmt(self.gram_err),
            fmt(self.orth_err),
            fmt(0.0)
        )
    }
}

fn fmt(v: f64) -> String {
    format!("{v:.9e}")
}

/// Per-tensor optimizer state (momentum / Adam moments).
#[derive(Debug, Clone)]
pub struct OptState {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl OptState {
    pub fn new(len: usize) -> Self {
        OptState {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// Hyperparameters consumed by [`optimizer_step`].
#[derive(Debug, Clone, Copy)]
pub struct OptHyper {
    pub lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// One update with decoupled weight decay. `t` is the 1-based step count for
/// Adam bias correction.
pub fn optimizer_step(
    kind: OptimizerKind,
    params: &mut [f64],
    grads: &[f64],
    state: &mut OptState,
    hp: &OptHyper,
    t: u64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "optimizer_step: param len {} vs grad len {} vs state len {}",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    match kind {
        OptimizerKind::SgdMomentum => {
            for i in 0..params.len() {
                state.m[i] = hp.momentum * state.m[i] + grads[i];
                params[i] -= hp.lr * state.m[i] + hp.lr * hp.weight_decay * params[i];
            }
        }
        OptimizerKind::AdamW => {
            let bc1 = 1.0 - ADAM_BETA1.powi(t as i32);
            let bc2 = 1.0 - ADAM_BETA2.powi(t as i32);
            for i in 0..params.len() {
                let g = grads[i];
                state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * g;
                state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * g * g;
                let mh = state.m[i] / bc1;
                let vh = state.v[i] / bc2;
                params[i] -= hp.lr * (mh / (vh.sqrt() + ADAM_EPS) + hp.weight_decay * params[i]);
            }
        }
    }
    Ok(())
}

struct NetOptimizer {
    states: Vec<OptState>,
    hyper: OptHyper,
    kind: OptimizerKind,
    t: u64,
}

impl NetOptimizer {
    fn for_net(net: &mut Mlp, kind: OptimizerKind, hyper: OptHyper) -> Self {
        let states = net
            .params_mut()
            .iter()
            .map(|p| OptState::new(p.len()))
            .collect();
        NetOptimizer {
            states,
            hyper,
            kind,
            t: 0,
        }
    }

    fn for_projector(proj: &mut ProjectorState, kind: OptimizerKind, hyper: OptHyper) -> Self {
        let states = proj
            .params_mut()
            .iter()
            .map(|p| OptState::new(p.len()))
            .collect();
        NetOptimizer {
            states,
            hyper,
            kind,
            t: 0,
        }
    }

    fn step(&mut self, params: Vec<&mut [f64]>, grads: &[Vec<f64>]) -> Result<()> {
        self.t += 1;
        if params.len() != grads.len() {
            return Err(Error::Shape("optimizer: tensor count mismatch".into()));
        }
        for ((p, g), s) in params.into_iter().zip(grads).zip(&mut self.states) {
            optimizer_step(self.kind, p, g, s, &self.hyper, self.t)?;
        }
        Ok(())
    }
}

fn net_grads_flat(g: &crate::nets::MlpGrads) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(2 * g.d_weights.len());
    for (w, b) in g.d_weights.iter().zip(&g.d_biases) {
        out.push(w.data().to_vec());
        out.push(b.clone());
    }
    out
}

/// Mean CE and accuracy of `net` over a dataset, evaluated in batches.
pub fn evaluate(net: &Mlp, ds: &DataSet, batch_size: usize) -> Result<(f64, f64)> {
    let n = ds.len();
    let mut correct = 0usize;
    let mut ce_sum = 0.0;
    let mut start = 0;
    while start < n {
        let end = (start + batch_size).min(n);
        let x = slice_rows(&ds.x, start, end);
        let labels = &ds.labels[start..end];
        let (_, logits, _) = net.forward(&x)?;
        let (ce, _) = softmax_ce(&logits, labels)?;
        ce_sum += ce * (end - start) as f64;
        for r in 0..(end - start) {
            let row = logits.row(r);
            let mut best = 0;
            for c in 1..row.len() {
                if row[c] > row[best] {
                    best = c;
                }
            }
            if best as u32 == labels[r] {
                correct += 1;
            }
        }
        start = end;
    }
    Ok((ce_sum / n as f64, correct as f64 / n as f64))
}

fn slice_rows(x: &Matrix, start: usize, end: usize) -> Matrix {
    Matrix::from_fn(end - start, x.cols(), |r, c| x[(start + r, c)])
}

fn gather_rows(x: &Matrix, idx: &[usize]) -> Matrix {
    Matrix::from_fn(idx.len(), x.cols(), |r, c| x[(idx[r], c)])
}

/// Train the (to-be-frozen) teacher with plain cross-entropy.
pub fn train_teacher(cfg: &TrainConfig) -> Result<(Mlp, Vec<MetricsRow>)> {
    cfg.validate()?;
    let (train, test) = cfg.load_data()?;
    let mut rng_init = stream_rng(cfg.seed, STREAM_TEACHER_INIT);
    let mut net = Mlp::init(
        &cfg.teacher_dims(train.x.cols()),
        cfg.activation,
        &mut rng_init,
    )?;
    let mut rng_shuffle = stream_rng(cfg.seed, STREAM_TEACHER_SHUFFLE);
    let hyper = OptHyper {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        momentum: cfg.momentum,
    };
    let mut opt = NetOptimizer::for_net(&mut net, cfg.optimizer, hyper);

    let mut metrics = Vec::new();
    let (_, acc0) = evaluate(&net, &test, cfg.batch_size)?;
    let (train_ce0, _) = evaluate(&net, &train, cfg.batch_size)?;
    metrics.push(MetricsRow {
        epoch: 0,
        train_ce: train_ce0,
        distill_loss: 0.0,
        test_acc: acc0,
        gram_err: 0.0,
        orth_err: 0.0,
        wall_ms: 0.0,
    });

    let mut indices: Vec<usize> = (0..train.len()).collect();
    let mut global_step = 0u64;
    for epoch in 1..=cfg.epochs {
        indices.shuffle(&mut rng_shuffle);
        let mut ce_accum = 0.0;
        let mut steps = 0u32;
        let t0 = Instant::now();
        for chunk in indices.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue; // a 1-sample tail batch breaks the normalization preconditions
            }
            global_step += 1;
            let x = gather_rows(&train.x, chunk);
            let labels: Vec<u32> = chunk.iter().map(|&i| train.labels[i]).collect();
            let (_, logits, cache) = net.forward(&x)?;
            let (ce, grad_logits) = softmax_ce(&logits, &labels)?;
            if !ce.is_finite() {
                return Err(Error::Numeric(format!(
                    "teacher loss diverged at step {global_step}"
                )));
            }
            let grad_feat = Matrix::zeros(x.rows(), net.feature_dim());
            let grads = net.backward(&cache, &grad_logits, &grad_feat)?;
            opt.step(net.params_mut(), &net_grads_flat(&grads))?;
            ce_accum += ce;
            steps += 1;
        }
        if epoch % cfg.eval_every == 0 || epoch == cfg.epochs {
            let wall_ms = t0.elapsed().as_secs_f64() * 1e3 / steps.max(1) as f64;
            let (_, acc) = evaluate(&net, &test, cfg.batch_size)?;
            metrics.push(MetricsRow {
                epoch,
                train_ce: ce_accum / steps.max(1) as f64,
                distill_loss: 0.0,
                test_acc: acc,
                gram_err: 0.0,
                orth_err: 0.0,
                wall_ms,
            });
        }
    }
    Ok((net, metrics))
}

/// Everything a distillation run produces.
#[derive(Debug, Clone)]
pub struct DistillOutput {
    pub student: Mlp,
    pub metrics: Vec<MetricsRow>,
    /// Diversity-bound reports per logged epoch (whiten normalizer only;
    /// emitted when the probe batch satisfies the bound's precondition).
    pub diversity: Vec<(u32, DiversityBoundReport)>,
}

/// Distill `teacher` into a fresh student. The teacher is only read.
pub fn distill(cfg: &TrainConfig, teacher: &Mlp) -> Result<DistillOutput> {
    run_student(cfg, teacher, true)
}

/// Plain CE training of the same student under the same RNG policy, with the
/// same diagnostics logged. `distill` with beta = 0 must match this loop
/// byte for byte; keeping the two as separate code paths is what makes that
/// contract a real check.
pub fn train_plain(cfg: &TrainConfig, teacher: &Mlp) -> Result<DistillOutput> {
    run_student(cfg, teacher, false)
}

fn run_student(cfg: &TrainConfig, teacher: &Mlp, with_distill: bool) -> Result<DistillOutput> {
    cfg.validate()?;
    if teacher.feature_dim() != cfg.d_t {
        return Err(Error::Config(format!(
            "teacher feature dim {} does not match configured d_t {}",
            teacher.feature_dim(),
            cfg.d_t
        )));
    }
    let (train, test) = cfg.load_data()?;
    if teacher.input_dim() != train.x.cols() {
        return Err(Error::Config(format!(
            "teacher input dim {} does not match data width {}",
            teacher.input_dim(),
            train.x.cols()
        )));
    }
    let normalizer = cfg.normalizer_kind();
    let spec = cfg.projector_spec();

    let mut rng_student = stream_rng(cfg.seed, STREAM_STUDENT_INIT);
    let mut student = Mlp::init(
        &cfg.student_dims(train.x.cols()),
        cfg.activation,
        &mut rng_student,
    )?;
    let mut rng_proj = stream_rng(cfg.seed, STREAM_PROJECTOR_INIT);
    let mut projector = ProjectorState::init(&spec, &mut rng_proj)?;
    let mut rng_shuffle = stream_rng(cfg.seed, STREAM_STUDENT_SHUFFLE);

    let hyper = OptHyper {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        momentum: cfg.momentum,
    };
    let mut opt_student = NetOptimizer::for_net(&mut student, cfg.optimizer, hyper);
    // The manifold parameter is excluded from weight decay: decay on A pulls
    // the map toward the truncated identity, which is not a regularization
    // the objective asks for.
    let proj_hyper = OptHyper {
        lr: cfg.lr,
        weight_decay: 0.0,
        momentum: cfg.momentum,
    };
    let mut opt_proj = NetOptimizer::for_projector(&mut projector, cfg.optimizer, proj_hyper);

    // Fixed probe batch for the structural diagnostics.
    let probe_n = cfg.batch_size.min(test.len()).max(2);
    let probe_x = slice_rows(&test.x, 0, probe_n);

    let mut metrics = Vec::new();
    let mut diversity = Vec::new();
    let log_state = |epoch: u32,
                     train_ce: f64,
                     distill_loss: f64,
                     wall_ms: f64,
                     student: &Mlp,
                     projector: &ProjectorState,
                     metrics: &mut Vec<MetricsRow>,
                     diversity: &mut Vec<(u32, DiversityBoundReport)>|
     -> Result<()> {
        let (_, acc) = evaluate(student, &test, cfg.batch_size)?;
        let (feat_probe, _, _) = student.forward(&probe_x)?;
        let (gram_err, orth_err, proj_probe) = probe_diagnostics(projector, &feat_probe)?;
        if matches!(normalizer, NormalizerKind::Whiten { .. }) {
            if let Some(zp) = &proj_probe {
                let (tfeat, _, _) = teacher.forward(&probe_x)?;
                let tnorm = normalizer.apply(&tfeat)?;
                if let Ok(report) = diversity_bound(zp, &tnorm) {
                    diversity.push((epoch, report));
                }
            }
        }
        metrics.push(MetricsRow {
            epoch,
            train_ce,
            distill_loss,
            test_acc: acc,
            gram_err,
            orth_err,
            wall_ms,
        });
        Ok(())
    };

    // Epoch-0 row: state at initialization.
    {
        let (train_ce0, _) = evaluate(&student, &train, cfg.batch_size)?;
        let d0 = probe_distill_loss(cfg, teacher, &student, &projector, &normalizer, &probe_x)?;
        log_state(
            0,
            train_ce0,
            d0,
            0.0,
            &student,
            &projector,
            &mut metrics,
            &mut diversity,
        )?;
    }

    let mut indices: Vec<usize> = (0..train.len()).collect();
    let mut global_step = 0u64;
    for epoch in 1..=cfg.epochs {
        indices.shuffle(&mut rng_shuffle);
        let mut ce_accum = 0.0;

        let mut steps = 0u32;
        let t0 = Instant::now();
        for chunk in indices.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            global_step += 1;
            let x = gather_rows(&train.x, chunk);
            let labels: Vec<u32> = chunk.iter().map(|&i| train.labels[i]).collect();

            let (feat_s, logits, cache) = student.forward(&x)?;
            let (ce, grad_logits) = softmax_ce(&logits, &labels)?;

            let mut grad_features = Matrix::zeros(x.rows(), student.feature_dim());
            let mut distill_loss_step = 0.0;
            if with_distill {
                let (feat_t, _, _) = teacher.forward(&x)?; // teacher is frozen: no backward
                let target = normalizer.apply(&feat_t)?;
                match &projector {
                    ProjectorState::SvdTarget { .. } => {
                        let svd_target = svd_teacher_target(&target, cfg.svd_rank_effective())?;
                        let (ld, grad_zs) = l2_distill_loss(&feat_s, &svd_target)?;
                        distill_loss_step = ld;
                        grad_features.add_assign(&grad_zs.scale(cfg.beta));
                    }
                    _ => {
                        let (z_proj, pcache) = projector.forward(&feat_s)?;
                        if let (ProjectorState::Orthogonal { .. }, ProjCache::Dense { p }) =
                            (&projector, &pcache)
                        {
                            let resid = orthogonality_residual(p)?;
                            if resid > ORTH_GUARD {
                                return Err(Error::Numeric(format!(
                                    "projector left the manifold at step {global_step} (residual {resid:.3e})"
                                )));
                            }
                        }
                        let (ld, grad_zproj) = l2_distill_loss(&z_proj, &target)?;
                        distill_loss_step = ld;
                        let (proj_grads, grad_zs) =
                            projector.backward(&pcache, &feat_s, &grad_zproj.scale(cfg.beta))?;
                        grad_features.add_assign(&grad_zs);
                        opt_proj.step(projector.params_mut(), &proj_grads)?;
                    }
                }
            }

            if !ce.is_finite() || !distill_loss_step.is_finite() {
                return Err(Error::Numeric(format!(
                    "loss diverged at step {global_step}"
                )));
            }
            let grads = student.backward(&cache, &grad_logits, &grad_features)?;
            opt_student.step(student.params_mut(), &net_grads_flat(&grads))?;
            ce_accum += ce;

            steps += 1;
        }
        if epoch % cfg.eval_every == 0 || epoch == cfg.epochs {
            let wall_ms = t0.elapsed().as_secs_f64() * 1e3 / steps.max(1) as f64;
            let nsteps = steps.max(1) as f64;
            // The logged distillation loss is measured on the fixed probe
            // batch in every path, so plain CE runs and beta = 0 runs report
            // identical diagnostics.
            let dl = probe_distill_loss(cfg, teacher, &student, &projector, &normalizer, &probe_x)?;
            log_state(
                epoch,
                ce_accum / nsteps,
                dl,
                wall_ms,
                &student,
                &projector,
                &mut metrics,
                &mut diversity,
            )?;
        }
    }

    Ok(DistillOutput {
        student,
        metrics,
        diversity,
    })
}

/// L_distill evaluated on the probe batch without touching any parameters.
fn probe_distill_loss(
    cfg: &TrainConfig,
    teacher: &Mlp,
    student: &Mlp,
    projector: &ProjectorState,
    normalizer: &NormalizerKind,
    probe_x: &Matrix,
) -> Result<f64> {
    let (feat_t, _, _) = teacher.forward(probe_x)?;
    let target = normalizer.apply(&feat_t)?;
    let (feat_s, _, _) = student.forward(probe_x)?;
    let loss = match projector {
        ProjectorState::SvdTarget { .. } => {
            let svd_target = svd_teacher_target(&target, cfg.svd_rank_effective())?;
            l2_distill_loss(&feat_s, &svd_target)?.0
        }
        _ => {
            let (z_proj, _) = projector.forward(&feat_s)?;
            l2_distill_loss(&z_proj, &target)?.0
        }
    };
    Ok(loss)
}

fn orthogonality_residual(p: &Matrix) -> Result<f64> {
    let gram = matmul_nt(p, p)?;
    Ok(gram.sub(&Matrix::identity(p.rows())).frobenius_norm())
}

/// (gram_err, orth_err, projected probe features) for the metrics row.
/// Families without a matrix form report NaN orthogonality; the SVD target
/// leaves student features untouched, so its gram_err is exactly zero.
fn probe_diagnostics(
    projector: &ProjectorState,
    feat_probe: &Matrix,
) -> Result<(f64, f64, Option<Matrix>)> {
    match projector {
        ProjectorState::SvdTarget { .. } => Ok((0.0, f64::NAN, None)),
        ProjectorState::Mlp { .. } => {
            let (mapped, _) = projector.forward(feat_probe)?;
            let gram_err = kernel_preservation_error_mapped(feat_probe, &mapped)?;
            Ok((gram_err, f64::NAN, Some(mapped)))
        }
        _ => {
            let p = projector.effective_matrix()?.expect("dense projector");
            let (mapped, _) = projector.forward(feat_probe)?;
            let gram_err = kernel_preservation_error_mapped(feat_probe, &mapped)?;
            let orth_err = orthogonality_residual(&p)?;
            Ok((gram_err, orth_err, Some(mapped)))
        }
    }
}

/// One row of the ablation sweep output.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub projector: &'static str,
    pub normalizer: &'static str,
    pub seed: u64,
    pub row: MetricsRow,
}

impl SweepRow {
    pub fn csv_header() -> &'static str {
        "projector,normalizer,seed,epoch,train_ce,distill_loss,test_acc,gram_err,orth_err,wall_ms"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{}",
            self.projector,
            self.normalizer,
            self.seed,
            self.row.csv_row()
        )
    }
}

/// The projector x normalizer grid over `sweep_seeds` seeds. One teacher is
/// trained per seed and shared (read-only) across that seed's cells, which
/// is byte-identical to retraining it per cell. Cells run on up to `threads`
/// workers; rows are merged in deterministic cell order afterwards.
pub fn ablation_sweep(base: &TrainConfig, threads: usize) -> Result<Vec<SweepRow>> {
    base.validate()?;
    let normalizers = [
        NormalizerFamily::None,
        NormalizerFamily::Standardize,
        NormalizerFamily::Whiten,
    ];
    let seeds: Vec<u64> = (0..base.sweep_seeds.max(1) as u64)
        .map(|i| base.seed + i)
        .collect();

    let mut teachers = Vec::new();
    for &seed in &seeds {
        let mut cfg = base.clone();
        cfg.seed = seed;
        let (teacher, _) = train_teacher(&cfg)?;
        teachers.push(teacher);
    }

    let mut cells = Vec::new();
    for (si, &seed) in seeds.iter().enumerate() {
        for proj in ProjectorFamily::ALL {
            for norm in normalizers {
                let mut cfg = base.clone();
                cfg.seed = seed;
                cfg.projector = proj;
                cfg.normalizer = norm;
                cells.push((si, cfg));
            }
        }
    }

    let run_cell = |(si, cfg): &(usize, TrainConfig)| -> Result<Vec<SweepRow>> {
        let out = distill(cfg, &teachers[*si])?;
        Ok(out
            .metrics
            .into_iter()
            .map(|row| SweepRow {
                projector: cfg.projector.label(),
                normalizer: cfg.normalizer.label(),
                seed: cfg.seed,
                row,
            })
            .collect())
    };

    let mut slots: Vec<Option<Result<Vec<SweepRow>>>> = (0..cells.len()).map(|_| None).collect();
    if threads <= 1 {
        for (i, cell) in cells.iter().enumerate() {
            slots[i] = Some(run_cell(cell));
        }
    } else {
        let next = std::sync::atomic::AtomicUsize::new(0);
        let slots_mutex = std::sync::Mutex::new(&mut slots);
        std::thread::scope(|scope| {
            for _ in 0..threads.min(cells.len()) {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                    if i >= cells.len() {
                        break;
                    }
                    let res = run_cell(&cells[i]);
                    slots_mutex.lock().unwrap()[i] = Some(res);
                });
            }
        });
    }

    let mut rows = Vec::new();
    for slot in slots {
        rows.extend(slot.expect("cell executed")?);
    }
    Ok(rows)
}

/// One timing-bench row.
#[derive(Debug, Clone)]
pub struct BenchRow {
    pub projector: String,
    pub d_s: usize,
    pub d_t: usize,
    pub batch: usize,
    pub median_ms: f64,
    pub flops: u64,
}

impl BenchRow {
    pub fn csv_header() -> &'static str {
        "projector,d_s,d_t,batch,median_ms,flops"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{:.6},{}",
            self.projector, self.d_s, self.d_t, self.batch, self.median_ms, self.flops
        )
    }
}

/// Median wall-time and counted flops per forward+backward for each
/// projector family. The first 3 iterations are warmup and are discarded.
pub fn bench_projectors(d_s: usize, d_t: usize, batch: usize, iters: u32) -> Result<Vec<BenchRow>> {
    if iters < 10 {
        return Err(Error::Config(format!(
            "bench needs iters >= 10, got {iters}"
        )));
    }
    if d_s > d_t {
        return Err(Error::Config(
            "student wider than teacher unsupported".into(),
        ));
    }
    let mut rng = stream_rng(0xbe9c, STREAM_PROBE);
    let z_s = Matrix::random_normal(batch, d_s, 1.0, &mut rng);
    let z_t = Matrix::random_normal(batch, d_t, 1.0, &mut rng);

    let variants: Vec<(String, ProjectorKind)> = vec![
        (
            "orthogonal_expm".into(),
            ProjectorKind::Orthogonal {
                method: OrthoMethod::Expm,
            },
        ),
        (
            "orthogonal_cayley".into(),
            ProjectorKind::Orthogonal {
                method: OrthoMethod::Cayley,
            },
        ),
        ("linear".into(), ProjectorKind::Linear),
        (
            "mlp".into(),
            ProjectorKind::Mlp {
                hidden: 0,
                activation: Activation::Relu,
            },
        ),
        ("ensemble".into(), ProjectorKind::Ensemble { n: 3 }),
        (
            "svd_target".into(),
            ProjectorKind::SvdTarget {
                rank: d_s.min(batch),
            },
        ),
    ];

    let mut rows = Vec::new();
    for (name, kind) in variants {
        let spec = ProjectorSpec { kind, d_s, d_t };
        let state = ProjectorState::init(&spec, &mut rng)?;
        let mut times = Vec::new();
        let mut flops = 0u64;
        for it in 0..iters {
            reset_flop_counter();
            let t0 = Instant::now();
            match &state {
                ProjectorState::SvdTarget { rank } => {
                    let target = svd_teacher_target(&z_t, *rank)?;
                    let (_, grad) = l2_distill_loss(&z_s, &target)?;
                    std::hint::black_box(grad);
                }
                _ => {
                    let (out, cache) = state.forward(&z_s)?;
                    let (_, grad_out) = l2_distill_loss(&out, &z_t)?;
                    let (pg, gz) = state.backward(&cache, &z_s, &grad_out)?;
                    std::hint::black_box((pg, gz));
                }
            }
            let dt = t0.elapsed().as_secs_f64() * 1e3;
            if it >= 3 {
                times.push(dt);
            }
            if it == 3 {
                flops = flop_count();
            }
        }
        times.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median_ms = times[times.len() / 2];
        rows.push(BenchRow {
            projector: name,
            d_s,
            d_t,
            batch,
            median_ms,
            flops,
        });
    }
    Ok(rows)
}

/// Report-only diagnostic: variance of the distillation loss under small
/// input perturbations, with and without teacher standardization.
#[derive(Debug, Clone)]
pub struct PerturbationReport {
    pub noise: f64,
    pub trials: u32,
    pub raw_mean: f64,
    pub raw_variance: f64,
    pub standardized_mean: f64,
    pub standardized_variance: f64,
}

/// Evaluate the loss-landscape probe on a fixed batch.
pub fn perturbation_probe(
    cfg: &TrainConfig,
    teacher: &Mlp,
    student: &Mlp,
    projector: &ProjectorState,
    x: &Matrix,
    noise: f64,
    trials: u32,
) -> Result<PerturbationReport> {
    let mut rng = stream_rng(cfg.seed, STREAM_PROBE);
    let mut raw = Vec::with_capacity(trials as usize);
    let mut std = Vec::with_capacity(trials as usize);
    for _ in 0..trials {
        let delta = Matrix::random_normal(x.rows(), x.cols(), noise, &mut rng);
        let xp = x.add(&delta);
        for (kind, out) in [
            (NormalizerKind::None, &mut raw),
            (NormalizerKind::Standardize { eps: cfg.eps }, &mut std),
        ] {
            let (feat_t, _, _) = teacher.forward(&xp)?;
            let target = kind.apply(&feat_t)?;
            let (feat_s, _, _) = student.forward(&xp)?;
            let loss = match projector {
                ProjectorState::SvdTarget { .. } => {
                    let tgt = svd_teacher_target(&target, cfg.svd_rank_effective())?;
                    l2_distill_loss(&feat_s, &tgt)?.0
                }
                _ => {
                    let (z_proj, _) = projector.forward(&feat_s)?;
                    l2_distill_loss(&z_proj, &target)?.0
                }
            };
            out.push(loss);
        }
    }
    let stats = |v: &[f64]| -> (f64, f64) {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        (mean, var)
    };
    let (raw_mean, raw_variance) = stats(&raw);
    let (standardized_mean, standardized_variance) = stats(&std);
    Ok(PerturbationReport {
        noise,
        trials,
        raw_mean,
        raw_variance,
        standardized_mean,
        standardized_variance,
    })
}
