//! Bit-exact persistence.
//!
//! The feature-dump layout is normative, little-endian regardless of host:
//!
//! ```text
//!   offset  size  field
//!   0       4     magic "VKDF"
//!   4       4     version (u32 LE) = 1
//!   8       4     rows b (u32 LE)
//!   12      4     cols d (u32 LE)
//!   16      4bd   payload, f32 LE, row-major
//!   --- optional labels block ---
//!   16+4bd  1     marker 0x4C
//!   +1      4b    labels (u32 LE each)
//! ```
//!
//! Values are stored in f32 (round-to-nearest-even from the in-memory f64),
//! which is far below every training-relevant tolerance. All writes go
//! through a temp file and an atomic rename.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nets::Activation;
use crate::projector::OrthoMethod;
use crate::trainer::{
    BenchRow, MetricsRow, NormalizerFamily, OptimizerKind, ProjectorFamily, SweepRow, TrainConfig,
    WhitenBackend,
};

const MAGIC: [u8; 4] = *b"VKDF";
const VERSION: u32 = 1;
const LABEL_MARKER: u8 = 0x4C;

/// Serialize a feature matrix (and optional labels) into the dump layout.
pub fn encode_features(z: &Matrix, labels: Option<&[u32]>) -> Result<Vec<u8>> {
    z.validate_finite("write_features payload")?;
    if let Some(l) = labels {
        if l.len() != z.rows() {
            return Err(Error::Shape(format!(
                "write_features: {} labels for {} rows",
                l.len(),
                z.rows()
            )));
        }
    }
    let (b, d) = z.shape();
    let mut out = Vec::with_capacity(16 + 4 * b * d);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(b as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    for v in z.data() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    if let Some(l) = labels {
        out.push(LABEL_MARKER);
        for v in l {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Write a feature dump atomically (temp file + rename).
pub fn write_features(path: &Path, z: &Matrix, labels: Option<&[u32]>) -> Result<()> {
    let bytes = encode_features(z, labels)?;
    write_atomic(path, &bytes)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = tmp_path(path);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path
        .file_name()
        .map(|s| s.to_os_string())
        .unwrap_or_default();
    name.push(".tmp");
    path.with_file_name(name)
}

/// Decode a feature dump. Exact inverse of [`encode_features`] modulo the
/// f32 quantization on write.
pub fn decode_features(bytes: &[u8]) -> Result<(Matrix, Option<Vec<u32>>)> {
    if bytes.len() < 16 {
        return Err(Error::Format(format!(
            "feature dump truncated: 16-byte header expected, file has {} bytes",
            bytes.len()
        )));
    }
    if bytes[0..4] != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:02X?}, expected {:02X?} (\"VKDF\")",
            &bytes[0..4],
            MAGIC
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let b = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let payload_len = 4usize
        .checked_mul(b)
        .and_then(|v| v.checked_mul(d))
        .ok_or_else(|| Error::Format("dimension overflow".into()))?;
    let no_labels = 16 + payload_len;
    let with_labels = no_labels + 1 + 4 * b;
    let labels_present = match bytes.len() {
        n if n == no_labels => false,
        n if n == with_labels => {
            if bytes[no_labels] != LABEL_MARKER {
                return Err(Error::Format(format!(
                    "bad labels marker 0x{:02X}, expected 0x{LABEL_MARKER:02X}",
                    bytes[no_labels]
                )));
            }
            true
        }
        n => {
            return Err(Error::Format(format!(
                "feature dump length {n} matches neither {no_labels} (no labels) nor {with_labels} (with labels)"
            )))
        }
    };

    let mut data = Vec::with_capacity(b * d);
    for i in 0..b * d {
        let off = 16 + 4 * i;
        let v = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        data.push(v as f64);
    }
    let z = Matrix::from_vec(b, d, data)?;
    z.validate_finite("feature dump payload")?;

    let labels = if labels_present {
        let mut l = Vec::with_capacity(b);
        for i in 0..b {
            let off = no_labels + 1 + 4 * i;
            l.push(u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()));
        }
        Some(l)
    } else {
        None
    };
    Ok((z, labels))
}

/// Read a feature dump from disk.
pub fn read_features(path: &Path) -> Result<(Matrix, Option<Vec<u32>>)> {
    let bytes = fs::read(path)?;
    decode_features(&bytes)
}

/// Apply one `key = value` assignment onto a config.
pub fn apply_config_line(
    cfg: &mut TrainConfig,
    key: &str,
    value: &str,
    where_: &str,
) -> Result<()> {
    fn num<T: std::str::FromStr>(value: &str, key: &str, where_: &str) -> Result<T> {
        value
            .parse::<T>()
            .map_err(|_| Error::Config(format!("{where_}: cannot parse '{value}' for key '{key}'")))
    }
    match key {
        "seed" => cfg.seed = num(value, key, where_)?,
        "epochs" => cfg.epochs = num(value, key, where_)?,
        "batch_size" => cfg.batch_size = num(value, key, where_)?,
        "lr" => cfg.lr = num(value, key, where_)?,
        "weight_decay" => cfg.weight_decay = num(value, key, where_)?,
        "momentum" => cfg.momentum = num(value, key, where_)?,
        "beta" => cfg.beta = num(value, key, where_)?,
        "optimizer" => cfg.optimizer = OptimizerKind::parse(value)?,
        "projector" => cfg.projector = ProjectorFamily::parse(value)?,
        "projector_method" => {
            cfg.projector_method = match value {
                "expm" => OrthoMethod::Expm,
                "cayley" => OrthoMethod::Cayley,
                other => {
                    return Err(Error::Config(format!(
                        "{where_}: unknown projector_method '{other}'"
                    )))
                }
            }
        }
        "mlp_hidden" => cfg.mlp_hidden = num(value, key, where_)?,
        "mlp_activation" => cfg.mlp_activation = Activation::parse(value)?,
        "ensemble_n" => cfg.ensemble_n = num(value, key, where_)?,
        "svd_rank" => cfg.svd_rank = num(value, key, where_)?,
        "d_s" => cfg.d_s = num(value, key, where_)?,
        "d_t" => cfg.d_t = num(value, key, where_)?,
        "normalizer" => cfg.normalizer = NormalizerFamily::parse(value)?,
        "whiten_method" => cfg.whiten_method = WhitenBackend::parse(value)?,
        "ns_iters" => cfg.ns_iters = num(value, key, where_)?,
        "eps" => cfg.eps = num(value, key, where_)?,
        "n_classes" => cfg.task.n_classes = num(value, key, where_)?,
        "input_dim" => cfg.task.input_dim = num(value, key, where_)?,
        "n_train" => cfg.task.n_train = num(value, key, where_)?,
        "n_test" => cfg.task.n_test = num(value, key, where_)?,
        "task_seed" => cfg.task.seed = num(value, key, where_)?,
        "cluster_spread" => cfg.task.cluster_spread = num(value, key, where_)?,
        "eval_every" => cfg.eval_every = num(value, key, where_)?,
        "activation" => cfg.activation = Activation::parse(value)?,
        "sweep_seeds" => cfg.sweep_seeds = num(value, key, where_)?,
        "bench_iters" => cfg.bench_iters = num(value, key, where_)?,
        "train_dump" => cfg.train_dump = value.to_string(),
        "test_dump" => cfg.test_dump = value.to_string(),
        other => return Err(Error::Config(format!("{where_}: unknown key '{other}'"))),
    }
    Ok(())
}

/// Parse a flat `key = value` config file. `#` starts a comment, blank lines
/// are skipped, unknown keys are hard errors, duplicate keys are
/// last-write-wins. An empty file yields all defaults.
pub fn parse_config(path: &Path) -> Result<TrainConfig> {
    let text = fs::read_to_string(path)?;
    parse_config_str(&text)
}

/// Same as [`parse_config`], on an in-memory string.
pub fn parse_config_str(text: &str) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(i) => &raw[..i],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let where_ = format!("line {}", lineno + 1);
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "{where_}: expected 'key = value', got '{line}'"
            )));
        };
        apply_config_line(&mut cfg, key.trim(), value.trim(), &where_)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Write a metrics CSV (fixed header, one row per logged epoch) atomically.
pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut text = String::from(MetricsRow::csv_header());
    text.push('\n');
    for row in rows {
        text.push_str(&row.csv_row());
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

/// Write the sweep CSV (one row per cell, seed, logged epoch) atomically.
pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut text = String::from(SweepRow::csv_header());
    text.push('\n');
    for row in rows {
        text.push_str(&row.csv_row());
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

/// Write the bench CSV atomically.
pub fn write_bench_csv(path: &Path, rows: &[BenchRow]) -> Result<()> {
    let mut text = String::from(BenchRow::csv_header());
    text.push('\n');
    for row in rows {
        text.push_str(&row.csv_row());
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

/// Write diversity-bound reports, one row per evaluated batch, with the
/// fixed schema `loss,bound,const,lambda,holds,form`.
pub fn write_diversity_csv(
    path: &Path,
    rows: &[(u32, crate::distill::DiversityBoundReport)],
) -> Result<()> {
    let mut text = String::from(crate::distill::DiversityBoundReport::csv_header());
    text.push('\n');
    for (_epoch, report) in rows {
        text.push_str(&report.csv_row());
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

/// Load a dataset whose inputs come from a feature dump with labels. Used to
/// swap real pre-extracted features in place of the synthetic task.
pub fn read_dataset(path: &Path) -> Result<crate::nets::DataSet> {
    let (x, labels) = read_features(path)?;
    let labels = labels.ok_or_else(|| {
        Error::Format(format!(
            "{} has no labels block, cannot form a dataset",
            path.display()
        ))
    })?;
    Ok(crate::nets::DataSet { x, labels })
}
