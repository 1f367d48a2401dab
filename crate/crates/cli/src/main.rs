//! `vkd` — command-line harness for orthogonal-projection feature
//! distillation: teacher training, distillation runs, the ablation sweep,
//! projector timing, the invariant check suite, and feature dumps.
//!
//! Exit codes: 0 success, 1 configuration/format errors, 2 numeric errors.
//! Errors go to stderr; data goes to stdout or files under --out.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use vkd_core::distill::{diversity_bound, kernel_preservation_error, BoundForm};
use vkd_core::error::{Error, Result};
use vkd_core::io;
use vkd_core::linalg::{expm, expm_frechet, matmul_nt, matmul_tn, InvSqrtMethod, Matrix};
use vkd_core::normalizer::whiten;
use vkd_core::projector::{build_projection, OrthoMethod, ProjectorState, SkewParam};
use vkd_core::trainer::{
    ablation_sweep, bench_projectors, distill, perturbation_probe, train_teacher, TrainConfig,
};

#[derive(Parser)]
#[command(
    name = "vkd",
    version,
    about = "Orthogonal-projection feature distillation harness"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the teacher network; writes teacher_metrics.csv.
    TrainTeacher(RunArgs),
    /// Train a teacher, then distill it into a student; writes metrics.csv
    /// (and diversity.csv under the whiten normalizer).
    Distill(RunArgs),
    /// Projector x normalizer ablation grid; writes sweep.csv.
    Sweep(RunArgs),
    /// Per-projector forward+backward timing and flop counts; writes
    /// bench.csv.
    Bench(RunArgs),
    /// Run the invariant suite; prints one `PASS|FAIL <name> <residual>
    /// <tolerance>` line per check and exits 0 only if all pass.
    Check(RunArgs),
    /// Generate the synthetic task, train the teacher, and dump its train
    /// and test features (with labels) in the binary feature format.
    DumpFeatures(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Flat `key = value` config file. Omitted: built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for CSVs and feature dumps.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Override one config key (repeatable, applied after the file):
    /// --set key=value
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Usage problems (including unknown subcommands) are
            // configuration errors: exit 1 with the usage text. Requests for
            // --help/--version keep exit 0.
            if e.use_stderr() {
                eprint!("{e}");
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    let result = match &cli.command {
        Command::TrainTeacher(args) => cmd_train_teacher(args),
        Command::Distill(args) => cmd_distill(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Bench(args) => cmd_bench(args),
        Command::Check(args) => cmd_check(args),
        Command::DumpFeatures(args) => cmd_dump_features(args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn load_config(args: &RunArgs) -> Result<TrainConfig> {
    let mut cfg = match &args.config {
        Some(path) => io::parse_config(path)?,
        None => TrainConfig::default(),
    };
    for (i, assignment) in args.set.iter().enumerate() {
        let where_ = format!("--set #{}", i + 1);
        let Some((key, value)) = assignment.split_once('=') else {
            return Err(Error::Config(format!(
                "{where_}: expected key=value, got '{assignment}'"
            )));
        };
        io::apply_config_line(&mut cfg, key.trim(), value.trim(), &where_)?;
    }
    cfg.validate()?;
    std::fs::create_dir_all(&args.out)?;
    Ok(cfg)
}

fn worker_threads() -> usize {
    std::env::var("VKD_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

fn cmd_train_teacher(args: &RunArgs) -> Result<ExitCode> {
    let cfg = load_config(args)?;
    let (_, rows) = train_teacher(&cfg)?;
    let path = args.out.join("teacher_metrics.csv");
    io::write_metrics_csv(&path, &rows)?;
    let last = rows.last().expect("at least the epoch-0 row");
    println!(
        "teacher test_acc {:.4} after {} epochs",
        last.test_acc, last.epoch
    );
    println!("wrote {}", path.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_distill(args: &RunArgs) -> Result<ExitCode> {
    let cfg = load_config(args)?;
    let (teacher, teacher_rows) = train_teacher(&cfg)?;
    io::write_metrics_csv(&args.out.join("teacher_metrics.csv"), &teacher_rows)?;
    let out = distill(&cfg, &teacher)?;
    let path = args.out.join("metrics.csv");
    io::write_metrics_csv(&path, &out.metrics)?;
    if !out.diversity.is_empty() {
        let dpath = args.out.join("diversity.csv");
        io::write_diversity_csv(&dpath, &out.diversity)?;
        println!("wrote {}", dpath.display());
    }
    let last = out.metrics.last().expect("rows");
    let first = out.metrics.first().expect("rows");
    println!(
        "student test_acc {:.4}; distill_loss {:.3e} -> {:.3e}; orth_err {:.3e}",
        last.test_acc, first.distill_loss, last.distill_loss, last.orth_err
    );
    println!("wrote {}", path.display());

    // Report-only loss-landscape probe (stderr): distillation-loss variance
    // under small input perturbations, raw vs standardized teacher.
    let (_, test) = cfg.load_data()?;
    let probe_n = cfg.batch_size.min(test.len()).max(2);
    let probe_x = Matrix::from_fn(probe_n, test.x.cols(), |r, c| test.x[(r, c)]);
    let mut proj_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let projector = ProjectorState::init(&cfg.projector_spec(), &mut proj_rng)?;
    let probe = perturbation_probe(&cfg, &teacher, &out.student, &projector, &probe_x, 0.1, 16)?;
    eprintln!(
        "perturbation probe (noise {}, {} trials): raw loss var {:.4e}, standardized {:.4e}",
        probe.noise, probe.trials, probe.raw_variance, probe.standardized_variance
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_sweep(args: &RunArgs) -> Result<ExitCode> {
    let cfg = load_config(args)?;
    let rows = ablation_sweep(&cfg, worker_threads())?;
    let path = args.out.join("sweep.csv");
    io::write_sweep_csv(&path, &rows)?;
    println!("{} rows ({} seeds)", rows.len(), cfg.sweep_seeds.max(1));
    println!("wrote {}", path.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_bench(args: &RunArgs) -> Result<ExitCode> {
    let cfg = load_config(args)?;
    let rows = bench_projectors(cfg.d_s, cfg.d_t, cfg.batch_size, cfg.bench_iters)?;
    println!("{}", vkd_core::trainer::BenchRow::csv_header());
    for row in &rows {
        println!("{}", row.csv_row());
    }
    let path = args.out.join("bench.csv");
    io::write_bench_csv(&path, &rows)?;
    println!("wrote {}", path.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_dump_features(args: &RunArgs) -> Result<ExitCode> {
    let cfg = load_config(args)?;
    let (teacher, _) = train_teacher(&cfg)?;
    let (train, test) = cfg.load_data()?;
    for (name, ds) in [
        ("features_train.vkdf", &train),
        ("features_test.vkdf", &test),
    ] {
        let (features, _, _) = teacher.forward(&ds.x)?;
        let path = args.out.join(name);
        io::write_features(&path, &features, Some(&ds.labels))?;
        println!(
            "wrote {} ({}x{} + labels)",
            path.display(),
            features.rows(),
            features.cols()
        );
    }
    Ok(ExitCode::SUCCESS)
}

struct Check {
    name: &'static str,
    residual: f64,
    tolerance: f64,
}

impl Check {
    fn passed(&self) -> bool {
        self.residual <= self.tolerance
    }
}

fn cmd_check(args: &RunArgs) -> Result<ExitCode> {
    let _ = load_config(args)?; // validate the config; the suite itself is fixed
    let checks = run_invariant_suite()?;
    let mut all_pass = true;
    for c in &checks {
        let ok = c.passed();
        all_pass &= ok;
        println!(
            "{} {} {:.3e} {:.1e}",
            if ok { "PASS" } else { "FAIL" },
            c.name,
            c.residual,
            c.tolerance
        );
    }
    Ok(if all_pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

/// The five structural invariants: projector orthogonality, Gram
/// preservation, the Fréchet derivative against finite differences, the
/// whitening Gram condition, and the diversity-bound Monte-Carlo.
fn run_invariant_suite() -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC4EC);
    let mut checks = Vec::new();

    // Orthogonality of the reparameterized projector, both methods.
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let d_t = rng.gen_range(2..=48usize);
        let d_s = rng.gen_range(1..=d_t);
        let param = SkewParam::new(Matrix::random_normal(d_t, d_t, 0.4, &mut rng), d_s, d_t)?;
        for method in [OrthoMethod::Expm, OrthoMethod::Cayley] {
            let p = build_projection(&param, method)?;
            let gram = matmul_nt(&p, &p)?;
            worst = worst.max(gram.sub(&Matrix::identity(d_s)).frobenius_norm());
        }
    }
    checks.push(Check {
        name: "orthogonality",
        residual: worst,
        tolerance: 1e-8,
    });

    // Kernel (Gram) preservation under the orthogonal projection.
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let d_t = rng.gen_range(4..=32usize);
        let d_s = rng.gen_range(2..=d_t);
        let b = rng.gen_range(4..=16usize);
        let z = Matrix::random_normal(b, d_s, 1.0, &mut rng);
        let param = SkewParam::new(Matrix::random_normal(d_t, d_t, 0.4, &mut rng), d_s, d_t)?;
        let p = build_projection(&param, OrthoMethod::Expm)?;
        worst = worst.max(kernel_preservation_error(&z, &p)?);
    }
    checks.push(Check {
        name: "gram_preservation",
        residual: worst,
        tolerance: 1e-8,
    });

    // Fréchet derivative against central finite differences.
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let w = Matrix::random_normal(5, 5, 0.5, &mut rng);
        let e = Matrix::random_normal(5, 5, 0.8, &mut rng);
        let (_, l) = expm_frechet(&w, &e)?;
        let h = 1e-5;
        let plus = expm(&w.add(&e.scale(h)))?;
        let minus = expm(&w.sub(&e.scale(h)))?;
        let fd = plus.sub(&minus).scale(0.5 / h);
        worst = worst.max(l.sub(&fd).frobenius_norm() / fd.frobenius_norm());
    }
    checks.push(Check {
        name: "frechet_fd",
        residual: worst,
        tolerance: 1e-5,
    });

    // Whitening Gram condition.
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let z = Matrix::random_normal(64, 8, 1.0, &mut rng);
        let zw = whiten(&z, 1e-5, InvSqrtMethod::Eig)?;
        let gram = matmul_tn(&zw, &zw)?;
        worst = worst.max(gram.sub(&Matrix::identity(8)).frobenius_norm());
    }
    checks.push(Check {
        name: "whitening_gram",
        residual: worst,
        tolerance: 1e-3,
    });

    // Diversity bound Monte-Carlo: every precondition-satisfying trial must
    // hold; the residual is the number of violations.
    let mut failures = 0usize;
    let mut violated_precondition = 0usize;
    for _ in 0..1000 {
        let zt = Matrix::random_normal(32, 8, 1.0, &mut rng);
        let zw = whiten(&zt, 1e-5, InvSqrtMethod::Eig)?;
        let zs = Matrix::random_normal(32, 8, 1.0, &mut rng);
        let report = diversity_bound(&zs, &zw)?;
        match report.form {
            BoundForm::Relaxed => {
                if !report.holds {
                    failures += 1;
                }
            }
            BoundForm::PreRelaxation => violated_precondition += 1,
        }
    }
    eprintln!(
        "diversity_bound: {violated_precondition}/1000 trials violated the per-pair precondition (counted separately)"
    );
    checks.push(Check {
        name: "diversity_bound",
        residual: failures as f64,
        tolerance: 0.0,
    });

    Ok(checks)
}
