//! `decdec` command-line tool: quantization, boundary derivation,
//! compensated forward passes, latency tuning, and the evaluation
//! experiments, all deterministic for a fixed seed and input set.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use decdec::evaluation::{
    bitwidth_sweep, error_curve, recall_experiment, selection_comparison, CurveAux, Policy,
};
use decdec::hwmodel::{AnalyticOracle, HardwareProfile, ModelShapes, TableOracle, TimingOracle};
use decdec::quantizer::{base_quantize, residual_quantize, QuantizedResidual, WeightSet};
use decdec::selection::{
    boundaries_from_line, boundaries_to_line, derive_boundaries, ActivationTrace,
    BucketBoundaries, CHUNK,
};
use decdec::synth::{gen_trace, gen_weights, SynthTraceConfig};
use decdec::tuner::tune;
use decdec::{decdec_forward, Error, Matrix};

const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Parser)]
#[command(name = "decdec", version, about = "Dynamic error compensation toolkit")]
struct Cli {
    /// Upper bound on worker threads (current operations are
    /// single-threaded; the cap is accepted for forward compatibility).
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Base-quantize a weight matrix and quantize its residual.
    Quantize(QuantizeArgs),
    /// Derive bucket boundaries from a calibration trace.
    Boundaries(BoundariesArgs),
    /// Run one compensated forward pass.
    Forward(ForwardArgs),
    /// Pick per-layer fetch amounts under a latency budget.
    Tune(TuneArgs),
    /// Progressive-compensation error curve.
    EvalCurve(EvalCurveArgs),
    /// Static-selection recall against per-step exact Top-K.
    EvalRecall(EvalRecallArgs),
    /// Residual bitwidth sweep at matched transfer budgets.
    EvalSweep(EvalSweepArgs),
    /// Selection-policy comparison at identical k.
    EvalCompare(EvalCompareArgs),
    /// Generate synthetic weights and an activation trace.
    GenSynthetic(GenSyntheticArgs),
}

#[derive(Args)]
struct QuantizeArgs {
    /// Full-precision weights (DDMX, d_in x d_out).
    #[arg(long)]
    weights: PathBuf,
    /// Optional externally quantized weights (DDMX); when given, the
    /// base quantizer is skipped and only the residual is quantized.
    #[arg(long)]
    whats: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    base_bits: u8,
    #[arg(long, default_value_t = 128)]
    group_size: usize,
    #[arg(long, default_value_t = 4)]
    residual_bits: u8,
    /// Output path for the dequantized base weights (DDMX).
    #[arg(long)]
    out_whats: PathBuf,
    /// Output path for the quantized residual (DDQR).
    #[arg(long)]
    out_residual: PathBuf,
}

#[derive(Args)]
struct BoundariesArgs {
    /// Calibration trace (DDMX, steps x d_in).
    #[arg(long)]
    calibration: PathBuf,
    #[arg(long)]
    kchunk: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ForwardArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    whats: PathBuf,
    #[arg(long)]
    residual: PathBuf,
    /// Input activation vector (DDMX, 1 x d_in).
    #[arg(long)]
    x: PathBuf,
    #[arg(long)]
    kchunk: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Bucket boundaries file; required when kchunk > 0.
    #[arg(long)]
    boundaries: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TuneArgs {
    /// Model shape file (CSV plus a num_blocks line).
    #[arg(long)]
    model: PathBuf,
    /// Hardware profile (key = value text).
    #[arg(long)]
    profile: PathBuf,
    /// Target slowdown over the uncompensated baseline, e.g. 0.10.
    #[arg(long)]
    target: f64,
    #[arg(long, default_value_t = 4)]
    residual_bits: u8,
    /// Measured timing table (CSV layer,n_tb,k_chunk,micros); replaces
    /// the analytic model when given.
    #[arg(long)]
    timing_table: Option<PathBuf>,
    /// Optional CSV with the per-layer assignment.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalCurveArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    whats: PathBuf,
    /// Input activation vector (DDMX, 1 x d_in).
    #[arg(long)]
    x: PathBuf,
    /// sorted | random | static | decdec | exact
    #[arg(long)]
    policy: String,
    #[arg(long, default_value_t = 64)]
    step: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Calibration trace (required by the static policy).
    #[arg(long)]
    calibration: Option<PathBuf>,
    /// Bucket boundaries file (required by the decdec policy).
    #[arg(long)]
    boundaries: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalRecallArgs {
    #[arg(long)]
    trace: PathBuf,
    #[arg(long)]
    calibration: PathBuf,
    #[arg(long, default_value_t = 0.05)]
    top_fraction: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalSweepArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    whats: PathBuf,
    #[arg(long)]
    trace: PathBuf,
    /// Comma-separated per-chunk transfer budgets in bytes.
    #[arg(long, value_delimiter = ',')]
    budgets: Vec<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalCompareArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    whats: PathBuf,
    #[arg(long)]
    trace: PathBuf,
    #[arg(long)]
    calibration: PathBuf,
    #[arg(long, default_value_t = 4)]
    residual_bits: u8,
    #[arg(long)]
    kchunk: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenSyntheticArgs {
    #[arg(long)]
    din: usize,
    #[arg(long)]
    dout: usize,
    #[arg(long, default_value_t = 64)]
    steps: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 0.01)]
    persistent_fraction: f64,
    #[arg(long, default_value_t = 10.0)]
    persistent_boost: f64,
    #[arg(long)]
    out_weights: Option<PathBuf>,
    #[arg(long)]
    out_trace: Option<PathBuf>,
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Io(_) | Error::Parse(_) => 3,
        Error::DimensionMismatch(_)
        | Error::NonFinite { .. }
        | Error::UnsupportedBits(_)
        | Error::IndexOutOfRange { .. }
        | Error::Precondition(_)
        | Error::DegenerateCalibration => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.threads == 0 {
        eprintln!("error: --threads must be >= 1");
        return ExitCode::from(2);
    }
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}

/// SHA-256 digest (first 12 hex chars) of an input file.
fn digest(path: &Path) -> Result<String, Error> {
    let bytes = std::fs::read(path)?;
    let hash = Sha256::digest(&bytes);
    let mut hex = String::new();
    for b in &hash[..6] {
        write!(hex, "{b:02x}").unwrap();
    }
    Ok(hex)
}

/// One-line provenance header recorded in every text artifact.
fn provenance(command: &str, seed: Option<u64>, inputs: &[&Path]) -> Result<String, Error> {
    let mut line = format!("# decdec v{VERSION} command={command}");
    if let Some(seed) = seed {
        write!(line, " seed={seed}").unwrap();
    }
    for path in inputs {
        write!(
            line,
            " {}=sha256:{}",
            path.file_name().map(|n| n.to_string_lossy()).unwrap_or_default(),
            digest(path)?
        )
        .unwrap();
    }
    Ok(line)
}

/// Atomic write: temp file in the destination directory, then rename.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), Error> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let tmp = tempfile::NamedTempFile::new_in(dir.unwrap_or(Path::new(".")))?;
    std::fs::write(tmp.path(), bytes)?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

fn save_matrix_atomic(m: &Matrix, path: &Path) -> Result<(), Error> {
    let mut buf = Vec::new();
    m.write_ddmx(&mut buf)?;
    write_atomic(path, &buf)
}

fn save_residual_atomic(qr: &QuantizedResidual, path: &Path) -> Result<(), Error> {
    let mut buf = Vec::new();
    qr.write_ddqr(&mut buf)?;
    write_atomic(path, &buf)
}

fn load_vector(path: &Path) -> Result<Vec<f32>, Error> {
    let m = Matrix::load(path)?;
    if m.rows() != 1 {
        return Err(Error::Precondition(format!(
            "{} must be a 1-row DDMX vector, got {} rows",
            path.display(),
            m.rows()
        )));
    }
    Ok(m.data().to_vec())
}

fn load_boundaries(path: &Path) -> Result<BucketBoundaries, Error> {
    let text = std::fs::read_to_string(path)?;
    let line = text
        .lines()
        .map(str::trim)
        .find(|l| !l.is_empty() && !l.starts_with('#'))
        .ok_or_else(|| Error::Parse(format!("{}: no boundary line", path.display())))?;
    boundaries_from_line(line)
}

fn run(command: &Command) -> Result<(), Error> {
    match command {
        Command::Quantize(a) => cmd_quantize(a),
        Command::Boundaries(a) => cmd_boundaries(a),
        Command::Forward(a) => cmd_forward(a),
        Command::Tune(a) => cmd_tune(a),
        Command::EvalCurve(a) => cmd_eval_curve(a),
        Command::EvalRecall(a) => cmd_eval_recall(a),
        Command::EvalSweep(a) => cmd_eval_sweep(a),
        Command::EvalCompare(a) => cmd_eval_compare(a),
        Command::GenSynthetic(a) => cmd_gen_synthetic(a),
    }
}

fn cmd_quantize(a: &QuantizeArgs) -> Result<(), Error> {
    let ws = match &a.whats {
        Some(whats) => WeightSet::import(&a.weights, whats)?,
        None => {
            let w = Matrix::load(&a.weights)?;
            base_quantize(&w, a.base_bits, a.group_size)?
        }
    };
    let qr = residual_quantize(&ws.residual, a.residual_bits)?;
    save_matrix_atomic(&ws.w_hat, &a.out_whats)?;
    save_residual_atomic(&qr, &a.out_residual)?;
    println!(
        "quantized {} x {} (base {} bits, residual {} bits)",
        ws.d_in(),
        ws.d_out(),
        a.base_bits,
        a.residual_bits
    );
    Ok(())
}

fn cmd_boundaries(a: &BoundariesArgs) -> Result<(), Error> {
    let calibration = ActivationTrace::new(Matrix::load(&a.calibration)?)?;
    let b = derive_boundaries(&calibration, a.kchunk)?;
    let mut text = provenance("boundaries", None, &[&a.calibration])?;
    text.push('\n');
    text.push_str(&boundaries_to_line(&b));
    text.push('\n');
    write_atomic(&a.out, text.as_bytes())
}

fn cmd_forward(a: &ForwardArgs) -> Result<(), Error> {
    let ws = WeightSet::import(&a.weights, &a.whats)?;
    let qr = QuantizedResidual::load(&a.residual)?;
    let x = load_vector(&a.x)?;
    let b = match (&a.boundaries, a.kchunk) {
        (_, 0) => BucketBoundaries {
            k: 1,
            b0: 1.0,
            b15: 0.5,
        },
        (Some(path), _) => load_boundaries(path)?,
        (None, _) => {
            return Err(Error::Precondition(
                "--boundaries is required when --kchunk > 0".into(),
            ))
        }
    };
    let o = decdec_forward(&ws, &qr, &x, a.kchunk, &b, a.seed)?;
    let out = Matrix::from_vec(1, o.len(), o.o)?;
    save_matrix_atomic(&out, &a.out)
}

fn cmd_tune(a: &TuneArgs) -> Result<(), Error> {
    let model = ModelShapes::load(&a.model)?;
    let profile = HardwareProfile::load(&a.profile)?;
    let oracle: Box<dyn TimingOracle> = match &a.timing_table {
        Some(path) => Box::new(TableOracle::load(path)?),
        None => Box::new(AnalyticOracle {
            profile: profile.clone(),
            r_bits: a.residual_bits,
        }),
    };
    let result = tune(
        &model,
        profile.sm_count,
        profile.shared_mem_bytes,
        oracle.as_ref(),
        a.target,
    )?;
    println!(
        "{}  predicted slowdown {:.4}",
        result.summary_line(),
        result.predicted_slowdown
    );
    if let Some(out) = &a.out {
        let mut csv = provenance("tune", None, &[&a.model, &a.profile])?;
        csv.push('\n');
        writeln!(
            csv,
            "# target={} predicted_slowdown={:.6} n_max_tb={}",
            a.target, result.predicted_slowdown, result.n_max_tb
        )
        .unwrap();
        csv.push_str("layer,n_tb,k_chunk\n");
        for l in &result.per_layer {
            writeln!(csv, "{},{},{}", l.label, l.n_tb, l.k_chunk).unwrap();
        }
        write_atomic(out, csv.as_bytes())?;
    }
    Ok(())
}

fn cmd_eval_curve(a: &EvalCurveArgs) -> Result<(), Error> {
    let policy: Policy = a.policy.parse()?;
    let ws = WeightSet::import(&a.weights, &a.whats)?;
    let x = load_vector(&a.x)?;
    let calibration = match &a.calibration {
        Some(path) => Some(ActivationTrace::new(Matrix::load(path)?)?),
        None => None,
    };
    let boundaries = match &a.boundaries {
        Some(path) => Some(load_boundaries(path)?),
        None => None,
    };
    let aux = CurveAux {
        calibration: calibration.as_ref(),
        boundaries,
    };
    let curve = error_curve(&ws, &x, policy, a.step, a.seed, &aux)?;
    let mut inputs: Vec<&Path> = vec![&a.weights, &a.whats, &a.x];
    if let Some(p) = &a.calibration {
        inputs.push(p);
    }
    let mut csv = provenance("eval-curve", Some(a.seed), &inputs)?;
    csv.push('\n');
    writeln!(csv, "# policy={}", policy.as_str()).unwrap();
    csv.push_str("n_compensated,mse\n");
    for (n, m) in curve.n_compensated.iter().zip(&curve.mse) {
        writeln!(csv, "{n},{m}").unwrap();
    }
    write_atomic(&a.out, csv.as_bytes())
}

fn cmd_eval_recall(a: &EvalRecallArgs) -> Result<(), Error> {
    let trace = ActivationTrace::new(Matrix::load(&a.trace)?)?;
    let calibration = ActivationTrace::new(Matrix::load(&a.calibration)?)?;
    let (per_step, mean) = recall_experiment(&trace, &calibration, a.top_fraction)?;
    let mut csv = provenance("eval-recall", None, &[&a.trace, &a.calibration])?;
    csv.push('\n');
    writeln!(csv, "# top_fraction={} mean_recall={mean}", a.top_fraction).unwrap();
    csv.push_str("step,recall\n");
    for (s, r) in per_step.iter().enumerate() {
        writeln!(csv, "{s},{r}").unwrap();
    }
    write_atomic(&a.out, csv.as_bytes())?;
    println!("mean static recall {mean:.4} at top fraction {}", a.top_fraction);
    Ok(())
}

fn cmd_eval_sweep(a: &EvalSweepArgs) -> Result<(), Error> {
    let ws = WeightSet::import(&a.weights, &a.whats)?;
    let trace = ActivationTrace::new(Matrix::load(&a.trace)?)?;
    let report = bitwidth_sweep(&ws, &trace, &a.budgets)?;
    let mut csv = provenance("eval-sweep", None, &[&a.weights, &a.whats, &a.trace])?;
    csv.push('\n');
    csv.push_str("budget_bytes,r_bits,k_chunk,mean_mse\n");
    for row in &report.rows {
        writeln!(
            csv,
            "{},{},{},{}",
            row.budget_bytes, row.r_bits, row.k_chunk, row.mean_mse
        )
        .unwrap();
    }
    for (budget, bits) in &report.skipped {
        writeln!(csv, "# skipped budget={budget} r_bits={bits} (k_chunk out of range)").unwrap();
    }
    write_atomic(&a.out, csv.as_bytes())
}

fn cmd_eval_compare(a: &EvalCompareArgs) -> Result<(), Error> {
    let ws = WeightSet::import(&a.weights, &a.whats)?;
    let trace = ActivationTrace::new(Matrix::load(&a.trace)?)?;
    let calibration = ActivationTrace::new(Matrix::load(&a.calibration)?)?;
    let qr = residual_quantize(&ws.residual, a.residual_bits)?;
    let num_chunks = ws.d_in().div_ceil(CHUNK);
    let b = derive_boundaries(&calibration, a.kchunk * num_chunks)?;
    let stats = selection_comparison(&ws, &qr, &trace, &calibration, a.kchunk, &b, a.seed)?;
    let mut csv = provenance(
        "eval-compare",
        Some(a.seed),
        &[&a.weights, &a.whats, &a.trace, &a.calibration],
    )?;
    csv.push('\n');
    writeln!(csv, "# residual_bits={} k_chunk={}", a.residual_bits, a.kchunk).unwrap();
    csv.push_str("policy,mean_mse,mean_recall\n");
    for s in &stats {
        writeln!(csv, "{},{},{}", s.policy.as_str(), s.mean_mse, s.mean_recall).unwrap();
    }
    write_atomic(&a.out, csv.as_bytes())
}

fn cmd_gen_synthetic(a: &GenSyntheticArgs) -> Result<(), Error> {
    if a.out_weights.is_none() && a.out_trace.is_none() {
        return Err(Error::Precondition(
            "at least one of --out-weights / --out-trace is required".into(),
        ));
    }
    if let Some(out) = &a.out_weights {
        let w = gen_weights(a.din, a.dout, a.seed);
        save_matrix_atomic(&w, out)?;
    }
    if let Some(out) = &a.out_trace {
        let cfg = SynthTraceConfig {
            steps: a.steps,
            d_in: a.din,
            persistent_fraction: a.persistent_fraction,
            persistent_boost: a.persistent_boost,
            ..Default::default()
        };
        let trace = gen_trace(&cfg, a.seed.wrapping_add(1))?;
        save_matrix_atomic(&trace.steps, out)?;
    }
    Ok(())
}
