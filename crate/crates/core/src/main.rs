use std::fmt::Write as _;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use obr::calibration::{build_hessian, gen_calibration, DEFAULT_DAMP_RATIO};
use obr::evaluation::{natural_sparsity, output_error, reconstruction_error, sparsity_audit, EvalReport};
use obr::masking::{MaskMetric, Pattern};
use obr::pipeline::{compress_matrix_with_rotation, Mode, PipelineConfig};
use obr::quantizer::{QuantizedMatrix, QuantizerKind};
use obr::rotation::{build_rotation, validate_orthogonal, RotationKind, RotationSpec, USER_ROTATION_TOL};
use obr::tensor_store::{read_container, write_container, Tensor, TensorContainer};
use obr::{Error, Matrix};

const EXIT_USAGE: u8 = 2;
const EXIT_INPUT: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

#[derive(Parser)]
#[command(name = "obr", version, about = "Joint pruning + quantization with Hessian-based error compensation")]
struct Cli {
    /// Cap on worker threads for per-row solves.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compress a weight matrix.
    Compress(CompressArgs),
    /// Evaluate a compressed matrix against the original.
    Eval(EvalArgs),
    /// Generate synthetic calibration activations.
    GenCalib(GenCalibArgs),
    /// List the entries of a container.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct CompressArgs {
    /// Container with a "weights" entry (and optionally a "rotation" entry).
    #[arg(long)]
    weights: PathBuf,
    /// Container with a "calib" entry.
    #[arg(long)]
    calib: PathBuf,
    /// Pipeline config: a JSON file path or inline JSON. Overrides individual flags.
    #[arg(long)]
    config: Option<String>,
    /// Unstructured pruning ratio; shorthand for --pattern unstructured:<ratio> [default: 0.5]
    #[arg(long)]
    sparsity: Option<f64>,
    /// unstructured:<ratio>, 2:4 or 4:8
    #[arg(long, value_parser = parse_pattern)]
    pattern: Option<Pattern>,
    /// magnitude, wanda, sparsegpt or random [default: wanda]
    #[arg(long, value_parser = parse_metric)]
    mask_metric: Option<MaskMetric>,
    /// rtn or gptq [default: rtn]
    #[arg(long, value_parser = parse_quantizer)]
    quantizer: Option<QuantizerKind>,
    /// Bit width, 2 to 8 [default: 4]
    #[arg(long)]
    bits: Option<u32>,
    /// Share of retained weights whose quantization error is moved onto the rest [default: 0.5]
    #[arg(long)]
    alpha: Option<f64>,
    /// none or hadamard [default: none]
    #[arg(long, value_parser = parse_rotation)]
    rotate: Option<RotationKind>,
    /// Hessian damping as a fraction of its mean diagonal [default: 0.01]
    #[arg(long)]
    damp: Option<f64>,
    /// joint, prune_only or quant_only [default: joint]
    #[arg(long, value_parser = parse_mode)]
    mode: Option<Mode>,
    /// Seed for the random mask metric and the rotation signs [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Destination container for codes, scales, mask and deltas.
    #[arg(long)]
    output: PathBuf,
    /// Write the JSON report here.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Container with the original "weights" entry.
    #[arg(long)]
    weights: PathBuf,
    /// Output of `compress`, or any container with a "weights" entry.
    #[arg(long)]
    compressed: PathBuf,
    /// Container with a "calib" entry.
    #[arg(long)]
    calib: PathBuf,
    /// Pattern to audit against.
    #[arg(long, value_parser = parse_pattern)]
    pattern: Option<Pattern>,
    #[arg(long, default_value_t = DEFAULT_DAMP_RATIO)]
    damp: f64,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct GenCalibArgs {
    /// Input channels (rows of the activation matrix).
    #[arg(long)]
    cin: usize,
    /// Calibration samples (columns).
    #[arg(long)]
    samples: usize,
    /// Pairwise correlation between channels, in [0, 1).
    #[arg(long, default_value_t = 0.0)]
    correlation: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct InspectArgs {
    /// Container to list.
    #[arg(long)]
    input: PathBuf,
}

fn parse_pattern(s: &str) -> Result<Pattern, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_metric(s: &str) -> Result<MaskMetric, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_quantizer(s: &str) -> Result<QuantizerKind, String> {
    match s {
        "rtn" => Ok(QuantizerKind::Rtn),
        "gptq" => Ok(QuantizerKind::Gptq),
        other => Err(format!("unknown quantizer '{other}' (expected rtn or gptq)")),
    }
}

fn parse_rotation(s: &str) -> Result<RotationKind, String> {
    match s {
        "none" => Ok(RotationKind::None),
        "hadamard" => Ok(RotationKind::Hadamard),
        other => Err(format!("unknown rotation '{other}' (expected none or hadamard)")),
    }
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    match s {
        "joint" => Ok(Mode::Joint),
        "prune_only" | "prune-only" => Ok(Mode::PruneOnly),
        "quant_only" | "quant-only" => Ok(Mode::QuantOnly),
        other => Err(format!("unknown mode '{other}'")),
    }
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => EXIT_USAGE,
            Failure::Run(e) if e.is_numerical() => EXIT_NUMERIC,
            Failure::Run(e) => match e.root() {
                Error::Config(_) => EXIT_USAGE,
                _ => EXIT_INPUT,
            },
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };

    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure thread pool: {e}");
            return ExitCode::from(EXIT_USAGE);
        }
    }

    let outcome = match cli.command {
        Command::Compress(args) => cmd_compress(args),
        Command::Eval(args) => cmd_eval(args),
        Command::GenCalib(args) => cmd_gen_calib(args),
        Command::Inspect(args) => cmd_inspect(args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Usage(msg) => eprintln!("error: {msg}"),
                Failure::Run(e) => eprintln!("error: {e}"),
            }
            ExitCode::from(f.exit_code())
        }
    }
}

fn resolve_config(args: &CompressArgs) -> Result<PipelineConfig, Failure> {
    let any_flag = args.sparsity.is_some()
        || args.pattern.is_some()
        || args.mask_metric.is_some()
        || args.quantizer.is_some()
        || args.bits.is_some()
        || args.alpha.is_some()
        || args.rotate.is_some()
        || args.damp.is_some()
        || args.mode.is_some()
        || args.seed.is_some();

    if let Some(src) = &args.config {
        let text = if src.trim_start().starts_with('{') {
            src.clone()
        } else {
            fs::read_to_string(src).map_err(|e| Error::io(src, e))?
        };
        if any_flag {
            eprintln!("warning: --config given; individual pipeline flags are ignored");
        }
        return Ok(PipelineConfig::from_json(&text)?);
    }

    let mut cfg = PipelineConfig::default();
    if let Some(p) = args.pattern {
        cfg.mask.pattern = p;
    } else if let Some(r) = args.sparsity {
        cfg.mask.pattern = Pattern::Unstructured(r);
    }
    if let Some(m) = args.mask_metric {
        cfg.mask.metric = m;
    }
    if let Some(k) = args.quantizer {
        cfg.quantizer.kind = k;
    }
    if let Some(b) = args.bits {
        cfg.quantizer.bits = b;
    }
    if let Some(a) = args.alpha {
        cfg.alpha = a;
    }
    if let Some(r) = args.rotate {
        cfg.rotation.kind = r;
    }
    if let Some(d) = args.damp {
        cfg.damp_ratio = d;
    }
    if let Some(m) = args.mode {
        cfg.mode = m;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
        cfg.rotation.seed = s;
    }
    cfg.validate()
        .map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(cfg)
}

#[derive(Serialize)]
struct CompressReport<'a> {
    config: &'a PipelineConfig,
    report: &'a EvalReport,
    unrotated_rel_recon_error: f64,
    damp_lambda: f64,
}

fn cmd_compress(args: CompressArgs) -> Result<(), Failure> {
    let cfg = resolve_config(&args)?;
    let weights = read_container(&args.weights)?;
    let w = weights.matrix("weights")?;
    let x = read_container(&args.calib)?.matrix("calib")?;

    let q = match weights.get("rotation") {
        Some(t) => {
            let q = t.to_matrix()?;
            validate_orthogonal(&q, USER_ROTATION_TOL)?;
            q
        }
        None => build_rotation(&RotationSpec {
            kind: cfg.rotation.kind,
            seed: cfg.rotation.seed,
            dim: w.cols(),
        })
        .map_err(|e| e.at_stage("rotate", None))?,
    };

    let result = compress_matrix_with_rotation(&w, &x, &q, &cfg)?;
    write_container(&result.to_container()?, &args.output)?;

    if let Some(path) = &args.report {
        let doc = CompressReport {
            config: &cfg,
            report: &result.report,
            unrotated_rel_recon_error: result.unrotated_recon_error,
            damp_lambda: result.damp_lambda,
        };
        let json = serde_json::to_string_pretty(&doc).expect("report serializes");
        fs::write(path, json + "\n").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Final weights (rotated basis) from a compress output or a plain weights container.
fn compressed_weights(c: &TensorContainer) -> obr::Result<(Matrix, Option<QuantizedMatrix>)> {
    if let Some(codes) = c.get("codes") {
        let (rows, cols) = match codes.shape.as_slice() {
            [r, c] => (*r, *c),
            s => return Err(Error::Format(format!("codes have shape {s:?}"))),
        };
        let scales = c.require("scales")?.to_f64_vec();
        if scales.len() != rows {
            return Err(Error::Format(format!("{} scales for {rows} rows", scales.len())));
        }
        let q = QuantizedMatrix {
            rows,
            cols,
            codes: codes.to_i8_vec()?,
            scales,
        };
        Ok((q.dequant(), Some(q)))
    } else {
        Ok((c.matrix("weights")?, None))
    }
}

fn cmd_eval(args: EvalArgs) -> Result<(), Failure> {
    let w = read_container(&args.weights)?.matrix("weights")?;
    let compressed = read_container(&args.compressed)?;
    let x = read_container(&args.calib)?.matrix("calib")?;
    let (w_hat, codes) = compressed_weights(&compressed)?;
    if w_hat.shape() != w.shape() {
        return Err(Error::Shape(format!(
            "compressed weights are {}x{}, original {}x{}",
            w_hat.rows(),
            w_hat.cols(),
            w.rows(),
            w.cols()
        ))
        .into());
    }
    let q = match compressed.get("rotation") {
        Some(t) => {
            let q = t.to_matrix()?;
            validate_orthogonal(&q, USER_ROTATION_TOL)?;
            q
        }
        None => Matrix::identity(w.cols()),
    };
    let (w_rot, x_rot) = obr::rotate_pair(&w, &x, &q)?;
    let hessian = build_hessian(&x_rot, args.damp)?;

    let pattern = args.pattern.unwrap_or(Pattern::Unstructured(0.0));
    let audit = sparsity_audit(&w_hat, pattern);
    let report = EvalReport {
        rel_recon_error: reconstruction_error(&w_rot, &w_hat, &x_rot)?,
        frob_output_error: output_error(&w_rot, &w_hat, &x_rot)?,
        achieved_sparsity: audit.achieved_sparsity,
        pattern_valid: audit.pattern_valid,
        natural_zero_fraction: codes.as_ref().map_or(audit.achieved_sparsity, natural_sparsity),
        per_row_objectives: w_hat
            .iter_rows()
            .zip(w_rot.iter_rows())
            .map(|(a, b)| {
                let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
                hessian.objective(&d)
            })
            .collect(),
        baseline_deltas: Default::default(),
    };
    let json = report.to_json() + "\n";
    if let Some(path) = &args.report {
        fs::write(path, &json).map_err(|e| Error::io(path, e))?;
    }
    emit(&json)
}

fn cmd_gen_calib(args: GenCalibArgs) -> Result<(), Failure> {
    let x = gen_calibration(args.cin, args.samples, args.correlation, args.seed)
        .map_err(|e| Failure::Usage(e.to_string()))?;
    let mut c = TensorContainer::new();
    c.push_matrix("calib", &x)?;
    write_container(&c, &args.output)?;
    Ok(())
}

/// Writes to stdout; a closed pipe (e.g. `| head`) is not an error.
fn emit(text: &str) -> Result<(), Failure> {
    match io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != io::ErrorKind::BrokenPipe => Err(Error::io("<stdout>", e).into()),
        _ => Ok(()),
    }
}

fn zero_fraction(t: &Tensor) -> f64 {
    let n = t.numel();
    if n == 0 {
        return 0.0;
    }
    t.to_f64_vec().iter().filter(|&&v| v == 0.0).count() as f64 / n as f64
}

fn cmd_inspect(args: InspectArgs) -> Result<(), Failure> {
    let c = read_container(&args.input)?;
    let mut out = format!("{}: {} entries\n", display(&args.input), c.len());
    for t in c.entries() {
        let shape: Vec<String> = t.shape.iter().map(ToString::to_string).collect();
        let _ = writeln!(
            out,
            "{:<16} {:<4} [{}] zeros={:.6}",
            t.name,
            t.dtype.name(),
            shape.join(", "),
            zero_fraction(t)
        );
    }
    emit(&out)
}

fn display(p: &Path) -> String {
    p.display().to_string()
}
