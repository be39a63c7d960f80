//! `cora` command line: quantize a float model, search adapter ranks,
//! evaluate models and assemble run reports.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/model error, 3 numeric
//! failure. With `--json` a machine-readable summary (or error) goes to
//! stdout; human-readable messages always go to stderr.

use std::ffi::OsString;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use cora::convnet::{top1_accuracy, AdaptedQuantModel, Dataset, Model};
use cora::io::{
    load_dataset, load_model, load_quantized, save_quantized, to_canonical_json, write_json, write_report, Accuracy,
    RunReport, Split,
};
use cora::quant::{ClipScheme, QuantMode, QuantSpec};
use cora::search::{finalize, heuristic_ranks, model_rank_norm_coeffs, search, SearchConfig, SearchOutcome};
use cora::{Error, FormatError};

pub const EXIT_OK: u8 = 0;
pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "cora", version, about = "Low-bit quantization with low-rank residual adapters")]
struct Cli {
    /// Print a JSON summary (or error) on stdout.
    #[arg(long, global = true)]
    json: bool,

    /// Worker threads for batch evaluation (default: all cores). Results do
    /// not depend on the thread count.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Quantize a float model and attach adapters per --mode; writes a qmodel.
    Quantize(QuantizeArgs),
    /// Search adapter ranks; writes qmodel, solution JSON and trace CSV.
    Search(SearchArgs),
    /// Top-1 accuracy and equivalent bit-width of a model or qmodel.
    Eval(EvalArgs),
    /// Full pipeline (float, plain, heuristic, searched) into a run report.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    /// No adapters.
    None,
    /// Ranks ⌊b·R_l⌋.
    Heuristic,
    /// Searched ranks (needs --calib).
    Optimal,
}

#[derive(Debug, Args)]
struct QuantArgs {
    /// Main-network weight bit-width (2..=8).
    #[arg(long, default_value_t = 4)]
    bits: u8,
    /// Adapter weight bit-width (2..=8).
    #[arg(long = "adapter-bits", default_value_t = 8)]
    adapter_bits: u8,
    /// Store adapters as f32 instead of quantizing them.
    #[arg(long = "float-adapters")]
    float_adapters: bool,
    /// Weight clipping: `minmax` or `normal:K`.
    #[arg(long, default_value = "normal:4")]
    clip: ClipScheme,
    /// Symmetric instead of asymmetric weight quantization.
    #[arg(long)]
    symmetric: bool,
}

impl QuantArgs {
    fn weight_spec(&self) -> cora::Result<QuantSpec> {
        let mode = if self.symmetric { QuantMode::Symmetric } else { QuantMode::Asymmetric };
        QuantSpec::new(self.bits, self.clip, mode)
    }

    fn adapter_spec(&self) -> cora::Result<Option<QuantSpec>> {
        let spec = QuantSpec::adapters(self.adapter_bits)?;
        Ok((!self.float_adapters).then_some(spec))
    }
}

#[derive(Debug, Args)]
struct SearchFlags {
    /// Parameter budget b ∈ [0, 1].
    #[arg(long, default_value_t = 0.05)]
    budget: f64,
    /// Budget penalty coefficient λ.
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    /// Butterworth mask order k.
    #[arg(long, default_value_t = 4)]
    order: u32,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 250)]
    iters: usize,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    /// Per-component gradient clip bound.
    #[arg(long = "grad-clip", default_value_t = 0.2)]
    grad_clip: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl SearchFlags {
    fn config(&self) -> cora::Result<SearchConfig> {
        let cfg = SearchConfig {
            budget: self.budget,
            lambda: self.lambda,
            order: self.order,
            learning_rate: self.lr,
            iterations: self.iters,
            batch_size: self.batch,
            grad_clip: self.grad_clip,
            seed: self.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
struct QuantizeArgs {
    /// Float model (.cora-model).
    #[arg(long)]
    model: PathBuf,
    /// Calibration set, required for --mode optimal.
    #[arg(long)]
    calib: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Mode::Heuristic)]
    mode: Mode,
    /// Output qmodel path.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    quant: QuantArgs,
    #[command(flatten)]
    search: SearchFlags,
}

#[derive(Debug, Args)]
struct SearchArgs {
    #[arg(long)]
    model: PathBuf,
    /// Calibration set (.cora-data).
    #[arg(long, alias = "data")]
    calib: PathBuf,
    /// Output directory for model.cora-qmodel, solution.json and trace.csv.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    quant: QuantArgs,
    #[command(flatten)]
    search: SearchFlags,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// A .cora-model or .cora-qmodel file.
    #[arg(long)]
    model: PathBuf,
    /// Evaluation set (.cora-data).
    #[arg(long)]
    data: PathBuf,
}

#[derive(Debug, Args)]
struct ReportArgs {
    #[arg(long)]
    model: PathBuf,
    /// Calibration set used by the search.
    #[arg(long)]
    calib: PathBuf,
    /// Held-out evaluation set.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for report.json, solution.json and trace.csv.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    quant: QuantArgs,
    #[command(flatten)]
    search: SearchFlags,
}

/// Errors of the command line: library failures plus usage errors found
/// after parsing.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) | Failure::Core(Error::InvalidArgument(_)) => EXIT_USAGE,
            Failure::Core(Error::Numeric(_)) => EXIT_NUMERIC,
            Failure::Core(_) => EXIT_DATA,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            Failure::Usage(_) | Failure::Core(Error::InvalidArgument(_)) => "usage",
            Failure::Core(Error::Numeric(_)) => "numeric",
            Failure::Core(Error::Io { .. }) => "io",
            Failure::Core(Error::Format(f)) => match f {
                FormatError::BadMagic => "bad_magic",
                FormatError::VersionMismatch { .. } => "version_mismatch",
                FormatError::Truncated(_) => "truncated",
                FormatError::Integrity => "integrity",
                FormatError::Manifest(_) => "manifest",
                FormatError::WrongKind { .. } => "wrong_kind",
                FormatError::Composition(_) => "composition",
            },
            Failure::Core(_) => "model",
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Usage(m) => m.clone(),
            Failure::Core(e) => e.to_string(),
        }
    }
}

type Outcome = std::result::Result<Value, Failure>;

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run<I, S>(argv: I) -> u8
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let json_output = cli.json;
    let result = with_threads(cli.threads, || dispatch(cli.command, json_output));
    match result {
        Ok(summary) => {
            if json_output {
                print!("{}", to_canonical_json(&summary).expect("summary serializes"));
            }
            EXIT_OK
        }
        Err(f) => {
            eprintln!("error: {}", f.message());
            if json_output {
                let v = json!({ "error": f.kind(), "message": f.message(), "exit_code": f.exit_code() });
                print!("{}", to_canonical_json(&v).expect("error serializes"));
            }
            f.exit_code()
        }
    }
}

fn with_threads(threads: Option<usize>, f: impl FnOnce() -> Outcome + Send) -> Outcome {
    match threads {
        None => f(),
        Some(0) => Err(Failure::Usage("--threads must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Failure::Usage(format!("cannot start {n} threads: {e}")))?
            .install(f),
    }
}

fn dispatch(command: Command, json_output: bool) -> Outcome {
    match command {
        Command::Quantize(a) => quantize_cmd(a),
        Command::Search(a) => search_cmd(a),
        Command::Eval(a) => eval_cmd(a, json_output),
        Command::Report(a) => report_cmd(a),
    }
}

fn load_split(path: &Path, what: &str) -> Result<Dataset<f64>, Failure> {
    let (data, split) = load_dataset(path)?;
    if what == "calibration" && split != Split::Calibration {
        eprintln!("warning: {} is tagged {split}, using it for calibration", path.display());
    }
    Ok(data)
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| Failure::Core(Error::Io { path: dir.into(), source: e }))
}

fn run_search(
    q: &AdaptedQuantModel<f64>,
    calib: &Dataset<f64>,
    cfg: &SearchConfig,
) -> Result<SearchOutcome<f64>, Failure> {
    let start = Instant::now();
    let outcome = search(q, calib, cfg)?;
    eprintln!("search: {} iterations in {:.1}s", outcome.trace.records.len(), start.elapsed().as_secs_f64());
    Ok(outcome)
}

fn write_trace(path: &Path, outcome: &SearchOutcome<f64>) -> Result<(), Failure> {
    let io = |e| Failure::Core(Error::Io { path: path.into(), source: e });
    let file = File::create(path).map_err(io)?;
    outcome.trace.write_csv(BufWriter::new(file)).map_err(io)
}

/// Attaches adapters for `mode`; returns the integer ranks (empty for none).
fn attach(
    q: &mut AdaptedQuantModel<f64>,
    mode: Mode,
    quant: &QuantArgs,
    optimal: Option<&SearchOutcome<f64>>,
    budget: f64,
) -> Result<Vec<usize>, Failure> {
    let adapter_spec = quant.adapter_spec()?;
    Ok(match mode {
        Mode::None => {
            q.clear_adapters()?;
            Vec::new()
        }
        Mode::Heuristic => {
            let r = heuristic_ranks(budget, &q.max_ranks());
            q.set_hard_ranks(&r)?;
            if let Some(spec) = &adapter_spec {
                q.quantize_adapters(spec)?;
            }
            r
        }
        Mode::Optimal => {
            let outcome = optimal.expect("optimal mode has a search outcome");
            finalize(q, &outcome.ranks, adapter_spec.as_ref())?
        }
    })
}

fn quantize_cmd(a: QuantizeArgs) -> Outcome {
    let spec = a.quant.weight_spec()?;
    let cfg = a.search.config()?;
    a.quant.adapter_spec()?;
    let calib = match (a.mode, &a.calib) {
        (Mode::Optimal, None) => return Err(Failure::Usage("--mode optimal needs --calib".into())),
        (Mode::Optimal, Some(p)) => Some(load_split(p, "calibration")?),
        _ => None,
    };
    let float: Model<f64> = load_model(&a.model)?;
    let mut q = AdaptedQuantModel::quantize(&float, &spec)?;
    let outcome = calib.as_ref().map(|c| run_search(&q, c, &cfg)).transpose()?;
    let ranks = attach(&mut q, a.mode, &a.quant, outcome.as_ref(), cfg.budget)?;
    save_quantized(&a.out, &q)?;
    eprintln!("wrote {}", a.out.display());
    Ok(json!({ "qmodel": a.out, "ranks": ranks }))
}

fn search_cmd(a: SearchArgs) -> Outcome {
    let spec = a.quant.weight_spec()?;
    let cfg = a.search.config()?;
    a.quant.adapter_spec()?;
    let calib = load_split(&a.calib, "calibration")?;
    let float: Model<f64> = load_model(&a.model)?;
    let mut q = AdaptedQuantModel::quantize(&float, &spec)?;
    let outcome = run_search(&q, &calib, &cfg)?;
    let ranks = attach(&mut q, Mode::Optimal, &a.quant, Some(&outcome), cfg.budget)?;

    create_dir(&a.out)?;
    let (qpath, spath, tpath) =
        (a.out.join("model.cora-qmodel"), a.out.join("solution.json"), a.out.join("trace.csv"));
    save_quantized(&qpath, &q)?;
    write_json(&spath, &outcome.solution())?;
    write_trace(&tpath, &outcome)?;
    eprintln!("wrote {}, {}, {}", qpath.display(), spath.display(), tpath.display());
    Ok(json!({
        "qmodel": qpath,
        "solution": spath,
        "trace": tpath,
        "ranks": ranks,
        "continuous_budget": outcome.coeffs.budget(outcome.ranks.values()),
        "integer_budget": outcome.coeffs.budget_of(&ranks),
    }))
}

/// Loads either kind of model file.
enum AnyModel {
    Float(Model<f64>),
    Quantized(AdaptedQuantModel<f64>),
}

fn load_any(path: &Path) -> Result<AnyModel, Failure> {
    match load_model(path) {
        Ok(m) => Ok(AnyModel::Float(m)),
        Err(Error::Format(FormatError::WrongKind { .. })) => Ok(AnyModel::Quantized(load_quantized(path)?)),
        Err(e) => Err(e.into()),
    }
}

/// `ξ` of a stored quantized model: `n + m·ωᵀr` over its actual adapters,
/// with `m = 32` for f32 adapters.
fn stored_equivalent_bits(q: &AdaptedQuantModel<f64>) -> cora::Result<f64> {
    let ranks: Vec<usize> = q.adapter_ranks().into_iter().map(|r| r.unwrap_or(0)).collect();
    let omega = model_rank_norm_coeffs(q)?;
    let adapter_bits = q
        .convs()
        .find_map(|c| match c.adapter() {
            cora::convnet::AdapterState::Hard { quantized: Some((qa, _)), .. } => Some(qa.spec().bits()),
            cora::convnet::AdapterState::Hard { quantized: None, .. } => Some(32),
            _ => None,
        })
        .unwrap_or(0);
    Ok(f64::from(q.weight_spec().bits()) + f64::from(adapter_bits) * omega.budget_of(&ranks))
}

fn eval_cmd(a: EvalArgs, json_output: bool) -> Outcome {
    let (data, _) = load_dataset::<f64>(&a.data)?;
    let (accuracy, bits) = match load_any(&a.model)? {
        AnyModel::Float(m) => (top1_accuracy(&m, &data)?, 32.0),
        AnyModel::Quantized(q) => (top1_accuracy(&q, &data)?, stored_equivalent_bits(&q)?),
    };
    if !json_output {
        println!("top1 {accuracy:.5}");
        println!("equivalent_bits {bits:.4}");
    }
    Ok(json!({ "top1": accuracy, "equivalent_bits": bits, "samples": data.len() }))
}

fn report_cmd(a: ReportArgs) -> Outcome {
    let start = Instant::now();
    let spec = a.quant.weight_spec()?;
    let cfg = a.search.config()?;
    a.quant.adapter_spec()?;
    let calib = load_split(&a.calib, "calibration")?;
    let (data, _) = load_dataset::<f64>(&a.data)?;
    let float: Model<f64> = load_model(&a.model)?;

    let float_acc = top1_accuracy(&float, &data)?;
    let mut q = AdaptedQuantModel::quantize(&float, &spec)?;
    let plain_acc = top1_accuracy(&q, &data)?;
    attach(&mut q, Mode::Heuristic, &a.quant, None, cfg.budget)?;
    let heuristic_acc = top1_accuracy(&q, &data)?;
    q.clear_adapters()?;
    let outcome = run_search(&q, &calib, &cfg)?;
    let ranks = attach(&mut q, Mode::Optimal, &a.quant, Some(&outcome), cfg.budget)?;
    let optimal_acc = top1_accuracy(&q, &data)?;

    let adapter_bits = if a.quant.float_adapters { 32 } else { a.quant.adapter_bits };
    let mut report = RunReport::new(
        &spec,
        adapter_bits,
        cfg.budget,
        Accuracy { float: float_acc, quantized: plain_acc, heuristic: Some(heuristic_acc), optimal: Some(optimal_acc) },
    );
    report.layers = outcome.solution();
    report.continuous_budget = Some(outcome.coeffs.budget(outcome.ranks.values()));
    report.integer_budget = Some(outcome.coeffs.budget_of(&ranks));
    report.iterations = outcome.trace.records.len();
    report.wall_time_seconds = start.elapsed().as_secs_f64();

    create_dir(&a.out)?;
    let rpath = a.out.join("report.json");
    write_report(&rpath, &report)?;
    write_json(a.out.join("solution.json"), &outcome.solution())?;
    write_trace(&a.out.join("trace.csv"), &outcome)?;
    eprintln!(
        "float {float_acc:.4}  plain {plain_acc:.4}  heuristic {heuristic_acc:.4}  optimal {optimal_acc:.4}  ξ {:.3}",
        report.equivalent_bits
    );
    eprintln!("wrote {}", rpath.display());
    Ok(serde_json::to_value(&report).expect("report serializes"))
}
