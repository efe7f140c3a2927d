use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

mod commands;
mod manifest;

use manifest::RunManifest;
use tilenpu::gpt2::Optimizer;
use tilenpu::{Backend, MicroOperand, ProblemSize, TileShape};

fn parse<T>(s: &str) -> Result<T, String>
where
    T: std::str::FromStr,
    T::Err: std::fmt::Display,
{
    s.parse().map_err(|e: T::Err| e.to_string())
}

/// `RxC` or `MxKxN`.
#[derive(Debug, Clone)]
struct Dims(Vec<usize>);

fn parse_dims(s: &str) -> Result<Dims, String> {
    let d: Vec<usize> = s
        .split(['x', 'X'])
        .map(|p| p.trim().parse::<usize>().map_err(|_| format!("bad dimension list `{s}`")))
        .collect::<Result<_, _>>()?;
    if !(2..=3).contains(&d.len()) || d.contains(&0) {
        return Err(format!("expected RxC or MxKxN with nonzero parts, got `{s}`"));
    }
    Ok(Dims(d))
}

#[derive(Parser, Debug)]
#[command(name = "tilenpu", version, about = "Tiled GEMM planning and simulation for a 4x4 NPU array", arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Tile a GEMM onto the array and print the plan.
    Plan(PlanArgs),
    /// Show the three-level layout chain of one operand.
    Layout(LayoutArgs),
    /// Schedule the micro-kernel for one tile shape.
    Kernel(KernelArgs),
    /// Run the cycle-approximate simulator on seeded inputs.
    Simulate(SimulateArgs),
    /// Multiply through the offload runtime.
    Gemm(GemmArgs),
    /// Overfit a small GPT-2 on one batch.
    TrainToy(TrainArgs),
    /// Print the per-step FLOP ledger of a model config.
    Flops(FlopsArgs),
}

#[derive(Args, Debug)]
struct PlanArgs {
    /// Problem size MxKxN.
    #[arg(long, value_parser = parse::<ProblemSize>)]
    size: ProblemSize,
    #[arg(long, default_value = "64x64x32", value_parser = parse::<TileShape>)]
    tile: TileShape,
    /// Append the grid description.
    #[arg(long)]
    dump_arch: bool,
    /// Append every shim transfer.
    #[arg(long)]
    emit_schedule: bool,
    /// Write a JSON report here (`-` for standard output).
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct LayoutArgs {
    /// A, B or C.
    #[arg(long, value_parser = parse::<MicroOperand>)]
    op: MicroOperand,
    /// Operand tile RxC, or a full tile MxKxN.
    #[arg(long, default_value = "64x64", value_parser = parse_dims)]
    tile: Dims,
    /// Whole matrix RxC; defaults to one tile.
    #[arg(long, value_parser = parse_dims)]
    size: Option<Dims>,
    /// Print `src -> dst` for every element.
    #[arg(long)]
    dump: bool,
}

#[derive(Args, Debug)]
struct KernelArgs {
    /// Tile shape MxKxN.
    #[arg(long, default_value = "64x64x32", value_parser = parse::<TileShape>)]
    shape: TileShape,
    /// Fail if any dependent VMAC issues before its accumulator is ready.
    #[arg(long)]
    check_schedule: bool,
    /// Use one accumulator instead of four.
    #[arg(long)]
    single_accumulator: bool,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long, value_parser = parse::<ProblemSize>)]
    size: ProblemSize,
    #[arg(long, default_value = "64x64x32", value_parser = parse::<TileShape>)]
    tile: TileShape,
    /// Cost constants file (`key = value`).
    #[arg(long)]
    cost: Option<PathBuf>,
    /// Write one event per line here.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GemmArgs {
    /// Problem size; taken from the files when `--a`/`--b` are given.
    #[arg(long, value_parser = parse::<ProblemSize>)]
    size: Option<ProblemSize>,
    #[arg(long, default_value = "emulated-npu", value_parser = parse::<Backend>)]
    backend: Backend,
    #[arg(long, default_value = "64x64x32", value_parser = parse::<TileShape>)]
    tile: TileShape,
    #[arg(long)]
    cost: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Left operand as a matrix file.
    #[arg(long, requires = "b")]
    a: Option<PathBuf>,
    /// Right operand as a matrix file.
    #[arg(long, requires = "a")]
    b: Option<PathBuf>,
    /// Write the product as a matrix file.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "reference-f32", value_parser = parse::<Backend>)]
    backend: Backend,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f32>,
    /// sgd or adamw.
    #[arg(long, value_parser = parse::<Optimizer>)]
    optimizer: Option<Optimizer>,
    /// Whitespace-separated token ids; a synthetic corpus otherwise.
    #[arg(long)]
    tokens: Option<PathBuf>,
    /// Write per-step metrics as JSON.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FlopsArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
}

/// Typed failure from one of the library modules. The name of the error
/// type and variant leads the message.
#[derive(Debug)]
pub struct DomainError {
    pub kind: String,
    pub message: String,
}

impl DomainError {
    pub fn new(kind: impl Into<String>, message: impl Into<String>) -> Self {
        DomainError {
            kind: kind.into(),
            message: message.into(),
        }
    }
}

fn variant_of<E: std::fmt::Debug>(e: &E) -> String {
    let d = format!("{e:?}");
    d.split(|c: char| !c.is_alphanumeric() && c != '_').next().unwrap_or("").to_string()
}

macro_rules! domain_from {
    ($($t:ty => $name:literal),* $(,)?) => {$(
        impl From<$t> for DomainError {
            fn from(e: $t) -> Self {
                DomainError::new(format!("{}::{}", $name, variant_of(&e)), e.to_string())
            }
        }
    )*};
}

domain_from!(
    tilenpu::PlanError => "PlanError",
    tilenpu::LayoutError => "LayoutError",
    tilenpu::kernel::KernelError => "KernelError",
    tilenpu::SimError => "SimError",
    tilenpu::OffloadError => "OffloadError",
    tilenpu::Gpt2Error => "Gpt2Error",
    tilenpu::offload::io::MatrixIoError => "MatrixIoError",
);

impl From<std::io::Error> for DomainError {
    fn from(e: std::io::Error) -> Self {
        DomainError::new("IoError", e.to_string())
    }
}

pub type CmdResult = Result<(), DomainError>;

/// JSON report with the manifest first.
pub fn write_report(path: &Path, manifest: &RunManifest, body: Value) -> CmdResult {
    let mut doc = json!({ "manifest": manifest });
    if let (Value::Object(d), Value::Object(b)) = (&mut doc, body) {
        d.extend(b);
    }
    let mut text = serde_json::to_string_pretty(&doc).expect("json values serialize");
    text.push('\n');
    if path == Path::new("-") {
        print!("{text}");
    } else {
        std::fs::write(path, text)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let result = match cli.command {
        Command::Plan(a) => commands::plan(a),
        Command::Layout(a) => commands::layout(a),
        Command::Kernel(a) => commands::kernel(a),
        Command::Simulate(a) => commands::simulate(a),
        Command::Gemm(a) => commands::gemm(a),
        Command::TrainToy(a) => commands::train_toy(a),
        Command::Flops(a) => commands::flops(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}: {}", e.kind, e.message);
            ExitCode::from(2)
        }
    }
}
