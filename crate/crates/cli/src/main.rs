mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "foldscale", version, about = "Desk-scale lab for fused kernels, DAP, data pipelines and scaling models")]
struct Cli {
    /// Directory for manifests and default report paths.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Teacher-student training on synthetic data.
    Train(TrainArgs),
    /// Fused kernels against their unfused baselines.
    BenchKernels(BenchArgs),
    /// Tune tile and block sizes, writing the autotune cache.
    Autotune(AutotuneArgs),
    /// Run the data pipeline against a fixed-duration consumer.
    PipelineDemo(PipelineArgs),
    /// Simulate synchronous steps across ranks and break down the loss.
    SimulateScaling(SimArgs),
    /// Compare DAP-N against DAP-1 on one Evoformer block.
    DapVerify(DapArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum OnOff {
    On,
    Off,
}

impl OnOff {
    fn get(self) -> bool {
        self == OnOff::On
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum PrecisionArg {
    F32,
    Bf16,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Blocking,
    Nonblocking,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum OpArg {
    Attention,
    Layernorm,
    All,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Config with `[train]` and `[model]` sections; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dap: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long, value_enum)]
    precision: Option<PrecisionArg>,
    #[arg(long, value_enum)]
    checkpointing: Option<OnOff>,
    #[arg(long, value_enum)]
    replay: Option<OnOff>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Per-step CSV; defaults to `<out-dir>/train_report.csv`.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long, default_value_t = 5)]
    reps: usize,
    #[arg(long, default_value_t = 2)]
    warmup: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Divide every workload dimension's leading size by this factor.
    #[arg(long, default_value_t = 1)]
    shrink: usize,
    /// Defaults to `<out-dir>/bench_kernels.csv`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AutotuneArgs {
    #[arg(long, value_enum, default_value = "all")]
    op: OpArg,
    /// Attention shape `B,H,L,D`.
    #[arg(long, default_value = "8,4,64,16", value_parser = parse_dims::<4>)]
    attn_shape: Dims,
    /// Layernorm shape `ROWS,C`.
    #[arg(long, default_value = "8192,128", value_parser = parse_dims::<2>)]
    ln_shape: Dims,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Defaults to `<out-dir>/autotune.csv`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PipelineArgs {
    #[arg(long, default_value_t = 2)]
    workers: usize,
    #[arg(long, value_enum, default_value = "nonblocking")]
    mode: ModeArg,
    #[arg(long, default_value_t = 64)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Consumer time per batch.
    #[arg(long, default_value_t = 20.0)]
    step_ms: f64,
    /// Typical preparation cost; a tenth of samples cost 20x this.
    #[arg(long, default_value_t = 5.0)]
    base_ms: f64,
    #[arg(long, default_value_t = 4)]
    capacity: usize,
    /// Defaults to `<out-dir>/pipeline_stats.csv`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SimArgs {
    /// Step and straggler model (`[step]`, `[straggler]`, optional `[kernels] bench_csv`).
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value_t = 1)]
    dap: usize,
    #[arg(long, default_value_t = 1)]
    ranks: usize,
    #[arg(long, default_value_t = 1000)]
    steps: usize,
    #[arg(long, value_enum, default_value = "off")]
    sync: OnOff,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Defaults to `<out-dir>/breakdown.csv`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-rank event trace CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DapArgs {
    #[arg(long, default_value_t = 2)]
    dap: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Round collective payloads to bf16.
    #[arg(long, value_enum, default_value = "f32")]
    wire: PrecisionArg,
    /// Largest accepted output deviation; gradients get ten times this.
    #[arg(long, default_value_t = 1e-5)]
    tol: f32,
    /// Rank 0 communication report; defaults to `<out-dir>/comm_report.csv`.
    #[arg(long)]
    comm_report: Option<PathBuf>,
}

#[derive(Clone, Debug)]
struct Dims(Vec<usize>);

fn parse_dims<const N: usize>(s: &str) -> Result<Dims, String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|x| x.trim().parse::<usize>().map_err(|e| format!("`{x}`: {e}")))
        .collect::<Result<_, _>>()?;
    if v.len() != N || v.contains(&0) {
        return Err(format!("expected {N} positive comma-separated sizes"));
    }
    Ok(Dims(v))
}

/// How a command ended, mapped onto the process exit status.
pub enum Failure {
    /// Bad flag, config key or runtime error.
    Usage(String),
    /// A check ran and did not hold.
    Verification(String),
}

impl From<foldscale::Error> for Failure {
    fn from(e: foldscale::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let argv = &argv[1..];
    let result = match &cli.command {
        Command::Train(a) => commands::train(&cli.out_dir, a, argv),
        Command::BenchKernels(a) => commands::bench_kernels(&cli.out_dir, a, argv),
        Command::Autotune(a) => commands::autotune(&cli.out_dir, a, argv),
        Command::PipelineDemo(a) => commands::pipeline_demo(&cli.out_dir, a, argv),
        Command::SimulateScaling(a) => commands::simulate_scaling(&cli.out_dir, a, argv),
        Command::DapVerify(a) => commands::dap_verify(&cli.out_dir, a, argv),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Verification(msg)) => {
            eprintln!("verification failed: {msg}");
            ExitCode::from(2)
        }
    }
}
