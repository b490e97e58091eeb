//! `lightv-sim`: run scenarios, compare modes and sweep the oracles.

use std::fs;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use lightv_core::report::{to_csv, to_text};
use lightv_core::scenarios::{gen_histogram_trace, run_scenario, HistogramWorkload, RunMode, Scenario};
use lightv_core::trace::format_trace;
use lightv_core::verify::{full_sweep, SweepOptions, SweepReport};
use lightv_core::{ConfigError, InjectedFault, SimConfig, SimError};

mod exit {
    pub const CHECK_FAILED: u8 = 1;
    pub const USAGE: u8 = 2;
    pub const CONFIG_UNREADABLE: u8 = 3;
    pub const CONFIG_INVALID: u8 = 4;
    pub const SIM_ABORTED: u8 = 5;
}

#[derive(Parser)]
#[command(name = "lightv-sim", version, about = "Snoop-coherent SoC simulator with a translation-rewriting agent")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and emit its report.
    Run(RunArgs),
    /// Randomized oracle sweep over page-table layouts and machine shapes.
    Verify(VerifyArgs),
    /// Write the histogram workload as a replayable trace file.
    ExportTrace(ExportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ScenarioArg {
    Histogram,
    DemandPaging,
    Isolation,
    Migration,
    CustomTrace,
}

impl From<ScenarioArg> for Scenario {
    fn from(s: ScenarioArg) -> Self {
        match s {
            ScenarioArg::Histogram => Scenario::Histogram,
            ScenarioArg::DemandPaging => Scenario::DemandPaging,
            ScenarioArg::Isolation => Scenario::Isolation,
            ScenarioArg::Migration => Scenario::Migration,
            ScenarioArg::CustomTrace => Scenario::CustomTrace,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Baseline,
    Passive,
    Active,
    All,
}

impl ModeArg {
    fn modes(self) -> Vec<RunMode> {
        match self {
            ModeArg::Baseline => vec![RunMode::Baseline],
            ModeArg::Passive => vec![RunMode::Passive],
            ModeArg::Active => vec![RunMode::Active],
            ModeArg::All => RunMode::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Csv,
}

#[derive(Clone, Copy, ValueEnum)]
enum Inject {
    IndexOffByOne,
}

fn parse_scale(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v.is_finite() && (0.0..=100.0).contains(&v) {
        Ok(v)
    } else {
        Err("scale must be a finite number between 0 and 100".into())
    }
}

#[derive(Args)]
struct RunArgs {
    /// TOML machine description; built-in defaults when absent.
    #[arg(long, env = "LIGHTV_SIM_CONFIG")]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    scenario: ScenarioArg,
    /// Only histogram and custom-trace honor a single mode.
    #[arg(long, value_enum, default_value = "all")]
    mode: ModeArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fraction of the 55.6 MB image processed by the histogram.
    #[arg(long, default_value = "0.01", value_parser = parse_scale)]
    scale: f64,
    #[arg(long, value_enum, default_value = "text")]
    format: Format,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 100)]
    configs: usize,
    #[arg(long, default_value_t = 1000)]
    vas: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Plant a known walker bug; the sweep must then fail.
    #[arg(long, value_enum)]
    inject: Option<Inject>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "0.01", value_parser = parse_scale)]
    scale: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

struct Failure {
    code: u8,
    message: String,
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        let code = match e {
            ConfigError::Io { .. } | ConfigError::Parse(_) => exit::CONFIG_UNREADABLE,
            ConfigError::Invalid { .. } => exit::CONFIG_INVALID,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        let code = match e {
            SimError::Input { .. } => exit::CONFIG_UNREADABLE,
            SimError::Scenario(_) | SimError::Activation(_) | SimError::Table(_) => exit::CONFIG_INVALID,
            _ => exit::SIM_ABORTED,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn emit(out: &Option<PathBuf>, text: &str) -> Result<(), Failure> {
    let r = match out {
        Some(path) => fs::write(path, text),
        None => io::stdout().write_all(text.as_bytes()),
    };
    r.map_err(|e| Failure {
        code: exit::SIM_ABORTED,
        message: format!("cannot write report: {e}"),
    })
}

fn cmd_run(args: &RunArgs) -> Result<u8, Failure> {
    let cfg = match &args.config {
        Some(path) => SimConfig::load(path)?,
        None => SimConfig::default(),
    };
    let report = run_scenario(args.scenario.into(), &cfg, args.seed, args.scale, &args.mode.modes())?;
    let text = match args.format {
        Format::Text => to_text(&report),
        Format::Csv => to_csv(&report),
    };
    emit(&args.out, &text)?;
    if report.passed() {
        Ok(0)
    } else {
        for c in report.checks.iter().filter(|c| !c.passed) {
            eprintln!("check failed: {}", c.name);
        }
        Ok(exit::CHECK_FAILED)
    }
}

fn summary(name: &str, r: &SweepReport) {
    println!(
        "{} {name}: {} configs, {} VAs checked, {} mismatches",
        if r.passed() { "PASS" } else { "FAIL" },
        r.configs,
        r.checked,
        r.mismatches
    );
    if let Some(c) = &r.first {
        println!("  first counterexample: {c}");
    }
}

fn cmd_verify(args: &VerifyArgs) -> Result<u8, Failure> {
    let opts = SweepOptions {
        configs: args.configs,
        vas_per_config: args.vas,
        seed: args.seed,
        inject: args.inject.map(|Inject::IndexOffByOne| InjectedFault::IndexOffByOne),
    };
    let (translation, redirection) = full_sweep(&opts)?;
    summary("translation", &translation);
    summary("redirection", &redirection);
    Ok(if translation.passed() && redirection.passed() {
        0
    } else {
        exit::CHECK_FAILED
    })
}

fn cmd_export(args: &ExportArgs) -> Result<u8, Failure> {
    let trace: Vec<_> = gen_histogram_trace(&HistogramWorkload::scaled(args.scale, args.seed)).collect();
    emit(&args.out, &format_trace(&trace))?;
    Ok(0)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { exit::USAGE } else { 0 });
        }
    };
    let result = match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Verify(a) => cmd_verify(a),
        Command::ExportTrace(a) => cmd_export(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("lightv-sim: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
