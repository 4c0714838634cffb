use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dssd::harness::{
    cmd_run, cmd_serve, cmd_sweep_gamma, cmd_table1, cmd_verify_exactness, render, render_exactness,
    render_sweep, render_table1, AcceptRule, ExactnessConfig, ExperimentConfig, ReportFormat,
};
use dssd::transport::SocketOptions;
use dssd::{Execution, SessionMode, TransportKind, VocabConfig};

const VERIFY_FAILED: u8 = 2;
const CONFIG_ERROR: u8 = 1;

#[derive(Parser)]
#[command(name = "dssd", version, about = "Distributed split speculative decoding experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run sessions over a parameter grid and report one row per point.
    Run(GridArgs),
    /// Sweep the draft length and report the best γ per configuration.
    SweepGamma(GridArgs),
    /// Recompute the reference communication-time grid and check it.
    Table1(OutputArgs),
    /// Check that decoding reproduces the target law exactly.
    VerifyExactness(ExactnessArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Dsd,
    Dssd,
    Llm,
}

impl From<ModeArg> for SessionMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Dsd => SessionMode::Dsd,
            ModeArg::Dssd => SessionMode::Dssd,
            ModeArg::Llm => SessionMode::LlmOnly,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TransportArg {
    Sim,
    Tcp,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Md,
}

#[derive(Args)]
struct OutputArgs {
    #[arg(long, value_enum, default_value = "csv")]
    format: FormatArg,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl OutputArgs {
    fn format(&self) -> ReportFormat {
        match self.format {
            FormatArg::Csv => ReportFormat::Csv,
            FormatArg::Md => ReportFormat::Markdown,
        }
    }

    fn emit(&self, text: &str) -> std::io::Result<()> {
        match &self.out {
            Some(path) => fs::write(path, text),
            None => {
                print!("{text}");
                Ok(())
            }
        }
    }
}

#[derive(Args)]
struct GridArgs {
    #[arg(long, value_enum, value_delimiter = ',', default_value = "dssd")]
    mode: Vec<ModeArg>,
    /// Draft lengths; defaults to 4 for `run` and 2,4,6,8,12,16 for sweeps.
    #[arg(long, value_delimiter = ',')]
    gamma: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0.6")]
    alpha: Vec<f64>,
    #[arg(long, default_value_t = 50_000)]
    vocab_size: usize,
    #[arg(long, default_value_t = 16, value_parser = clap::value_parser!(u32).range(16..=32))]
    bprob: u32,
    #[arg(long, value_delimiter = ',', default_value = "100")]
    up_mbps: Vec<f64>,
    /// Defaults to the uplink rates.
    #[arg(long, value_delimiter = ',')]
    down_mbps: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "20")]
    ntt_ms: Vec<f64>,
    #[arg(long, default_value_t = 2.0)]
    t_slm_ms: f64,
    #[arg(long, default_value_t = 20.0)]
    t_llm_ms: f64,
    /// Tokens to generate per session; unlimited when only --rounds is given.
    #[arg(long)]
    tokens: Option<usize>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seed: Vec<u64>,
    #[arg(long, default_value_t = 128)]
    prompt_len: usize,
    #[arg(long, value_enum, default_value = "sim")]
    transport: TransportArg,
    /// Serve as the edge on host:port (tcp transport).
    #[arg(long, conflicts_with = "connect")]
    listen: Option<String>,
    /// Drive a remote edge at host:port (tcp transport).
    #[arg(long)]
    connect: Option<String>,
    /// Do not sleep for link time or declared model latencies over tcp.
    #[arg(long)]
    no_pace: bool,
    /// Run grid points one after another.
    #[arg(long)]
    sequential: bool,
    #[command(flatten)]
    output: OutputArgs,
}

impl GridArgs {
    fn config(&self, default_gammas: &[usize]) -> Result<ExperimentConfig, String> {
        let vocab = VocabConfig::new(self.vocab_size, self.bprob).map_err(|e| e.to_string())?;
        let rates_mbps = if self.down_mbps.is_empty() {
            self.up_mbps.iter().map(|&r| (r, r)).collect()
        } else if self.down_mbps.len() == self.up_mbps.len() {
            self.up_mbps.iter().copied().zip(self.down_mbps.iter().copied()).collect()
        } else {
            return Err("--down-mbps must list as many rates as --up-mbps".into());
        };
        let transport = match self.transport {
            TransportArg::Sim if self.listen.is_some() || self.connect.is_some() => {
                return Err("--listen/--connect need --transport tcp".into())
            }
            TransportArg::Sim => TransportKind::Sim,
            TransportArg::Tcp => {
                let mut opts = if self.no_pace { SocketOptions::unpaced() } else { SocketOptions::default() };
                opts.connect = self.connect.clone();
                TransportKind::Socket(opts)
            }
        };
        let n_tokens = match (self.tokens, self.rounds) {
            (Some(t), _) => t,
            (None, Some(_)) => usize::MAX,
            (None, None) => dssd::harness::DEFAULT_TOKENS,
        };
        Ok(ExperimentConfig {
            modes: self.mode.iter().map(|&m| m.into()).collect(),
            gammas: if self.gamma.is_empty() { default_gammas.to_vec() } else { self.gamma.clone() },
            alphas: self.alpha.clone(),
            ntt_ms: self.ntt_ms.clone(),
            rates_mbps,
            vocab,
            t_slm_ms: self.t_slm_ms,
            t_llm_ms: self.t_llm_ms,
            n_tokens,
            max_rounds: self.rounds,
            prompt_len: self.prompt_len,
            seeds: self.seed.clone(),
            transport,
            exec: if self.sequential { Execution::Sequential } else { Execution::Parallel },
            ..ExperimentConfig::default()
        })
    }
}

#[derive(Args)]
struct ExactnessArgs {
    #[arg(long, default_value_t = 8)]
    vocab_size: usize,
    #[arg(long, default_value_t = 1000)]
    trials: usize,
    #[arg(long, default_value_t = 100_000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Gate acceptance on min(1, q/p) instead; expected to fail.
    #[arg(long)]
    inverted_ratio: bool,
    #[arg(long)]
    sequential: bool,
}

enum Failure {
    Config(String),
    Verify(String),
}

impl<E: std::error::Error> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Config(e.to_string())
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run(args) => {
            let cfg = args.config(&[4]).map_err(Failure::Config)?;
            if let Some(addr) = &args.listen {
                let summary = cmd_serve(&cfg, addr)?;
                eprintln!(
                    "edge served {} rounds, prefix {} tokens",
                    summary.rounds,
                    summary.prefix.len()
                );
                return Ok(());
            }
            let rows: Vec<_> = cmd_run(&cfg)?.into_iter().map(|p| p.row).collect();
            args.output.emit(&render(&rows, args.output.format())?)?;
        }
        Command::SweepGamma(args) => {
            let cfg = args.config(&[2, 4, 6, 8, 12, 16]).map_err(Failure::Config)?;
            let curves = cmd_sweep_gamma(&cfg)?;
            for c in &curves {
                eprintln!(
                    "best gamma: measured {}, predicted {}{}",
                    c.argmax_measured,
                    c.argmax_predicted,
                    if c.interior() { " (interior)" } else { "" }
                );
            }
            args.output.emit(&render_sweep(&curves, args.output.format())?)?;
        }
        Command::Table1(out) => {
            let report = cmd_table1();
            out.emit(&render_table1(&report, out.format())?)?;
            if !report.passed() {
                return Err(Failure::Verify(format!(
                    "table deviates: {:.4} in probability, {:.4} ms in time",
                    report.max_prob_dev, report.max_time_dev_ms
                )));
            }
        }
        Command::VerifyExactness(args) => {
            let cfg = ExactnessConfig {
                rule: if args.inverted_ratio { AcceptRule::Inverted } else { AcceptRule::Standard },
                exec: if args.sequential { Execution::Sequential } else { Execution::Parallel },
                ..ExactnessConfig::new(args.vocab_size, args.trials, args.samples, args.seed)
            };
            let report = cmd_verify_exactness(&cfg)?;
            print!("{}", render_exactness(&report));
            if !report.passed() {
                return Err(Failure::Verify("output law differs from the target".into()));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(CONFIG_ERROR) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(CONFIG_ERROR)
        }
        Err(Failure::Verify(msg)) => {
            eprintln!("verification failed: {msg}");
            ExitCode::from(VERIFY_FAILED)
        }
    }
}
