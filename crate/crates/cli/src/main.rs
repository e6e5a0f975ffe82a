//! `smpc`: offline design, validation and closed-loop experiments for
//! contraction-metric stochastic MPC.
//!
//! Exit codes: 0 success, 1 malformed input or I/O error, 2 no feasible
//! contraction rate, 3 certificate not smpc-ready or empty tightened set,
//! 4 a verification check failed, 5 the controller failed online.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::{Failure, Overrides, Report, CERTIFICATE};
use config::ToolkitConfig;

#[derive(Parser)]
#[command(name = "smpc", version, about = "Contraction-metric stochastic MPC toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Toolkit configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides `experiment.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides both open- and closed-loop realization counts.
    #[arg(long)]
    realizations: Option<usize>,
    /// Worker threads; defaults to all available cores.
    #[arg(long)]
    threads: Option<usize>,
    /// 100 realizations and at most 1000 verification samples.
    #[arg(long)]
    fast: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Compute the contraction metric, tightening table and terminal ingredients.
    Design {
        #[command(flatten)]
        common: Common,
        /// Also dump the SDP iterates at the selected rate to `sdp_trace.csv`.
        #[arg(long)]
        sdp_trace: bool,
    },
    /// Run one closed-loop realization and write its trace.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Certificate file; defaults to `<out>/certificate.json`.
        #[arg(long)]
        certificate: Option<PathBuf>,
        /// Apply `w ≡ 0` to the plant.
        #[arg(long)]
        zero_noise: bool,
    },
    /// Verify a certificate and run the open-loop Monte Carlo checks.
    Validate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        certificate: Option<PathBuf>,
    },
    /// Design (cached while the certificate is newer than the config),
    /// validation, closed-loop experiment and shrinking-horizon check.
    Reproduce {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        sdp_trace: bool,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Design { .. } => "design",
            Command::Simulate { .. } => "simulate",
            Command::Validate { .. } => "validate",
            Command::Reproduce { .. } => "reproduce",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::Design { common, .. }
            | Command::Simulate { common, .. }
            | Command::Validate { common, .. }
            | Command::Reproduce { common, .. } => common,
        }
    }
}

fn run(cmd: &Command) -> Result<Report, Failure> {
    let common = cmd.common();
    if let Some(n) = common.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::input(e.to_string()))?;
    }
    let mut cfg = ToolkitConfig::load(&common.config).map_err(Failure::input)?;
    Overrides {
        seed: common.seed,
        realizations: common.realizations,
        fast: common.fast,
    }
    .apply(&mut cfg);
    cfg.validate().map_err(Failure::input)?;
    let out = &common.out;
    let cert_path = |c: &Option<PathBuf>| c.clone().unwrap_or_else(|| out.join(CERTIFICATE));
    match cmd {
        Command::Design { sdp_trace, .. } => commands::design(&cfg, out, *sdp_trace),
        Command::Simulate {
            certificate,
            zero_noise,
            ..
        } => commands::simulate(&cfg, &cert_path(certificate), out, *zero_noise),
        Command::Validate { certificate, .. } => commands::validate(&cfg, &cert_path(certificate), out),
        Command::Reproduce { sdp_trace, .. } => commands::reproduce(&cfg, &common.config, out, *sdp_trace),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { commands::EXIT_INPUT } else { 0 });
        }
    };
    let name = cli.command.name();
    let (code, status, fields) = match run(&cli.command) {
        Ok(r) => (r.code, r.status(), r.fields),
        Err(f) => {
            eprintln!("error: {}", f.message);
            (f.code, f.status, Vec::new())
        }
    };
    let mut line = format!("command={name} status={status} exit={code}");
    for (k, v) in fields {
        line.push_str(&format!(" {k}={v}"));
    }
    println!("{line}");
    ExitCode::from(code)
}
