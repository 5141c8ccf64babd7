use std::io::{self, Write};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use qkdsim_cli::{
    cmd_batch, cmd_run, cmd_security_check, kms_router, load_serve_config, write_json_lines, CliError, RunArgs,
    SecurityReport,
};
use qkdsim_core::qkd_kms::service::SharedKms;

#[derive(Parser)]
#[command(name = "qkdsim", version, about = "Layered QKD + PQC network simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario under one seed.
    Run {
        /// Scenario file, or the name of a shipped scenario.
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Simulated seconds; defaults to the scenario's `until_s`.
        #[arg(long)]
        until: Option<u64>,
        /// Write the event trace as JSON lines.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Write the run summary as JSON.
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// Run seeds `seed .. seed + N` and aggregate.
    Batch {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        seeds: u64,
        #[arg(long)]
        until: Option<u64>,
    },
    /// Confidentiality verdicts for an adversary, or the full capability matrix.
    SecurityCheck {
        #[arg(long)]
        topology: PathBuf,
        #[arg(long)]
        adversary: Option<PathBuf>,
    },
    /// Serve the ETSI GS QKD 014 key delivery API over HTTP.
    KmsServe {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long)]
        link_config: PathBuf,
        #[arg(long, default_value = "127.0.0.1")]
        bind: std::net::IpAddr,
    },
}

fn print_json<T: serde::Serialize>(v: &T) -> io::Result<()> {
    let mut out = io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, v)?;
    out.write_all(b"\n")
}

fn serve(port: u16, bind: std::net::IpAddr, config: PathBuf) -> Result<(), CliError> {
    let cfg = load_serve_config(&config)?;
    let app = kms_router(Arc::new(SharedKms::new(&cfg)));
    let addr = SocketAddr::new(bind, port);
    let rt = tokio::runtime::Runtime::new().map_err(|source| CliError::Io { path: config.clone(), source })?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|source| CliError::Io { path: PathBuf::from(addr.to_string()), source })?;
        eprintln!("kms for {} listening on {addr}", cfg.local);
        axum::serve(listener, app).await.map_err(|source| CliError::Io { path: PathBuf::from(addr.to_string()), source })
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { scenario, seed, until, trace, summary } => {
            cmd_run(&RunArgs { scenario, seed, until_s: until, trace, summary }).map(|s| print_json(&s))
        }
        Command::Batch { scenario, seeds, until } => cmd_batch(&scenario, seeds, until).map(|b| print_json(&b)),
        Command::SecurityCheck { topology, adversary } => {
            cmd_security_check(&topology, adversary.as_deref()).map(|r| {
                let mut out = io::stdout().lock();
                match r {
                    SecurityReport::Verdicts(v) => write_json_lines(&mut out, &v),
                    SecurityReport::Matrix(m) => write_json_lines(&mut out, &m),
                }
            })
        }
        Command::KmsServe { port, link_config, bind } => serve(port, bind, link_config).map(|()| Ok(())),
    };
    match result {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error[output]: {e}");
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
