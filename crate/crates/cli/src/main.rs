use std::net::SocketAddr;
use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};
use mst_cli::{
    format_outcome, load_checkpoint, parse_protocol, parse_targets, run_eval, run_gen_data,
    run_select, run_train, DatasetSpec,
};
use mst_core::eval::{EvalOptions, MAX_CLICKS};
use mst_core::parallel::Execution;
use mst_serve::session::{DEFAULT_MAX_SESSIONS, DEFAULT_TTL};
use mst_serve::AppState;

#[derive(Parser)]
#[command(name = "mst", version, about = "Click-based interactive segmentation")]
struct Cli {
    /// Run on a single thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes per-epoch checkpoints, loss logs and final.json.
    Train {
        /// TOML training config; the desk preset when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Simulated-click evaluation: NoC / NoF, NoC-Scale and a per-sample CSV.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory or synthetic:SEED:COUNT.
        #[arg(long)]
        dataset: DatasetSpec,
        #[arg(long, default_value = "0.80,0.85,0.90")]
        targets: String,
        #[arg(long, default_value_t = MAX_CLICKS)]
        max_clicks: usize,
        /// zero: empty initial mask; sp: corrupted initial mask.
        #[arg(long, default_value = "zero")]
        protocol: String,
        /// Seed for the corrupted initial masks.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Dump the tokens each fusion block selects after the first simulated click.
    Select {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: DatasetSpec,
        #[arg(long, default_value_t = 4)]
        limit: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a seeded synthetic dataset to a directory.
    GenData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        count: usize,
        #[arg(long, default_value_t = 112)]
        side: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve interactive sessions over HTTP.
    Serve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: std::net::IpAddr,
        #[arg(long, default_value_t = DEFAULT_MAX_SESSIONS)]
        max_sessions: usize,
    },
}

fn main() -> Result<()> {
    tracing_subscriber::fmt().with_writer(std::io::stderr).init();
    let cli = Cli::parse();
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::default()
    };
    match cli.command {
        Command::Train { config, out } => {
            let path = run_train(config.as_deref(), &out, exec)?;
            println!("{}", path.display());
        }
        Command::Eval {
            checkpoint,
            dataset,
            targets,
            max_clicks,
            protocol,
            seed,
            report,
        } => {
            let loaded = load_checkpoint(&checkpoint)?;
            let samples = dataset.load(loaded.model.config().image_size)?;
            let options = EvalOptions {
                targets: parse_targets(&targets)?,
                max_clicks,
                protocol: parse_protocol(&protocol)?,
                seed,
            };
            let outcome = run_eval(&loaded.model, &samples, &options, report.as_deref(), exec)?;
            print!("{}", format_outcome(&outcome, max_clicks));
        }
        Command::Select {
            checkpoint,
            dataset,
            limit,
            out,
        } => {
            let loaded = load_checkpoint(&checkpoint)?;
            let mut samples = dataset.load(loaded.model.config().image_size)?;
            samples.truncate(limit);
            run_select(&loaded.model, &samples, &out)?;
            println!("{}", out.display());
        }
        Command::GenData {
            seed,
            count,
            side,
            out,
        } => run_gen_data(seed, count, side, &out)?,
        Command::Serve {
            checkpoint,
            port,
            host,
            max_sessions,
        } => {
            let loaded = load_checkpoint(&checkpoint)?;
            tracing::info!(checkpoint = %checkpoint.display(), hash = %loaded.hash, "model loaded");
            let state = AppState::new(max_sessions, DEFAULT_TTL);
            state.set_model(loaded.model, loaded.hash);
            tokio::runtime::Runtime::new()?
                .block_on(mst_serve::serve(state, SocketAddr::new(host, port)))?;
        }
    }
    Ok(())
}
