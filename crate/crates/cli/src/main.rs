use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};

use fxtutor_cli::{commands, server, CliError};
use fxtutor_core::dsp::EffectKind;
use fxtutor_core::ensemble::{Engine, ModelSet, PolicyKind};
use fxtutor_core::metrics::MetricKind;
use fxtutor_core::models::SelectorKind;
use fxtutor_core::pipeline::RunConfig;

/// Iterative effect programming: render a corpus, train the models, evaluate
/// them, or serve interactive sessions.
#[derive(Debug, Parser)]
#[command(name = "fxtutor", version)]
struct Cli {
    /// RunConfig JSON. Defaults apply when neither this nor FXTUTOR_CONFIG is set.
    #[arg(long, global = true, env = "FXTUTOR_CONFIG")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render every clip and chain prefix, plus the manifest.
    RenderCorpus {
        /// Overrides the corpus seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the effect parameter models (all five unless named).
    TrainParams {
        #[arg(long = "effect")]
        effects: Vec<EffectKind>,
    },
    /// Train effect selection models (all kinds unless named).
    TrainSelector {
        #[arg(long = "kind")]
        kinds: Vec<SelectorKind>,
    },
    /// Run one system over held-out pairs and report metric deltas.
    Evaluate {
        #[arg(long, default_value = "serum_rnn")]
        policy: PolicyKind,
        /// Total pairs, spread over chain lengths; defaults to the config.
        #[arg(long)]
        pairs: Option<usize>,
    },
    /// Mean metric delta against the number of tolerated mistakes.
    SweepStop {
        #[arg(long, default_value = "serum_rnn")]
        policy: PolicyKind,
        #[arg(long)]
        metric: Option<MetricKind>,
        #[arg(long)]
        pairs: Option<usize>,
    },
    /// One session on a pair of WAV files, printing every step.
    Run {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long, default_value = "serum_rnn")]
        policy: PolicyKind,
    },
    /// Serve the session API.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
    },
}

fn serve(cfg: &RunConfig, addr: SocketAddr) -> Result<(), CliError> {
    let models = ModelSet::load(&cfg.paths.checkpoints)?;
    let engine = Engine::new(Arc::new(models), cfg.corpus.sample_rate, cfg.mssmae.clone())?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        eprintln!("listening on http://{addr}");
        axum::serve(listener, server::router(engine))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
    })?;
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let mut cfg = commands::load_config(cli.config.as_deref())?;
    match cli.command {
        Command::RenderCorpus { seed } => {
            if let Some(s) = seed {
                cfg.corpus.seed = s;
            }
            commands::render_corpus(&cfg)
        }
        Command::TrainParams { effects } => commands::train_params(&cfg, &effects),
        Command::TrainSelector { kinds } => commands::train_selector(&cfg, &kinds),
        Command::Evaluate { policy, pairs } => commands::evaluate(&cfg, policy, pairs),
        Command::SweepStop { policy, metric, pairs } => commands::sweep_stop(&cfg, policy, metric, pairs),
        Command::Run { input, target, policy } => commands::run(&cfg, &input, &target, policy),
        Command::Serve { addr } => serve(&cfg, addr),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
