//! Command-line entry points.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand};

use crate::config::{parse_config, ConfigError};
use crate::orchestrator::{restore_server, run_centralized, Orchestrator, OrchestratorError, Restore, TrainingOutcome};
use crate::telemetry::{Archive, Scope};
use crate::train::perplexity;
use crate::transport::{transfer_time, BlobStore, FsStore, MemoryStore, NetworkModel};

#[derive(Parser, Debug)]
#[command(name = "fedforge", version, about = "Federated pre-training of small language models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train from scratch as described by a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Blob store root. Falls back to the config's runtime.blob_root,
        /// then FEDFORGE_STORE, then an in-memory store.
        #[arg(long)]
        store: Option<PathBuf>,
        /// Directory for CSV exports of every scope.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Continue the run whose checkpoints live in the store.
    Resume {
        #[arg(long, env = "FEDFORGE_STORE")]
        store: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Centralized training with the same local pipeline and step count.
    Baseline {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time to send a model over a link.
    EstimateComm {
        #[arg(long)]
        params: u64,
        #[arg(long, default_value_t = 4)]
        bytes_per_param: u32,
        #[arg(long)]
        bandwidth_mbps: f64,
        #[arg(long, default_value_t = 0.0)]
        latency_s: f64,
    },
    /// Write metrics CSVs from the checkpoints in a store.
    Export {
        #[arg(long, env = "FEDFORGE_STORE")]
        store: PathBuf,
        /// server_round, client_step, client_round, eval or all.
        #[arg(long, default_value = "all")]
        scope: String,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

enum Failure {
    /// Bad input: exit status 2.
    Usage(String),
    /// Anything that went wrong while running: exit status 1.
    Runtime(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Usage(format!("invalid config: {e}"))
    }
}

impl From<OrchestratorError> for Failure {
    fn from(e: OrchestratorError) -> Self {
        match e {
            OrchestratorError::Config(c) => c.into(),
            OrchestratorError::NoCheckpoint => Failure::Usage("no checkpoint found".into()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn runtime<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Runtime(e.to_string())
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit status.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            2
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            1
        }
    }
}

fn dispatch(command: Command) -> Result<(), Failure> {
    match command {
        Command::Run { config, store, out } => {
            let config = parse_config(&config)?;
            let root = store
                .or_else(|| config.runtime.blob_root.clone())
                .or_else(|| std::env::var_os("FEDFORGE_STORE").map(PathBuf::from));
            let (store, root) = open_store(root)?;
            let mut orch = Orchestrator::new(config, store)?;
            if let Some(root) = &root {
                orch = orch.with_event_log(&root.join("events.jsonl"))?;
            }
            let outcome = orch.run_training()?;
            finish(&outcome, root.as_deref(), out.as_deref())
        }
        Command::Resume { store, out } => {
            if !store.is_dir() {
                return Err(Failure::Usage(format!("no checkpoint found (no store at {})", store.display())));
            }
            let fs_store: Arc<dyn BlobStore> = Arc::new(FsStore::open(&store).map_err(runtime)?);
            let (orch, state) = Orchestrator::resume(fs_store)?;
            let mut orch = orch.with_event_log(&store.join("events.jsonl"))?;
            println!("resuming at round {}", state.round);
            let outcome = orch.continue_training(state)?;
            finish(&outcome, Some(&store), out.as_deref())
        }
        Command::Baseline { config, out } => {
            let config = parse_config(&config)?;
            let outcome = run_centralized(&config)?;
            println!(
                "centralized: {} steps, validation perplexity {:.4}",
                config.federation.rounds * config.federation.local_steps,
                perplexity(outcome.final_loss)
            );
            if let Some(out) = out {
                export_all(&outcome.archive, &out, &Scope::ALL)?;
            }
            Ok(())
        }
        Command::EstimateComm { params, bytes_per_param, bandwidth_mbps, latency_s } => {
            if params == 0 || bytes_per_param == 0 {
                return Err(Failure::Usage("params and bytes-per-param must be positive".into()));
            }
            if !(bandwidth_mbps > 0.0 && bandwidth_mbps.is_finite()) || !(latency_s >= 0.0) {
                return Err(Failure::Usage("bandwidth must be positive and latency non-negative".into()));
            }
            let net = NetworkModel::from_mbps(bandwidth_mbps, latency_s, bytes_per_param);
            println!("{:.1} s", transfer_time(params, &net));
            Ok(())
        }
        Command::Export { store, scope, out } => {
            let scopes = if scope == "all" {
                Scope::ALL.to_vec()
            } else {
                vec![Scope::parse(&scope).ok_or_else(|| Failure::Usage(format!("unknown scope {scope:?}")))?]
            };
            if !store.is_dir() {
                return Err(Failure::Usage(format!("no checkpoint found (no store at {})", store.display())));
            }
            let fs_store = FsStore::open(&store).map_err(runtime)?;
            let restored = match restore_server(&fs_store)? {
                Restore::Fresh => return Err(Failure::Usage("no checkpoint found".into())),
                Restore::Resumed(r) => r,
            };
            let mut archive = Archive::new();
            archive.extend(restored.metrics).map_err(runtime)?;
            export_all(&archive, &out, &scopes)
        }
    }
}

fn open_store(root: Option<PathBuf>) -> Result<(Arc<dyn BlobStore>, Option<PathBuf>), Failure> {
    match root {
        Some(root) => Ok((Arc::new(FsStore::open(&root).map_err(runtime)?), Some(root))),
        None => Ok((Arc::new(MemoryStore::new()), None)),
    }
}

fn finish(outcome: &TrainingOutcome, root: Option<&Path>, out: Option<&Path>) -> Result<(), Failure> {
    let archive = &outcome.archive;
    if let Some(root) = root {
        archive.write_jsonl(&root.join("metrics.jsonl")).map_err(runtime)?;
    }
    if let Some(out) = out {
        export_all(archive, out, &Scope::ALL)?;
    }
    let last_eval = archive.rows(Scope::Eval).last().and_then(|r| r.get("perplexity"));
    match last_eval {
        Some(ppl) => println!("round {}: validation perplexity {ppl:.4}", outcome.state.round),
        None => println!("round {}", outcome.state.round),
    }
    Ok(())
}

fn export_all(archive: &Archive, out: &Path, scopes: &[Scope]) -> Result<(), Failure> {
    fs::create_dir_all(out).map_err(runtime)?;
    for &scope in scopes {
        let path = out.join(format!("{}.csv", scope.as_str()));
        archive.export_csv(scope, &path).map_err(runtime)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}
