use std::path::PathBuf;

use anyhow::Context;
use batchstore::node::{NodeHandle, NodeOptions};
use batchstore_core::config::ClusterConfig;
use clap::Parser;

/// Runs one proxy or target from a cluster config.
#[derive(Parser)]
#[command(name = "batchstore-node", version)]
struct Args {
    #[arg(long)]
    config: PathBuf,
    /// Node id as it appears in the config.
    #[arg(long)]
    id: String,
    /// Runtime worker threads (default: one per CPU).
    #[arg(long, default_value_t = 0)]
    workers: usize,
}

fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| "info".into()),
        )
        .init();
    let args = Args::parse();
    let cfg = ClusterConfig::load(&args.config)
        .with_context(|| format!("loading {}", args.config.display()))?;
    let node = NodeHandle::start(
        &cfg,
        &args.id,
        NodeOptions {
            config_path: Some(args.config.clone()),
            worker_threads: args.workers,
        },
    )
    .with_context(|| format!("starting node {}", args.id))?;
    node.run_until(async {
        let mut term = tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate())
            .expect("install SIGTERM handler");
        tokio::select! {
            _ = tokio::signal::ctrl_c() => {}
            _ = term.recv() => {}
        }
    });
    tracing::info!(node = %args.id, "stopped");
    Ok(())
}
