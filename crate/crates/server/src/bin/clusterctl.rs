use std::path::PathBuf;
use std::time::Duration;

use anyhow::{bail, Context};
use batchstore::harness::{
    process_alive, remove_store_dirs, signal, terminate, ClusterState, LaunchOptions, ProcessCluster,
    DEFAULT_STARTUP_TIMEOUT,
};
use batchstore_core::config::ClusterConfig;
use clap::{Parser, Subcommand};

/// Starts, stops and perturbs a local multi-process cluster.
#[derive(Parser)]
#[command(name = "clusterctl", version)]
struct Args {
    /// Where `up` records pids for the other subcommands.
    #[arg(long, global = true, default_value = ".clusterctl.json")]
    state: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Launch every node in the config and wait until all are healthy.
    Up {
        config: PathBuf,
        #[arg(long)]
        node_bin: Option<PathBuf>,
        #[arg(long)]
        log_dir: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_STARTUP_TIMEOUT.as_secs())]
        startup_timeout: u64,
    },
    /// Stop every node and remove store directories.
    Down {
        /// Keep store directories.
        #[arg(long)]
        keep: bool,
    },
    /// SIGKILL one node.
    Kill { id: String },
    /// Start one node again.
    Restart { id: String },
    /// Print node pids and liveness.
    Status,
}

fn main() -> anyhow::Result<()> {
    let args = Args::parse();
    match args.cmd {
        Cmd::Up {
            config,
            node_bin,
            log_dir,
            startup_timeout,
        } => {
            if args.state.exists() {
                let old = ClusterState::load(&args.state)?;
                if old.pids.values().any(|&p| process_alive(p)) {
                    bail!("a cluster from {} is still running; run `clusterctl down` first", args.state.display());
                }
            }
            let cluster = ProcessCluster::launch(
                &config,
                LaunchOptions {
                    node_bin,
                    log_dir,
                    startup_timeout: Duration::from_secs(startup_timeout),
                    keep: false,
                },
            )?;
            println!("gateway {}", cluster.gateway_url());
            let state = ClusterState::from_cluster(cluster);
            for (id, pid) in &state.pids {
                println!("{id:<12} pid {pid}");
            }
            state.save(&args.state)?;
        }
        Cmd::Down { keep } => {
            let state = ClusterState::load(&args.state)?;
            for (id, &pid) in &state.pids {
                terminate(pid, Duration::from_secs(5));
                println!("{id:<12} stopped");
            }
            if !keep {
                let cfg = ClusterConfig::load(&state.config)?;
                remove_store_dirs(&cfg);
            }
            std::fs::remove_file(&args.state).context("removing state file")?;
        }
        Cmd::Kill { id } => {
            let mut state = ClusterState::load(&args.state)?;
            let pid = *state.pids.get(&id).with_context(|| format!("unknown node {id}"))?;
            signal(pid, libc::SIGKILL);
            let until = std::time::Instant::now() + Duration::from_secs(5);
            while process_alive(pid) && std::time::Instant::now() < until {
                std::thread::sleep(Duration::from_millis(10));
            }
            state.pids.remove(&id);
            state.save(&args.state)?;
            println!("{id} killed");
        }
        Cmd::Restart { id } => {
            let mut state = ClusterState::load(&args.state)?;
            if let Some(&pid) = state.pids.get(&id) {
                terminate(pid, Duration::from_secs(5));
            }
            state.respawn(&id, DEFAULT_STARTUP_TIMEOUT)?;
            state.save(&args.state)?;
            println!("{id} restarted (pid {})", state.pids[&id]);
        }
        Cmd::Status => {
            let state = ClusterState::load(&args.state)?;
            let cfg = ClusterConfig::load(&state.config)?;
            for id in cfg.node_ids() {
                match state.pids.get(&id) {
                    Some(&pid) if process_alive(pid) => println!("{id:<12} up   pid {pid}"),
                    _ => println!("{id:<12} down"),
                }
            }
        }
    }
    Ok(())
}
