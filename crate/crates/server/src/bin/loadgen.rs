use std::path::PathBuf;
use std::time::Duration;

use anyhow::bail;
use batchstore::client::GatewayClient;
use batchstore::loadgen::{parse_size, prepare_dataset, run, run_cachedrop, BenchConfig};
use batchstore_core::stats::BenchMode;
use clap::{Parser, ValueEnum};

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Get,
    Getbatch,
}

/// Benchmarks per-object GET against GetBatch.
#[derive(Parser)]
#[command(name = "loadgen", version)]
struct Args {
    #[arg(long, value_enum, default_value = "getbatch")]
    mode: Mode,
    /// Object size: bytes or with a unit (10KiB, 1MiB).
    #[arg(long, default_value = "10KiB")]
    size: String,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 8)]
    workers: usize,
    /// Run length in seconds.
    #[arg(long, default_value_t = 60)]
    duration: u64,
    #[arg(long, default_value = "bench")]
    bucket: String,
    #[arg(long, default_value = "http://127.0.0.1:8080")]
    gateway: String,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Ask the gateway for colocation-aware DT selection.
    #[arg(long)]
    coloc: bool,
    /// Request streaming output.
    #[arg(long)]
    strm: bool,
    /// Also write the report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
    /// Write this many objects before the run.
    #[arg(long)]
    prepare: Option<usize>,
    /// Objects already present (ignored with --prepare).
    #[arg(long, default_value_t = 1000)]
    count: usize,
    /// Script run after preparation to drop page caches.
    #[arg(long)]
    cachedrop: Option<PathBuf>,
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .init();
    let a = Args::parse();
    let size = parse_size(&a.size)?;
    let client = GatewayClient::new(a.gateway.clone());
    let count = match a.prepare {
        Some(n) => {
            let n = prepare_dataset(&client, &a.bucket, n, size, a.seed, 16).await?;
            eprintln!("prepared {n} objects of {size} bytes in {}", a.bucket);
            n
        }
        None => a.count,
    };
    if let Some(script) = &a.cachedrop {
        run_cachedrop(script)?;
    }
    let cfg = BenchConfig {
        mode: match a.mode {
            Mode::Get => BenchMode::Get,
            Mode::Getbatch => BenchMode::Getbatch,
        },
        object_size: size,
        batch_size: a.batch,
        workers: a.workers,
        duration: Duration::from_secs(a.duration),
        bucket: a.bucket,
        seed: a.seed,
        gateway: a.gateway,
        coloc: a.coloc,
        strm: a.strm,
        count,
    };
    let report = run(&cfg).await?;
    print!("{}", report.render_table());
    if let Some(path) = &a.json {
        std::fs::write(path, serde_json::to_string_pretty(&report)?)?;
    }
    if report.error_rate() > 0.01 {
        bail!("error rate {:.2}% exceeds 1%", report.error_rate() * 100.0);
    }
    Ok(())
}
