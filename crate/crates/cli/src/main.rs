use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use e2l::runtime::{self, EngineOptions};
use e2l_core::control::{read_delivery_log, summarize, ScenarioConfig};

#[derive(Parser)]
#[command(name = "e2l", about = "Edge-aggregating LoRaWAN network emulator")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario and write its report.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        /// Override the scenario duration, in seconds.
        #[arg(long)]
        duration: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Follow the wall clock (pacing 1 unless the scenario sets another ratio).
        #[arg(long)]
        realtime: bool,
        /// Serve the control API on this address.
        #[arg(long)]
        serve: Option<SocketAddr>,
        /// Final report path. The delivery log is written next to it.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Check a scenario file without running it.
    Validate {
        #[arg(long)]
        scenario: PathBuf,
    },
    /// Summarize a delivery log.
    Report { log: PathBuf },
}

fn delivery_log_path(report: &Path) -> PathBuf {
    report.with_extension("deliveries.ndjson")
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Cmd::Validate { scenario } => {
            let cfg = ScenarioConfig::load(&scenario)?;
            println!("{}: ok ({} devices, {} gateways)", scenario.display(), cfg.devices.len(), cfg.gateways.len());
        }
        Cmd::Report { log } => {
            let file = std::fs::File::open(&log).with_context(|| format!("opening {}", log.display()))?;
            let records = read_delivery_log(std::io::BufReader::new(file))?;
            println!("{}", serde_json::to_string_pretty(&summarize(&records))?);
        }
        Cmd::Run { scenario, duration, seed, realtime, serve, report } => {
            let mut cfg = ScenarioConfig::load(&scenario)?;
            if let Some(d) = duration {
                if !(d.is_finite() && d > 0.0) {
                    bail!("--duration must be positive");
                }
                cfg.duration_s = d;
            }
            if realtime && cfg.pacing == 0.0 {
                cfg.pacing = 1.0;
            }
            let opts = EngineOptions { pacing: cfg.pacing, autostart: true, exit_when_finished: serve.is_none() };
            let (handle, join) = runtime::spawn(cfg, seed, opts)?;
            if let Some(addr) = serve {
                let rt = tokio::runtime::Runtime::new()?;
                rt.block_on(async {
                    let listener = tokio::net::TcpListener::bind(addr).await?;
                    log::info!("control API on http://{}", listener.local_addr()?);
                    axum::serve(listener, e2l::api::router(handle.clone()))
                        .with_graceful_shutdown(async {
                            let _ = tokio::signal::ctrl_c().await;
                        })
                        .await?;
                    anyhow::Ok(())
                })?;
                handle.shutdown();
            }
            drop(handle);
            let sim = join.join().map_err(|_| anyhow::anyhow!("engine thread panicked"))?;
            let rep = sim.report();
            let text = rep.to_json();
            match report {
                Some(path) => {
                    std::fs::write(&path, &text).with_context(|| format!("writing {}", path.display()))?;
                    let log_path = delivery_log_path(&path);
                    std::fs::write(&log_path, sim.delivery_log())
                        .with_context(|| format!("writing {}", log_path.display()))?;
                    log::info!("report {} and deliveries {}", path.display(), log_path.display());
                }
                None => println!("{text}"),
            }
            let acc = rep.metrics.accounting;
            log::info!("trace {} accounting balanced: {}", rep.trace_hash, acc.balanced());
        }
    }
    Ok(())
}
