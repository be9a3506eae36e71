//! Long-running subcommands: the two services and the simulator. Each runs
//! until its work is done or the process gets Ctrl-C or SIGTERM.

use std::io::Write;
use std::path::Path;
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{Context, Result};
use serde_json::json;
use tokio::sync::broadcast;
use tracing::info;

use gradeline_core::classifiers::load_model;
use gradeline_core::detection::SpotDetector;
use gradeline_core::pipeline::GradeConfig;
use gradeline_services::cloud::{serve_cloud, CloudConfig};
use gradeline_services::edge::{serve_edge, EdgeConfig, Mode, SequencedEvent};
use gradeline_services::simulator::{spawn_simulator, ClassMix, SimulatorConfig, SimulatorReport};

use crate::cli::*;
use crate::config::FileConfig;
use crate::output::Output;

fn runtime() -> Result<tokio::runtime::Runtime> {
    Ok(tokio::runtime::Builder::new_multi_thread().enable_all().build()?)
}

async fn shutdown_signal() {
    #[cfg(unix)]
    {
        use tokio::signal::unix::{signal, SignalKind};
        match signal(SignalKind::terminate()) {
            Ok(mut term) => {
                tokio::select! {
                    _ = tokio::signal::ctrl_c() => {}
                    _ = term.recv() => {}
                }
            }
            Err(_) => {
                let _ = tokio::signal::ctrl_c().await;
            }
        }
    }
    #[cfg(not(unix))]
    {
        let _ = tokio::signal::ctrl_c().await;
    }
}

/// Announces bound addresses on one JSON line so scripts can pick up
/// ephemeral ports.
fn announce(value: serde_json::Value) -> Result<()> {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{value}")?;
    out.flush()?;
    Ok(())
}

pub fn cloud(args: &ServeCloudArgs, cfg: &FileConfig, out: &Output) -> Result<ExitCode> {
    let addr = format!("{}:{}", args.bind.as_deref().unwrap_or(&cfg.cloud.bind), args.port.unwrap_or(cfg.cloud.port));
    let detector = Arc::new(SpotDetector::new(cfg.detector)?);
    runtime()?.block_on(async {
        let server = serve_cloud(&addr, detector, CloudConfig { max_line_bytes: cfg.cloud.max_line_bytes }).await?;
        announce(json!({ "service": "cloud", "addr": server.local_addr() }))?;
        shutdown_signal().await;
        info!("shutting down");
        let stats = server.stats();
        server.shutdown().await;
        out.emit(&stats, None)
    })
}

/// Appends events to a JSON-lines file until the channel closes or the
/// stop flag is raised, then drains what is left.
async fn write_events(path: &Path, history: Vec<SequencedEvent>, mut rx: broadcast::Receiver<SequencedEvent>, mut stop: tokio::sync::oneshot::Receiver<()>) -> Result<()> {
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .with_context(|| format!("opening {}", path.display()))?;
    let mut w = std::io::BufWriter::new(file);
    let mut last = 0;
    let mut write = |w: &mut std::io::BufWriter<std::fs::File>, ev: &SequencedEvent| -> Result<()> {
        if ev.seq > last {
            last = ev.seq;
            writeln!(w, "{}", serde_json::to_string(ev)?)?;
            w.flush()?;
        }
        Ok(())
    };
    for ev in &history {
        write(&mut w, ev)?;
    }
    loop {
        tokio::select! {
            r = rx.recv() => match r {
                Ok(ev) => write(&mut w, &ev)?,
                Err(broadcast::error::RecvError::Lagged(n)) => tracing::warn!("event log skipped {n} events"),
                Err(broadcast::error::RecvError::Closed) => break,
            },
            _ = &mut stop => {
                while let Ok(ev) = rx.try_recv() {
                    write(&mut w, &ev)?;
                }
                break;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn edge(args: &ServeEdgeArgs, cfg: &FileConfig, out: &Output) -> Result<ExitCode> {
    let model = load_model(&args.model)?;
    if let Some(v) = args.variant {
        model.ensure_variant(v)?;
    }
    let bind = args.bind.as_deref().unwrap_or(&cfg.edge.bind);
    let ecfg = EdgeConfig {
        line_addr: format!("{bind}:{}", args.port.unwrap_or(cfg.edge.line_port)),
        http_addr: format!("{bind}:{}", args.http_port.unwrap_or(cfg.edge.http_port)),
        cloud_addr: args.cloud_addr.clone().or_else(|| cfg.edge.cloud_addr.clone()),
        cloud_timeout_ms: args.cloud_timeout_ms.unwrap_or(cfg.edge.cloud_timeout_ms),
        max_line_bytes: cfg.edge.max_line_bytes,
        max_upload_bytes: cfg.edge.max_upload_bytes,
        history: cfg.edge.history,
        mode: match args.mode {
            Some(ModeArg::Manual) => Mode::Manual,
            _ => Mode::Auto,
        },
        grade: GradeConfig { segmentation: cfg.segmentation.clone(), routing: cfg.routing.clone() },
    };
    ecfg.validate()?;
    runtime()?.block_on(async {
        let server = serve_edge(model, ecfg).await?;
        let logger = args.event_log.clone().map(|path| {
            let (history, rx) = server.edge.subscribe();
            let (tx, stop) = tokio::sync::oneshot::channel();
            (tx, tokio::spawn(async move { write_events(&path, history, rx, stop).await }))
        });
        announce(json!({
            "service": "edge",
            "line_addr": server.line_addr(),
            "http_addr": server.http_addr(),
        }))?;
        shutdown_signal().await;
        info!("shutting down");
        let stats = server.edge.stats();
        server.shutdown().await;
        if let Some((stop, task)) = logger {
            let _ = stop.send(());
            task.await??;
        }
        out.emit(&stats, None)
    })
}

fn summary_table(r: &SimulatorReport) -> String {
    let pct = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{:.2}%", 100.0 * v));
    format!(
        "emitted {}  sent {}  dropped {}\ngraded {}  routed {}  double-routed {}\nline accuracy {} ({} of {} routes match ground truth)\nerrors {}",
        r.emitted,
        r.sent,
        r.dropped,
        r.graded,
        r.routed,
        r.double_routed,
        pct(r.line_accuracy),
        r.correct_routes,
        r.routed,
        r.errors
    )
}

pub fn simulate(args: &SimulateArgs, cfg: &FileConfig, out: &Output) -> Result<ExitCode> {
    let s = &cfg.simulator;
    let scfg = SimulatorConfig {
        edge_addr: args.edge_addr.clone().unwrap_or_else(|| s.edge_addr.clone()),
        rate: args.rate.unwrap_or(s.rate),
        items: args.items.or(s.items),
        mix: args.mix.map_or(s.mix, |[u, r, o]| ClassMix { unripened: u, ripened: r, overripened: o }),
        seed: args.seed.or(cfg.seed).unwrap_or(0),
        buffer: args.buffer.unwrap_or(s.buffer),
        reconnect_ms: s.reconnect_ms,
        settle_ms: s.settle_ms,
        jitter_bound_ms: s.jitter_bound_ms,
        max_line_bytes: cfg.edge.max_line_bytes,
        policy: cfg.routing.clone(),
    };
    scfg.validate()?;
    let mut report = runtime()?.block_on(async {
        let sim = spawn_simulator(scfg)?;
        let control = sim.control.clone();
        let mut join = tokio::spawn(sim.join());
        let report = tokio::select! {
            r = &mut join => r??,
            _ = shutdown_signal() => {
                control.stop();
                join.await??
            }
        };
        anyhow::Ok(report)
    })?;
    if let Some(path) = &args.log {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?);
        for item in &report.items {
            writeln!(w, "{}", serde_json::to_string(item)?)?;
        }
        w.flush()?;
    }
    report.items.clear();
    let table = summary_table(&report);
    out.emit(&report, Some(table))
}
