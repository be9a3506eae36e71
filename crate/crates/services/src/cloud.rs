//! Layer-2 service: runs the defect detector for ripened frames sent by the
//! edge.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use tokio::io::BufReader;
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::mpsc;
use tokio::task::JoinHandle;
use tokio_util::sync::CancellationToken;
use tracing::{debug, info, warn};

use gradeline_core::detection::{ripeness_subclass, Detector};

use crate::protocol::{write_envelope, DetectRequest, DetectResponse, Envelope, LineReader, Message, DEFAULT_MAX_LINE_BYTES};
use crate::ServiceError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CloudConfig {
    /// Longest accepted request line.
    pub max_line_bytes: usize,
}

impl Default for CloudConfig {
    fn default() -> Self {
        Self {
            max_line_bytes: DEFAULT_MAX_LINE_BYTES,
        }
    }
}

#[derive(Debug, Default)]
pub struct CloudStats {
    pub connections: AtomicU64,
    /// Well-formed detect requests received.
    pub requests: AtomicU64,
    /// Error replies sent.
    pub errors: AtomicU64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CloudStatsSnapshot {
    pub connections: u64,
    pub requests: u64,
    pub errors: u64,
}

impl CloudStats {
    pub fn snapshot(&self) -> CloudStatsSnapshot {
        CloudStatsSnapshot {
            connections: self.connections.load(Ordering::Relaxed),
            requests: self.requests.load(Ordering::Relaxed),
            errors: self.errors.load(Ordering::Relaxed),
        }
    }
}

/// Running cloud service; stops when [`CloudServer::shutdown`] is called or
/// the handle is dropped.
pub struct CloudServer {
    addr: SocketAddr,
    stats: Arc<CloudStats>,
    cancel: CancellationToken,
    task: Option<JoinHandle<()>>,
}

impl CloudServer {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn stats(&self) -> CloudStatsSnapshot {
        self.stats.snapshot()
    }

    pub async fn shutdown(mut self) {
        self.cancel.cancel();
        if let Some(task) = self.task.take() {
            let _ = task.await;
        }
    }
}

impl Drop for CloudServer {
    fn drop(&mut self) {
        self.cancel.cancel();
    }
}

pub async fn serve_cloud(addr: &str, detector: Arc<dyn Detector>, cfg: CloudConfig) -> Result<CloudServer, ServiceError> {
    let listener = TcpListener::bind(addr).await.map_err(|source| ServiceError::Bind {
        addr: addr.to_string(),
        source,
    })?;
    let local = listener.local_addr()?;
    info!(%local, "cloud service listening");
    let stats = Arc::new(CloudStats::default());
    let cancel = CancellationToken::new();
    let task = tokio::spawn(accept_loop(listener, detector, cfg, stats.clone(), cancel.clone()));
    Ok(CloudServer {
        addr: local,
        stats,
        cancel,
        task: Some(task),
    })
}

async fn accept_loop(listener: TcpListener, detector: Arc<dyn Detector>, cfg: CloudConfig, stats: Arc<CloudStats>, cancel: CancellationToken) {
    loop {
        tokio::select! {
            _ = cancel.cancelled() => break,
            accepted = listener.accept() => match accepted {
                Ok((stream, peer)) => {
                    debug!(%peer, "cloud connection");
                    stats.connections.fetch_add(1, Ordering::Relaxed);
                    tokio::spawn(handle_connection(stream, detector.clone(), cfg.clone(), stats.clone(), cancel.clone()));
                }
                Err(e) => warn!("accept failed: {e}"),
            }
        }
    }
}

async fn handle_connection(stream: TcpStream, detector: Arc<dyn Detector>, cfg: CloudConfig, stats: Arc<CloudStats>, cancel: CancellationToken) {
    let _ = stream.set_nodelay(true);
    let (rd, mut wr) = stream.into_split();
    let (tx, mut rx) = mpsc::channel::<Envelope>(64);
    let writer = tokio::spawn(async move {
        while let Some(env) = rx.recv().await {
            if write_envelope(&mut wr, &env).await.is_err() {
                break;
            }
        }
    });
    let mut reader = LineReader::new(BufReader::new(rd), cfg.max_line_bytes);
    let reply_error = |id: String, msg: String| {
        stats.errors.fetch_add(1, Ordering::Relaxed);
        Envelope::new(id, Message::error(msg))
    };
    loop {
        let line = tokio::select! {
            _ = cancel.cancelled() => break,
            line = reader.next_line() => line,
        };
        let line = match line {
            Ok(Some(Ok(line))) => line,
            Ok(Some(Err(e))) => {
                let _ = tx.send(reply_error(String::new(), e.to_string())).await;
                continue;
            }
            Ok(None) | Err(_) => break,
        };
        if line.trim().is_empty() {
            continue;
        }
        let env = match Envelope::decode(&line) {
            Ok(env) => env,
            Err(e) => {
                let _ = tx.send(reply_error(e.id.unwrap_or_default(), e.error.to_string())).await;
                continue;
            }
        };
        match env.message {
            Message::DetectRequest(req) => {
                stats.requests.fetch_add(1, Ordering::Relaxed);
                let (tx, detector, stats) = (tx.clone(), detector.clone(), stats.clone());
                tokio::spawn(async move {
                    let reply = match tokio::task::spawn_blocking(move || run_detector(&req, &*detector)).await {
                        Ok(Ok(resp)) => Message::DetectResponse(resp),
                        Ok(Err(msg)) => {
                            stats.errors.fetch_add(1, Ordering::Relaxed);
                            Message::error(msg)
                        }
                        Err(e) => {
                            stats.errors.fetch_add(1, Ordering::Relaxed);
                            Message::error(format!("detector failed: {e}"))
                        }
                    };
                    let _ = tx.send(Envelope::new(env.id, reply)).await;
                });
            }
            other => {
                let msg = format!("unexpected message type {} for the cloud service", other.type_name());
                let _ = tx.send(reply_error(env.id, msg)).await;
            }
        }
    }
    drop(tx);
    let _ = writer.await;
}

/// Decodes and runs one request; the error string becomes an Error reply.
pub fn run_detector(req: &DetectRequest, detector: &dyn Detector) -> Result<DetectResponse, String> {
    let (img, mask) = req.decode().map_err(|e| e.to_string())?;
    let detections = detector.detect(&img, &mask).map_err(|e| format!("detection failed: {e}"))?;
    Ok(DetectResponse {
        subclass: ripeness_subclass(&detections),
        detections,
    })
}
