//! Layer-1 service at the line: grades frames locally, asks the cloud for
//! defect detection only when the fruit is classified ripened, and serves
//! the operator console over HTTP.

use std::collections::{HashMap, VecDeque};
use std::convert::Infallible;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, State};
use axum::http::{header, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::{Stream, StreamExt};
use serde::{Deserialize, Serialize};
use tokio::io::BufReader;
use tokio::net::tcp::OwnedWriteHalf;
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{broadcast, mpsc, oneshot};
use tokio::task::JoinHandle;
use tokio_stream::wrappers::BroadcastStream;
use tokio_util::sync::CancellationToken;
use tracing::{debug, info, warn};

use gradeline_core::classifiers::{Label, ModelFile};
use gradeline_core::detection::Subclass;
use gradeline_core::imaging::{decode_image, encode_png, RgbImage};
use gradeline_core::pipeline::{finish, first_layer, GradeConfig, GradeResult, GradeStatus, Layer2, Route};
use gradeline_core::segmentation::Mask;

use crate::protocol::{
    decode_image_b64, write_envelope, Control, DetectRequest, Envelope, EventSource, GradeEvent, LineReader, Message, SwitchCommand,
    DEFAULT_MAX_LINE_BYTES,
};
use crate::ServiceError;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Frames come from the line; manual uploads are refused.
    #[default]
    Auto,
    /// The line is held and the operator grades uploaded images.
    Manual,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EdgeConfig {
    /// TCP address for simulator (line) connections.
    pub line_addr: String,
    /// HTTP address for the console.
    pub http_addr: String,
    /// Cloud service address; without one, ripened frames are degraded.
    pub cloud_addr: Option<String>,
    pub cloud_timeout_ms: u64,
    pub max_line_bytes: usize,
    pub max_upload_bytes: usize,
    /// Events and frame images kept for replay.
    pub history: usize,
    pub mode: Mode,
    pub grade: GradeConfig,
}

impl Default for EdgeConfig {
    fn default() -> Self {
        Self {
            line_addr: "127.0.0.1:7100".into(),
            http_addr: "127.0.0.1:8080".into(),
            cloud_addr: None,
            cloud_timeout_ms: 5000,
            max_line_bytes: DEFAULT_MAX_LINE_BYTES,
            max_upload_bytes: 16 << 20,
            history: 1000,
            mode: Mode::Auto,
            grade: GradeConfig::default(),
        }
    }
}

impl EdgeConfig {
    pub fn validate(&self) -> Result<(), ServiceError> {
        if self.cloud_timeout_ms == 0 {
            return Err(ServiceError::Config("cloud_timeout_ms must be positive".into()));
        }
        if self.history == 0 || self.max_line_bytes == 0 || self.max_upload_bytes == 0 {
            return Err(ServiceError::Config("history and size limits must be positive".into()));
        }
        Ok(())
    }
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

#[derive(Debug, Default)]
pub struct CloudClientStats {
    pub requests: AtomicU64,
    pub bytes_sent: AtomicU64,
    pub bytes_received: AtomicU64,
    pub failures: AtomicU64,
}

type Pending = Arc<Mutex<HashMap<String, oneshot::Sender<Message>>>>;

struct CloudConnection {
    writer: OwnedWriteHalf,
    pending: Pending,
    alive: Arc<AtomicBool>,
    reader: JoinHandle<()>,
}

impl Drop for CloudConnection {
    fn drop(&mut self) {
        self.reader.abort();
    }
}

/// Correlating client for the cloud service. Connects lazily, so a run
/// without ripened fruit never opens a connection.
pub struct CloudClient {
    addr: String,
    timeout: Duration,
    max_line_bytes: usize,
    conn: tokio::sync::Mutex<Option<CloudConnection>>,
    next_id: AtomicU64,
    pub stats: Arc<CloudClientStats>,
}

impl CloudClient {
    pub fn new(addr: impl Into<String>, timeout: Duration, max_line_bytes: usize) -> Self {
        Self {
            addr: addr.into(),
            timeout,
            max_line_bytes,
            conn: tokio::sync::Mutex::new(None),
            next_id: AtomicU64::new(1),
            stats: Arc::new(CloudClientStats::default()),
        }
    }

    async fn connect(&self) -> Result<CloudConnection, String> {
        let stream = tokio::time::timeout(self.timeout, TcpStream::connect(&self.addr))
            .await
            .map_err(|_| format!("cloud unreachable: connect to {} timed out", self.addr))?
            .map_err(|e| format!("cloud unreachable: {e}"))?;
        let _ = stream.set_nodelay(true);
        let (rd, writer) = stream.into_split();
        let pending: Pending = Arc::default();
        let alive = Arc::new(AtomicBool::new(true));
        let reader = tokio::spawn(read_replies(
            LineReader::new(BufReader::new(rd), self.max_line_bytes),
            pending.clone(),
            alive.clone(),
            self.stats.clone(),
        ));
        Ok(CloudConnection {
            writer,
            pending,
            alive,
            reader,
        })
    }

    /// Sends one detect request and waits for its reply. Every failure is
    /// reported as [`Layer2::Unavailable`].
    pub async fn detect(&self, img: &RgbImage, mask: &Mask) -> Layer2 {
        let outcome = self.request(img, mask).await;
        if let Layer2::Unavailable(reason) = &outcome {
            self.stats.failures.fetch_add(1, Ordering::Relaxed);
            debug!("layer 2 unavailable: {reason}");
        }
        outcome
    }

    async fn request(&self, img: &RgbImage, mask: &Mask) -> Layer2 {
        let id = format!("d{}", self.next_id.fetch_add(1, Ordering::Relaxed));
        let env = Envelope::new(id.clone(), Message::DetectRequest(DetectRequest::new(img, mask)));
        let (tx, rx) = oneshot::channel();
        {
            let mut guard = self.conn.lock().await;
            if guard.as_ref().is_none_or(|c| !c.alive.load(Ordering::Acquire)) {
                match self.connect().await {
                    Ok(c) => *guard = Some(c),
                    Err(reason) => {
                        *guard = None;
                        return Layer2::Unavailable(reason);
                    }
                }
            }
            let conn = guard.as_mut().expect("connected above");
            conn.pending.lock().unwrap().insert(id.clone(), tx);
            self.stats.requests.fetch_add(1, Ordering::Relaxed);
            match write_envelope(&mut conn.writer, &env).await {
                Ok(n) => {
                    self.stats.bytes_sent.fetch_add(n as u64, Ordering::Relaxed);
                }
                Err(e) => {
                    *guard = None;
                    return Layer2::Unavailable(format!("cloud connection lost: {e}"));
                }
            }
        }
        match tokio::time::timeout(self.timeout, rx).await {
            Err(_) => {
                if let Some(c) = self.conn.lock().await.as_ref() {
                    c.pending.lock().unwrap().remove(&id);
                }
                Layer2::Unavailable(format!("cloud timeout after {} ms", self.timeout.as_millis()))
            }
            Ok(Err(_)) => Layer2::Unavailable("cloud connection lost".into()),
            Ok(Ok(Message::DetectResponse(resp))) => Layer2::Detections(resp.detections),
            Ok(Ok(Message::Error(e))) => Layer2::Unavailable(format!("cloud error: {}", e.message)),
            Ok(Ok(other)) => Layer2::Unavailable(format!("unexpected {} from cloud", other.type_name())),
        }
    }
}

async fn read_replies(mut reader: LineReader<BufReader<tokio::net::tcp::OwnedReadHalf>>, pending: Pending, alive: Arc<AtomicBool>, stats: Arc<CloudClientStats>) {
    while let Ok(Some(line)) = reader.next_line().await {
        let Ok(line) = line else { continue };
        stats.bytes_received.fetch_add(line.len() as u64 + 1, Ordering::Relaxed);
        match Envelope::decode(&line) {
            Ok(env) => {
                if let Some(tx) = pending.lock().unwrap().remove(&env.id) {
                    let _ = tx.send(env.message);
                }
            }
            Err(e) => warn!("undecodable cloud reply: {}", e.error),
        }
    }
    alive.store(false, Ordering::Release);
    // Dropping the senders wakes every waiter with "connection lost".
    pending.lock().unwrap().clear();
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeStatus {
    pub mode: Mode,
    pub paused: bool,
    pub cloud_configured: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub at_ms: u64,
    pub operator: String,
    pub item_id: String,
    pub from: Route,
    pub to: Route,
}

/// Everything the console's event stream carries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "data", rename_all = "snake_case")]
pub enum EdgeEvent {
    Grade(GradeEvent),
    Switch(SwitchCommand),
    State(EdgeStatus),
}

impl EdgeEvent {
    pub fn kind(&self) -> &'static str {
        match self {
            EdgeEvent::Grade(_) => "grade",
            EdgeEvent::Switch(_) => "switch",
            EdgeEvent::State(_) => "state",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequencedEvent {
    pub seq: u64,
    #[serde(flatten)]
    pub event: EdgeEvent,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeStats {
    pub frames: u64,
    pub unripened: u64,
    pub ripened: u64,
    pub overripened: u64,
    pub unclassifiable: u64,
    pub degraded: u64,
    pub market: u64,
    pub defective: u64,
    pub overrides: u64,
    pub cloud_requests: u64,
    pub cloud_bytes_sent: u64,
    pub cloud_bytes_received: u64,
}

struct StoredItem {
    png: Vec<u8>,
    route: Route,
}

#[derive(Default)]
struct Journal {
    next_seq: u64,
    events: VecDeque<SequencedEvent>,
    items: HashMap<String, StoredItem>,
    item_order: VecDeque<String>,
    audit: Vec<AuditEntry>,
    stats: EdgeStats,
}

/// Shared edge state. Grading, the line listener and the HTTP handlers all
/// work through this.
pub struct Edge {
    model: Arc<ModelFile>,
    cfg: EdgeConfig,
    cloud: Option<CloudClient>,
    mode: Mutex<Mode>,
    paused: AtomicBool,
    journal: Mutex<Journal>,
    events: broadcast::Sender<SequencedEvent>,
    /// Messages relayed to every connected simulator.
    line: broadcast::Sender<Message>,
    manual_seq: AtomicU64,
}

impl Edge {
    pub fn new(model: ModelFile, cfg: EdgeConfig) -> Result<Arc<Self>, ServiceError> {
        cfg.validate()?;
        let cloud = cfg
            .cloud_addr
            .as_ref()
            .map(|a| CloudClient::new(a.clone(), Duration::from_millis(cfg.cloud_timeout_ms), cfg.max_line_bytes));
        Ok(Arc::new(Self {
            model: Arc::new(model),
            mode: Mutex::new(cfg.mode),
            cloud,
            paused: AtomicBool::new(false),
            journal: Mutex::default(),
            events: broadcast::channel(1024).0,
            line: broadcast::channel(256).0,
            manual_seq: AtomicU64::new(1),
            cfg,
        }))
    }

    pub fn config(&self) -> &EdgeConfig {
        &self.cfg
    }

    pub fn status(&self) -> EdgeStatus {
        EdgeStatus {
            mode: *self.mode.lock().unwrap(),
            paused: self.paused.load(Ordering::SeqCst),
            cloud_configured: self.cloud.is_some(),
        }
    }

    pub fn stats(&self) -> EdgeStats {
        let mut s = self.journal.lock().unwrap().stats;
        if let Some(c) = &self.cloud {
            s.cloud_requests = c.stats.requests.load(Ordering::Relaxed);
            s.cloud_bytes_sent = c.stats.bytes_sent.load(Ordering::Relaxed);
            s.cloud_bytes_received = c.stats.bytes_received.load(Ordering::Relaxed);
        }
        s
    }

    pub fn audit_log(&self) -> Vec<AuditEntry> {
        self.journal.lock().unwrap().audit.clone()
    }

    /// Current history plus a receiver for everything after it.
    pub fn subscribe(&self) -> (Vec<SequencedEvent>, broadcast::Receiver<SequencedEvent>) {
        let journal = self.journal.lock().unwrap();
        (journal.events.iter().cloned().collect(), self.events.subscribe())
    }

    fn publish(&self, journal: &mut Journal, event: EdgeEvent) {
        journal.next_seq += 1;
        let ev = SequencedEvent {
            seq: journal.next_seq,
            event,
        };
        journal.events.push_back(ev.clone());
        while journal.events.len() > self.cfg.history {
            journal.events.pop_front();
        }
        let _ = self.events.send(ev);
    }

    /// Whether simulators should currently hold the line.
    fn line_held(&self) -> bool {
        self.paused.load(Ordering::SeqCst) || *self.mode.lock().unwrap() == Mode::Manual
    }

    fn relay_line_state(&self) {
        let msg = if self.line_held() { Control::Pause } else { Control::Resume };
        let _ = self.line.send(Message::Control(msg));
        let status = self.status();
        let mut journal = self.journal.lock().unwrap();
        self.publish(&mut journal, EdgeEvent::State(status));
    }

    pub fn set_paused(&self, paused: bool) {
        self.paused.store(paused, Ordering::SeqCst);
        self.relay_line_state();
    }

    pub fn set_mode(&self, mode: Mode) {
        *self.mode.lock().unwrap() = mode;
        self.relay_line_state();
    }

    pub fn inject(&self, label: Label, subclass: Option<Subclass>) {
        let _ = self.line.send(Message::Control(Control::Inject { label, subclass }));
    }

    /// Grades one frame: layer 1 here, layer 2 in the cloud when the fruit
    /// is ripened. Records and publishes the event and switch command.
    pub async fn grade_frame(&self, item_id: String, source: EventSource, img: RgbImage, png: Option<Vec<u8>>) -> (GradeEvent, SwitchCommand) {
        let received_at_ms = now_ms();
        let model = self.model.clone();
        let grade_cfg = self.cfg.grade.clone();
        let (first, img) = tokio::task::spawn_blocking(move || {
            let first = first_layer(&img, &model, &grade_cfg);
            (first, img)
        })
        .await
        .expect("first layer does not panic");
        let result = if first.needs_layer2() {
            let mask = first.mask.as_ref().expect("classified frames carry a mask");
            let t = Instant::now();
            let layer2 = match &self.cloud {
                Some(c) => c.detect(&img, mask).await,
                None => Layer2::Unavailable("no cloud service configured".into()),
            };
            let us = t.elapsed().as_micros() as u64;
            finish(first, Some(layer2), Some(us), &self.cfg.grade.routing)
        } else {
            finish(first, None, None, &self.cfg.grade.routing)
        };
        let png = png.unwrap_or_else(|| encode_png(&img));
        self.record(item_id, source, result, png, received_at_ms)
    }

    fn record(&self, item_id: String, source: EventSource, result: GradeResult, png: Vec<u8>, received_at_ms: u64) -> (GradeEvent, SwitchCommand) {
        let event = GradeEvent {
            thumbnail: format!("/items/{item_id}/image"),
            degraded: result.status == GradeStatus::Degraded,
            item_id: item_id.clone(),
            source,
            result,
            received_at_ms,
        };
        let switch = SwitchCommand {
            item_id: item_id.clone(),
            route: event.result.route,
            is_override: false,
            operator: None,
        };
        let mut journal = self.journal.lock().unwrap();
        let s = &mut journal.stats;
        s.frames += 1;
        match event.result.label {
            Some(Label::Unripened) => s.unripened += 1,
            Some(Label::Ripened) => s.ripened += 1,
            Some(Label::Overripened) => s.overripened += 1,
            None => s.unclassifiable += 1,
        }
        s.degraded += u64::from(event.degraded);
        match event.result.route {
            Route::Market => s.market += 1,
            Route::Defective => s.defective += 1,
        }
        if journal
            .items
            .insert(item_id.clone(), StoredItem { png, route: switch.route })
            .is_none()
        {
            journal.item_order.push_back(item_id);
        }
        while journal.item_order.len() > self.cfg.history {
            if let Some(old) = journal.item_order.pop_front() {
                journal.items.remove(&old);
            }
        }
        self.publish(&mut journal, EdgeEvent::Grade(event.clone()));
        self.publish(&mut journal, EdgeEvent::Switch(switch.clone()));
        (event, switch)
    }

    /// Re-routes an item on an operator's instruction and logs it.
    pub fn override_route(&self, item_id: &str, route: Route, operator: &str) -> Option<SwitchCommand> {
        let mut journal = self.journal.lock().unwrap();
        let item = journal.items.get_mut(item_id)?;
        let from = std::mem::replace(&mut item.route, route);
        journal.audit.push(AuditEntry {
            at_ms: now_ms(),
            operator: operator.to_string(),
            item_id: item_id.to_string(),
            from,
            to: route,
        });
        journal.stats.overrides += 1;
        let cmd = SwitchCommand {
            item_id: item_id.to_string(),
            route,
            is_override: true,
            operator: Some(operator.to_string()),
        };
        self.publish(&mut journal, EdgeEvent::Switch(cmd.clone()));
        drop(journal);
        let _ = self.line.send(Message::SwitchCommand(cmd.clone()));
        Some(cmd)
    }

    pub fn item_image(&self, item_id: &str) -> Option<Vec<u8>> {
        self.journal.lock().unwrap().items.get(item_id).map(|i| i.png.clone())
    }

    pub async fn grade_upload(&self, bytes: &[u8]) -> Result<GradeEvent, UploadError> {
        if *self.mode.lock().unwrap() != Mode::Manual {
            return Err(UploadError::WrongMode);
        }
        let img = decode_image(bytes).map_err(|e| UploadError::BadImage(e.to_string()))?;
        let id = format!("manual-{:06}", self.manual_seq.fetch_add(1, Ordering::Relaxed));
        Ok(self.grade_frame(id, EventSource::Manual, img, None).await.0)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum UploadError {
    #[error("manual grading is only available in manual mode")]
    WrongMode,
    #[error("unreadable image: {0}")]
    BadImage(String),
}

/// Running edge service.
pub struct EdgeServer {
    pub edge: Arc<Edge>,
    line_addr: SocketAddr,
    http_addr: SocketAddr,
    cancel: CancellationToken,
    tasks: Vec<JoinHandle<()>>,
}

impl EdgeServer {
    pub fn line_addr(&self) -> SocketAddr {
        self.line_addr
    }

    pub fn http_addr(&self) -> SocketAddr {
        self.http_addr
    }

    pub async fn shutdown(mut self) {
        self.cancel.cancel();
        for t in self.tasks.drain(..) {
            let _ = t.await;
        }
    }
}

impl Drop for EdgeServer {
    fn drop(&mut self) {
        self.cancel.cancel();
    }
}

pub async fn serve_edge(model: ModelFile, cfg: EdgeConfig) -> Result<EdgeServer, ServiceError> {
    let bind = |addr: String| async move {
        TcpListener::bind(&addr)
            .await
            .map_err(|source| ServiceError::Bind { addr, source })
    };
    let line = bind(cfg.line_addr.clone()).await?;
    let http = bind(cfg.http_addr.clone()).await?;
    let edge = Edge::new(model, cfg)?;
    let (line_addr, http_addr) = (line.local_addr()?, http.local_addr()?);
    info!(%line_addr, %http_addr, "edge service listening");
    let cancel = CancellationToken::new();
    let line_task = tokio::spawn(line_accept_loop(line, edge.clone(), cancel.clone()));
    let app = router(edge.clone());
    let c = cancel.clone();
    let http_task = tokio::spawn(async move {
        let shutdown = async move { c.cancelled().await };
        if let Err(e) = axum::serve(http, app).with_graceful_shutdown(shutdown).await {
            warn!("http server stopped: {e}");
        }
    });
    Ok(EdgeServer {
        edge,
        line_addr,
        http_addr,
        cancel,
        tasks: vec![line_task, http_task],
    })
}

async fn line_accept_loop(listener: TcpListener, edge: Arc<Edge>, cancel: CancellationToken) {
    loop {
        tokio::select! {
            _ = cancel.cancelled() => break,
            accepted = listener.accept() => match accepted {
                Ok((stream, peer)) => {
                    debug!(%peer, "line connection");
                    tokio::spawn(handle_line(stream, edge.clone(), cancel.clone()));
                }
                Err(e) => warn!("accept failed: {e}"),
            }
        }
    }
}

/// One simulator connection: frames in, grade events and switch commands
/// out, plus relayed control messages.
async fn handle_line(stream: TcpStream, edge: Arc<Edge>, cancel: CancellationToken) {
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
    let mut relay_rx = edge.line.subscribe();
    let relay_tx = tx.clone();
    let relay = tokio::spawn(async move {
        let mut n = 0u64;
        loop {
            match relay_rx.recv().await {
                Ok(msg) => {
                    n += 1;
                    if relay_tx.send(Envelope::new(format!("ctl{n}"), msg)).await.is_err() {
                        break;
                    }
                }
                Err(broadcast::error::RecvError::Lagged(_)) => continue,
                Err(broadcast::error::RecvError::Closed) => break,
            }
        }
    });
    if edge.line_held() {
        let _ = tx.send(Envelope::new("ctl0", Message::Control(Control::Pause))).await;
    }

    let mut reader = LineReader::new(BufReader::new(rd), edge.cfg.max_line_bytes);
    loop {
        let line = tokio::select! {
            _ = cancel.cancelled() => break,
            line = reader.next_line() => line,
        };
        let line = match line {
            Ok(Some(Ok(line))) => line,
            Ok(Some(Err(e))) => {
                let _ = tx.send(Envelope::new("", Message::error(e.to_string()))).await;
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
                let _ = tx.send(Envelope::new(e.id.unwrap_or_default(), Message::error(e.error.to_string()))).await;
                continue;
            }
        };
        let Message::Frame(frame) = env.message else {
            let msg = format!("unexpected message type {} on the line connection", env.message.type_name());
            let _ = tx.send(Envelope::new(env.id, Message::error(msg))).await;
            continue;
        };
        let img = match decode_image_b64(&frame.image) {
            Ok(img) => img,
            Err(e) => {
                let _ = tx.send(Envelope::new(env.id, Message::error(e.to_string()))).await;
                continue;
            }
        };
        let (event, switch) = edge.grade_frame(frame.item_id, EventSource::Line, img, None).await;
        let _ = tx.send(Envelope::new(env.id.clone(), Message::GradeEvent(event))).await;
        let _ = tx.send(Envelope::new(env.id, Message::SwitchCommand(switch))).await;
    }
    relay.abort();
    drop(tx);
    let _ = writer.await;
}

/// Commands accepted by `POST /control`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum ControlRequest {
    Pause,
    Resume,
    SetMode {
        mode: Mode,
    },
    Override {
        item_id: String,
        route: Route,
        operator: String,
    },
    Inject {
        label: Label,
        #[serde(default)]
        subclass: Option<Subclass>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlAck {
    pub status: EdgeStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub switch: Option<SwitchCommand>,
}

fn error_response(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(serde_json::json!({ "error": message.into() }))).into_response()
}

pub fn router(edge: Arc<Edge>) -> Router {
    let limit = edge.cfg.max_upload_bytes;
    Router::new()
        .route("/grade", post(post_grade))
        .route("/events", get(get_events))
        .route("/control", post(post_control))
        .route("/items/{id}/image", get(get_item_image))
        .route("/stats", get(|State(e): State<Arc<Edge>>| async move { Json(e.stats()) }))
        .route("/status", get(|State(e): State<Arc<Edge>>| async move { Json(e.status()) }))
        .route("/audit", get(|State(e): State<Arc<Edge>>| async move { Json(e.audit_log()) }))
        .layer(DefaultBodyLimit::max(limit))
        .with_state(edge)
}

async fn post_grade(State(edge): State<Arc<Edge>>, body: Bytes) -> Response {
    match edge.grade_upload(&body).await {
        Ok(event) => Json(event).into_response(),
        Err(e @ UploadError::WrongMode) => error_response(StatusCode::CONFLICT, e.to_string()),
        Err(e @ UploadError::BadImage(_)) => error_response(StatusCode::BAD_REQUEST, e.to_string()),
    }
}

async fn post_control(State(edge): State<Arc<Edge>>, body: Bytes) -> Response {
    let req: ControlRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error_response(StatusCode::BAD_REQUEST, format!("bad control request: {e}")),
    };
    let mut switch = None;
    match req {
        ControlRequest::Pause => edge.set_paused(true),
        ControlRequest::Resume => edge.set_paused(false),
        ControlRequest::SetMode { mode } => edge.set_mode(mode),
        ControlRequest::Inject { label, subclass } => edge.inject(label, subclass),
        ControlRequest::Override { item_id, route, operator } => {
            if operator.trim().is_empty() {
                return error_response(StatusCode::BAD_REQUEST, "override needs an operator");
            }
            match edge.override_route(&item_id, route, &operator) {
                Some(cmd) => switch = Some(cmd),
                None => return error_response(StatusCode::NOT_FOUND, format!("unknown item {item_id}")),
            }
        }
    }
    Json(ControlAck {
        status: edge.status(),
        switch,
    })
    .into_response()
}

async fn get_item_image(State(edge): State<Arc<Edge>>, Path(id): Path<String>) -> Response {
    match edge.item_image(&id) {
        Some(png) => ([(header::CONTENT_TYPE, "image/png")], png).into_response(),
        None => error_response(StatusCode::NOT_FOUND, format!("unknown item {id}")),
    }
}

fn sse_event(ev: &SequencedEvent) -> Event {
    let data = match &ev.event {
        EdgeEvent::Grade(g) => serde_json::to_string(g),
        EdgeEvent::Switch(s) => serde_json::to_string(s),
        EdgeEvent::State(s) => serde_json::to_string(s),
    }
    .expect("events serialize");
    Event::default().event(ev.event.kind()).id(ev.seq.to_string()).data(data)
}

/// History first, then live events; a subscriber that falls behind skips
/// what it missed.
async fn get_events(State(edge): State<Arc<Edge>>) -> Sse<impl Stream<Item = Result<Event, Infallible>>> {
    let (history, rx) = edge.subscribe();
    let last = history.last().map_or(0, |e| e.seq);
    let replay = futures::stream::iter(history.into_iter().map(|e| Ok(sse_event(&e))));
    let live = BroadcastStream::new(rx).filter_map(move |r| async move {
        match r {
            Ok(ev) if ev.seq > last => Some(Ok(sse_event(&ev))),
            _ => None,
        }
    });
    Sse::new(replay.chain(live)).keep_alive(KeepAlive::default())
}
