//! Conveyor simulator: renders synthetic fruit at a fixed rate, streams the
//! frames to the edge service, applies the switch commands it gets back and
//! scores the resulting routes against ground truth.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tokio::io::BufReader;
use tokio::net::TcpStream;
use tokio::sync::{mpsc, watch};
use tracing::{debug, info, warn};

use gradeline_core::classifiers::Label;
use gradeline_core::dataset::draw_item;
use gradeline_core::detection::Subclass;
use gradeline_core::imaging::RgbImage;
use gradeline_core::pipeline::{GradeResult, Route, RoutingPolicy};
use gradeline_core::synth::GroundTruth;

use crate::protocol::{encode_image, Control, Envelope, Frame, LineReader, Message, DEFAULT_MAX_LINE_BYTES};
use crate::ServiceError;

/// Relative class frequencies on the belt.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMix {
    pub unripened: f64,
    pub ripened: f64,
    pub overripened: f64,
}

impl Default for ClassMix {
    fn default() -> Self {
        Self {
            unripened: 1.0,
            ripened: 1.0,
            overripened: 1.0,
        }
    }
}

impl ClassMix {
    pub fn validate(&self) -> Result<(), ServiceError> {
        let w = [self.unripened, self.ripened, self.overripened];
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
            return Err(ServiceError::Config("class mix weights must be non-negative with a positive sum".into()));
        }
        Ok(())
    }

    fn draw(&self, rng: &mut impl Rng) -> Label {
        let total = self.unripened + self.ripened + self.overripened;
        let u = rng.random_range(0.0..total);
        if u < self.unripened {
            Label::Unripened
        } else if u < self.unripened + self.ripened {
            Label::Ripened
        } else {
            Label::Overripened
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulatorConfig {
    pub edge_addr: String,
    /// Items per second.
    pub rate: f64,
    /// Stop after this many items; run until stopped when absent.
    pub items: Option<usize>,
    pub mix: ClassMix,
    pub seed: u64,
    /// Frames held while the edge is unreachable; later ones are dropped.
    pub buffer: usize,
    pub reconnect_ms: u64,
    /// After the last item, wait this long for outstanding routes.
    pub settle_ms: u64,
    /// Accepted deviation of an inter-arrival gap from `1 / rate`.
    pub jitter_bound_ms: u64,
    pub max_line_bytes: usize,
    /// Policy used to score routes against ground truth.
    pub policy: RoutingPolicy,
}

impl Default for SimulatorConfig {
    fn default() -> Self {
        Self {
            edge_addr: "127.0.0.1:7100".into(),
            rate: 2.0,
            items: None,
            mix: ClassMix::default(),
            seed: 0,
            buffer: 64,
            reconnect_ms: 200,
            settle_ms: 10_000,
            jitter_bound_ms: 50,
            max_line_bytes: DEFAULT_MAX_LINE_BYTES,
            policy: RoutingPolicy::default(),
        }
    }
}

impl SimulatorConfig {
    pub fn validate(&self) -> Result<(), ServiceError> {
        if !(self.rate.is_finite() && self.rate > 0.0) {
            return Err(ServiceError::Config(format!("rate must be positive, got {}", self.rate)));
        }
        if self.buffer == 0 {
            return Err(ServiceError::Config("buffer must hold at least one frame".into()));
        }
        self.mix.validate()
    }
}

/// One fruit on the belt.
#[derive(Clone, Debug, PartialEq)]
pub struct LineItem {
    pub item_id: String,
    pub seed: u64,
    pub image: RgbImage,
    pub truth: GroundTruth,
}

/// Deterministic sequence of belt items for a seed and class mix.
pub struct ItemSource {
    rng: ChaCha8Rng,
    mix: ClassMix,
    next: u64,
}

impl ItemSource {
    pub fn new(seed: u64, mix: ClassMix) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            mix,
            next: 1,
        }
    }

    /// Draws the next item, or an item of the forced class.
    pub fn next_item(&mut self, forced: Option<(Label, Option<Subclass>)>) -> Result<LineItem, ServiceError> {
        let drawn = self.mix.draw(&mut self.rng);
        let seed = self.rng.random::<u64>();
        let (label, subclass) = forced.unwrap_or((drawn, None));
        let item = draw_item(label, subclass, seed)?;
        let id = format!("item-{:06}", self.next);
        self.next += 1;
        Ok(LineItem {
            item_id: id,
            seed,
            image: item.image,
            truth: item.truth,
        })
    }
}

/// Route the policy assigns to the true class.
pub fn expected_route(truth: &GroundTruth, policy: &RoutingPolicy) -> Route {
    match (truth.label, truth.subclass) {
        (Label::Unripened, _) => policy.unripened,
        (Label::Overripened, _) => policy.overripened,
        (Label::Ripened, Some(Subclass::WellRipened)) => policy.well_ripened,
        (Label::Ripened, _) => policy.mid_ripened,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub item_id: String,
    pub seed: u64,
    pub truth: GroundTruth,
    pub emitted_at_ms: u64,
    pub dropped: bool,
    pub sent: bool,
    pub result: Option<GradeResult>,
    pub route: Option<Route>,
    /// Non-override switch commands received; more than one means the item
    /// was routed twice.
    pub switch_count: u32,
    pub overridden_by: Option<String>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ArrivalStats {
    pub mean_gap_ms: Option<f64>,
    /// Largest deviation of a gap from the nominal period.
    pub max_deviation_ms: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulatorReport {
    pub emitted: usize,
    pub sent: usize,
    pub dropped: usize,
    pub graded: usize,
    pub routed: usize,
    pub double_routed: usize,
    pub correct_routes: usize,
    /// Fraction of routed items whose route matches ground truth.
    pub line_accuracy: Option<f64>,
    pub errors: usize,
    pub arrivals: ArrivalStats,
    pub items: Vec<ItemRecord>,
}

#[derive(Default)]
struct Records {
    items: Vec<ItemRecord>,
    index: HashMap<String, usize>,
    emit_times: Vec<Instant>,
    errors: usize,
}

impl Records {
    fn get_mut(&mut self, id: &str) -> Option<&mut ItemRecord> {
        self.index.get(id).copied().map(|i| &mut self.items[i])
    }

    fn outstanding(&self) -> usize {
        self.items.iter().filter(|r| !r.dropped && r.route.is_none()).count()
    }
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

/// Control surface of a running simulator.
#[derive(Clone)]
pub struct SimulatorControl {
    paused: Arc<watch::Sender<bool>>,
    forced: Arc<Mutex<Vec<(Label, Option<Subclass>)>>>,
    stop: Arc<watch::Sender<bool>>,
}

impl SimulatorControl {
    pub fn pause(&self) {
        self.paused.send_replace(true);
    }

    pub fn resume(&self) {
        self.paused.send_replace(false);
    }

    pub fn is_paused(&self) -> bool {
        *self.paused.borrow()
    }

    /// Makes the next emitted item one of this class.
    pub fn inject(&self, label: Label, subclass: Option<Subclass>) {
        self.forced.lock().unwrap().push((label, subclass));
    }

    pub fn stop(&self) {
        self.stop.send_replace(true);
    }

    fn apply(&self, control: Control) {
        match control {
            Control::Pause => self.pause(),
            Control::Resume => self.resume(),
            Control::Inject { label, subclass } => self.inject(label, subclass),
        }
    }
}

pub struct SimulatorHandle {
    pub control: SimulatorControl,
    task: tokio::task::JoinHandle<Result<SimulatorReport, ServiceError>>,
}

impl SimulatorHandle {
    /// Waits for the run to finish; call [`SimulatorControl::stop`] first
    /// for an unbounded run.
    pub async fn join(self) -> Result<SimulatorReport, ServiceError> {
        self.task.await.map_err(|e| ServiceError::Config(format!("simulator task failed: {e}")))?
    }
}

pub fn spawn_simulator(cfg: SimulatorConfig) -> Result<SimulatorHandle, ServiceError> {
    cfg.validate()?;
    let control = SimulatorControl {
        paused: Arc::new(watch::channel(false).0),
        forced: Arc::default(),
        stop: Arc::new(watch::channel(false).0),
    };
    let task = tokio::spawn(run(cfg, control.clone()));
    Ok(SimulatorHandle { control, task })
}

/// Runs a bounded simulation to completion.
pub async fn run_simulator(cfg: SimulatorConfig) -> Result<SimulatorReport, ServiceError> {
    if cfg.items.is_none() {
        return Err(ServiceError::Config("run_simulator needs an item count; use spawn_simulator for open runs".into()));
    }
    spawn_simulator(cfg)?.join().await
}

async fn wait_unpaused(paused: &mut watch::Receiver<bool>, stop: &mut watch::Receiver<bool>) -> bool {
    loop {
        if *stop.borrow() {
            return false;
        }
        if !*paused.borrow_and_update() {
            return true;
        }
        tokio::select! {
            r = paused.changed() => if r.is_err() { return false },
            _ = stop.changed() => {}
        }
    }
}

async fn run(cfg: SimulatorConfig, control: SimulatorControl) -> Result<SimulatorReport, ServiceError> {
    let records = Arc::new(Mutex::new(Records::default()));
    let (queue_tx, queue_rx) = mpsc::channel::<(String, String)>(cfg.buffer);
    let (done_tx, done_rx) = watch::channel(false);
    let progress = Arc::new(tokio::sync::Notify::new());

    let sender = tokio::spawn(send_loop(cfg.clone(), queue_rx, records.clone(), control.clone(), progress.clone()));

    // Producer.
    let period = Duration::from_secs_f64(1.0 / cfg.rate);
    let mut source = ItemSource::new(cfg.seed, cfg.mix);
    let mut paused = control.paused.subscribe();
    let mut stop = control.stop.subscribe();
    let mut next_tick = tokio::time::Instant::now();
    let mut emitted = 0usize;
    while cfg.items.is_none_or(|n| emitted < n) {
        if !wait_unpaused(&mut paused, &mut stop).await {
            break;
        }
        let now = tokio::time::Instant::now();
        next_tick = next_tick.max(now);
        tokio::select! {
            _ = tokio::time::sleep_until(next_tick) => {}
            _ = stop.changed() => break,
        }
        if *paused.borrow() {
            continue;
        }
        next_tick += period;
        let forced = {
            let mut f = control.forced.lock().unwrap();
            (!f.is_empty()).then(|| f.remove(0))
        };
        let item = {
            let mut src = std::mem::replace(&mut source, ItemSource::new(0, cfg.mix));
            let (src, item) = tokio::task::spawn_blocking(move || {
                let item = src.next_item(forced);
                (src, item)
            })
            .await
            .map_err(|e| ServiceError::Config(format!("item generation failed: {e}")))?;
            source = src;
            item?
        };
        let frame = Envelope::new(item.item_id.clone(), Message::Frame(Frame {
            item_id: item.item_id.clone(),
            image: encode_image(&item.image),
        }))
        .encode();
        let dropped = queue_tx.try_send((item.item_id.clone(), frame)).is_err();
        {
            let mut r = records.lock().unwrap();
            let idx = r.items.len();
            r.index.insert(item.item_id.clone(), idx);
            r.emit_times.push(Instant::now());
            r.items.push(ItemRecord {
                item_id: item.item_id,
                seed: item.seed,
                truth: item.truth,
                emitted_at_ms: now_ms(),
                dropped,
                sent: false,
                result: None,
                route: None,
                switch_count: 0,
                overridden_by: None,
            });
        }
        if dropped {
            debug!("buffer full, item dropped");
        }
        emitted += 1;
    }
    drop(queue_tx);
    let _ = done_tx.send(true);

    // Wait for outstanding routes.
    let deadline = tokio::time::Instant::now() + Duration::from_millis(cfg.settle_ms);
    loop {
        if records.lock().unwrap().outstanding() == 0 || *stop.borrow() {
            break;
        }
        tokio::select! {
            _ = progress.notified() => {}
            _ = tokio::time::sleep_until(deadline) => break,
            _ = stop.changed() => {}
        }
    }
    drop(done_rx);
    sender.abort();
    let _ = sender.await;

    let r = records.lock().unwrap();
    Ok(build_report(&r, &cfg))
}

fn build_report(r: &Records, cfg: &SimulatorConfig) -> SimulatorReport {
    let routed: Vec<&ItemRecord> = r.items.iter().filter(|i| i.route.is_some()).collect();
    let correct = routed
        .iter()
        .filter(|i| i.overridden_by.is_none() && i.route == Some(expected_route(&i.truth, &cfg.policy)))
        .count();
    let gaps: Vec<f64> = r
        .emit_times
        .windows(2)
        .map(|w| w[1].duration_since(w[0]).as_secs_f64() * 1000.0)
        .collect();
    let nominal = 1000.0 / cfg.rate;
    SimulatorReport {
        emitted: r.items.len(),
        sent: r.items.iter().filter(|i| i.sent).count(),
        dropped: r.items.iter().filter(|i| i.dropped).count(),
        graded: r.items.iter().filter(|i| i.result.is_some()).count(),
        routed: routed.len(),
        double_routed: r.items.iter().filter(|i| i.switch_count > 1).count(),
        correct_routes: correct,
        line_accuracy: (!routed.is_empty()).then(|| correct as f64 / routed.len() as f64),
        errors: r.errors,
        arrivals: ArrivalStats {
            mean_gap_ms: (!gaps.is_empty()).then(|| gaps.iter().sum::<f64>() / gaps.len() as f64),
            max_deviation_ms: gaps.iter().map(|g| (g - nominal).abs()).reduce(f64::max),
        },
        items: r.items.clone(),
    }
}

/// Delivers queued frames, reconnecting while the edge is unreachable.
async fn send_loop(
    cfg: SimulatorConfig,
    mut queue: mpsc::Receiver<(String, String)>,
    records: Arc<Mutex<Records>>,
    control: SimulatorControl,
    progress: Arc<tokio::sync::Notify>,
) {
    let mut paused = control.paused.subscribe();
    let mut stop = control.stop.subscribe();
    let mut carry: Option<(String, String)> = None;
    'connect: loop {
        let stream = match TcpStream::connect(&cfg.edge_addr).await {
            Ok(s) => s,
            Err(e) => {
                debug!("edge unreachable: {e}");
                tokio::time::sleep(Duration::from_millis(cfg.reconnect_ms)).await;
                continue;
            }
        };
        info!(edge = %cfg.edge_addr, "connected to edge");
        let _ = stream.set_nodelay(true);
        let (rd, mut wr) = stream.into_split();
        let reader = tokio::spawn(read_loop(
            LineReader::new(BufReader::new(rd), cfg.max_line_bytes),
            records.clone(),
            control.clone(),
            progress.clone(),
        ));
        loop {
            let (id, line) = match carry.take() {
                Some(c) => c,
                None => match queue.recv().await {
                    Some(c) => c,
                    None => {
                        // Producer finished; keep reading replies.
                        let _ = reader.await;
                        return;
                    }
                },
            };
            if !wait_unpaused(&mut paused, &mut stop).await {
                reader.abort();
                return;
            }
            let mut bytes = line.clone();
            bytes.push('\n');
            let written = tokio::io::AsyncWriteExt::write_all(&mut wr, bytes.as_bytes()).await;
            if written.is_err() || reader.is_finished() {
                warn!("edge connection lost, reconnecting");
                carry = Some((id, line));
                reader.abort();
                tokio::time::sleep(Duration::from_millis(cfg.reconnect_ms)).await;
                continue 'connect;
            }
            if let Some(rec) = records.lock().unwrap().get_mut(&id) {
                rec.sent = true;
            }
        }
    }
}

async fn read_loop(mut reader: LineReader<BufReader<tokio::net::tcp::OwnedReadHalf>>, records: Arc<Mutex<Records>>, control: SimulatorControl, progress: Arc<tokio::sync::Notify>) {
    while let Ok(Some(line)) = reader.next_line().await {
        let Ok(line) = line else { continue };
        let env = match Envelope::decode(&line) {
            Ok(env) => env,
            Err(e) => {
                warn!("undecodable edge message: {}", e.error);
                records.lock().unwrap().errors += 1;
                continue;
            }
        };
        match env.message {
            Message::GradeEvent(ev) => {
                if let Some(rec) = records.lock().unwrap().get_mut(&ev.item_id) {
                    rec.result = Some(ev.result);
                }
            }
            Message::SwitchCommand(cmd) => {
                if let Some(rec) = records.lock().unwrap().get_mut(&cmd.item_id) {
                    rec.route = Some(cmd.route);
                    if cmd.is_override {
                        rec.overridden_by = cmd.operator;
                    } else {
                        rec.switch_count += 1;
                    }
                }
                progress.notify_one();
            }
            Message::Control(c) => control.apply(c),
            Message::Error(e) => {
                warn!("edge reported: {}", e.message);
                records.lock().unwrap().errors += 1;
            }
            other => debug!("ignoring {} from edge", other.type_name()),
        }
    }
}
