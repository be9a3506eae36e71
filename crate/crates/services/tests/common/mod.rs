#![allow(dead_code)]

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::OnceLock;
use std::time::Duration;

use gradeline_core::classifiers::{Label, Model, ModelFile, SvmConfig, SvmModel};
use gradeline_core::dataset::{draw_item, extract_datasets, generate_dataset};
use gradeline_core::detection::{Detection, Detector, SpotDetector, SpotDetectorConfig};
use gradeline_core::features::Variant;
use gradeline_core::imaging::RgbImage;
use gradeline_core::pipeline::{first_layer, GradeConfig};
use gradeline_core::segmentation::{Mask, SegmentConfig};
use gradeline_services::edge::{EdgeConfig, Mode};
use gradeline_services::protocol::{Envelope, LineReader, Message, DEFAULT_MAX_LINE_BYTES};
use tokio::io::{AsyncWriteExt, BufReader};
use tokio::net::tcp::{OwnedReadHalf, OwnedWriteHalf};
use tokio::net::TcpStream;

pub fn model() -> &'static ModelFile {
    static MODEL: OnceLock<ModelFile> = OnceLock::new();
    MODEL.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let (m, _) = generate_dataset(dir.path(), 20, 77).unwrap();
        let ds = extract_datasets(&m, &[Variant::A], &SegmentConfig::default()).unwrap().remove(0);
        ModelFile::new(Variant::A, None, Model::Svm(SvmModel::train(&ds, &SvmConfig::default()).unwrap()))
    })
}

pub fn spot_detector() -> SpotDetector {
    SpotDetector::new(SpotDetectorConfig::default()).unwrap()
}

/// Spot detector that counts its calls.
#[derive(Default)]
pub struct CountingDetector {
    pub calls: AtomicUsize,
}

impl Detector for CountingDetector {
    fn detect(&self, img: &RgbImage, mask: &Mask) -> gradeline_core::Result<Vec<Detection>> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        spot_detector().detect(img, mask)
    }
}

impl CountingDetector {
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

pub fn edge_config(cloud: Option<String>) -> EdgeConfig {
    EdgeConfig {
        line_addr: "127.0.0.1:0".into(),
        http_addr: "127.0.0.1:0".into(),
        cloud_addr: cloud,
        cloud_timeout_ms: 5000,
        mode: Mode::Auto,
        ..EdgeConfig::default()
    }
}

/// A rendered item the test model assigns to `label`.
pub fn item_classified_as(label: Label) -> RgbImage {
    (0..200u64)
        .map(|seed| draw_item(label, None, 9000 + seed).unwrap().image)
        .find(|img| first_layer(img, model(), &GradeConfig::default()).label == Some(label))
        .expect("some rendered item is classified as requested")
}

/// Address nothing listens on.
pub async fn closed_addr() -> String {
    let l = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    l.local_addr().unwrap().to_string()
}

/// Raw NDJSON client.
pub struct LineClient {
    pub reader: LineReader<BufReader<OwnedReadHalf>>,
    pub writer: OwnedWriteHalf,
}

impl LineClient {
    pub async fn connect(addr: impl tokio::net::ToSocketAddrs) -> Self {
        let (rd, writer) = TcpStream::connect(addr).await.unwrap().into_split();
        Self {
            reader: LineReader::new(BufReader::new(rd), DEFAULT_MAX_LINE_BYTES),
            writer,
        }
    }

    pub async fn send_raw(&mut self, bytes: &[u8]) {
        self.writer.write_all(bytes).await.unwrap();
    }

    pub async fn send(&mut self, env: &Envelope) {
        let mut line = env.encode();
        line.push('\n');
        self.send_raw(line.as_bytes()).await;
    }

    pub async fn recv(&mut self) -> Envelope {
        let line = tokio::time::timeout(Duration::from_secs(30), self.reader.next_line())
            .await
            .expect("reply within 30 s")
            .unwrap()
            .expect("connection open")
            .unwrap();
        Envelope::decode(&line).unwrap()
    }

    /// Skips messages until one carries `id`.
    pub async fn recv_id(&mut self, id: &str) -> Envelope {
        loop {
            let env = self.recv().await;
            if env.id == id {
                return env;
            }
        }
    }

    /// Skips relayed control messages.
    pub async fn recv_reply(&mut self) -> Envelope {
        loop {
            let env = self.recv().await;
            if !matches!(env.message, Message::Control(_)) {
                return env;
            }
        }
    }
}
