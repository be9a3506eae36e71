//! Newline-delimited JSON messages between the simulator, the edge service
//! and the cloud service.
//!
//! Every line is one envelope:
//! `{"version":1,"id":"…","type":"…","payload":{…}}`. Images travel as
//! base64-encoded PNG.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use tokio::io::{AsyncBufRead, AsyncBufReadExt, AsyncWrite, AsyncWriteExt};

use gradeline_core::classifiers::Label;
use gradeline_core::detection::{Detection, Subclass};
use gradeline_core::imaging::{decode_image, encode_png, RgbImage};
use gradeline_core::pipeline::{GradeResult, Route};
use gradeline_core::segmentation::Mask;

pub const PROTOCOL_VERSION: u32 = 1;
pub const DEFAULT_MAX_LINE_BYTES: usize = 16 << 20;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ProtocolError {
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("unsupported protocol version {0}")]
    Version(u32),
    #[error("unknown message type {0:?}")]
    UnknownType(String),
    #[error("bad payload: {0}")]
    BadPayload(String),
    #[error("message exceeds {0} bytes")]
    TooLarge(usize),
}

/// Decoding failure plus the request id, when one could be read, so the
/// reply can echo it.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeError {
    pub id: Option<String>,
    pub error: ProtocolError,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectRequest {
    /// Base64 PNG of the full frame.
    pub image: String,
    /// Base64 PNG of the fruit mask produced by the first layer.
    pub mask: String,
}

impl DetectRequest {
    pub fn new(img: &RgbImage, mask: &Mask) -> Self {
        Self {
            image: encode_image(img),
            mask: STANDARD.encode(mask.to_png()),
        }
    }

    pub fn decode(&self) -> Result<(RgbImage, Mask), ProtocolError> {
        let img = decode_image_b64(&self.image)?;
        let mask = decode_mask_b64(&self.mask)?;
        if img.dims() != mask.dims() {
            return Err(ProtocolError::BadPayload(format!(
                "mask is {:?} but image is {:?}",
                mask.dims(),
                img.dims()
            )));
        }
        Ok((img, mask))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectResponse {
    pub detections: Vec<Detection>,
    pub subclass: Subclass,
}

/// One conveyor item sent from the simulator to the edge.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub item_id: String,
    pub image: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventSource {
    Line,
    Manual,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradeEvent {
    pub item_id: String,
    pub source: EventSource,
    pub result: GradeResult,
    pub degraded: bool,
    /// Path of the frame on the edge's HTTP interface.
    pub thumbnail: String,
    /// Milliseconds since the Unix epoch.
    pub received_at_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwitchCommand {
    pub item_id: String,
    pub route: Route,
    #[serde(rename = "override", default)]
    pub is_override: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub operator: Option<String>,
}

/// Line control relayed from the edge to the simulator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum Control {
    Pause,
    Resume,
    /// Emit an item of this class next.
    Inject {
        label: Label,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        subclass: Option<Subclass>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorReply {
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "type", content = "payload")]
pub enum Message {
    DetectRequest(DetectRequest),
    DetectResponse(DetectResponse),
    GradeEvent(GradeEvent),
    SwitchCommand(SwitchCommand),
    Frame(Frame),
    Control(Control),
    Error(ErrorReply),
}

impl Message {
    pub fn type_name(&self) -> &'static str {
        match self {
            Message::DetectRequest(_) => "DetectRequest",
            Message::DetectResponse(_) => "DetectResponse",
            Message::GradeEvent(_) => "GradeEvent",
            Message::SwitchCommand(_) => "SwitchCommand",
            Message::Frame(_) => "Frame",
            Message::Control(_) => "Control",
            Message::Error(_) => "Error",
        }
    }

    pub fn error(message: impl Into<String>) -> Self {
        Message::Error(ErrorReply { message: message.into() })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Envelope {
    pub version: u32,
    pub id: String,
    #[serde(flatten)]
    pub message: Message,
}

impl Envelope {
    pub fn new(id: impl Into<String>, message: Message) -> Self {
        Self {
            version: PROTOCOL_VERSION,
            id: id.into(),
            message,
        }
    }

    /// One line of JSON, without the trailing newline.
    pub fn encode(&self) -> String {
        serde_json::to_string(self).expect("envelopes always serialize")
    }

    pub fn decode(line: &str) -> Result<Self, DecodeError> {
        #[derive(Deserialize)]
        struct Raw {
            version: Option<u32>,
            id: Option<String>,
            #[serde(rename = "type")]
            kind: Option<String>,
            #[serde(default)]
            payload: serde_json::Value,
        }
        let fail = |id: Option<String>, error| DecodeError { id, error };
        let raw: Raw = serde_json::from_str(line).map_err(|e| fail(None, ProtocolError::Malformed(e.to_string())))?;
        let id = raw.id;
        let Some(version) = raw.version else {
            return Err(fail(id, ProtocolError::Malformed("missing version".into())));
        };
        if version != PROTOCOL_VERSION {
            return Err(fail(id, ProtocolError::Version(version)));
        }
        let Some(kind) = raw.kind else {
            return Err(fail(id, ProtocolError::Malformed("missing type".into())));
        };
        let Some(id_str) = id.clone() else {
            return Err(fail(None, ProtocolError::Malformed("missing id".into())));
        };
        fn payload<T: serde::de::DeserializeOwned>(v: serde_json::Value) -> Result<T, ProtocolError> {
            serde_json::from_value(v).map_err(|e| ProtocolError::BadPayload(e.to_string()))
        }
        let message = match kind.as_str() {
            "DetectRequest" => payload(raw.payload).map(Message::DetectRequest),
            "DetectResponse" => payload(raw.payload).map(Message::DetectResponse),
            "GradeEvent" => payload(raw.payload).map(Message::GradeEvent),
            "SwitchCommand" => payload(raw.payload).map(Message::SwitchCommand),
            "Frame" => payload(raw.payload).map(Message::Frame),
            "Control" => payload(raw.payload).map(Message::Control),
            "Error" => payload(raw.payload).map(Message::Error),
            other => Err(ProtocolError::UnknownType(other.to_string())),
        }
        .map_err(|e| fail(id, e))?;
        Ok(Envelope::new(id_str, message))
    }
}

pub fn encode_image(img: &RgbImage) -> String {
    STANDARD.encode(encode_png(img))
}

pub fn decode_image_b64(text: &str) -> Result<RgbImage, ProtocolError> {
    let bytes = STANDARD
        .decode(text)
        .map_err(|e| ProtocolError::BadPayload(format!("image is not base64: {e}")))?;
    decode_image(&bytes).map_err(|e| ProtocolError::BadPayload(e.to_string()))
}

pub fn decode_mask_b64(text: &str) -> Result<Mask, ProtocolError> {
    let bytes = STANDARD
        .decode(text)
        .map_err(|e| ProtocolError::BadPayload(format!("mask is not base64: {e}")))?;
    Mask::from_png(&bytes).map_err(|e| ProtocolError::BadPayload(e.to_string()))
}

/// Reads newline-terminated lines, refusing any longer than `max` bytes.
/// An oversized or non-UTF-8 line is consumed and reported, and the stream
/// stays usable.
pub struct LineReader<R> {
    inner: R,
    max: usize,
    buf: Vec<u8>,
}

impl<R: AsyncBufRead + Unpin> LineReader<R> {
    pub fn new(inner: R, max: usize) -> Self {
        Self { inner, max, buf: Vec::new() }
    }

    /// `None` at end of stream. A final line without a newline is still
    /// returned.
    pub async fn next_line(&mut self) -> std::io::Result<Option<Result<String, ProtocolError>>> {
        self.buf.clear();
        let mut oversized = false;
        loop {
            let chunk = self.inner.fill_buf().await?;
            if chunk.is_empty() {
                if self.buf.is_empty() && !oversized {
                    return Ok(None);
                }
                break;
            }
            let (take, done) = match chunk.iter().position(|&b| b == b'\n') {
                Some(i) => (i + 1, true),
                None => (chunk.len(), false),
            };
            if !oversized {
                let body = if done { &chunk[..take - 1] } else { chunk };
                if self.buf.len() + body.len() > self.max {
                    oversized = true;
                    self.buf.clear();
                } else {
                    self.buf.extend_from_slice(body);
                }
            }
            self.inner.consume(take);
            if done {
                break;
            }
        }
        if oversized {
            return Ok(Some(Err(ProtocolError::TooLarge(self.max))));
        }
        if self.buf.last() == Some(&b'\r') {
            self.buf.pop();
        }
        Ok(Some(
            String::from_utf8(std::mem::take(&mut self.buf)).map_err(|_| ProtocolError::Malformed("line is not UTF-8".into())),
        ))
    }
}

/// Writes one envelope followed by a newline; returns the bytes written.
pub async fn write_envelope<W: AsyncWrite + Unpin>(w: &mut W, env: &Envelope) -> std::io::Result<usize> {
    let mut line = env.encode();
    line.push('\n');
    w.write_all(line.as_bytes()).await?;
    w.flush().await?;
    Ok(line.len())
}
