//! Networked deployment of the grading pipeline: a cloud service running the
//! defect detector, an edge service running the first layer and serving the
//! operator console, and a conveyor simulator feeding the edge.

pub mod cloud;
pub mod edge;
pub mod protocol;
pub mod simulator;

pub use gradeline_core::synth::{generate_synthetic, GroundTruth, Synthetic, SyntheticSpec};

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot reach {addr}: {source}")]
    Connect {
        addr: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Core(#[from] gradeline_core::Error),
    #[error(transparent)]
    Protocol(#[from] protocol::ProtocolError),
    #[error("invalid configuration: {0}")]
    Config(String),
}
