//! Core of the gradeline fruit grading system.
//!
//! The first layer segments the fruit from the background with K-means,
//! summarises it as mean hue/value plus a local-binary-pattern histogram and
//! classifies ripeness. The second layer counts peel defects on ripened fruit
//! to split it into mid- and well-ripened grades.
//!
//! Everything in this crate is synchronous and pure; the network services
//! live in `gradeline-services`.

pub mod augmentation;
pub mod classifiers;
pub mod dataset;
pub mod detection;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod imaging;
pub mod pipeline;
pub mod segmentation;
pub mod synth;

pub use error::{Error, Result};
