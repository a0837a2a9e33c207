//! Multimodal sentiment analysis with knowledge-injection adapters and
//! hierarchical contrastive learning.
//!
//! The pipeline encodes text/vision/audio clips into pan-knowledge
//! representations (backbone encoders) and knowledge-specific representations
//! (adapters reading intermediate backbone states), fuses them per modality
//! and across modalities, and regresses a sentiment score. Adapters are
//! pretrained on an external dataset, then frozen while the rest of the model
//! fine-tunes on the target dataset under a combined regression + contrastive
//! objective.

pub mod adapters;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod container;
pub mod contrastive;
pub mod data;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
