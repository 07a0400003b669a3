//! Desk-scale recipe for low-resource speech recognition: a neural
//! Transducer pretrained across a synthetic family of related languages,
//! fine-tuned on the target language, then improved by iterative
//! pseudo-labeling with certainty-based data selection.

pub mod cli;
pub mod config;
pub mod decoder;
pub mod error;
pub mod metrics;
pub mod pipeline;
pub mod rng;
pub mod synthcorpus;
pub mod tokenizer;
pub mod trainer;
pub mod transducer;

pub use error::{Error, Result};
