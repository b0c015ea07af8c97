//! Segment-level music generation: a twin LSTM encoder learns which segment
//! follows which, a frozen bucket index over its codes serves retrievals, and
//! songs are assembled by chaining retrievals.
//!
//! Modules, bottom up:
//! - [`midi`]: Standard MIDI File codec and note extraction
//! - [`score`]: tokens, vocabulary, segments and the corpus document
//! - [`nn`]: f64 LSTM/dense kernels, softmax, cross-entropy, optimizers
//! - [`twin`]: the two-tower encoder, its loss and training loop
//! - [`base`]: the bucket index and retrieval
//! - [`generate`]: song assembly and MIDI rendering
//! - [`features`]: feature trajectories, CSV/SVG export, DTW report
//! - [`config`], [`cli`]: pipeline configuration and command line

pub mod base;
pub mod cli;
pub mod config;
pub mod features;
pub mod generate;
pub mod midi;
pub mod nn;
pub mod score;
pub mod twin;

pub use base::NeuralBase;
pub use generate::{generate, render, GenerationConfig};
pub use score::Corpus;
pub use twin::{TrainConfig, TwinModel};
