//! Cued-speech hand-shape feature learning and phoneme recognition.
//!
//! The crate is organized bottom-up: [`autodiff`] provides tensors and
//! reverse-mode differentiation; [`augmentation`], [`encoder`],
//! [`contrastive`] and [`finetune`] implement the static hand-shape stages;
//! [`sequence`] holds the Bi-LSTM + self-attention encoder trained with CTC;
//! [`fusion`] combines lip, hand-position and hand-shape streams; [`metrics`]
//! scores everything; [`corpus`] generates the synthetic data; [`cli`] wires
//! the stages into reproducible runs.

pub mod error;
pub mod json;
pub mod rng;

pub mod autodiff;
pub mod alphabet;
pub mod augmentation;
pub mod cli;
pub mod config;
pub mod contrastive;
pub mod corpus;
pub mod encoder;
pub mod finetune;
pub mod fusion;
pub mod metrics;
pub mod pipeline;
pub mod sequence;

pub use error::{Error, Result};
