//! ModeCell / ModeRNN spatiotemporal sequence prediction at desk scale.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: a small `f64` array engine with reverse-mode gradients.
//! - [`modecell`]: the recurrent unit (slot binding, adaptive slot fusion,
//!   gated slot-bus transition).
//! - [`network`]: stacked cells with a patch encoder/decoder and closed-loop
//!   rollout.
//! - [`datagen`]: bouncing-sprite sequences with 1–3 sprites per mode and the
//!   `MSEQ` dataset file.
//! - [`metrics`], [`diagnostics`]: frame metrics, CSI and A-distance probes.
//! - [`trainer`]: Adam, training/evaluation loops and `MCKP` checkpoints.
//! - [`config`], [`cli`]: the flat `key=value` run configuration and the
//!   `modernn` command line.

pub mod cli;
pub mod config;
pub mod datagen;
pub mod diagnostics;
pub mod error;
pub mod metrics;
pub mod modecell;
pub mod network;
pub mod params;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
