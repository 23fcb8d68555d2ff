//! Multi-channel distant-speech front-end.

pub mod beamform;
pub mod cli;
pub mod dereverb;
pub(crate) mod dsp;
pub mod error;
pub mod metrics;
pub mod pipeline;
pub mod sacc;
pub mod scene;
pub mod signal;

pub use error::{Error, Result};
