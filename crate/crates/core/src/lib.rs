//! Voice activity detection with a trainable sinc filterbank front-end and an
//! optional domain-adversarial branch.

pub mod autograd;
pub mod data;
pub mod error;
pub mod experiment;
pub mod frontend;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod timeline;
pub mod training;

pub use error::{Error, Result};
