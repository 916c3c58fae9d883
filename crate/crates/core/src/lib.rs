//! Desk-scale laboratory for textual backdoors in toy transformer text
//! encoders: attack tooling that implants triggers by fine-tuning, and a
//! scanner that recovers implicit backdoor features by embedding-space
//! inversion and filters natural backdoors through loss-landscape
//! curvature.

pub mod assim;
pub mod attack;
pub mod checkpoint;
pub mod config;
pub mod detect;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod inversion;
pub mod landscape;
pub mod optim;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
