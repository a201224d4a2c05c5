//! Hadamard-rotated low-precision linear layers, with the training and
//! sharded-communication machinery around them.

pub mod error;
pub mod fsdp;
pub mod hadamard;
pub mod halo;
pub mod io;
pub mod quantize;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
