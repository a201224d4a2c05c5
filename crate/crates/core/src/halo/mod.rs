//! The HALO linear layer: quantized matmuls with Hadamard rotations placed
//! per product, operand reuse between forward and backward, and LoRA
//! adapters for parameter-efficient fine-tuning.
//!
//! Every Hadamard matrix produced by [`crate::hadamard`] is symmetric, so
//! `H` and `Hᵀ` are the same operator. Un-rotating an output on the left
//! uses `transform_left` and on the right uses `transform_right`.

mod layer;
mod scheme;

pub use layer::{apply_placement, Gradients, HaloLinear, Lora, QuantCalls, Rotation, SavedContext};
pub use scheme::{HaloScheme, Level, Matmul, Placement};
