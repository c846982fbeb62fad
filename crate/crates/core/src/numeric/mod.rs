//! Tensors, the differentiation tape, parameters and the optimizer.

pub mod adam;
pub mod gradcheck;
pub mod params;
pub mod tape;
pub mod tensor;

pub use adam::{clip_grad_norm, AdamConfig, AdamState};
pub use gradcheck::{finite_diff_check, Coords, GradCheckReport};
pub use params::{Param, ParamId, ParamStore, Partition, PartitionSet};
pub use tape::{softmax, Gradients, Tape, Var};
pub use tensor::{Shape, Tensor};

#[cfg(test)]
mod tests;
