//! Dense tensors, reverse-mode differentiation, attention and optimization.

mod attention;
mod graph;
mod optim;
mod params;
mod tensor;

pub use attention::{scaled_dot_attention, AttnLayout, Segment, SegmentMask};
pub use graph::{layer_norm, Gradients, Graph, Var};
pub use optim::{adam_step, lr_schedule, AdamConfig, LrMode, OptimizerState};
pub use params::{ParamId, ParamStore};
pub use tensor::{log_softmax_rows, Tensor};

#[cfg(test)]
mod tests;
