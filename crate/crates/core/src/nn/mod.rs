//! Reverse-mode differentiation, gated 1-D convolutional networks and Adam.

pub mod gradcheck;
pub mod layers;
pub mod params;
pub mod tape;
pub mod tensor;

pub use gradcheck::grad_check;
pub use layers::{backward, build_network, forward, Layer, Mode, NetRecorder, NetSpec, DEFAULT_DROPOUT};
pub use params::{adam_step, adam_step_with, AdamConfig, AdamSlot, Checkpoint, CheckpointEntry, ParamTree};
pub use tape::{Gradients, NodeId, Tape};
pub use tensor::Tensor;
