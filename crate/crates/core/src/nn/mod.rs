//! Minimal tensor, autodiff and optimization toolkit used by the detector.

mod checkpoint;
mod graph;
mod optim;
mod params;
mod tensor;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CheckpointEntry};
pub use graph::{Graph, Var};
pub use optim::{sgd_step, Adam};
pub use params::{Gradients, ParamId, ParamStore};
pub use tensor::Tensor;
