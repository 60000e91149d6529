//! Dense tensors, reverse-mode differentiation, Adam, and parameter checkpoints.

mod adam;
mod checkpoint;
pub mod linalg;
mod params;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use params::{Bound, Gradients, ParamStore};
pub use tape::{log_sum_exp, sigmoid, softmax_in_place, Elementwise, Tape, Var};
pub use tensor::Tensor;
