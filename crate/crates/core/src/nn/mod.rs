//! Minimal f32 tensor engine: convolution kernels, a reverse-mode tape,
//! parameter storage with Adam, and a checkpoint container.

mod checkpoint;
mod kernels;
mod layers;
mod params;
mod tape;
mod tensor;

pub use checkpoint::{hash_config, Checkpoint};
pub use kernels::ConvSpec;
pub use layers::{Conv, Fwd, ConvTranspose, Mode, Norm, PRelu};
pub use params::{Adam, AdamConfig, ParamId, ParamStore};
pub use tape::{Gradients, NormMode, Tape, Var};
pub use tensor::Tensor;
