//! Network, parameters, and checkpoints.

mod checkpoint;
mod network;
mod tape;
mod tensor;

pub use checkpoint::{checkpoint_from_bytes, checkpoint_to_bytes, load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use network::{
    variance_from_raw, ForwardPass, ModelConfig, Network, NetworkOutput, NetworkParams, OutputGrad, DET_ALPHA,
    DET_COS, DET_DX, DET_DY, DET_FIELDS, DET_L, DET_SIN, DET_W, TINY_GRID,
};
pub(crate) use tape::Fnv;
pub use tape::{conv2d, conv2d_backward, Tape, ValueId};
pub use tensor::Tensor;
