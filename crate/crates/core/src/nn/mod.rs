//! Layers, parameters, optimizer and checkpoints.

mod checkpoint;
mod conv;
mod init;
mod params;
mod sgd;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint,
    FORMAT_VERSION, MAGIC,
};
pub use conv::{conv2d_dilated, ConvLayer};
pub use init::{init_bias, init_kernel, param_seed};
pub use params::{Bindings, ParamStore};
pub use sgd::SgdOptimizer;
