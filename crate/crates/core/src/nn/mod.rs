//! Minimal single-sample neural-network kernel: six layer kinds with exact
//! backward passes, softmax cross-entropy and Adam.

mod adam;
mod layer;
mod loss;
mod network;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use layer::{InputGrad, LayerSpec, LAYER_NORM_EPS};
pub use loss::{argmax, cross_entropy};
pub use network::{
    add_into, count, flat, flat_mut, norm_sq, same_shapes, scale_all, zeros_like, Network,
    ParamTensors, Tape,
};
pub use tensor::Tensor;
