//! Tensor layers with hand-written forward and backward passes.

pub mod activation;
mod kernels;
pub mod layer;
pub mod network;
pub mod params;

pub use activation::{piecewise_threshold, relu, sigmoid_beta};
pub use layer::{output_extent, Channels, LayerSpec, Rounding};
pub use network::{backward, forward, infer_shapes, init_params, ForwardCache, NetworkSpec};
pub use params::{ByteReader, LayerGrads, LayerParams, Param, ParamGrads, ParamStore};
