//! Minimal differentiable-computation substrate.

pub mod checkpoint;
pub mod graph;
pub mod layers;
pub mod params;
pub mod tensor;

pub use checkpoint::{Checkpoint, Dtype};
pub use graph::{Graph, Var};
pub use layers::{Activation, Decoder, DecoderSpec, Linear, Mlp, MlpSpec, PointNet};
pub use params::{AdamConfig, InitRng, ParamId, ParamStore};
pub use tensor::Tensor;
