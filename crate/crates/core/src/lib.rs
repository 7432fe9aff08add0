//! Spatial-transformer point-cloud networks.
//!
//! Learnable affine, projective and deformable maps re-define the k-NN
//! neighborhoods used by each edge-convolution layer. Everything numeric is
//! generic over [`Scalar`] (`f32` or `f64`). The unsuffixed aliases below
//! fix it to `f64`; the `32` aliases to `f32`.

pub mod checkpoint;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod neighborhood;
pub mod network;
pub mod pointconv;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use neighborhood::AffinityGraph;
pub use network::{BlockConfig, Head, NetworkConfig, ParamKind, TransformFamily, TransformerSpec};
pub use scalar::Scalar;
pub use tensor::Var;

pub type Tensor = tensor::Tensor<f64>;
pub type Tape = tensor::Tape<f64>;
pub type PointCloud = geometry::PointCloud<f64>;
pub type Network = network::Network<f64>;
pub type ParamSet = network::ParamSet<f64>;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tape32 = tensor::Tape<f32>;
pub type PointCloud32 = geometry::PointCloud<f32>;
pub type Network32 = network::Network<f32>;
