//! Multi-task graph-transformer for slide-level classification over tile
//! graphs, with a small reverse-mode autodiff engine underneath.

pub mod attention;
pub mod data;
pub mod error;
pub mod gcn;
pub mod gradcheck;
pub mod graph;
pub mod injection;
pub mod layers;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod pooling;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{build_graph, FeatureGrid, TileGraph};
pub use model::{BranchConfig, ModelConfig, MulgtModel, SampleLabels, Task};
pub use params::{ParamId, ParamStore};
pub use pooling::{NodeSampler, PoolKind};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
