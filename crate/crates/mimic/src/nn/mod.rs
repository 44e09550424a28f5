//! From-scratch feedforward CNN engine: layer forward/backward, loss,
//! SGD with momentum, and model serialization.

mod gemm;
pub mod io;
mod model;
pub mod shadow;
mod spec;

pub use model::{
    cross_entropy, ForwardTrace, Gradients, Model, NnError, OptimizerConfig, Param, TrainMode,
    EPS_LOG,
};
pub use spec::{ArchitectureSpec, LayerShape, LayerSpec, SpecError};
