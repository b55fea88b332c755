//! Graph U-net post-processing of difference images.
//!
//! The network sees only node features and a normalized adjacency, so a model
//! trained on triangle-mesh graphs runs unchanged on tetrahedral ones.

mod model;
mod ops;
mod train;

pub use model::{
    gunet_forward, load_model, save_model, ArchitectureDescriptor, GUNetModel, GraphSignal, NormalizationMode,
};
pub use ops::{clone_cluster_unpool, gcn_layer_forward, kmax_pool, pooled_size, Activation, PoolOutput, LEAKY_SLOPE};
pub use train::{
    input_vjp, loss_and_gradient, sample_mse, train, EpochRecord, TrainConfig, TrainHistory, TrainingSample,
    ADAM_BETA1, ADAM_BETA2, ADAM_EPSILON,
};

#[cfg(test)]
mod tests;
