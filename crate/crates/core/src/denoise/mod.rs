//! Tensor-to-tensor de-noising: normalization, dataset assembly, the
//! convolutional generator and patch critic, exact-backprop training with L1
//! or Wasserstein objectives, checkpoints, and bagging ensembles.

pub mod checkpoint;
pub mod critic;
pub mod dataset;
pub mod ensemble;
pub mod layers;
pub mod norm;
pub mod train;
pub mod unet;

pub use checkpoint::{read_model, write_model};
pub use critic::{Critic, CriticConfig};
pub use dataset::{assemble_t2t_dataset, augment, AugmentConfig, SubjectTensors, T2tDataset};
pub use ensemble::{ensemble_predict, train_ensemble};
pub use norm::{compute_norm_stats, NormMode, NormStats};
pub use train::{
    critic_step, loss_l1, train, train_with_stats, Adam, DenoiserModel, TrainConfig, TrainHistory,
    TrainedDenoiser, TrainingObjective,
};
pub use unet::{Generator, GeneratorConfig};
