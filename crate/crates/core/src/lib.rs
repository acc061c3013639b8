//! Diffusion-tensor cardiac MRI toolkit at phantom scale.
//!
//! The pipeline mirrors a breath-hold-reduction study: a synthetic left
//! ventricle with a transmural helix-angle ramp is simulated into a noisy
//! multi-repetition diffusion-weighted stack, registered, subsampled per
//! breath-hold budget and sampling scheme, fitted to rank-2 tensors by linear
//! least squares, reduced to MD/FA/HA/E2A maps, and optionally de-noised in
//! tensor space by a trainable convolutional network (L1 or Wasserstein
//! adversarial objective, with bagging ensembles).
//!
//! Modules map one-to-one onto the pipeline stages:
//!
//! - [`protocol`], [`stack`], [`tensor`], [`container`]: shared domain types,
//!   the 3x3 symmetric eigensolver, and the flat binary container.
//! - [`phantom`]: ground-truth tensor fields and Rician-noise DWI simulation.
//! - [`registration`]: rigid sub-pixel translation alignment (upsampled DFT).
//! - [`fitting`]: repetition selection, averaging, and the LLS tensor fit.
//! - [`maps`]: per-voxel cardiac local basis and the four DT-CMR maps.
//! - [`metrics`]: MAAE/MAE plus Kolmogorov-Smirnov, Wilcoxon, median[IQR].
//! - [`denoise`]: normalization, dataset assembly, the convolutional
//!   de-noiser, exact backprop training, and ensembling.
//! - [`study`], [`report`]: the two study drivers and SVG map rendering.

pub mod container;
pub mod denoise;
pub mod error;
pub mod fitting;
pub mod geom;
pub mod maps;
pub mod metrics;
pub mod phantom;
pub mod protocol;
pub mod registration;
pub mod report;
pub mod rng;
pub mod stack;
pub mod study;
pub mod tensor;

pub use error::{Error, Result};
pub use fitting::{BreathHoldBudget, SamplingScheme, SchemeVariant};
pub use maps::{LocalBasis, MapSet};
pub use phantom::{NoiseProfile, PhantomConfig};
pub use protocol::AcquisitionProtocol;
pub use stack::{DwiStack, FrameKey};
pub use tensor::{eig_sym3, EigenSystem, TensorField};
