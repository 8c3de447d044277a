//! Unsupervised cross-modality segmentation of vestibular schwannoma and
//! cochlea: preprocessing, slice-wise CycleGAN synthesis, augmented 2.5D/3D
//! segmentation ensembles, union fusion and native-space postprocessing.

pub mod augment;
pub mod config;
pub mod ensemble;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod phantom;
pub mod pipeline;
pub mod preprocess;
pub mod record;
pub mod segnets;
pub mod synthesis;
pub mod trainer;
pub mod volume;

pub use error::{Error, Result};
