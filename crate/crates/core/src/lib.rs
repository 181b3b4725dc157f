//! Mask-conditioned diffusion toolkit for synthetic object-localization data.
//!
//! The crate covers the whole pipeline at desk scale: noise schedules and
//! DDPM training/sampling for a fully-convolutional U-Net that generates an
//! image and its box mask jointly, dataset preparation and embedding-space
//! deduplication, generated-data quality metrics, multi-resolution training
//! regimes, and a pretrain-then-finetune localization benchmark.

pub mod autograd;
pub mod dedup;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod exec;
pub mod features;
pub mod genmetrics;
pub mod io;
pub mod localizer;
pub mod loceval;
pub mod optim;
pub mod regimes;
pub mod schedule;
pub mod spatial;
pub mod tensor;
pub mod toy;

pub use error::{Error, ErrorClass, Result};
pub use tensor::Tensor;
