//! Fetal brain MRI segmentation with intensity inhomogeneity augmentation:
//! volume I/O, a synthetic phantom generator, augmentation, a small U-net,
//! post-processing and evaluation metrics.

// `!(a <= b)` is used on purpose so that NaN is rejected
#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::needless_range_loop,
    clippy::type_complexity
)]

pub mod augment;
pub mod config;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod nnet;
pub mod phantom;
pub mod postprocess;
pub mod rng;
pub mod tissue;
pub mod volume;

pub use error::{Error, Result};
pub use tissue::TissueClass;
