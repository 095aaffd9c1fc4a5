//! FANet building extraction: a miniature pyramid encoder with feature
//! aggregation, difference elimination, receptive field and dual attention
//! modules, trained by a small dense reverse-mode autodiff core.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod dam;
pub mod data;
pub mod decoder;
pub mod dem;
pub mod encoder;
pub mod error;
pub mod fam;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod predict;
pub mod rfb;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Float, Shape, Tensor};
