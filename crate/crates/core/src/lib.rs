//! Progressive self-attention GAN for hourly time series, with a
//! contrastive-embedding sample score and scenario evaluation.

pub mod data;
pub mod error;
pub mod eval;
pub mod fid;
pub mod model;
pub mod nn;
pub mod train;

pub use error::{Error, Result};
