//! Connection-sensitive segmentation toolkit.
//!
//! The crate bundles a small reverse-mode autograd engine ([`tensor`]), the
//! local connectivity model ([`connectivity`]), the connection-sensitive loss
//! ([`loss`]), an attention-gated U-Net ([`model`]), evaluation metrics
//! ([`metrics`]), image/dataset handling ([`data`]) and the training loop
//! ([`train`]).

pub mod archive;
pub mod connectivity;
pub mod data;
pub mod error;
pub mod loss;
pub mod map;
pub mod metrics;
pub mod model;
pub mod seed;
pub mod tensor;
pub mod train;

pub use error::{Error, ErrorKind, Result};
