//! Volumetric tumor segmentation with a scale-attention encoder-decoder.
//!
//! The crate bundles a small CPU autodiff engine ([`engine`]), the network
//! and its U-Net baseline ([`network`]), the composite Jaccard + focal loss
//! ([`losses`]), data handling and synthetic phantoms ([`data`]), training
//! ([`training`]), sliding-window ensemble inference ([`inference`]) and
//! challenge-style metrics ([`metrics`]).

pub mod engine;
pub mod error;
pub mod config;
pub mod data;
pub mod exec;
pub mod inference;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use exec::Exec;
pub use tensor::{Real, Tensor};
