//! Point spatio-temporal transformer building blocks.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] dense tensors and a reverse-mode tape,
//! * [`nn`] linear layers and pointwise MLPs,
//! * [`point_ops`] farthest point sampling, ball query, set abstraction and
//!   inverse-distance feature interpolation,
//! * [`re`] the resolution embedding block,
//! * [`stsa`] spatio-temporal patch division and self-attention,
//! * [`networks`] the segmentation and sequence classification pipelines,
//!   losses and metrics,
//! * [`data`], [`formats`], [`optim`], [`config`], [`train`] and
//!   [`gradcheck`] for running everything at desk scale.

pub mod tensor;
pub mod error;
pub mod nn;
pub mod point_ops;
pub mod gradcheck;

pub use error::{Error, Result};
pub mod re;
pub mod stsa;
pub mod networks;
pub mod data;
pub mod optim;
pub mod formats;
pub mod config;
pub mod train;
