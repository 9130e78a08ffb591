//! End-to-end pipelines built from the point, attention and embedding blocks.

mod cls;
mod encoder;
mod loss;
pub mod metrics;
mod seg;

pub use cls::{ClsNet, ClsNetConfig, ClsOutput, Temporal};
pub use encoder::{Encoder, EncoderGeometry, EncoderStage};
pub use loss::cross_entropy_loss;
pub use metrics::{metrics, Metrics};
pub use seg::{argmax, SegGeometry, SegNet, SegNetConfig, SegOutput, SegPrediction, FP_NEIGHBORS};
