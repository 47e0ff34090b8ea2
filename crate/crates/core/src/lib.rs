//! Test-time-training sequence layers, long/short-term attention and
//! hierarchical global-information fusion, with a small video object
//! segmentation pipeline built on top of them.

pub mod ablation;
pub mod attention;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod metrics;
pub mod optim;
pub mod segnet;
pub mod synthvid;
pub mod tensor;
pub mod train;
pub mod ttt;

pub use error::{Error, Result};
pub use tensor::Tensor;
