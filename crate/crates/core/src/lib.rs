//! Joint anticipation of future optical flow and scene parsing.
//!
//! Given the last `k` frames and their segmentation score maps, a flow
//! network with one branch per object group predicts the next flow field,
//! and a parsing network that borrows the flow network's features predicts
//! the next score map. Predictions can be fed back recursively for
//! multi-step forecasting.
//!
//! The crate also carries everything needed to train and score the models
//! end to end: a synthetic video generator with exact ground truth, file
//! formats, metrics, the copy-last / warp-last baselines and a steering
//! regressor.

pub mod baselines;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod flowio;
pub mod losses;
pub mod metrics;
pub mod nets;
pub mod steering;
pub mod synthgen;
pub mod trainer;
pub mod types;
pub mod warp;

pub use error::{Error, Result};
pub use types::{group_mask_from_seg, ClassTable, FlowField, Group, GroupMask, SegMap};
