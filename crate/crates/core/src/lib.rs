//! Confounder-adjusted context for weakly supervised semantic segmentation.
//!
//! A discrete structural causal model toolkit ([`scm`]), a synthetic
//! confounded-scene generator ([`scenegen`]), and an iterative pipeline that
//! alternates image-level classification, CAM seeding, random-walk mask
//! expansion and segmentation, feeding an attention-weighted context map
//! back into the classifier each round ([`pipeline`]).

pub mod camseed;
pub mod cli;
pub mod context;
pub mod error;
pub mod maskexpand;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod pipeline;
pub mod raster;
pub mod render;
pub mod scenegen;
pub mod scm;
pub mod verify;

pub use error::{Error, Result};
pub use raster::{ClassMask, LabelSet, RgbImage, SeedMask, IGNORE};
