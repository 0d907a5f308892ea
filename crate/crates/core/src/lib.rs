//! Multi-contrast tumor segmentation with task-oriented prompt attention and
//! dual-path Monte-Carlo uncertainty refinement, on synthetic phantoms.

pub mod dur;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod phantom;
pub mod report;
pub mod rng;
pub mod tensor;
pub mod tpa;
pub mod trainer;
pub mod volume;

pub use error::{Error, Result};
