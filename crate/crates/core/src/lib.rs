//! Model-free 6-DoF object pose tracking for RGB-D sequences.
//!
//! Given an initial mask and pose, the tracker chains pairwise feature
//! registration for a coarse per-frame estimate and refines it online with a
//! pose graph over a growing keyframe memory pool. No object model is
//! required at any point.

pub mod dataset;
pub mod detect;
pub mod features;
pub mod frame;
pub mod harness;
pub mod keyframes;
pub mod se3;
pub mod segmentation;
pub mod metrics;
pub mod solver;
pub mod synth;
pub mod tracker;

pub use frame::{DepthMap, Frame, Mask};
pub use se3::{Intrinsics, Pose, Twist};
