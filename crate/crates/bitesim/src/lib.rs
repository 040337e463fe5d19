//! Desk-scale simulated inside-mouth bite transfer stack.
//!
//! The crate is organized around the feeding pipeline: a blendshape
//! [`headmodel`] generates ground-truth facial keypoints, [`perception`]
//! observes them through two noisy cameras and tracks the mouth with an
//! outlier-robust registration, [`features`] and [`classify`] turn 100 ms
//! contact windows into interaction labels, [`control`] switches compliant
//! controllers through an event-driven state machine, and [`sim`] closes the
//! loop with scripted scenarios and ablation experiments.

pub mod classify;
pub mod cli;
pub mod control;
pub mod error;
pub mod features;
pub mod geom;
pub mod headmodel;
pub mod perception;
pub mod sim;

pub use error::{Error, Result};
