//! Dimensional contrastive learning: InfoNCE along the feature axis as a
//! plug-in regularizer for self-supervised frameworks.

pub mod data;
pub mod error;
pub mod frameworks;
pub mod losses;
pub mod metrics;
pub mod numcore;
pub mod verify;

pub use error::{Error, Result};
