//! Dense matrices, stable softmax, seeded random streams and the
//! reverse-mode differentiation tape the encoders train with.

pub mod autodiff;
pub mod matrix;
pub mod rng;
pub mod softmax;

pub use autodiff::{Gradients, Graph, ImageShape, NodeId};
pub use matrix::{Axis, Matrix};
pub use rng::Rng;
pub use softmax::{log_sum_exp, stable_softmax};

/// Default floor for axis-wise normalization.
pub const NORM_EPS: f64 = 1e-12;
