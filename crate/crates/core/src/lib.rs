//! Training data attribution by unrolled differentiation.

pub mod attribution;
pub mod curvature;
pub mod data;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod model;
pub mod persist;
pub mod train;
pub mod unroll;

pub use error::{Result, TdaError};
