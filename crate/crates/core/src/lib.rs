//! Selection-bias mitigation for computerized adaptive testing.
//!
//! A two-parameter logistic response model is fitted jointly over users and
//! items; adaptive-testing sessions produce biased training data, and
//! user-wise aggregate influence scores pick the biased users whose inclusion
//! least disturbs a small unbiased reference fit.

pub mod cat;
pub mod data;
pub mod error;
pub mod eval;
pub mod fitting;
pub mod influence;
pub mod model;
pub mod par;
pub mod pipeline;

pub use error::{Error, Result};
