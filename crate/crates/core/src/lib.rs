//! Intersectional bias auditing for text-to-image pipelines.
//!
//! Audits measure how far each bias axis sits from its ideal distribution
//! and how intervening on one axis moves every other one. The mitigation
//! loop uses that sensitivity matrix to pick which axis to fix next.

pub mod audit;
pub mod backends;
pub mod bank;
pub mod counterfactuals;
pub mod error;
pub mod intermit;
pub mod metrics;
pub mod model;
pub mod report;

pub use error::{ConfigError, Error, Result};
pub use model::*;
