//! Trace checkers for the atomic-broadcast properties, metrics extraction,
//! and the analytic performance model.

pub mod checks;
pub mod metrics;
pub mod model;
