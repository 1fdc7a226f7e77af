//! Closed-form expected-performance model.
//!
//! Two parameters describe a deployment: `delta_u`, the expected duration of
//! an unreliable round, and `delta_r`, the expected duration of a reliable
//! round. With failures sparse enough that each reliable round is followed
//! by a run of `lambda >= 3` unreliable rounds, the expected per-message
//! latency is `2*du + (du + 2*dr)/lambda` (the first `lambda-2` rounds
//! deliver after two unreliable rounds, the next-to-last after an extra
//! reliable round, the last after an extra unreliable and reliable round)
//! and the expected throughput is `(1 - 1/lambda) / (du + dr/lambda)`
//! rounds per time unit (`lambda - 1` rounds delivered per
//! `lambda*du + dr`). The worst case alternates two unreliable rounds (the
//! second never completing) with a reliable rerun.

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerfModel {
    /// Expected unreliable round duration.
    pub delta_u: f64,
    /// Expected reliable round duration.
    pub delta_r: f64,
}

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("model requires 0 < delta_u < delta_r (got du={du}, dr={dr})")]
    InvalidDurations { du: f64, dr: f64 },
    #[error("unreliable sequences shorter than 3 rounds have no steady state (lambda={0})")]
    LambdaTooSmall(f64),
    #[error("the merged-rerun variant needs its reliable-round duration")]
    MissingParameter,
}

impl PerfModel {
    pub fn new(delta_u: f64, delta_r: f64) -> Result<Self, ModelError> {
        if !(delta_u > 0.0 && delta_u < delta_r) {
            return Err(ModelError::InvalidDurations {
                du: delta_u,
                dr: delta_r,
            });
        }
        Ok(PerfModel { delta_u, delta_r })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Expected {
    pub latency: f64,
    pub throughput: f64,
}

/// Expected latency and throughput when every reliable round is followed by
/// `lambda` unreliable rounds.
pub fn expected_performance(model: &PerfModel, lambda: f64) -> Result<Expected, ModelError> {
    if lambda < 3.0 {
        return Err(ModelError::LambdaTooSmall(lambda));
    }
    let (du, dr) = (model.delta_u, model.delta_r);
    Ok(Expected {
        latency: 2.0 * du + (du + 2.0 * dr) / lambda,
        throughput: (1.0 - 1.0 / lambda) / (du + dr / lambda),
    })
}

/// Single-round worst-case latency variants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WorstCaseVariant {
    /// Rollbacks rerun unreliably; repeated interruption costs
    /// `3*du + 2*dr`.
    Baseline,
    /// Rollbacks rerun reliably: `du + 2*dr`.
    RerunReliably,
    /// All undelivered rounds rerun in one (longer) reliable round of the
    /// given duration: `2*du + merged`.
    MergedRerun { merged_delta_r: f64 },
}

pub fn worst_case_latency(model: &PerfModel, variant: WorstCaseVariant) -> Result<f64, ModelError> {
    let (du, dr) = (model.delta_u, model.delta_r);
    Ok(match variant {
        WorstCaseVariant::Baseline => 3.0 * du + 2.0 * dr,
        WorstCaseVariant::RerunReliably => du + 2.0 * dr,
        WorstCaseVariant::MergedRerun { merged_delta_r } => {
            if !(merged_delta_r > 0.0) {
                return Err(ModelError::MissingParameter);
            }
            2.0 * du + merged_delta_r
        }
    })
}

/// Worst-case throughput: only reliable rounds deliver, one per
/// `2*du + dr`.
pub fn worst_case_throughput(model: &PerfModel) -> f64 {
    1.0 / (2.0 * model.delta_u + model.delta_r)
}
