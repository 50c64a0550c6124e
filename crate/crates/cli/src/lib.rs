//! Command layer for the hybrid SLAM estimator: dataset synthesis, log
//! replay, reference posterior sampling, and run scoring.
//!
//! The binary is a thin argument parser over [`commands`]; the work of
//! feeding logs through the estimator lives in [`runner`] so tests can drive
//! complete runs without spawning processes.

pub mod commands;
pub mod runner;

use gapslam_core::oracle::OracleError;
use gapslam_core::{GapslamError, SolverError};

/// Map an error chain to the process exit code contract: 2 when the linear
/// system went indeterminate, 3 when the reference chains failed to
/// converge, 1 for anything else.
pub fn exit_code_for(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<SolverError>() {
            if matches!(e, SolverError::IndeterminateSystem(_)) {
                return 2;
            }
        }
        if let Some(e) = cause.downcast_ref::<GapslamError>() {
            if matches!(e, GapslamError::Solver(SolverError::IndeterminateSystem(_))) {
                return 2;
            }
        }
        if let Some(e) = cause.downcast_ref::<OracleError>() {
            if matches!(e, OracleError::Unconverged { .. }) {
                return 3;
            }
        }
    }
    1
}
