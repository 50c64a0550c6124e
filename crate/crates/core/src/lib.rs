//! Hybrid Gaussian/particle inference for landmark SLAM.
//!
//! The library keeps a sparse nonlinear least-squares estimate of the full
//! joint (poses and landmarks) and, for landmarks whose marginals are still
//! far from Gaussian — freshly initialized ranges or bearings with little
//! baseline — maintains conditional particle approximations drawn against
//! the current pose estimate. The particles feed back into the optimizer as
//! linearization-point resets, which is what lets the Gaussian solve escape
//! bad local minima, and a landmark leaves the particle registry once its
//! sample covariance tightens below a threshold.
//!
//! Module map:
//! * [`geometry`], [`values`], [`noise`], [`factor`], [`graph`] — factor
//!   graph building blocks over SE(2)/SE(3)/point manifolds.
//! * [`solver`] — sparse Levenberg-Marquardt, Gaussian beliefs, marginals,
//!   joint sampling, linearization-point resets.
//! * [`potential`], [`sampler`] — conditional landmark potentials and the
//!   importance-sampled particle clouds.
//! * [`gapslam`] — the per-measurement state machine tying the two halves
//!   together.
//! * [`frontend`] — object-detection handling: occlusion filtering,
//!   center-edge noise, two-stage data association.
//! * [`io`] — dataset/grammar parsing, synthetic world generators, run
//!   output serialization.
//! * [`oracle`] — reference posterior samplers (MCMC and dense 2D grids)
//!   used for validation.
//! * [`metrics`] — RMSE and kernel MMD between sample sets.
//! * [`stats`] — small statistical helpers shared by tests and gating.

pub mod factor;
pub mod frontend;
pub mod gapslam;
pub mod geometry;
pub mod graph;
pub mod io;
pub mod metrics;
pub mod noise;
pub mod oracle;
pub mod potential;
pub mod sampler;
pub mod solver;
pub mod stats;
pub mod values;

pub use factor::{CameraIntrinsics, EvalError, Factor, Linearization};
pub use frontend::{
    associate, AssociationResult, BoundingBox, Detection, FrontendConfig, FrontendError,
    SceneLandmark, Stage,
};
pub use gapslam::{Association, Gapslam, GapslamConfig, GapslamError, Mode, StepSummary};
pub use geometry::{PoseSE2, PoseSE3};
pub use graph::{FactorGraph, FactorId, GraphError};
pub use io::{
    parse_detection_log, parse_range_log, read_run_output, synth_detection_world,
    synth_range_world, write_detection_log, write_range_log, write_run_output, DetectionLog,
    DetectionWorldConfig, IoError, RangeLog, RangeWorldConfig, RunOutput, StepRecord,
};
pub use noise::Noise;
pub use sampler::{ParticleCloud, SampleConfig, SamplerError};
pub use solver::{optimize, GaussianBelief, Solver, SolverConfig, SolverError};
pub use values::{Value, ValueKind, Values, VarId};
