//! Log replay: feeds a synthesized dataset through [`Gapslam`] frame by
//! frame and collects the artifacts the other commands consume.
//!
//! Range logs carry beacon identities, so association is just the tag and a
//! frame is whatever sits between two odometry records. Detection logs carry
//! no identities at all: every camera frame runs in two phases — a
//! motion-only update first, so the association gate can query a posterior
//! that already contains the new pose, then the measurement update with the
//! associated detections. Both phases append a row to the step table.
//!
//! Ground truth from the logs is only ever used to fill the `rmse` column
//! and never reaches the estimator.

use std::collections::{BTreeMap, BTreeSet};

use anyhow::{anyhow, Result};
use nalgebra::Vector2;

use gapslam_core::frontend::{edge_noise, filter_occlusions, relative_position};
use gapslam_core::io::{DetectionLog, LandmarkSummary, RangeLog, RangeRecord, RunOutput, StepRecord};
use gapslam_core::metrics::rmse;
use gapslam_core::sampler::ParticleCloud;
use gapslam_core::{
    associate, Association, AssociationResult, Detection, Factor, FrontendConfig, Gapslam,
    GapslamConfig, Mode, Noise, PoseSE2, SceneLandmark, StepSummary, Value, Values, VarId,
};

/// Standard deviation of the prior pinning the first pose; the dataset's own
/// frame is the estimation frame.
pub const ANCHOR_SIGMA: f64 = 1e-4;

/// Default graduation threshold for planar range worlds.
pub const RANGE_EIG_THRESHOLD: f64 = 0.05;
/// Default graduation threshold for spatial object worlds.
pub const OBJECT_EIG_THRESHOLD: f64 = 0.02;

/// Knobs shared by both runners, mirroring the `run` subcommand flags.
#[derive(Debug, Clone)]
pub struct RunSettings {
    pub mode: Mode,
    /// Path count for dense cloud exports.
    pub paths: usize,
    /// Proposals drawn per landmark refresh.
    pub per_path: usize,
    /// Graduation threshold override; `None` picks the per-world default
    /// ([`RANGE_EIG_THRESHOLD`] or [`OBJECT_EIG_THRESHOLD`]).
    pub eig_threshold: Option<f64>,
    pub seed: u64,
    /// Snapshot dense clouds right after this step instead of at the end.
    pub dense_step: Option<u64>,
}

impl Default for RunSettings {
    fn default() -> Self {
        RunSettings {
            mode: Mode::Gapslam,
            paths: 200,
            per_path: 100,
            eig_threshold: None,
            seed: 0,
            dense_step: None,
        }
    }
}

impl RunSettings {
    fn gapslam_config(&self, default_threshold: f64) -> GapslamConfig {
        GapslamConfig {
            mode: self.mode,
            paths: self.paths,
            per_path: self.per_path,
            eig_threshold: self.eig_threshold.unwrap_or(default_threshold),
            seed: self.seed,
            ..GapslamConfig::default()
        }
    }
}

/// Replay a range log. The step table and whatever artifacts were finished
/// are returned even when the run fails, so callers can keep partial output
/// next to the error.
pub fn run_range_log(log: &RangeLog, settings: &RunSettings) -> (RunOutput, Result<Gapslam>) {
    let mut output = RunOutput::default();
    let result = drive_range(log, settings, &mut output);
    (output, result)
}

/// Replay a detection log with frontend association. On success also returns
/// the class each spawned landmark was filed under.
pub fn run_detection_log(
    log: &DetectionLog,
    settings: &RunSettings,
    frontend: &FrontendConfig,
) -> (RunOutput, Result<(Gapslam, BTreeMap<VarId, String>)>) {
    let mut output = RunOutput::default();
    let result = drive_detections(log, settings, frontend, &mut output);
    (output, result)
}

fn drive_range(
    log: &RangeLog,
    settings: &RunSettings,
    output: &mut RunOutput,
) -> Result<Gapslam> {
    let cfg = settings.gapslam_config(RANGE_EIG_THRESHOLD);
    let anchor = Noise::isotropic(3, ANCHOR_SIGMA)?;
    let mut sys = Gapslam::new(cfg, Value::PoseSE2(PoseSE2::identity()), anchor)?;
    let truth = TruthTrack::range(log);
    let mut seen: BTreeSet<u32> = BTreeSet::new();
    let mut frame_open = false;

    for record in &log.records {
        match record {
            RangeRecord::Odometry(odo) => {
                if frame_open {
                    close_frame(&mut sys, &truth, settings, output)?;
                }
                let noise = Noise::diagonal(&odo.sigmas)?;
                sys.process_odometry(Value::PoseSE2(odo.delta()), noise)?;
                frame_open = true;
            }
            RangeRecord::Range(rng) => {
                let pose = sys
                    .current_pose()
                    .ok_or_else(|| anyhow!("range record before any pose"))?;
                let landmark = VarId::Landmark(rng.tag);
                let assoc = if seen.insert(rng.tag) {
                    Association::New
                } else {
                    Association::Existing
                };
                sys.process_landmark_measurement(
                    Factor::Range {
                        pose,
                        landmark,
                        range: rng.range,
                        sigma: rng.sigma,
                    },
                    assoc,
                )?;
                frame_open = true;
            }
        }
    }
    if frame_open {
        close_frame(&mut sys, &truth, settings, output)?;
    }
    finalize_output(&sys, settings, output)?;
    Ok(sys)
}

fn drive_detections(
    log: &DetectionLog,
    settings: &RunSettings,
    frontend: &FrontendConfig,
    output: &mut RunOutput,
) -> Result<(Gapslam, BTreeMap<VarId, String>)> {
    let cfg = settings.gapslam_config(OBJECT_EIG_THRESHOLD);
    let anchor = Noise::isotropic(6, ANCHOR_SIGMA)?;
    let mut sys = Gapslam::new(cfg, Value::PoseSE3(log.initial_pose), anchor)?;
    let truth = TruthTrack::detection(log);
    let mut classes: BTreeMap<VarId, String> = BTreeMap::new();
    let mut next_landmark: u32 = 0;

    for frame in &log.frames {
        if frame.frame > 0 {
            let noise = Noise::diagonal(&frame.odom_sigmas)?;
            sys.process_odometry(Value::PoseSE3(frame.odometry), noise)?;
            // Motion phase: bring the new pose into the posterior before the
            // gate asks for its marginal.
            close_frame(&mut sys, &truth, settings, output)?;
        }
        let pose = sys
            .current_pose()
            .ok_or_else(|| anyhow!("detection frame before any pose"))?;
        let kept = filter_occlusions(&frame.detections, frontend.min_frac);
        let decisions = associate_frame(&sys, pose, &kept, log, frontend, &classes)?;
        for (det, decision) in kept.iter().zip(decisions) {
            match decision {
                AssociationResult::Associated { landmark, .. } => {
                    let factor = projection_factor(pose, landmark, det, log, frontend)?;
                    sys.process_landmark_measurement(factor, Association::Existing)?;
                }
                AssociationResult::Spawn => {
                    let landmark = VarId::Landmark(next_landmark);
                    next_landmark += 1;
                    classes.insert(landmark, det.class.clone());
                    let factor = projection_factor(pose, landmark, det, log, frontend)?;
                    sys.process_landmark_measurement(factor, Association::New)?;
                }
                AssociationResult::Rejected(reason) => {
                    log::debug!(
                        "frame {}: dropped a {} detection ({reason:?})",
                        frame.frame,
                        det.class
                    );
                }
            }
        }
        close_frame(&mut sys, &truth, settings, output)?;
    }
    finalize_output(&sys, settings, output)?;
    Ok((sys, classes))
}

/// Decide what to do with each detection of a frame before any of them is
/// inserted, against the landmark set as of the previous frame.
fn associate_frame(
    sys: &Gapslam,
    pose: VarId,
    detections: &[Detection],
    log: &DetectionLog,
    frontend: &FrontendConfig,
    classes: &BTreeMap<VarId, String>,
) -> Result<Vec<AssociationResult>> {
    let belief = match sys.belief() {
        Some(belief) if !classes.is_empty() => belief,
        // First frame: no posterior and no landmarks to associate against.
        _ => return Ok(vec![AssociationResult::Spawn; detections.len()]),
    };
    let scene: Vec<SceneLandmark> = classes
        .iter()
        .map(|(&id, class)| SceneLandmark {
            id,
            class: class.as_str(),
            cloud: sys.cloud(id),
        })
        .collect();
    let mut decisions = Vec::with_capacity(detections.len());
    for det in detections {
        decisions.push(associate(det, pose, belief, &scene, &log.camera, frontend)?);
    }
    Ok(decisions)
}

fn projection_factor(
    pose: VarId,
    landmark: VarId,
    det: &Detection,
    log: &DetectionLog,
    frontend: &FrontendConfig,
) -> Result<Factor> {
    let r = relative_position(&det.center, frontend.image_size);
    let (sx, sy) = edge_noise(r, frontend.base_sigmas)?;
    Ok(Factor::Projection {
        pose,
        landmark,
        pixel: det.center,
        pixel_sigmas: Vector2::new(sx, sy),
        camera: log.camera,
    })
}

fn close_frame(
    sys: &mut Gapslam,
    truth: &TruthTrack,
    settings: &RunSettings,
    output: &mut RunOutput,
) -> Result<()> {
    let summary: StepSummary = sys.finish_frame()?;
    output.steps.push(StepRecord {
        step: summary.step,
        rmse: truth.path_rmse(sys),
        registry_size: sys.registry_size(),
        t_update_ms: summary.timings.update_ms,
        t_reinit_ms: summary.timings.reinit_ms,
        t_sampling_ms: summary.timings.sampling_ms,
    });
    if settings.dense_step == Some(summary.step) {
        output.clouds = dense_snapshot(sys)?;
    }
    Ok(())
}

/// Fill the final path, landmark summaries, and (unless an earlier snapshot
/// was requested) dense clouds for every registry member. Dense export runs
/// outside the timed phases on purpose.
fn finalize_output(sys: &Gapslam, settings: &RunSettings, output: &mut RunOutput) -> Result<()> {
    let mut path = Vec::new();
    let mut index = 0u32;
    while let Some(value) = sys.estimate(VarId::Pose(index)) {
        path.push((VarId::Pose(index), value.clone()));
        index += 1;
    }
    output.path = path;

    let belief = match sys.belief() {
        Some(belief) => belief,
        None => return Ok(()), // nothing was ever optimized
    };
    let mut ids = sys.registry_landmarks();
    ids.extend(sys.graduated_landmarks());
    ids.sort();
    let mut landmarks = Vec::with_capacity(ids.len());
    for id in ids {
        let mean = sys
            .estimate(id)
            .ok_or_else(|| anyhow!("landmark {id} has no estimate"))?
            .clone();
        let covariance = belief.marginal_covariance(&[id])?;
        landmarks.push(LandmarkSummary {
            id,
            mean,
            covariance,
        });
    }
    output.landmarks = landmarks;

    if settings.dense_step.is_none() {
        output.clouds = dense_snapshot(sys)?;
    }
    Ok(())
}

fn dense_snapshot(sys: &Gapslam) -> Result<Vec<ParticleCloud>> {
    let mut clouds = Vec::new();
    for id in sys.registry_landmarks() {
        clouds.push(sys.dense_cloud(id)?);
    }
    Ok(clouds)
}

/// Ground-truth poses keyed like the estimator's pose ids; empty when the
/// log carries no truth channel.
struct TruthTrack {
    poses: Values,
}

impl TruthTrack {
    fn range(log: &RangeLog) -> Self {
        let mut poses = Values::new();
        for (i, pose) in log.truth_path.iter().enumerate() {
            poses.insert(VarId::Pose(i as u32), Value::PoseSE2(*pose));
        }
        TruthTrack { poses }
    }

    fn detection(log: &DetectionLog) -> Self {
        let mut poses = Values::new();
        for (i, pose) in log.truth_path.iter().enumerate() {
            poses.insert(VarId::Pose(i as u32), Value::PoseSE3(*pose));
        }
        TruthTrack { poses }
    }

    /// Translation RMSE over every pose estimated so far, NaN without truth.
    fn path_rmse(&self, sys: &Gapslam) -> f64 {
        if self.poses.is_empty() {
            return f64::NAN;
        }
        let mut estimated = Values::new();
        for (id, value) in sys.estimates().iter() {
            if matches!(id, VarId::Pose(_)) && self.poses.get(id).is_some() {
                estimated.insert(id, value.clone());
            }
        }
        if estimated.is_empty() {
            return f64::NAN;
        }
        rmse(&estimated, &self.poses).unwrap_or(f64::NAN)
    }
}
