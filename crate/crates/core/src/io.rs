//! Dataset ingestion, synthetic world generation, and run-output
//! serialization.
//!
//! Two line-oriented text formats cover the measurement side. Blank lines
//! and `#` comments are ignored everywhere, fields are whitespace-separated,
//! and floats are written with Rust's shortest round-trip formatting so
//! write-then-parse is lossless.
//!
//! Range log (planar range-only SLAM):
//! ```text
//! ODO <time> <forward m> <rotation rad> <sx> <sy> <stheta>
//! RNG <time> <tag> <range m> <sigma m>
//! TRUTH_POSE <x> <y> <theta>
//! TRUTH_LM <tag> <x> <y>
//! ```
//! `ODO` means "rotate by `rotation`, then drive `forward` in the new
//! heading"; the relative pose is `(forward·cos r, forward·sin r, r)` and
//! the σs whiten its tangent-space residual. Record times must be
//! non-decreasing. `TRUTH_POSE` lines (in order: initial pose, then one per
//! odometry) and `TRUTH_LM` lines carry the optional ground truth.
//!
//! Detection log (3D object SLAM from a camera):
//! ```text
//! CAMERA <fx> <fy> <cx> <cy>
//! IMAGE <width> <height>
//! INIT_POSE <tx> <ty> <tz> <qw> <qx> <qy> <qz>
//! FRAME <id> <tx> <ty> <tz> <qw> <qx> <qy> <qz> <s0> .. <s5>
//! DET <class> <min_x> <min_y> <max_x> <max_y> <mask_area> <cx> <cy> <mislabeled 0|1>
//! TRUTH_OBJ <id> <class> <x> <y> <z>
//! TRUTH_POSE <tx> <ty> <tz> <qw> <qx> <qy> <qz>
//! ```
//! Each `FRAME` carries the measured relative pose from the previous frame
//! (the first frame must carry identity; the absolute anchor is
//! `INIT_POSE`) and the tangent-space σs of that odometry. `DET` lines
//! attach to the preceding `FRAME`. The trailing mislabel flag is a
//! ground-truth channel for evaluation only — estimation code never reads
//! it.
//!
//! Run outputs go to a directory of three deterministic files: `steps.csv`
//! (columns `step,rmse,registry_size,t_update_ms,t_reinit_ms,t_sampling_ms`,
//! matching the per-frame cost breakdown), `estimates.txt` (final pose and
//! landmark estimates, landmark marginal covariances), and `clouds.txt`
//! (particle clouds of landmarks still in the non-Gaussian registry).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, UnitQuaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::factor::CameraIntrinsics;
use crate::frontend::{BoundingBox, Detection};
use crate::geometry::{PoseSE2, PoseSE3};
use crate::sampler::ParticleCloud;
use crate::values::{Value, VarId};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

impl IoError {
    fn parse(line: usize, message: impl Into<String>) -> Self {
        IoError::Parse {
            line,
            message: message.into(),
        }
    }
}

fn read_file(path: &Path) -> Result<String, IoError> {
    std::fs::read_to_string(path).map_err(|source| IoError::File {
        path: path.to_path_buf(),
        source,
    })
}

fn write_file(path: &Path, content: &str) -> Result<(), IoError> {
    std::fs::write(path, content).map_err(|source| IoError::File {
        path: path.to_path_buf(),
        source,
    })
}

/// Typed cursor over one line's whitespace-separated fields.
struct Fields<'a> {
    it: std::str::SplitWhitespace<'a>,
    line: usize,
}

impl<'a> Fields<'a> {
    fn new(rest: &'a str, line: usize) -> Self {
        Fields {
            it: rest.split_whitespace(),
            line,
        }
    }

    fn next<T: std::str::FromStr>(&mut self, what: &str) -> Result<T, IoError> {
        let token = self
            .it
            .next()
            .ok_or_else(|| IoError::parse(self.line, format!("missing field: {what}")))?;
        token
            .parse()
            .map_err(|_| IoError::parse(self.line, format!("bad {what}: {token:?}")))
    }

    fn finish(mut self) -> Result<(), IoError> {
        match self.it.next() {
            None => Ok(()),
            Some(extra) => Err(IoError::parse(
                self.line,
                format!("unexpected trailing field {extra:?}"),
            )),
        }
    }
}

fn parse_pose_se3(f: &mut Fields) -> Result<PoseSE3, IoError> {
    let t = Vector3::new(f.next("tx")?, f.next("ty")?, f.next("tz")?);
    let q = nalgebra::Quaternion::<f64>::new(f.next("qw")?, f.next("qx")?, f.next("qy")?, f.next("qz")?);
    if (q.norm() - 1.0).abs() > 1e-6 {
        return Err(IoError::parse(f.line, "rotation quaternion is not unit length"));
    }
    // no re-normalization: written components come from unit quaternions and
    // must round-trip bit-exactly
    Ok(PoseSE3::new(t, UnitQuaternion::new_unchecked(q)))
}

fn push_pose_se3(out: &mut String, p: &PoseSE3) {
    let q = p.rotation.quaternion();
    let _ = write!(
        out,
        "{} {} {} {} {} {} {}",
        p.translation.x, p.translation.y, p.translation.z, q.w, q.i, q.j, q.k
    );
}

// ---------------------------------------------------------------------------
// Range logs
// ---------------------------------------------------------------------------

/// "Rotate, then drive forward" odometry step with its tangent-space σs.
#[derive(Debug, Clone, PartialEq)]
pub struct OdometryRecord {
    pub time: f64,
    pub forward: f64,
    pub rotation: f64,
    pub sigmas: [f64; 3],
}

impl OdometryRecord {
    /// The relative pose this record measures.
    pub fn delta(&self) -> PoseSE2 {
        PoseSE2::new(
            self.forward * self.rotation.cos(),
            self.forward * self.rotation.sin(),
            self.rotation,
        )
    }
}

/// One range measurement to a tagged landmark.
#[derive(Debug, Clone, PartialEq)]
pub struct RangeMeasurement {
    pub time: f64,
    pub tag: u32,
    pub range: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RangeRecord {
    Odometry(OdometryRecord),
    Range(RangeMeasurement),
}

impl RangeRecord {
    pub fn time(&self) -> f64 {
        match self {
            RangeRecord::Odometry(o) => o.time,
            RangeRecord::Range(r) => r.time,
        }
    }
}

/// A time-ordered range-and-odometry log with optional ground truth.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RangeLog {
    pub records: Vec<RangeRecord>,
    /// Initial pose followed by the pose after each odometry record.
    pub truth_path: Vec<PoseSE2>,
    pub truth_landmarks: BTreeMap<u32, Vector2<f64>>,
}

pub fn range_log_from_str(text: &str) -> Result<RangeLog, IoError> {
    let mut log = RangeLog::default();
    let mut last_time = f64::NEG_INFINITY;
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let (head, rest) = trimmed.split_once(char::is_whitespace).unwrap_or((trimmed, ""));
        let mut f = Fields::new(rest, line);
        match head {
            "ODO" => {
                let time = f.next("time")?;
                let record = OdometryRecord {
                    time,
                    forward: f.next("forward")?,
                    rotation: f.next("rotation")?,
                    sigmas: [f.next("sx")?, f.next("sy")?, f.next("stheta")?],
                };
                f.finish()?;
                if time < last_time {
                    return Err(IoError::parse(line, "timestamps must be non-decreasing"));
                }
                last_time = time;
                log.records.push(RangeRecord::Odometry(record));
            }
            "RNG" => {
                let time = f.next("time")?;
                let record = RangeMeasurement {
                    time,
                    tag: f.next("tag")?,
                    range: f.next("range")?,
                    sigma: f.next("sigma")?,
                };
                f.finish()?;
                if time < last_time {
                    return Err(IoError::parse(line, "timestamps must be non-decreasing"));
                }
                last_time = time;
                log.records.push(RangeRecord::Range(record));
            }
            "TRUTH_POSE" => {
                let pose = PoseSE2::new(f.next("x")?, f.next("y")?, f.next("theta")?);
                f.finish()?;
                log.truth_path.push(pose);
            }
            "TRUTH_LM" => {
                let tag = f.next("tag")?;
                let p = Vector2::new(f.next("x")?, f.next("y")?);
                f.finish()?;
                log.truth_landmarks.insert(tag, p);
            }
            other => return Err(IoError::parse(line, format!("unknown record {other:?}"))),
        }
    }
    Ok(log)
}

pub fn range_log_to_string(log: &RangeLog) -> String {
    let mut out = String::from("# range log\n");
    for record in &log.records {
        match record {
            RangeRecord::Odometry(o) => {
                let _ = writeln!(
                    out,
                    "ODO {} {} {} {} {} {}",
                    o.time, o.forward, o.rotation, o.sigmas[0], o.sigmas[1], o.sigmas[2]
                );
            }
            RangeRecord::Range(r) => {
                let _ = writeln!(out, "RNG {} {} {} {}", r.time, r.tag, r.range, r.sigma);
            }
        }
    }
    for pose in &log.truth_path {
        let _ = writeln!(
            out,
            "TRUTH_POSE {} {} {}",
            pose.translation.x, pose.translation.y, pose.theta
        );
    }
    for (tag, p) in &log.truth_landmarks {
        let _ = writeln!(out, "TRUTH_LM {} {} {}", tag, p.x, p.y);
    }
    out
}

pub fn parse_range_log(path: &Path) -> Result<RangeLog, IoError> {
    range_log_from_str(&read_file(path)?)
}

pub fn write_range_log(log: &RangeLog, path: &Path) -> Result<(), IoError> {
    write_file(path, &range_log_to_string(log))
}

// ---------------------------------------------------------------------------
// Detection logs
// ---------------------------------------------------------------------------

/// One key frame: relative camera motion since the previous frame plus the
/// detections made in it. `mislabeled` is the evaluation-only truth channel
/// flagging detections whose class label was corrupted.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionFrame {
    pub frame: u64,
    pub odometry: PoseSE3,
    pub odom_sigmas: [f64; 6],
    pub detections: Vec<Detection>,
    pub mislabeled: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionLog {
    pub camera: CameraIntrinsics,
    pub image_size: (f64, f64),
    /// World pose of the first frame (its `odometry` is identity).
    pub initial_pose: PoseSE3,
    pub frames: Vec<DetectionFrame>,
    pub truth_objects: BTreeMap<u32, (String, Vector3<f64>)>,
    pub truth_path: Vec<PoseSE3>,
}

pub fn detection_log_from_str(text: &str) -> Result<DetectionLog, IoError> {
    let mut camera = None;
    let mut image_size = None;
    let mut initial_pose = None;
    let mut frames: Vec<DetectionFrame> = Vec::new();
    let mut truth_objects = BTreeMap::new();
    let mut truth_path = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let (head, rest) = trimmed.split_once(char::is_whitespace).unwrap_or((trimmed, ""));
        let mut f = Fields::new(rest, line);
        match head {
            "CAMERA" => {
                camera = Some(CameraIntrinsics {
                    fx: f.next("fx")?,
                    fy: f.next("fy")?,
                    cx: f.next("cx")?,
                    cy: f.next("cy")?,
                });
                f.finish()?;
            }
            "IMAGE" => {
                image_size = Some((f.next("width")?, f.next("height")?));
                f.finish()?;
            }
            "INIT_POSE" => {
                initial_pose = Some(parse_pose_se3(&mut f)?);
                f.finish()?;
            }
            "FRAME" => {
                let id: u64 = f.next("frame id")?;
                if let Some(last) = frames.last() {
                    if id <= last.frame {
                        return Err(IoError::parse(line, "frame ids must be strictly increasing"));
                    }
                }
                let odometry = parse_pose_se3(&mut f)?;
                let mut odom_sigmas = [0.0; 6];
                for (i, s) in odom_sigmas.iter_mut().enumerate() {
                    *s = f.next(&format!("s{i}"))?;
                }
                f.finish()?;
                frames.push(DetectionFrame {
                    frame: id,
                    odometry,
                    odom_sigmas,
                    detections: Vec::new(),
                    mislabeled: Vec::new(),
                });
            }
            "DET" => {
                let frame = frames
                    .last_mut()
                    .ok_or_else(|| IoError::parse(line, "DET before any FRAME"))?;
                let class: String = f.next("class")?;
                let bbox = BoundingBox::new(
                    Vector2::new(f.next("min_x")?, f.next("min_y")?),
                    Vector2::new(f.next("max_x")?, f.next("max_y")?),
                );
                let mask_area = f.next("mask_area")?;
                let center = Vector2::new(f.next("cx")?, f.next("cy")?);
                let flag: u8 = f.next("mislabel flag")?;
                f.finish()?;
                if flag > 1 {
                    return Err(IoError::parse(line, "mislabel flag must be 0 or 1"));
                }
                frame.detections.push(Detection {
                    frame: frame.frame,
                    class,
                    bbox,
                    mask_area,
                    center,
                });
                frame.mislabeled.push(flag == 1);
            }
            "TRUTH_OBJ" => {
                let id = f.next("object id")?;
                let class: String = f.next("class")?;
                let p = Vector3::new(f.next("x")?, f.next("y")?, f.next("z")?);
                f.finish()?;
                truth_objects.insert(id, (class, p));
            }
            "TRUTH_POSE" => {
                let pose = parse_pose_se3(&mut f)?;
                f.finish()?;
                truth_path.push(pose);
            }
            other => return Err(IoError::parse(line, format!("unknown record {other:?}"))),
        }
    }
    Ok(DetectionLog {
        camera: camera.ok_or_else(|| IoError::parse(0, "missing CAMERA record"))?,
        image_size: image_size.ok_or_else(|| IoError::parse(0, "missing IMAGE record"))?,
        initial_pose: initial_pose.ok_or_else(|| IoError::parse(0, "missing INIT_POSE record"))?,
        frames,
        truth_objects,
        truth_path,
    })
}

pub fn detection_log_to_string(log: &DetectionLog) -> String {
    let mut out = String::from("# detection log\n");
    let c = &log.camera;
    let _ = writeln!(out, "CAMERA {} {} {} {}", c.fx, c.fy, c.cx, c.cy);
    let _ = writeln!(out, "IMAGE {} {}", log.image_size.0, log.image_size.1);
    out.push_str("INIT_POSE ");
    push_pose_se3(&mut out, &log.initial_pose);
    out.push('\n');
    for frame in &log.frames {
        let _ = write!(out, "FRAME {} ", frame.frame);
        push_pose_se3(&mut out, &frame.odometry);
        for s in frame.odom_sigmas {
            let _ = write!(out, " {s}");
        }
        out.push('\n');
        for (det, &flag) in frame.detections.iter().zip(&frame.mislabeled) {
            let _ = writeln!(
                out,
                "DET {} {} {} {} {} {} {} {} {}",
                det.class,
                det.bbox.min.x,
                det.bbox.min.y,
                det.bbox.max.x,
                det.bbox.max.y,
                det.mask_area,
                det.center.x,
                det.center.y,
                u8::from(flag)
            );
        }
    }
    for (id, (class, p)) in &log.truth_objects {
        let _ = writeln!(out, "TRUTH_OBJ {} {} {} {} {}", id, class, p.x, p.y, p.z);
    }
    for pose in &log.truth_path {
        out.push_str("TRUTH_POSE ");
        push_pose_se3(&mut out, pose);
        out.push('\n');
    }
    out
}

pub fn parse_detection_log(path: &Path) -> Result<DetectionLog, IoError> {
    detection_log_from_str(&read_file(path)?)
}

pub fn write_detection_log(log: &DetectionLog, path: &Path) -> Result<(), IoError> {
    write_file(path, &detection_log_to_string(log))
}

// ---------------------------------------------------------------------------
// Synthetic range world
// ---------------------------------------------------------------------------

/// Boustrophedon survey over a field of range beacons. The first leg drives
/// straight east along y = 0, so every landmark's early information is
/// mirror-symmetric about the path line; later legs at y > 0 break the
/// symmetry.
#[derive(Debug, Clone)]
pub struct RangeWorldConfig {
    pub landmarks: Vec<Vector2<f64>>,
    /// Total odometry steps (one range measurement per step).
    pub steps: usize,
    pub step_length: f64,
    /// Steps per long east/west leg.
    pub leg_length: usize,
    /// Steps per northward connector between legs.
    pub gap_steps: usize,
    pub sigma_range: f64,
    /// Odometry noise: forward, lateral slack, rotation.
    pub sigma_odom: [f64; 3],
    pub seed: u64,
}

impl Default for RangeWorldConfig {
    fn default() -> Self {
        RangeWorldConfig {
            landmarks: vec![
                Vector2::new(2.0, 3.0),
                Vector2::new(5.0, 4.0),
                Vector2::new(8.0, 3.0),
                Vector2::new(11.0, 4.0),
            ],
            steps: 60,
            step_length: 1.0,
            leg_length: 12,
            gap_steps: 3,
            sigma_range: 0.3,
            sigma_odom: [0.02, 0.01, 0.005],
            seed: 0,
        }
    }
}

/// Headings and lengths of the boustrophedon legs, cycling east, north,
/// west, north.
fn lawnmower_legs(cfg: &RangeWorldConfig) -> impl Iterator<Item = f64> + '_ {
    use std::f64::consts::{FRAC_PI_2, PI};
    let pattern = [
        (0.0, cfg.leg_length),
        (FRAC_PI_2, cfg.gap_steps),
        (PI, cfg.leg_length),
        (FRAC_PI_2, cfg.gap_steps),
    ];
    (0..)
        .flat_map(move |leg: usize| {
            let (heading, len) = pattern[leg % pattern.len()];
            std::iter::repeat(heading).take(len)
        })
        .take(cfg.steps)
}

pub fn synth_range_world(cfg: &RangeWorldConfig) -> RangeLog {
    assert!(!cfg.landmarks.is_empty(), "need at least one landmark");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = RangeLog {
        truth_landmarks: cfg
            .landmarks
            .iter()
            .enumerate()
            .map(|(i, p)| (i as u32, *p))
            .collect(),
        ..RangeLog::default()
    };
    let mut pose = PoseSE2::identity();
    log.truth_path.push(pose.clone());
    let mut heading = 0.0f64;
    for (step, target_heading) in lawnmower_legs(cfg).enumerate() {
        let time = step as f64;
        let rotation = normalize_angle(target_heading - heading);
        heading = target_heading;
        let true_delta = PoseSE2::new(
            cfg.step_length * rotation.cos(),
            cfg.step_length * rotation.sin(),
            rotation,
        );
        pose = pose.compose(&true_delta);
        log.truth_path.push(pose.clone());

        let n_f: f64 = rng.sample(StandardNormal);
        let n_r: f64 = rng.sample(StandardNormal);
        log.records.push(RangeRecord::Odometry(OdometryRecord {
            time,
            forward: cfg.step_length + cfg.sigma_odom[0] * n_f,
            rotation: rotation + cfg.sigma_odom[2] * n_r,
            sigmas: cfg.sigma_odom,
        }));

        let tag = (step % cfg.landmarks.len()) as u32;
        let true_range = (cfg.landmarks[tag as usize] - pose.translation).norm();
        let n_z: f64 = rng.sample(StandardNormal);
        log.records.push(RangeRecord::Range(RangeMeasurement {
            time,
            tag,
            range: true_range + cfg.sigma_range * n_z,
            sigma: cfg.sigma_range,
        }));
    }
    log
}

fn normalize_angle(a: f64) -> f64 {
    let mut a = a % std::f64::consts::TAU;
    if a > std::f64::consts::PI {
        a -= std::f64::consts::TAU;
    } else if a < -std::f64::consts::PI {
        a += std::f64::consts::TAU;
    }
    a
}

// ---------------------------------------------------------------------------
// Synthetic detection world
// ---------------------------------------------------------------------------

/// Objects on a ring around the room, camera orbiting inside it and looking
/// outward, so each object sweeps through the field of view with strong
/// parallax.
#[derive(Debug, Clone)]
pub struct DetectionWorldConfig {
    pub n_objects: usize,
    pub classes: Vec<String>,
    pub object_radius: f64,
    pub camera_radius: f64,
    pub frames: usize,
    pub camera: CameraIntrinsics,
    pub image_size: (f64, f64),
    pub pixel_sigma: f64,
    /// Box side in pixels at 1 m depth (scaled by 1/z).
    pub box_scale: f64,
    /// Mask fills this fraction of its box.
    pub mask_fill: f64,
    pub odom_sigmas: [f64; 6],
    /// Probability that a detection's class label is corrupted.
    pub mislabel_rate: f64,
    pub depth_near: f64,
    pub depth_far: f64,
    pub seed: u64,
}

impl Default for DetectionWorldConfig {
    fn default() -> Self {
        DetectionWorldConfig {
            n_objects: 8,
            classes: ["cup", "chair", "bottle", "screen", "plant", "box", "lamp", "bin"]
                .into_iter()
                .map(String::from)
                .collect(),
            object_radius: 4.0,
            camera_radius: 1.5,
            frames: 100,
            camera: CameraIntrinsics {
                fx: 400.0,
                fy: 400.0,
                cx: 320.0,
                cy: 240.0,
            },
            image_size: (640.0, 480.0),
            pixel_sigma: 1.0,
            box_scale: 100.0,
            mask_fill: 0.6,
            odom_sigmas: [0.01, 0.01, 0.01, 0.002, 0.002, 0.002],
            mislabel_rate: 0.0,
            depth_near: 0.3,
            depth_far: 15.0,
            seed: 0,
        }
    }
}

/// Camera pose on the orbit at angle `phi`: positioned on the inner circle,
/// z-axis (optical axis) pointing radially outward, y-axis down.
fn orbit_pose(phi: f64, radius: f64) -> PoseSE3 {
    let t = Vector3::new(radius * phi.cos(), radius * phi.sin(), 0.0);
    let z_axis = Vector3::new(phi.cos(), phi.sin(), 0.0);
    let y_axis = Vector3::new(0.0, 0.0, -1.0);
    let x_axis = y_axis.cross(&z_axis);
    let rot = nalgebra::Matrix3::from_columns(&[x_axis, y_axis, z_axis]);
    PoseSE3::new(
        t,
        UnitQuaternion::from_rotation_matrix(&nalgebra::Rotation3::from_matrix_unchecked(rot)),
    )
}

pub fn synth_detection_world(cfg: &DetectionWorldConfig) -> DetectionLog {
    assert!(cfg.n_objects >= 1 && !cfg.classes.is_empty());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let heights = [-0.3, 0.2, 0.7, 1.2];
    let objects: Vec<(String, Vector3<f64>)> = (0..cfg.n_objects)
        .map(|i| {
            let phi = std::f64::consts::TAU * i as f64 / cfg.n_objects as f64;
            let p = Vector3::new(
                cfg.object_radius * phi.cos(),
                cfg.object_radius * phi.sin(),
                heights[i % heights.len()],
            );
            (cfg.classes[i % cfg.classes.len()].clone(), p)
        })
        .collect();

    let true_path: Vec<PoseSE3> = (0..cfg.frames)
        .map(|k| orbit_pose(std::f64::consts::TAU * k as f64 / cfg.frames as f64, cfg.camera_radius))
        .collect();

    let mut log = DetectionLog {
        camera: cfg.camera,
        image_size: cfg.image_size,
        initial_pose: true_path[0].clone(),
        frames: Vec::new(),
        truth_objects: objects
            .iter()
            .enumerate()
            .map(|(i, (c, p))| (i as u32, (c.clone(), *p)))
            .collect(),
        truth_path: true_path.clone(),
    };

    for (k, pose) in true_path.iter().enumerate() {
        let odometry = if k == 0 {
            PoseSE3::identity()
        } else {
            let true_delta = true_path[k - 1].between(pose);
            let noise: Vec<f64> = cfg
                .odom_sigmas
                .iter()
                .map(|s| s * rng.sample::<f64, _>(StandardNormal))
                .collect();
            match Value::PoseSE3(true_delta).retract(&noise) {
                Value::PoseSE3(p) => p,
                _ => unreachable!(),
            }
        };
        let mut frame = DetectionFrame {
            frame: k as u64,
            odometry,
            odom_sigmas: cfg.odom_sigmas,
            detections: Vec::new(),
            mislabeled: Vec::new(),
        };
        for (class, p_world) in &objects {
            let p_cam = pose.inverse().transform_point(p_world);
            if p_cam.z < cfg.depth_near || p_cam.z > cfg.depth_far {
                continue;
            }
            let Some(pixel) = cfg.camera.project(&p_cam) else {
                continue;
            };
            let center = Vector2::new(
                pixel.x + cfg.pixel_sigma * rng.sample::<f64, _>(StandardNormal),
                pixel.y + cfg.pixel_sigma * rng.sample::<f64, _>(StandardNormal),
            );
            let half = cfg.box_scale / p_cam.z / 2.0;
            let bbox = BoundingBox::new(
                Vector2::new(center.x - half, center.y - half),
                Vector2::new(center.x + half, center.y + half),
            );
            let inside = bbox.min.x >= 0.0
                && bbox.min.y >= 0.0
                && bbox.max.x <= cfg.image_size.0
                && bbox.max.y <= cfg.image_size.1;
            if !inside {
                continue;
            }
            let mislabel = cfg.mislabel_rate > 0.0 && rng.gen::<f64>() < cfg.mislabel_rate;
            let label = if mislabel {
                // pick a different class, uniformly
                let mut others: Vec<&String> =
                    cfg.classes.iter().filter(|c| *c != class).collect();
                if others.is_empty() {
                    others.push(class);
                }
                others[rng.gen_range(0..others.len())].clone()
            } else {
                class.clone()
            };
            frame.detections.push(Detection {
                frame: k as u64,
                class: label,
                bbox,
                mask_area: cfg.mask_fill * bbox.area(),
                center,
            });
            frame.mislabeled.push(mislabel);
        }
        log.frames.push(frame);
    }
    log
}

// ---------------------------------------------------------------------------
// Run outputs
// ---------------------------------------------------------------------------

/// Scalar summary of one processed frame.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub rmse: f64,
    pub registry_size: usize,
    pub t_update_ms: f64,
    pub t_reinit_ms: f64,
    pub t_sampling_ms: f64,
}

/// Final estimate of one landmark with its marginal covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSummary {
    pub id: VarId,
    pub mean: Value,
    pub covariance: DMatrix<f64>,
}

/// Everything a run leaves behind: per-step scalars, the final trajectory
/// and landmark estimates, and the particle clouds of landmarks still in
/// the registry when the run ended.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunOutput {
    pub steps: Vec<StepRecord>,
    pub path: Vec<(VarId, Value)>,
    pub landmarks: Vec<LandmarkSummary>,
    pub clouds: Vec<ParticleCloud>,
}

pub const STEPS_CSV_HEADER: &str = "step,rmse,registry_size,t_update_ms,t_reinit_ms,t_sampling_ms";

fn var_index(var: VarId) -> u32 {
    match var {
        VarId::Pose(i) | VarId::Landmark(i) => i,
    }
}

fn estimates_to_string(out: &RunOutput) -> String {
    let mut text = String::from("# final estimates\n");
    for (var, value) in &out.path {
        match value {
            Value::PoseSE2(p) => {
                let _ = writeln!(
                    text,
                    "POSE2 {} {} {} {}",
                    var_index(*var),
                    p.translation.x,
                    p.translation.y,
                    p.theta
                );
            }
            Value::PoseSE3(p) => {
                let _ = write!(text, "POSE3 {} ", var_index(*var));
                push_pose_se3(&mut text, p);
                text.push('\n');
            }
            _ => {}
        }
    }
    for lm in &out.landmarks {
        match &lm.mean {
            Value::Point2(p) => {
                let _ = writeln!(text, "LM2 {} {} {}", var_index(lm.id), p.x, p.y);
            }
            Value::Point3(p) => {
                let _ = writeln!(text, "LM3 {} {} {} {}", var_index(lm.id), p.x, p.y, p.z);
            }
            _ => {}
        }
        let _ = write!(text, "COV {}", lm.covariance.nrows());
        for i in 0..lm.covariance.nrows() {
            for j in 0..lm.covariance.ncols() {
                let _ = write!(text, " {}", lm.covariance[(i, j)]);
            }
        }
        text.push('\n');
    }
    text
}

fn clouds_to_string(out: &RunOutput) -> String {
    let mut text = String::from("# registry particle clouds\n");
    for cloud in &out.clouds {
        let _ = writeln!(
            text,
            "CLOUD {} {} {} {}",
            var_index(cloud.landmark),
            cloud.dim(),
            cloud.len(),
            cloud.created_step
        );
        for c in 0..cloud.len() {
            let col = cloud.samples.column(c);
            let row: Vec<String> = col.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(text, "{}", row.join(" "));
        }
    }
    text
}

pub fn write_run_output(out: &RunOutput, dir: &Path) -> Result<(), IoError> {
    std::fs::create_dir_all(dir).map_err(|source| IoError::File {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut csv = String::from(STEPS_CSV_HEADER);
    csv.push('\n');
    for s in &out.steps {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{}",
            s.step, s.rmse, s.registry_size, s.t_update_ms, s.t_reinit_ms, s.t_sampling_ms
        );
    }
    write_file(&dir.join("steps.csv"), &csv)?;
    write_file(&dir.join("estimates.txt"), &estimates_to_string(out))?;
    write_file(&dir.join("clouds.txt"), &clouds_to_string(out))?;
    Ok(())
}

pub fn read_run_output(dir: &Path) -> Result<RunOutput, IoError> {
    let mut out = RunOutput::default();

    let csv = read_file(&dir.join("steps.csv"))?;
    for (idx, raw) in csv.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() {
            continue;
        }
        if idx == 0 {
            if trimmed != STEPS_CSV_HEADER {
                return Err(IoError::parse(line, "unexpected steps.csv header"));
            }
            continue;
        }
        let cols: Vec<&str> = trimmed.split(',').collect();
        if cols.len() != 6 {
            return Err(IoError::parse(line, "expected 6 comma-separated columns"));
        }
        let field = |i: usize, what: &str| -> Result<f64, IoError> {
            cols[i]
                .parse()
                .map_err(|_| IoError::parse(line, format!("bad {what}: {:?}", cols[i])))
        };
        out.steps.push(StepRecord {
            step: cols[0]
                .parse()
                .map_err(|_| IoError::parse(line, format!("bad step: {:?}", cols[0])))?,
            rmse: field(1, "rmse")?,
            registry_size: cols[2]
                .parse()
                .map_err(|_| IoError::parse(line, format!("bad registry_size: {:?}", cols[2])))?,
            t_update_ms: field(3, "t_update_ms")?,
            t_reinit_ms: field(4, "t_reinit_ms")?,
            t_sampling_ms: field(5, "t_sampling_ms")?,
        });
    }

    let estimates = read_file(&dir.join("estimates.txt"))?;
    for (idx, raw) in estimates.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let (head, rest) = trimmed.split_once(char::is_whitespace).unwrap_or((trimmed, ""));
        let mut f = Fields::new(rest, line);
        match head {
            "POSE2" => {
                let i: u32 = f.next("pose index")?;
                let pose = PoseSE2::new(f.next("x")?, f.next("y")?, f.next("theta")?);
                f.finish()?;
                out.path.push((VarId::Pose(i), Value::PoseSE2(pose)));
            }
            "POSE3" => {
                let i: u32 = f.next("pose index")?;
                let pose = parse_pose_se3(&mut f)?;
                f.finish()?;
                out.path.push((VarId::Pose(i), Value::PoseSE3(pose)));
            }
            "LM2" => {
                let i: u32 = f.next("landmark index")?;
                let p = Vector2::new(f.next("x")?, f.next("y")?);
                f.finish()?;
                out.landmarks.push(LandmarkSummary {
                    id: VarId::Landmark(i),
                    mean: Value::Point2(p),
                    covariance: DMatrix::zeros(0, 0),
                });
            }
            "LM3" => {
                let i: u32 = f.next("landmark index")?;
                let p = Vector3::new(f.next("x")?, f.next("y")?, f.next("z")?);
                f.finish()?;
                out.landmarks.push(LandmarkSummary {
                    id: VarId::Landmark(i),
                    mean: Value::Point3(p),
                    covariance: DMatrix::zeros(0, 0),
                });
            }
            "COV" => {
                let lm = out
                    .landmarks
                    .last_mut()
                    .ok_or_else(|| IoError::parse(line, "COV before any landmark"))?;
                let d: usize = f.next("dimension")?;
                let mut cov = DMatrix::zeros(d, d);
                for i in 0..d {
                    for j in 0..d {
                        cov[(i, j)] = f.next("covariance entry")?;
                    }
                }
                f.finish()?;
                lm.covariance = cov;
            }
            other => return Err(IoError::parse(line, format!("unknown record {other:?}"))),
        }
    }

    let clouds = read_file(&dir.join("clouds.txt"))?;
    let mut pending: Option<(VarId, usize, usize, u64, Vec<f64>)> = None;
    for (idx, raw) in clouds.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        if let Some(rest) = trimmed.strip_prefix("CLOUD ") {
            if let Some((lm, d, n, created, data)) = pending.take() {
                if data.len() != d * n {
                    return Err(IoError::parse(line, "cloud ended with missing samples"));
                }
                out.clouds.push(ParticleCloud {
                    landmark: lm,
                    samples: DMatrix::from_vec(d, n, data),
                    created_step: created,
                });
            }
            let mut f = Fields::new(rest, line);
            let i: u32 = f.next("landmark index")?;
            let d: usize = f.next("dimension")?;
            let n: usize = f.next("sample count")?;
            let created: u64 = f.next("created step")?;
            f.finish()?;
            pending = Some((VarId::Landmark(i), d, n, created, Vec::with_capacity(d * n)));
        } else {
            let Some((_, d, n, _, data)) = pending.as_mut() else {
                return Err(IoError::parse(line, "sample line before any CLOUD header"));
            };
            let mut f = Fields::new(trimmed, line);
            for _ in 0..*d {
                data.push(f.next("sample coordinate")?);
            }
            f.finish()?;
            if data.len() > *d * *n {
                return Err(IoError::parse(line, "more samples than the CLOUD header declared"));
            }
        }
    }
    if let Some((lm, d, n, created, data)) = pending.take() {
        if data.len() != d * n {
            return Err(IoError::parse(0, "cloud ended with missing samples"));
        }
        out.clouds.push(ParticleCloud {
            landmark: lm,
            samples: DMatrix::from_vec(d, n, data),
            created_step: created,
        });
    }
    Ok(out)
}
