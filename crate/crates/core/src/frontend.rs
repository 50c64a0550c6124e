//! Detection pre-processing and two-stage data association for object
//! landmarks.
//!
//! Raw per-frame detections go through an occlusion filter (mutually
//! intersecting boxes can shadow each other), get a center-dependent pixel
//! noise (detections near the image edge are less trustworthy because the
//! mask is likely clipped), and are then associated to the landmark set in
//! two stages: a Mahalanobis/chi-square gate against the Gaussian belief,
//! and — because the Gaussian approximation of a freshly created landmark
//! can be arbitrarily bad — a fallback that reprojects the landmark's
//! particle cloud and counts how many samples land inside the detection
//! box. A detection that no same-class landmark claims but that gates
//! against a different-class landmark is rejected as a probable
//! misclassification; everything else spawns a new landmark.
//!
//! Everything here is a pure function of immutable snapshots; the caller
//! owns the mutation (spawning landmarks, inserting factors) and therefore
//! processes detections of one frame sequentially.

use nalgebra::{DMatrix, Matrix2, Vector2};
use thiserror::Error;

use crate::factor::{project_point, CameraIntrinsics};
use crate::geometry::PoseSE3;
use crate::sampler::ParticleCloud;
use crate::solver::{GaussianBelief, SolverError};
use crate::stats::chi_square_quantile;
use crate::values::{Value, VarId};

#[derive(Debug, Error)]
pub enum FrontendError {
    #[error("mask center relative position ({0}, {1}) outside [-1, 1]^2")]
    CenterOutOfRange(f64, f64),
    #[error("variable {0} is not a camera pose with a mean in the belief")]
    NotAPose(VarId),
    #[error("variable {0} is not a point landmark with a mean in the belief")]
    NotAPoint(VarId),
    #[error("innovation covariance is singular")]
    DegenerateGate,
    #[error(transparent)]
    Solver(#[from] SolverError),
}

/// Axis-aligned pixel rectangle, min corner inclusive, max corner inclusive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub min: Vector2<f64>,
    pub max: Vector2<f64>,
}

impl BoundingBox {
    pub fn new(min: Vector2<f64>, max: Vector2<f64>) -> Self {
        BoundingBox { min, max }
    }

    pub fn area(&self) -> f64 {
        (self.max.x - self.min.x).max(0.0) * (self.max.y - self.min.y).max(0.0)
    }

    pub fn contains(&self, p: &Vector2<f64>) -> bool {
        p.x >= self.min.x && p.x <= self.max.x && p.y >= self.min.y && p.y <= self.max.y
    }

    /// Area of the overlap with `other`; 0 when they do not intersect.
    pub fn intersection_area(&self, other: &BoundingBox) -> f64 {
        let w = self.max.x.min(other.max.x) - self.min.x.max(other.min.x);
        let h = self.max.y.min(other.max.y) - self.min.y.max(other.min.y);
        if w > 0.0 && h > 0.0 {
            w * h
        } else {
            0.0
        }
    }
}

/// One object detection in one frame: a class label, the bounding box, the
/// segmentation mask's area, and the mask center that serves as the pixel
/// measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub frame: u64,
    pub class: String,
    pub bbox: BoundingBox,
    pub mask_area: f64,
    pub center: Vector2<f64>,
}

impl Detection {
    /// Structural sanity: box inside the image, mask no larger than its box,
    /// center inside the box.
    pub fn is_well_formed(&self, image_size: (f64, f64)) -> bool {
        self.bbox.min.x >= 0.0
            && self.bbox.min.y >= 0.0
            && self.bbox.max.x <= image_size.0
            && self.bbox.max.y <= image_size.1
            && self.bbox.min.x < self.bbox.max.x
            && self.bbox.min.y < self.bbox.max.y
            && self.mask_area > 0.0
            && self.mask_area <= self.bbox.area()
            && self.bbox.contains(&self.center)
    }
}

#[derive(Debug, Clone)]
pub struct FrontendConfig {
    /// Image (width, height) in pixels; fixes the edge-noise ramp.
    pub image_size: (f64, f64),
    /// Mask-center pixel noise at the image center, (δ_x, δ_y).
    pub base_sigmas: (f64, f64),
    /// Chi-square confidence level of the Mahalanobis gate.
    pub alpha: f64,
    /// Sample-based association accepts above this in-box fraction.
    pub min_pct: f64,
    /// Occlusion filter fraction for both sub-conditions.
    pub min_frac: f64,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        FrontendConfig {
            image_size: (640.0, 480.0),
            base_sigmas: (10.0, 10.0),
            alpha: 0.95,
            min_pct: 0.10,
            min_frac: 0.10,
        }
    }
}

/// Which stage of the association pipeline accepted the detection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Mahalanobis,
    SampleBased,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RejectReason {
    /// No same-class landmark claims the detection, but a landmark of a
    /// different class gates it: probably a misclassified detection.
    ClassConflict,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AssociationResult {
    Associated { landmark: VarId, stage: Stage },
    Spawn,
    Rejected(RejectReason),
}

/// A landmark as the association pipeline sees it: its id, class label, and
/// — only while it lives in the non-Gaussian registry — its particle cloud.
/// Graduated landmarks carry `None` and are gated purely by the Gaussian
/// belief.
#[derive(Clone, Copy)]
pub struct SceneLandmark<'a> {
    pub id: VarId,
    pub class: &'a str,
    pub cloud: Option<&'a ParticleCloud>,
}

/// Drop detections that are plausibly occluded by another detection in the
/// same frame. For every pair with intersecting boxes, detection `i` dies if
/// its mask is tiny next to `j`'s (under `min_frac` of it), or if the mask
/// mass it has inside the shared box region is both smaller than `j`'s and a
/// large share (over `min_frac`) of `i`'s own mask. All pairs are judged
/// against the *original* set, so the result does not depend on input order.
///
/// Without pixel masks, the mask mass inside the intersection is estimated
/// by spreading each mask uniformly over its box: `mask · overlap / box`.
pub fn filter_occlusions(dets: &[Detection], min_frac: f64) -> Vec<Detection> {
    let mut keep = vec![true; dets.len()];
    for i in 0..dets.len() {
        for j in 0..dets.len() {
            if i == j {
                continue;
            }
            let a = &dets[i];
            let b = &dets[j];
            let inter = a.bbox.intersection_area(&b.bbox);
            if inter <= 0.0 {
                continue;
            }
            if a.mask_area < min_frac * b.mask_area {
                keep[i] = false;
                break;
            }
            let a_in = a.mask_area * inter / a.bbox.area();
            let b_in = b.mask_area * inter / b.bbox.area();
            if a_in < b_in && inter / a.mask_area > min_frac {
                keep[i] = false;
                break;
            }
        }
    }
    dets.iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(d, _)| d.clone())
        .collect()
}

/// Pixel noise of a mask center at relative image position
/// `(r_x, r_y) ∈ [-1, 1]²` (0 = image center, ±1 = image edge). Each axis
/// ramps linearly from its base σ at the center to the *larger* of the two
/// base σs at the edge, so edge detections are never trusted more than
/// center ones on either axis.
pub fn edge_noise(r: (f64, f64), base: (f64, f64)) -> Result<(f64, f64), FrontendError> {
    let (rx, ry) = r;
    if !(rx.abs() <= 1.0 && ry.abs() <= 1.0) {
        return Err(FrontendError::CenterOutOfRange(rx, ry));
    }
    let (dx, dy) = base;
    let dmax = dx.max(dy);
    Ok((
        dx * (1.0 - rx.abs()) + dmax * rx.abs(),
        dy * (1.0 - ry.abs()) + dmax * ry.abs(),
    ))
}

/// Where a pixel sits relative to the image center, each axis in [-1, 1].
pub fn relative_position(center: &Vector2<f64>, image_size: (f64, f64)) -> (f64, f64) {
    (
        (center.x - image_size.0 / 2.0) / (image_size.0 / 2.0),
        (center.y - image_size.1 / 2.0) / (image_size.1 / 2.0),
    )
}

/// Measurement noise covariance Γ for a detection, combining the edge-aware
/// σ ramp with the configured base σs.
pub fn detection_noise(det: &Detection, cfg: &FrontendConfig) -> Result<Matrix2<f64>, FrontendError> {
    let r = relative_position(&det.center, cfg.image_size);
    let (sx, sy) = edge_noise(r, cfg.base_sigmas)?;
    Ok(Matrix2::new(sx * sx, 0.0, 0.0, sy * sy))
}

/// The chi-square acceptance threshold for a 2-dimensional pixel gate at
/// confidence `alpha`.
pub fn gate_threshold(alpha: f64) -> f64 {
    chi_square_quantile(alpha, 2.0)
}

/// Outcome of one Mahalanobis gate evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GateOutcome {
    Evaluated { d2: f64, pass: bool },
    /// The landmark mean projects behind the camera; it cannot claim the
    /// detection.
    BehindCamera,
}

impl GateOutcome {
    pub fn passed(&self) -> Option<f64> {
        match self {
            GateOutcome::Evaluated { d2, pass: true } => Some(*d2),
            _ => None,
        }
    }
}

/// Squared Mahalanobis distance between a detection center and a landmark's
/// reprojection, measured in the innovation covariance `C = J Σ Jᵀ + Γ`
/// where `Σ` is the *joint* pose–landmark marginal of the belief and `J` the
/// reprojection Jacobian at the means. Passes when `d² < threshold`.
pub fn mahalanobis_gate(
    center: &Vector2<f64>,
    gamma: &Matrix2<f64>,
    pose: VarId,
    landmark: VarId,
    belief: &GaussianBelief,
    camera: &CameraIntrinsics,
    threshold: f64,
) -> Result<GateOutcome, FrontendError> {
    let mean = belief.mean();
    let pose_value = match mean.get(pose) {
        Some(Value::PoseSE3(p)) => p,
        _ => return Err(FrontendError::NotAPose(pose)),
    };
    let point = match mean.get(landmark) {
        Some(Value::Point3(p)) => p,
        _ => return Err(FrontendError::NotAPoint(landmark)),
    };
    let Some((pixel, j_pose, j_point)) = project_point(pose_value, point, camera) else {
        return Ok(GateOutcome::BehindCamera);
    };
    let mut jac = DMatrix::zeros(2, 9);
    jac.view_mut((0, 0), (2, 6)).copy_from(&j_pose);
    jac.view_mut((0, 6), (2, 3)).copy_from(&j_point);
    let sigma = belief.marginal_covariance(&[pose, landmark])?;
    let c_dyn = &jac * sigma * jac.transpose();
    let c = Matrix2::new(c_dyn[(0, 0)], c_dyn[(0, 1)], c_dyn[(1, 0)], c_dyn[(1, 1)]) + gamma;
    let c_inv = c.try_inverse().ok_or(FrontendError::DegenerateGate)?;
    let nu = pixel - center;
    let d2 = (nu.transpose() * c_inv * nu)[(0, 0)];
    Ok(GateOutcome::Evaluated {
        d2,
        pass: d2 < threshold,
    })
}

/// Fraction of a landmark's cloud that reprojects inside the detection's
/// bounding box (samples behind the camera count as misses), and whether it
/// clears `min_pct`.
pub fn sample_based_da(
    det: &Detection,
    pose: &PoseSE3,
    cloud: &ParticleCloud,
    camera: &CameraIntrinsics,
    min_pct: f64,
) -> (f64, bool) {
    assert_eq!(cloud.dim(), 3, "sample-based association needs 3d clouds");
    if cloud.is_empty() {
        return (0.0, false);
    }
    let mut inside = 0usize;
    for i in 0..cloud.len() {
        let col = cloud.samples.column(i);
        let point = nalgebra::Vector3::new(col[0], col[1], col[2]);
        if let Some((pixel, _, _)) = project_point(pose, &point, camera) {
            if det.bbox.contains(&pixel) {
                inside += 1;
            }
        }
    }
    let fraction = inside as f64 / cloud.len() as f64;
    (fraction, fraction > min_pct)
}

/// Full association decision for one detection that survived the occlusion
/// filter. Stage 1 gates against every same-class landmark and takes the
/// lowest passing distance (ties to the lower id). Stage 2 falls back to
/// cloud reprojection fractions for same-class landmarks that still carry a
/// cloud. If both stages come up empty but a *different*-class landmark
/// would pass stage 1, the detection is rejected as a class conflict rather
/// than spawning a duplicate landmark; otherwise it spawns.
pub fn associate(
    det: &Detection,
    pose: VarId,
    belief: &GaussianBelief,
    landmarks: &[SceneLandmark],
    camera: &CameraIntrinsics,
    cfg: &FrontendConfig,
) -> Result<AssociationResult, FrontendError> {
    let gamma = detection_noise(det, cfg)?;
    let threshold = gate_threshold(cfg.alpha);

    let mut best_gate: Option<(f64, VarId)> = None;
    for lm in landmarks.iter().filter(|lm| lm.class == det.class) {
        let outcome = mahalanobis_gate(&det.center, &gamma, pose, lm.id, belief, camera, threshold)?;
        if let Some(d2) = outcome.passed() {
            let better = match best_gate {
                None => true,
                Some((best_d2, best_id)) => d2 < best_d2 || (d2 == best_d2 && lm.id < best_id),
            };
            if better {
                best_gate = Some((d2, lm.id));
            }
        }
    }
    if let Some((_, id)) = best_gate {
        return Ok(AssociationResult::Associated {
            landmark: id,
            stage: Stage::Mahalanobis,
        });
    }

    let pose_value = match belief.mean().get(pose) {
        Some(Value::PoseSE3(p)) => p.clone(),
        _ => return Err(FrontendError::NotAPose(pose)),
    };
    let mut best_cloud: Option<(f64, VarId)> = None;
    for lm in landmarks.iter().filter(|lm| lm.class == det.class) {
        let Some(cloud) = lm.cloud else { continue };
        let (fraction, pass) = sample_based_da(det, &pose_value, cloud, camera, cfg.min_pct);
        if !pass {
            continue;
        }
        let better = match best_cloud {
            None => true,
            Some((best_frac, best_id)) => {
                fraction > best_frac || (fraction == best_frac && lm.id < best_id)
            }
        };
        if better {
            best_cloud = Some((fraction, lm.id));
        }
    }
    if let Some((_, id)) = best_cloud {
        return Ok(AssociationResult::Associated {
            landmark: id,
            stage: Stage::SampleBased,
        });
    }

    for lm in landmarks.iter().filter(|lm| lm.class != det.class) {
        let outcome = mahalanobis_gate(&det.center, &gamma, pose, lm.id, belief, camera, threshold)?;
        if outcome.passed().is_some() {
            return Ok(AssociationResult::Rejected(RejectReason::ClassConflict));
        }
    }

    Ok(AssociationResult::Spawn)
}
