//! Fast evaluation of a single landmark's unnormalized log posterior with
//! every other variable pinned.
//!
//! The quantity ψ(l) — the product of all measurement factors adjacent to one
//! landmark, evaluated with the connected poses held fixed — is the workhorse
//! of both importance weighting and linearization-point re-initialization.
//! It gets called once per particle per path, so the two measurement factor
//! kinds get specialized closed-form terms (identical arithmetic to the
//! factors' own `log_likelihood`), with a generic fallback for anything else.
//! Regularizer priors are deliberately excluded: they exist to keep the
//! normal equations full-rank, not to describe the landmark.

use nalgebra::{UnitQuaternion, Vector2, Vector3};
use thiserror::Error;

use crate::factor::{CameraIntrinsics, Factor, LN_2PI, MIN_DEPTH};
use crate::graph::FactorGraph;
use crate::values::{Value, ValueKind, Values, VarId};

#[derive(Debug, Error)]
pub enum PotentialError {
    #[error("unknown landmark {0}")]
    UnknownLandmark(VarId),
    #[error("no fixed value supplied for {0}")]
    MissingFixed(VarId),
    #[error("fixed value for {var} has kind {found}, expected {expected}")]
    KindMismatch {
        var: VarId,
        expected: ValueKind,
        found: ValueKind,
    },
}

enum Term {
    Range {
        origin: Vector2<f64>,
        range: f64,
        sigma: f64,
    },
    Projection {
        rot_inv: UnitQuaternion<f64>,
        cam_translation: Vector3<f64>,
        camera: CameraIntrinsics,
        pixel: Vector2<f64>,
        pixel_sigmas: Vector2<f64>,
    },
    /// Any other adjacent factor (e.g. a plain prior on the landmark):
    /// evaluated through the factor itself against a prebuilt assignment.
    Other { factor: Factor, fixed: Values },
}

/// ψ evaluator for one landmark: adjacent non-regularizer factors with their
/// pose sides substituted from a fixed assignment.
pub struct LandmarkPotential {
    landmark: VarId,
    kind: ValueKind,
    terms: Vec<Term>,
}

impl LandmarkPotential {
    /// Build the evaluator from the factors adjacent to `landmark`, pinning
    /// every other connected variable to its value in `fixed`.
    pub fn new(
        graph: &FactorGraph,
        landmark: VarId,
        fixed: &Values,
    ) -> Result<Self, PotentialError> {
        let kind = graph
            .var_kind(landmark)
            .ok_or(PotentialError::UnknownLandmark(landmark))?;
        let mut terms = Vec::new();
        for &fid in graph.adjacent_factors(landmark) {
            let factor = graph.factor(fid).expect("adjacency lists live factors");
            if factor.is_regularizer() {
                continue;
            }
            match factor {
                Factor::Range {
                    pose,
                    landmark: lm,
                    range,
                    sigma,
                } if *lm == landmark => {
                    let value = lookup(fixed, *pose, ValueKind::PoseSE2)?;
                    let origin = value.as_pose_se2().expect("kind checked").translation;
                    terms.push(Term::Range {
                        origin,
                        range: *range,
                        sigma: *sigma,
                    });
                }
                Factor::Projection {
                    pose,
                    landmark: lm,
                    pixel,
                    pixel_sigmas,
                    camera,
                } if *lm == landmark => {
                    let value = lookup(fixed, *pose, ValueKind::PoseSE3)?;
                    let cam_pose = value.as_pose_se3().expect("kind checked");
                    terms.push(Term::Projection {
                        rot_inv: cam_pose.rotation.inverse(),
                        cam_translation: cam_pose.translation,
                        camera: *camera,
                        pixel: *pixel,
                        pixel_sigmas: *pixel_sigmas,
                    });
                }
                _ => {
                    let mut vals = Values::new();
                    for var in factor.vars() {
                        if var == landmark {
                            continue;
                        }
                        let value = fixed
                            .get(var)
                            .ok_or(PotentialError::MissingFixed(var))?;
                        vals.insert(var, value.clone());
                    }
                    terms.push(Term::Other {
                        factor: factor.clone(),
                        fixed: vals,
                    });
                }
            }
        }
        Ok(LandmarkPotential {
            landmark,
            kind,
            terms,
        })
    }

    pub fn landmark(&self) -> VarId {
        self.landmark
    }

    pub fn kind(&self) -> ValueKind {
        self.kind
    }

    /// Number of contributing factors.
    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    /// log ψ at a landmark position given by raw tangent coordinates (length
    /// 2 for planar points, 3 for spatial points). −∞ where any factor is
    /// invalid (e.g. the point falls behind an observing camera).
    pub fn log_psi_coords(&self, coords: &[f64]) -> f64 {
        debug_assert_eq!(coords.len(), self.kind.dim());
        let mut total = 0.0;
        for term in &self.terms {
            let contribution = match term {
                Term::Range {
                    origin,
                    range,
                    sigma,
                } => {
                    let lm = Vector2::new(coords[0], coords[1]);
                    let dist = (origin - lm).norm();
                    let r = (dist - range) / sigma;
                    -0.5 * r * r - 0.5 * LN_2PI - sigma.ln()
                }
                Term::Projection {
                    rot_inv,
                    cam_translation,
                    camera,
                    pixel,
                    pixel_sigmas,
                } => {
                    let world = Vector3::new(coords[0], coords[1], coords[2]);
                    let p_cam = rot_inv * (world - cam_translation);
                    if p_cam.z <= MIN_DEPTH {
                        return f64::NEG_INFINITY;
                    }
                    let u = camera.fx * p_cam.x / p_cam.z + camera.cx;
                    let v = camera.fy * p_cam.y / p_cam.z + camera.cy;
                    let rx = (u - pixel.x) / pixel_sigmas.x;
                    let ry = (v - pixel.y) / pixel_sigmas.y;
                    -0.5 * (rx * rx + ry * ry) - LN_2PI
                        - pixel_sigmas.x.ln()
                        - pixel_sigmas.y.ln()
                }
                Term::Other { factor, fixed } => {
                    let value = Value::point_from_coords(self.kind, coords)
                        .expect("kind is a point kind or factor accepts it");
                    let mut vals = fixed.clone();
                    vals.insert(self.landmark, value);
                    match factor.log_likelihood(&vals) {
                        Ok(v) => v,
                        Err(_) => return f64::NEG_INFINITY,
                    }
                }
            };
            if contribution == f64::NEG_INFINITY {
                return f64::NEG_INFINITY;
            }
            total += contribution;
        }
        total
    }

    /// log ψ at a landmark [`Value`] of the right kind.
    pub fn log_psi(&self, value: &Value) -> f64 {
        match value.point_coords() {
            Some(coords) => self.log_psi_coords(coords.as_slice()),
            None => f64::NEG_INFINITY,
        }
    }
}

fn lookup(fixed: &Values, var: VarId, expected: ValueKind) -> Result<&Value, PotentialError> {
    let value = fixed.get(var).ok_or(PotentialError::MissingFixed(var))?;
    if value.kind() != expected {
        return Err(PotentialError::KindMismatch {
            var,
            expected,
            found: value.kind(),
        });
    }
    Ok(value)
}
