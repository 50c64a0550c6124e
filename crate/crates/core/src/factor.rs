//! Measurement factors: residuals, analytic Jacobians, log-likelihoods.
//!
//! Every factor evaluates a *whitened* residual r (unit noise covariance)
//! so the solver can form normal equations as plain sums of J^T J, and a
//! log-likelihood that includes the Gaussian normalization constant so
//! factor products are genuine (unnormalized) densities.
//!
//! Jacobians are analytic and expressed in the tangent coordinates of each
//! connected variable, i.e. they differentiate along the same retraction
//! the solver uses to apply updates. The tests check all of them against
//! central finite differences.

use nalgebra::{DMatrix, DVector, Matrix2, Vector2, Vector3};
use thiserror::Error;

use crate::geometry::{drot2, rot2, se3_adjoint, se3_right_jacobian_inv, so3_hat, PoseSE3};
use crate::noise::Noise;
use crate::values::{Value, ValueKind, Values, VarId};

pub(crate) const LN_2PI: f64 = 1.837877066409345483560659472811;

/// Smallest camera-frame depth considered to be in front of the camera.
pub const MIN_DEPTH: f64 = 1e-6;

/// Pinhole camera intrinsics (no distortion).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    /// Project a camera-frame point; `None` when it is at or behind the
    /// image plane.
    pub fn project(&self, p_cam: &Vector3<f64>) -> Option<Vector2<f64>> {
        if p_cam.z <= MIN_DEPTH {
            return None;
        }
        Some(Vector2::new(
            self.fx * p_cam.x / p_cam.z + self.cx,
            self.fy * p_cam.y / p_cam.z + self.cy,
        ))
    }

    /// Camera-frame point of a pixel at the given depth (z-coordinate).
    pub fn backproject(&self, pixel: &Vector2<f64>, depth: f64) -> Vector3<f64> {
        Vector3::new(
            (pixel.x - self.cx) / self.fx * depth,
            (pixel.y - self.cy) / self.fy * depth,
            depth,
        )
    }
}

/// Predicted pixel of a world point seen from a camera pose, with the raw
/// (unwhitened) Jacobians with respect to the pose's right-retraction
/// tangent (2x6) and the point (2x3). `None` when the point is behind the
/// camera.
pub fn project_point(
    pose: &PoseSE3,
    point: &Vector3<f64>,
    camera: &CameraIntrinsics,
) -> Option<(Vector2<f64>, DMatrix<f64>, DMatrix<f64>)> {
    let r_inv = pose.rotation.inverse();
    let p_cam = r_inv * (point - pose.translation);
    if p_cam.z <= MIN_DEPTH {
        return None;
    }
    let z = p_cam.z;
    let pixel = Vector2::new(
        camera.fx * p_cam.x / z + camera.cx,
        camera.fy * p_cam.y / z + camera.cy,
    );
    // d pixel / d p_cam
    let j_proj = DMatrix::from_row_slice(
        2,
        3,
        &[
            camera.fx / z,
            0.0,
            -camera.fx * p_cam.x / (z * z),
            0.0,
            camera.fy / z,
            -camera.fy * p_cam.y / (z * z),
        ],
    );
    // p_cam as a function of a right perturbation of the pose:
    // p_cam(delta) = Exp(-delta) p_cam, so d/d rho = -I, d/d omega = hat(p_cam).
    let mut j_pose_inner = DMatrix::zeros(3, 6);
    j_pose_inner
        .view_mut((0, 0), (3, 3))
        .copy_from(&(-nalgebra::Matrix3::identity()));
    j_pose_inner.view_mut((0, 3), (3, 3)).copy_from(&so3_hat(&p_cam));
    // p_cam as a function of the world point: R^T.
    let rt = r_inv.to_rotation_matrix().into_inner();
    let j_pose = &j_proj * j_pose_inner;
    let j_point = &j_proj * DMatrix::from_column_slice(3, 3, rt.as_slice());
    Some((pixel, j_pose, j_point))
}

/// Structural evaluation failures. A landmark behind the camera is not a
/// structural failure for log-likelihoods (it means density zero) but is
/// reported here by residual/linearize so callers can tell it apart.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("variable {0} missing from assignment")]
    MissingVariable(VarId),
    #[error("variable {var} has kind {found}, factor expects {expected}")]
    TypeMismatch { var: VarId, expected: ValueKind, found: ValueKind },
    #[error("landmark projects behind the camera")]
    BehindCamera,
}

/// Whitened residual and per-variable Jacobian blocks at a linearization
/// point.
#[derive(Clone, Debug)]
pub struct Linearization {
    pub residual: DVector<f64>,
    pub blocks: Vec<(VarId, DMatrix<f64>)>,
}

/// One measurement or prior term of the factor graph.
#[derive(Clone, Debug)]
pub enum Factor {
    /// Gaussian prior on a single variable, residual local(mean, value).
    Prior { var: VarId, mean: Value, noise: Noise },
    /// Relative measurement between two variables of the same kind: a
    /// relative pose for pose pairs, a coordinate difference for points.
    Odometry { from: VarId, to: VarId, delta: Value, noise: Noise },
    /// Distance between a planar pose and a 2D landmark.
    Range { pose: VarId, landmark: VarId, range: f64, sigma: f64 },
    /// Pinhole observation of a 3D landmark from an SE(3) camera pose,
    /// independent per-axis pixel noise.
    Projection {
        pose: VarId,
        landmark: VarId,
        pixel: Vector2<f64>,
        pixel_sigmas: Vector2<f64>,
        camera: CameraIntrinsics,
    },
    /// Weak isotropic prior attached to newly created uncertain landmarks so
    /// the normal equations stay full rank; excluded from sampling
    /// potentials and removed once a landmark's marginal tightens.
    RegularizerPrior { var: VarId, mean: Value, sigma: f64 },
}

impl Factor {
    /// Connected variables, in residual block order.
    pub fn vars(&self) -> Vec<VarId> {
        match self {
            Factor::Prior { var, .. } | Factor::RegularizerPrior { var, .. } => vec![*var],
            Factor::Odometry { from, to, .. } => vec![*from, *to],
            Factor::Range { pose, landmark, .. } | Factor::Projection { pose, landmark, .. } => {
                vec![*pose, *landmark]
            }
        }
    }

    pub fn residual_dim(&self) -> usize {
        match self {
            Factor::Prior { noise, .. } | Factor::Odometry { noise, .. } => noise.dim(),
            Factor::Range { .. } => 1,
            Factor::Projection { .. } => 2,
            Factor::RegularizerPrior { mean, .. } => mean.dim(),
        }
    }

    pub fn is_regularizer(&self) -> bool {
        matches!(self, Factor::RegularizerPrior { .. })
    }

    /// True for pose-landmark measurement factors (the ones inverse
    /// measurement models exist for).
    pub fn is_binary_measurement(&self) -> bool {
        matches!(self, Factor::Range { .. } | Factor::Projection { .. })
    }

    /// Expected variable kinds, aligned with [`Factor::vars`]; `None` where
    /// any kind with matching structure is allowed.
    pub fn expected_kinds(&self) -> Vec<Option<ValueKind>> {
        match self {
            Factor::Prior { mean, .. } | Factor::RegularizerPrior { mean, .. } => {
                vec![Some(mean.kind())]
            }
            Factor::Odometry { delta, .. } => vec![Some(delta.kind()); 2],
            Factor::Range { .. } => vec![Some(ValueKind::PoseSE2), Some(ValueKind::Point2)],
            Factor::Projection { .. } => vec![Some(ValueKind::PoseSE3), Some(ValueKind::Point3)],
        }
    }

    fn lookup<'v>(values: &'v Values, var: VarId) -> Result<&'v Value, EvalError> {
        values.get(var).ok_or(EvalError::MissingVariable(var))
    }

    fn expect_kind(var: VarId, value: &Value, expected: ValueKind) -> Result<(), EvalError> {
        if value.kind() != expected {
            return Err(EvalError::TypeMismatch { var, expected, found: value.kind() });
        }
        Ok(())
    }

    /// Whitened residual at the assignment.
    pub fn whitened_residual(&self, values: &Values) -> Result<DVector<f64>, EvalError> {
        Ok(self.evaluate(values, false)?.residual)
    }

    /// Whitened residual and Jacobian blocks at the assignment.
    pub fn linearize(&self, values: &Values) -> Result<Linearization, EvalError> {
        self.evaluate(values, true)
    }

    /// Log of the factor's (normalized) Gaussian likelihood at the
    /// assignment. A landmark behind the camera has zero likelihood, i.e.
    /// negative infinity here.
    pub fn log_likelihood(&self, values: &Values) -> Result<f64, EvalError> {
        match self.whitened_residual(values) {
            Ok(r) => Ok(-0.5 * r.norm_squared() + self.log_norm_constant()),
            Err(EvalError::BehindCamera) => Ok(f64::NEG_INFINITY),
            Err(e) => Err(e),
        }
    }

    /// log of the residual-independent normalization constant.
    pub fn log_norm_constant(&self) -> f64 {
        match self {
            Factor::Prior { noise, .. } | Factor::Odometry { noise, .. } => {
                noise.log_norm_constant()
            }
            Factor::Range { sigma, .. } => -0.5 * LN_2PI - sigma.ln(),
            Factor::Projection { pixel_sigmas, .. } => {
                -LN_2PI - pixel_sigmas.x.ln() - pixel_sigmas.y.ln()
            }
            Factor::RegularizerPrior { mean, sigma, .. } => {
                let d = mean.dim() as f64;
                -0.5 * d * LN_2PI - d * sigma.ln()
            }
        }
    }

    fn evaluate(&self, values: &Values, with_jacobians: bool) -> Result<Linearization, EvalError> {
        match self {
            Factor::Prior { var, mean, noise } => {
                let lin = prior_terms(*var, mean, values, with_jacobians)?;
                Ok(whiten_with(noise, lin))
            }
            Factor::RegularizerPrior { var, mean, sigma } => {
                let lin = prior_terms(*var, mean, values, with_jacobians)?;
                let noise = Noise::isotropic(mean.dim(), *sigma).expect("validated sigma");
                Ok(whiten_with(&noise, lin))
            }
            Factor::Odometry { from, to, delta, noise } => {
                let lin = odometry_terms(*from, *to, delta, values, with_jacobians)?;
                Ok(whiten_with(noise, lin))
            }
            Factor::Range { pose, landmark, range, sigma } => {
                range_terms(*pose, *landmark, *range, *sigma, values, with_jacobians)
            }
            Factor::Projection { pose, landmark, pixel, pixel_sigmas, camera } => {
                projection_terms(*pose, *landmark, pixel, pixel_sigmas, camera, values, with_jacobians)
            }
        }
    }
}

fn whiten_with(noise: &Noise, mut lin: Linearization) -> Linearization {
    lin.residual = noise.whiten(&lin.residual);
    for (_, j) in lin.blocks.iter_mut() {
        noise.whiten_jacobian(j);
    }
    lin
}

fn prior_terms(
    var: VarId,
    mean: &Value,
    values: &Values,
    with_jacobians: bool,
) -> Result<Linearization, EvalError> {
    let value = Factor::lookup(values, var)?;
    Factor::expect_kind(var, value, mean.kind())?;
    let r = mean.local(value).expect("kinds checked");
    let blocks = if with_jacobians {
        let j = match value {
            // Additive retractions: identity.
            Value::PoseSE2(_) | Value::Point2(_) | Value::Point3(_) => {
                DMatrix::identity(r.len(), r.len())
            }
            // r = Log(mean^{-1} * q), d r / d delta = Jr^{-1}(r) for the
            // right retraction q <- q * Exp(delta).
            Value::PoseSE3(_) => {
                let xi = nalgebra::Vector6::from_column_slice(r.as_slice());
                let jr_inv = se3_right_jacobian_inv(&xi);
                DMatrix::from_column_slice(6, 6, jr_inv.as_slice())
            }
        };
        vec![(var, j)]
    } else {
        Vec::new()
    };
    Ok(Linearization { residual: r, blocks })
}

fn odometry_terms(
    from: VarId,
    to: VarId,
    delta: &Value,
    values: &Values,
    with_jacobians: bool,
) -> Result<Linearization, EvalError> {
    let a = Factor::lookup(values, from)?;
    let b = Factor::lookup(values, to)?;
    Factor::expect_kind(from, a, delta.kind())?;
    Factor::expect_kind(to, b, delta.kind())?;
    match (a, b, delta) {
        (Value::PoseSE2(a), Value::PoseSE2(b), Value::PoseSE2(m)) => {
            let y = a.between(b);
            let r = DVector::from_column_slice(m.local(&y).as_slice());
            let blocks = if with_jacobians {
                let rot_inv = rot2(-a.theta);
                let dt = b.translation - a.translation;
                let mut j_a = DMatrix::zeros(3, 3);
                j_a.view_mut((0, 0), (2, 2)).copy_from(&(-rot_inv));
                let dcol = -drot2(-a.theta) * dt;
                j_a[(0, 2)] = dcol.x;
                j_a[(1, 2)] = dcol.y;
                j_a[(2, 2)] = -1.0;
                let mut j_b = DMatrix::zeros(3, 3);
                j_b.view_mut((0, 0), (2, 2)).copy_from(&rot_inv);
                j_b[(2, 2)] = 1.0;
                vec![(from, j_a), (to, j_b)]
            } else {
                Vec::new()
            };
            Ok(Linearization { residual: r, blocks })
        }
        (Value::PoseSE3(a), Value::PoseSE3(b), Value::PoseSE3(m)) => {
            let y = a.between(b);
            let xi = m.local(&y);
            let r = DVector::from_column_slice(xi.as_slice());
            let blocks = if with_jacobians {
                let jr_inv = se3_right_jacobian_inv(&xi);
                let j_b = DMatrix::from_column_slice(6, 6, jr_inv.as_slice());
                let adj = se3_adjoint(&y.inverse());
                let j_a_mat = -jr_inv * adj;
                let j_a = DMatrix::from_column_slice(6, 6, j_a_mat.as_slice());
                vec![(from, j_a), (to, j_b)]
            } else {
                Vec::new()
            };
            Ok(Linearization { residual: r, blocks })
        }
        (Value::Point2(a), Value::Point2(b), Value::Point2(m)) => {
            let r = DVector::from_column_slice((b - a - m).as_slice());
            let blocks = if with_jacobians {
                vec![
                    (from, -DMatrix::identity(2, 2)),
                    (to, DMatrix::identity(2, 2)),
                ]
            } else {
                Vec::new()
            };
            Ok(Linearization { residual: r, blocks })
        }
        (Value::Point3(a), Value::Point3(b), Value::Point3(m)) => {
            let r = DVector::from_column_slice((b - a - m).as_slice());
            let blocks = if with_jacobians {
                vec![
                    (from, -DMatrix::identity(3, 3)),
                    (to, DMatrix::identity(3, 3)),
                ]
            } else {
                Vec::new()
            };
            Ok(Linearization { residual: r, blocks })
        }
        _ => unreachable!("kinds checked above"),
    }
}

fn range_terms(
    pose: VarId,
    landmark: VarId,
    range: f64,
    sigma: f64,
    values: &Values,
    with_jacobians: bool,
) -> Result<Linearization, EvalError> {
    let p = Factor::lookup(values, pose)?;
    let l = Factor::lookup(values, landmark)?;
    Factor::expect_kind(pose, p, ValueKind::PoseSE2)?;
    Factor::expect_kind(landmark, l, ValueKind::Point2)?;
    let pt = p.as_pose_se2().unwrap().translation;
    let lm = *l.as_point2().unwrap();
    let diff = pt - lm;
    let dist = diff.norm();
    let r = DVector::from_element(1, (dist - range) / sigma);
    let blocks = if with_jacobians {
        // Unit direction; at coincident points the residual is flat in every
        // direction that matters, so a zero gradient is the right limit.
        let u = if dist > 1e-12 { diff / dist } else { Vector2::zeros() };
        let mut j_p = DMatrix::zeros(1, 3);
        j_p[(0, 0)] = u.x / sigma;
        j_p[(0, 1)] = u.y / sigma;
        let mut j_l = DMatrix::zeros(1, 2);
        j_l[(0, 0)] = -u.x / sigma;
        j_l[(0, 1)] = -u.y / sigma;
        vec![(pose, j_p), (landmark, j_l)]
    } else {
        Vec::new()
    };
    Ok(Linearization { residual: r, blocks })
}

fn projection_terms(
    pose: VarId,
    landmark: VarId,
    pixel: &Vector2<f64>,
    pixel_sigmas: &Vector2<f64>,
    camera: &CameraIntrinsics,
    values: &Values,
    with_jacobians: bool,
) -> Result<Linearization, EvalError> {
    let p = Factor::lookup(values, pose)?;
    let l = Factor::lookup(values, landmark)?;
    Factor::expect_kind(pose, p, ValueKind::PoseSE3)?;
    Factor::expect_kind(landmark, l, ValueKind::Point3)?;
    let cam_pose = p.as_pose_se3().unwrap();
    let point = l.as_point3().unwrap();
    let (predicted, j_pose_raw, j_lm_raw) =
        project_point(cam_pose, point, camera).ok_or(EvalError::BehindCamera)?;
    let w = Matrix2::from_diagonal(&Vector2::new(1.0 / pixel_sigmas.x, 1.0 / pixel_sigmas.y));
    let err = predicted - pixel;
    let r = DVector::from_column_slice((w * err).as_slice());
    let blocks = if with_jacobians {
        let mut j_pose = j_pose_raw;
        let mut j_lm = j_lm_raw;
        for i in 0..2 {
            let s = w[(i, i)];
            j_pose.row_mut(i).scale_mut(s);
            j_lm.row_mut(i).scale_mut(s);
        }
        vec![(pose, j_pose), (landmark, j_lm)]
    } else {
        Vec::new()
    };
    Ok(Linearization { residual: r, blocks })
}
