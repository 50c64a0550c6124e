//! Rigid-body pose types and their tangent-space machinery.
//!
//! Two parameterizations are used throughout:
//!
//! * [`PoseSE2`] — planar pose stored as (translation, heading angle). Its
//!   retraction is plain addition on (dx, dy, dtheta) with angle wrapping,
//!   which keeps prior/odometry Jacobians trivial.
//! * [`PoseSE3`] — spatial pose stored as (translation, unit quaternion).
//!   Its retraction is the right-multiplied exponential map on a 6-vector
//!   ordered (rho, omega) = (translation, rotation).
//!
//! The free functions at the bottom implement the SO(3)/SE(3) exponential,
//! logarithm, adjoint and the inverse right Jacobian needed for analytic
//! linearization of relative-pose residuals. All of them are checked against
//! central finite differences in the tests.

use nalgebra::{Matrix2, Matrix3, Matrix6, UnitQuaternion, Vector2, Vector3, Vector6};

/// Wrap an angle into (-pi, pi].
pub fn wrap_angle(theta: f64) -> f64 {
    let mut t = theta % (2.0 * std::f64::consts::PI);
    if t <= -std::f64::consts::PI {
        t += 2.0 * std::f64::consts::PI;
    } else if t > std::f64::consts::PI {
        t -= 2.0 * std::f64::consts::PI;
    }
    t
}

/// 2D rotation matrix for a heading angle.
pub fn rot2(theta: f64) -> Matrix2<f64> {
    let (s, c) = theta.sin_cos();
    Matrix2::new(c, -s, s, c)
}

/// Derivative of [`rot2`] with respect to the angle.
pub fn drot2(theta: f64) -> Matrix2<f64> {
    let (s, c) = theta.sin_cos();
    Matrix2::new(-s, -c, c, -s)
}

/// Planar pose: translation plus heading angle, angle kept in (-pi, pi].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseSE2 {
    pub translation: Vector2<f64>,
    pub theta: f64,
}

impl PoseSE2 {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self { translation: Vector2::new(x, y), theta: wrap_angle(theta) }
    }

    pub fn identity() -> Self {
        Self::new(0.0, 0.0, 0.0)
    }

    /// Group composition `self * other`.
    pub fn compose(&self, other: &PoseSE2) -> PoseSE2 {
        PoseSE2 {
            translation: self.translation + rot2(self.theta) * other.translation,
            theta: wrap_angle(self.theta + other.theta),
        }
    }

    pub fn inverse(&self) -> PoseSE2 {
        let r_inv = rot2(-self.theta);
        PoseSE2 { translation: -(r_inv * self.translation), theta: wrap_angle(-self.theta) }
    }

    /// Relative pose `self^{-1} * other`.
    pub fn between(&self, other: &PoseSE2) -> PoseSE2 {
        self.inverse().compose(other)
    }

    pub fn transform_point(&self, p: &Vector2<f64>) -> Vector2<f64> {
        rot2(self.theta) * p + self.translation
    }

    /// Additive retraction on (dx, dy, dtheta).
    pub fn retract(&self, delta: &Vector3<f64>) -> PoseSE2 {
        PoseSE2 {
            translation: self.translation + delta.xy(),
            theta: wrap_angle(self.theta + delta.z),
        }
    }

    /// Inverse of [`PoseSE2::retract`]: coordinates of `other` relative to `self`.
    pub fn local(&self, other: &PoseSE2) -> Vector3<f64> {
        Vector3::new(
            other.translation.x - self.translation.x,
            other.translation.y - self.translation.y,
            wrap_angle(other.theta - self.theta),
        )
    }
}

/// Spatial pose: translation plus unit quaternion.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseSE3 {
    pub translation: Vector3<f64>,
    pub rotation: UnitQuaternion<f64>,
}

impl PoseSE3 {
    pub fn new(translation: Vector3<f64>, rotation: UnitQuaternion<f64>) -> Self {
        Self { translation, rotation }
    }

    pub fn identity() -> Self {
        Self { translation: Vector3::zeros(), rotation: UnitQuaternion::identity() }
    }

    /// Group composition `self * other`. The quaternion is renormalized so
    /// that long composition chains keep |q| = 1 to within 1e-9.
    pub fn compose(&self, other: &PoseSE3) -> PoseSE3 {
        let q = self.rotation * other.rotation;
        PoseSE3 {
            translation: self.translation + self.rotation * other.translation,
            rotation: UnitQuaternion::new_normalize(q.into_inner()),
        }
    }

    pub fn inverse(&self) -> PoseSE3 {
        let r_inv = self.rotation.inverse();
        PoseSE3 { translation: -(r_inv * self.translation), rotation: r_inv }
    }

    /// Relative pose `self^{-1} * other`.
    pub fn between(&self, other: &PoseSE3) -> PoseSE3 {
        self.inverse().compose(other)
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Right-multiplied retraction: `self * Exp(delta)`.
    pub fn retract(&self, delta: &Vector6<f64>) -> PoseSE3 {
        self.compose(&se3_exp(delta))
    }

    /// Inverse of [`PoseSE3::retract`]: `Log(self^{-1} * other)`.
    pub fn local(&self, other: &PoseSE3) -> Vector6<f64> {
        se3_log(&self.between(other))
    }
}

/// Skew-symmetric (hat) matrix of a 3-vector.
pub fn so3_hat(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

// Below ~1e-4 rad the closed forms lose digits to cancellation; the series
// terms used instead are accurate to well below 1e-12 there.
const SMALL_ANGLE: f64 = 1e-4;

/// Left Jacobian of SO(3): V such that Exp(w) has translation part V*rho.
pub fn so3_left_jacobian(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta = w.norm();
    let hat = so3_hat(w);
    let (a, b) = if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        (0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0)
    } else {
        let t2 = theta * theta;
        ((1.0 - theta.cos()) / t2, (theta - theta.sin()) / (t2 * theta))
    };
    Matrix3::identity() + a * hat + b * (hat * hat)
}

/// Inverse of the left Jacobian of SO(3).
pub fn so3_left_jacobian_inv(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta = w.norm();
    let hat = so3_hat(w);
    let c = if theta < SMALL_ANGLE {
        1.0 / 12.0 + theta * theta / 720.0
    } else {
        let half = 0.5 * theta;
        (1.0 - half * (half.cos() / half.sin())) / (theta * theta)
    };
    Matrix3::identity() - 0.5 * hat + c * (hat * hat)
}

/// SE(3) exponential map; xi ordered (rho, omega).
pub fn se3_exp(xi: &Vector6<f64>) -> PoseSE3 {
    let rho = Vector3::new(xi[0], xi[1], xi[2]);
    let omega = Vector3::new(xi[3], xi[4], xi[5]);
    PoseSE3 {
        translation: so3_left_jacobian(&omega) * rho,
        rotation: UnitQuaternion::from_scaled_axis(omega),
    }
}

/// SE(3) logarithm; inverse of [`se3_exp`].
pub fn se3_log(p: &PoseSE3) -> Vector6<f64> {
    let omega = p.rotation.scaled_axis();
    let rho = so3_left_jacobian_inv(&omega) * p.translation;
    Vector6::new(rho.x, rho.y, rho.z, omega.x, omega.y, omega.z)
}

/// Adjoint of an SE(3) element for the (rho, omega) ordering.
pub fn se3_adjoint(p: &PoseSE3) -> Matrix6<f64> {
    let r = p.rotation.to_rotation_matrix().into_inner();
    let tr = so3_hat(&p.translation) * r;
    let mut adj = Matrix6::zeros();
    adj.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
    adj.fixed_view_mut::<3, 3>(0, 3).copy_from(&tr);
    adj.fixed_view_mut::<3, 3>(3, 3).copy_from(&r);
    adj
}

/// The coupling block of the SE(3) left Jacobian (Q in Barfoot's notation).
fn se3_q(rho: &Vector3<f64>, omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta = omega.norm();
    let rh = so3_hat(rho);
    let wh = so3_hat(omega);
    let (c1, c2, c3) = if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        (
            1.0 / 6.0 - t2 / 120.0,
            1.0 / 24.0 - t2 / 720.0,
            1.0 / 120.0 - t2 / 2520.0,
        )
    } else {
        let t2 = theta * theta;
        let t4 = t2 * t2;
        let (s, c) = theta.sin_cos();
        let c1 = (theta - s) / (t2 * theta);
        let c2 = (1.0 - 0.5 * t2 - c) / t4;
        let c3 = (c2 - 3.0 * (theta - s - t2 * theta / 6.0) / (t4 * theta)) * 0.5;
        (c1, c2, c3)
    };
    0.5 * rh
        + c1 * (wh * rh + rh * wh + wh * rh * wh)
        - c2 * (wh * wh * rh + rh * wh * wh - 3.0 * (wh * rh * wh))
        - c3 * (wh * rh * (wh * wh) + (wh * wh) * rh * wh)
}

/// Inverse right Jacobian of SE(3) at xi = (rho, omega). This equals the
/// derivative of `Log(Exp(xi) * Exp(delta))` with respect to `delta` at
/// zero, which is exactly the form relative-pose residual Jacobians need.
pub fn se3_right_jacobian_inv(xi: &Vector6<f64>) -> Matrix6<f64> {
    // Jr(xi) = Jl(-xi), so build the inverse left Jacobian blocks at -xi.
    let rho = -Vector3::new(xi[0], xi[1], xi[2]);
    let omega = -Vector3::new(xi[3], xi[4], xi[5]);
    let jl_inv = so3_left_jacobian_inv(&omega);
    let q = se3_q(&rho, &omega);
    let upper_right = -jl_inv * q * jl_inv;
    let mut out = Matrix6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&jl_inv);
    out.fixed_view_mut::<3, 3>(0, 3).copy_from(&upper_right);
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&jl_inv);
    out
}
