//! Rotation primitives shared by the body model, camera and evaluation code.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector2, Vector3};

pub type Vec2 = Vector2<f64>;
pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

const SMALL_ANGLE: f64 = 1e-6;

/// Cross-product matrix: `skew(a) * b == a.cross(&b)`.
pub fn skew(a: &Vec3) -> Mat3 {
    Mat3::new(0.0, -a.z, a.y, a.z, 0.0, -a.x, -a.y, a.x, 0.0)
}

/// Axis-angle to rotation matrix (Rodrigues). The zero vector maps to identity.
pub fn rodrigues(axis_angle: &Vec3) -> Mat3 {
    let theta = axis_angle.norm();
    let k = skew(axis_angle);
    if theta < SMALL_ANGLE {
        // second-order expansion keeps the map smooth through zero
        return Mat3::identity() + k + 0.5 * k * k;
    }
    let (s, c) = theta.sin_cos();
    Mat3::identity() + (s / theta) * k + ((1.0 - c) / (theta * theta)) * k * k
}

/// Left Jacobian of SO(3): `d rodrigues(w) / d w_i = skew(J_l(w) e_i) * rodrigues(w)`.
pub fn left_jacobian(axis_angle: &Vec3) -> Mat3 {
    let theta = axis_angle.norm();
    let k = skew(axis_angle);
    if theta < SMALL_ANGLE {
        return Mat3::identity() + 0.5 * k + (1.0 / 6.0) * k * k;
    }
    let t2 = theta * theta;
    Mat3::identity() + ((1.0 - theta.cos()) / t2) * k + ((theta - theta.sin()) / (t2 * theta)) * k * k
}

/// Rotation matrix to axis-angle, with magnitude in `[0, pi]`.
pub fn log_rotation(r: &Mat3) -> Vec3 {
    let cos = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let angle = cos.acos();
    let vee = Vec3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    if angle < SMALL_ANGLE {
        return 0.5 * vee;
    }
    if PI - angle > 1e-4 {
        return vee * (angle / (2.0 * angle.sin()));
    }
    // near a half turn the antisymmetric part vanishes; recover the axis
    // from the symmetric part instead
    let sym = (r + r.transpose()) * 0.5;
    let outer = (sym - Mat3::identity() * cos) / (1.0 - cos);
    let mut best = 0;
    for i in 1..3 {
        if outer[(i, i)] > outer[(best, best)] {
            best = i;
        }
    }
    let mut axis: Vec3 = outer.column(best).into_owned();
    axis /= axis.norm();
    if axis.dot(&vee) < 0.0 {
        axis = -axis;
    }
    axis * angle
}

/// Reduces the magnitude of an axis-angle vector modulo 2*pi.
/// A magnitude of exactly 2*pi (after reduction) maps to zero.
pub fn canonicalize_axis_angle(axis_angle: &Vec3) -> Vec3 {
    let theta = axis_angle.norm();
    if theta < 2.0 * PI {
        return *axis_angle;
    }
    let reduced = theta.rem_euclid(2.0 * PI);
    if reduced == 0.0 || reduced >= 2.0 * PI {
        return Vec3::zeros();
    }
    axis_angle * (reduced / theta)
}

pub fn rot_x(angle: f64) -> Mat3 {
    rodrigues(&Vec3::new(angle, 0.0, 0.0))
}

pub fn rot_y(angle: f64) -> Mat3 {
    rodrigues(&Vec3::new(0.0, angle, 0.0))
}

pub fn rot_z(angle: f64) -> Mat3 {
    rodrigues(&Vec3::new(0.0, 0.0, angle))
}

/// Rigid transform `p -> rot * p + trans`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rot: Mat3,
    pub trans: Vec3,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rot: Mat3::identity(),
            trans: Vec3::zeros(),
        }
    }

    /// Rotation by `rot` about the fixed point `center`.
    pub fn about(rot: Mat3, center: &Vec3) -> Self {
        Self {
            rot,
            trans: center - rot * center,
        }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rot * p + self.trans
    }

    /// `self ∘ other`
    pub fn compose(&self, other: &RigidTransform) -> Self {
        Self {
            rot: self.rot * other.rot,
            trans: self.rot * other.trans + self.trans,
        }
    }
}
