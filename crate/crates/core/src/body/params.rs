use serde::{Deserialize, Serialize};

use crate::geometry::{canonicalize_axis_angle, Vec3};

/// Pose (axis-angle per joint, root first) and shape coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseShapeParams {
    pub pose: Vec<f64>,
    pub shape: Vec<f64>,
}

impl PoseShapeParams {
    pub fn zeros(num_joints: usize, shape_dims: usize) -> Self {
        Self {
            pose: vec![0.0; 3 * num_joints],
            shape: vec![0.0; shape_dims],
        }
    }

    pub fn num_joints(&self) -> usize {
        self.pose.len() / 3
    }

    pub fn joint(&self, j: usize) -> Vec3 {
        Vec3::new(self.pose[3 * j], self.pose[3 * j + 1], self.pose[3 * j + 2])
    }

    pub fn set_joint(&mut self, j: usize, w: &Vec3) {
        self.pose[3 * j..3 * j + 3].copy_from_slice(w.as_slice());
    }

    pub fn root(&self) -> Vec3 {
        self.joint(0)
    }

    /// Pose of the non-root joints.
    pub fn body_pose(&self) -> &[f64] {
        &self.pose[3..]
    }

    pub fn body_pose_mut(&mut self) -> &mut [f64] {
        &mut self.pose[3..]
    }

    pub fn is_finite(&self) -> bool {
        self.pose.iter().chain(&self.shape).all(|v| v.is_finite())
    }

    /// Every axis-angle magnitude reduced below 2*pi.
    pub fn canonicalized(&self) -> Self {
        let mut out = self.clone();
        for j in 0..self.num_joints() {
            out.set_joint(j, &canonicalize_axis_angle(&self.joint(j)));
        }
        out
    }

    /// Pose followed by shape.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.pose.clone();
        v.extend_from_slice(&self.shape);
        v
    }

    pub fn from_flat(flat: &[f64], pose_dim: usize) -> Self {
        Self {
            pose: flat[..pose_dim].to_vec(),
            shape: flat[pose_dim..].to_vec(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn flat_roundtrip_and_body_slice() {
        let mut p = PoseShapeParams::zeros(3, 2);
        p.set_joint(1, &Vec3::new(1.0, 2.0, 3.0));
        p.shape[1] = 0.5;
        assert_eq!(p.body_pose(), &[1.0, 2.0, 3.0, 0.0, 0.0, 0.0]);
        assert_eq!(PoseShapeParams::from_flat(&p.to_flat(), 9), p);
    }

    #[test]
    fn canonicalized_magnitudes_below_two_pi() {
        let mut p = PoseShapeParams::zeros(2, 0);
        p.set_joint(0, &Vec3::new(5.0 * PI, 0.0, 0.0));
        p.set_joint(1, &Vec3::new(0.0, 0.0, -2.0 * PI));
        let c = p.canonicalized();
        assert!((c.joint(0).norm() - PI).abs() < 1e-9);
        assert_eq!(c.joint(1), Vec3::zeros());
    }
}
