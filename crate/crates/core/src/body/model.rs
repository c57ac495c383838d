use serde::{Deserialize, Serialize};

use super::params::PoseShapeParams;
use super::procedural;
use super::template::{MeshTemplate, SparseRow};
use super::tree::{KinematicTree, Posed};
use crate::error::{check_len, Error, Result};
use crate::geometry::{Mat3, Vec3};

/// Anatomical hinge: `sign * pose[joint].axis` is positive when the joint
/// bends the natural way.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hinge {
    pub joint: usize,
    pub axis: usize,
    pub sign: f64,
}

/// Kinematic tree, mesh template and the metadata the fitting code needs.
#[derive(Debug, Clone)]
pub struct BodyModel {
    tree: KinematicTree,
    template: MeshTemplate,
    hinges: Vec<Hinge>,
    torso_joints: Vec<usize>,
    /// `joint_shape_dirs[p][j]`: rest joint displacement per unit of shape coefficient `p`.
    joint_shape_dirs: Vec<Vec<Vec3>>,
    /// Sorted vertices referenced by the keypoint regressor.
    support: Vec<usize>,
}

/// Forward state for one parameter set.
#[derive(Debug, Clone)]
pub struct BodyState {
    pub posed: Posed,
    /// Shape-adjusted rest joints.
    pub rest_joints: Vec<Vec3>,
    pub shape: Vec<f64>,
}

impl BodyModel {
    pub fn new(tree: KinematicTree, template: MeshTemplate, hinges: Vec<Hinge>, torso_joints: Vec<usize>) -> Result<Self> {
        template.validate(tree.num_joints())?;
        let n = tree.num_joints();
        for h in &hinges {
            if h.joint == 0 || h.joint >= n || h.axis > 2 || !(h.sign == 1.0 || h.sign == -1.0) {
                return Err(Error::InvalidInput(format!("invalid hinge declaration {h:?}")));
            }
        }
        if torso_joints.iter().any(|&j| j >= n) || torso_joints.is_empty() {
            return Err(Error::InvalidInput("torso joint list is empty or out of range".into()));
        }
        // Rest joints follow the keypoint regressor when it has one row per
        // joint; otherwise shape leaves the skeleton fixed.
        let joint_shape_dirs = template
            .shape_basis
            .iter()
            .map(|basis| {
                if template.num_keypoints() == n {
                    template
                        .joint_regressor
                        .iter()
                        .map(|row| row.iter().map(|&(v, w)| basis[v] * w).sum())
                        .collect()
                } else {
                    vec![Vec3::zeros(); n]
                }
            })
            .collect();
        let mut support: Vec<usize> = template.joint_regressor.iter().flatten().map(|e| e.0).collect();
        support.sort_unstable();
        support.dedup();
        Ok(Self {
            tree,
            template,
            hinges,
            torso_joints,
            joint_shape_dirs,
            support,
        })
    }

    /// Desk-scale procedural body (16 joints, 756 vertices, 4 shape directions).
    pub fn procedural() -> Self {
        let p = procedural::build();
        Self::new(p.tree, p.template, procedural::hinges(), procedural::TORSO_JOINTS.to_vec())
            .expect("procedural body is valid")
    }

    pub fn tree(&self) -> &KinematicTree {
        &self.tree
    }

    pub fn template(&self) -> &MeshTemplate {
        &self.template
    }

    pub fn hinges(&self) -> &[Hinge] {
        &self.hinges
    }

    pub fn torso_joints(&self) -> &[usize] {
        &self.torso_joints
    }

    pub fn num_joints(&self) -> usize {
        self.tree.num_joints()
    }

    pub fn pose_dim(&self) -> usize {
        self.tree.pose_dim()
    }

    pub fn shape_dims(&self) -> usize {
        self.template.shape_dims()
    }

    pub fn num_vertices(&self) -> usize {
        self.template.num_vertices()
    }

    pub fn num_keypoints(&self) -> usize {
        self.template.num_keypoints()
    }

    pub fn zero_params(&self) -> PoseShapeParams {
        PoseShapeParams::zeros(self.num_joints(), self.shape_dims())
    }

    fn check_params(&self, params: &PoseShapeParams) -> Result<()> {
        check_len("pose vector", self.pose_dim(), params.pose.len())?;
        check_len("shape vector", self.shape_dims(), params.shape.len())
    }

    /// Rest joints after the shape blend.
    pub fn shaped_joints(&self, shape: &[f64]) -> Vec<Vec3> {
        let mut j = self.tree.rest_joints().to_vec();
        for (b, dirs) in shape.iter().zip(&self.joint_shape_dirs) {
            for (jk, d) in j.iter_mut().zip(dirs) {
                *jk += d * *b;
            }
        }
        j
    }

    fn shaped_vertex(&self, v: usize, shape: &[f64]) -> Vec3 {
        let mut s = self.template.vertices[v];
        for (b, basis) in shape.iter().zip(&self.template.shape_basis) {
            s += basis[v] * *b;
        }
        s
    }

    /// Rest vertices after the shape blend.
    pub fn shaped_vertices(&self, shape: &[f64]) -> Result<Vec<Vec3>> {
        check_len("shape vector", self.shape_dims(), shape.len())?;
        Ok((0..self.num_vertices()).map(|v| self.shaped_vertex(v, shape)).collect())
    }

    pub fn evaluate(&self, params: &PoseShapeParams) -> Result<BodyState> {
        self.check_params(params)?;
        let rest_joints = self.shaped_joints(&params.shape);
        let posed = self.tree.forward_with_rest(&params.pose, &rest_joints)?;
        Ok(BodyState {
            posed,
            rest_joints,
            shape: params.shape.clone(),
        })
    }

    fn skin_vertex(&self, state: &BodyState, v: usize) -> Vec3 {
        let s = self.shaped_vertex(v, &state.shape);
        self.template.skin_weights[v]
            .iter()
            .map(|&(b, w)| state.posed.transforms[b].apply(&s) * w)
            .sum()
    }

    pub fn skin_state(&self, state: &BodyState) -> Vec<Vec3> {
        (0..self.num_vertices()).map(|v| self.skin_vertex(state, v)).collect()
    }

    /// Posed mesh vertices (mm).
    pub fn skin(&self, params: &PoseShapeParams) -> Result<Vec<Vec3>> {
        Ok(self.skin_state(&self.evaluate(params)?))
    }

    /// Applies the keypoint regressor to a full vertex array.
    pub fn regress_joints(&self, vertices: &[Vec3]) -> Result<Vec<Vec3>> {
        check_len("vertices", self.num_vertices(), vertices.len())?;
        Ok(regress(&self.template.joint_regressor, |v| vertices[v]))
    }

    /// Keypoints computed by skinning only the regressor's support vertices.
    pub fn keypoints_state(&self, state: &BodyState) -> Vec<Vec3> {
        let posed: Vec<Vec3> = self.support.iter().map(|&v| self.skin_vertex(state, v)).collect();
        regress(&self.template.joint_regressor, |v| {
            posed[self.support.binary_search(&v).expect("support vertex")]
        })
    }

    pub fn keypoints(&self, params: &PoseShapeParams) -> Result<Vec<Vec3>> {
        Ok(self.keypoints_state(&self.evaluate(params)?))
    }

    /// Pulls sparse per-vertex gradients back to `(d pose, d shape)`.
    pub fn vertices_vjp(&self, state: &BodyState, grads: &[(usize, Vec3)]) -> (Vec<f64>, Vec<f64>) {
        let n = self.num_joints();
        let np = self.shape_dims();
        let tf = &state.posed.transforms;
        let mut moment = vec![Vec3::zeros(); n];
        let mut force = vec![Vec3::zeros(); n];
        let mut g_shape = vec![0.0; np];
        for &(v, g) in grads {
            let s = self.shaped_vertex(v, &state.shape);
            let mut pulled = Vec3::zeros();
            for &(b, w) in &self.template.skin_weights[v] {
                let q = tf[b].apply(&s);
                moment[b] += q.cross(&g) * w;
                force[b] += g * w;
                pulled += tf[b].rot.transpose() * g * w;
            }
            for (p, gs) in g_shape.iter_mut().enumerate() {
                *gs += pulled.dot(&self.template.shape_basis[p][v]);
            }
        }
        for j in (1..n).rev() {
            let p = self.tree.parent(j).expect("non-root joint has a parent");
            let (m, f) = (moment[j], force[j]);
            moment[p] += m;
            force[p] += f;
        }
        let mut g_pose = vec![0.0; 3 * n];
        for j in 0..n {
            let r = state.posed.axes[j].transpose() * (moment[j] - state.posed.joints[j].cross(&force[j]));
            g_pose[3 * j..3 * j + 3].copy_from_slice(r.as_slice());
        }
        for k in 0..n {
            let a_par = self.tree.parent(k).map_or_else(Mat3::identity, |p| tf[p].rot);
            let lever = a_par - tf[k].rot;
            for (p, gs) in g_shape.iter_mut().enumerate() {
                *gs += force[k].dot(&(lever * self.joint_shape_dirs[p][k]));
            }
        }
        (g_pose, g_shape)
    }

    /// Pulls per-keypoint gradients back to `(d pose, d shape)`.
    pub fn keypoints_vjp(&self, state: &BodyState, grads: &[Vec3]) -> (Vec<f64>, Vec<f64>) {
        let mut per_vertex = vec![Vec3::zeros(); self.support.len()];
        for (row, g) in self.template.joint_regressor.iter().zip(grads) {
            for &(v, w) in row {
                per_vertex[self.support.binary_search(&v).expect("support vertex")] += g * w;
            }
        }
        let sparse: Vec<(usize, Vec3)> = self.support.iter().copied().zip(per_vertex).collect();
        self.vertices_vjp(state, &sparse)
    }

    /// Per-bone translation derivative with respect to each shape coefficient.
    fn translation_shape_derivs(&self, state: &BodyState) -> Vec<Vec<Vec3>> {
        let tf = &state.posed.transforms;
        let n = self.num_joints();
        let mut out = vec![vec![Vec3::zeros(); self.shape_dims()]; n];
        for k in 0..n {
            let (a_par, base) = match self.tree.parent(k) {
                Some(p) => (tf[p].rot, out[p].clone()),
                None => (Mat3::identity(), vec![Vec3::zeros(); self.shape_dims()]),
            };
            for (p, b) in base.into_iter().enumerate() {
                out[k][p] = b + (a_par - tf[k].rot) * self.joint_shape_dirs[p][k];
            }
        }
        out
    }

    /// Jacobian columns of one posed vertex: pose columns then shape columns.
    fn vertex_columns(&self, state: &BodyState, t_shape: &[Vec<Vec3>], v: usize, out: &mut [Vec3]) {
        let n = self.num_joints();
        let tf = &state.posed.transforms;
        let s = self.shaped_vertex(v, &state.shape);
        let mut lever_sum = vec![Vec3::zeros(); n];
        let mut weight_sum = vec![0.0; n];
        for c in out.iter_mut() {
            *c = Vec3::zeros();
        }
        for &(b, w) in &self.template.skin_weights[v] {
            let q = tf[b].apply(&s) * w;
            let mut cur = Some(b);
            while let Some(j) = cur {
                lever_sum[j] += q;
                weight_sum[j] += w;
                cur = self.tree.parent(j);
            }
            for p in 0..self.shape_dims() {
                out[3 * n + p] += (tf[b].rot * self.template.shape_basis[p][v] + t_shape[b][p]) * w;
            }
        }
        for j in 0..n {
            if weight_sum[j] == 0.0 {
                continue;
            }
            let lever = lever_sum[j] - state.posed.joints[j] * weight_sum[j];
            for i in 0..3 {
                out[3 * j + i] = state.posed.axes[j].column(i).cross(&lever);
            }
        }
    }

    fn dense_jacobian(&self, state: &BodyState, rows: &[SparseRow]) -> (Vec<f64>, Vec<f64>) {
        let pd = self.pose_dim();
        let np = self.shape_dims();
        let t_shape = self.translation_shape_derivs(state);
        let mut jp = vec![0.0; 3 * rows.len() * pd];
        let mut js = vec![0.0; 3 * rows.len() * np];
        let mut cols = vec![Vec3::zeros(); pd + np];
        for (k, row) in rows.iter().enumerate() {
            for &(v, w) in row {
                self.vertex_columns(state, &t_shape, v, &mut cols);
                for r in 0..3 {
                    for c in 0..pd {
                        jp[(3 * k + r) * pd + c] += w * cols[c][r];
                    }
                    for c in 0..np {
                        js[(3 * k + r) * np + c] += w * cols[pd + c][r];
                    }
                }
            }
        }
        (jp, js)
    }

    /// Row-major `(3K x pose_dim, 3K x P)` jacobians of the regressed keypoints.
    pub fn keypoints_jacobian(&self, params: &PoseShapeParams) -> Result<(Vec<f64>, Vec<f64>)> {
        let state = self.evaluate(params)?;
        Ok(self.dense_jacobian(&state, &self.template.joint_regressor))
    }

    /// Row-major `(3N x pose_dim, 3N x P)` jacobians of the posed vertices.
    pub fn vertices_jacobian(&self, params: &PoseShapeParams) -> Result<(Vec<f64>, Vec<f64>)> {
        let state = self.evaluate(params)?;
        let rows: Vec<SparseRow> = (0..self.num_vertices()).map(|v| vec![(v, 1.0)]).collect();
        Ok(self.dense_jacobian(&state, &rows))
    }
}

fn regress(rows: &[SparseRow], vertex: impl Fn(usize) -> Vec3) -> Vec<Vec3> {
    rows.iter()
        .map(|row| row.iter().map(|&(v, w)| vertex(v) * w).sum())
        .collect()
}
