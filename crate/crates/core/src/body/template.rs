use crate::error::{check_len, Error, Result};
use crate::geometry::Vec3;

/// Sparse row of `(column, weight)` pairs.
pub type SparseRow = Vec<(usize, f64)>;

const SUM_TOL: f64 = 1e-9;

/// Rigid body part used for bookkeeping (capsule axis, radius, driving joint).
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub name: String,
    pub driver: usize,
    pub start: Vec3,
    pub end: Vec3,
    pub radius: f64,
}

/// Rest mesh plus everything needed to deform it.
#[derive(Debug, Clone, PartialEq)]
pub struct MeshTemplate {
    /// Rest vertices in millimetres.
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[usize; 3]>,
    /// `shape_basis[p][v]`: displacement of vertex `v` per unit of coefficient `p`.
    pub shape_basis: Vec<Vec<Vec3>>,
    /// Per-vertex skinning weights over joints.
    pub skin_weights: Vec<SparseRow>,
    /// Per-keypoint weights over vertices.
    pub joint_regressor: Vec<SparseRow>,
    /// Optional segment label per triangle (empty when unknown).
    pub triangle_segments: Vec<usize>,
    pub segments: Vec<Segment>,
}

impl MeshTemplate {
    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn shape_dims(&self) -> usize {
        self.shape_basis.len()
    }

    pub fn num_keypoints(&self) -> usize {
        self.joint_regressor.len()
    }

    /// Checks every structural invariant against a joint count.
    pub fn validate(&self, num_joints: usize) -> Result<()> {
        let n = self.vertices.len();
        check_len("skinning weight rows", n, self.skin_weights.len())?;
        for (p, basis) in self.shape_basis.iter().enumerate() {
            if basis.len() != n {
                return Err(Error::InvalidInput(format!(
                    "shape basis {p} has {} entries for {n} vertices",
                    basis.len()
                )));
            }
        }
        for (t, tri) in self.triangles.iter().enumerate() {
            if tri.iter().any(|&v| v >= n) {
                return Err(Error::InvalidInput(format!("triangle {t} references a missing vertex")));
            }
        }
        for (v, row) in self.skin_weights.iter().enumerate() {
            check_row(row, num_joints).map_err(|m| Error::InvalidInput(format!("skin weights of vertex {v}: {m}")))?;
        }
        for (k, row) in self.joint_regressor.iter().enumerate() {
            check_row(row, n).map_err(|m| Error::InvalidInput(format!("regressor row {k}: {m}")))?;
        }
        if !self.triangle_segments.is_empty() {
            check_len("triangle segment labels", self.triangles.len(), self.triangle_segments.len())?;
            if self.triangle_segments.iter().any(|&s| s >= self.segments.len()) {
                return Err(Error::InvalidInput("triangle segment label out of range".into()));
            }
        }
        Ok(())
    }
}

fn check_row(row: &SparseRow, width: usize) -> std::result::Result<(), String> {
    let mut sum = 0.0;
    for &(c, w) in row {
        if c >= width {
            return Err(format!("column {c} out of range"));
        }
        if !(w >= 0.0) || !w.is_finite() {
            return Err(format!("weight {w} is negative or non-finite"));
        }
        sum += w;
    }
    if (sum - 1.0).abs() > SUM_TOL {
        return Err(format!("weights sum to {sum}"));
    }
    Ok(())
}
