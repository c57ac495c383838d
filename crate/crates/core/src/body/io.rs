//! JSON body file.
//!
//! ```text
//! {
//!   "format": "weakpose-body", "version": 1,
//!   "header": { "vertices": N, "relative_joints": K, "shape_dims": P,
//!               "triangles": T, "keypoints": J },
//!   "joint_names": [..K+1], "parents": [null, 0, ..], "rest_joints": [[x,y,z], ..],
//!   "vertices": [[x,y,z], ..N], "triangles": [[a,b,c], ..T],
//!   "shape_basis": [[[dx,dy,dz], ..N], ..P],
//!   "skin_weights": [[[joint, w], ..], ..N],      // sparse convex rows
//!   "joint_regressor": [[[vertex, w], ..], ..J],  // sparse convex rows
//!   "hinges": [{"joint": j, "axis": 0|1|2, "sign": 1|-1}, ..],
//!   "torso_joints": [..]
//! }
//! ```
//! Coordinates are millimetres. Missing `triangle_segments` means no labels.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{BodyModel, Hinge};
use super::template::MeshTemplate;
use super::tree::KinematicTree;
use crate::error::{Error, Result};
use crate::geometry::Vec3;

pub const FORMAT: &str = "weakpose-body";
pub const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
pub struct Header {
    pub vertices: usize,
    pub relative_joints: usize,
    pub shape_dims: usize,
    pub triangles: usize,
    pub keypoints: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct BodyFile {
    format: String,
    version: u32,
    header: Header,
    joint_names: Vec<String>,
    parents: Vec<Option<usize>>,
    rest_joints: Vec<[f64; 3]>,
    vertices: Vec<[f64; 3]>,
    triangles: Vec<[usize; 3]>,
    shape_basis: Vec<Vec<[f64; 3]>>,
    skin_weights: Vec<Vec<(usize, f64)>>,
    joint_regressor: Vec<Vec<(usize, f64)>>,
    #[serde(default)]
    triangle_segments: Vec<usize>,
    hinges: Vec<Hinge>,
    torso_joints: Vec<usize>,
}

fn arr(v: &Vec3) -> [f64; 3] {
    [v.x, v.y, v.z]
}

fn vec3(a: &[f64; 3]) -> Vec3 {
    Vec3::new(a[0], a[1], a[2])
}

pub fn to_json(model: &BodyModel) -> String {
    let t = model.template();
    let tree = model.tree();
    let file = BodyFile {
        format: FORMAT.into(),
        version: VERSION,
        header: Header {
            vertices: t.num_vertices(),
            relative_joints: tree.num_relative(),
            shape_dims: t.shape_dims(),
            triangles: t.triangles.len(),
            keypoints: t.num_keypoints(),
        },
        joint_names: tree.names().to_vec(),
        parents: tree.parents().to_vec(),
        rest_joints: tree.rest_joints().iter().map(arr).collect(),
        vertices: t.vertices.iter().map(arr).collect(),
        triangles: t.triangles.clone(),
        shape_basis: t.shape_basis.iter().map(|b| b.iter().map(arr).collect()).collect(),
        skin_weights: t.skin_weights.clone(),
        joint_regressor: t.joint_regressor.clone(),
        triangle_segments: vec![],
        hinges: model.hinges().to_vec(),
        torso_joints: model.torso_joints().to_vec(),
    };
    serde_json::to_string(&file).expect("body file serializes")
}

pub fn from_json(text: &str) -> Result<BodyModel> {
    let f: BodyFile = serde_json::from_str(text).map_err(|e| Error::Data(format!("body file: {e}")))?;
    if f.format != FORMAT || f.version != VERSION {
        return Err(Error::Data(format!("unsupported body file {} v{}", f.format, f.version)));
    }
    let h = &f.header;
    if h.vertices != f.vertices.len()
        || h.relative_joints + 1 != f.parents.len()
        || h.shape_dims != f.shape_basis.len()
        || h.triangles != f.triangles.len()
        || h.keypoints != f.joint_regressor.len()
    {
        return Err(Error::Data("body file header counts disagree with its arrays".into()));
    }
    let tree = KinematicTree::new(f.joint_names, f.parents, f.rest_joints.iter().map(vec3).collect())?;
    let template = MeshTemplate {
        vertices: f.vertices.iter().map(vec3).collect(),
        triangles: f.triangles,
        shape_basis: f.shape_basis.iter().map(|b| b.iter().map(vec3).collect()).collect(),
        skin_weights: f.skin_weights,
        joint_regressor: f.joint_regressor,
        triangle_segments: vec![],
        segments: vec![],
    };
    BodyModel::new(tree, template, f.hinges, f.torso_joints)
}

pub fn load(path: &Path) -> Result<BodyModel> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_json(&text)
}

pub fn save(model: &BodyModel, path: &Path) -> Result<()> {
    std::fs::write(path, to_json(model)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_geometry() {
        let m = BodyModel::procedural();
        let back = from_json(&to_json(&m)).unwrap();
        assert_eq!(back.num_vertices(), m.num_vertices());
        assert_eq!(back.template().triangles, m.template().triangles);
        assert_eq!(back.hinges(), m.hinges());
        let mut p = m.zero_params();
        p.pose[5] = 0.3;
        p.shape[1] = 0.7;
        assert_eq!(back.skin(&p).unwrap(), m.skin(&p).unwrap());
    }

    #[test]
    fn header_mismatch_is_rejected() {
        let m = BodyModel::procedural();
        let text = to_json(&m).replacen("\"shape_dims\":4", "\"shape_dims\":5", 1);
        assert!(matches!(from_json(&text), Err(Error::Data(_))));
    }
}
