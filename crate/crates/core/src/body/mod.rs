//! Parametric articulated body: kinematics, skinning, shape blend and
//! keypoint regression.

pub mod io;
mod model;
pub mod procedural;
mod params;
mod template;
mod tree;

pub use model::{BodyModel, BodyState, Hinge};
pub use params::PoseShapeParams;
pub use template::{MeshTemplate, Segment, SparseRow};
pub use tree::{KinematicTree, Posed};
