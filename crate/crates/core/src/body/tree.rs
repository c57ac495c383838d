use crate::error::{check_len, Error, Result};
use crate::geometry::{left_jacobian, rodrigues, Mat3, RigidTransform, Vec3};

/// Joint hierarchy in topological order. Joint 0 is the root.
#[derive(Debug, Clone, PartialEq)]
pub struct KinematicTree {
    names: Vec<String>,
    parents: Vec<Option<usize>>,
    rest_joints: Vec<Vec3>,
    children: Vec<Vec<usize>>,
}

/// Result of forward kinematics.
#[derive(Debug, Clone)]
pub struct Posed {
    /// World transform per joint, acting on rest-space points.
    pub transforms: Vec<RigidTransform>,
    /// Posed joint positions.
    pub joints: Vec<Vec3>,
    /// Column `i` of `axes[j]` is the world-space rotation generator for the
    /// `i`-th axis-angle component of joint `j`: moving that parameter moves a
    /// point `q` attached below joint `j` at rate `axes[j].column(i) × (q - joints[j])`.
    pub axes: Vec<Mat3>,
}

impl KinematicTree {
    pub fn new(names: Vec<String>, parents: Vec<Option<usize>>, rest_joints: Vec<Vec3>) -> Result<Self> {
        check_len("joint names", parents.len(), names.len())?;
        check_len("rest joints", parents.len(), rest_joints.len())?;
        if parents.is_empty() {
            return Err(Error::InvalidInput("kinematic tree has no joints".into()));
        }
        if parents[0].is_some() {
            return Err(Error::InvalidInput("joint 0 must be the root".into()));
        }
        let mut children = vec![Vec::new(); parents.len()];
        for (j, p) in parents.iter().enumerate().skip(1) {
            match p {
                Some(p) if *p < j => children[*p].push(j),
                Some(p) => {
                    return Err(Error::InvalidInput(format!(
                        "joint {j} has parent {p}; parents must precede children"
                    )))
                }
                None => return Err(Error::InvalidInput(format!("joint {j} is a second root"))),
            }
        }
        if rest_joints.iter().any(|j| !j.iter().all(|v| v.is_finite())) {
            return Err(Error::InvalidInput("non-finite rest joint".into()));
        }
        Ok(Self {
            names,
            parents,
            rest_joints,
            children,
        })
    }

    pub fn num_joints(&self) -> usize {
        self.parents.len()
    }

    /// Joints excluding the root.
    pub fn num_relative(&self) -> usize {
        self.parents.len() - 1
    }

    pub fn pose_dim(&self) -> usize {
        3 * self.parents.len()
    }

    pub fn parent(&self, joint: usize) -> Option<usize> {
        self.parents[joint]
    }

    pub fn parents(&self) -> &[Option<usize>] {
        &self.parents
    }

    pub fn children(&self, joint: usize) -> &[usize] {
        &self.children[joint]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn rest_joints(&self) -> &[Vec3] {
        &self.rest_joints
    }

    /// `true` if `ancestor` lies on the path from `joint` to the root (inclusive of `joint`).
    pub fn is_ancestor_or_self(&self, ancestor: usize, joint: usize) -> bool {
        let mut cur = Some(joint);
        while let Some(j) = cur {
            if j == ancestor {
                return true;
            }
            if j < ancestor {
                return false;
            }
            cur = self.parents[j];
        }
        false
    }

    pub fn forward(&self, pose: &[f64]) -> Result<Posed> {
        self.forward_with_rest(pose, &self.rest_joints)
    }

    /// Forward kinematics about an alternative set of rest joint positions
    /// (e.g. shape-adjusted ones).
    pub fn forward_with_rest(&self, pose: &[f64], rest: &[Vec3]) -> Result<Posed> {
        check_len("pose vector", self.pose_dim(), pose.len())?;
        check_len("rest joints", self.num_joints(), rest.len())?;
        let n = self.num_joints();
        let mut transforms: Vec<RigidTransform> = Vec::with_capacity(n);
        let mut axes = Vec::with_capacity(n);
        for j in 0..n {
            let w = Vec3::new(pose[3 * j], pose[3 * j + 1], pose[3 * j + 2]);
            let local = RigidTransform::about(rodrigues(&w), &rest[j]);
            let jl = left_jacobian(&w);
            match self.parents[j] {
                None => {
                    axes.push(jl);
                    transforms.push(local);
                }
                Some(p) => {
                    axes.push(transforms[p].rot * jl);
                    let g = transforms[p].compose(&local);
                    transforms.push(g);
                }
            }
        }
        let joints = transforms.iter().zip(rest).map(|(g, r)| g.apply(r)).collect();
        Ok(Posed {
            transforms,
            joints,
            axes,
        })
    }

    /// Jacobian of the posed joint positions with respect to the pose vector,
    /// as a row-major `(3 * joints) x pose_dim` buffer.
    pub fn joints_jacobian(&self, posed: &Posed) -> Vec<f64> {
        let n = self.num_joints();
        let cols = self.pose_dim();
        let mut jac = vec![0.0; 3 * n * cols];
        for k in 0..n {
            let mut cur = self.parents[k];
            while let Some(j) = cur {
                let lever = posed.joints[k] - posed.joints[j];
                for i in 0..3 {
                    let d = posed.axes[j].column(i).cross(&lever);
                    for r in 0..3 {
                        jac[(3 * k + r) * cols + 3 * j + i] = d[r];
                    }
                }
                cur = self.parents[j];
            }
        }
        jac
    }
}
