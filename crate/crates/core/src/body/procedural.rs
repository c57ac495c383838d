//! Desk-scale body: one capsule per bone, distance-blended skinning weights
//! and four synthetic shape directions (scale, girth, arm length, leg length).

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use super::model::Hinge;
use super::template::{MeshTemplate, Segment, SparseRow};
use super::tree::KinematicTree;
use crate::geometry::Vec3;

const AROUND: usize = 8;
/// Rings per capsule: start cap, three cylinder rings, end cap.
const RINGS: usize = 5;
const VERTS_PER_CAPSULE: usize = 2 + RINGS * AROUND;
const START_RING: usize = 1;
const END_RING: usize = 3;

pub const JOINT_NAMES: [&str; 16] = [
    "pelvis", "spine", "neck", "head", "l_shoulder", "l_elbow", "l_wrist", "r_shoulder", "r_elbow",
    "r_wrist", "l_hip", "l_knee", "l_ankle", "r_hip", "r_knee", "r_ankle",
];

pub const PARENTS: [Option<usize>; 16] = [
    None,
    Some(0),
    Some(1),
    Some(2),
    Some(1),
    Some(4),
    Some(5),
    Some(1),
    Some(7),
    Some(8),
    Some(0),
    Some(10),
    Some(11),
    Some(0),
    Some(13),
    Some(14),
];

/// Rest joints in millimetres: y up, x toward the body's left, z forward.
pub fn rest_joints() -> Vec<Vec3> {
    [
        [0.0, 0.0, 0.0],
        [0.0, 230.0, 0.0],
        [0.0, 470.0, 0.0],
        [0.0, 560.0, 0.0],
        [160.0, 450.0, 0.0],
        [430.0, 450.0, 0.0],
        [680.0, 450.0, 0.0],
        [-160.0, 450.0, 0.0],
        [-430.0, 450.0, 0.0],
        [-680.0, 450.0, 0.0],
        [90.0, -50.0, 0.0],
        [90.0, -470.0, 0.0],
        [90.0, -870.0, 0.0],
        [-90.0, -50.0, 0.0],
        [-90.0, -470.0, 0.0],
        [-90.0, -870.0, 0.0],
    ]
    .iter()
    .map(|p| Vec3::new(p[0], p[1], p[2]))
    .collect()
}

/// Natural flexion is positive `sign * theta[axis]`: elbows bring the forearm
/// forward, knees bring the shin back.
pub fn hinges() -> Vec<Hinge> {
    vec![
        Hinge { joint: 5, axis: 1, sign: -1.0 },
        Hinge { joint: 8, axis: 1, sign: 1.0 },
        Hinge { joint: 11, axis: 0, sign: 1.0 },
        Hinge { joint: 14, axis: 0, sign: 1.0 },
    ]
}

pub const TORSO_JOINTS: [usize; 6] = [0, 1, 4, 7, 10, 13];

#[derive(Clone, Copy, PartialEq)]
enum Group {
    Trunk,
    Arm(usize),
    Leg(usize),
}

struct Spec {
    name: &'static str,
    start: Vec3,
    end: Vec3,
    radius: f64,
    driver: usize,
    start_blend: Option<usize>,
    end_blend: Option<usize>,
    group: Group,
}

#[derive(Clone, Copy)]
enum Ring {
    Start,
    End,
}

fn segment_specs(j: &[Vec3]) -> Vec<Spec> {
    let v = Vec3::new;
    let mut s = vec![
        Spec { name: "spine_lower", start: j[0], end: j[1], radius: 27.0, driver: 0, start_blend: None, end_blend: Some(1), group: Group::Trunk },
        Spec { name: "spine_upper", start: j[1], end: j[2], radius: 27.0, driver: 1, start_blend: Some(0), end_blend: Some(2), group: Group::Trunk },
        Spec { name: "neck", start: j[2], end: j[3], radius: 22.0, driver: 2, start_blend: Some(1), end_blend: Some(3), group: Group::Trunk },
        Spec { name: "head", start: v(0.0, 650.0, 0.0), end: v(0.0, 720.0, 0.0), radius: 75.0, driver: 3, start_blend: None, end_blend: None, group: Group::Trunk },
        Spec { name: "shoulders", start: j[7], end: j[4], radius: 25.0, driver: 1, start_blend: Some(7), end_blend: Some(4), group: Group::Trunk },
        Spec { name: "hips", start: j[13], end: j[10], radius: 27.0, driver: 0, start_blend: Some(13), end_blend: Some(10), group: Group::Trunk },
    ];
    for (side, sh, el, wr, dir) in [("l", 4usize, 5usize, 6usize, 1.0), ("r", 7, 8, 9, -1.0)] {
        let names: [&'static str; 3] = if side == "l" {
            ["l_upper_arm", "l_forearm", "l_hand"]
        } else {
            ["r_upper_arm", "r_forearm", "r_hand"]
        };
        s.push(Spec { name: names[0], start: j[sh], end: j[el], radius: 22.0, driver: sh, start_blend: Some(1), end_blend: Some(el), group: Group::Arm(sh) });
        s.push(Spec { name: names[1], start: j[el], end: j[wr], radius: 20.0, driver: el, start_blend: Some(sh), end_blend: Some(wr), group: Group::Arm(sh) });
        s.push(Spec { name: names[2], start: j[wr], end: j[wr] + v(130.0 * dir, 0.0, 0.0), radius: 20.0, driver: wr, start_blend: Some(el), end_blend: None, group: Group::Arm(sh) });
    }
    for (side, hip, knee, ankle) in [("l", 10usize, 11usize, 12usize), ("r", 13, 14, 15)] {
        let names: [&'static str; 3] = if side == "l" {
            ["l_thigh", "l_shin", "l_foot"]
        } else {
            ["r_thigh", "r_shin", "r_foot"]
        };
        s.push(Spec { name: names[0], start: j[hip], end: j[knee], radius: 26.0, driver: hip, start_blend: Some(0), end_blend: Some(knee), group: Group::Leg(hip) });
        s.push(Spec { name: names[1], start: j[knee], end: j[ankle], radius: 24.0, driver: knee, start_blend: Some(hip), end_blend: Some(ankle), group: Group::Leg(hip) });
        s.push(Spec { name: names[2], start: j[ankle], end: j[ankle] + v(0.0, -40.0, 140.0), radius: 22.0, driver: ankle, start_blend: Some(knee), end_blend: None, group: Group::Leg(hip) });
    }
    s
}

/// Ring used to regress each joint: centroid of an axis-symmetric ring
/// centred on the joint.
fn regressor_rings() -> [(usize, Ring); 16] {
    [
        (0, Ring::Start),
        (1, Ring::Start),
        (2, Ring::Start),
        (2, Ring::End),
        (6, Ring::Start),
        (7, Ring::Start),
        (8, Ring::Start),
        (9, Ring::Start),
        (10, Ring::Start),
        (11, Ring::Start),
        (12, Ring::Start),
        (13, Ring::Start),
        (14, Ring::Start),
        (15, Ring::Start),
        (16, Ring::Start),
        (17, Ring::Start),
    ]
}

fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn perpendicular_frame(d: &Vec3) -> (Vec3, Vec3) {
    let reference = if d.z.abs() < 0.9 { Vec3::z() } else { Vec3::x() };
    let u = d.cross(&reference).normalize();
    let w = d.cross(&u);
    (u, w)
}

pub struct Procedural {
    pub tree: KinematicTree,
    pub template: MeshTemplate,
}

pub fn build() -> Procedural {
    let joints = rest_joints();
    let tree = KinematicTree::new(
        JOINT_NAMES.iter().map(|s| s.to_string()).collect(),
        PARENTS.to_vec(),
        joints.clone(),
    )
    .expect("procedural skeleton is well formed");

    let specs = segment_specs(&joints);
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    let mut triangle_segments = Vec::new();
    let mut skin_weights: Vec<SparseRow> = Vec::new();
    let mut basis: Vec<Vec<Vec3>> = vec![Vec::new(); 4];
    let mut segments = Vec::new();

    for (si, s) in specs.iter().enumerate() {
        let base = vertices.len();
        let axis = s.end - s.start;
        let length = axis.norm();
        let d = axis / length;
        let (u, w) = perpendicular_frame(&d);
        let r = s.radius;
        let blend = (0.3 * length).min(50.0);

        // (centre, ring radius, axis anchor)
        let mut rings: Vec<(Vec3, f64, Vec3)> = Vec::with_capacity(RINGS + 2);
        rings.push((s.start - d * r, 0.0, s.start));
        rings.push((s.start - d * (r * FRAC_1_SQRT_2), r * FRAC_1_SQRT_2, s.start));
        for t in [0.0, 0.5, 1.0] {
            let c = s.start + axis * t;
            rings.push((c, r, c));
        }
        rings.push((s.end + d * (r * FRAC_1_SQRT_2), r * FRAC_1_SQRT_2, s.end));
        rings.push((s.end + d * r, 0.0, s.end));

        for (ri, (centre, radius, anchor)) in rings.iter().enumerate() {
            let count = if ri == 0 || ri == rings.len() - 1 { 1 } else { AROUND };
            for k in 0..count {
                let phi = 2.0 * PI * k as f64 / AROUND as f64;
                let p = centre + (u * phi.cos() + w * phi.sin()) * *radius;
                vertices.push(p);

                let along_start = (anchor - s.start).dot(&d) + (p - anchor).dot(&d);
                let along_end = (p - s.end).dot(&d);
                let mut row: SparseRow = Vec::new();
                let mut own = 1.0;
                if let Some(o) = s.start_blend {
                    let wo = 0.5 * (1.0 - smoothstep(-blend, blend, along_start));
                    if wo > 0.0 {
                        row.push((o, wo));
                        own -= wo;
                    }
                }
                if let Some(o) = s.end_blend {
                    let wo = 0.5 * (1.0 - smoothstep(-blend, blend, -along_end));
                    if wo > 0.0 {
                        row.push((o, wo));
                        own -= wo;
                    }
                }
                row.push((s.driver, own));
                row.sort_by_key(|e| e.0);
                skin_weights.push(row);

                basis[0].push(p * 0.05);
                basis[1].push((p - anchor) * 0.15);
                let (arm, leg) = match s.group {
                    Group::Trunk => (Vec3::zeros(), Vec3::zeros()),
                    Group::Arm(root) => ((anchor - joints[root]) * 0.08, Vec3::zeros()),
                    Group::Leg(root) => (Vec3::zeros(), (anchor - joints[root]) * 0.08),
                };
                basis[2].push(arm);
                basis[3].push(leg);
            }
        }

        let ring_start = |ri: usize| base + 1 + (ri - 1) * AROUND;
        let start_pole = base;
        let end_pole = base + VERTS_PER_CAPSULE - 1;
        for k in 0..AROUND {
            let k1 = (k + 1) % AROUND;
            triangles.push([start_pole, ring_start(1) + k1, ring_start(1) + k]);
        }
        for ri in 1..RINGS {
            let a = ring_start(ri);
            let b = ring_start(ri + 1);
            for k in 0..AROUND {
                let k1 = (k + 1) % AROUND;
                triangles.push([a + k, a + k1, b + k1]);
                triangles.push([a + k, b + k1, b + k]);
            }
        }
        let last = ring_start(RINGS);
        for k in 0..AROUND {
            let k1 = (k + 1) % AROUND;
            triangles.push([end_pole, last + k, last + k1]);
        }
        triangle_segments.extend(std::iter::repeat_n(si, 2 * AROUND + 2 * AROUND * (RINGS - 1)));

        segments.push(Segment {
            name: s.name.to_string(),
            driver: s.driver,
            start: s.start,
            end: s.end,
            radius: s.radius,
        });
    }

    let joint_regressor = regressor_rings()
        .iter()
        .map(|&(seg, ring)| {
            let ri = match ring {
                Ring::Start => START_RING,
                Ring::End => END_RING,
            };
            let first = seg * VERTS_PER_CAPSULE + 1 + ri * AROUND;
            (first..first + AROUND).map(|v| (v, 1.0 / AROUND as f64)).collect()
        })
        .collect();

    let template = MeshTemplate {
        vertices,
        triangles,
        shape_basis: basis,
        skin_weights,
        joint_regressor,
        triangle_segments,
        segments,
    };
    Procedural { tree, template }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn template_is_valid() {
        let p = build();
        p.template.validate(p.tree.num_joints()).unwrap();
        assert_eq!(p.template.num_vertices(), 18 * VERTS_PER_CAPSULE);
        assert_eq!(p.template.triangles.len(), 18 * 80);
    }

    #[test]
    fn regressor_reproduces_rest_joints() {
        let p = build();
        for (k, row) in p.template.joint_regressor.iter().enumerate() {
            let c: Vec3 = row.iter().map(|&(v, w)| p.template.vertices[v] * w).sum();
            assert!((c - p.tree.rest_joints()[k]).norm() < 1.0, "joint {k}");
        }
    }

    #[test]
    fn regressor_rings_have_uniform_weights() {
        let p = build();
        for row in &p.template.joint_regressor {
            let first = &p.template.skin_weights[row[0].0];
            for &(v, _) in row {
                let wr = &p.template.skin_weights[v];
                assert_eq!(wr.len(), first.len());
                for (a, b) in wr.iter().zip(first) {
                    assert_eq!(a.0, b.0);
                    assert!((a.1 - b.1).abs() < 1e-12);
                }
            }
        }
    }
}
