//! Synthetic source and target domains.
//!
//! Source poses are upright with wide limb ranges and are only used to fit
//! the pose prior. Target scenes lie on a bed (supine or on a side), favour
//! limbs crossing the body, and are rendered into depth frames with noise
//! and dropouts. Ground truth 3D lives in [`HiddenTruth`], which the training
//! side never receives.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::body::{BodyModel, PoseShapeParams};
use crate::camera::{backproject, project_pinhole, PinholeIntrinsics};
use crate::error::{Error, Result};
use crate::geometry::{log_rotation, rot_x, rot_y, rot_z, Mat3, Vec2, Vec3};
use crate::observation::{visibility_from_render, ObservationSet, DEFAULT_TAU};
use crate::par;
use crate::render::{rasterize, DepthFrame};

/// Truncated normals are cut at this many standard deviations.
pub const TRUNCATION: f64 = 2.5;

/// Normal distribution truncated symmetrically at `TRUNCATION` deviations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Truncated {
    pub mean: f64,
    pub sd: f64,
}

impl Truncated {
    pub const fn new(mean: f64, sd: f64) -> Self {
        Self { mean, sd }
    }

    pub fn bounds(&self) -> (f64, f64) {
        (self.mean - TRUNCATION * self.sd, self.mean + TRUNCATION * self.sd)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.sd == 0.0 {
            return self.mean;
        }
        loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= TRUNCATION {
                return self.mean + self.sd * z;
            }
        }
    }
}

/// One mixture component of a limb configuration.
///
/// Arms: `[down, forward, twist, elbow]`; legs: `[flexion, adduction, twist, knee]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimbMode {
    pub weight: f64,
    pub dims: [Truncated; 4],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Posture {
    Upright,
    Supine,
    LeftSide,
    RightSide,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseDistribution {
    /// Posture probabilities.
    pub postures: Vec<(Posture, f64)>,
    /// Rotation about the viewing axis (lying) or the body axis (upright).
    pub heading: Truncated,
    /// Small out-of-plane tilts.
    pub tilt: Truncated,
    pub arm_modes: Vec<LimbMode>,
    pub leg_modes: Vec<LimbMode>,
    pub spine: Truncated,
    pub neck: Truncated,
    pub head: Truncated,
    pub wrist: Truncated,
    pub ankle: Truncated,
    pub shape: Truncated,
}

const fn t(mean: f64, sd: f64) -> Truncated {
    Truncated::new(mean, sd)
}

impl PoseDistribution {
    /// Upright poses with wide limb ranges.
    pub fn source() -> Self {
        Self {
            postures: vec![(Posture::Upright, 1.0)],
            heading: t(0.0, 0.4),
            tilt: t(0.0, 0.1),
            arm_modes: vec![LimbMode {
                weight: 1.0,
                dims: [t(1.0, 0.45), t(0.3, 0.5), t(0.3, 0.5), t(0.8, 0.45)],
            }],
            leg_modes: vec![LimbMode {
                weight: 1.0,
                dims: [t(0.15, 0.3), t(-0.05, 0.1), t(0.0, 0.15), t(0.35, 0.2)],
            }],
            spine: t(0.0, 0.1),
            neck: t(0.0, 0.1),
            head: t(0.0, 0.15),
            wrist: t(0.0, 0.2),
            ankle: t(0.0, 0.1),
            shape: t(0.0, 0.6),
        }
    }

    /// Lying poses; arms folded across the chest and crossed legs occlude
    /// other body parts.
    pub fn target() -> Self {
        Self {
            postures: vec![(Posture::Supine, 0.5), (Posture::LeftSide, 0.25), (Posture::RightSide, 0.25)],
            heading: t(0.0, 0.2),
            tilt: t(0.0, 0.1),
            arm_modes: vec![
                LimbMode {
                    weight: 0.6,
                    dims: [t(1.35, 0.12), t(0.1, 0.15), t(0.0, 0.2), t(0.3, 0.2)],
                },
                LimbMode {
                    weight: 0.4,
                    dims: [t(1.3, 0.12), t(0.5, 0.15), t(1.2, 0.15), t(1.9, 0.2)],
                },
            ],
            leg_modes: vec![
                LimbMode {
                    weight: 0.7,
                    dims: [t(0.05, 0.08), t(0.0, 0.06), t(0.0, 0.1), t(0.15, 0.1)],
                },
                LimbMode {
                    weight: 0.3,
                    dims: [t(0.35, 0.1), t(0.3, 0.06), t(0.0, 0.1), t(0.3, 0.12)],
                },
            ],
            spine: t(0.0, 0.06),
            neck: t(0.0, 0.08),
            head: t(0.0, 0.1),
            wrist: t(0.0, 0.15),
            ankle: t(0.0, 0.1),
            shape: t(0.0, 0.6),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok_weights = |w: &mut dyn Iterator<Item = f64>| {
            let mut any = false;
            for x in w {
                if !(x >= 0.0 && x.is_finite()) {
                    return false;
                }
                any |= x > 0.0;
            }
            any
        };
        if !ok_weights(&mut self.postures.iter().map(|p| p.1))
            || !ok_weights(&mut self.arm_modes.iter().map(|m| m.weight))
            || !ok_weights(&mut self.leg_modes.iter().map(|m| m.weight))
        {
            return Err(Error::Config("mixture weights must be nonnegative with a positive entry".into()));
        }
        let all = self
            .arm_modes
            .iter()
            .chain(&self.leg_modes)
            .flat_map(|m| m.dims)
            .chain([self.heading, self.tilt, self.spine, self.neck, self.head, self.wrist, self.ankle, self.shape]);
        for d in all {
            if !(d.sd >= 0.0 && d.sd.is_finite() && d.mean.is_finite()) {
                return Err(Error::Config(format!("bad truncated normal {d:?}")));
            }
        }
        Ok(())
    }
}

fn pick<R: Rng + ?Sized>(rng: &mut R, weights: impl Iterator<Item = f64> + Clone) -> usize {
    let total: f64 = weights.clone().sum();
    let mut u = rng.random::<f64>() * total;
    let mut last = 0;
    for (i, w) in weights.enumerate() {
        if w > 0.0 {
            last = i;
            if u < w {
                return i;
            }
        }
        u -= w;
    }
    last
}

/// Interpretable draw behind one pose.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentPose {
    pub posture: Posture,
    pub heading: f64,
    pub tilt: [f64; 2],
    /// Left then right.
    pub arms: [[f64; 4]; 2],
    pub arm_modes: [usize; 2],
    pub legs: [[f64; 4]; 2],
    pub leg_modes: [usize; 2],
    pub spine: [f64; 3],
    pub neck: [f64; 3],
    pub head: [f64; 3],
    pub wrists: [[f64; 3]; 2],
    pub ankles: [[f64; 3]; 2],
    pub shape: Vec<f64>,
}

impl LatentPose {
    pub fn sample<R: Rng + ?Sized>(dist: &PoseDistribution, shape_dims: usize, rng: &mut R) -> Self {
        let posture = dist.postures[pick(rng, dist.postures.iter().map(|p| p.1))].0;
        let heading = dist.heading.sample(rng);
        let tilt = [dist.tilt.sample(rng), dist.tilt.sample(rng)];
        let triple = |d: &Truncated, rng: &mut R| [d.sample(rng), d.sample(rng), d.sample(rng)];
        let limb = |modes: &[LimbMode], rng: &mut R| {
            let m = pick(rng, modes.iter().map(|m| m.weight));
            let v = modes[m].dims.map(|d| d.sample(rng));
            (m, v)
        };
        let (la, left_arm) = limb(&dist.arm_modes, rng);
        let (ra, right_arm) = limb(&dist.arm_modes, rng);
        let (ll, left_leg) = limb(&dist.leg_modes, rng);
        let (rl, right_leg) = limb(&dist.leg_modes, rng);
        Self {
            posture,
            heading,
            tilt,
            arms: [left_arm, right_arm],
            arm_modes: [la, ra],
            legs: [left_leg, right_leg],
            leg_modes: [ll, rl],
            spine: triple(&dist.spine, rng),
            neck: triple(&dist.neck, rng),
            head: triple(&dist.head, rng),
            wrists: [triple(&dist.wrist, rng), triple(&dist.wrist, rng)],
            ankles: [triple(&dist.ankle, rng), triple(&dist.ankle, rng)],
            shape: (0..shape_dims).map(|_| dist.shape.sample(rng)).collect(),
        }
    }

    pub fn root_rotation(&self) -> Mat3 {
        let tilt = rot_x(self.tilt[0]) * rot_y(self.tilt[1]);
        let up = rot_x(std::f64::consts::PI);
        let lay = rot_z(std::f64::consts::FRAC_PI_2 + self.heading);
        let half = std::f64::consts::FRAC_PI_2;
        match self.posture {
            Posture::Upright => up * tilt * rot_y(self.heading),
            Posture::Supine => lay * tilt * up,
            Posture::LeftSide => lay * tilt * up * rot_y(half),
            Posture::RightSide => lay * tilt * up * rot_y(-half),
        }
    }

    /// Pose and shape for the procedural joint layout.
    pub fn to_params(&self) -> PoseShapeParams {
        let mut p = PoseShapeParams::zeros(16, self.shape.len());
        p.set_joint(0, &log_rotation(&self.root_rotation()));
        p.set_joint(1, &Vec3::from(self.spine));
        p.set_joint(2, &Vec3::from(self.neck));
        p.set_joint(3, &Vec3::from(self.head));
        for side in 0..2 {
            let [down, forward, twist, elbow] = self.arms[side];
            let shoulder = log_rotation(&(rot_x(-forward) * rot_z(-down) * rot_x(twist)));
            let [flex, adduct, leg_twist, knee] = self.legs[side];
            let hip = log_rotation(&(rot_x(-flex) * rot_z(-adduct) * rot_y(leg_twist)));
            let limb = [
                (4, shoulder),
                (5, Vec3::new(0.0, -elbow, 0.0)),
                (6, Vec3::from(self.wrists[side])),
                (10, hip),
                (11, Vec3::new(knee, 0.0, 0.0)),
                (12, Vec3::from(self.ankles[side])),
            ];
            for (j, w) in limb {
                // The right side mirrors the left through the sagittal plane.
                let (j, w) = if side == 0 { (j, w) } else { (j + 3, Vec3::new(w.x, -w.y, -w.z)) };
                p.set_joint(j, &w);
            }
        }
        p.shape = self.shape.clone();
        p
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub intrinsics: PinholeIntrinsics,
    pub n_train: usize,
    pub n_test: usize,
    pub n_source: usize,
    /// Root placement in the camera frame (mm).
    pub root_x: Truncated,
    pub root_y: Truncated,
    pub root_z: Truncated,
    /// Depth noise standard deviation (mm).
    pub depth_noise: f64,
    /// Per-pixel dropout probability.
    pub hole_probability: f64,
    /// Silhouette dilation for the body mask (pixels).
    pub mask_margin: usize,
    /// Gap between the farthest body point and the bed (mm).
    pub bed_gap: f64,
    pub visibility_tau: f64,
    /// Radius of the proxy depth window; zero reads the nearest pixel.
    pub proxy_window: usize,
    pub source: PoseDistribution,
    pub target: PoseDistribution,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            intrinsics: PinholeIntrinsics::default(),
            n_train: 2000,
            n_test: 200,
            n_source: 5000,
            root_x: t(50.0, 30.0),
            root_y: t(0.0, 30.0),
            root_z: t(3100.0, 80.0),
            depth_noise: 5.0,
            hole_probability: 0.02,
            mask_margin: 3,
            bed_gap: 5.0,
            visibility_tau: DEFAULT_TAU,
            proxy_window: 0,
            source: PoseDistribution::source(),
            target: PoseDistribution::target(),
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        self.source.validate()?;
        self.target.validate()?;
        if !(self.depth_noise >= 0.0 && self.depth_noise.is_finite()) {
            return Err(Error::Config("depth_noise must be a nonnegative number".into()));
        }
        if !(0.0..=1.0).contains(&self.hole_probability) {
            return Err(Error::Config("hole_probability must lie in [0, 1]".into()));
        }
        if self.root_z.bounds().0 <= 500.0 {
            return Err(Error::Config("root_z must keep the body well in front of the camera".into()));
        }
        if !(self.visibility_tau >= 0.0) {
            return Err(Error::Config("visibility_tau must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Which random stream a sample draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Source,
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Source => "source",
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Independent generator for sample `index` of `split`.
pub fn sample_rng(seed: u64, split: Split, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let code = match split {
        Split::Source => 1u64,
        Split::Train => 2,
        Split::Test => 3,
    };
    rng.set_stream((code << 40) | index as u64);
    rng
}

fn sample_poses(model: &BodyModel, dist: &PoseDistribution, split: Split, n: usize, seed: u64) -> Vec<LatentPose> {
    par::map_range(n, |i| LatentPose::sample(dist, model.shape_dims(), &mut sample_rng(seed, split, i)))
}

pub fn sample_source_poses(model: &BodyModel, config: &SceneConfig, n: usize, seed: u64) -> Vec<LatentPose> {
    sample_poses(model, &config.source, Split::Source, n, seed)
}

pub fn sample_target_poses(model: &BodyModel, config: &SceneConfig, split: Split, n: usize, seed: u64) -> Vec<LatentPose> {
    sample_poses(model, &config.target, split, n, seed)
}

/// Evaluation-only ground truth for one rendered sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HiddenTruth {
    pub params: PoseShapeParams,
    /// Root translation in the camera frame (mm).
    pub placement: Vec3,
    /// Camera-frame joints (mm).
    pub joints: Vec<Vec3>,
    /// Known when the pose came from a sampled distribution.
    pub posture: Option<Posture>,
}

/// Output of [`render_sample`].
#[derive(Debug, Clone)]
pub struct RenderedSample {
    /// Cleaned observation as consumed by training.
    pub observation: ObservationSet,
    /// Depth as captured, before cleaning.
    pub raw_depth: DepthFrame,
    /// Noiseless depth including the bed.
    pub true_depth: DepthFrame,
    pub truth: HiddenTruth,
}

/// Square dilation of a mask by `margin` pixels.
pub fn dilate(mask: &[bool], width: usize, height: usize, margin: usize) -> Vec<bool> {
    if margin == 0 {
        return mask.to_vec();
    }
    // Separable: rows then columns.
    let mut rows = vec![false; mask.len()];
    for r in 0..height {
        for c in 0..width {
            if mask[r * width + c] {
                for cc in c.saturating_sub(margin)..=(c + margin).min(width - 1) {
                    rows[r * width + cc] = true;
                }
            }
        }
    }
    let mut out = vec![false; mask.len()];
    for r in 0..height {
        for c in 0..width {
            if rows[r * width + c] {
                for rr in r.saturating_sub(margin)..=(r + margin).min(height - 1) {
                    out[rr * width + c] = true;
                }
            }
        }
    }
    out
}

fn bed_quad(depth: f64, k: &PinholeIntrinsics) -> (Vec<Vec3>, Vec<[usize; 3]>) {
    let (w, h) = (k.width as f64, k.height as f64);
    let corners = [(-10.0, -10.0), (w + 10.0, -10.0), (w + 10.0, h + 10.0), (-10.0, h + 10.0)];
    let v = corners
        .iter()
        .map(|&(u, v)| backproject(&Vec2::new(u, v), depth, k).expect("bed depth is positive"))
        .collect();
    (v, vec![[0, 1, 2], [0, 2, 3]])
}

/// Renders a posed body on a bed, adds sensor noise and derives the
/// observation set. The noise is drawn from `rng`.
pub fn render_sample<R: Rng + ?Sized>(
    model: &BodyModel,
    params: &PoseShapeParams,
    placement: &Vec3,
    config: &SceneConfig,
    rng: &mut R,
) -> Result<RenderedSample> {
    let k = &config.intrinsics;
    let state = model.evaluate(params)?;
    let vertices: Vec<Vec3> = model.skin_state(&state).iter().map(|v| v + placement).collect();
    let joints: Vec<Vec3> = model.keypoints_state(&state).iter().map(|j| j + placement).collect();

    let tris = &model.template().triangles;
    let body = rasterize(&vertices, tris, k);
    let visibility = visibility_from_render(&joints, &body, k, config.visibility_tau);
    let body_mask = dilate(&body.mask(), k.width, k.height, config.mask_margin);

    let far = vertices.iter().map(|v| v.z).fold(f64::NEG_INFINITY, f64::max);
    let (bed_v, bed_t) = bed_quad(far + config.bed_gap, k);
    let mut all_v = vertices;
    let offset = all_v.len();
    all_v.extend(bed_v);
    let mut all_t = tris.clone();
    all_t.extend(bed_t.iter().map(|t| t.map(|i| i + offset)));
    let scene = rasterize(&all_v, &all_t, k).to_frame();

    let noise = Normal::new(0.0, config.depth_noise.max(f64::MIN_POSITIVE)).expect("finite noise level");
    let mut raw = scene.clone();
    for d in raw.depth.iter_mut() {
        if *d <= 0.0 {
            continue;
        }
        if config.depth_noise > 0.0 {
            *d = (*d as f64 + noise.sample(rng)).max(0.0) as f32;
        }
        if config.hole_probability > 0.0 && rng.random::<f64>() < config.hole_probability {
            *d = 0.0;
        }
    }
    raw = DepthFrame::from_depth(raw.width, raw.height, raw.depth)?;

    let keypoints: Vec<Vec2> = joints.iter().map(|j| project_pinhole(j, k)).collect::<Result<_>>()?;
    let confidence = keypoints.iter().map(|p| if k.contains(p) { 1.0 } else { 0.0 }).collect();
    let observation = ObservationSet::from_raw(
        keypoints,
        confidence,
        visibility,
        &raw,
        body_mask,
        k,
        config.proxy_window,
    );
    Ok(RenderedSample {
        observation,
        raw_depth: raw,
        true_depth: scene,
        truth: HiddenTruth {
            params: params.clone(),
            placement: *placement,
            joints,
            posture: None,
        },
    })
}

/// Draws the pose, placement and sensor noise of sample `index` of a target split.
pub fn generate_sample(model: &BodyModel, config: &SceneConfig, split: Split, index: usize, seed: u64) -> Result<RenderedSample> {
    let mut rng = sample_rng(seed, split, index);
    let latent = LatentPose::sample(&config.target, model.shape_dims(), &mut rng);
    let placement = Vec3::new(
        config.root_x.sample(&mut rng),
        config.root_y.sample(&mut rng),
        config.root_z.sample(&mut rng),
    );
    let mut s = render_sample(model, &latent.to_params(), &placement, config, &mut rng)?;
    s.truth.posture = Some(latent.posture);
    Ok(s)
}

/// In-memory target split: observations for training, truth for evaluation.
#[derive(Debug, Clone, Default)]
pub struct SplitData {
    pub observations: Vec<ObservationSet>,
    pub truth: Vec<HiddenTruth>,
}

impl SplitData {
    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    /// Indices of samples with at least one occluded joint.
    pub fn occluded_subset(&self) -> Vec<usize> {
        self.observations
            .iter()
            .enumerate()
            .filter(|(_, o)| o.visibility.iter().any(|v| !v))
            .map(|(i, _)| i)
            .collect()
    }
}

pub fn generate_split(model: &BodyModel, config: &SceneConfig, split: Split, range: std::ops::Range<usize>, seed: u64) -> Result<Vec<RenderedSample>> {
    let start = range.start;
    par::map_range(range.len(), |i| generate_sample(model, config, split, start + i, seed))
        .into_iter()
        .collect()
}

/// Generates a split keeping only what training and evaluation need.
pub fn generate_target(model: &BodyModel, config: &SceneConfig, split: Split, seed: u64) -> Result<SplitData> {
    let n = match split {
        Split::Train => config.n_train,
        Split::Test => config.n_test,
        Split::Source => return Err(Error::InvalidInput("the source split has no rendered samples".into())),
    };
    config.validate()?;
    let mut out = SplitData::default();
    // Chunked so raw frames do not pile up for large splits.
    let chunk = 256;
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        for s in generate_split(model, config, split, start..end, seed)? {
            out.observations.push(s.observation);
            out.truth.push(s.truth);
        }
        start = end;
    }
    Ok(out)
}
