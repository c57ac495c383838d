//! Supervision terms and their gradients.
//!
//! Unit conventions: 2D terms work in normalized image units (see
//! [`crate::camera`]); callers pass 3D and depth quantities in whichever unit
//! they want the loss expressed in (the trainer uses metres).

use serde::{Deserialize, Serialize};

use crate::body::{BodyModel, PoseShapeParams};
use crate::camera::NormalizedCamera;
use crate::error::{check_len, Error, Result};
use crate::geometry::{Vec2, Vec3};
use crate::prior::{angle_penalty, shape_penalty, GmmPrior, MixtureMode, PriorSchedule};

/// Confidence-weighted mean squared 2D error and its gradient with respect to `pred`.
pub fn l2d(pred: &[Vec2], target: &[Vec2], confidence: &[f64]) -> Result<(f64, Vec<Vec2>)> {
    check_len("2D targets", pred.len(), target.len())?;
    check_len("confidences", pred.len(), confidence.len())?;
    let n = pred.len().max(1) as f64;
    let mut value = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .zip(confidence)
        .map(|((p, t), c)| {
            let d = p - t;
            value += c * d.norm_squared();
            d * (2.0 * c / n)
        })
        .collect();
    Ok((value / n, grad))
}

/// Root-relative proxy loss: `sum_j V_j |(P_j - P_root) - (X_j - X_root)|^2`.
/// Returns `None` when the root has no usable proxy.
pub fn l3d_proxy(
    proxies: &[Option<Vec3>],
    pred: &[Vec3],
    visible: &[bool],
    root: usize,
) -> Result<Option<(f64, Vec<Vec3>)>> {
    check_len("proxies", pred.len(), proxies.len())?;
    check_len("visibility", pred.len(), visible.len())?;
    let Some(p_root) = proxies[root].filter(|_| visible[root]) else {
        return Ok(None);
    };
    let mut value = 0.0;
    let mut grad = vec![Vec3::zeros(); pred.len()];
    for j in 0..pred.len() {
        let Some(p) = proxies[j].filter(|_| visible[j]) else { continue };
        let r = (pred[j] - pred[root]) - (p - p_root);
        value += r.norm_squared();
        grad[j] += r * 2.0;
        grad[root] -= r * 2.0;
    }
    Ok(Some((value, grad)))
}

/// Pixels inside both masks where the observation is valid.
pub fn mask_intersection(rendered: &[bool], observed: &[bool]) -> Vec<usize> {
    rendered
        .iter()
        .zip(observed)
        .enumerate()
        .filter(|(_, (a, b))| **a && **b)
        .map(|(i, _)| i)
        .collect()
}

/// Offset `b0` minimizing the mean absolute residual `|D - b - D_hat|`:
/// the lower median of the residuals.
pub fn align_offset<T: Into<f64> + Copy>(observed: &[T], rendered: &[f64], pixels: &[usize]) -> Result<f64> {
    if pixels.is_empty() {
        return Err(Error::EmptyIntersection);
    }
    let mut r: Vec<f64> = pixels.iter().map(|&i| observed[i].into() - rendered[i]).collect();
    let mid = (r.len() - 1) / 2;
    let (_, m, _) = r.select_nth_unstable_by(mid, f64::total_cmp);
    Ok(*m)
}

/// Geman-McClure penalty `x^2 s^2 / (x^2 + s^2)`.
pub fn gmc(x: f64, sigma: f64) -> f64 {
    let (x2, s2) = (x * x, sigma * sigma);
    x2 * s2 / (x2 + s2)
}

pub fn gmc_derivative(x: f64, sigma: f64) -> f64 {
    let (x2, s2) = (x * x, sigma * sigma);
    2.0 * x * s2 * s2 / ((x2 + s2) * (x2 + s2))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DepthPenalty {
    #[default]
    L2,
    GemanMcClure {
        sigma: f64,
    },
}

/// Mean penalized aligned depth residual over `pixels`, with the gradient
/// with respect to each rendered depth (mm). Residuals are multiplied by
/// `unit` first (e.g. `1e-3` for metres).
pub fn l_depth<T: Into<f64> + Copy>(
    observed: &[T],
    rendered: &[f64],
    b0: f64,
    pixels: &[usize],
    unit: f64,
    penalty: DepthPenalty,
) -> Result<(f64, Vec<(usize, f64)>)> {
    if pixels.is_empty() {
        return Err(Error::EmptyIntersection);
    }
    let n = pixels.len() as f64;
    let mut value = 0.0;
    let grad = pixels
        .iter()
        .map(|&i| {
            let r = (observed[i].into() - b0 - rendered[i]) * unit;
            let (v, d) = match penalty {
                DepthPenalty::L2 => (r * r, 2.0 * r),
                DepthPenalty::GemanMcClure { sigma } => (gmc(r, sigma), gmc_derivative(r, sigma)),
            };
            value += v;
            (i, -d * unit / n)
        })
        .collect();
    Ok((value / n, grad))
}

/// `|a - b|^2` and its gradient with respect to `a`.
pub fn l_smpl(a: &[f64], b: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_len("parameter vector", a.len(), b.len())?;
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    Ok((d.iter().map(|x| x * x).sum(), d.iter().map(|x| 2.0 * x).collect()))
}

/// Coefficients of the regression terms for one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageCoefficients {
    pub three_d: f64,
    pub depth: f64,
}

/// Stage II starts strictly after `stage2_epoch`.
pub fn stage_coefficients(epoch: usize, stage2_epoch: usize) -> StageCoefficients {
    if epoch > stage2_epoch {
        StageCoefficients { three_d: 0.0, depth: 1.0 }
    } else {
        StageCoefficients { three_d: 1.0, depth: 0.0 }
    }
}

/// Relative weights of the regression terms (all ones reproduces the plain sum).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub two_d: f64,
    pub three_d: f64,
    pub smpl: f64,
    pub depth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            two_d: 1.0,
            three_d: 1.0,
            smpl: 1.0,
            depth: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RegressionTerms {
    pub two_d: f64,
    pub three_d: f64,
    pub smpl: f64,
    pub depth: f64,
}

/// `(1 - s) L_3D + L_2D + L_SMPL + s L_D` with `s = [epoch > stage2_epoch]`.
pub fn l_reg(terms: &RegressionTerms, weights: &LossWeights, epoch: usize, stage2_epoch: usize) -> f64 {
    let c = stage_coefficients(epoch, stage2_epoch);
    c.three_d * weights.three_d * terms.three_d
        + weights.two_d * terms.two_d
        + weights.smpl * terms.smpl
        + c.depth * weights.depth * terms.depth
}

/// Prior configuration seen by the fitting objective.
#[derive(Debug, Clone, Copy)]
pub struct PriorTerms<'a> {
    pub gmm: Option<&'a GmmPrior>,
    pub schedule: PriorSchedule,
    pub epoch: usize,
    pub mode: MixtureMode,
}

/// Components of the fitting objective with gradients.
#[derive(Debug, Clone)]
pub struct OptObjective {
    pub total: f64,
    pub two_d: f64,
    pub pose_prior: f64,
    pub shape: f64,
    pub angle: f64,
    pub grad_params: PoseShapeParams,
    /// `d/d(scale, tx, ty)`.
    pub grad_camera: [f64; 3],
}

/// `L_2D + lambda_theta L_theta + lambda_beta L_beta + lambda_alpha L_alpha`,
/// with the 2D term restricted to `joints` when given.
pub fn l_opt(
    model: &BodyModel,
    params: &PoseShapeParams,
    camera: &NormalizedCamera,
    target: &[Vec2],
    confidence: &[f64],
    prior: &PriorTerms,
    joints: Option<&[usize]>,
) -> Result<OptObjective> {
    let state = model.evaluate(params)?;
    let kp = model.keypoints_state(&state);
    let pred = camera.project(&kp);
    let mut conf = confidence.to_vec();
    if let Some(subset) = joints {
        for (j, c) in conf.iter_mut().enumerate() {
            if !subset.contains(&j) {
                *c = 0.0;
            }
        }
    }
    let (two_d, g2) = l2d(&pred, target, &conf)?;
    let s = camera.scale / 1000.0;
    let mut grad_camera = [0.0; 3];
    let g3: Vec<Vec3> = g2
        .iter()
        .zip(&kp)
        .map(|(g, x)| {
            grad_camera[0] += (g.x * x.x + g.y * x.y) / 1000.0;
            grad_camera[1] += g.x;
            grad_camera[2] += g.y;
            Vec3::new(g.x * s, g.y * s, 0.0)
        })
        .collect();
    let (mut gp, mut gs) = model.keypoints_vjp(&state, &g3);

    let mut pose_prior = 0.0;
    let lt = prior.schedule.lambda_theta(prior.epoch);
    if let Some(gmm) = prior.gmm.filter(|_| lt > 0.0) {
        let (v, g) = gmm.penalty(params.body_pose(), prior.mode)?;
        pose_prior = v;
        for (a, b) in gp[3..].iter_mut().zip(&g) {
            *a += lt * b;
        }
    }
    let (shape, g_shape) = shape_penalty(&params.shape);
    for (a, b) in gs.iter_mut().zip(&g_shape) {
        *a += prior.schedule.lambda_beta * b;
    }
    let (angle, g_angle) = angle_penalty(&params.pose, model.hinges());
    for (a, b) in gp.iter_mut().zip(&g_angle) {
        *a += prior.schedule.lambda_alpha * b;
    }
    let total = two_d + lt * pose_prior + prior.schedule.lambda_beta * shape + prior.schedule.lambda_alpha * angle;
    Ok(OptObjective {
        total,
        two_d,
        pose_prior,
        shape,
        angle,
        grad_params: PoseShapeParams { pose: gp, shape: gs },
        grad_camera,
    })
}
