//! Per-sample optimization of the fitting objective from a regressed start.

use serde::{Deserialize, Serialize};

use crate::body::{BodyModel, PoseShapeParams};
use crate::camera::NormalizedCamera;
use crate::error::Result;
use crate::geometry::Vec2;
use crate::losses::{l_opt, PriorTerms};
use crate::optim::Adam;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    /// Iterations of the joint pose/shape/camera phase.
    pub max_iter: usize,
    /// Iterations of the preceding camera-only phase on torso joints.
    pub camera_iters: usize,
    pub lr_pose: f64,
    pub lr_camera: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            max_iter: 50,
            camera_iters: 10,
            lr_pose: 1e-2,
            lr_camera: 1e-1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub params: PoseShapeParams,
    pub camera: NormalizedCamera,
    pub objective: f64,
    pub initial_objective: f64,
    /// Full objective at every visited iterate, starting with the initialization.
    pub trace: Vec<f64>,
    /// Parameters at every visited iterate: flat pose and shape, then scale and translation.
    pub param_trace: Vec<Vec<f64>>,
    /// False when a non-finite objective stopped the fit.
    pub finite: bool,
}

struct Iterate {
    params: PoseShapeParams,
    camera: NormalizedCamera,
    objective: f64,
}

/// Camera-only phase on the torso, then all parameters; returns the best
/// iterate seen, which is never worse than the initialization.
pub fn optimize(
    model: &BodyModel,
    init: &PoseShapeParams,
    init_camera: &NormalizedCamera,
    target: &[Vec2],
    confidence: &[f64],
    prior: &PriorTerms,
    config: &FitConfig,
) -> Result<FitResult> {
    let full = |p: &PoseShapeParams, c: &NormalizedCamera| l_opt(model, p, c, target, confidence, prior, None);
    let initial = full(init, init_camera)?;
    let mut best = Iterate {
        params: init.clone(),
        camera: *init_camera,
        objective: initial.total,
    };
    let mut trace = vec![initial.total];
    let snapshot = |p: &PoseShapeParams, c: &NormalizedCamera| {
        let mut v = p.to_flat();
        v.extend([c.scale, c.translation[0], c.translation[1]]);
        v
    };
    let mut param_trace = vec![snapshot(init, init_camera)];
    if !initial.total.is_finite() {
        log::warn!("fitting objective is not finite at the initialization");
        return Ok(finish(best, initial.total, trace, param_trace, false));
    }

    let mut params = init.clone();
    let mut cam = [init_camera.scale, init_camera.translation[0], init_camera.translation[1]];
    let to_cam = |c: &[f64; 3]| NormalizedCamera {
        scale: c[0].max(1e-3),
        translation: [c[1], c[2]],
    };
    let mut cam_opt = Adam::new(3, config.lr_camera);
    for _ in 0..config.camera_iters {
        let o = l_opt(model, &params, &to_cam(&cam), target, confidence, prior, Some(model.torso_joints()))?;
        cam_opt.update(&mut cam, &o.grad_camera);
        let f = full(&params, &to_cam(&cam))?.total;
        trace.push(f);
        param_trace.push(snapshot(&params, &to_cam(&cam)));
        if !f.is_finite() {
            log::warn!("fitting objective diverged in the camera phase");
            return Ok(finish(best, initial.total, trace, param_trace, false));
        }
        if f < best.objective {
            best = Iterate {
                params: params.clone(),
                camera: to_cam(&cam),
                objective: f,
            };
        }
    }

    let mut flat = params.to_flat();
    let pose_dim = model.pose_dim();
    let mut pose_opt = Adam::new(flat.len(), config.lr_pose);
    let mut cam_opt = Adam::new(3, config.lr_camera);
    let mut current = full(&params, &to_cam(&cam))?;
    for _ in 0..config.max_iter {
        pose_opt.update(&mut flat, &current.grad_params.to_flat());
        cam_opt.update(&mut cam, &current.grad_camera);
        params = PoseShapeParams::from_flat(&flat, pose_dim);
        current = full(&params, &to_cam(&cam))?;
        trace.push(current.total);
        param_trace.push(snapshot(&params, &to_cam(&cam)));
        if !current.total.is_finite() {
            log::warn!("fitting objective diverged");
            return Ok(finish(best, initial.total, trace, param_trace, false));
        }
        if current.total < best.objective {
            best = Iterate {
                params: params.clone(),
                camera: to_cam(&cam),
                objective: current.total,
            };
        }
    }
    Ok(finish(best, initial.total, trace, param_trace, true))
}

fn finish(best: Iterate, initial: f64, trace: Vec<f64>, param_trace: Vec<Vec<f64>>, finite: bool) -> FitResult {
    FitResult {
        params: best.params,
        camera: best.camera,
        objective: best.objective,
        initial_objective: initial,
        trace,
        param_trace,
        finite,
    }
}

/// `true` selects the fitted parameters; ties go to the fit.
pub fn select_supervision_target(fit_objective: f64, initial_objective: f64) -> bool {
    fit_objective <= initial_objective
}
