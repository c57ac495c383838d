//! Joint-position and depth metrics.

use std::fmt::Write as _;

use nalgebra::{Matrix3, SVD};
use serde::{Deserialize, Serialize};

use crate::body::BodyModel;
use crate::camera::PinholeIntrinsics;
use crate::error::{check_len, Error, Result};
use crate::geometry::Vec3;
use crate::losses::{align_offset, mask_intersection};
use crate::observation::ObservationSet;
use crate::par;
use crate::regressor::Prediction;
use crate::render::{rasterize, DepthFrame, Rasterization};
use crate::scenes::HiddenTruth;

/// Joint used for root alignment.
pub const ROOT: usize = 0;

/// Mean per-joint distance after subtracting each set's root joint.
pub fn mpjpe(pred: &[Vec3], gt: &[Vec3]) -> Result<f64> {
    check_len("joints", gt.len(), pred.len())?;
    if gt.is_empty() {
        return Err(Error::InvalidInput("no joints".into()));
    }
    let (pr, gr) = (pred[ROOT], gt[ROOT]);
    Ok(pred.iter().zip(gt).map(|(p, g)| ((p - pr) - (g - gr)).norm()).sum::<f64>() / gt.len() as f64)
}

/// Similarity transform `s R x + t` best mapping `source` onto `target`
/// (reflections excluded).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
}

impl Similarity {
    pub fn apply(&self, x: &Vec3) -> Vec3 {
        self.rotation * x * self.scale + self.translation
    }
}

pub fn procrustes(source: &[Vec3], target: &[Vec3]) -> Result<Similarity> {
    check_len("joints", target.len(), source.len())?;
    let n = source.len() as f64;
    if source.len() < 3 {
        return Err(Error::TooFewSamples { needed: 3, got: source.len() });
    }
    let ms = source.iter().sum::<Vec3>() / n;
    let mt = target.iter().sum::<Vec3>() / n;
    let mut cov = Matrix3::zeros();
    let mut var = 0.0;
    for (s, t) in source.iter().zip(target) {
        let (x, y) = (s - ms, t - mt);
        cov += y * x.transpose();
        var += x.norm_squared();
    }
    let svd = SVD::new(cov, true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let sv = svd.singular_values;
    // Collinear or coincident points leave the rotation undetermined.
    if var <= 0.0 || sv[1] <= 1e-12 * sv[0].max(f64::MIN_POSITIVE) {
        return Err(Error::Degenerate("points are collinear".into()));
    }
    let d = if (u * vt).determinant() < 0.0 { -1.0 } else { 1.0 };
    let dm = Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, d));
    let rotation = u * dm * vt;
    let scale = (sv[0] + sv[1] + d * sv[2]) / var;
    Ok(Similarity {
        scale,
        rotation,
        translation: mt - rotation * ms * scale,
    })
}

/// Mean per-joint distance after similarity alignment of `pred` onto `gt`.
pub fn pa_mpjpe(pred: &[Vec3], gt: &[Vec3]) -> Result<f64> {
    let sim = procrustes(pred, gt)?;
    Ok(pred.iter().zip(gt).map(|(p, g)| (sim.apply(p) - g).norm()).sum::<f64>() / gt.len() as f64)
}

/// Mean `|D - b0 - D_hat|` over the pixels where both masks hold.
pub fn aligned_depth_error_values<T: Into<f64> + Copy>(
    observed: &[T],
    observed_mask: &[bool],
    rendered: &[f64],
    rendered_mask: &[bool],
) -> Result<f64> {
    check_len("observed mask", observed.len(), observed_mask.len())?;
    check_len("rendered pixels", observed.len(), rendered.len())?;
    check_len("rendered mask", observed.len(), rendered_mask.len())?;
    let pixels = mask_intersection(rendered_mask, observed_mask);
    let b0 = align_offset(observed, rendered, &pixels)?;
    Ok(pixels
        .iter()
        .map(|&i| (observed[i].into() - b0 - rendered[i]).abs())
        .sum::<f64>()
        / pixels.len() as f64)
}

/// Aligned depth error over the rendered pixels inside the observed mask
/// that carry a valid measurement.
pub fn aligned_depth_error(observed: &DepthFrame, observed_mask: &[bool], rendered: &Rasterization) -> Result<f64> {
    check_len("observed mask", observed.len(), observed_mask.len())?;
    let valid: Vec<bool> = observed_mask.iter().zip(&observed.mask).map(|(a, b)| *a && *b).collect();
    aligned_depth_error_values(&observed.depth, &valid, &rendered.depth, &rendered.mask())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub index: usize,
    pub mpjpe: f64,
    pub pa_mpjpe: f64,
    /// `None` when the rendering misses the observed mask.
    pub depth_error: Option<f64>,
    /// Root-relative errors of the joints hidden in the observation.
    pub occluded_errors: Vec<f64>,
}

/// Camera-frame joints (mm) of a prediction.
pub fn predicted_joints(model: &BodyModel, pred: &Prediction, k: &PinholeIntrinsics) -> Result<Vec<Vec3>> {
    let t = pred.camera.placement(k)?;
    Ok(model.keypoints(&pred.params)?.iter().map(|j| j + t).collect())
}

pub fn evaluate_sample(
    model: &BodyModel,
    pred: &Prediction,
    obs: &ObservationSet,
    truth: &HiddenTruth,
    k: &PinholeIntrinsics,
    index: usize,
) -> Result<SampleMetrics> {
    let joints = predicted_joints(model, pred, k)?;
    let gt = &truth.joints;
    let t = pred.camera.placement(k)?;
    let vertices: Vec<Vec3> = model.skin(&pred.params)?.iter().map(|v| v + t).collect();
    let raster = rasterize(&vertices, &model.template().triangles, k);
    let depth_error = match aligned_depth_error(&obs.depth, &obs.body_mask, &raster) {
        Ok(e) => Some(e),
        Err(Error::EmptyIntersection) => None,
        Err(e) => return Err(e),
    };
    let occluded_errors = obs
        .visibility
        .iter()
        .enumerate()
        .filter(|(_, v)| !**v)
        .map(|(j, _)| ((joints[j] - joints[ROOT]) - (gt[j] - gt[ROOT])).norm())
        .collect();
    Ok(SampleMetrics {
        index,
        mpjpe: mpjpe(&joints, gt)?,
        pa_mpjpe: pa_mpjpe(&joints, gt)?,
        depth_error,
        occluded_errors,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl MetricSummary {
    pub fn of(metric: &str, values: &[f64]) -> Self {
        let n = values.len();
        let mean = if n == 0 { f64::NAN } else { values.iter().sum::<f64>() / n as f64 };
        let std = if n < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Self {
            metric: metric.into(),
            mean,
            std,
            count: n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: Vec<SampleMetrics>,
    pub summary: Vec<MetricSummary>,
    /// Samples without a depth error.
    pub depth_skipped: usize,
    /// Samples with at least one occluded joint.
    pub occluded_samples: usize,
}

impl EvalReport {
    pub fn metric(&self, name: &str) -> Option<&MetricSummary> {
        self.summary.iter().find(|m| m.metric == name)
    }

    pub fn mean(&self, name: &str) -> f64 {
        self.metric(name).map_or(f64::NAN, |m| m.mean)
    }
}

pub fn evaluate(
    model: &BodyModel,
    preds: &[Prediction],
    obs: &[ObservationSet],
    truth: &[HiddenTruth],
    k: &PinholeIntrinsics,
) -> Result<EvalReport> {
    check_len("observations", preds.len(), obs.len())?;
    check_len("ground truth", preds.len(), truth.len())?;
    let samples: Vec<SampleMetrics> = par::map_range(preds.len(), |i| evaluate_sample(model, &preds[i], &obs[i], &truth[i], k, i))
        .into_iter()
        .collect::<Result<_>>()?;
    let col = |f: &dyn Fn(&SampleMetrics) -> Option<f64>| samples.iter().filter_map(f).collect::<Vec<f64>>();
    let occluded: Vec<f64> = samples.iter().flat_map(|s| s.occluded_errors.iter().copied()).collect();
    let summary = vec![
        MetricSummary::of("mpjpe", &col(&|s| Some(s.mpjpe))),
        MetricSummary::of("pa_mpjpe", &col(&|s| Some(s.pa_mpjpe))),
        MetricSummary::of("aligned_depth_error", &col(&|s| s.depth_error)),
        MetricSummary::of("occluded_joint_error", &occluded),
    ];
    Ok(EvalReport {
        depth_skipped: samples.iter().filter(|s| s.depth_error.is_none()).count(),
        occluded_samples: samples.iter().filter(|s| !s.occluded_errors.is_empty()).count(),
        samples,
        summary,
    })
}

/// Per-sample CSV; `provenance` lines are written as `#` comments.
pub fn report_csv(report: &EvalReport, provenance: &str) -> String {
    let mut out = String::new();
    for line in provenance.lines() {
        writeln!(out, "# {line}").unwrap();
    }
    out.push_str("index,mpjpe,pa_mpjpe,aligned_depth_error,occluded_joints,occluded_joint_error\n");
    for s in &report.samples {
        let occ = if s.occluded_errors.is_empty() {
            String::new()
        } else {
            (s.occluded_errors.iter().sum::<f64>() / s.occluded_errors.len() as f64).to_string()
        };
        writeln!(
            out,
            "{},{},{},{},{},{}",
            s.index,
            s.mpjpe,
            s.pa_mpjpe,
            s.depth_error.map_or(String::new(), |d| d.to_string()),
            s.occluded_errors.len(),
            occ
        )
        .unwrap();
    }
    out
}
