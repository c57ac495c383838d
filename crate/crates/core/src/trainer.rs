//! Two-stage training of the regressor.
//!
//! Each batch: regress parameters, refine them per sample with the fitting
//! loop, then take one Adam step on the regression loss. Stage I supervises
//! with 2D keypoints, root-relative depth proxies and the fitted parameters;
//! Stage II replaces the proxies with aligned rendered depth.

use std::fmt::Write as _;
use std::path::PathBuf;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::body::{BodyModel, BodyState, PoseShapeParams};
use crate::camera::{NormalizedCamera, PinholeIntrinsics};
use crate::config::{TermMask, TrainConfig};
use crate::error::{Error, Result};
use crate::fitting::{optimize, select_supervision_target};
use crate::geometry::{rot_x, log_rotation, Vec2, Vec3};
use crate::losses::{align_offset, l2d, l3d_proxy, l_depth, l_smpl, mask_intersection, DepthPenalty, PriorTerms};
use crate::observation::ObservationSet;
use crate::optim::Adam;
use crate::par;
use crate::prior::GmmPrior;
use crate::regressor::{features, Checkpoint, Prediction, Regressor};
use crate::render::{depth_vjp, rasterize};

/// Joint whose proxy anchors the root-relative 3D term.
pub const ROOT_JOINT: usize = 0;

/// Training-side view of one observation.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub features: Vec<f64>,
    /// Keypoints in normalized image units.
    pub target: Vec<Vec2>,
    pub confidence: Vec<f64>,
    /// Joints whose proxies supervise the 3D term.
    pub visible: Vec<bool>,
    /// Proxies in metres.
    pub proxies: Vec<Option<Vec3>>,
}

pub fn prepare(obs: &ObservationSet, k: &PinholeIntrinsics, all_visible: bool) -> PreparedSample {
    let target: Vec<Vec2> = obs.keypoints.iter().map(|p| k.to_normalized(p)).collect();
    let visible = if all_visible {
        obs.proxies.iter().map(Option::is_some).collect()
    } else {
        obs.usable_visibility()
    };
    PreparedSample {
        features: features(&target, &obs.confidence),
        target,
        confidence: obs.confidence.clone(),
        visible,
        proxies: obs.proxies.iter().map(|p| p.map(|x| x / 1000.0)).collect(),
    }
}

/// Camera-facing rest pose encoded by the initial output bias.
pub fn initial_params(model: &BodyModel) -> PoseShapeParams {
    let mut p = model.zero_params();
    p.set_joint(0, &log_rotation(&rot_x(std::f64::consts::PI)));
    p
}

/// The regressor before any training step.
pub fn initial_regressor(model: &BodyModel, config: &TrainConfig) -> Result<Regressor> {
    Regressor::init(&config.regressor, model.num_keypoints(), &initial_params(model), config.seed)
}

/// Aligned depth term of one prediction with its gradient on pose and shape.
/// The camera receives no gradient from this term.
#[derive(Debug, Clone)]
pub struct DepthTerm {
    pub value: f64,
    pub offset: f64,
    pub pixels: usize,
    pub grad_pose: Vec<f64>,
    pub grad_shape: Vec<f64>,
    pub grad_camera: [f64; 3],
}

/// `None` when the rendered and observed masks do not intersect.
pub fn depth_term(
    model: &BodyModel,
    state: &BodyState,
    camera: &NormalizedCamera,
    obs: &ObservationSet,
    k: &PinholeIntrinsics,
    penalty: DepthPenalty,
) -> Result<Option<DepthTerm>> {
    let placement = camera.placement(k)?;
    let vertices: Vec<Vec3> = model.skin_state(state).iter().map(|v| v + placement).collect();
    let tris = &model.template().triangles;
    let raster = rasterize(&vertices, tris, k);
    let observed: Vec<bool> = obs.body_mask.iter().zip(&obs.depth.mask).map(|(a, b)| *a && *b).collect();
    let pixels = mask_intersection(&raster.mask(), &observed);
    if pixels.is_empty() {
        return Ok(None);
    }
    let offset = align_offset(&obs.depth.depth, &raster.depth, &pixels)?;
    let (value, grads) = l_depth(&obs.depth.depth, &raster.depth, offset, &pixels, 1e-3, penalty)?;
    let per_vertex = depth_vjp(&raster, &vertices, tris, k, &grads);
    let sparse: Vec<(usize, Vec3)> = per_vertex
        .into_iter()
        .enumerate()
        .filter(|(_, g)| *g != Vec3::zeros())
        .collect();
    let (grad_pose, grad_shape) = model.vertices_vjp(state, &sparse);
    Ok(Some(DepthTerm {
        value,
        offset,
        pixels: pixels.len(),
        grad_pose,
        grad_shape,
        grad_camera: [0.0; 3],
    }))
}

/// Unweighted term values of one sample; `None` where not evaluated.
#[derive(Debug, Clone, Default)]
struct SampleOutcome {
    loss: f64,
    two_d: f64,
    three_d: Option<f64>,
    smpl: Option<f64>,
    depth: Option<f64>,
    opt_accepted: bool,
    depth_skipped: bool,
    grad_params: Vec<f64>,
    grad_camera: [f64; 3],
}

struct StepContext<'a> {
    model: &'a BodyModel,
    k: &'a PinholeIntrinsics,
    config: &'a TrainConfig,
    terms: TermMask,
    prior: PriorTerms<'a>,
    c3: f64,
    cd: f64,
}

fn sample_step(ctx: &StepContext, pred: &Prediction, s: &PreparedSample, obs: &ObservationSet) -> Result<SampleOutcome> {
    let model = ctx.model;
    let w = &ctx.config.weights;
    let params = &pred.params;
    let cam = &pred.camera;
    let state = model.evaluate(params)?;
    let kp = model.keypoints_state(&state);

    let (two_d, g2) = l2d(&cam.project(&kp), &s.target, &s.confidence)?;
    let scale = cam.scale / 1000.0;
    let mut grad_camera = [0.0; 3];
    let mut g_kp: Vec<Vec3> = g2
        .iter()
        .zip(&kp)
        .map(|(g, x)| {
            let g = g * w.two_d;
            grad_camera[0] += (g.x * x.x + g.y * x.y) / 1000.0;
            grad_camera[1] += g.x;
            grad_camera[2] += g.y;
            Vec3::new(g.x * scale, g.y * scale, 0.0)
        })
        .collect();
    let mut loss = w.two_d * two_d;

    let mut three_d = None;
    if ctx.terms.three_d {
        let kp_m: Vec<Vec3> = kp.iter().map(|x| x / 1000.0).collect();
        if let Some((v, g)) = l3d_proxy(&s.proxies, &kp_m, &s.visible, ROOT_JOINT)? {
            three_d = Some(v);
            let c = ctx.c3 * w.three_d;
            if c > 0.0 {
                loss += c * v;
                for (a, b) in g_kp.iter_mut().zip(&g) {
                    *a += b * (c / 1000.0);
                }
            }
        }
    }
    let (mut g_pose, mut g_shape) = model.keypoints_vjp(&state, &g_kp);

    let mut smpl = None;
    let mut opt_accepted = false;
    if ctx.terms.smpl {
        let fit = optimize(model, params, cam, &s.target, &s.confidence, &ctx.prior, &ctx.config.fit)?;
        opt_accepted = fit.finite && select_supervision_target(fit.objective, fit.initial_objective);
        let target = if opt_accepted { &fit.params } else { params };
        let (v, g) = l_smpl(&params.to_flat(), &target.to_flat())?;
        smpl = Some(v);
        loss += w.smpl * v;
        let pd = g_pose.len();
        for (a, b) in g_pose.iter_mut().chain(g_shape.iter_mut()).zip(&g) {
            *a += w.smpl * b;
        }
        debug_assert_eq!(g.len(), pd + g_shape.len());
    }

    let mut depth = None;
    let mut depth_skipped = false;
    let cd = ctx.cd * w.depth;
    if ctx.terms.depth && ctx.cd > 0.0 {
        match depth_term(model, &state, cam, obs, ctx.k, ctx.config.depth_penalty)? {
            Some(d) => {
                depth = Some(d.value);
                loss += cd * d.value;
                for (a, b) in g_pose.iter_mut().zip(&d.grad_pose) {
                    *a += cd * b;
                }
                for (a, b) in g_shape.iter_mut().zip(&d.grad_shape) {
                    *a += cd * b;
                }
            }
            None => depth_skipped = true,
        }
    }

    let mut grad_params = g_pose;
    grad_params.extend(g_shape);
    Ok(SampleOutcome {
        loss,
        two_d,
        three_d,
        smpl,
        depth,
        opt_accepted,
        depth_skipped,
        grad_params,
        grad_camera,
    })
}

/// Per-epoch means over the training samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Effective coefficient of the 3D proxy term.
    pub w3d: f64,
    /// Effective coefficient of the depth term.
    pub wd: f64,
    pub l2d: f64,
    pub l3d: Option<f64>,
    pub l_depth: Option<f64>,
    pub l_smpl: Option<f64>,
    pub lambda_theta: f64,
    pub loss: f64,
    pub opt_accepted: usize,
    pub depth_skipped: usize,
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub regressor: Regressor,
    pub checkpoint: Checkpoint,
    pub metrics: Vec<EpochMetrics>,
}

/// Optional side effects of a run.
#[derive(Default)]
pub struct TrainHooks<'a> {
    /// Called after every epoch with its metrics and checkpoint.
    pub on_epoch: Option<&'a mut dyn FnMut(&EpochMetrics, &Checkpoint) -> Result<()>>,
    /// Where to dump the last good state when a loss turns non-finite.
    pub dump_dir: Option<PathBuf>,
}

#[derive(Default)]
struct Accumulator {
    n: usize,
    loss: f64,
    two_d: f64,
    three_d: (f64, usize),
    smpl: (f64, usize),
    depth: (f64, usize),
    accepted: usize,
    skipped: usize,
}

impl Accumulator {
    fn add(&mut self, o: &SampleOutcome) {
        self.n += 1;
        self.loss += o.loss;
        self.two_d += o.two_d;
        let add = |acc: &mut (f64, usize), v: Option<f64>| {
            if let Some(v) = v {
                acc.0 += v;
                acc.1 += 1;
            }
        };
        add(&mut self.three_d, o.three_d);
        add(&mut self.smpl, o.smpl);
        add(&mut self.depth, o.depth);
        self.accepted += o.opt_accepted as usize;
        self.skipped += o.depth_skipped as usize;
    }

    fn mean(acc: (f64, usize)) -> Option<f64> {
        (acc.1 > 0).then(|| acc.0 / acc.1 as f64)
    }
}

fn shuffle_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x5348_5546_0000_0000 | epoch as u64);
    rng
}

pub fn train(
    model: &BodyModel,
    config: &TrainConfig,
    data: &[ObservationSet],
    k: &PinholeIntrinsics,
    prior: Option<&GmmPrior>,
    dataset_hash: &str,
    mut hooks: TrainHooks,
) -> Result<TrainOutput> {
    config.validate()?;
    if prior.is_none() && config.prior.lambda_theta0 > 0.0 && config.ablation.terms().smpl {
        return Err(Error::Config("a pose prior is required unless lambda_theta0 = 0".into()));
    }
    let n = config.max_samples.map_or(data.len(), |m| m.min(data.len()));
    if n == 0 {
        return Err(Error::Data("no training samples".into()));
    }
    let data = &data[..n];
    let terms = config.ablation.terms();
    let prepared = par::map_slice(data, |o| prepare(o, k, terms.all_visible));
    let config_hash = config.hash();

    let mut regressor = initial_regressor(model, config)?;
    let mut flat = regressor.flat_params();
    let mut adam = Adam::new(flat.len(), config.lr);
    let mut metrics = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 1..=config.epochs {
        let (c3, cd) = terms.coefficients(epoch, config.stage2_epoch);
        let ctx = StepContext {
            model,
            k,
            config,
            terms,
            prior: PriorTerms {
                gmm: prior,
                schedule: config.prior,
                epoch,
                mode: config.mixture_mode,
            },
            c3,
            cd,
        };
        order.shuffle(&mut shuffle_rng(config.seed, epoch));
        let mut acc = Accumulator::default();
        for batch in order.chunks(config.batch_size) {
            let dim = prepared[0].features.len();
            let mut inputs = DMatrix::zeros(dim, batch.len());
            for (c, &i) in batch.iter().enumerate() {
                inputs.column_mut(c).copy_from_slice(&prepared[i].features);
            }
            let (preds, cache) = regressor.forward_batch(&inputs)?;
            let outcomes: Vec<Result<SampleOutcome>> =
                par::map_range(batch.len(), |c| sample_step(&ctx, &preds[c], &prepared[batch[c]], &data[batch[c]]));
            let mut grad_out = DMatrix::zeros(regressor.layers.last().unwrap().bias.len(), batch.len());
            let scale = 1.0 / batch.len() as f64;
            for (c, o) in outcomes.into_iter().enumerate() {
                let o = o?;
                if !o.loss.is_finite() || o.grad_params.iter().any(|g| !g.is_finite()) {
                    let msg = format!("non-finite loss in epoch {epoch} at sample {}", batch[c]);
                    if let Some(dir) = &hooks.dump_dir {
                        let cp = Checkpoint::new(&regressor, epoch, &config_hash, dataset_hash, config.seed);
                        cp.save(&dir.join(format!("dump_epoch{epoch:03}.json")))?;
                        log::error!("{msg}; state dumped to {}", dir.display());
                    }
                    return Err(Error::Numeric(msg));
                }
                acc.add(&o);
                let g = PoseShapeParams::from_flat(&o.grad_params, 3 * model.num_joints());
                let raw = regressor.encode_gradient(&cache, c, &g, &o.grad_camera);
                for (r, v) in raw.iter().enumerate() {
                    grad_out[(r, c)] = v * scale;
                }
            }
            let grads = regressor.backward(&cache, &grad_out);
            adam.update(&mut flat, &grads);
            regressor.set_flat_params(&flat)?;
        }
        let nf = acc.n as f64;
        let m = EpochMetrics {
            epoch,
            w3d: c3,
            wd: cd,
            l2d: acc.two_d / nf,
            l3d: Accumulator::mean(acc.three_d),
            l_depth: Accumulator::mean(acc.depth),
            l_smpl: Accumulator::mean(acc.smpl),
            lambda_theta: config.prior.lambda_theta(epoch),
            loss: acc.loss / nf,
            opt_accepted: acc.accepted,
            depth_skipped: acc.skipped,
        };
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4e}"));
        log::info!(
            "epoch {epoch}: loss {:.4e} l2d {:.4e} l3d {} l_depth {} l_smpl {}",
            m.loss,
            m.l2d,
            opt(m.l3d),
            opt(m.l_depth),
            opt(m.l_smpl)
        );
        if let Some(f) = hooks.on_epoch.as_mut() {
            f(&m, &Checkpoint::new(&regressor, epoch, &config_hash, dataset_hash, config.seed))?;
        }
        metrics.push(m);
    }
    let checkpoint = Checkpoint::new(&regressor, config.epochs, &config_hash, dataset_hash, config.seed);
    Ok(TrainOutput {
        regressor,
        checkpoint,
        metrics,
    })
}

/// Metrics as CSV with a provenance comment line. Terms that were not
/// evaluated in an epoch are left empty.
pub fn metrics_csv(metrics: &[EpochMetrics], config: &TrainConfig, dataset_hash: &str) -> String {
    let mut out = format!(
        "# config_hash={} dataset_hash={} seed={} ablation={} lambda_theta0={:e}\n",
        config.hash(),
        dataset_hash,
        config.seed,
        config.ablation,
        config.prior.lambda_theta0
    );
    out.push_str("epoch,w3d,wd,l2d,l3d,l_depth,l_smpl,lambda_theta,loss,opt_accepted,depth_skipped\n");
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:e}"));
    for m in metrics {
        writeln!(
            out,
            "{},{},{},{:e},{},{},{},{:e},{:e},{},{}",
            m.epoch,
            m.w3d,
            m.wd,
            m.l2d,
            opt(m.l3d),
            opt(m.l_depth),
            opt(m.l_smpl),
            m.lambda_theta,
            m.loss,
            m.opt_accepted,
            m.depth_skipped
        )
        .unwrap();
    }
    out
}

/// Regressor outputs for a set of observations.
pub fn predict(regressor: &Regressor, data: &[ObservationSet], k: &PinholeIntrinsics) -> Result<Vec<Prediction>> {
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.chunks(256) {
        let feats: Vec<Vec<f64>> = chunk
            .iter()
            .map(|o| {
                let t: Vec<Vec2> = o.keypoints.iter().map(|p| k.to_normalized(p)).collect();
                features(&t, &o.confidence)
            })
            .collect();
        let mut inputs = DMatrix::zeros(regressor.input_dim(), chunk.len());
        for (c, f) in feats.iter().enumerate() {
            inputs.column_mut(c).copy_from_slice(f);
        }
        out.extend(regressor.forward_batch(&inputs)?.0);
    }
    Ok(out)
}
