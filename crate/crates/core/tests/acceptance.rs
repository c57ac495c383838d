//! Acceptance checks. Prints one PASS/FAIL line per criterion.
//!
//! Set `WEAKPOSE_ACCEPTANCE_SKIP_EXPERIMENTS=1` to skip the training
//! experiments (criteria 1-3) and `WEAKPOSE_ACCEPTANCE_STRICT=1` to exit
//! with a failure status when any criterion fails.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use weakpose::body::{BodyModel, PoseShapeParams};
use weakpose::camera::NormalizedCamera;
use weakpose::config::{Ablation, TrainConfig};
use weakpose::dataset::write_dataset;
use weakpose::eval::{aligned_depth_error_values, evaluate, mpjpe, pa_mpjpe, EvalReport};
use weakpose::geometry::{rodrigues, Mat3, Vec2, Vec3};
use weakpose::losses::{align_offset, l3d_proxy, l_depth, l_opt, l_smpl, mask_intersection, DepthPenalty, PriorTerms};
use weakpose::prior::{angle_penalty, fit_gmm, shape_penalty, GmmPrior, MixtureMode, PriorSchedule};
use weakpose::regressor::{Regressor, RegressorConfig};
use weakpose::render::{depth_vjp, icosphere, rasterize, Rasterization};
use weakpose::scenes::{generate_target, sample_source_poses, SceneConfig, Split, SplitData};
use weakpose::trainer::{self, initial_params, initial_regressor, metrics_csv, predict, TrainHooks, TrainOutput};

const CONFIGS: usize = 100;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn normal(r: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(r)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&d) / scale
    }
}

/// Central differences of a scalar function.
fn fd_gradient(x: &[f64], h: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + h;
            let up = f(&p);
            p[i] = x[i] - h;
            let down = f(&p);
            p[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Central differences of a vector function, as columns.
fn fd_jacobian(x: &[f64], h: f64, f: impl Fn(&[f64]) -> Vec<f64>) -> Vec<Vec<f64>> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + h;
            let up = f(&p);
            p[i] = x[i] - h;
            let down = f(&p);
            p[i] = x[i];
            up.iter().zip(&down).map(|(u, d)| (u - d) / (2.0 * h)).collect()
        })
        .collect()
}

fn random_params(model: &BodyModel, r: &mut ChaCha8Rng) -> PoseShapeParams {
    let mut p = model.zero_params();
    for (i, v) in p.pose.iter_mut().enumerate() {
        *v = if i < 3 { r.random_range(-PI..PI) } else { r.random_range(-0.7..0.7) };
    }
    for v in p.shape.iter_mut() {
        *v = r.random_range(-1.5..1.5);
    }
    p
}

fn flatten(points: &[Vec3]) -> Vec<f64> {
    points.iter().flat_map(|p| [p.x, p.y, p.z]).collect()
}

fn small_scene() -> SceneConfig {
    SceneConfig {
        n_train: 24,
        n_test: 8,
        n_source: 200,
        ..Default::default()
    }
}

// ---------------------------------------------------------------------------
// Criterion 4

fn offset_oracle() -> Verdict {
    let mut r = rng(4);
    let mut worst: f64 = 0.0;
    let mut failures = 0;
    for _ in 0..50 {
        let n = r.random_range(40..400);
        let observed: Vec<f64> = (0..n).map(|_| (r.random_range(1500.0..4000.0) * 10.0f64).round() / 10.0).collect();
        let rendered: Vec<f64> = (0..n).map(|_| r.random_range(1500.0..4000.0)).collect();
        let rendered_mask: Vec<bool> = (0..n).map(|_| r.random_bool(0.7)).collect();
        let observed_mask: Vec<bool> = (0..n).map(|_| r.random_bool(0.7)).collect();
        let pixels = mask_intersection(&rendered_mask, &observed_mask);
        if pixels.is_empty() {
            continue;
        }
        let objective = |b: f64| pixels.iter().map(|&i| (observed[i] - b - rendered[i]).abs()).sum::<f64>();
        let closed = align_offset(&observed, &rendered, &pixels).unwrap();
        let residuals: Vec<f64> = pixels.iter().map(|&i| observed[i] - rendered[i]).collect();
        let (lo, hi) = residuals.iter().fold((f64::MAX, f64::MIN), |(a, b), &x| (a.min(x), b.max(x)));
        let start = (lo * 10.0).floor() as i64;
        let end = (hi * 10.0).ceil() as i64;
        let (mut best_b, mut best) = (0.0, f64::MAX);
        for step in start..=end {
            let b = step as f64 / 10.0;
            let v = objective(b);
            if v < best {
                best = v;
                best_b = b;
            }
        }
        // Every minimiser lies between the two middle residuals.
        let mut sorted = residuals.clone();
        sorted.sort_by(f64::total_cmp);
        let m = sorted.len();
        let (mlo, mhi) = if m % 2 == 1 {
            (sorted[m / 2], sorted[m / 2])
        } else {
            (sorted[m / 2 - 1], sorted[m / 2])
        };
        let grid_gap = if best_b < mlo {
            mlo - best_b
        } else if best_b > mhi {
            best_b - mhi
        } else {
            0.0
        };
        let closed_ok = objective(closed) <= best + 1e-9 * best.max(1.0);
        worst = worst.max(grid_gap);
        if !closed_ok || grid_gap > 0.1 + 1e-9 {
            failures += 1;
        }
    }
    verdict(
        failures == 0,
        format!("50 pairs, {failures} mismatches, max grid distance to median interval {worst:.3} mm"),
    )
}

// ---------------------------------------------------------------------------
// Criterion 5

struct GradientCheck {
    name: &'static str,
    tol: f64,
    worst: f64,
    configs: usize,
}

fn gradient_suite(model: &BodyModel) -> Verdict {
    let start = Instant::now();
    let scene = small_scene();
    let k = scene.intrinsics;
    let data = generate_target(model, &scene, Split::Train, 5).unwrap();
    let poses: Vec<Vec<f64>> = sample_source_poses(model, &scene, 400, 5)
        .iter()
        .map(|p| p.to_params().body_pose().to_vec())
        .collect();
    let gmm = fit_gmm(&poses, 4, 5).unwrap().0;
    let pd = model.pose_dim();
    let mut checks = vec![
        check_l2d(model, &data, &k),
        check_l3d(model, &data),
        check_lsmpl(model),
        check_gmm(&gmm, &poses),
        check_shape(model),
        check_angle(model),
        check_regressor(model),
        check_jacobians(model, pd, true),
        check_jacobians(model, pd, false),
    ];
    checks.push(check_depth(model, &data, &k));
    let elapsed = start.elapsed();
    let pass = checks.iter().all(|c| c.worst <= c.tol && c.configs >= CONFIGS) && elapsed <= Duration::from_secs(300);
    let detail = checks
        .iter()
        .map(|c| format!("{} {:.1e}/{:.0e} (n={})", c.name, c.worst, c.tol, c.configs))
        .collect::<Vec<_>>()
        .join(", ");
    verdict(pass, format!("{detail}; {:.1}s", elapsed.as_secs_f64()))
}

fn zero_prior() -> PriorTerms<'static> {
    PriorTerms {
        gmm: None,
        schedule: PriorSchedule {
            lambda_theta0: 0.0,
            lambda_beta: 0.0,
            lambda_alpha: 0.0,
            ..Default::default()
        },
        epoch: 0,
        mode: MixtureMode::MinComponent,
    }
}

fn check_l2d(model: &BodyModel, data: &SplitData, k: &weakpose::camera::PinholeIntrinsics) -> GradientCheck {
    let mut r = rng(51);
    let pd = model.pose_dim();
    let prior = zero_prior();
    let mut worst: f64 = 0.0;
    for c in 0..CONFIGS {
        let obs = &data.observations[c % data.len()];
        let truth = &data.truth[c % data.len()];
        let target: Vec<Vec2> = obs.keypoints.iter().map(|p| k.to_normalized(p)).collect();
        let mut params = truth.params.clone();
        for v in params.pose.iter_mut().chain(params.shape.iter_mut()) {
            *v += 0.2 * normal(&mut r);
        }
        let cam = NormalizedCamera::from_placement(&truth.placement, k);
        let mut x = params.to_flat();
        x.extend([cam.scale * r.random_range(0.8..1.2), cam.translation[0] + 0.1 * normal(&mut r), cam.translation[1] + 0.1 * normal(&mut r)]);
        let eval = |x: &[f64]| {
            let n = x.len();
            let p = PoseShapeParams::from_flat(&x[..n - 3], pd);
            let cam = NormalizedCamera {
                scale: x[n - 3],
                translation: [x[n - 2], x[n - 1]],
            };
            l_opt(model, &p, &cam, &target, &obs.confidence, &prior, None).unwrap()
        };
        let obj = eval(&x);
        let mut analytic = obj.grad_params.to_flat();
        analytic.extend(obj.grad_camera);
        let fd = fd_gradient(&x, 1e-6, |x| eval(x).total);
        worst = worst.max(rel_err(&analytic, &fd));
    }
    GradientCheck { name: "L_2D", tol: 1e-4, worst, configs: CONFIGS }
}

fn check_l3d(model: &BodyModel, data: &SplitData) -> GradientCheck {
    let mut r = rng(52);
    let pd = model.pose_dim();
    let mut worst: f64 = 0.0;
    let mut configs = 0;
    for c in 0..CONFIGS * 2 {
        if configs == CONFIGS {
            break;
        }
        let obs = &data.observations[c % data.len()];
        let root = trainer::ROOT_JOINT;
        if obs.proxies[root].is_none() || !obs.visibility[root] {
            continue;
        }
        let proxies: Vec<Option<Vec3>> = obs.proxies.iter().map(|p| p.map(|v| v * 1e-3)).collect();
        let params = random_params(model, &mut r);
        let value = |x: &[f64]| {
            let kp: Vec<Vec3> = model.keypoints(&PoseShapeParams::from_flat(x, pd)).unwrap().iter().map(|v| v * 1e-3).collect();
            l3d_proxy(&proxies, &kp, &obs.visibility, root).unwrap().unwrap().0
        };
        let state = model.evaluate(&params).unwrap();
        let kp: Vec<Vec3> = model.keypoints_state(&state).iter().map(|v| v * 1e-3).collect();
        let grads: Vec<Vec3> = l3d_proxy(&proxies, &kp, &obs.visibility, root).unwrap().unwrap().1.iter().map(|g| g * 1e-3).collect();
        let (gp, gs) = model.keypoints_vjp(&state, &grads);
        let analytic: Vec<f64> = gp.into_iter().chain(gs).collect();
        let fd = fd_gradient(&params.to_flat(), 1e-6, value);
        worst = worst.max(rel_err(&analytic, &fd));
        configs += 1;
    }
    GradientCheck { name: "L_3D", tol: 1e-4, worst, configs }
}

fn check_lsmpl(model: &BodyModel) -> GradientCheck {
    let mut r = rng(53);
    let mut worst: f64 = 0.0;
    for _ in 0..CONFIGS {
        let a = random_params(model, &mut r).to_flat();
        let b = random_params(model, &mut r).to_flat();
        let analytic = l_smpl(&a, &b).unwrap().1;
        let fd = fd_gradient(&a, 1e-6, |x| l_smpl(x, &b).unwrap().0);
        worst = worst.max(rel_err(&analytic, &fd));
    }
    GradientCheck { name: "L_SMPL", tol: 1e-4, worst, configs: CONFIGS }
}

fn check_gmm(gmm: &GmmPrior, poses: &[Vec<f64>]) -> GradientCheck {
    let mut r = rng(54);
    let mut worst: f64 = 0.0;
    for c in 0..CONFIGS {
        let x: Vec<f64> = poses[c].iter().map(|v| v + 0.1 * normal(&mut r)).collect();
        for mode in [MixtureMode::MinComponent, MixtureMode::Exact] {
            let analytic = gmm.penalty(&x, mode).unwrap().1;
            let fd = fd_gradient(&x, 1e-6, |x| gmm.penalty(x, mode).unwrap().0);
            worst = worst.max(rel_err(&analytic, &fd));
        }
    }
    GradientCheck { name: "L_theta", tol: 1e-4, worst, configs: CONFIGS }
}

fn check_shape(model: &BodyModel) -> GradientCheck {
    let mut r = rng(55);
    let mut worst: f64 = 0.0;
    for _ in 0..CONFIGS {
        let beta = random_params(model, &mut r).shape;
        let analytic = shape_penalty(&beta).1;
        let fd = fd_gradient(&beta, 1e-6, |x| shape_penalty(x).0);
        worst = worst.max(rel_err(&analytic, &fd));
    }
    GradientCheck { name: "L_beta", tol: 1e-4, worst, configs: CONFIGS }
}

fn check_angle(model: &BodyModel) -> GradientCheck {
    let mut r = rng(56);
    let mut worst: f64 = 0.0;
    for _ in 0..CONFIGS {
        let pose = random_params(model, &mut r).pose;
        let analytic = angle_penalty(&pose, model.hinges()).1;
        let fd = fd_gradient(&pose, 1e-6, |x| angle_penalty(x, model.hinges()).0);
        worst = worst.max(rel_err(&analytic, &fd));
    }
    GradientCheck { name: "L_alpha", tol: 1e-4, worst, configs: CONFIGS }
}

fn check_regressor(model: &BodyModel) -> GradientCheck {
    let mut r = rng(57);
    let config = RegressorConfig {
        hidden: vec![12],
        output_gain: 1.0,
        ..Default::default()
    };
    let nk = model.num_keypoints();
    let pd = model.pose_dim();
    let mut worst: f64 = 0.0;
    for c in 0..CONFIGS {
        let net = Regressor::init(&config, nk, &initial_params(model), c as u64).unwrap();
        let batch = 3;
        let inputs = nalgebra::DMatrix::from_fn(3 * nk, batch, |_, _| normal(&mut r));
        let out_dim = Regressor::output_dim(model.num_joints(), model.shape_dims());
        let a: Vec<f64> = (0..out_dim - 3).map(|_| normal(&mut r)).collect();
        let cam_w = [normal(&mut r), normal(&mut r), normal(&mut r)];
        let loss = |net: &Regressor| {
            let (preds, _) = net.forward_batch(&inputs).unwrap();
            preds
                .iter()
                .map(|p| {
                    let flat = p.params.to_flat();
                    let lin: f64 = flat.iter().zip(&a).map(|(x, w)| w * x + 0.5 * x * x).sum();
                    lin + cam_w[0] * p.camera.scale + cam_w[1] * p.camera.translation[0] + cam_w[2] * p.camera.translation[1]
                })
                .sum::<f64>()
        };
        let (preds, cache) = net.forward_batch(&inputs).unwrap();
        let mut grad_out = nalgebra::DMatrix::zeros(out_dim, batch);
        for (col, p) in preds.iter().enumerate() {
            let g: Vec<f64> = p.params.to_flat().iter().zip(&a).map(|(x, w)| w + x).collect();
            let encoded = net.encode_gradient(&cache, col, &PoseShapeParams::from_flat(&g, pd), &cam_w);
            grad_out.set_column(col, &nalgebra::DVector::from_vec(encoded));
        }
        let analytic = net.backward(&cache, &grad_out);
        let flat = net.flat_params();
        let fd = fd_gradient(&flat, 1e-6, |x| {
            let mut n = net.clone();
            n.set_flat_params(x).unwrap();
            loss(&n)
        });
        worst = worst.max(rel_err(&analytic, &fd));
    }
    GradientCheck { name: "regressor", tol: 1e-4, worst, configs: CONFIGS }
}

fn check_jacobians(model: &BodyModel, pd: usize, keypoints: bool) -> GradientCheck {
    let mut r = rng(if keypoints { 58 } else { 59 });
    let mut worst: f64 = 0.0;
    for _ in 0..CONFIGS {
        let params = random_params(model, &mut r);
        let (jp, js) = if keypoints {
            model.keypoints_jacobian(&params).unwrap()
        } else {
            model.vertices_jacobian(&params).unwrap()
        };
        let cols = fd_jacobian(&params.to_flat(), 1e-5, |x| {
            let p = PoseShapeParams::from_flat(x, pd);
            flatten(&if keypoints { model.keypoints(&p).unwrap() } else { model.skin(&p).unwrap() })
        });
        let np = model.shape_dims();
        let rows = cols[0].len();
        let mut analytic = Vec::with_capacity(rows * (pd + np));
        let mut numeric = Vec::with_capacity(rows * (pd + np));
        for row in 0..rows {
            for c in 0..pd {
                analytic.push(jp[row * pd + c]);
                numeric.push(cols[c][row]);
            }
            for c in 0..np {
                analytic.push(js[row * np + c]);
                numeric.push(cols[pd + c][row]);
            }
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    GradientCheck {
        name: if keypoints { "keypoint jacobian" } else { "vertex jacobian" },
        tol: 1e-4,
        worst,
        configs: CONFIGS,
    }
}

fn check_depth(model: &BodyModel, data: &SplitData, k: &weakpose::camera::PinholeIntrinsics) -> GradientCheck {
    let mut r = rng(60);
    let pd = model.pose_dim();
    let tris = &model.template().triangles;
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let mut configs = 0;
    let mut attempts = 0;
    while configs < CONFIGS && attempts < CONFIGS * 3 {
        attempts += 1;
        let i = attempts % data.len();
        let obs = &data.observations[i];
        let truth = &data.truth[i];
        let mut params = truth.params.clone();
        for v in params.pose.iter_mut().chain(params.shape.iter_mut()) {
            *v += 0.1 * normal(&mut r);
        }
        let x = params.to_flat();
        let mut u: Vec<f64> = x.iter().map(|_| normal(&mut r)).collect();
        let un = norm(&u);
        u.iter_mut().for_each(|v| *v /= un);
        let render = |x: &[f64]| -> (Vec<Vec3>, Rasterization) {
            let verts: Vec<Vec3> = model.skin(&PoseShapeParams::from_flat(x, pd)).unwrap().iter().map(|v| v + truth.placement).collect();
            let raster = rasterize(&verts, tris, k);
            (verts, raster)
        };
        let shifted = |t: f64| -> Vec<f64> { x.iter().zip(&u).map(|(a, b)| a + t * b).collect() };
        let (verts, base) = render(&x);
        let (_, up) = render(&shifted(h));
        let (_, down) = render(&shifted(-h));
        let valid: Vec<bool> = obs.body_mask.iter().zip(&obs.depth.mask).map(|(a, b)| *a && *b).collect();
        let pixels: Vec<usize> = mask_intersection(&base.mask(), &valid)
            .into_iter()
            .filter(|&p| base.triangle_at(p) == up.triangle_at(p) && base.triangle_at(p) == down.triangle_at(p))
            .collect();
        if pixels.is_empty() {
            continue;
        }
        let b0 = align_offset(&obs.depth.depth, &base.depth, &pixels).unwrap();
        let loss = |raster: &Rasterization| l_depth(&obs.depth.depth, &raster.depth, b0, &pixels, 1e-3, DepthPenalty::L2).unwrap();
        let (_, pixel_grads) = loss(&base);
        let vertex_grads = depth_vjp(&base, &verts, tris, k, &pixel_grads);
        let sparse: Vec<(usize, Vec3)> = vertex_grads.into_iter().enumerate().filter(|(_, g)| *g != Vec3::zeros()).collect();
        let state = model.evaluate(&params).unwrap();
        let (gp, gs) = model.vertices_vjp(&state, &sparse);
        let analytic: f64 = gp.iter().chain(&gs).zip(&u).map(|(g, d)| g * d).sum();
        let fd = (loss(&up).0 - loss(&down).0) / (2.0 * h);
        worst = worst.max(rel_err(&[analytic], &[fd]));
        configs += 1;
    }
    GradientCheck { name: "L_D", tol: 1e-3, worst, configs }
}

// ---------------------------------------------------------------------------
// Criterion 6

fn geometry_invariants(model: &BodyModel) -> Verdict {
    let mut r = rng(6);
    let mut notes = Vec::new();
    let mut pass = true;

    // Rotation matrices, including tiny and near-half-turn angles.
    let mut worst_orth: f64 = 0.0;
    let mut worst_det: f64 = 0.0;
    for i in 0..1000 {
        let axis = Vec3::new(normal(&mut r), normal(&mut r), normal(&mut r)).normalize();
        let angle = match i % 4 {
            0 => r.random_range(0.0..1e-6),
            1 => PI - r.random_range(0.0..1e-6),
            _ => r.random_range(0.0..2.0 * PI),
        };
        let rot = rodrigues(&(axis * angle));
        let e = rot.transpose() * rot - Mat3::identity();
        worst_orth = worst_orth.max(e.amax());
        worst_det = worst_det.max((rot.determinant() - 1.0).abs());
    }
    pass &= worst_orth < 1e-10 && worst_det <= 1e-10;
    notes.push(format!("rotation orth {worst_orth:.1e} det {worst_det:.1e}"));

    // Zero pose leaves the shaped template unchanged.
    let mut worst_rest: f64 = 0.0;
    for _ in 0..50 {
        let mut p = model.zero_params();
        p.shape = random_params(model, &mut r).shape;
        let skinned = model.skin(&p).unwrap();
        let shaped = model.shaped_vertices(&p.shape).unwrap();
        for (a, b) in skinned.iter().zip(&shaped) {
            worst_rest = worst_rest.max((a - b).amax());
        }
    }
    pass &= worst_rest <= 1e-9;
    notes.push(format!("rest skinning {worst_rest:.1e} mm"));

    // Pre-rotating the root rotates every posed joint about the rest root.
    let mut worst_fk: f64 = 0.0;
    for _ in 0..100 {
        let p = random_params(model, &mut r);
        let q = rodrigues(&Vec3::new(normal(&mut r), normal(&mut r), normal(&mut r)));
        let root = rodrigues(&p.root());
        let mut rotated = p.clone();
        rotated.set_joint(0, &weakpose::geometry::log_rotation(&(q * root)));
        // The rotation actually applied, free of log/exp round-off.
        let applied = rodrigues(&rotated.root()) * root.transpose();
        let a = model.evaluate(&p).unwrap();
        let b = model.evaluate(&rotated).unwrap();
        let center = a.rest_joints[0];
        for (ja, jb) in a.posed.joints.iter().zip(&b.posed.joints) {
            let expected = applied * (ja - center) + center;
            worst_fk = worst_fk.max((jb - expected).amax());
        }
    }
    pass &= worst_fk <= 1e-9;
    notes.push(format!("root equivariance {worst_fk:.1e} mm"));

    // Identical inputs give identical frames regardless of the thread count.
    let scene = small_scene();
    let k = scene.intrinsics;
    let data = generate_target(model, &scene, Split::Test, 6).unwrap();
    let tris = &model.template().triangles;
    let mut deterministic = true;
    let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let multi = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
    for t in &data.truth {
        let verts: Vec<Vec3> = model.skin(&t.params).unwrap().iter().map(|v| v + t.placement).collect();
        let a = single.install(|| rasterize(&verts, tris, &k));
        let b = multi.install(|| rasterize(&verts, tris, &k));
        let c = rasterize(&verts, tris, &k);
        for other in [&b, &c] {
            deterministic &= a.depth.iter().zip(&other.depth).all(|(x, y)| x.to_bits() == y.to_bits());
            deterministic &= (0..a.depth.len()).all(|p| a.triangle_at(p) == other.triangle_at(p));
        }
    }
    pass &= deterministic;
    notes.push(format!("raster determinism {}", if deterministic { "ok" } else { "broken" }));

    // Depth of two surfaces rendered together is the per-pixel minimum.
    let mut composition = true;
    for (i, t) in data.truth.iter().enumerate() {
        let body: Vec<Vec3> = model.skin(&t.params).unwrap().iter().map(|v| v + t.placement).collect();
        let center = t.placement + Vec3::new(r.random_range(-300.0..300.0), r.random_range(-300.0..300.0), r.random_range(-400.0..400.0));
        let (sphere, sphere_tris) = icosphere(&center, r.random_range(150.0..400.0), 2 + i % 2);
        let a = rasterize(&body, tris, &k);
        let b = rasterize(&sphere, &sphere_tris, &k);
        let mut verts = body.clone();
        verts.extend(&sphere);
        let offset = body.len();
        let mut all = tris.clone();
        all.extend(sphere_tris.iter().map(|t| [t[0] + offset, t[1] + offset, t[2] + offset]));
        let both = rasterize(&verts, &all, &k);
        for p in 0..both.depth.len() {
            let expected = match (a.covered(p), b.covered(p)) {
                (true, true) => Some(a.depth[p].min(b.depth[p])),
                (true, false) => Some(a.depth[p]),
                (false, true) => Some(b.depth[p]),
                (false, false) => None,
            };
            composition &= match expected {
                Some(d) => both.covered(p) && both.depth[p].to_bits() == d.to_bits(),
                None => !both.covered(p),
            };
        }
    }
    pass &= composition;
    notes.push(format!("z-buffer min {}", if composition { "ok" } else { "broken" }));
    verdict(pass, notes.join(", "))
}

// ---------------------------------------------------------------------------
// Criterion 7

fn random_joints(r: &mut ChaCha8Rng, n: usize) -> Vec<Vec3> {
    (0..n)
        .map(|_| Vec3::new(r.random_range(-800.0..800.0), r.random_range(-800.0..800.0), r.random_range(-800.0..800.0)))
        .collect()
}

fn metric_invariants() -> Verdict {
    let mut r = rng(7);
    let mut ordering_violations = 0;
    for i in 0..100 {
        let gt = random_joints(&mut r, 16);
        let pred: Vec<Vec3> = if i % 5 == 0 {
            random_joints(&mut r, 16)
        } else {
            let sigma = r.random_range(5.0..200.0);
            gt.iter()
                .map(|p| p + Vec3::new(normal(&mut r), normal(&mut r), normal(&mut r)) * sigma)
                .collect()
        };
        if pa_mpjpe(&pred, &gt).unwrap() > mpjpe(&pred, &gt).unwrap() + 1e-9 {
            ordering_violations += 1;
        }
    }
    let mut worst_similarity: f64 = 0.0;
    for _ in 0..100 {
        let gt = random_joints(&mut r, 16);
        let q = rodrigues(&Vec3::new(normal(&mut r), normal(&mut r), normal(&mut r)));
        let s = r.random_range(0.3..3.0);
        let t = Vec3::new(normal(&mut r), normal(&mut r), normal(&mut r)) * 1000.0;
        let pred: Vec<Vec3> = gt.iter().map(|p| q * p * s + t).collect();
        worst_similarity = worst_similarity.max(pa_mpjpe(&pred, &gt).unwrap());
    }
    let mut worst_shift: f64 = 0.0;
    for _ in 0..100 {
        let n = r.random_range(100..2000);
        let observed: Vec<f64> = (0..n).map(|_| r.random_range(1000.0..5000.0)).collect();
        let rendered: Vec<f64> = (0..n).map(|_| r.random_range(1000.0..5000.0)).collect();
        let om: Vec<bool> = (0..n).map(|_| r.random_bool(0.8)).collect();
        let rm: Vec<bool> = (0..n).map(|_| r.random_bool(0.8)).collect();
        let shift = r.random_range(-1000.0..1000.0);
        let moved: Vec<f64> = observed.iter().map(|d| d + shift).collect();
        let a = aligned_depth_error_values(&observed, &om, &rendered, &rm).unwrap();
        let b = aligned_depth_error_values(&moved, &om, &rendered, &rm).unwrap();
        worst_shift = worst_shift.max((a - b).abs());
    }
    let pass = ordering_violations == 0 && worst_similarity <= 1e-9 && worst_shift <= 1e-9;
    verdict(
        pass,
        format!(
            "pa>mpjpe in {ordering_violations}/100, pa under similarity {worst_similarity:.1e} mm, depth shift drift {worst_shift:.1e} mm"
        ),
    )
}

// ---------------------------------------------------------------------------
// Criteria 8-10

fn short_config(ablation: Ablation) -> TrainConfig {
    let mut c = TrainConfig::for_ablation(ablation);
    c.epochs = 6;
    c.stage2_epoch = 3;
    c.batch_size = 8;
    c.regressor.hidden = vec![32];
    c.fit.max_iter = 5;
    c
}

fn short_run(model: &BodyModel, config: &TrainConfig) -> TrainOutput {
    let scene = small_scene();
    let data = generate_target(model, &scene, Split::Train, 8).unwrap();
    let poses: Vec<Vec<f64>> = sample_source_poses(model, &scene, scene.n_source, 8)
        .iter()
        .map(|p| p.to_params().body_pose().to_vec())
        .collect();
    let prior = fit_gmm(&poses, 2, 8).unwrap().0;
    trainer::train(model, config, &data.observations, &scene.intrinsics, Some(&prior), "acceptance", TrainHooks::default()).unwrap()
}

fn csv_rows(csv: &str) -> Vec<Vec<String>> {
    csv.lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').map(String::from).collect())
        .collect()
}

fn stage_schedule(config: &TrainConfig, csv: &str) -> Verdict {
    let rows = csv_rows(csv);
    let mut bad = Vec::new();
    for row in &rows {
        let epoch: usize = row[0].parse().unwrap();
        let w3d: f64 = row[1].parse().unwrap();
        let wd: f64 = row[2].parse().unwrap();
        let stage_one = epoch <= config.stage2_epoch;
        let expected = if stage_one { (1.0, 0.0) } else { (0.0, 1.0) };
        let depth_logged = !row[5].is_empty();
        if (w3d, wd) != expected || depth_logged == stage_one {
            bad.push(epoch);
        }
    }
    verdict(
        rows.len() == config.epochs && bad.is_empty(),
        format!("{} epochs, stage II after epoch {}, mismatched epochs {bad:?}", rows.len(), config.stage2_epoch),
    )
}

fn prior_decay(config: &TrainConfig, csv: &str) -> Verdict {
    let mut worst: f64 = 0.0;
    let rows = csv_rows(csv);
    for row in &rows {
        let epoch: i32 = row[0].parse().unwrap();
        let logged: f64 = row[7].parse().unwrap();
        let expected = config.prior.lambda_theta0 * config.prior.decay.powi(epoch);
        worst = worst.max((logged - expected).abs() / expected.abs().max(f64::MIN_POSITIVE));
    }
    verdict(
        !rows.is_empty() && worst <= 1e-12,
        format!("{} epochs, max relative deviation {worst:.1e}", rows.len()),
    )
}

fn determinism(model: &BodyModel, config: &TrainConfig, first: &TrainOutput) -> Verdict {
    let second = short_run(model, config);
    let same_checkpoint = serde_json::to_string(&first.checkpoint).unwrap() == serde_json::to_string(&second.checkpoint).unwrap();
    let same_metrics = metrics_csv(&first.metrics, config, "acceptance") == metrics_csv(&second.metrics, config, "acceptance");
    let scene = SceneConfig {
        n_train: 6,
        n_test: 3,
        n_source: 50,
        ..Default::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let read = |name: &str| {
        let path = dir.path().join(name);
        write_dataset(model, &scene, 10, &path).unwrap();
        std::fs::read(path.join("manifest.json")).unwrap()
    };
    let same_manifest = read("a") == read("b");
    verdict(
        same_checkpoint && same_metrics && same_manifest,
        format!("checkpoint {same_checkpoint}, metrics {same_metrics}, manifest {same_manifest}"),
    )
}

// ---------------------------------------------------------------------------
// Criteria 1-3

struct SeedResult {
    seed: u64,
    baseline_pa: f64,
    reports: BTreeMap<&'static str, EvalReport>,
    full_runtime: Duration,
}

fn run_seed(model: &BodyModel, seed: u64) -> SeedResult {
    let scene = SceneConfig::default();
    let k = scene.intrinsics;
    let started = Instant::now();
    let train_set = generate_target(model, &scene, Split::Train, seed).unwrap();
    let test_set = generate_target(model, &scene, Split::Test, seed).unwrap();
    let poses: Vec<Vec<f64>> = sample_source_poses(model, &scene, scene.n_source, seed)
        .iter()
        .map(|p| p.to_params().body_pose().to_vec())
        .collect();
    let base_config = TrainConfig {
        seed,
        ..Default::default()
    };
    let gmm = fit_gmm(&poses, base_config.prior_components, seed).unwrap().0;
    let setup = started.elapsed();
    let eval = |reg: &Regressor| {
        let preds = predict(reg, &test_set.observations, &k).unwrap();
        evaluate(model, &preds, &test_set.observations, &test_set.truth, &k).unwrap()
    };
    let baseline_pa = eval(&initial_regressor(model, &base_config).unwrap()).mean("pa_mpjpe");
    let mut reports = BTreeMap::new();
    let mut full_runtime = Duration::ZERO;
    for ablation in Ablation::ALL {
        let t = Instant::now();
        let config = base_config.clone().with_ablation(ablation);
        let prior = (ablation != Ablation::NoPrior).then_some(&gmm);
        let out = trainer::train(model, &config, &train_set.observations, &k, prior, "acceptance", TrainHooks::default()).unwrap();
        let report = eval(&out.regressor);
        let elapsed = t.elapsed();
        if ablation == Ablation::Full {
            full_runtime = setup + elapsed;
        }
        eprintln!(
            "  seed {seed} {:<12} pa_mpjpe {:7.2}  aligned_depth_error {:7.2}  occluded_joint_error {:7.2}  ({:.0}s)",
            ablation.to_string(),
            report.mean("pa_mpjpe"),
            report.mean("aligned_depth_error"),
            report.mean("occluded_joint_error"),
            elapsed.as_secs_f64()
        );
        reports.insert(ablation_name(ablation), report);
    }
    SeedResult {
        seed,
        baseline_pa,
        reports,
        full_runtime,
    }
}

fn ablation_name(a: Ablation) -> &'static str {
    match a {
        Ablation::DepthProxy => "3D-dp",
        Ablation::DepthProxyVisible => "3D-dp-vis",
        Ablation::Full => "3D-dp-vis-D",
        Ablation::NoPrior => "noPrior",
        Ablation::TwoDDepth => "2D-D",
    }
}

fn recovery(result: &SeedResult) -> Verdict {
    let full = result.reports["3D-dp-vis-D"].mean("pa_mpjpe");
    let two_d = result.reports["2D-D"].mean("pa_mpjpe");
    let limit = Duration::from_secs(30 * 60);
    let pass = full <= 0.5 * result.baseline_pa && full < two_d && result.full_runtime <= limit;
    verdict(
        pass,
        format!(
            "seed {}: PA-MPJPE {full:.2} vs untrained {:.2} (limit {:.2}) and 2D-D {two_d:.2}; runtime {:.0}s",
            result.seed,
            result.baseline_pa,
            0.5 * result.baseline_pa,
            result.full_runtime.as_secs_f64()
        ),
    )
}

fn ordering(results: &[SeedResult]) -> Verdict {
    let mut passing = 0;
    let mut notes = Vec::new();
    for res in results {
        let d = |name: &str| res.reports[name].mean("aligned_depth_error");
        let full = d("3D-dp-vis-D");
        let best = res.reports.values().all(|r| full <= r.mean("aligned_depth_error"));
        let ok = full <= d("3D-dp-vis") && d("3D-dp-vis") <= d("3D-dp") && best;
        passing += ok as usize;
        notes.push(format!(
            "seed {} {}: {:.2} / {:.2} / {:.2}",
            res.seed,
            if ok { "ok" } else { "no" },
            full,
            d("3D-dp-vis"),
            d("3D-dp")
        ));
    }
    verdict(
        passing >= 3,
        format!("{passing}/{} seeds ordered (full / dp-vis / dp): {}", results.len(), notes.join("; ")),
    )
}

fn filtering(results: &[SeedResult]) -> Verdict {
    let pooled = |name: &str| {
        let errors: Vec<f64> = results
            .iter()
            .flat_map(|r| r.reports[name].samples.iter().flat_map(|s| s.occluded_errors.iter().copied()))
            .collect();
        (errors.iter().sum::<f64>() / errors.len().max(1) as f64, errors.len())
    };
    let (vis, n) = pooled("3D-dp-vis");
    let (dp, _) = pooled("3D-dp");
    let reduction = 1.0 - vis / dp;
    let per_seed: Vec<String> = results
        .iter()
        .map(|r| {
            format!(
                "seed {} {:.1}/{:.1}",
                r.seed,
                r.reports["3D-dp-vis"].mean("occluded_joint_error"),
                r.reports["3D-dp"].mean("occluded_joint_error")
            )
        })
        .collect();
    verdict(
        reduction >= 0.25,
        format!(
            "{n} occluded joints: 3D-dp-vis {vis:.2} vs 3D-dp {dp:.2} mm, reduction {:.1}% (need 25%); {}",
            100.0 * reduction,
            per_seed.join(", ")
        ),
    )
}

// ---------------------------------------------------------------------------

fn main() {
    let started = Instant::now();
    let model = BodyModel::procedural();
    let mut results: Vec<(usize, &str, Option<Verdict>)> = Vec::new();
    let mut emit = |id: usize, name: &'static str, v: Option<Verdict>| {
        match &v {
            Some(v) => println!("criterion {id:>2} {} {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail),
            None => println!("criterion {id:>2} SKIP {name}"),
        }
        results.push((id, name, v));
    };

    emit(4, "closed-form depth offset", Some(offset_oracle()));
    emit(5, "gradient suite", Some(gradient_suite(&model)));
    emit(6, "geometry invariants", Some(geometry_invariants(&model)));
    emit(7, "metric invariants", Some(metric_invariants()));

    let config = short_config(Ablation::Full);
    let run = short_run(&model, &config);
    let csv = metrics_csv(&run.metrics, &config, "acceptance");
    emit(8, "stage schedule", Some(stage_schedule(&config, &csv)));
    emit(9, "prior decay", Some(prior_decay(&config, &csv)));
    emit(10, "determinism", Some(determinism(&model, &config, &run)));

    if std::env::var_os("WEAKPOSE_ACCEPTANCE_SKIP_EXPERIMENTS").is_some() {
        emit(1, "weak-supervision recovery", None);
        emit(2, "ablation ordering", None);
        emit(3, "visibility filtering", None);
    } else {
        let mut seeds = Vec::new();
        for seed in 0..4 {
            seeds.push(run_seed(&model, seed));
            if seed == 0 {
                emit(1, "weak-supervision recovery", Some(recovery(&seeds[0])));
            }
        }
        emit(2, "ablation ordering", Some(ordering(&seeds)));
        emit(3, "visibility filtering", Some(filtering(&seeds)));
    }

    let passed = results.iter().filter(|(_, _, v)| v.as_ref().is_some_and(|v| v.pass)).count();
    let failed: Vec<usize> = results
        .iter()
        .filter(|(_, _, v)| v.as_ref().is_some_and(|v| !v.pass))
        .map(|(id, _, _)| *id)
        .collect();
    println!(
        "acceptance: {passed}/{} passed, failed {failed:?}, {:.0}s",
        results.len(),
        started.elapsed().as_secs_f64()
    );
    if !failed.is_empty() && std::env::var_os("WEAKPOSE_ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}
