use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use weakpose::body::{BodyModel, PoseShapeParams};
use weakpose::camera::{NormalizedCamera, PinholeIntrinsics};
use weakpose::config::{Ablation, TrainConfig};
use weakpose::dataset::{self, Manifest};
use weakpose::error::ErrorClass;
use weakpose::eval::{self, report_csv};
use weakpose::fitting::optimize;
use weakpose::geometry::{Vec2, Vec3};
use weakpose::imageio::{encode_mask_pgm, encode_obj, encode_pfm, encode_pgm16, write_bytes};
use weakpose::losses::PriorTerms;
use weakpose::prior::{fit_gmm, GmmPrior};
use weakpose::probe;
use weakpose::regressor::{Checkpoint, Prediction, Regressor};
use weakpose::render::rasterize;
use weakpose::scenes::{SceneConfig, Split};
use weakpose::trainer::{self, TrainHooks};
use weakpose::{Error, Result};

const THREADS_ENV: &str = "WEAKPOSE_THREADS";

#[derive(Parser)]
#[command(name = "weakpose", version, about = "Weakly supervised body fitting from keypoints and depth")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Configuration file (TOML or JSON): scene settings for `synth`, training settings otherwise.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// One of 3D-dp, 3D-dp-vis, 3D-dp-vis-D, noPrior, 2D-D.
    #[arg(long, global = true)]
    ablation: Option<String>,
    /// Output directory (or file for commands that write a single file).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long = "stage2-epoch", global = true)]
    stage2_epoch: Option<usize>,
}

#[derive(Args)]
struct DatasetArg {
    /// Dataset directory written by `synth`.
    #[arg(long)]
    dataset: PathBuf,
}

#[derive(Args)]
struct SampleArgs {
    #[command(flatten)]
    data: DatasetArg,
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// train or test.
    #[arg(long, default_value = "test")]
    split: String,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth {
        #[arg(long)]
        n_train: Option<usize>,
        #[arg(long)]
        n_test: Option<usize>,
        #[arg(long)]
        n_source: Option<usize>,
    },
    /// Fit the pose prior to a dataset's source poses.
    FitPrior {
        #[command(flatten)]
        data: DatasetArg,
        #[arg(long)]
        components: Option<usize>,
    },
    /// Train the regressor.
    Train {
        /// Dataset directory; falls back to the config's `dataset`.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Prior file; fitted from the dataset when absent.
        #[arg(long)]
        prior: Option<PathBuf>,
    },
    /// Evaluate a checkpoint against the hidden ground truth.
    Eval {
        #[command(flatten)]
        data: DatasetArg,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Optimize a single sample and dump the parameter trace.
    FitOne {
        #[command(flatten)]
        sample: SampleArgs,
        /// Start from this regressor's prediction instead of the rest pose.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        prior: Option<PathBuf>,
        /// Epoch used for the pose-prior weight.
        #[arg(long, default_value_t = 0)]
        epoch: usize,
    },
    /// Render the predicted depth of one sample.
    Render {
        #[command(flatten)]
        sample: SampleArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Write a mesh as OBJ (mm, y-up); the rest template without a checkpoint.
    ExportMesh {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Histograms of depth-proxy errors for visible and occluded joints.
    BiasProbe {
        #[command(flatten)]
        data: DatasetArg,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value_t = 10.0)]
        bin_width: f64,
        #[arg(long, default_value_t = 300.0)]
        max: f64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = configure_threads().and_then(|_| run(cli));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.class()))
        }
    }
}

fn exit_code(class: ErrorClass) -> u8 {
    match class {
        ErrorClass::Config => 2,
        ErrorClass::Data => 3,
        ErrorClass::Numeric => 4,
        ErrorClass::Provenance => 5,
    }
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else { return Ok(()) };
    let n: usize = v
        .parse()
        .map_err(|_| Error::Config(format!("{THREADS_ENV} must be a thread count, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(e.to_string()))
}

fn run(cli: Cli) -> Result<()> {
    let g = cli.global;
    let model = BodyModel::procedural();
    match cli.command {
        Command::Synth { n_train, n_test, n_source } => synth(&g, &model, n_train, n_test, n_source),
        Command::FitPrior { data, components } => fit_prior(&g, &data.dataset, components),
        Command::Train { dataset, prior } => train(&g, &model, dataset, prior),
        Command::Eval { data, checkpoint, split } => evaluate(&g, &model, &data.dataset, &checkpoint, &split),
        Command::FitOne { sample, checkpoint, prior, epoch } => fit_one(&g, &model, &sample, checkpoint, prior, epoch),
        Command::Render { sample, checkpoint } => render(&g, &model, &sample, &checkpoint),
        Command::ExportMesh { checkpoint, dataset, index, split } => export_mesh(&g, &model, checkpoint, dataset, index, &split),
        Command::BiasProbe { data, split, bin_width, max } => bias_probe(&g, &data.dataset, &split, bin_width, max),
    }
}

fn out_dir(g: &Global) -> Result<&Path> {
    g.out.as_deref().ok_or_else(|| Error::Config("--out is required".into()))
}

/// `--out` as a file: used directly when it has `ext`, otherwise `default` inside it.
fn out_file(g: &Global, ext: &str, default: &str) -> Result<PathBuf> {
    let out = out_dir(g)?;
    Ok(if out.extension().is_some_and(|e| e == ext) {
        out.to_path_buf()
    } else {
        out.join(default)
    })
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        _ => Err(Error::Config(format!("split must be train or test, got {s:?}"))),
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_bytes(path, text.as_bytes())
}

/// Training configuration from `--config` (or defaults) with flag overrides.
fn train_config(g: &Global) -> Result<TrainConfig> {
    let mut c = match &g.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(a) = &g.ablation {
        c = c.with_ablation(a.parse::<Ablation>()?);
    }
    if let Some(s) = g.seed {
        c.seed = s;
    }
    if let Some(e) = g.epochs {
        c.epochs = e;
    }
    if let Some(e) = g.stage2_epoch {
        c.stage2_epoch = e;
    }
    c.validate()?;
    Ok(c)
}

fn provenance_lines(entries: &BTreeMap<String, String>) -> String {
    entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

fn commented(entries: &BTreeMap<String, String>) -> String {
    entries.iter().map(|(k, v)| format!("# {k}={v}\n")).collect()
}

fn synth(g: &Global, model: &BodyModel, n_train: Option<usize>, n_test: Option<usize>, n_source: Option<usize>) -> Result<()> {
    let mut scene = match &g.config {
        Some(p) => {
            let text = read_text(p)?;
            toml::from_str::<SceneConfig>(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => SceneConfig::default(),
    };
    if let Some(n) = n_train {
        scene.n_train = n;
    }
    if let Some(n) = n_test {
        scene.n_test = n;
    }
    if let Some(n) = n_source {
        scene.n_source = n;
    }
    let seed = g.seed.unwrap_or(0);
    let dir = out_dir(g)?;
    let m = dataset::write_dataset(model, &scene, seed, dir)?;
    log::info!(
        "wrote {} train and {} test samples to {} (dataset hash {})",
        scene.n_train,
        scene.n_test,
        dir.display(),
        m.dataset_hash
    );
    Ok(())
}

fn load_prior(path: &Path) -> Result<GmmPrior> {
    GmmPrior::from_json(&read_text(path)?)
}

fn fit_dataset_prior(dir: &Path, m: &Manifest, components: usize, seed: u64) -> Result<GmmPrior> {
    let poses = dataset::load_source_poses(&dir.join(&m.source_poses))?;
    let (gmm, report) = fit_gmm(&poses, components, seed)?;
    log::info!(
        "fitted a {components}-component prior to {} source poses in {} EM iterations",
        poses.len(),
        report.log_likelihood.len()
    );
    Ok(gmm)
}

fn fit_prior(g: &Global, dir: &Path, components: Option<usize>) -> Result<()> {
    let config = train_config(g)?;
    let m = dataset::read_manifest(dir)?;
    let components = components.unwrap_or(config.prior_components);
    let gmm = fit_dataset_prior(dir, &m, components, config.seed)?;
    let prov = BTreeMap::from([
        ("config_hash".to_string(), config.hash()),
        ("dataset_hash".to_string(), m.dataset_hash.clone()),
        ("seed".to_string(), config.seed.to_string()),
        ("components".to_string(), components.to_string()),
    ]);
    let path = out_file(g, "json", "prior.json")?;
    write_text(&path, &gmm.to_json_with(&prov))?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn train(g: &Global, model: &BodyModel, dataset_flag: Option<PathBuf>, prior_flag: Option<PathBuf>) -> Result<()> {
    let config = train_config(g)?;
    let dir = dataset_flag
        .or_else(|| config.dataset.as_ref().map(PathBuf::from))
        .ok_or_else(|| Error::Config("no dataset: pass --dataset or set `dataset` in the config".into()))?;
    let out = out_dir(g)?.to_path_buf();
    let m = dataset::read_manifest(&dir)?;
    let data = dataset::load_observations(&dir, &m, Split::Train)?;
    let k = m.scene.intrinsics;

    let needs_prior = config.prior.lambda_theta0 > 0.0 && config.ablation.terms().smpl;
    let prior = match prior_flag.or_else(|| config.prior_file.as_ref().map(PathBuf::from)) {
        Some(p) => Some(load_prior(&p)?),
        None if needs_prior => Some(fit_dataset_prior(&dir, &m, config.prior_components, config.seed)?),
        None => None,
    };

    let config_hash = config.hash();
    let header = format!(
        "# config_hash={config_hash}\n# dataset_hash={}\n# seed={}\n",
        m.dataset_hash, config.seed
    );
    write_text(&out.join("config.toml"), &format!("{header}{}", config.to_toml()))?;

    let ckpt_dir = out.join("checkpoints");
    let mut on_epoch = |metrics: &trainer::EpochMetrics, ckpt: &Checkpoint| -> Result<()> {
        ckpt.save(&ckpt_dir.join(format!("epoch_{:03}.json", metrics.epoch)))
    };
    let hooks = TrainHooks {
        on_epoch: Some(&mut on_epoch),
        dump_dir: Some(out.join("dump")),
    };
    let result = trainer::train(model, &config, &data, &k, prior.as_ref(), &m.dataset_hash, hooks)?;
    result.checkpoint.save(&out.join("checkpoint.json"))?;
    write_text(
        &out.join("metrics.csv"),
        &trainer::metrics_csv(&result.metrics, &config, &m.dataset_hash),
    )?;
    let run = serde_json::json!({
        "config_hash": config_hash,
        "dataset_hash": m.dataset_hash,
        "seed": config.seed,
        "ablation": config.ablation.name(),
        "lambda_theta0": config.prior.lambda_theta0,
        "epochs": config.epochs,
        "stage2_epoch": config.stage2_epoch,
        "all_joints_visible": config.ablation.terms().all_visible,
        "train_samples": config.max_samples.map_or(data.len(), |n| n.min(data.len())),
    });
    write_text(&out.join("run.json"), &serde_json::to_string_pretty(&run).expect("json"))?;
    log::info!("wrote checkpoint and metrics to {}", out.display());
    Ok(())
}

/// Configuration a checkpoint was trained with: `--config`, else the
/// `config.toml` next to the checkpoint or one directory up.
fn checkpoint_config(g: &Global, checkpoint: &Path) -> Result<TrainConfig> {
    if g.config.is_some() {
        return train_config(g);
    }
    let dir = checkpoint.parent().unwrap_or(Path::new("."));
    for candidate in [dir.join("config.toml"), dir.join("../config.toml")] {
        if candidate.exists() {
            return TrainConfig::load(&candidate);
        }
    }
    Err(Error::Config(format!(
        "no config.toml found next to {}; pass --config",
        checkpoint.display()
    )))
}

/// Loads a checkpoint and checks it against a dataset and configuration.
fn checked_checkpoint(path: &Path, m: &Manifest, config: Option<&TrainConfig>) -> Result<(Checkpoint, Regressor)> {
    let ckpt = Checkpoint::load(path)?;
    if ckpt.dataset_hash != m.dataset_hash {
        return Err(Error::Provenance(format!(
            "checkpoint {} was trained on dataset {}, not {}",
            path.display(),
            ckpt.dataset_hash,
            m.dataset_hash
        )));
    }
    if let Some(c) = config {
        if ckpt.config_hash != c.hash() {
            return Err(Error::Provenance(format!(
                "checkpoint {} has config hash {}, the configuration hashes to {}",
                path.display(),
                ckpt.config_hash,
                c.hash()
            )));
        }
    }
    let r = ckpt.to_regressor()?;
    Ok((ckpt, r))
}

fn evaluate(g: &Global, model: &BodyModel, dir: &Path, checkpoint: &Path, split: &str) -> Result<()> {
    let split = parse_split(split)?;
    let config = checkpoint_config(g, checkpoint)?;
    let m = dataset::read_manifest(dir)?;
    let (ckpt, regressor) = checked_checkpoint(checkpoint, &m, Some(&config))?;
    let data = dataset::load_split(dir, &m, split)?;
    let k = m.scene.intrinsics;
    let preds = trainer::predict(&regressor, &data.observations, &k)?;
    let report = eval::evaluate(model, &preds, &data.observations, &data.truth, &k)?;

    let prov = BTreeMap::from([
        ("ablation".to_string(), config.ablation.name().to_string()),
        ("checkpoint_epoch".to_string(), ckpt.epoch.to_string()),
        ("config_hash".to_string(), ckpt.config_hash.clone()),
        ("dataset_hash".to_string(), m.dataset_hash.clone()),
        ("lambda_theta0".to_string(), format!("{:e}", config.prior.lambda_theta0)),
        ("seed".to_string(), ckpt.seed.to_string()),
        ("split".to_string(), split.name().to_string()),
    ]);
    let out = out_dir(g)?;
    write_text(&out.join("report.csv"), &report_csv(&report, &provenance_lines(&prov)))?;

    let mut summary = commented(&prov);
    summary.push_str("ablation,metric,mean,std,count\n");
    for s in &report.summary {
        writeln!(summary, "{},{},{},{},{}", config.ablation, s.metric, s.mean, s.std, s.count).unwrap();
    }
    write_text(&out.join("summary.csv"), &summary)?;
    let json = serde_json::json!({
        "provenance": prov,
        "summary": report.summary,
        "depth_skipped": report.depth_skipped,
        "occluded_samples": report.occluded_samples,
    });
    write_text(&out.join("summary.json"), &serde_json::to_string_pretty(&json).expect("json"))?;
    for s in &report.summary {
        println!("{} {} {:.2} {:.2} n={}", config.ablation, s.metric, s.mean, s.std, s.count);
    }
    Ok(())
}

fn load_sample(args: &SampleArgs) -> Result<(Manifest, weakpose::observation::ObservationSet)> {
    let split = parse_split(&args.split)?;
    let m = dataset::read_manifest(&args.data.dataset)?;
    let n = m.count(split)?;
    if args.index >= n {
        return Err(Error::Data(format!("index {} out of range for {} {} samples", args.index, n, split.name())));
    }
    let obs = dataset::load_observations(&args.data.dataset, &m, split)?;
    let o = obs.into_iter().nth(args.index).expect("index checked");
    Ok((m, o))
}

fn predict_one(regressor: &Regressor, obs: &weakpose::observation::ObservationSet, k: &PinholeIntrinsics) -> Result<Prediction> {
    Ok(trainer::predict(regressor, std::slice::from_ref(obs), k)?.remove(0))
}

fn fit_one(
    g: &Global,
    model: &BodyModel,
    args: &SampleArgs,
    checkpoint: Option<PathBuf>,
    prior_flag: Option<PathBuf>,
    epoch: usize,
) -> Result<()> {
    let config = train_config(g)?;
    let (m, obs) = load_sample(args)?;
    let k = m.scene.intrinsics;
    let target: Vec<Vec2> = obs.keypoints.iter().map(|p| k.to_normalized(p)).collect();
    let (init, init_camera, start) = match &checkpoint {
        Some(p) => {
            let (_, r) = checked_checkpoint(p, &m, None)?;
            let pred = predict_one(&r, &obs, &k)?;
            (pred.params, pred.camera, "regressor")
        }
        None => {
            let centre = target.iter().fold(Vec2::zeros(), |a, p| a + p) / target.len() as f64;
            let cam = NormalizedCamera {
                scale: 1.0,
                translation: [centre.x, centre.y],
            };
            (trainer::initial_params(model), cam, "rest")
        }
    };
    let prior = match prior_flag.or_else(|| config.prior_file.as_ref().map(PathBuf::from)) {
        Some(p) => Some(load_prior(&p)?),
        None if config.prior.lambda_theta0 > 0.0 => {
            Some(fit_dataset_prior(&args.data.dataset, &m, config.prior_components, config.seed)?)
        }
        None => None,
    };
    let terms = PriorTerms {
        gmm: prior.as_ref(),
        schedule: config.prior,
        epoch,
        mode: config.mixture_mode,
    };
    let fit = optimize(model, &init, &init_camera, &target, &obs.confidence, &terms, &config.fit)?;

    let prov = BTreeMap::from([
        ("config_hash".to_string(), config.hash()),
        ("dataset_hash".to_string(), m.dataset_hash.clone()),
        ("index".to_string(), args.index.to_string()),
        ("seed".to_string(), config.seed.to_string()),
        ("split".to_string(), args.split.clone()),
        ("start".to_string(), start.to_string()),
    ]);
    let out = out_dir(g)?;
    let dim = fit.params.pose.len() + fit.params.shape.len();
    let mut csv = commented(&prov);
    csv.push_str("iteration,objective");
    for i in 0..fit.params.pose.len() {
        write!(csv, ",theta{i}").unwrap();
    }
    for i in 0..fit.params.shape.len() {
        write!(csv, ",beta{i}").unwrap();
    }
    csv.push_str(",scale,tx,ty\n");
    for (i, (f, p)) in fit.trace.iter().zip(&fit.param_trace).enumerate() {
        debug_assert_eq!(p.len(), dim + 3);
        write!(csv, "{i},{f:e}").unwrap();
        for v in p {
            write!(csv, ",{v:e}").unwrap();
        }
        csv.push('\n');
    }
    write_text(&out.join("trace.csv"), &csv)?;
    let json = serde_json::json!({
        "provenance": prov,
        "pose": fit.params.pose,
        "shape": fit.params.shape,
        "camera": fit.camera,
        "objective": fit.objective,
        "initial_objective": fit.initial_objective,
        "finite": fit.finite,
    });
    write_text(&out.join("fit.json"), &serde_json::to_string_pretty(&json).expect("json"))?;
    if !fit.finite {
        return Err(Error::Numeric("fitting objective became non-finite".into()));
    }
    println!("objective {:.6e} -> {:.6e}", fit.initial_objective, fit.objective);
    Ok(())
}

/// Camera-frame mesh of a prediction.
fn predicted_mesh(model: &BodyModel, pred: &Prediction, k: &PinholeIntrinsics) -> Result<Vec<Vec3>> {
    let t = pred.camera.placement(k)?;
    Ok(model.skin(&pred.params)?.iter().map(|v| v + t).collect())
}

fn render(g: &Global, model: &BodyModel, args: &SampleArgs, checkpoint: &Path) -> Result<()> {
    let (m, obs) = load_sample(args)?;
    let (ckpt, r) = checked_checkpoint(checkpoint, &m, None)?;
    let k = m.scene.intrinsics;
    let pred = predict_one(&r, &obs, &k)?;
    let raster = rasterize(&predicted_mesh(model, &pred, &k)?, &model.template().triangles, &k);
    let frame = raster.to_frame();
    let out = out_dir(g)?;
    write_bytes(&out.join("depth.pfm"), &encode_pfm(&frame))?;
    write_bytes(&out.join("depth.pgm"), &encode_pgm16(&frame))?;
    write_bytes(&out.join("mask.pgm"), &encode_mask_pgm(frame.width, frame.height, &raster.mask()))?;
    let json = serde_json::json!({
        "config_hash": ckpt.config_hash,
        "dataset_hash": m.dataset_hash,
        "seed": ckpt.seed,
        "checkpoint_epoch": ckpt.epoch,
        "split": args.split,
        "index": args.index,
        "coverage": raster.coverage(),
        "files": ["depth.pfm", "depth.pgm", "mask.pgm"],
    });
    write_text(&out.join("provenance.json"), &serde_json::to_string_pretty(&json).expect("json"))?;
    Ok(())
}

fn export_mesh(
    g: &Global,
    model: &BodyModel,
    checkpoint: Option<PathBuf>,
    dataset_dir: Option<PathBuf>,
    index: usize,
    split: &str,
) -> Result<()> {
    let path = out_file(g, "obj", "mesh.obj")?;
    let (vertices, comment) = match checkpoint {
        None => {
            let v = model.skin(&PoseShapeParams {
                pose: vec![0.0; model.pose_dim()],
                shape: vec![0.0; model.shape_dims()],
            })?;
            let config = train_config(g)?;
            let comment = format!("rest template\nconfig_hash={}\nseed={}", config.hash(), config.seed);
            (v, comment)
        }
        Some(ckpt_path) => {
            let dir = dataset_dir.ok_or_else(|| Error::Config("--dataset is required with --checkpoint".into()))?;
            let args = SampleArgs {
                data: DatasetArg { dataset: dir },
                index,
                split: split.to_string(),
            };
            let (m, obs) = load_sample(&args)?;
            let (ckpt, r) = checked_checkpoint(&ckpt_path, &m, None)?;
            let k = m.scene.intrinsics;
            let pred = predict_one(&r, &obs, &k)?;
            // Camera frame is y-down, z forward; a half-turn about x makes it y-up.
            let v = predicted_mesh(model, &pred, &k)?
                .iter()
                .map(|p| Vec3::new(p.x, -p.y, -p.z))
                .collect();
            let comment = format!(
                "prediction for {split} sample {index}\nconfig_hash={}\ndataset_hash={}\nseed={}",
                ckpt.config_hash, m.dataset_hash, ckpt.seed
            );
            (v, comment)
        }
    };
    write_text(&path, &encode_obj(&vertices, &model.template().triangles, &comment))?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn bias_probe(g: &Global, dir: &Path, split: &str, bin_width: f64, max: f64) -> Result<()> {
    let split = parse_split(split)?;
    let m = dataset::read_manifest(dir)?;
    let data = dataset::load_split(dir, &m, split)?;
    let records = probe::probe(&data.observations, &data.truth)?;
    let hist = probe::histogram(&records, bin_width, max)?;
    let prov = BTreeMap::from([
        ("config_hash".to_string(), m.config_hash.clone()),
        ("dataset_hash".to_string(), m.dataset_hash.clone()),
        ("seed".to_string(), m.seed.to_string()),
        ("split".to_string(), split.name().to_string()),
    ]);
    let out = out_dir(g)?;
    write_text(&out.join("bias_histogram.csv"), &probe::histogram_csv(&hist, &provenance_lines(&prov)))?;
    let mut csv = commented(&prov);
    csv.push_str("sample,joint,type,error,depth_offset\n");
    for r in &records {
        let kind = match r.kind {
            probe::BiasType::Type1 => "type1",
            probe::BiasType::Type2 => "type2",
        };
        writeln!(csv, "{},{},{kind},{},{}", r.sample, r.joint, r.error, r.depth_offset).unwrap();
    }
    write_text(&out.join("bias_records.csv"), &csv)?;
    for (kind, name) in [(probe::BiasType::Type1, "type1"), (probe::BiasType::Type2, "type2")] {
        let v: Vec<f64> = records.iter().filter(|r| r.kind == kind).map(|r| r.error).collect();
        let mean = v.iter().sum::<f64>() / v.len().max(1) as f64;
        println!("{name} joints {} mean error {mean:.1} mm", v.len());
    }
    Ok(())
}
