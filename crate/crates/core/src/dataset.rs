//! On-disk dataset layout.
//!
//! ```text
//! manifest.json
//! source_poses.csv
//! train/000000_keypoints.csv   joint,u,v,confidence,visible
//! train/000000_depth.pfm       raw depth (mm)
//! train/000000_mask.pgm        body mask
//! test/...
//! eval_only/train/000000.json  hidden ground truth
//! eval_only/test/...
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::body::BodyModel;
use crate::error::{Error, Result};
use crate::geometry::Vec2;
use crate::imageio::{decode_mask_pgm, decode_pfm, encode_mask_pgm, encode_pfm, write_bytes};
use crate::observation::ObservationSet;
use crate::par;
use crate::provenance::{hash_serialized, Hasher};
use crate::scenes::{generate_split, sample_source_poses, HiddenTruth, SceneConfig, Split, SplitData};

pub const FORMAT: &str = "weakpose-dataset";
pub const VERSION: u32 = 1;
pub const HIDDEN_DIR: &str = "eval_only";
pub const SOURCE_FILE: &str = "source_poses.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub name: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub config_hash: String,
    pub scene: SceneConfig,
    pub splits: Vec<SplitEntry>,
    pub source_poses: String,
    pub hidden_dir: String,
    /// Hash over every file in the dataset except this manifest.
    pub dataset_hash: String,
}

impl Manifest {
    pub fn count(&self, split: Split) -> Result<usize> {
        self.splits
            .iter()
            .find(|s| s.name == split.name())
            .map(|s| s.count)
            .ok_or_else(|| Error::Data(format!("dataset has no {} split", split.name())))
    }
}

fn stem(index: usize) -> String {
    format!("{index:06}")
}

pub fn keypoints_csv(obs: &ObservationSet) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["joint", "u", "v", "confidence", "visible"]).unwrap();
    for (j, ((p, c), v)) in obs.keypoints.iter().zip(&obs.confidence).zip(&obs.visibility).enumerate() {
        w.write_record([j.to_string(), p.x.to_string(), p.y.to_string(), c.to_string(), (*v as u8).to_string()])
            .unwrap();
    }
    String::from_utf8(w.into_inner().unwrap()).unwrap()
}

#[derive(Deserialize)]
struct KeypointRow {
    joint: usize,
    u: f64,
    v: f64,
    confidence: f64,
    visible: u8,
}

/// Keypoints, confidences and visibility flags.
pub fn parse_keypoints_csv(text: &str) -> std::result::Result<(Vec<Vec2>, Vec<f64>, Vec<bool>), String> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let (mut kp, mut conf, mut vis) = (Vec::new(), Vec::new(), Vec::new());
    for (i, row) in r.deserialize::<KeypointRow>().enumerate() {
        let row = row.map_err(|e| e.to_string())?;
        if row.joint != i {
            return Err(format!("row {i} names joint {}", row.joint));
        }
        if row.visible > 1 {
            return Err(format!("visible flag must be 0 or 1, got {}", row.visible));
        }
        kp.push(Vec2::new(row.u, row.v));
        conf.push(row.confidence);
        vis.push(row.visible == 1);
    }
    Ok((kp, conf, vis))
}

fn source_csv(poses: &[Vec<f64>]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    if let Some(first) = poses.first() {
        w.write_record((0..first.len()).map(|i| format!("p{i}"))).unwrap();
    }
    for p in poses {
        w.write_record(p.iter().map(|x| x.to_string())).unwrap();
    }
    String::from_utf8(w.into_inner().unwrap()).unwrap()
}

/// Body poses (non-root joints) of the source domain, one per row.
pub fn load_source_poses(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let mut out = Vec::new();
    for row in r.deserialize::<Vec<f64>>() {
        out.push(row.map_err(|e| Error::parse(path, e.to_string()))?);
    }
    if let Some(first) = out.first() {
        if out.iter().any(|p| p.len() != first.len()) {
            return Err(Error::parse(path, "rows differ in length"));
        }
    }
    Ok(out)
}

/// Generates the dataset described by `config` into `dir`.
pub fn write_dataset(model: &BodyModel, config: &SceneConfig, seed: u64, dir: &Path) -> Result<Manifest> {
    config.validate()?;
    let mut hasher = Hasher::new();

    let source: Vec<Vec<f64>> = sample_source_poses(model, config, config.n_source, seed)
        .iter()
        .map(|p| p.to_params().body_pose().to_vec())
        .collect();
    let text = source_csv(&source);
    write_bytes(&dir.join(SOURCE_FILE), text.as_bytes())?;
    hasher.part(SOURCE_FILE, text.as_bytes());

    let mut splits = Vec::new();
    for (split, n) in [(Split::Train, config.n_train), (Split::Test, config.n_test)] {
        let name = split.name();
        let chunk = 128;
        let mut start = 0;
        while start < n {
            let end = (start + chunk).min(n);
            let samples = generate_split(model, config, split, start..end, seed)?;
            for (offset, s) in samples.iter().enumerate() {
                let stem = stem(start + offset);
                let obs = &s.observation;
                let files = [
                    (format!("{name}/{stem}_keypoints.csv"), keypoints_csv(obs).into_bytes()),
                    (format!("{name}/{stem}_depth.pfm"), encode_pfm(&s.raw_depth)),
                    (
                        format!("{name}/{stem}_mask.pgm"),
                        encode_mask_pgm(obs.depth.width, obs.depth.height, &obs.body_mask),
                    ),
                    (
                        format!("{HIDDEN_DIR}/{name}/{stem}.json"),
                        serde_json::to_vec_pretty(&s.truth).expect("serializable truth"),
                    ),
                ];
                for (rel, bytes) in files {
                    write_bytes(&dir.join(&rel), &bytes)?;
                    hasher.part(&rel, &bytes);
                }
            }
            start = end;
        }
        splits.push(SplitEntry {
            name: name.into(),
            count: n,
        });
    }

    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        seed,
        config_hash: hash_serialized(config),
        scene: config.clone(),
        splits,
        source_poses: SOURCE_FILE.into(),
        hidden_dir: HIDDEN_DIR.into(),
        dataset_hash: hasher.finish(),
    };
    let mut text = serde_json::to_string_pretty(&manifest).expect("serializable manifest");
    text.push('\n');
    write_bytes(&dir.join("manifest.json"), text.as_bytes())?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::parse(&path, e.to_string()))?;
    if m.format != FORMAT || m.version != VERSION {
        return Err(Error::parse(&path, format!("unsupported format {} v{}", m.format, m.version)));
    }
    Ok(m)
}

fn sample_paths(dir: &Path, split: Split, index: usize) -> [PathBuf; 3] {
    let base = dir.join(split.name());
    let stem = stem(index);
    [
        base.join(format!("{stem}_keypoints.csv")),
        base.join(format!("{stem}_depth.pfm")),
        base.join(format!("{stem}_mask.pgm")),
    ]
}

fn load_observation(dir: &Path, manifest: &Manifest, split: Split, index: usize) -> Result<ObservationSet> {
    let [kp_path, depth_path, mask_path] = sample_paths(dir, split, index);
    let k = &manifest.scene.intrinsics;
    let text = fs::read_to_string(&kp_path).map_err(|e| Error::io(&kp_path, e))?;
    let (keypoints, confidence, visibility) = parse_keypoints_csv(&text).map_err(|m| Error::parse(&kp_path, m))?;
    let bytes = fs::read(&depth_path).map_err(|e| Error::io(&depth_path, e))?;
    let raw = decode_pfm(&bytes).map_err(|m| Error::parse(&depth_path, m))?;
    let bytes = fs::read(&mask_path).map_err(|e| Error::io(&mask_path, e))?;
    let (w, h, mask) = decode_mask_pgm(&bytes).map_err(|m| Error::parse(&mask_path, m))?;
    if (raw.width, raw.height) != (k.width, k.height) || (w, h) != (k.width, k.height) {
        return Err(Error::Data(format!(
            "sample {index} of {} does not match the {}x{} intrinsics",
            split.name(),
            k.width,
            k.height
        )));
    }
    Ok(ObservationSet::from_raw(
        keypoints,
        confidence,
        visibility,
        &raw,
        mask,
        k,
        manifest.scene.proxy_window,
    ))
}

/// Observations of a split, cleaned and with proxies extracted.
pub fn load_observations(dir: &Path, manifest: &Manifest, split: Split) -> Result<Vec<ObservationSet>> {
    let n = manifest.count(split)?;
    par::map_range(n, |i| load_observation(dir, manifest, split, i)).into_iter().collect()
}

/// Evaluation-only ground truth of a split.
pub fn load_truth(dir: &Path, manifest: &Manifest, split: Split) -> Result<Vec<HiddenTruth>> {
    let n = manifest.count(split)?;
    par::map_range(n, |i| {
        let path = dir.join(&manifest.hidden_dir).join(split.name()).join(format!("{}.json", stem(i)));
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(&path, e.to_string()))
    })
    .into_iter()
    .collect()
}

pub fn load_split(dir: &Path, manifest: &Manifest, split: Split) -> Result<SplitData> {
    Ok(SplitData {
        observations: load_observations(dir, manifest, split)?,
        truth: load_truth(dir, manifest, split)?,
    })
}
