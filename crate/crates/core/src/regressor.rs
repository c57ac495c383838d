//! Keypoint-lifting regressor: an MLP from 2D keypoints to pose, shape and
//! weak-perspective camera, with hand-written backpropagation.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::body::PoseShapeParams;
use crate::camera::NormalizedCamera;
use crate::error::{check_len, Error, Result};
use crate::geometry::Vec2;

const LEAK: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    LeakyRelu,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::LeakyRelu if x < 0.0 => LEAK * x,
            _ => x,
        }
    }

    fn slope(self, x: f64) -> f64 {
        match self {
            Activation::LeakyRelu if x < 0.0 => LEAK,
            _ => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegressorConfig {
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    /// Scale applied to the initial output-layer weights.
    pub output_gain: f64,
    /// Camera scale (normalized units) produced by the initial output bias.
    pub initial_scale: f64,
}

impl Default for RegressorConfig {
    fn default() -> Self {
        Self {
            hidden: vec![1024, 1024],
            activation: Activation::LeakyRelu,
            output_gain: 0.01,
            initial_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Regressor {
    pub layers: Vec<Layer>,
    pub activation: Activation,
    pub num_joints: usize,
    pub shape_dims: usize,
    pub num_keypoints: usize,
}

/// One regressor output.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub params: PoseShapeParams,
    pub camera: NormalizedCamera,
}

/// Activations kept for the backward pass (columns are samples).
#[derive(Debug, Clone)]
pub struct Cache {
    inputs: Vec<DMatrix<f64>>,
    pre: Vec<DMatrix<f64>>,
    raw_out: DMatrix<f64>,
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Regressor input: normalized keypoint coordinates and confidences.
pub fn features(keypoints: &[Vec2], confidence: &[f64]) -> Vec<f64> {
    keypoints
        .iter()
        .zip(confidence)
        .flat_map(|(p, c)| [p.x * c, p.y * c, *c])
        .collect()
}

impl Regressor {
    pub fn output_dim(num_joints: usize, shape_dims: usize) -> usize {
        3 * num_joints + shape_dims + 3
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    /// He-normal weights; the output bias encodes `initial` and the
    /// configured camera scale.
    pub fn init(
        config: &RegressorConfig,
        num_keypoints: usize,
        initial: &PoseShapeParams,
        seed: u64,
    ) -> Result<Self> {
        if !(config.initial_scale > 0.0) {
            return Err(Error::Config("initial camera scale must be positive".into()));
        }
        let num_joints = initial.num_joints();
        let shape_dims = initial.shape.len();
        let mut dims = vec![3 * num_keypoints];
        dims.extend(&config.hidden);
        dims.push(Self::output_dim(num_joints, shape_dims));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        for (li, w) in dims.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let std = (2.0 / fan_in as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("finite std");
            let last = li + 2 == dims.len();
            let gain = if last { config.output_gain } else { 1.0 };
            let weight = DMatrix::from_fn(fan_out, fan_in, |_, _| normal.sample(&mut rng) * gain);
            layers.push(Layer {
                weight,
                bias: DVector::zeros(fan_out),
            });
        }
        let mut bias = initial.to_flat();
        bias.extend([softplus_inverse(config.initial_scale), 0.0, 0.0]);
        layers.last_mut().unwrap().bias = DVector::from_vec(bias);
        Ok(Self {
            layers,
            activation: config.activation,
            num_joints,
            shape_dims,
            num_keypoints,
        })
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Weights (column-major) then bias, layer by layer.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(l.bias.as_slice());
        }
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        check_len("regressor parameters", self.num_params(), flat.len())?;
        let mut at = 0;
        for l in &mut self.layers {
            let n = l.weight.len();
            l.weight.as_mut_slice().copy_from_slice(&flat[at..at + n]);
            at += n;
            let n = l.bias.len();
            l.bias.as_mut_slice().copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        Ok(())
    }

    /// Batched forward pass; `inputs` holds one sample per column.
    pub fn forward_batch(&self, inputs: &DMatrix<f64>) -> Result<(Vec<Prediction>, Cache)> {
        check_len("regressor input", self.input_dim(), inputs.nrows())?;
        let mut x = inputs.clone();
        let mut cache = Cache {
            inputs: Vec::new(),
            pre: Vec::new(),
            raw_out: DMatrix::zeros(0, 0),
        };
        let last = self.layers.len() - 1;
        for (li, l) in self.layers.iter().enumerate() {
            let mut z = &l.weight * &x;
            for mut col in z.column_iter_mut() {
                col += &l.bias;
            }
            cache.inputs.push(x);
            if li == last {
                x = z;
            } else {
                let act = z.map(|v| self.activation.apply(v));
                cache.pre.push(z);
                x = act;
            }
        }
        let preds = x.column_iter().map(|c| self.decode(c.as_slice())).collect();
        cache.raw_out = x;
        Ok((preds, cache))
    }

    pub fn forward(&self, features: &[f64]) -> Result<(Prediction, Cache)> {
        let (mut p, c) = self.forward_batch(&DMatrix::from_column_slice(features.len(), 1, features))?;
        Ok((p.remove(0), c))
    }

    fn decode(&self, raw: &[f64]) -> Prediction {
        let pd = 3 * self.num_joints;
        let params = PoseShapeParams::from_flat(&raw[..pd + self.shape_dims], pd);
        let o = pd + self.shape_dims;
        Prediction {
            params,
            camera: NormalizedCamera {
                scale: softplus(raw[o]),
                translation: [raw[o + 1], raw[o + 2]],
            },
        }
    }

    /// Gradient of the raw output column given gradients on the decoded values.
    pub fn encode_gradient(&self, cache: &Cache, column: usize, params: &PoseShapeParams, camera: &[f64; 3]) -> Vec<f64> {
        let mut g = params.to_flat();
        let o = g.len();
        let raw_scale = cache.raw_out[(o, column)];
        g.extend([camera[0] * sigmoid(raw_scale), camera[1], camera[2]]);
        g
    }

    /// Backward pass; `grad_out` holds one raw-output gradient column per sample.
    /// Returns gradients in the [`Self::flat_params`] layout.
    pub fn backward(&self, cache: &Cache, grad_out: &DMatrix<f64>) -> Vec<f64> {
        let mut grads: Vec<(DMatrix<f64>, DVector<f64>)> = Vec::with_capacity(self.layers.len());
        let mut delta = grad_out.clone();
        for li in (0..self.layers.len()).rev() {
            let x = &cache.inputs[li];
            let gw = &delta * x.transpose();
            let gb = delta.column_sum();
            if li > 0 {
                let mut back = self.layers[li].weight.transpose() * &delta;
                let pre = &cache.pre[li - 1];
                back.zip_apply(pre, |d, z| *d *= self.activation.slope(z));
                delta = back;
            }
            grads.push((gw, gb));
        }
        grads.reverse();
        let mut out = Vec::with_capacity(self.num_params());
        for (gw, gb) in grads {
            out.extend_from_slice(gw.as_slice());
            out.extend_from_slice(gb.as_slice());
        }
        out
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub layer_shapes: Vec<[usize; 2]>,
    pub activation: Activation,
    pub num_joints: usize,
    pub shape_dims: usize,
    pub num_keypoints: usize,
    pub params: Vec<f64>,
    pub epoch: usize,
    pub config_hash: String,
    pub dataset_hash: String,
    pub seed: u64,
}

const CHECKPOINT_FORMAT: &str = "weakpose-regressor";
const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn new(model: &Regressor, epoch: usize, config_hash: &str, dataset_hash: &str, seed: u64) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            layer_shapes: model.layers.iter().map(|l| [l.weight.nrows(), l.weight.ncols()]).collect(),
            activation: model.activation,
            num_joints: model.num_joints,
            shape_dims: model.shape_dims,
            num_keypoints: model.num_keypoints,
            params: model.flat_params(),
            epoch,
            config_hash: config_hash.into(),
            dataset_hash: dataset_hash.into(),
            seed,
        }
    }

    pub fn to_regressor(&self) -> Result<Regressor> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(Error::Data(format!("unsupported checkpoint {} v{}", self.format, self.version)));
        }
        let mut layers = Vec::new();
        for w in self.layer_shapes.windows(2) {
            if w[0][0] != w[1][1] {
                return Err(Error::Data("checkpoint layer shapes do not chain".into()));
            }
        }
        for &[rows, cols] in &self.layer_shapes {
            layers.push(Layer {
                weight: DMatrix::zeros(rows, cols),
                bias: DVector::zeros(rows),
            });
        }
        let out = self.layer_shapes.last().map(|s| s[0]).unwrap_or(0);
        if out != Regressor::output_dim(self.num_joints, self.shape_dims) || self.layer_shapes.is_empty() {
            return Err(Error::Data("checkpoint output size does not match its body".into()));
        }
        let mut r = Regressor {
            layers,
            activation: self.activation,
            num_joints: self.num_joints,
            shape_dims: self.shape_dims,
            num_keypoints: self.num_keypoints,
        };
        r.set_flat_params(&self.params).map_err(|e| Error::Data(e.to_string()))?;
        Ok(r)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).expect("checkpoint serializes");
        crate::imageio::write_bytes(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e))
    }
}
