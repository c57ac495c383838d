//! Training configuration and the ablation matrix.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fitting::FitConfig;
use crate::losses::{DepthPenalty, LossWeights};
use crate::prior::{MixtureMode, PriorSchedule};
use crate::provenance::hash_serialized;
use crate::regressor::RegressorConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum Ablation {
    /// 2D keypoints and depth proxies for every joint.
    #[serde(rename = "3D-dp")]
    DepthProxy,
    /// Depth proxies of visible joints only.
    #[serde(rename = "3D-dp-vis")]
    DepthProxyVisible,
    /// Full two-stage setting.
    #[default]
    #[serde(rename = "3D-dp-vis-D")]
    Full,
    /// Full setting without the source pose prior.
    #[serde(rename = "noPrior")]
    NoPrior,
    /// 2D keypoints and aligned depth from the first epoch.
    #[serde(rename = "2D-D")]
    TwoDDepth,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::DepthProxy,
        Ablation::DepthProxyVisible,
        Ablation::Full,
        Ablation::NoPrior,
        Ablation::TwoDDepth,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::DepthProxy => "3D-dp",
            Ablation::DepthProxyVisible => "3D-dp-vis",
            Ablation::Full => "3D-dp-vis-D",
            Ablation::NoPrior => "noPrior",
            Ablation::TwoDDepth => "2D-D",
        }
    }

    pub fn terms(self) -> TermMask {
        let base = TermMask {
            three_d: true,
            smpl: true,
            depth: true,
            staged: true,
            all_visible: false,
        };
        match self {
            Ablation::Full | Ablation::NoPrior => base,
            Ablation::DepthProxy => TermMask {
                depth: false,
                staged: false,
                all_visible: true,
                ..base
            },
            Ablation::DepthProxyVisible => TermMask {
                depth: false,
                staged: false,
                ..base
            },
            Ablation::TwoDDepth => TermMask {
                three_d: false,
                smpl: false,
                staged: false,
                ..base
            },
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Ablation::ALL.iter().map(|a| a.name()).collect();
                Error::Config(format!("unknown ablation {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

/// Which regression terms a configuration uses. The 2D term is always on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TermMask {
    pub three_d: bool,
    pub smpl: bool,
    pub depth: bool,
    /// Follow the stage switch; otherwise every enabled term is on in every epoch.
    pub staged: bool,
    /// Treat every joint as visible.
    pub all_visible: bool,
}

impl TermMask {
    /// Effective `(L_3D, L_D)` coefficients for an epoch.
    pub fn coefficients(&self, epoch: usize, stage2_epoch: usize) -> (f64, f64) {
        let c = if self.staged {
            crate::losses::stage_coefficients(epoch, stage2_epoch)
        } else {
            crate::losses::StageCoefficients { three_d: 1.0, depth: 1.0 }
        };
        let on = |b: bool| if b { 1.0 } else { 0.0 };
        (c.three_d * on(self.three_d), c.depth * on(self.depth))
    }
}

/// Keypoint count and normalization the default prior weights are scaled for.
const PRIOR_KEYPOINTS: f64 = 16.0;
const PRIOR_NORM: f64 = 160.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Stage II starts strictly after this epoch (epochs count from 1).
    pub stage2_epoch: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub ablation: Ablation,
    pub regressor: RegressorConfig,
    pub prior: PriorSchedule,
    pub mixture_mode: MixtureMode,
    pub prior_components: usize,
    pub fit: FitConfig,
    pub weights: LossWeights,
    pub depth_penalty: DepthPenalty,
    /// Dataset directory (command-line runs).
    pub dataset: Option<String>,
    /// Pose prior file; fitted from the dataset's source poses when absent.
    pub prior_file: Option<String>,
    /// Train on the first `n` samples only.
    pub max_samples: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        // The prior weights are the usual pixel-space values divided by the
        // keypoint count and squared normalization, matching the mean
        // normalized 2D term.
        let scale = 1.0 / (PRIOR_KEYPOINTS * PRIOR_NORM * PRIOR_NORM);
        let p = PriorSchedule::default();
        Self {
            epochs: 30,
            stage2_epoch: 10,
            lr: 1e-3,
            batch_size: 16,
            seed: 0,
            ablation: Ablation::Full,
            regressor: RegressorConfig {
                hidden: vec![256, 256],
                ..Default::default()
            },
            prior: PriorSchedule {
                lambda_theta0: p.lambda_theta0 * scale,
                decay: p.decay,
                lambda_beta: p.lambda_beta * scale,
                lambda_alpha: p.lambda_alpha * scale,
            },
            mixture_mode: MixtureMode::MinComponent,
            prior_components: 8,
            fit: FitConfig::default(),
            weights: LossWeights {
                two_d: 1.0,
                three_d: 0.1,
                smpl: 0.01,
                depth: 1.0,
            },
            depth_penalty: DepthPenalty::L2,
            dataset: None,
            prior_file: None,
            max_samples: None,
        }
    }
}

impl TrainConfig {
    /// Default configuration with the overrides of an ablation applied.
    pub fn for_ablation(ablation: Ablation) -> Self {
        Self::default().with_ablation(ablation)
    }

    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        self.ablation = ablation;
        if ablation == Ablation::NoPrior {
            self.prior.lambda_theta0 = 0.0;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("lr must be a positive number".into()));
        }
        if self.prior_components == 0 {
            return Err(Error::Config("prior_components must be positive".into()));
        }
        self.prior.validate()?;
        let w = &self.weights;
        if [w.two_d, w.three_d, w.smpl, w.depth].iter().any(|x| !(*x >= 0.0 && x.is_finite())) {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        if let DepthPenalty::GemanMcClure { sigma } = self.depth_penalty {
            if !(sigma > 0.0) {
                return Err(Error::Config("Geman-McClure sigma must be positive".into()));
            }
        }
        if self.ablation == Ablation::NoPrior && self.prior.lambda_theta0 != 0.0 {
            return Err(Error::Config("the noPrior ablation requires lambda_theta0 = 0".into()));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        hash_serialized(self)
    }

    /// Parses TOML, or JSON when the text starts with `{`.
    pub fn parse(text: &str) -> Result<Self> {
        let config: Self = if text.trim_start().starts_with('{') {
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?
        } else {
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?
        };
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
