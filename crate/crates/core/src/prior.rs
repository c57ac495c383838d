//! Source-domain pose prior (Gaussian mixture), its decay schedule, and the
//! shape and hinge-angle penalties.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::body::Hinge;
use crate::error::{check_len, Error, Result};

/// Diagonal load added to every fitted covariance.
pub const COVARIANCE_EPS: f64 = 1e-6;
const MAX_EM_ITERS: usize = 200;
const EM_TOL: f64 = 1e-6;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone)]
pub struct GaussianComponent {
    pub weight: f64,
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    chol: DMatrix<f64>,
    precision: DMatrix<f64>,
    /// `-ln w + 0.5 ln det(2 pi Sigma)`: the component score at its mean.
    offset: f64,
}

impl GaussianComponent {
    pub fn new(weight: f64, mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if covariance.shape() != (d, d) {
            return Err(Error::DimensionMismatch {
                what: "covariance",
                expected: d,
                got: covariance.nrows(),
            });
        }
        if !(weight > 0.0) {
            return Err(Error::InvalidInput(format!("mixture weight {weight} is not positive")));
        }
        let sym = (&covariance + covariance.transpose()) * 0.5;
        let chol = sym
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Numeric("covariance is not positive definite".into()))?;
        let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let precision = chol.inverse();
        Ok(Self {
            weight,
            mean,
            covariance: sym,
            chol: chol.l(),
            precision,
            offset: -weight.ln() + 0.5 * (d as f64 * LN_2PI + log_det),
        })
    }

    pub fn cholesky(&self) -> &DMatrix<f64> {
        &self.chol
    }

    /// `-ln w - ln N(x; mu, Sigma)` and its gradient.
    pub fn score(&self, x: &DVector<f64>) -> (f64, DVector<f64>) {
        let diff = x - &self.mean;
        let g = &self.precision * &diff;
        (self.offset + 0.5 * diff.dot(&g), g)
    }
}

/// How the mixture turns into a scalar penalty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MixtureMode {
    /// Best single component (max-mixture approximation).
    #[default]
    MinComponent,
    /// Full mixture negative log-likelihood.
    Exact,
}

#[derive(Debug, Clone)]
pub struct GmmPrior {
    components: Vec<GaussianComponent>,
    dim: usize,
}

#[derive(Debug, Clone)]
pub struct EmReport {
    /// Mean per-sample log-likelihood after each iteration.
    pub log_likelihood: Vec<f64>,
    pub converged: bool,
}

impl GmmPrior {
    pub fn new(components: Vec<GaussianComponent>) -> Result<Self> {
        let dim = components.first().map(|c| c.mean.len()).ok_or_else(|| Error::InvalidInput("empty mixture".into()))?;
        for c in &components {
            check_len("component mean", dim, c.mean.len())?;
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!("mixture weights sum to {total}")));
        }
        Ok(Self { components, dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> &[GaussianComponent] {
        &self.components
    }

    /// Max-mixture negative log-likelihood and its gradient.
    pub fn nll(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        check_len("prior input", self.dim, x.len())?;
        let xv = DVector::from_column_slice(x);
        let mut best: Option<(f64, DVector<f64>)> = None;
        for c in &self.components {
            let (s, g) = c.score(&xv);
            if best.as_ref().is_none_or(|b| s < b.0) {
                best = Some((s, g));
            }
        }
        let (s, g) = best.expect("nonempty mixture");
        Ok((s, g.as_slice().to_vec()))
    }

    /// Full mixture negative log-likelihood and its gradient.
    pub fn exact_nll(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        check_len("prior input", self.dim, x.len())?;
        let xv = DVector::from_column_slice(x);
        let scored: Vec<_> = self.components.iter().map(|c| c.score(&xv)).collect();
        let m = scored.iter().map(|s| s.0).fold(f64::INFINITY, f64::min);
        let weights: Vec<f64> = scored.iter().map(|s| (m - s.0).exp()).collect();
        let total: f64 = weights.iter().sum();
        let mut grad = DVector::zeros(self.dim);
        for (w, (_, g)) in weights.iter().zip(&scored) {
            grad += g * (w / total);
        }
        Ok((m - total.ln(), grad.as_slice().to_vec()))
    }

    /// Smallest value the max-mixture score can take.
    pub fn floor(&self) -> f64 {
        self.components.iter().map(|c| c.offset).fold(f64::INFINITY, f64::min)
    }

    /// Nonnegative penalty: the score minus its floor.
    pub fn penalty(&self, x: &[f64], mode: MixtureMode) -> Result<(f64, Vec<f64>)> {
        let (v, g) = match mode {
            MixtureMode::MinComponent => self.nll(x)?,
            MixtureMode::Exact => self.exact_nll(x)?,
        };
        Ok(((v - self.floor()).max(0.0), g))
    }

    /// Mahalanobis distance to the mean of the first component.
    pub fn mahalanobis(&self, x: &[f64]) -> f64 {
        let c = &self.components[0];
        let diff = DVector::from_column_slice(x) - &c.mean;
        diff.dot(&(&c.precision * &diff)).sqrt()
    }

    pub fn to_json(&self) -> String {
        self.to_json_with(&BTreeMap::new())
    }

    /// JSON with free-form provenance entries (hashes, seeds) attached.
    pub fn to_json_with(&self, provenance: &BTreeMap<String, String>) -> String {
        let file = PriorFile {
            provenance: provenance.clone(),
            format: FORMAT.into(),
            version: VERSION,
            dim: self.dim,
            components: self
                .components
                .iter()
                .map(|c| ComponentFile {
                    weight: c.weight,
                    mean: c.mean.as_slice().to_vec(),
                    cholesky: (0..self.dim).map(|r| (0..=r).map(|k| c.chol[(r, k)]).collect()).collect(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("prior serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: PriorFile = serde_json::from_str(text).map_err(|e| Error::Data(format!("prior file: {e}")))?;
        if f.format != FORMAT || f.version != VERSION {
            return Err(Error::Data(format!("unsupported prior file {} v{}", f.format, f.version)));
        }
        let comps = f
            .components
            .into_iter()
            .map(|c| {
                check_len("prior mean", f.dim, c.mean.len())?;
                check_len("cholesky rows", f.dim, c.cholesky.len())?;
                let mut l = DMatrix::zeros(f.dim, f.dim);
                for (r, row) in c.cholesky.iter().enumerate() {
                    check_len("cholesky row", r + 1, row.len())?;
                    for (k, v) in row.iter().enumerate() {
                        l[(r, k)] = *v;
                    }
                }
                GaussianComponent::new(c.weight, DVector::from_vec(c.mean), &l * l.transpose())
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(comps)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

const FORMAT: &str = "weakpose-gmm";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct PriorFile {
    format: String,
    version: u32,
    dim: usize,
    components: Vec<ComponentFile>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    provenance: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct ComponentFile {
    weight: f64,
    mean: Vec<f64>,
    /// Lower-triangular rows of the covariance Cholesky factor.
    cholesky: Vec<Vec<f64>>,
}

fn kmeans_pp(data: &[DVector<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<DVector<f64>> {
    let mut centers = vec![data[rng.random_range(0..data.len())].clone()];
    let mut dist: Vec<f64> = data.iter().map(|x| (x - &centers[0]).norm_squared()).collect();
    while centers.len() < k {
        let total: f64 = dist.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = data.len() - 1;
            for (i, d) in dist.iter().enumerate() {
                if target < *d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            pick
        } else {
            rng.random_range(0..data.len())
        };
        centers.push(data[next].clone());
        for (d, x) in dist.iter_mut().zip(data) {
            *d = d.min((x - &centers[centers.len() - 1]).norm_squared());
        }
    }
    centers
}

fn weighted_moments(data: &[DVector<f64>], resp: &[f64], total: f64) -> (DVector<f64>, DMatrix<f64>) {
    let d = data[0].len();
    let mut mean = DVector::zeros(d);
    for (x, r) in data.iter().zip(resp) {
        mean.axpy(*r, x, 1.0);
    }
    mean /= total;
    let mut cov = DMatrix::zeros(d, d);
    for (x, r) in data.iter().zip(resp) {
        let diff = x - &mean;
        cov.ger(*r, &diff, &diff, 1.0);
    }
    cov /= total;
    for i in 0..d {
        cov[(i, i)] += COVARIANCE_EPS;
    }
    (mean, cov)
}

/// Expectation-maximization from a seeded k-means++ start.
pub fn fit_gmm(samples: &[Vec<f64>], n_components: usize, seed: u64) -> Result<(GmmPrior, EmReport)> {
    if n_components == 0 {
        return Err(Error::InvalidInput("need at least one mixture component".into()));
    }
    if samples.len() < n_components.max(2) {
        return Err(Error::TooFewSamples {
            needed: n_components.max(2),
            got: samples.len(),
        });
    }
    let dim = samples[0].len();
    let data: Vec<DVector<f64>> = samples
        .iter()
        .map(|s| {
            check_len("pose sample", dim, s.len())?;
            Ok(DVector::from_column_slice(s))
        })
        .collect::<Result<_>>()?;
    if data.iter().all(|x| x == &data[0]) {
        return Err(Error::Degenerate("all pose samples are identical".into()));
    }
    let n = data.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = kmeans_pp(&data, n_components, &mut rng);

    // hard assignment to the nearest centre seeds the first M-step
    let mut resp = vec![vec![0.0; n]; n_components];
    for (i, x) in data.iter().enumerate() {
        let best = (0..n_components)
            .min_by(|&a, &b| (x - &centers[a]).norm_squared().total_cmp(&(x - &centers[b]).norm_squared()))
            .unwrap();
        resp[best][i] = 1.0;
    }

    let mut trace = Vec::new();
    let mut converged = false;
    let mut components = m_step(&data, &resp)?;
    for _ in 0..MAX_EM_ITERS {
        // E-step
        let mut ll = 0.0;
        for (i, x) in data.iter().enumerate() {
            let scores: Vec<f64> = components.iter().map(|c| c.score(x).0).collect();
            let m = scores.iter().copied().fold(f64::INFINITY, f64::min);
            let w: Vec<f64> = scores.iter().map(|s| (m - s).exp()).collect();
            let total: f64 = w.iter().sum();
            for (k, wk) in w.iter().enumerate() {
                resp[k][i] = wk / total;
            }
            ll += -(m - total.ln());
        }
        ll /= n as f64;
        let done = trace.last().is_some_and(|prev: &f64| ll - prev < EM_TOL);
        trace.push(ll);
        if done {
            converged = true;
            break;
        }
        components = m_step(&data, &resp)?;
    }
    Ok((GmmPrior::new(components)?, EmReport { log_likelihood: trace, converged }))
}

fn m_step(data: &[DVector<f64>], resp: &[Vec<f64>]) -> Result<Vec<GaussianComponent>> {
    let n = data.len() as f64;
    let mut out = Vec::with_capacity(resp.len());
    for r in resp {
        // an empty component keeps a tiny share of every sample
        let total: f64 = r.iter().sum();
        let (r, total) = if total < 1e-10 {
            (vec![1.0 / n; data.len()], 1.0)
        } else {
            (r.clone(), total)
        };
        let (mean, cov) = weighted_moments(data, &r, total);
        out.push(GaussianComponent::new(total / n, mean, cov)?);
    }
    let sum: f64 = out.iter().map(|c| c.weight).sum();
    for c in out.iter_mut() {
        let w = c.weight / sum;
        *c = GaussianComponent::new(w, c.mean.clone(), c.covariance.clone())?;
    }
    Ok(out)
}

/// Weights of the source-prior terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorSchedule {
    pub lambda_theta0: f64,
    pub decay: f64,
    pub lambda_beta: f64,
    pub lambda_alpha: f64,
}

impl Default for PriorSchedule {
    fn default() -> Self {
        Self {
            lambda_theta0: 404.0,
            decay: 0.8,
            lambda_beta: 100.0,
            lambda_alpha: 15.0,
        }
    }
}

impl PriorSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_theta0 >= 0.0) || !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::Config(format!(
                "prior schedule needs lambda_theta0 >= 0 and 0 < decay <= 1, got {} and {}",
                self.lambda_theta0, self.decay
            )));
        }
        if !(self.lambda_beta >= 0.0 && self.lambda_alpha >= 0.0) {
            return Err(Error::Config("prior weights must be nonnegative".into()));
        }
        Ok(())
    }

    /// `lambda_theta0 * decay^epoch`.
    pub fn lambda_theta(&self, epoch: usize) -> f64 {
        self.lambda_theta0 * self.decay.powi(epoch as i32)
    }
}

/// `|beta|^2` and its gradient.
pub fn shape_penalty(beta: &[f64]) -> (f64, Vec<f64>) {
    (beta.iter().map(|b| b * b).sum(), beta.iter().map(|b| 2.0 * b).collect())
}

/// `sum_j exp(-sign_j * theta_j[axis_j])` over hinges; gradient over the full pose.
pub fn angle_penalty(pose: &[f64], hinges: &[Hinge]) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; pose.len()];
    let mut total = 0.0;
    for h in hinges {
        let i = 3 * h.joint + h.axis;
        let v = (-h.sign * pose[i]).exp();
        total += v;
        grad[i] += -h.sign * v;
    }
    (total, grad)
}
