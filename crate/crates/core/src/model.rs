//! Fitted model containers, fit configuration and the JSON model formats.

use serde::{Deserialize, Serialize};

use crate::copula::{self, CorrelationMatrix, GaussianizedPoint};
use crate::data::default_names;
use crate::error::{GcmmError, Result};
use crate::marginal::{BandwidthRule, MarginalEstimator, MarginalOptions};

pub const GCMM_SCHEMA: &str = "gcmm-v1";
pub const GMM_SCHEMA: &str = "gmm-v1";

const WEIGHT_SUM_TOLERANCE: f64 = 1e-12;

fn check_weights(weights: &[f64], floor: f64) -> Result<()> {
    if weights.is_empty() {
        return Err(GcmmError::InvalidModel("at least one component required".into()));
    }
    if weights.iter().any(|w| !w.is_finite() || *w <= 0.0 || *w < floor) {
        return Err(GcmmError::InvalidModel(format!(
            "weights must be positive, finite and at least {floor}"
        )));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
        return Err(GcmmError::InvalidModel(format!("weights must sum to 1 (sum is {sum})")));
    }
    Ok(())
}

/// Options for one EM fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub k: usize,
    pub max_iters: usize,
    /// Stop when `|L_m - L_{m-1}| / (1 + |L_m|) < tol`.
    pub tol: f64,
    pub seed: u64,
    pub weight_floor: f64,
    /// Relative ridge: `ridge * trace(S) / D` is added to every scatter diagonal.
    pub ridge: f64,
    /// Fixed cdf clipping; `None` derives it from each estimator's effective size.
    pub cdf_clip_epsilon: Option<f64>,
    pub kde_bandwidth_rule: BandwidthRule,
    pub use_unsync: bool,
    /// When false, marginals stay at their initial estimates and only the
    /// weights and copulas are updated.
    pub update_marginals: bool,
    /// EM starts per fit: the k-means start plus `starts - 1` random soft
    /// starts. Each runs `start_iters` iterations and the best continues.
    pub starts: usize,
    /// Iterations each start runs before the best one is continued.
    pub start_iters: usize,
}

impl FitConfig {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            max_iters: 500,
            tol: 1e-6,
            seed: 0,
            weight_floor: 1e-6,
            ridge: 1e-6,
            cdf_clip_epsilon: None,
            kde_bandwidth_rule: BandwidthRule::Silverman,
            use_unsync: false,
            update_marginals: true,
            starts: 4,
            start_iters: 20,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(GcmmError::InvalidConfig(m));
        if self.k == 0 {
            return bad("K must be positive".into());
        }
        if self.starts == 0 {
            return bad("at least one start is required".into());
        }
        if !(self.tol > 0.0) {
            return bad(format!("tol must be positive, got {}", self.tol));
        }
        if !(self.weight_floor > 0.0 && self.weight_floor < 1.0 / self.k as f64) {
            return bad(format!("weight_floor must lie in (0, 1/K), got {}", self.weight_floor));
        }
        if !(self.ridge >= 0.0 && self.ridge.is_finite()) {
            return bad("ridge must be nonnegative".into());
        }
        if let Some(eps) = self.cdf_clip_epsilon {
            if !(eps > 0.0 && eps < 0.5) {
                return bad(format!("cdf_clip_epsilon must lie in (0, 0.5), got {eps}"));
            }
        }
        if let BandwidthRule::Fixed(h) = self.kde_bandwidth_rule {
            if !(h > 0.0 && h.is_finite()) {
                return bad("fixed bandwidth must be positive".into());
            }
        }
        Ok(())
    }

    pub fn marginal_options(&self) -> MarginalOptions {
        MarginalOptions { clip_epsilon: self.cdf_clip_epsilon, bandwidth: self.kde_bandwidth_rule }
    }
}

/// Mixture of Gaussian copulas with per-component nonparametric marginals.
#[derive(Debug, Clone, PartialEq)]
pub struct GcmmModel {
    weights: Vec<f64>,
    correlations: Vec<CorrelationMatrix>,
    /// `marginals[k][i]`
    marginals: Vec<Vec<MarginalEstimator>>,
    dimension_names: Vec<String>,
}

impl GcmmModel {
    pub fn new(
        weights: Vec<f64>,
        correlations: Vec<CorrelationMatrix>,
        marginals: Vec<Vec<MarginalEstimator>>,
    ) -> Result<Self> {
        let d = correlations.first().map_or(0, CorrelationMatrix::dim);
        let model = Self { weights, correlations, marginals, dimension_names: default_names(d) };
        model.validate()?;
        Ok(model)
    }

    pub fn with_dimension_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.d() {
            return Err(GcmmError::InvalidModel("one name per dimension required".into()));
        }
        self.dimension_names = names;
        Ok(self)
    }

    /// Weight simplex (floor 0), one correlation matrix and a full row of
    /// marginals per component, consistent dimensions.
    pub fn validate(&self) -> Result<()> {
        check_weights(&self.weights, 0.0)?;
        let k = self.weights.len();
        if self.correlations.len() != k || self.marginals.len() != k {
            return Err(GcmmError::InvalidModel(format!(
                "{k} weights but {} correlation matrices and {} marginal rows",
                self.correlations.len(),
                self.marginals.len()
            )));
        }
        let d = self.correlations[0].dim();
        if d == 0 {
            return Err(GcmmError::InvalidModel("D >= 1 required".into()));
        }
        for (p, row) in self.correlations.iter().zip(&self.marginals) {
            if p.dim() != d || row.len() != d {
                return Err(GcmmError::InvalidModel("inconsistent dimension count".into()));
            }
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn d(&self) -> usize {
        self.correlations[0].dim()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn correlations(&self) -> &[CorrelationMatrix] {
        &self.correlations
    }

    pub fn correlation(&self, k: usize) -> &CorrelationMatrix {
        &self.correlations[k]
    }

    pub fn marginal(&self, k: usize, i: usize) -> &MarginalEstimator {
        &self.marginals[k][i]
    }

    pub fn marginals(&self) -> &[Vec<MarginalEstimator>] {
        &self.marginals
    }

    pub fn dimension_names(&self) -> &[String] {
        &self.dimension_names
    }

    /// Maps `x` through component `k`'s marginals.
    pub fn gaussianize(&self, k: usize, x: &[f64]) -> GaussianizedPoint {
        let row = &self.marginals[k];
        let y = row.iter().zip(x).map(|(m, v)| m.gaussianize(*v)).collect();
        let log_z = row.iter().zip(x).map(|(m, v)| m.ln_pdf(*v)).sum();
        GaussianizedPoint::new(y, log_z)
    }

    /// `ln pi_k + ln c_k(y) + sum_i ln f_ki(x_i)` for every component.
    pub fn log_joint_terms(&self, x: &[f64]) -> Vec<f64> {
        (0..self.k())
            .map(|k| {
                let gp = self.gaussianize(k, x);
                self.weights[k].ln() + copula::log_component_density(&self.correlations[k], &gp)
            })
            .collect()
    }

    /// Mixture log-density at `x`.
    pub fn log_density(&self, x: &[f64]) -> f64 {
        crate::normal::log_sum_exp(&self.log_joint_terms(x))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&GcmmFile::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: GcmmFile = serde_json::from_str(text)?;
        file.try_into()
    }
}

#[derive(Serialize, Deserialize)]
struct GcmmFile {
    schema: String,
    k: usize,
    d: usize,
    #[serde(default)]
    dimension_names: Option<Vec<String>>,
    weights: Vec<f64>,
    correlations: Vec<Vec<f64>>,
    marginals: Vec<Vec<MarginalEstimator>>,
}

impl From<&GcmmModel> for GcmmFile {
    fn from(m: &GcmmModel) -> Self {
        Self {
            schema: GCMM_SCHEMA.into(),
            k: m.k(),
            d: m.d(),
            dimension_names: Some(m.dimension_names.clone()),
            weights: m.weights.clone(),
            correlations: m.correlations.iter().map(|p| p.as_row_major().to_vec()).collect(),
            marginals: m.marginals.clone(),
        }
    }
}

impl TryFrom<GcmmFile> for GcmmModel {
    type Error = GcmmError;

    fn try_from(f: GcmmFile) -> Result<Self> {
        if f.schema != GCMM_SCHEMA {
            return Err(GcmmError::InvalidModel(format!("unexpected schema '{}'", f.schema)));
        }
        check_weights(&f.weights, 0.0)?;
        if f.weights.len() != f.k || f.correlations.len() != f.k || f.marginals.len() != f.k {
            return Err(GcmmError::InvalidModel("component count disagrees with k".into()));
        }
        let correlations = f
            .correlations
            .into_iter()
            .map(|m| CorrelationMatrix::from_row_major(f.d, m))
            .collect::<Result<Vec<_>>>()?;
        let model = GcmmModel::new(f.weights, correlations, f.marginals)?;
        match f.dimension_names {
            Some(names) => model.with_dimension_names(names),
            None => Ok(model),
        }
    }
}

/// Full-covariance Gaussian mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmModel {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    /// Row-major D x D per component.
    covariances: Vec<Vec<f64>>,
    lowers: Vec<Vec<f64>>,
    log_dets: Vec<f64>,
    dimension_names: Vec<String>,
}

impl GmmModel {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, covariances: Vec<Vec<f64>>) -> Result<Self> {
        check_weights(&weights, 0.0)?;
        let k = weights.len();
        if means.len() != k || covariances.len() != k {
            return Err(GcmmError::InvalidModel("component count mismatch".into()));
        }
        let d = means[0].len();
        if d == 0 {
            return Err(GcmmError::InvalidModel("D >= 1 required".into()));
        }
        let mut lowers = Vec::with_capacity(k);
        let mut log_dets = Vec::with_capacity(k);
        for (mu, cov) in means.iter().zip(&covariances) {
            if mu.len() != d || cov.len() != d * d {
                return Err(GcmmError::InvalidModel("inconsistent dimension count".into()));
            }
            if mu.iter().chain(cov).any(|v| !v.is_finite()) {
                return Err(GcmmError::InvalidModel("non-finite mean or covariance".into()));
            }
            for i in 0..d {
                for j in 0..i {
                    if cov[i * d + j] != cov[j * d + i] {
                        return Err(GcmmError::InvalidModel("covariance must be symmetric".into()));
                    }
                }
            }
            let chol = nalgebra::DMatrix::from_row_slice(d, d, cov)
                .cholesky()
                .ok_or_else(|| GcmmError::Singular("covariance is not positive definite".into()))?;
            let l = chol.l();
            let mut lower = vec![0.0; d * d];
            let mut log_det = 0.0;
            for i in 0..d {
                for j in 0..=i {
                    lower[i * d + j] = l[(i, j)];
                }
                log_det += 2.0 * l[(i, i)].ln();
            }
            lowers.push(lower);
            log_dets.push(log_det);
        }
        Ok(Self { weights, means, covariances, lowers, log_dets, dimension_names: default_names(d) })
    }

    pub fn with_dimension_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.d() {
            return Err(GcmmError::InvalidModel("one name per dimension required".into()));
        }
        self.dimension_names = names;
        Ok(self)
    }

    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn d(&self) -> usize {
        self.means[0].len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn covariances(&self) -> &[Vec<f64>] {
        &self.covariances
    }

    pub fn dimension_names(&self) -> &[String] {
        &self.dimension_names
    }

    pub(crate) fn lower(&self, k: usize) -> &[f64] {
        &self.lowers[k]
    }

    /// `ln N(x; mu_k, Sigma_k)`.
    pub fn component_log_density(&self, k: usize, x: &[f64]) -> f64 {
        let d = self.d();
        let l = &self.lowers[k];
        let mu = &self.means[k];
        let mut z = vec![0.0; d];
        let mut q = 0.0;
        for i in 0..d {
            let mut acc = x[i] - mu[i];
            for j in 0..i {
                acc -= l[i * d + j] * z[j];
            }
            z[i] = acc / l[i * d + i];
            q += z[i] * z[i];
        }
        -0.5 * (d as f64 * (2.0 * std::f64::consts::PI).ln() + self.log_dets[k] + q)
    }

    pub fn log_joint_terms(&self, x: &[f64]) -> Vec<f64> {
        (0..self.k()).map(|k| self.weights[k].ln() + self.component_log_density(k, x)).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&GmmFile {
            schema: GMM_SCHEMA.into(),
            k: self.k(),
            d: self.d(),
            dimension_names: Some(self.dimension_names.clone()),
            weights: self.weights.clone(),
            means: self.means.clone(),
            covariances: self.covariances.clone(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: GmmFile = serde_json::from_str(text)?;
        if f.schema != GMM_SCHEMA {
            return Err(GcmmError::InvalidModel(format!("unexpected schema '{}'", f.schema)));
        }
        if f.weights.len() != f.k || f.means.iter().any(|m| m.len() != f.d) {
            return Err(GcmmError::InvalidModel("shape disagrees with k/d".into()));
        }
        let model = GmmModel::new(f.weights, f.means, f.covariances)?;
        match f.dimension_names {
            Some(names) => model.with_dimension_names(names),
            None => Ok(model),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct GmmFile {
    schema: String,
    k: usize,
    d: usize,
    #[serde(default)]
    dimension_names: Option<Vec<String>>,
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    covariances: Vec<Vec<f64>>,
}

/// Either model family, as read from a model file.
#[derive(Debug, Clone)]
pub enum AnyModel {
    Gcmm(GcmmModel),
    Gmm(GmmModel),
}

impl AnyModel {
    /// Dispatches on the `schema` field.
    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Probe {
            schema: String,
        }
        let probe: Probe = serde_json::from_str(text)?;
        match probe.schema.as_str() {
            GCMM_SCHEMA => Ok(AnyModel::Gcmm(GcmmModel::from_json(text)?)),
            GMM_SCHEMA => Ok(AnyModel::Gmm(GmmModel::from_json(text)?)),
            other => Err(GcmmError::InvalidModel(format!("unknown schema '{other}'"))),
        }
    }

    pub fn d(&self) -> usize {
        match self {
            AnyModel::Gcmm(m) => m.d(),
            AnyModel::Gmm(m) => m.d(),
        }
    }

    pub fn dimension_names(&self) -> &[String] {
        match self {
            AnyModel::Gcmm(m) => m.dimension_names(),
            AnyModel::Gmm(m) => m.dimension_names(),
        }
    }
}
