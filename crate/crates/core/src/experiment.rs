//! Synthetic ground truths and the end-to-end fitting benchmark.
//!
//! A benchmark run draws training data from a known copula mixture, hides
//! part of it as unsynchronized per-dimension observations, fits a GMM, a
//! base GCMM and a GCMM that also uses the hidden observations, and then
//! compares each model's distribution of row sums with a fresh holdout.

use std::fmt::Write as _;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::copula::{self, CorrelationMatrix};
use crate::data::{default_names, write_file, SyncDataset, UnsyncDataset};
use crate::em;
use crate::error::{GcmmError, Result};
use crate::eval::{self, ModelKind};
use crate::gmm;
use crate::marginal::{build_weighted_ecdf, MarginalOptions};
use crate::model::{AnyModel, FitConfig, GcmmModel};
use crate::normal;

/// Quantile knots per marginal in a tabulated ground truth.
pub const GROUND_TRUTH_KNOTS: usize = 10_000;

/// Analytic marginal distribution of a generator component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum MarginalFamily {
    Gaussian { mean: f64, sd: f64 },
    Lognormal { mu: f64, sigma: f64 },
    StudentT { nu: f64, loc: f64, scale: f64 },
}

impl MarginalFamily {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite();
        let valid = match *self {
            Self::Gaussian { mean, sd } => ok(mean) && ok(sd) && sd > 0.0,
            Self::Lognormal { mu, sigma } => ok(mu) && ok(sigma) && sigma > 0.0,
            Self::StudentT { nu, loc, scale } => ok(nu) && ok(loc) && ok(scale) && nu > 0.0 && scale > 0.0,
        };
        if valid {
            Ok(())
        } else {
            Err(GcmmError::InvalidConfig(format!("invalid marginal parameters {self:?}")))
        }
    }

    /// Inverse cdf at `p` in (0, 1).
    pub fn quantile(&self, p: f64) -> f64 {
        match *self {
            Self::Gaussian { mean, sd } => mean + sd * normal::quantile(p),
            Self::Lognormal { mu, sigma } => (mu + sigma * normal::quantile(p)).exp(),
            Self::StudentT { nu, loc, scale } => {
                StudentsT::new(loc, scale, nu).expect("validated parameters").inverse_cdf(p)
            }
        }
    }
}

/// One generator component: weight, dependence and per-dimension margins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentSpec {
    pub weight: f64,
    /// Common off-diagonal correlation, used unless `correlation` is set.
    #[serde(default)]
    pub rho: f64,
    /// Full row-major correlation matrix.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correlation: Option<Vec<f64>>,
    pub marginals: Vec<MarginalFamily>,
}

impl ComponentSpec {
    fn correlation_matrix(&self) -> Result<CorrelationMatrix> {
        let d = self.marginals.len();
        let matrix = match &self.correlation {
            Some(m) => m.clone(),
            None => {
                if !(self.rho > -1.0 && self.rho < 1.0) {
                    return Err(GcmmError::InvalidConfig(format!("rho must lie in (-1, 1), got {}", self.rho)));
                }
                (0..d * d).map(|n| if n / d == n % d { 1.0 } else { self.rho }).collect()
            }
        };
        CorrelationMatrix::from_row_major(d, matrix).map_err(|e| match e {
            GcmmError::Singular(m) => GcmmError::InvalidConfig(format!("correlation not positive definite: {m}")),
            other => other,
        })
    }
}

/// Ground-truth copula mixture description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dimension_names: Option<Vec<String>>,
    pub components: Vec<ComponentSpec>,
}

impl Default for GeneratorSpec {
    /// Three equally weighted bivariate components with correlations 0.8,
    /// -0.5 and 0.2 and lognormal(0, 0.6) margins.
    fn default() -> Self {
        let margin = MarginalFamily::Lognormal { mu: 0.0, sigma: 0.6 };
        let components = [0.8, -0.5, 0.2]
            .into_iter()
            .map(|rho| ComponentSpec { weight: 1.0 / 3.0, rho, correlation: None, marginals: vec![margin; 2] })
            .collect();
        Self { dimension_names: None, components }
    }
}

impl GeneratorSpec {
    pub fn d(&self) -> usize {
        self.components.first().map_or(0, |c| c.marginals.len())
    }

    fn names(&self) -> Vec<String> {
        self.dimension_names.clone().unwrap_or_else(|| default_names(self.d()))
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.d();
        if self.components.is_empty() || d == 0 {
            return Err(GcmmError::InvalidConfig("at least one component and one dimension required".into()));
        }
        if self.components.iter().any(|c| c.marginals.len() != d) {
            return Err(GcmmError::InvalidConfig("every component needs one marginal per dimension".into()));
        }
        if self.dimension_names.as_ref().is_some_and(|n| n.len() != d) {
            return Err(GcmmError::InvalidConfig("one name per dimension required".into()));
        }
        let total: f64 = self.components.iter().map(|c| c.weight).sum();
        if self.components.iter().any(|c| !(c.weight > 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(GcmmError::InvalidConfig("component weights must be positive and sum to 1".into()));
        }
        for c in &self.components {
            c.marginals.iter().try_for_each(MarginalFamily::validate)?;
            c.correlation_matrix()?;
        }
        Ok(())
    }
}

/// A generator spec with its correlation matrices resolved. Samples use the
/// analytic quantile functions.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    spec: GeneratorSpec,
    correlations: Vec<CorrelationMatrix>,
    picker: WeightedIndex<f64>,
}

impl GroundTruth {
    pub fn new(spec: GeneratorSpec) -> Result<Self> {
        spec.validate()?;
        let correlations = spec.components.iter().map(ComponentSpec::correlation_matrix).collect::<Result<_>>()?;
        let picker = WeightedIndex::new(spec.components.iter().map(|c| c.weight))
            .map_err(|e| GcmmError::InvalidConfig(e.to_string()))?;
        Ok(Self { spec, correlations, picker })
    }

    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<SyncDataset> {
        let d = self.spec.d();
        let mut values = Vec::with_capacity(n * d);
        for _ in 0..n {
            let k = self.picker.sample(rng);
            let u = copula::sample_copula(&self.correlations[k], rng);
            let margins = &self.spec.components[k].marginals;
            values.extend(u.iter().zip(margins).map(|(ui, m)| m.quantile(*ui)));
        }
        SyncDataset::new(values, d, self.spec.names())
    }
}

/// Tabulates a generator spec as a fitted-model object: each marginal is
/// the ECDF of the analytic quantiles at `(j + 1/2) / m`.
pub fn make_ground_truth(spec: &GeneratorSpec) -> Result<GcmmModel> {
    spec.validate()?;
    let m = GROUND_TRUTH_KNOTS;
    let options = MarginalOptions::default().with_clip_epsilon(0.5 / m as f64);
    let uniform = vec![1.0; m];
    let mut weights = Vec::new();
    let mut correlations = Vec::new();
    let mut marginals = Vec::new();
    for c in &spec.components {
        weights.push(c.weight);
        correlations.push(c.correlation_matrix()?);
        let row = c
            .marginals
            .iter()
            .map(|fam| {
                let knots: Vec<f64> = (0..m).map(|j| fam.quantile((j as f64 + 0.5) / m as f64)).collect();
                build_weighted_ecdf(&knots, &uniform, options)
            })
            .collect::<Result<Vec<_>>>()?;
        marginals.push(row);
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    GcmmModel::new(weights, correlations, marginals)?.with_dimension_names(spec.names())
}

/// Keeps a random `ceil(keep_fraction * N)` rows synchronized (in their
/// original order) and sends every value of the other rows to its
/// dimension's unsynchronized pool.
pub fn desynchronize<R: Rng + ?Sized>(
    data: &SyncDataset,
    keep_fraction: f64,
    rng: &mut R,
) -> Result<(SyncDataset, UnsyncDataset)> {
    desynchronize_with_drops(data, keep_fraction, None, rng)
}

/// As [`desynchronize`], additionally discarding each pooled value of
/// dimension `i` with probability `drop_rates[i]`.
pub fn desynchronize_with_drops<R: Rng + ?Sized>(
    data: &SyncDataset,
    keep_fraction: f64,
    drop_rates: Option<&[f64]>,
    rng: &mut R,
) -> Result<(SyncDataset, UnsyncDataset)> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(GcmmError::InvalidConfig(format!("keep fraction must lie in (0, 1], got {keep_fraction}")));
    }
    let (n, d) = (data.n(), data.d());
    if let Some(rates) = drop_rates {
        if rates.len() != d || rates.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(GcmmError::InvalidConfig("one drop rate in [0, 1] per dimension required".into()));
        }
    }
    let keep = ((keep_fraction * n as f64 - 1e-9).ceil() as usize).min(n);
    if keep < 2 {
        return Err(GcmmError::InvalidConfig("at least two synchronized rows must be kept".into()));
    }
    let mut kept = index::sample(rng, n, keep).into_vec();
    kept.sort_unstable();
    let mut is_kept = vec![false; n];
    kept.iter().for_each(|&i| is_kept[i] = true);
    let mut pools = vec![Vec::new(); d];
    for (row, _) in data.rows().zip(&is_kept).filter(|(_, k)| !**k) {
        for (i, pool) in pools.iter_mut().enumerate() {
            let dropped = match drop_rates {
                Some(r) => rng.random::<f64>() < r[i],
                None => false,
            };
            if !dropped {
                pool.push(row[i]);
            }
        }
    }
    Ok((data.select_rows(&kept)?, UnsyncDataset::new(pools)?))
}

/// Independent stream seed for a (run seed, purpose) pair.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkSizes {
    /// Rows drawn for training before desynchronization.
    pub train: usize,
    pub keep_fraction: f64,
    /// Draws from each fitted model.
    pub resample: usize,
    /// Fresh ground-truth rows for the comparison.
    pub holdout: usize,
}

impl Default for BenchmarkSizes {
    fn default() -> Self {
        Self { train: 6_000, keep_fraction: 0.6, resample: 10_000, holdout: 10_000 }
    }
}

/// How each method picks its component count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KChoice {
    Fixed(usize),
    Aic { min: usize, max: usize },
}

/// Everything a benchmark run depends on besides the seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkSpec {
    pub generator: GeneratorSpec,
    pub sizes: BenchmarkSizes,
    pub k: KChoice,
    pub tol: f64,
    pub max_iters: usize,
    /// EM starts per fit.
    pub starts: usize,
    pub marginal_param_cost: usize,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            generator: GeneratorSpec::default(),
            sizes: BenchmarkSizes::default(),
            k: KChoice::Fixed(3),
            tol: 1e-6,
            max_iters: 500,
            starts: 4,
            marginal_param_cost: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Gmm,
    BaseCase,
    ExtraData,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Gmm, Method::BaseCase, Method::ExtraData];

    pub fn label(self) -> &'static str {
        match self {
            Method::Gmm => "GMM",
            Method::BaseCase => "Base Case",
            Method::ExtraData => "Extra-Data",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodOutcome {
    pub method: Method,
    pub k: Option<usize>,
    pub statistic: Option<f64>,
    pub p_value: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedRow {
    pub seed: u64,
    pub outcomes: Vec<MethodOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchmarkReport {
    pub spec: BenchmarkSpec,
    pub rows: Vec<SeedRow>,
    /// Median p-value per method over seeds where it succeeded.
    pub median_p_values: Vec<(Method, Option<f64>)>,
}

impl BenchmarkReport {
    pub fn median_p(&self, method: Method) -> Option<f64> {
        self.median_p_values.iter().find(|(m, _)| *m == method).and_then(|(_, p)| *p)
    }

    pub fn p_values(&self, method: Method) -> Vec<Option<f64>> {
        self.rows
            .iter()
            .map(|r| r.outcomes.iter().find(|o| o.method == method).and_then(|o| o.p_value))
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = write!(out, "{:>20}", "seed");
        for m in Method::ALL {
            let _ = write!(out, " {:>12} {:>3}", m.label(), "K");
        }
        out.push('\n');
        for row in &self.rows {
            let _ = write!(out, "{:>20}", row.seed);
            for o in &row.outcomes {
                let p = o.p_value.map_or("error".to_string(), |p| format!("{p:.4}"));
                let k = o.k.map_or("-".to_string(), |k| k.to_string());
                let _ = write!(out, " {p:>12} {k:>3}");
            }
            out.push('\n');
        }
        let _ = write!(out, "{:>20}", "median");
        for (_, p) in &self.median_p_values {
            let p = p.map_or("-".to_string(), |p| format!("{p:.4}"));
            let _ = write!(out, " {p:>12} {:>3}", "");
        }
        out.push('\n');
        for row in &self.rows {
            for o in row.outcomes.iter().filter(|o| o.error.is_some()) {
                let _ = writeln!(out, "seed {} {}: {}", row.seed, o.method.label(), o.error.as_deref().unwrap_or(""));
            }
        }
        out
    }
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

struct SeedData {
    sync: SyncDataset,
    unsync: UnsyncDataset,
    holdout_sums: Vec<f64>,
}

fn prepare_seed(truth: &GroundTruth, sizes: &BenchmarkSizes, seed: u64) -> Result<SeedData> {
    let train = truth.sample(sizes.train, &mut ChaCha8Rng::seed_from_u64(derive_seed(seed, 1)))?;
    let (sync, unsync) = desynchronize(&train, sizes.keep_fraction, &mut ChaCha8Rng::seed_from_u64(derive_seed(seed, 2)))?;
    let holdout = truth.sample(sizes.holdout, &mut ChaCha8Rng::seed_from_u64(derive_seed(seed, 3)))?;
    Ok(SeedData { sync, unsync, holdout_sums: eval::sum_dimension(&holdout) })
}

fn run_method(spec: &BenchmarkSpec, data: &SeedData, method: Method, seed: u64) -> Result<(usize, eval::KsResult)> {
    let mut config = FitConfig::new(1);
    config.tol = spec.tol;
    config.max_iters = spec.max_iters;
    config.starts = spec.starts;
    config.seed = derive_seed(seed, 4);
    config.use_unsync = method == Method::ExtraData;
    let kind = if method == Method::Gmm { ModelKind::Gmm } else { ModelKind::Gcmm };
    let unsync = config.use_unsync.then_some(&data.unsync);

    let k = match spec.k {
        KChoice::Fixed(k) => k,
        KChoice::Aic { min, max } => {
            let report = eval::select_k(&data.sync, unsync, min, max, &config, kind, spec.marginal_param_cost)?;
            report.best_k.ok_or_else(|| GcmmError::InvalidData("no K in range could be fitted".into()))?
        }
    };
    let base_seed = config.seed;
    config.k = k;
    config.seed = base_seed ^ k as u64;
    let model = match kind {
        ModelKind::Gmm => AnyModel::Gmm(gmm::fit_gmm(&data.sync, &config)?.0),
        ModelKind::Gcmm => AnyModel::Gcmm(em::fit(&data.sync, unsync, &config)?.0),
    };
    let tag = 5 + Method::ALL.iter().position(|m| *m == method).unwrap() as u64;
    let resample = eval::sample_model(&model, spec.sizes.resample, &mut ChaCha8Rng::seed_from_u64(derive_seed(seed, tag)))?;
    Ok((k, eval::ks_two_sample(&eval::sum_dimension(&resample), &data.holdout_sums)?))
}

fn run_seed(spec: &BenchmarkSpec, truth: &GroundTruth, seed: u64) -> SeedRow {
    let prepared = prepare_seed(truth, &spec.sizes, seed);
    let outcomes = Method::ALL
        .iter()
        .map(|&method| {
            let result = prepared.as_ref().map_err(|e| e.to_string()).and_then(|data| {
                run_method(spec, data, method, seed).map_err(|e| e.to_string())
            });
            match result {
                Ok((k, ks)) => MethodOutcome {
                    method,
                    k: Some(k),
                    statistic: Some(ks.statistic),
                    p_value: Some(ks.p_value),
                    error: None,
                },
                Err(e) => MethodOutcome { method, k: None, statistic: None, p_value: None, error: Some(e) },
            }
        })
        .collect();
    SeedRow { seed, outcomes }
}

/// Runs every seed (in parallel) and assembles the report in seed order.
pub fn run_benchmark(spec: &BenchmarkSpec, seeds: &[u64]) -> Result<BenchmarkReport> {
    if !(spec.sizes.resample >= eval::KS_MIN_LEN && spec.sizes.holdout >= eval::KS_MIN_LEN) {
        return Err(GcmmError::InvalidConfig("resample and holdout sizes must allow a KS test".into()));
    }
    let truth = GroundTruth::new(spec.generator.clone())?;
    let rows: Vec<SeedRow> = seeds.par_iter().map(|&s| run_seed(spec, &truth, s)).collect();
    let median_p_values = Method::ALL
        .iter()
        .map(|&m| {
            let ps: Vec<f64> = rows
                .iter()
                .filter_map(|r| r.outcomes.iter().find(|o| o.method == m).and_then(|o| o.p_value))
                .collect();
            (m, median(&ps))
        })
        .collect();
    Ok(BenchmarkReport { spec: spec.clone(), rows, median_p_values })
}

/// Mixture marginal density of dimension `i`.
pub fn marginal_density(model: &AnyModel, i: usize, x: f64) -> f64 {
    match model {
        AnyModel::Gcmm(m) => (0..m.k()).map(|k| m.weights()[k] * m.marginal(k, i).pdf(x)).sum(),
        AnyModel::Gmm(m) => (0..m.k())
            .map(|k| {
                let d = m.d();
                let sd = m.covariances()[k][i * d + i].sqrt();
                m.weights()[k] * (normal::ln_pdf((x - m.means()[k][i]) / sd)).exp() / sd
            })
            .sum(),
    }
}

/// Equal-width histogram of column `i` next to the model's marginal density
/// at each bin center.
pub fn histogram_rows(model: &AnyModel, data: &SyncDataset, i: usize, bins: usize) -> Vec<[f64; 4]> {
    let col = data.column(i);
    let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut counts = vec![0usize; bins];
    for v in &col {
        let b = (((v - lo) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    (0..bins)
        .map(|b| {
            let left = lo + b as f64 * width;
            let empirical = counts[b] as f64 / (col.len() as f64 * width);
            [left, left + width, empirical, marginal_density(model, i, left + 0.5 * width)]
        })
        .collect()
}

/// Quantile pairs `(level, data quantile, model-sample quantile)` of the
/// row sums.
pub fn qq_rows(data_sums: &[f64], model_sums: &[f64], levels: usize) -> Vec<[f64; 3]> {
    let sorted = |v: &[f64]| {
        let mut s = v.to_vec();
        s.sort_by(f64::total_cmp);
        s
    };
    let (a, b) = (sorted(data_sums), sorted(model_sums));
    let pick = |s: &[f64], p: f64| s[((p * s.len() as f64) as usize).min(s.len() - 1)];
    (0..levels)
        .map(|j| {
            let p = (j as f64 + 0.5) / levels as f64;
            [p, pick(&a, p), pick(&b, p)]
        })
        .collect()
}

/// Most probable component of every row and its responsibility.
pub fn cluster_assignments(model: &AnyModel, data: &SyncDataset) -> Result<Vec<(usize, f64)>> {
    let resp = match model {
        AnyModel::Gcmm(m) => em::e_step(m, data)?.0,
        AnyModel::Gmm(m) => data
            .rows()
            .flat_map(|x| {
                let t = m.log_joint_terms(x);
                let lse = normal::log_sum_exp(&t);
                t.into_iter().map(move |v| (v - lse).exp())
            })
            .collect(),
    };
    let k = resp.len() / data.n();
    Ok(resp
        .chunks_exact(k)
        .map(|r| r.iter().copied().enumerate().fold((0, f64::MIN), |b, (j, v)| if v > b.1 { (j, v) } else { b }))
        .collect())
}

/// Plot-data CSVs: `hist_<dimension>.csv` per dimension, `qq_sum.csv` and
/// `clusters.csv`. Returns the written paths.
pub fn export_plots(model: &AnyModel, data: &SyncDataset, out_dir: &Path, seed: u64) -> Result<Vec<std::path::PathBuf>> {
    const BINS: usize = 50;
    const LEVELS: usize = 99;
    if model.d() != data.d() {
        return Err(GcmmError::InvalidData(format!("model has D = {}, data has D = {}", model.d(), data.d())));
    }
    std::fs::create_dir_all(out_dir).map_err(|source| GcmmError::Io { path: out_dir.to_path_buf(), source })?;
    let mut written = Vec::new();
    let mut emit = |name: String, body: String| -> Result<()> {
        let path = out_dir.join(name);
        write_file(&path, body.as_bytes())?;
        written.push(path);
        Ok(())
    };

    for (i, name) in data.dimension_names().iter().enumerate() {
        let mut body = String::from("bin_left,bin_right,empirical_density,model_density\n");
        for r in histogram_rows(model, data, i, BINS) {
            let _ = writeln!(body, "{},{},{},{}", r[0], r[1], r[2], r[3]);
        }
        emit(format!("hist_{name}.csv"), body)?;
    }

    let draws = data.n().max(10_000);
    let sample = eval::sample_model(model, draws, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let mut body = String::from("level,empirical,model\n");
    for r in qq_rows(&eval::sum_dimension(data), &eval::sum_dimension(&sample), LEVELS) {
        let _ = writeln!(body, "{},{},{}", r[0], r[1], r[2]);
    }
    emit("qq_sum.csv".into(), body)?;

    let mut body = data.dimension_names().join(",");
    body.push_str(",cluster,responsibility\n");
    for (x, (c, r)) in data.rows().zip(cluster_assignments(model, data)?) {
        for v in x {
            let _ = write!(body, "{v},");
        }
        let _ = writeln!(body, "{c},{r}");
    }
    emit("clusters.csv".into(), body)?;
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn gaussian_spec(rho: f64) -> GeneratorSpec {
        GeneratorSpec {
            dimension_names: None,
            components: vec![ComponentSpec {
                weight: 1.0,
                rho,
                correlation: None,
                marginals: vec![MarginalFamily::Gaussian { mean: 0.0, sd: 1.0 }; 2],
            }],
        }
    }

    #[test]
    fn degenerate_spec_samples_standard_normal() {
        let truth = GroundTruth::new(gaussian_spec(0.0)).unwrap();
        let s = truth.sample(20_000, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let n = s.n() as f64;
        for i in 0..2 {
            let c = s.column(i);
            let mean = c.iter().sum::<f64>() / n;
            let var = c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 4.0 / n.sqrt());
            assert!((var - 1.0).abs() < 0.05);
        }
        let cov = s.rows().map(|r| r[0] * r[1]).sum::<f64>() / n;
        assert!(cov.abs() < 4.0 / n.sqrt());

        // the tabulated model gives the same picture
        let model = make_ground_truth(&gaussian_spec(0.0)).unwrap();
        let s = eval::sample_gcmm(&model, 20_000, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let mean0 = s.column(0).iter().sum::<f64>() / n;
        assert!(mean0.abs() < 4.0 / n.sqrt());
    }

    #[test]
    fn tabulated_cdf_matches_quantile_levels() {
        let model = make_ground_truth(&GeneratorSpec::default()).unwrap();
        model.validate().unwrap();
        assert_eq!(model.k(), 3);
        let fam = MarginalFamily::Lognormal { mu: 0.0, sigma: 0.6 };
        let m = model.marginal(0, 0);
        for p in [0.001, 0.1, 0.5, 0.9, 0.999] {
            assert_abs_diff_eq!(m.cdf(fam.quantile(p)), p, epsilon = 1e-4);
        }
    }

    #[test]
    fn three_component_spec_validates() {
        let mut spec = GeneratorSpec::default();
        for (c, rho) in spec.components.iter_mut().zip([0.8, -0.5, 0.0]) {
            c.rho = rho;
        }
        make_ground_truth(&spec).unwrap().validate().unwrap();
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(GroundTruth::new(gaussian_spec(1.0)).is_err());
        let mut bad = gaussian_spec(0.0);
        bad.components[0].marginals[0] = MarginalFamily::Lognormal { mu: 0.0, sigma: -1.0 };
        assert!(make_ground_truth(&bad).is_err());
        let mut bad = gaussian_spec(0.0);
        bad.components[0].correlation = Some(vec![1.0, 2.0, 2.0, 1.0]);
        assert!(bad.validate().is_err());
    }

    #[test]
    fn student_t_quantiles_are_symmetric() {
        let t = MarginalFamily::StudentT { nu: 3.0, loc: 1.0, scale: 2.0 };
        assert_abs_diff_eq!(t.quantile(0.5), 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(t.quantile(0.9) - 1.0, 1.0 - t.quantile(0.1), epsilon = 1e-9);
        // t_3 upper 97.5% point is 3.182446
        assert_abs_diff_eq!((t.quantile(0.975) - 1.0) / 2.0, 3.182_446_305_284_263, epsilon = 1e-6);
    }

    fn rows(n: usize) -> SyncDataset {
        SyncDataset::from_rows(&(0..n).map(|i| vec![i as f64, -(i as f64)]).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn keep_everything_leaves_pools_empty() {
        let (s, u) = desynchronize(&rows(50), 1.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(s, rows(50));
        assert!(u.is_empty());
    }

    #[test]
    fn five_hundred_rows_keep_sixty_percent() {
        let (s, u) = desynchronize(&rows(500), 0.6, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(s.n(), 300);
        assert_eq!(u.pool(0).len(), 200);
        assert_eq!(u.pool(1).len(), 200);
    }

    #[test]
    fn desynchronize_conserves_values() {
        for (n, keep, seed) in [(10, 0.25, 1), (97, 0.5, 2), (300, 0.9, 3), (33, 0.07, 4)] {
            let data = rows(n);
            let (s, u) = desynchronize(&data, keep, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            for i in 0..2 {
                assert_eq!(s.n() + u.pool(i).len(), n);
                let mut all: Vec<f64> = s.column(i).into_iter().chain(u.pool(i).iter().copied()).collect();
                let mut want = data.column(i);
                all.sort_by(f64::total_cmp);
                want.sort_by(f64::total_cmp);
                assert_eq!(all, want);
            }
        }
        assert!(desynchronize(&rows(10), 0.1, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn drop_rates_thin_pools() {
        let (_, u) =
            desynchronize_with_drops(&rows(1000), 0.5, Some(&[0.0, 1.0]), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(u.pool(0).len(), 500);
        assert!(u.pool(1).is_empty());
    }

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn benchmark_is_reproducible_and_well_formed() {
        let spec = BenchmarkSpec {
            sizes: BenchmarkSizes { train: 300, keep_fraction: 0.7, resample: 300, holdout: 300 },
            k: KChoice::Fixed(2),
            max_iters: 20,
            ..BenchmarkSpec::default()
        };
        let a = run_benchmark(&spec, &[1, 2]).unwrap();
        let b = run_benchmark(&spec, &[1, 2]).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert_eq!(a.rows.len(), 2);
        for row in &a.rows {
            assert_eq!(row.outcomes.len(), 3);
            assert!(row.outcomes.iter().all(|o| o.p_value.is_some_and(|p| (0.0..=1.0).contains(&p))));
        }
        let header = a.to_text().lines().next().unwrap().to_string();
        let labels: Vec<usize> = ["GMM", "Base Case", "Extra-Data"].iter().map(|l| header.find(l).unwrap()).collect();
        assert!(labels.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn plot_tables_have_expected_shapes() {
        let truth = GroundTruth::new(gaussian_spec(0.5)).unwrap();
        let data = truth.sample(500, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let model = AnyModel::Gcmm(em::fit(&data, None, &FitConfig::new(1)).unwrap().0);
        let hist = histogram_rows(&model, &data, 0, 20);
        assert_eq!(hist.len(), 20);
        let mass: f64 = hist.iter().map(|r| r[2] * (r[1] - r[0])).sum();
        assert_abs_diff_eq!(mass, 1.0, epsilon = 1e-9);
        let qq = qq_rows(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0], 3);
        assert!(qq.iter().all(|r| r[1] == r[2]));
        let clusters = cluster_assignments(&model, &data).unwrap();
        assert!(clusters.iter().all(|(c, r)| *c == 0 && *r == 1.0));

        let dir = tempfile::tempdir().unwrap();
        let files = export_plots(&model, &data, dir.path(), 0).unwrap();
        assert_eq!(files.len(), 4);
    }
}
