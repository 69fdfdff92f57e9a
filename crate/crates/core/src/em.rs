//! Expectation-maximization for Gaussian copula mixtures.
//!
//! Two variants share one loop: the base algorithm, where the marginals of
//! component `k` are rebuilt as the responsibility-weighted ECDF of the
//! synchronized data, and the unsynchronized variant, where every extra
//! per-dimension observation gets its own responsibility from the current
//! marginal densities and joins the pooled ECDF. Weights and copulas are
//! always estimated from synchronized rows only.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use rayon::prelude::*;
use serde::Serialize;

use crate::copula::{self, CorrelationMatrix};
use crate::data::{SyncDataset, UnsyncDataset};
use crate::error::{GcmmError, Result};
use crate::kmeans;
use crate::marginal::{build_augmented_ecdf, build_weighted_ecdf, MarginalEstimator};
use crate::model::{FitConfig, GcmmModel};
use crate::normal::log_sum_exp;

const GUARD_HALVINGS: usize = 10;

/// Posterior component probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct Responsibilities {
    pub k: usize,
    /// N x K, row-major.
    pub sync: Vec<f64>,
    /// One n_i x K row-major matrix per dimension.
    pub unsync: Vec<Vec<f64>>,
}

impl Responsibilities {
    pub fn sync_only(k: usize, sync: Vec<f64>) -> Self {
        Self { k, sync, unsync: Vec::new() }
    }

    pub fn sync_row(&self, n: usize) -> &[f64] {
        &self.sync[n * self.k..(n + 1) * self.k]
    }

    pub fn sync_column(&self, k: usize) -> Vec<f64> {
        column(&self.sync, self.k, k)
    }

    pub fn unsync_column(&self, i: usize, k: usize) -> Vec<f64> {
        column(&self.unsync[i], self.k, k)
    }
}

fn column(m: &[f64], width: usize, k: usize) -> Vec<f64> {
    m.chunks_exact(width).map(|r| r[k]).collect()
}

/// Per-iteration diagnostics of one fit.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EmTrace {
    /// Log-likelihood of the synchronized data after each iteration.
    pub log_likelihoods: Vec<f64>,
    /// Log-likelihood of the initial model.
    pub initial_log_likelihood: f64,
    pub converged: bool,
    pub iterations_run: usize,
    pub final_change: f64,
    /// Iterations whose rebuilt marginals lowered the likelihood and were
    /// replaced by a step with the previous marginals.
    pub rejected_marginal_updates: usize,
    /// Index of the start this run came from (0 is the k-means start).
    pub start: usize,
}

impl EmTrace {
    pub(crate) fn new(initial: f64) -> Self {
        Self {
            log_likelihoods: Vec::new(),
            initial_log_likelihood: initial,
            converged: false,
            iterations_run: 0,
            final_change: f64::NAN,
            rejected_marginal_updates: 0,
            start: 0,
        }
    }

    /// Continues this trace with a run that started from its final model.
    fn append(&mut self, rest: EmTrace) {
        self.log_likelihoods.extend(rest.log_likelihoods);
        self.iterations_run += rest.iterations_run;
        self.converged = rest.converged;
        self.final_change = rest.final_change;
        self.rejected_marginal_updates += rest.rejected_marginal_updates;
    }

    /// Log-likelihood of the returned model.
    pub fn final_log_likelihood(&self) -> f64 {
        self.log_likelihoods.last().copied().unwrap_or(self.initial_log_likelihood)
    }
}

/// Relative change used as the stopping rule.
pub fn relative_change(previous: f64, current: f64) -> f64 {
    (current - previous).abs() / (1.0 + current.abs())
}

/// `ln sum_k exp(a_k) prod_i z_ki`, where `a_k = ln pi_k + ln c_k(y_k)` and
/// `z_ki` are the marginal densities. This is one observation's term of the
/// mixture log-likelihood with the transformed coordinates held fixed.
pub fn point_log_likelihood(log_weighted_copula: &[f64], z: &[Vec<f64>]) -> f64 {
    let terms: Vec<f64> = log_weighted_copula
        .iter()
        .zip(z)
        .map(|(a, zk)| a + zk.iter().map(|v| v.ln()).sum::<f64>())
        .collect();
    log_sum_exp(&terms)
}

/// Row-wise softmax of log terms. Returns the log normalizer.
fn normalize_row(terms: &[f64], out: &mut [f64]) -> f64 {
    let lse = log_sum_exp(terms);
    let mut sum = 0.0;
    for (o, t) in out.iter_mut().zip(terms) {
        *o = (t - lse).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
    lse
}

fn e_step_at(model: &GcmmModel, data: &SyncDataset, iteration: usize) -> Result<(Vec<f64>, f64)> {
    let k = model.k();
    let terms: Vec<Vec<f64>> =
        (0..data.n()).into_par_iter().map(|n| model.log_joint_terms(data.row(n))).collect();
    let mut resp = vec![0.0; data.n() * k];
    let mut ll = 0.0;
    for (row, out) in terms.iter().zip(resp.chunks_exact_mut(k)) {
        if let Some(c) = row.iter().position(|t| t.is_nan() || *t == f64::INFINITY) {
            return Err(GcmmError::NonFiniteLikelihood { iteration, component: c });
        }
        let lse = normalize_row(row, out);
        if !lse.is_finite() {
            let c = row.iter().position(|t| !t.is_finite()).unwrap_or(0);
            return Err(GcmmError::NonFiniteLikelihood { iteration, component: c });
        }
        ll += lse;
    }
    Ok((resp, ll))
}

/// Responsibilities of the synchronized rows and the mixture log-likelihood
/// `sum_n ln sum_k pi_k c_k(y_nk) prod_i f_ki(x_ni)`.
pub fn e_step(model: &GcmmModel, data: &SyncDataset) -> Result<(Vec<f64>, f64)> {
    if model.d() != data.d() {
        return Err(GcmmError::InvalidData(format!(
            "model has D = {}, data has D = {}",
            model.d(),
            data.d()
        )));
    }
    e_step_at(model, data, 0)
}

/// Mixture log-likelihood of the synchronized rows.
pub fn log_likelihood(model: &GcmmModel, data: &SyncDataset) -> Result<f64> {
    e_step(model, data).map(|(_, ll)| ll)
}

/// Responsibilities of unsynchronized observations from the marginal
/// densities alone: `r'_k ∝ pi_k f_ki(x)`.
pub fn e_step_unsync(model: &GcmmModel, unsync: &UnsyncDataset) -> Vec<Vec<f64>> {
    let k = model.k();
    let log_w: Vec<f64> = model.weights().iter().map(|w| w.ln()).collect();
    (0..unsync.d())
        .map(|i| {
            let pool = unsync.pool(i);
            let terms: Vec<Vec<f64>> = pool
                .par_iter()
                .map(|&x| (0..k).map(|c| log_w[c] + model.marginal(c, i).ln_pdf(x)).collect())
                .collect();
            let mut out = vec![0.0; pool.len() * k];
            for (row, o) in terms.iter().zip(out.chunks_exact_mut(k)) {
                normalize_row(row, o);
            }
            out
        })
        .collect()
}

/// Log-likelihood of the unsynchronized pools, each point scored by the
/// mixture of its own dimension's marginals.
pub fn pool_log_likelihood(model: &GcmmModel, unsync: &UnsyncDataset) -> f64 {
    let k = model.k();
    let log_w: Vec<f64> = model.weights().iter().map(|w| w.ln()).collect();
    (0..unsync.d())
        .map(|i| {
            let per_point: Vec<f64> = unsync
                .pool(i)
                .par_iter()
                .map(|&x| {
                    let terms: Vec<f64> =
                        (0..k).map(|c| log_w[c] + model.marginal(c, i).ln_pdf(x)).collect();
                    log_sum_exp(&terms)
                })
                .collect();
            per_point.iter().sum::<f64>()
        })
        .sum()
}

/// Clamps weights at `floor` and rescales the rest so the total stays one.
pub(crate) fn floor_weights(raw: &[f64], floor: f64) -> Vec<f64> {
    let mut pinned = vec![false; raw.len()];
    loop {
        let free: f64 = raw.iter().zip(&pinned).filter(|(_, p)| !**p).map(|(w, _)| w).sum();
        let budget = 1.0 - floor * pinned.iter().filter(|p| **p).count() as f64;
        let out: Vec<f64> = raw
            .iter()
            .zip(&pinned)
            .map(|(w, p)| if *p { floor } else { w * budget / free })
            .collect();
        let mut changed = false;
        for (o, p) in out.iter().zip(pinned.iter_mut()) {
            if !*p && *o < floor {
                *p = true;
                changed = true;
            }
        }
        if !changed {
            return out;
        }
    }
}

/// Kish effective sample size `(sum w)^2 / sum w^2`.
pub(crate) fn effective_size(weights: &[f64]) -> f64 {
    let total: f64 = weights.iter().sum();
    let sq: f64 = weights.iter().map(|w| w * w).sum();
    if sq > 0.0 {
        total * total / sq
    } else {
        0.0
    }
}

pub(crate) fn ridge_for(scatter: &[f64], d: usize, relative: f64) -> f64 {
    let trace: f64 = (0..d).map(|i| scatter[i * d + i]).sum();
    relative * trace / d as f64
}

/// Copula update from weighted transformed points. With a previous matrix
/// the candidate is only accepted if it does not lower the expected log
/// copula density; otherwise it is pulled back towards the previous matrix.
fn update_correlation(
    y: &[f64],
    d: usize,
    weights: &[f64],
    config: &FitConfig,
    previous: Option<&CorrelationMatrix>,
) -> Result<CorrelationMatrix> {
    let scatter = match copula::weighted_scatter(y, d, weights) {
        Ok(s) => s,
        Err(e) => return previous.cloned().ok_or(e),
    };
    let candidate = copula::correlation_from_scatter(&scatter, d, ridge_for(&scatter, d, config.ridge));
    let Some(previous) = previous else {
        return candidate.or_else(|e| match e {
            GcmmError::Singular(_) => Ok(CorrelationMatrix::identity(d)),
            other => Err(other),
        });
    };
    let Ok(candidate) = candidate else {
        return Ok(previous.clone());
    };
    let baseline = previous.expected_log_density(&scatter);
    if candidate.expected_log_density(&scatter) >= baseline {
        return Ok(candidate);
    }
    let mut t = 0.5;
    for _ in 0..GUARD_HALVINGS {
        if let Ok(p) = previous.blend(&candidate, t) {
            if p.expected_log_density(&scatter) >= baseline {
                return Ok(p);
            }
        }
        t *= 0.5;
    }
    Ok(previous.clone())
}

struct Pools<'a> {
    data: &'a UnsyncDataset,
    resp: &'a [Vec<f64>],
}

fn m_step_impl(
    data: &SyncDataset,
    resp: &[f64],
    pools: Option<Pools<'_>>,
    config: &FitConfig,
    current: Option<&GcmmModel>,
) -> Result<GcmmModel> {
    let (n, d, k) = (data.n(), data.d(), config.k);
    if resp.len() != n * k {
        return Err(GcmmError::InvalidData("responsibilities do not match the data".into()));
    }
    let opts = config.marginal_options();
    let columns: Vec<Vec<f64>> = (0..d).map(|i| data.column(i)).collect();
    let mut totals = Vec::with_capacity(k);
    let mut correlations = Vec::with_capacity(k);
    let mut marginals: Vec<Vec<MarginalEstimator>> = Vec::with_capacity(k);

    for c in 0..k {
        let weights = column(resp, k, c);
        let total: f64 = weights.iter().sum();
        totals.push(total);

        if total < config.weight_floor * n as f64 || effective_size(&weights) < (d + 1) as f64 {
            let (row, p) = reset_component(data, &columns, resp, config)?;
            marginals.push(row);
            correlations.push(p);
            continue;
        }

        let row: Vec<MarginalEstimator> = match current {
            Some(m) if !config.update_marginals => m.marginals()[c].clone(),
            _ => (0..d)
                .map(|i| match &pools {
                    Some(p) => {
                        let extra = column(&p.resp[i], k, c);
                        build_augmented_ecdf(&columns[i], &weights, p.data.pool(i), &extra, opts)
                    }
                    None => build_weighted_ecdf(&columns[i], &weights, opts),
                })
                .collect::<Result<_>>()?,
        };

        let mut y = vec![0.0; n * d];
        for (yn, (x, w)) in y.chunks_exact_mut(d).zip(data.rows().zip(&weights)) {
            if *w > 0.0 {
                for i in 0..d {
                    yn[i] = row[i].gaussianize(x[i]);
                }
            }
        }
        let previous = current.map(|m| m.correlation(c));
        correlations.push(update_correlation(&y, d, &weights, config, previous)?);
        marginals.push(row);
    }

    let raw: Vec<f64> = totals.iter().map(|t| t / n as f64).collect();
    let weights = floor_weights(&raw, config.weight_floor);
    GcmmModel::new(weights, correlations, marginals)?.with_dimension_names(data.dimension_names().to_vec())
}

/// Re-seeds a collapsed component on the least confidently assigned rows,
/// with an independence copula.
fn reset_component(
    data: &SyncDataset,
    columns: &[Vec<f64>],
    resp: &[f64],
    config: &FitConfig,
) -> Result<(Vec<MarginalEstimator>, CorrelationMatrix)> {
    let (n, d, k) = (data.n(), data.d(), config.k);
    let count = ((config.weight_floor * n as f64).ceil() as usize).max(2 * (d + 1)).min(n);
    let confidence: Vec<f64> =
        resp.chunks_exact(k).map(|r| r.iter().copied().fold(0.0, f64::max)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| confidence[a].total_cmp(&confidence[b]).then(a.cmp(&b)));
    let mut weights = vec![0.0; n];
    for &i in &order[..count] {
        weights[i] = 1.0;
    }
    let row = (0..d)
        .map(|i| build_weighted_ecdf(&columns[i], &weights, config.marginal_options()))
        .collect::<Result<_>>()?;
    Ok((row, CorrelationMatrix::identity(d)))
}

/// Base-case M-step. `current` supplies the previous copulas (for the ascent
/// check) and, when marginal updates are disabled, the frozen marginals.
pub fn m_step_base(
    data: &SyncDataset,
    resp: &[f64],
    config: &FitConfig,
    current: &GcmmModel,
) -> Result<GcmmModel> {
    m_step_impl(data, resp, None, config, Some(current))
}

/// M-step with unsynchronized pools joining the marginal ECDFs.
pub fn m_step_unsync(
    data: &SyncDataset,
    unsync: &UnsyncDataset,
    resp: &Responsibilities,
    config: &FitConfig,
    current: &GcmmModel,
) -> Result<GcmmModel> {
    unsync.check_matches(data)?;
    if resp.unsync.len() != unsync.d() {
        return Err(GcmmError::InvalidData("one responsibility matrix per pool required".into()));
    }
    let pools = Pools { data: unsync, resp: &resp.unsync };
    m_step_impl(data, &resp.sync, Some(pools), config, Some(current))
}

fn check_feasible(data: &SyncDataset, k: usize) -> Result<()> {
    if data.n() < k * (data.d() + 1) {
        return Err(GcmmError::InvalidConfig(format!(
            "N ≥ K·(D+1) required (N = {}, K = {k}, D = {})",
            data.n(),
            data.d()
        )));
    }
    Ok(())
}

/// Hard k-means labels as 0/1 responsibilities.
pub(crate) fn initial_responsibilities<R: Rng + ?Sized>(
    data: &SyncDataset,
    config: &FitConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    config.validate()?;
    check_feasible(data, config.k)?;
    // tiny clusters are left to the collapse reset of the first M-step
    let labels = kmeans::partition(data, config.k, 1, rng)?;
    let mut resp = vec![0.0; data.n() * config.k];
    for (n, l) in labels.into_iter().enumerate() {
        resp[n * config.k + l] = 1.0;
    }
    Ok(resp)
}

/// k-means partition, then per cluster: its share as weight, member ECDFs
/// as marginals, and the correlation of the gaussianized members.
pub fn initialize<R: Rng + ?Sized>(data: &SyncDataset, config: &FitConfig, rng: &mut R) -> Result<GcmmModel> {
    let resp = initial_responsibilities(data, config, rng)?;
    m_step_impl(data, &resp, None, config, None)
}

/// Builds a model from given responsibilities, as the first M-step does.
pub fn model_from_responsibilities(data: &SyncDataset, resp: &[f64], config: &FitConfig) -> Result<GcmmModel> {
    config.validate()?;
    m_step_impl(data, resp, None, config, None)
}

/// Runs EM until the relative log-likelihood change drops below `tol` or
/// `max_iters` iterations have run. The trace always reports the
/// synchronized-data log-likelihood.
pub fn fit(
    data: &SyncDataset,
    unsync: Option<&UnsyncDataset>,
    config: &FitConfig,
) -> Result<(GcmmModel, EmTrace)> {
    config.validate()?;
    let pools = if config.use_unsync {
        let u = unsync.ok_or_else(|| {
            GcmmError::InvalidConfig("use_unsync requires unsynchronized data".into())
        })?;
        u.check_matches(data)?;
        Some(u)
    } else {
        None
    };

    best_of_starts(
        config,
        |start, rng| {
            if start == 0 {
                initialize(data, config, rng)
            } else {
                model_from_responsibilities(data, &random_responsibilities(data.n(), config.k, rng), config)
            }
        },
        |model, iters| run_em(data, pools, config, model, iters),
    )
}

/// Random generator for one start. Start 0 uses the plain seed.
pub(crate) fn start_rng(seed: u64, start: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(start as u64);
    rng
}

/// Short-run start selection: every start runs `start_iters` iterations,
/// and the one with the highest log-likelihood (earliest on ties) continues
/// to convergence. Errors from the k-means start are returned; later starts
/// that fail are skipped. A single component has nothing to randomize.
pub(crate) fn best_of_starts<M>(
    config: &FitConfig,
    mut init: impl FnMut(usize, &mut ChaCha8Rng) -> Result<M>,
    mut run: impl FnMut(M, usize) -> Result<(M, EmTrace)>,
) -> Result<(M, EmTrace)> {
    let starts = if config.k == 1 { 1 } else { config.starts };
    let first = init(0, &mut start_rng(config.seed, 0))?;
    if starts == 1 {
        return run(first, config.max_iters);
    }
    let warmup = config.start_iters.min(config.max_iters);
    let mut best = run(first, warmup)?;
    for start in 1..starts {
        let attempt = init(start, &mut start_rng(config.seed, start)).and_then(|m| run(m, warmup));
        if let Ok((model, mut trace)) = attempt {
            if trace.final_log_likelihood() > best.1.final_log_likelihood() {
                trace.start = start;
                best = (model, trace);
            }
        }
    }
    let (model, mut trace) = best;
    if trace.converged || trace.iterations_run >= config.max_iters {
        return Ok((model, trace));
    }
    let (model, rest) = run(model, config.max_iters - trace.iterations_run)?;
    trace.append(rest);
    Ok((model, trace))
}

/// Rows of independent flat Dirichlet draws.
pub(crate) fn random_responsibilities<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> Vec<f64> {
    let mut resp: Vec<f64> = (0..n * k).map(|_| rng.sample::<f64, _>(Exp1)).collect();
    for row in resp.chunks_exact_mut(k) {
        let total: f64 = row.iter().sum();
        row.iter_mut().for_each(|r| *r /= total);
    }
    resp
}

fn run_em(
    data: &SyncDataset,
    pools: Option<&UnsyncDataset>,
    config: &FitConfig,
    mut model: GcmmModel,
    max_iters: usize,
) -> Result<(GcmmModel, EmTrace)> {
    let (mut resp, mut ll) = e_step_at(&model, data, 0)?;
    let mut trace = EmTrace::new(ll);

    let frozen = FitConfig { update_marginals: false, ..config.clone() };
    for iteration in 1..=max_iters {
        let candidate = match pools {
            Some(u) => {
                let r = Responsibilities {
                    k: config.k,
                    sync: resp.clone(),
                    unsync: e_step_unsync(&model, u),
                };
                m_step_unsync(data, u, &r, config, &model)?
            }
            None => m_step_base(data, &resp, config, &model)?,
        };
        let (mut next_resp, mut next_ll) = e_step_at(&candidate, data, iteration)?;
        // With pools the marginals also answer for the unsynchronized points,
        // so the acceptance test scores those as well.
        let pooled = |m: &GcmmModel| pools.map_or(0.0, |u| pool_log_likelihood(m, u));
        let objective = ll + pooled(&model);
        let candidate_objective = next_ll + pooled(&candidate);
        model = if config.update_marginals && candidate_objective < objective {
            // The marginal rebuild is not an ascent step; keep the previous
            // marginals and update only the weights and copulas.
            let fallback = m_step_base(data, &resp, &frozen, &model)?;
            let (fallback_resp, fallback_ll) = e_step_at(&fallback, data, iteration)?;
            if fallback_ll + pooled(&fallback) >= candidate_objective {
                trace.rejected_marginal_updates += 1;
                next_resp = fallback_resp;
                next_ll = fallback_ll;
                fallback
            } else {
                candidate
            }
        } else {
            candidate
        };
        let change = relative_change(ll, next_ll);
        resp = next_resp;
        ll = next_ll;
        trace.log_likelihoods.push(ll);
        trace.iterations_run = iteration;
        trace.final_change = change;
        if change < config.tol {
            trace.converged = true;
            break;
        }
    }
    Ok((model, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::marginal::{BandwidthRule, MarginalOptions};
    use crate::normal;
    use approx::assert_abs_diff_eq;
    use rand_distr::{Distribution, Normal};

    fn fixed_marginal(values: &[f64], h: f64) -> MarginalEstimator {
        build_weighted_ecdf(
            values,
            &vec![1.0; values.len()],
            MarginalOptions::default().with_bandwidth(BandwidthRule::Fixed(h)),
        )
        .unwrap()
    }

    fn one_d_model(weights: Vec<f64>, rows: Vec<MarginalEstimator>) -> GcmmModel {
        let k = weights.len();
        GcmmModel::new(
            weights,
            vec![CorrelationMatrix::identity(1); k],
            rows.into_iter().map(|m| vec![m]).collect(),
        )
        .unwrap()
    }

    fn gaussian_copula_data(n: usize, rho: f64, seed: u64) -> SyncDataset {
        let p = CorrelationMatrix::bivariate(rho).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let z = copula::sample_correlated_normal(&p, &mut rng);
                vec![z[0].exp(), 3.0 * z[1]]
            })
            .collect();
        SyncDataset::from_rows(&rows).unwrap()
    }

    #[test]
    fn single_component_responsibilities_are_one() {
        let data = gaussian_copula_data(50, 0.3, 1);
        let model = initialize(&data, &FitConfig::new(1), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let (resp, ll) = e_step(&model, &data).unwrap();
        assert!(resp.iter().all(|r| *r == 1.0));
        assert!(ll.is_finite());
    }

    #[test]
    fn identical_components_split_evenly() {
        let m = fixed_marginal(&[0.0, 1.0, 2.5], 0.7);
        let model = one_d_model(vec![0.5, 0.5], vec![m.clone(), m]);
        let data = SyncDataset::from_rows(&[vec![0.3], vec![1.1], vec![9.0]]).unwrap();
        let (resp, _) = e_step(&model, &data).unwrap();
        assert!(resp.iter().all(|r| *r == 0.5));
    }

    #[test]
    fn responsibilities_match_direct_bayes_evaluation() {
        let a = fixed_marginal(&[0.0, 1.0], 1.0);
        let b = fixed_marginal(&[3.0, 4.0], 0.5);
        let model = one_d_model(vec![0.3, 0.7], vec![a, b]);
        let xs = [0.2, 2.0, 3.7];
        let data = SyncDataset::from_rows(&xs.map(|x| vec![x])).unwrap();
        let (resp, ll) = e_step(&model, &data).unwrap();

        // in 1D the identity copula contributes nothing: r ∝ pi_k f_k(x)
        let kde = |knots: [f64; 2], h: f64, x: f64| {
            knots.iter().map(|k| 0.5 * (-0.5 * ((x - k) / h).powi(2)).exp()).sum::<f64>()
                / (h * (2.0 * std::f64::consts::PI).sqrt())
        };
        let mut want_ll = 0.0;
        for (n, x) in xs.iter().enumerate() {
            let p0 = 0.3 * kde([0.0, 1.0], 1.0, *x);
            let p1 = 0.7 * kde([3.0, 4.0], 0.5, *x);
            assert_abs_diff_eq!(resp[2 * n], p0 / (p0 + p1), epsilon = 1e-12);
            assert_abs_diff_eq!(resp[2 * n + 1], p1 / (p0 + p1), epsilon = 1e-12);
            want_ll += (p0 + p1).ln();
        }
        assert_abs_diff_eq!(ll, want_ll, epsilon = 1e-10);
    }

    #[test]
    fn unsync_responsibilities_follow_bayes_rule() {
        let m = fixed_marginal(&[0.0, 1.0], 1.0);
        let model = one_d_model(vec![0.2, 0.8], vec![m.clone(), m]);
        let r = e_step_unsync(&model, &UnsyncDataset::new(vec![vec![0.5, 10.0]]).unwrap());
        for row in r[0].chunks(2) {
            assert_abs_diff_eq!(row[0], 0.2, epsilon = 1e-12);
            assert_abs_diff_eq!(row[1], 0.8, epsilon = 1e-12);
        }

        // f_1 = 0.1 and f_2 = 0.3 at x = 0, equal priors
        let narrow = fixed_marginal(&[0.0, 0.0], 1.0 / (0.3 * (2.0 * std::f64::consts::PI).sqrt()));
        let wide = fixed_marginal(&[0.0, 0.0], 1.0 / (0.1 * (2.0 * std::f64::consts::PI).sqrt()));
        assert_abs_diff_eq!(wide.pdf(0.0), 0.1, epsilon = 1e-14);
        assert_abs_diff_eq!(narrow.pdf(0.0), 0.3, epsilon = 1e-14);
        let model = one_d_model(vec![0.5, 0.5], vec![wide, narrow]);
        let r = e_step_unsync(&model, &UnsyncDataset::new(vec![vec![0.0]]).unwrap());
        assert_abs_diff_eq!(r[0][0], 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(r[0][1], 0.75, epsilon = 1e-12);
    }

    #[test]
    fn m_step_single_component_uses_plain_ecdf() {
        let data = gaussian_copula_data(40, 0.5, 2);
        let config = FitConfig::new(1);
        let init = initialize(&data, &config, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let model = m_step_base(&data, &vec![1.0; 40], &config, &init).unwrap();
        assert_eq!(model.weights(), [1.0]);
        let plain = build_weighted_ecdf(&data.column(0), &vec![1.0; 40], config.marginal_options()).unwrap();
        assert_eq!(model.marginal(0, 0), &plain);
    }

    #[test]
    fn m_step_hard_partition_uses_member_ecdfs() {
        let data = gaussian_copula_data(60, 0.2, 3);
        let config = FitConfig::new(2);
        let init = initialize(&data, &config, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let resp: Vec<f64> = (0..60).flat_map(|n| if n % 3 == 0 { [1.0, 0.0] } else { [0.0, 1.0] }).collect();
        let model = m_step_base(&data, &resp, &config, &init).unwrap();
        let members: Vec<f64> = (0..60).filter(|n| n % 3 == 0).map(|n| data.row(n)[1]).collect();
        let mut sorted = members.clone();
        sorted.sort_by(f64::total_cmp);
        assert_eq!(model.marginal(0, 1).knots(), sorted.as_slice());
        assert_abs_diff_eq!(model.weights()[0], 20.0 / 60.0, epsilon = 1e-15);
    }

    #[test]
    fn m_step_soft_weights_follow_pooled_sums() {
        let data = SyncDataset::from_rows(&[vec![1.0], vec![2.0], vec![3.0], vec![4.0]]).unwrap();
        let resp = [0.9, 0.1, 0.6, 0.4, 0.3, 0.7, 0.2, 0.8];
        let mut config = FitConfig::new(2);
        config.ridge = 0.0;
        let start = one_d_model(vec![0.5, 0.5], vec![fixed_marginal(&[1.0, 4.0], 1.0); 2]);
        let model = m_step_base(&data, &resp, &config, &start).unwrap();
        let col0 = [0.9, 0.6, 0.3, 0.2];
        let total: f64 = col0.iter().sum();
        for (j, y) in [1.0, 2.0, 3.0, 4.0].iter().enumerate() {
            let want: f64 = col0[..=j].iter().sum::<f64>() / total;
            assert_abs_diff_eq!(model.marginal(0, 0).step_cdf(*y), want, epsilon = 1e-15);
        }
        assert_abs_diff_eq!(model.weights()[0], 2.0 / 4.0, epsilon = 1e-15);
    }

    #[test]
    fn unsync_denominator_pools_both_weight_sets() {
        // sync weights (1, 1) and one unsync value with weight 2: total mass 4
        let est = build_augmented_ecdf(&[1.0, 2.0], &[1.0, 1.0], &[3.0], &[2.0], MarginalOptions::default())
            .unwrap();
        assert_eq!(est.step_cdf(1.0), 0.25);
        assert_eq!(est.step_cdf(2.0), 0.5);
    }

    #[test]
    fn m_step_unsync_with_empty_pools_matches_base() {
        let data = gaussian_copula_data(80, 0.4, 4);
        let config = FitConfig::new(2);
        let init = initialize(&data, &config, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let (resp, _) = e_step(&init, &data).unwrap();
        let empty = UnsyncDataset::empty(2);
        let r = Responsibilities { k: 2, sync: resp.clone(), unsync: e_step_unsync(&init, &empty) };
        let a = m_step_base(&data, &resp, &config, &init).unwrap();
        let b = m_step_unsync(&data, &empty, &r, &config, &init).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn right_tail_pool_adds_mass_beyond_old_maximum() {
        let data = gaussian_copula_data(80, 0.4, 5);
        let config = FitConfig::new(1);
        let init = initialize(&data, &config, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let max0 = data.column(0).into_iter().fold(f64::MIN, f64::max);
        let unsync = UnsyncDataset::new(vec![vec![max0 + 1.0, max0 + 2.0, max0 + 5.0], vec![]]).unwrap();
        let r = Responsibilities { k: 1, sync: vec![1.0; 80], unsync: e_step_unsync(&init, &unsync) };
        let model = m_step_unsync(&data, &unsync, &r, &config, &init).unwrap();
        let m = model.marginal(0, 0);
        assert!(m.cdf(max0) < 1.0 - m.clip_epsilon());
        assert_eq!(*m.knots().last().unwrap(), max0 + 5.0);
    }

    #[test]
    fn floor_weights_keeps_simplex() {
        let w = floor_weights(&[0.5, 0.5 - 1e-9, 1e-9], 1e-6);
        assert_abs_diff_eq!(w.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        assert!(w.iter().all(|v| *v >= 1e-6));
        assert_eq!(w[2], 1e-6);
    }

    #[test]
    fn collapsed_component_is_reset() {
        let data = gaussian_copula_data(60, 0.2, 6);
        let config = FitConfig::new(2);
        let init = initialize(&data, &config, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let resp: Vec<f64> = (0..60).flat_map(|_| [1.0, 0.0]).collect();
        let model = m_step_base(&data, &resp, &config, &init).unwrap();
        assert_eq!(model.correlation(1), &CorrelationMatrix::identity(2));
        assert_eq!(model.marginal(1, 0).knots().len(), 6);
        assert!(model.weights()[1] >= config.weight_floor);
    }

    #[test]
    fn component_resting_on_one_row_is_reset() {
        let data = gaussian_copula_data(60, 0.2, 6);
        let config = FitConfig::new(2);
        let init = initialize(&data, &config, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let resp: Vec<f64> = (0..60)
            .flat_map(|n| if n == 0 { [0.0, 1.0] } else { [1.0 - 1e-9, 1e-9] })
            .collect();
        let model = m_step_base(&data, &resp, &config, &init).unwrap();
        assert_eq!(model.correlation(1), &CorrelationMatrix::identity(2));
        assert!(model.log_density(data.row(0)).is_finite());
    }

    #[test]
    fn initialization_recovers_balanced_blobs() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let rows: Vec<Vec<f64>> = (0..400)
            .map(|n| {
                let c = if n % 2 == 0 { -8.0 } else { 8.0 };
                vec![c + noise.sample(&mut rng), -c + noise.sample(&mut rng)]
            })
            .collect();
        let data = SyncDataset::from_rows(&rows).unwrap();
        let model = initialize(&data, &FitConfig::new(2), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for w in model.weights() {
            assert!((w - 0.5).abs() <= 0.05);
        }
    }

    #[test]
    fn infeasible_k_is_rejected() {
        let data = gaussian_copula_data(5, 0.1, 8);
        let err = initialize(&data, &FitConfig::new(6), &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert!(matches!(err, GcmmError::InvalidConfig(_)));
    }

    #[test]
    fn zero_iterations_returns_initial_model() {
        let data = gaussian_copula_data(100, 0.3, 9);
        let mut config = FitConfig::new(2);
        config.max_iters = 0;
        let (model, trace) = fit(&data, None, &config).unwrap();
        let init = initialize(&data, &config, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(model, init);
        assert!(trace.log_likelihoods.is_empty());
        assert!(!trace.converged);
        assert_eq!(trace.iterations_run, 0);
    }

    #[test]
    fn fit_is_deterministic() {
        let data = gaussian_copula_data(300, 0.6, 10);
        let mut config = FitConfig::new(2);
        config.max_iters = 15;
        config.seed = 42;
        let (m1, t1) = fit(&data, None, &config).unwrap();
        let (m2, t2) = fit(&data, None, &config).unwrap();
        assert_eq!(t1, t2);
        assert_eq!(m1, m2);
    }

    #[test]
    fn single_copula_fit_recovers_correlation() {
        let data = gaussian_copula_data(5000, 0.6, 11);
        let config = FitConfig::new(1);
        let (model, trace) = fit(&data, None, &config).unwrap();
        assert!(trace.converged);
        for w in trace.log_likelihoods.windows(2).skip(1) {
            assert!(w[1] >= w[0] - 1e-8, "{} -> {}", w[0], w[1]);
        }
        assert!((model.correlation(0).get(0, 1) - 0.6).abs() < 0.05);
    }

    #[test]
    fn use_unsync_requires_pools() {
        let data = gaussian_copula_data(50, 0.1, 12);
        let mut config = FitConfig::new(1);
        config.use_unsync = true;
        assert!(fit(&data, None, &config).is_err());
    }

    #[test]
    fn point_log_likelihood_matches_direct_sum() {
        let a = [0.2f64.ln() + 0.1, 0.8f64.ln() - 0.3];
        let z = vec![vec![0.4, 1.3], vec![0.9, 0.05]];
        let direct = 0.2 * 0.1f64.exp() * 0.4 * 1.3 + 0.8 * (-0.3f64).exp() * 0.9 * 0.05;
        assert_abs_diff_eq!(point_log_likelihood(&a, &z), direct.ln(), epsilon = 1e-14);
        let _ = normal::ln_pdf(0.0);
    }

    #[test]
    fn pool_log_likelihood_matches_direct_mixture() {
        let wide = fixed_marginal(&[0.0, 0.0], 1.0 / (0.1 * (2.0 * std::f64::consts::PI).sqrt()));
        let narrow = fixed_marginal(&[0.0, 0.0], 1.0 / (0.3 * (2.0 * std::f64::consts::PI).sqrt()));
        let model = one_d_model(vec![0.25, 0.75], vec![wide, narrow]);
        let pools = UnsyncDataset::new(vec![vec![0.0, 0.0]]).unwrap();
        let direct = 2.0 * (0.25 * 0.1 + 0.75 * 0.3f64).ln();
        assert_abs_diff_eq!(pool_log_likelihood(&model, &pools), direct, epsilon = 1e-12);
        assert_eq!(pool_log_likelihood(&model, &UnsyncDataset::empty(1)), 0.0);
    }

    #[test]
    fn full_fit_never_lowers_the_likelihood() {
        for seed in 0..3 {
            let data = gaussian_copula_data(400, 0.5, 20 + seed);
            let mut config = FitConfig::new(3);
            config.seed = seed;
            config.max_iters = 40;
            let (_, trace) = fit(&data, None, &config).unwrap();
            let mut prev = trace.initial_log_likelihood;
            for &ll in &trace.log_likelihoods {
                assert!(ll >= prev, "{prev} -> {ll}");
                prev = ll;
            }
        }
    }

    #[test]
    fn random_responsibility_rows_sum_to_one() {
        let r = random_responsibilities(50, 4, &mut ChaCha8Rng::seed_from_u64(1));
        for row in r.chunks(4) {
            assert!(row.iter().all(|v| *v > 0.0));
            assert_abs_diff_eq!(row.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn continued_run_matches_an_uninterrupted_run() {
        let data = gaussian_copula_data(400, -0.4, 30);
        let mut config = FitConfig::new(3);
        config.tol = 1e-12;
        let start = initialize(&data, &config, &mut start_rng(0, 0)).unwrap();
        let (whole_model, whole) = run_em(&data, None, &config, start.clone(), 30).unwrap();
        let (head_model, mut split) = run_em(&data, None, &config, start, 5).unwrap();
        let (tail_model, tail) = run_em(&data, None, &config, head_model, 25).unwrap();
        split.append(tail);
        assert_eq!(split, whole);
        assert_eq!(tail_model, whole_model);
    }

    #[test]
    fn fit_returns_the_model_its_trace_describes() {
        let data = gaussian_copula_data(400, -0.4, 31);
        let mut config = FitConfig::new(3);
        config.max_iters = 30;
        config.start_iters = 5;
        let (model, trace) = fit(&data, None, &config).unwrap();
        assert_eq!(trace.iterations_run, trace.log_likelihoods.len());
        assert_abs_diff_eq!(log_likelihood(&model, &data).unwrap(), trace.final_log_likelihood(), epsilon = 1e-9);
    }

    #[test]
    fn best_of_starts_keeps_the_earliest_maximum() {
        // a "model" is its start index; each run adds one iteration per step
        let config = FitConfig { starts: 4, start_iters: 2, max_iters: 10, ..FitConfig::new(2) };
        let finals = [-3.0, -1.0, -2.0, -1.0];
        let mut runs = Vec::new();
        let (picked, trace) = best_of_starts(
            &config,
            |start, _| if start == 2 { Err(GcmmError::Singular("skipped".into())) } else { Ok(start) },
            |start, iters| {
                runs.push((start, iters));
                let mut t = EmTrace::new(-10.0);
                t.log_likelihoods = vec![finals[start]; iters];
                t.iterations_run = iters;
                Ok((start, t))
            },
        )
        .unwrap();
        assert_eq!((picked, trace.start), (1, 1));
        assert_eq!(runs, vec![(0, 2), (1, 2), (3, 2), (1, 8)]);
        assert_eq!(trace.iterations_run, 10);
        assert_eq!(trace.log_likelihoods.len(), 10);

        let one = FitConfig { starts: 4, ..FitConfig::new(1) };
        let mut calls = Vec::new();
        best_of_starts(&one, |_, _| Ok(()), |_, iters| {
            calls.push(iters);
            Ok(((), EmTrace::new(0.0)))
        })
        .unwrap();
        assert_eq!(calls, vec![one.max_iters]);
    }
}
