//! Full-covariance Gaussian mixture fitted by classical EM.
//!
//! Initialization, weight floor, ridge and stopping rule are shared with the
//! copula mixture so the two model classes are compared on equal terms.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::data::SyncDataset;
use crate::em::{
    best_of_starts, effective_size, floor_weights, initial_responsibilities, random_responsibilities, relative_change,
    ridge_for, EmTrace,
};
use crate::error::{GcmmError, Result};
use crate::model::{FitConfig, GmmModel};
use crate::normal::log_sum_exp;

/// `ln sum_k pi_k N(x; mu_k, Sigma_k)`.
pub fn gmm_log_density(model: &GmmModel, x: &[f64]) -> f64 {
    log_sum_exp(&model.log_joint_terms(x))
}

/// One ancestral draw.
pub fn sample_gmm<R: Rng + ?Sized>(model: &GmmModel, rng: &mut R) -> Vec<f64> {
    let picker = WeightedIndex::new(model.weights()).expect("validated weights");
    draw(model, picker.sample(rng), rng)
}

/// `n` ancestral draws.
pub fn sample_gmm_n<R: Rng + ?Sized>(model: &GmmModel, n: usize, rng: &mut R) -> Result<SyncDataset> {
    let picker = WeightedIndex::new(model.weights()).expect("validated weights");
    let mut values = Vec::with_capacity(n * model.d());
    for _ in 0..n {
        let k = picker.sample(rng);
        values.extend(draw(model, k, rng));
    }
    SyncDataset::new(values, model.d(), model.dimension_names().to_vec())
}

fn draw<R: Rng + ?Sized>(model: &GmmModel, k: usize, rng: &mut R) -> Vec<f64> {
    let d = model.d();
    let z: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let l = model.lower(k);
    (0..d)
        .map(|i| model.means()[k][i] + (0..=i).map(|j| l[i * d + j] * z[j]).sum::<f64>())
        .collect()
}

fn e_step(model: &GmmModel, data: &SyncDataset, iteration: usize) -> Result<(Vec<f64>, f64)> {
    let k = model.k();
    let terms: Vec<Vec<f64>> =
        (0..data.n()).into_par_iter().map(|n| model.log_joint_terms(data.row(n))).collect();
    let mut resp = vec![0.0; data.n() * k];
    let mut ll = 0.0;
    for (row, out) in terms.iter().zip(resp.chunks_exact_mut(k)) {
        let lse = log_sum_exp(row);
        if !lse.is_finite() {
            let component = row.iter().position(|t| !t.is_finite()).unwrap_or(0);
            return Err(GcmmError::NonFiniteLikelihood { iteration, component });
        }
        let mut sum = 0.0;
        for (o, t) in out.iter_mut().zip(row) {
            *o = (t - lse).exp();
            sum += *o;
        }
        out.iter_mut().for_each(|o| *o /= sum);
        ll += lse;
    }
    Ok((resp, ll))
}

/// Mixture log-likelihood of every row.
pub fn gmm_log_likelihood(model: &GmmModel, data: &SyncDataset) -> Result<f64> {
    e_step(model, data, 0).map(|(_, ll)| ll)
}

fn weighted_moments(data: &SyncDataset, weights: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let d = data.d();
    let total: f64 = weights.iter().sum();
    let mut mean = vec![0.0; d];
    for (x, w) in data.rows().zip(weights) {
        for i in 0..d {
            mean[i] += w * x[i];
        }
    }
    mean.iter_mut().for_each(|m| *m /= total);
    let mut cov = vec![0.0; d * d];
    for (x, w) in data.rows().zip(weights) {
        for i in 0..d {
            let di = x[i] - mean[i];
            for j in 0..=i {
                cov[i * d + j] += w * di * (x[j] - mean[j]);
            }
        }
    }
    for i in 0..d {
        for j in 0..=i {
            let v = cov[i * d + j] / total;
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
    }
    (mean, cov)
}

fn with_ridge(mut cov: Vec<f64>, d: usize, relative: f64) -> Vec<f64> {
    let ridge = ridge_for(&cov, d, relative);
    for i in 0..d {
        cov[i * d + i] += ridge;
    }
    cov
}

fn is_positive_definite(cov: &[f64], d: usize) -> bool {
    cov.iter().all(|v| v.is_finite()) && nalgebra::DMatrix::from_row_slice(d, d, cov).cholesky().is_some()
}

fn m_step(
    data: &SyncDataset,
    resp: &[f64],
    config: &FitConfig,
    current: Option<&GmmModel>,
) -> Result<GmmModel> {
    let (n, d, k) = (data.n(), data.d(), config.k);
    let uniform = vec![1.0; n];
    let (_, pooled_cov) = weighted_moments(data, &uniform);
    let fallback_cov = with_ridge(pooled_cov, d, config.ridge.max(1e-9));
    let mut totals = Vec::with_capacity(k);
    let mut means = Vec::with_capacity(k);
    let mut covariances = Vec::with_capacity(k);

    for c in 0..k {
        let weights: Vec<f64> = resp.chunks_exact(k).map(|r| r[c]).collect();
        let total: f64 = weights.iter().sum();
        totals.push(total);

        if total < config.weight_floor * n as f64 || effective_size(&weights) < (d + 1) as f64 {
            // collapsed: restart on the least confidently assigned rows
            let count = ((config.weight_floor * n as f64).ceil() as usize).max(2 * (d + 1)).min(n);
            let confidence: Vec<f64> =
                resp.chunks_exact(k).map(|r| r.iter().copied().fold(0.0, f64::max)).collect();
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| confidence[a].total_cmp(&confidence[b]).then(a.cmp(&b)));
            let mut picked = vec![0.0; n];
            order[..count].iter().for_each(|&i| picked[i] = 1.0);
            means.push(weighted_moments(data, &picked).0);
            covariances.push(fallback_cov.clone());
            continue;
        }

        let (mean, cov) = weighted_moments(data, &weights);
        let cov = with_ridge(cov, d, config.ridge);
        let cov = if is_positive_definite(&cov, d) {
            cov
        } else {
            match current {
                Some(m) => m.covariances()[c].clone(),
                None => fallback_cov.clone(),
            }
        };
        means.push(mean);
        covariances.push(cov);
    }

    let raw: Vec<f64> = totals.iter().map(|t| t / n as f64).collect();
    GmmModel::new(floor_weights(&raw, config.weight_floor), means, covariances)?
        .with_dimension_names(data.dimension_names().to_vec())
}

/// Classical EM for a full-covariance mixture.
/// Starts follow the same protocol as the copula mixture fit.
pub fn fit_gmm(data: &SyncDataset, config: &FitConfig) -> Result<(GmmModel, EmTrace)> {
    config.validate()?;
    best_of_starts(
        config,
        |start, rng| {
            let resp = if start == 0 {
                initial_responsibilities(data, config, rng)?
            } else {
                random_responsibilities(data.n(), config.k, rng)
            };
            m_step(data, &resp, config, None)
        },
        |model, iters| run_em(data, config, model, iters),
    )
}

fn run_em(data: &SyncDataset, config: &FitConfig, mut model: GmmModel, max_iters: usize) -> Result<(GmmModel, EmTrace)> {
    let (mut resp, mut ll) = e_step(&model, data, 0)?;
    let mut trace = EmTrace::new(ll);
    for iteration in 1..=max_iters {
        model = m_step(data, &resp, config, Some(&model))?;
        let (next_resp, next_ll) = e_step(&model, data, iteration)?;
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
