//! Model selection, sampling and two-sample goodness-of-fit testing.

use std::fmt::Write as _;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::copula;
use crate::data::{SyncDataset, UnsyncDataset};
use crate::em;
use crate::error::{GcmmError, Result};
use crate::gmm;
use crate::model::{AnyModel, FitConfig, GcmmModel};

/// Shortest sample accepted by [`ks_two_sample`].
pub const KS_MIN_LEN: usize = 8;
const KS_SERIES_CUTOFF: f64 = 1e-10;
const KS_MAX_TERMS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
    pub n1: usize,
    pub n2: usize,
}

/// Two-sample Kolmogorov-Smirnov test with the asymptotic p-value.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<KsResult> {
    if a.len() < KS_MIN_LEN || b.len() < KS_MIN_LEN {
        return Err(GcmmError::InvalidData(format!(
            "KS test needs at least {KS_MIN_LEN} values per sample (got {} and {})",
            a.len(),
            b.len()
        )));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(GcmmError::InvalidData("KS samples must be finite".into()));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n1, n2) = (a.len(), b.len());
    let (mut i, mut j) = (0, 0);
    let mut stat: f64 = 0.0;
    while i < n1 && j < n2 {
        let t = a[i].min(b[j]);
        while i < n1 && a[i] <= t {
            i += 1;
        }
        while j < n2 && b[j] <= t {
            j += 1;
        }
        stat = stat.max((i as f64 / n1 as f64 - j as f64 / n2 as f64).abs());
    }
    let ne = (n1 * n2) as f64 / (n1 + n2) as f64;
    let lambda = (ne.sqrt() + 0.12 + 0.11 / ne.sqrt()) * stat;
    Ok(KsResult { statistic: stat, p_value: kolmogorov_survival(lambda), n1, n2 })
}

/// `Q(λ) = 2 Σ_{j≥1} (-1)^{j-1} exp(-2 j² λ²)`, clamped to [0, 1].
pub fn kolmogorov_survival(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for j in 1..=KS_MAX_TERMS {
        let term = (-2.0 * (j * j) as f64 * lambda * lambda).exp();
        sum += sign * term;
        if term < KS_SERIES_CUTOFF {
            break;
        }
        sign = -sign;
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Gmm,
    Gcmm,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AicResult {
    pub k: usize,
    pub log_likelihood: f64,
    pub param_count: usize,
    pub aic: f64,
}

/// Free parameters of a fitted mixture. For copula mixtures each marginal is
/// charged `marginal_cost`; zero counts only weights and correlations.
pub fn param_count(kind: ModelKind, k: usize, d: usize, marginal_cost: usize) -> usize {
    let mixing = k - 1;
    match kind {
        ModelKind::Gmm => mixing + k * d + k * d * (d + 1) / 2,
        ModelKind::Gcmm => mixing + k * d * (d - 1) / 2 + k * d * marginal_cost,
    }
}

/// AIC with the default marginal charge of zero.
pub fn aic(log_likelihood: f64, k: usize, d: usize, kind: ModelKind) -> AicResult {
    aic_with_cost(log_likelihood, k, d, kind, 0)
}

pub fn aic_with_cost(log_likelihood: f64, k: usize, d: usize, kind: ModelKind, marginal_cost: usize) -> AicResult {
    let param_count = param_count(kind, k, d, marginal_cost);
    AicResult { k, log_likelihood, param_count, aic: 2.0 * param_count as f64 - 2.0 * log_likelihood }
}

/// Ancestral sampling: component, copula point, then marginal quantiles.
pub fn sample_gcmm<R: Rng + ?Sized>(model: &GcmmModel, n: usize, rng: &mut R) -> Result<SyncDataset> {
    let picker = WeightedIndex::new(model.weights()).expect("validated weights");
    let d = model.d();
    let mut values = Vec::with_capacity(n * d);
    for _ in 0..n {
        let k = picker.sample(rng);
        let u = copula::sample_copula(model.correlation(k), rng);
        for (i, ui) in u.into_iter().enumerate() {
            values.push(model.marginal(k, i).inverse_cdf(ui)?);
        }
    }
    SyncDataset::new(values, d, model.dimension_names().to_vec())
}

/// Samples from either model family.
pub fn sample_model<R: Rng + ?Sized>(model: &AnyModel, n: usize, rng: &mut R) -> Result<SyncDataset> {
    match model {
        AnyModel::Gcmm(m) => sample_gcmm(m, n, rng),
        AnyModel::Gmm(m) => gmm::sample_gmm_n(m, n, rng),
    }
}

/// Row sums.
pub fn sum_dimension(data: &SyncDataset) -> Vec<f64> {
    data.rows().map(|r| r.iter().sum()).collect()
}

/// One row of a model-selection table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelectionRow {
    pub k: usize,
    pub result: Option<AicResult>,
    pub iterations: Option<usize>,
    pub converged: Option<bool>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelectionReport {
    pub model: ModelKind,
    pub marginal_param_cost: usize,
    pub rows: Vec<SelectionRow>,
    pub best_k: Option<usize>,
}

impl SelectionReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:>2} {:>4} {:>16} {:>8} {:>16}  note", "", "K", "log_likelihood", "params", "AIC");
        for row in &self.rows {
            let star = if Some(row.k) == self.best_k { "*" } else { "" };
            match (&row.result, &row.error) {
                (Some(r), _) => {
                    let note = match row.converged {
                        Some(false) => "not converged",
                        _ => "",
                    };
                    let _ = writeln!(
                        out,
                        "{star:>2} {:>4} {:>16.4} {:>8} {:>16.4}  {note}",
                        r.k, r.log_likelihood, r.param_count, r.aic
                    );
                }
                (None, err) => {
                    let _ = writeln!(
                        out,
                        "{star:>2} {:>4} {:>16} {:>8} {:>16}  skipped: {}",
                        row.k,
                        "-",
                        "-",
                        "-",
                        err.as_deref().unwrap_or("unknown")
                    );
                }
            }
        }
        out
    }
}

/// Fits every K in `k_min..=k_max` (seed of each fit is `config.seed ^ K`)
/// and picks the lowest AIC, preferring the smaller K on ties. Failed fits
/// are reported and skipped.
pub fn select_k(
    data: &SyncDataset,
    unsync: Option<&UnsyncDataset>,
    k_min: usize,
    k_max: usize,
    config: &FitConfig,
    kind: ModelKind,
    marginal_cost: usize,
) -> Result<SelectionReport> {
    if k_min == 0 || k_min > k_max {
        return Err(GcmmError::InvalidConfig(format!("invalid K range {k_min}..{k_max}")));
    }
    let rows: Vec<SelectionRow> = (k_min..=k_max)
        .into_par_iter()
        .map(|k| {
            let mut cfg = config.clone();
            cfg.k = k;
            cfg.seed = config.seed ^ k as u64;
            let fitted = match kind {
                ModelKind::Gcmm => em::fit(data, unsync, &cfg).map(|(_, t)| t),
                ModelKind::Gmm => gmm::fit_gmm(data, &cfg).map(|(_, t)| t),
            };
            match fitted {
                Ok(trace) => SelectionRow {
                    k,
                    result: Some(aic_with_cost(trace.final_log_likelihood(), k, data.d(), kind, marginal_cost)),
                    iterations: Some(trace.iterations_run),
                    converged: Some(trace.converged),
                    error: None,
                },
                Err(e) => SelectionRow { k, result: None, iterations: None, converged: None, error: Some(e.to_string()) },
            }
        })
        .collect();
    let best_k = rows
        .iter()
        .filter_map(|r| r.result)
        .fold(None::<AicResult>, |best, r| match best {
            Some(b) if b.aic <= r.aic => Some(b),
            _ => Some(r),
        })
        .map(|r| r.k);
    Ok(SelectionReport { model: kind, marginal_param_cost: marginal_cost, rows, best_k })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::copula::CorrelationMatrix;
    use crate::marginal::{build_weighted_ecdf, MarginalOptions};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    /// Sup of |F_a(t) - F_b(t)| over every pooled point, by direct counting.
    fn brute_ks(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .chain(b)
            .map(|t| {
                let fa = a.iter().filter(|v| *v <= t).count();
                let fb = b.iter().filter(|v| *v <= t).count();
                (fa as f64 / a.len() as f64 - fb as f64 / b.len() as f64).abs()
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn identical_samples() {
        let a: Vec<f64> = (0..20).map(|i| (i as f64).sin()).collect();
        let r = ks_two_sample(&a, &a).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert_eq!(r.p_value, 1.0);
    }

    #[test]
    fn disjoint_samples() {
        let r = ks_two_sample(&[0.0; 10], &[1.0; 12]).unwrap();
        assert_eq!(r.statistic, 1.0);
        assert!(r.p_value < 1e-3);
    }

    #[test]
    fn short_sample_rejected() {
        assert!(ks_two_sample(&[1.0; 7], &[1.0; 20]).is_err());
    }

    #[test]
    fn normal_samples_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a: Vec<f64> = (0..1000).map(|_| rng.sample(StandardNormal)).collect();
        let b: Vec<f64> = (0..1000).map(|_| rng.sample(StandardNormal)).collect();
        let r = ks_two_sample(&a, &b).unwrap();
        assert_eq!(r.statistic, brute_ks(&a, &b));
        assert!(r.p_value > 0.0 && r.p_value <= 1.0);
    }

    #[test]
    fn kolmogorov_known_values() {
        // Q(1) and Q(0.5), from the alternating series evaluated to convergence
        assert_abs_diff_eq!(kolmogorov_survival(1.0), 0.269_999_671_677_862_4, epsilon = 1e-9);
        assert_abs_diff_eq!(kolmogorov_survival(0.5), 0.963_945_243_618_779_7, epsilon = 1e-9);
        assert_eq!(kolmogorov_survival(0.0), 1.0);
        assert!(kolmogorov_survival(0.01) > 1.0 - 1e-9);
    }

    proptest! {
        #[test]
        fn merge_scan_equals_brute_force(
            a in prop::collection::vec(-5i32..5, 8..50),
            b in prop::collection::vec(-5i32..5, 8..50),
        ) {
            let a: Vec<f64> = a.into_iter().map(f64::from).collect();
            let b: Vec<f64> = b.into_iter().map(f64::from).collect();
            prop_assert_eq!(ks_two_sample(&a, &b).unwrap().statistic, brute_ks(&a, &b));
        }

        #[test]
        fn aic_grows_with_parameters(ll in -1e4f64..1e4, k in 1usize..6, d in 1usize..5) {
            let g = aic(ll, k, d, ModelKind::Gmm);
            let c = aic(ll, k, d, ModelKind::Gcmm);
            prop_assert!(g.param_count >= c.param_count);
            prop_assert!(g.aic >= c.aic);
            prop_assert_eq!(g.aic, 2.0 * g.param_count as f64 - 2.0 * ll);
        }
    }

    #[test]
    fn parameter_counts() {
        assert_eq!(param_count(ModelKind::Gmm, 1, 2, 0), 5);
        assert_eq!(param_count(ModelKind::Gcmm, 3, 2, 0), 5);
        assert_eq!(param_count(ModelKind::Gcmm, 1, 1, 0), 0);
        assert_eq!(param_count(ModelKind::Gcmm, 3, 2, 4), 5 + 24);
    }

    #[test]
    fn row_sums() {
        let data = SyncDataset::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(sum_dimension(&data), vec![3.0, 7.0]);
        let one = SyncDataset::from_rows(&[vec![1.5], vec![-2.0]]).unwrap();
        assert_eq!(sum_dimension(&one), vec![1.5, -2.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rows: Vec<Vec<f64>> = (0..100).map(|_| (0..4).map(|_| rng.random_range(-9.0..9.0)).collect()).collect();
        let data = SyncDataset::from_rows(&rows).unwrap();
        let sums = sum_dimension(&data);
        for (row, s) in rows.iter().zip(sums) {
            let mut acc = 0.0;
            for v in row {
                acc += v;
            }
            assert_eq!(s, acc);
        }
    }

    fn single_marginal_model(values: &[f64], weights: Vec<f64>) -> GcmmModel {
        let m = build_weighted_ecdf(values, &vec![1.0; values.len()], MarginalOptions::default()).unwrap();
        let k = weights.len();
        GcmmModel::new(weights, vec![CorrelationMatrix::identity(1); k], vec![vec![m]; k]).unwrap()
    }

    #[test]
    fn samples_stay_inside_knot_range() {
        let model = single_marginal_model(&[0.0, 1.0], vec![1.0]);
        let s = sample_gcmm(&model, 2000, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(s.values().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn component_frequencies_follow_weights() {
        let left = build_weighted_ecdf(&[-2.0, -1.0], &[1.0, 1.0], MarginalOptions::default()).unwrap();
        let right = build_weighted_ecdf(&[1.0, 2.0], &[1.0, 1.0], MarginalOptions::default()).unwrap();
        let model = GcmmModel::new(
            vec![0.25, 0.75],
            vec![CorrelationMatrix::identity(1); 2],
            vec![vec![left], vec![right]],
        )
        .unwrap();
        let s = sample_gcmm(&model, 100_000, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let frac = s.values().iter().filter(|v| **v < 0.0).count() as f64 / 1e5;
        assert!((frac - 0.25).abs() < 0.01);
    }

    #[test]
    fn sampling_is_deterministic() {
        let model = single_marginal_model(&[0.0, 1.0, 5.0], vec![0.5, 0.5]);
        let a = sample_gcmm(&model, 50, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = sample_gcmm(&model, 50, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
    }

    fn copula_data(n: usize, rho: f64, seed: u64) -> SyncDataset {
        let p = CorrelationMatrix::bivariate(rho).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let z = copula::sample_correlated_normal(&p, &mut rng);
                vec![(0.6 * z[0]).exp(), z[1].powi(3)]
            })
            .collect();
        SyncDataset::from_rows(&rows).unwrap()
    }

    #[test]
    fn resample_matches_training_marginals() {
        let data = copula_data(5000, 0.5, 4);
        let (model, _) = em::fit(&data, None, &FitConfig::new(1)).unwrap();
        let s = sample_gcmm(&model, 5000, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        for i in 0..2 {
            let r = ks_two_sample(&s.column(i), &data.column(i)).unwrap();
            assert!(r.p_value > 0.01, "dimension {i}: {r:?}");
        }
    }

    #[test]
    fn refit_of_resample_recovers_correlation() {
        let data = copula_data(10_000, -0.7, 6);
        let (model, _) = em::fit(&data, None, &FitConfig::new(1)).unwrap();
        let s = sample_gcmm(&model, 10_000, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let (refit, _) = em::fit(&s, None, &FitConfig::new(1)).unwrap();
        assert!((refit.correlation(0).get(0, 1) + 0.7).abs() < 0.05);
    }

    #[test]
    fn singleton_range_selects_it() {
        let data = copula_data(200, 0.3, 8);
        let r = select_k(&data, None, 1, 1, &FitConfig::new(1), ModelKind::Gcmm, 0).unwrap();
        assert_eq!(r.best_k, Some(1));
        assert_eq!(r.rows.len(), 1);
    }

    #[test]
    fn infeasible_k_is_skipped_not_fatal() {
        let data = copula_data(9, 0.3, 9);
        let r = select_k(&data, None, 1, 4, &FitConfig::new(1), ModelKind::Gmm, 0).unwrap();
        assert!(r.rows[..2].iter().all(|row| row.result.is_some()), "{r:?}");
        assert!(r.rows[3].error.is_some());
        let best = r.rows.iter().filter_map(|row| row.result).min_by(|a, b| a.aic.total_cmp(&b.aic)).unwrap();
        assert_eq!(r.best_k, Some(best.k));
        let text = r.to_text();
        assert_eq!(text.lines().filter(|l| l.trim_start().starts_with('*')).count(), 1);
        assert!(text.contains("skipped"));
    }
}
