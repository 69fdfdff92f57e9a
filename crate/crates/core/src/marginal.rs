//! Nonparametric per-component, per-dimension marginals.
//!
//! A [`MarginalEstimator`] is a weighted empirical distribution over sorted
//! knots. Its cdf is continuous: each knot sits at the midpoint of its ECDF
//! step, the midpoints are mapped affinely onto `[eps, 1 - eps]`, and values
//! between knots are interpolated linearly. Its pdf is a Gaussian kernel
//! density with the same weights.

use serde::{Deserialize, Serialize};

use crate::error::{GcmmError, Result};
use crate::kde::KernelSum;
use crate::normal;

const MIN_AUTO_EPSILON: f64 = 1e-6;

/// Bandwidth selection for the kernel density.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BandwidthRule {
    /// `0.9 * min(sd, IQR / 1.34) * n_eff^(-1/5)` on weighted moments.
    #[default]
    Silverman,
    Fixed(f64),
}

/// Build options shared by the ECDF builders.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MarginalOptions {
    /// `None` selects `1 / (2 n_eff + 2)`, floored at 1e-6.
    pub clip_epsilon: Option<f64>,
    pub bandwidth: BandwidthRule,
}

impl MarginalOptions {
    pub fn with_clip_epsilon(mut self, eps: f64) -> Self {
        self.clip_epsilon = Some(eps);
        self
    }

    pub fn with_bandwidth(mut self, rule: BandwidthRule) -> Self {
        self.bandwidth = rule;
        self
    }
}

/// Serialized form: the knot table plus smoothing parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnotTable {
    pub knots: Vec<f64>,
    pub cum_weights: Vec<f64>,
    pub bandwidth: f64,
    pub clip_epsilon: f64,
}

#[derive(Debug, Clone)]
pub struct MarginalEstimator {
    knots: Vec<f64>,
    cum_weights: Vec<f64>,
    bandwidth: f64,
    clip_epsilon: f64,
    /// cdf value at each knot
    anchors: Vec<f64>,
    kernel: KernelSum,
}

impl PartialEq for MarginalEstimator {
    fn eq(&self, other: &Self) -> bool {
        self.knots == other.knots
            && self.cum_weights == other.cum_weights
            && self.bandwidth == other.bandwidth
            && self.clip_epsilon == other.clip_epsilon
    }
}

impl Serialize for MarginalEstimator {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_table().serialize(s)
    }
}

impl<'de> Deserialize<'de> for MarginalEstimator {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let table = KnotTable::deserialize(d)?;
        Self::from_table(table).map_err(serde::de::Error::custom)
    }
}

/// Weighted ECDF over `values`: `F(y) = sum w_n 1[x_n <= y] / sum w_n`,
/// smoothed as described in the module docs. Tied values merge their
/// weights; zero-weight values are dropped.
pub fn build_weighted_ecdf(
    values: &[f64],
    weights: &[f64],
    options: MarginalOptions,
) -> Result<MarginalEstimator> {
    if values.len() != weights.len() {
        return Err(GcmmError::InvalidData(format!(
            "{} values but {} weights",
            values.len(),
            weights.len()
        )));
    }
    if values.len() < 2 {
        return Err(GcmmError::InvalidData("at least two values required".into()));
    }
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(GcmmError::InvalidData(format!("non-finite value {v}")));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(GcmmError::InvalidData("weights must be finite and nonnegative".into()));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(GcmmError::InvalidData("total weight must be positive".into()));
    }
    let sum_sq: f64 = weights.iter().map(|w| w * w).sum();
    let n_eff = total * total / sum_sq;

    // weights that vanish relative to the total (underflowed posteriors) carry no mass
    let mut order: Vec<usize> = (0..values.len()).filter(|&n| weights[n] / total > 0.0).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));

    let mut knots: Vec<f64> = Vec::with_capacity(order.len());
    let mut merged: Vec<f64> = Vec::with_capacity(order.len());
    for n in order {
        match knots.last() {
            Some(&last) if last == values[n] => *merged.last_mut().unwrap() += weights[n],
            _ => {
                knots.push(values[n]);
                merged.push(weights[n]);
            }
        }
    }

    let mut running = 0.0;
    let mut cum_weights: Vec<f64> = merged
        .iter()
        .map(|w| {
            running += w;
            (running / total).min(1.0)
        })
        .collect();
    *cum_weights.last_mut().unwrap() = 1.0;

    let clip_epsilon = match options.clip_epsilon {
        Some(eps) => eps,
        None => (1.0 / (2.0 * n_eff + 2.0)).max(MIN_AUTO_EPSILON),
    };
    let bandwidth = match options.bandwidth {
        BandwidthRule::Fixed(h) => h,
        BandwidthRule::Silverman => silverman_bandwidth(&knots, &cum_weights, n_eff),
    };
    MarginalEstimator::from_table(KnotTable { knots, cum_weights, bandwidth, clip_epsilon })
}

/// Pooled ECDF over synchronized and unsynchronized observations with their
/// own weights; identical to [`build_weighted_ecdf`] on the concatenation.
pub fn build_augmented_ecdf(
    sync_values: &[f64],
    sync_weights: &[f64],
    unsync_values: &[f64],
    unsync_weights: &[f64],
    options: MarginalOptions,
) -> Result<MarginalEstimator> {
    if sync_values.len() != sync_weights.len() || unsync_values.len() != unsync_weights.len() {
        return Err(GcmmError::InvalidData("value/weight length mismatch".into()));
    }
    if unsync_values.is_empty() {
        return build_weighted_ecdf(sync_values, sync_weights, options);
    }
    let values: Vec<f64> = sync_values.iter().chain(unsync_values).copied().collect();
    let weights: Vec<f64> = sync_weights.iter().chain(unsync_weights).copied().collect();
    build_weighted_ecdf(&values, &weights, options)
}

fn silverman_bandwidth(knots: &[f64], cum_weights: &[f64], n_eff: f64) -> f64 {
    let weights = step_weights(cum_weights);
    let mean: f64 = knots.iter().zip(&weights).map(|(x, w)| w * x).sum();
    let var: f64 = knots.iter().zip(&weights).map(|(x, w)| w * (x - mean).powi(2)).sum();
    let sd = var.max(0.0).sqrt();
    let iqr = step_quantile(knots, cum_weights, 0.75) - step_quantile(knots, cum_weights, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    let h = 0.9 * spread * n_eff.powf(-0.2);
    let scale = knots.iter().fold(1.0f64, |m, k| m.max(k.abs()));
    if h.is_finite() && h > 1e-9 * scale {
        h
    } else {
        // (nearly) all mass on one knot
        1e-3 * scale
    }
}

fn step_weights(cum_weights: &[f64]) -> Vec<f64> {
    let mut prev = 0.0;
    cum_weights
        .iter()
        .map(|&c| {
            let w = c - prev;
            prev = c;
            w
        })
        .collect()
}

fn step_quantile(knots: &[f64], cum_weights: &[f64], p: f64) -> f64 {
    let j = cum_weights.partition_point(|&c| c < p).min(knots.len() - 1);
    knots[j]
}

impl MarginalEstimator {
    /// Rebuilds an estimator from its knot table, validating every invariant.
    pub fn from_table(table: KnotTable) -> Result<Self> {
        let KnotTable { knots, cum_weights, bandwidth, clip_epsilon } = table;
        let bad = |m: &str| Err(GcmmError::InvalidModel(format!("marginal: {m}")));
        if knots.is_empty() || knots.len() != cum_weights.len() {
            return bad("knot table must be non-empty with one cumulative weight per knot");
        }
        if knots.iter().any(|k| !k.is_finite()) || knots.windows(2).any(|w| w[0] >= w[1]) {
            return bad("knots must be finite and strictly increasing");
        }
        if cum_weights.iter().any(|c| !c.is_finite())
            || cum_weights[0] <= 0.0
            || cum_weights.windows(2).any(|w| w[0] > w[1])
        {
            return bad("cumulative weights must be positive and nondecreasing");
        }
        if (cum_weights[cum_weights.len() - 1] - 1.0).abs() > 1e-12 {
            return bad("cumulative weights must end at 1");
        }
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return bad("bandwidth must be positive");
        }
        if !(clip_epsilon > 0.0 && clip_epsilon < 0.5) {
            return bad("clip epsilon must lie in (0, 0.5)");
        }

        let weights = step_weights(&cum_weights);
        let m = knots.len();
        let mids: Vec<f64> = cum_weights.iter().zip(&weights).map(|(c, w)| c - 0.5 * w).collect();
        let mut anchors = vec![0.5; m];
        if m > 1 {
            let span = mids[m - 1] - mids[0];
            let scale = (1.0 - 2.0 * clip_epsilon) / span;
            for (a, v) in anchors.iter_mut().zip(&mids) {
                *a = clip_epsilon + (v - mids[0]) * scale;
            }
            anchors[0] = clip_epsilon;
            anchors[m - 1] = 1.0 - clip_epsilon;
        }
        // zero-width steps (possible after deserialization) carry no kernel mass
        let (kk, kw): (Vec<f64>, Vec<f64>) =
            knots.iter().zip(&weights).filter(|(_, w)| **w > 0.0).map(|(k, w)| (*k, *w)).unzip();
        let kernel = KernelSum::new(&kk, &kw, bandwidth);
        Ok(Self { knots, cum_weights, bandwidth, clip_epsilon, anchors, kernel })
    }

    pub fn to_table(&self) -> KnotTable {
        KnotTable {
            knots: self.knots.clone(),
            cum_weights: self.cum_weights.clone(),
            bandwidth: self.bandwidth,
            clip_epsilon: self.clip_epsilon,
        }
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn cum_weights(&self) -> &[f64] {
        &self.cum_weights
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn clip_epsilon(&self) -> f64 {
        self.clip_epsilon
    }

    /// Normalized weight carried by each knot.
    pub fn knot_weights(&self) -> Vec<f64> {
        step_weights(&self.cum_weights)
    }

    /// Unsmoothed, unclipped weighted ECDF: `sum w_n 1[x_n <= y]`.
    pub fn step_cdf(&self, y: f64) -> f64 {
        let j = self.knots.partition_point(|&k| k <= y);
        if j == 0 {
            0.0
        } else {
            self.cum_weights[j - 1]
        }
    }

    /// Continuous cdf, always within `[eps, 1 - eps]`.
    pub fn cdf(&self, x: f64) -> f64 {
        let m = self.knots.len();
        let eps = self.clip_epsilon;
        if x <= self.knots[0] {
            return if m == 1 && x == self.knots[0] { 0.5 } else { eps };
        }
        if x >= self.knots[m - 1] {
            return 1.0 - eps;
        }
        let j = self.knots.partition_point(|&k| k <= x) - 1;
        let (x0, x1) = (self.knots[j], self.knots[j + 1]);
        let (a0, a1) = (self.anchors[j], self.anchors[j + 1]);
        a0 + (a1 - a0) * (x - x0) / (x1 - x0)
    }

    /// Kernel density estimate, floored at the smallest positive double.
    pub fn pdf(&self, x: f64) -> f64 {
        self.ln_pdf(x).exp().max(f64::MIN_POSITIVE)
    }

    /// Log of the kernel density estimate; finite for every finite `x`.
    pub fn ln_pdf(&self, x: f64) -> f64 {
        self.kernel.ln_density(x)
    }

    /// Piecewise-linear inverse of [`cdf`](Self::cdf).
    pub fn inverse_cdf(&self, u: f64) -> Result<f64> {
        if !(u > 0.0 && u < 1.0) {
            return Err(GcmmError::InvalidData(format!("quantile level {u} outside (0, 1)")));
        }
        let m = self.knots.len();
        if u <= self.anchors[0] {
            return Ok(self.knots[0]);
        }
        if u >= self.anchors[m - 1] {
            return Ok(self.knots[m - 1]);
        }
        let j = self.anchors.partition_point(|&a| a <= u) - 1;
        let (a0, a1) = (self.anchors[j], self.anchors[j + 1]);
        let (x0, x1) = (self.knots[j], self.knots[j + 1]);
        Ok(x0 + (x1 - x0) * (u - a0) / (a1 - a0))
    }

    /// Maps `x` to the standard-normal scale: `quantile(cdf(x))`.
    pub fn gaussianize(&self, x: f64) -> f64 {
        normal::quantile(self.cdf(x))
    }
}
