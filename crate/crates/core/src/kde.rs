//! Weighted Gaussian kernel sums over sorted knots.
//!
//! Small knot sets are summed directly. Larger ones are grouped into blocks
//! no wider than half a bandwidth, and each block keeps the Taylor moments of
//! `exp(t * s)` so that a query costs O(blocks) instead of O(knots):
//!
//! `sum_n w_n exp(-(t - s_n)^2 / 2) = exp(-t^2 / 2) * sum_p A_p t^p`,
//! `A_p = sum_n w_n exp(-s_n^2 / 2) s_n^p / p!`
//!
//! Blocks whose best possible contribution is below `exp(-PRUNE_NATS)` of
//! the best guaranteed block contribution are skipped.

use crate::normal::LN_SQRT_2PI;

const DIRECT_LIMIT: usize = 64;
const BLOCK_WIDTH: f64 = 0.5;
const TAYLOR_ORDER: usize = 30;
const TAYLOR_REACH: f64 = 12.0;
const PRUNE_NATS: f64 = 42.0;

#[derive(Debug, Clone)]
struct Block {
    start: usize,
    end: usize,
    lo: f64,
    hi: f64,
    center: f64,
    ln_weight: f64,
    moments: [f64; TAYLOR_ORDER + 1],
}

#[derive(Debug, Clone)]
pub(crate) struct KernelSum {
    knots: Vec<f64>,
    ln_weights: Vec<f64>,
    bandwidth: f64,
    blocks: Vec<Block>,
    max_ln_weight: f64,
}

/// Streaming log-sum-exp accumulator.
#[derive(Debug, Clone, Copy)]
struct LogAcc {
    max: f64,
    sum: f64,
}

impl LogAcc {
    fn new() -> Self {
        Self { max: f64::NEG_INFINITY, sum: 0.0 }
    }

    fn push(&mut self, v: f64) {
        if v == f64::NEG_INFINITY {
            return;
        }
        if v > self.max {
            self.sum = self.sum * (self.max - v).exp() + 1.0;
            self.max = v;
        } else {
            self.sum += (v - self.max).exp();
        }
    }

    fn value(&self) -> f64 {
        if self.sum == 0.0 {
            f64::NEG_INFINITY
        } else {
            self.max + self.sum.ln()
        }
    }
}

impl KernelSum {
    /// `knots` strictly increasing, `weights` positive and summing to one.
    pub(crate) fn new(knots: &[f64], weights: &[f64], bandwidth: f64) -> Self {
        let ln_weights: Vec<f64> = weights.iter().map(|w| w.ln()).collect();
        let blocks = if knots.len() <= DIRECT_LIMIT {
            Vec::new()
        } else {
            build_blocks(knots, weights, bandwidth)
        };
        let max_ln_weight = blocks.iter().map(|b| b.ln_weight).fold(f64::NEG_INFINITY, f64::max);
        Self { knots: knots.to_vec(), ln_weights, bandwidth, blocks, max_ln_weight }
    }

    fn ln_direct(&self, x: f64, range: std::ops::Range<usize>) -> f64 {
        let mut acc = LogAcc::new();
        for n in range {
            let z = (x - self.knots[n]) / self.bandwidth;
            acc.push(self.ln_weights[n] - 0.5 * z * z);
        }
        acc.value()
    }

    /// Log of the kernel density estimate at `x`.
    pub(crate) fn ln_density(&self, x: f64) -> f64 {
        let ln_kernel_sum = if self.blocks.is_empty() {
            self.ln_direct(x, 0..self.knots.len())
        } else {
            self.ln_blocks(x)
        };
        ln_kernel_sum - self.bandwidth.ln() - LN_SQRT_2PI
    }

    fn ln_blocks(&self, x: f64) -> f64 {
        let h = self.bandwidth;
        let blocks = &self.blocks;
        let near = |b: &Block| {
            if x < b.lo {
                (b.lo - x) / h
            } else if x > b.hi {
                (x - b.hi) / h
            } else {
                0.0
            }
        };
        let far = |b: &Block| ((x - b.lo) / h).abs().max(((x - b.hi) / h).abs());

        // Every block contributes at least exp(ln_weight - far^2 / 2). The
        // best such bound is the reference level; scanning outward stops once
        // no further block can reach PRUNE_NATS below it.
        let lower = |b: &Block| b.ln_weight - 0.5 * far(b).powi(2);
        let reaches = |b: &Block, reference: f64| self.max_ln_weight - 0.5 * near(b).powi(2) >= reference - PRUNE_NATS;
        let j = blocks.partition_point(|b| b.lo <= x).saturating_sub(1);
        let mut reference = lower(&blocks[j]);
        let mut first = j;
        while first > 0 && reaches(&blocks[first - 1], reference) {
            first -= 1;
            reference = reference.max(lower(&blocks[first]));
        }
        let mut last = j;
        while last + 1 < blocks.len() && reaches(&blocks[last + 1], reference) {
            last += 1;
            reference = reference.max(lower(&blocks[last]));
        }
        let floor = reference - PRUNE_NATS;

        let mut sum = 0.0;
        for b in &blocks[first..=last] {
            let d = near(b);
            if b.ln_weight - 0.5 * d * d < floor {
                continue;
            }
            let t = (x - b.center) / h;
            let series = if t.abs() <= TAYLOR_REACH {
                b.moments.iter().rev().fold(0.0, |s, a| s * t + a)
            } else {
                0.0
            };
            sum += if series > 0.0 {
                series * (-0.5 * t * t - reference).exp()
            } else {
                (self.ln_direct(x, b.start..b.end) - reference).exp()
            };
        }
        reference + sum.ln()
    }
}

fn build_blocks(knots: &[f64], weights: &[f64], h: f64) -> Vec<Block> {
    let mut blocks = Vec::new();
    let mut start = 0;
    while start < knots.len() {
        let lo = knots[start];
        let mut end = start + 1;
        while end < knots.len() && knots[end] - lo <= BLOCK_WIDTH * h {
            end += 1;
        }
        let hi = knots[end - 1];
        let center = 0.5 * (lo + hi);
        let mut moments = [0.0; TAYLOR_ORDER + 1];
        let mut total = 0.0;
        for n in start..end {
            let s = (knots[n] - center) / h;
            let mut term = weights[n] * (-0.5 * s * s).exp();
            total += weights[n];
            for (p, m) in moments.iter_mut().enumerate() {
                *m += term;
                term *= s / (p + 1) as f64;
            }
        }
        blocks.push(Block { start, end, lo, hi, center, ln_weight: total.ln(), moments });
        start = end;
    }
    blocks
}
