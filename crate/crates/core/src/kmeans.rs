//! k-means with k-means++ seeding, used to seed both EM engines.

use rand::Rng;

use crate::data::SyncDataset;
use crate::error::{GcmmError, Result};

const MAX_LLOYD_ITERS: usize = 100;
pub const MAX_SEEDINGS: usize = 10;

/// Cluster labels for every row of `data`, computed on column-standardized
/// coordinates. A cluster with fewer than `min_size` members counts as empty
/// and triggers a fresh seeding.
pub fn partition<R: Rng + ?Sized>(
    data: &SyncDataset,
    k: usize,
    min_size: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let points = standardized(data);
    let d = data.d();
    for _ in 0..MAX_SEEDINGS {
        let labels = lloyd(&points, d, k, rng);
        let mut sizes = vec![0usize; k];
        for &l in &labels {
            sizes[l] += 1;
        }
        if sizes.iter().all(|&s| s >= min_size) {
            return Ok(labels);
        }
    }
    Err(GcmmError::EmptyCluster { attempts: MAX_SEEDINGS })
}

fn standardized(data: &SyncDataset) -> Vec<f64> {
    let (n, d) = (data.n(), data.d());
    let mut out = data.values().to_vec();
    for i in 0..d {
        let mean = data.rows().map(|r| r[i]).sum::<f64>() / n as f64;
        let var = data.rows().map(|r| (r[i] - mean).powi(2)).sum::<f64>() / n as f64;
        let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
        for row in out.chunks_exact_mut(d) {
            row[i] = (row[i] - mean) / sd;
        }
    }
    out
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn plus_plus<R: Rng + ?Sized>(points: &[f64], d: usize, k: usize, rng: &mut R) -> Vec<f64> {
    let n = points.len() / d;
    let mut centers = Vec::with_capacity(k * d);
    let first = rng.random_range(0..n);
    centers.extend_from_slice(&points[first * d..(first + 1) * d]);
    let mut nearest: Vec<f64> = points.chunks_exact(d).map(|p| dist2(p, &centers[..d])).collect();
    for _ in 1..k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, w) in nearest.iter().enumerate() {
                if target < *w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = points[pick * d..(pick + 1) * d].to_vec();
        for (p, best) in points.chunks_exact(d).zip(nearest.iter_mut()) {
            *best = best.min(dist2(p, &c));
        }
        centers.extend(c);
    }
    centers
}

fn lloyd<R: Rng + ?Sized>(points: &[f64], d: usize, k: usize, rng: &mut R) -> Vec<usize> {
    let n = points.len() / d;
    let mut centers = plus_plus(points, d, k, rng);
    let mut labels = vec![usize::MAX; n];
    for _ in 0..MAX_LLOYD_ITERS {
        let mut changed = false;
        for (p, label) in points.chunks_exact(d).zip(labels.iter_mut()) {
            let best = (0..k)
                .map(|c| dist2(p, &centers[c * d..(c + 1) * d]))
                .enumerate()
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(c, _)| c)
                .unwrap();
            if *label != best {
                *label = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![0.0; k * d];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.chunks_exact(d).zip(&labels) {
            counts[l] += 1;
            for (s, v) in sums[l * d..(l + 1) * d].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for j in 0..d {
                    centers[c * d + j] = sums[c * d + j] / counts[c] as f64;
                }
            }
        }
    }
    labels
}
