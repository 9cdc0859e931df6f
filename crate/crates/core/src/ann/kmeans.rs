//! Lloyd's k-means with k-means++ seeding.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::squared_l2;
use crate::error::IndexError;

/// Default number of Lloyd iterations.
pub const DEFAULT_ITERS: usize = 25;
/// Training sets are capped at this many rows per centroid.
pub const MAX_POINTS_PER_CENTROID: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub dim: usize,
    /// Row-major `k x dim`.
    pub centroids: Vec<f32>,
    /// Quantization objective (sum of squared distances to the assigned
    /// centroid) after each assignment step.
    pub objective_trace: Vec<f64>,
}

impl KMeans {
    pub fn k(&self) -> usize {
        self.centroids.len() / self.dim
    }

    pub fn centroid(&self, c: usize) -> &[f32] {
        &self.centroids[c * self.dim..(c + 1) * self.dim]
    }

    /// Nearest centroid of `x`, lowest index on ties.
    pub fn assign(&self, x: &[f32]) -> (usize, f32) {
        nearest(&self.centroids, self.dim, x)
    }
}

pub(crate) fn nearest(centroids: &[f32], dim: usize, x: &[f32]) -> (usize, f32) {
    let mut best = (0, f32::INFINITY);
    for (c, row) in centroids.chunks_exact(dim).enumerate() {
        let d = squared_l2(row, x);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Runs k-means on row-major `data` (`rows x dim`). Deterministic for a fixed
/// seed; the objective trace is non-increasing.
pub fn fit_kmeans(
    data: &[f32],
    dim: usize,
    k: usize,
    iters: usize,
    seed: u64,
) -> Result<KMeans, IndexError> {
    if dim == 0 || data.is_empty() {
        return Err(IndexError::Empty);
    }
    let rows = data.len() / dim;
    if k == 0 || k > rows {
        return Err(IndexError::TooFewRows { k, rows });
    }
    if iters == 0 {
        return Err(IndexError::InvalidConfig("k-means needs at least one iteration".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus(data, dim, k, &mut rng);
    let mut trace = Vec::with_capacity(iters);
    let mut assignment: Vec<usize> = Vec::new();

    for _ in 0..iters {
        let assigned: Vec<(usize, f32)> = data
            .par_chunks_exact(dim)
            .map(|x| nearest(&centroids, dim, x))
            .collect();
        trace.push(assigned.iter().map(|(_, d)| f64::from(*d)).sum());
        let next: Vec<usize> = assigned.iter().map(|(c, _)| *c).collect();
        if next == assignment {
            break;
        }
        assignment = next;

        let mut sums = vec![0.0f64; k * dim];
        let mut counts = vec![0usize; k];
        for (x, &c) in data.chunks_exact(dim).zip(&assignment) {
            counts[c] += 1;
            for (s, v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(x) {
                *s += f64::from(*v);
            }
        }
        for c in 0..k {
            // empty clusters keep their previous centroid
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                for (dst, s) in centroids[c * dim..(c + 1) * dim]
                    .iter_mut()
                    .zip(&sums[c * dim..(c + 1) * dim])
                {
                    *dst = (s * inv) as f32;
                }
            }
        }
    }
    Ok(KMeans {
        dim,
        centroids,
        objective_trace: trace,
    })
}

fn plus_plus(data: &[f32], dim: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let rows = data.len() / dim;
    let row = |i: usize| &data[i * dim..(i + 1) * dim];
    let mut chosen = Vec::with_capacity(k);
    chosen.push(rng.gen_range(0..rows));
    let mut d2: Vec<f64> = (0..rows)
        .map(|i| f64::from(squared_l2(row(i), row(chosen[0]))))
        .collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 {
                    if target < w {
                        pick = Some(i);
                        break;
                    }
                    target -= w;
                }
            }
            pick.unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).unwrap())
        } else {
            // every remaining row duplicates a chosen one
            (0..rows).find(|i| !chosen.contains(i)).unwrap()
        };
        chosen.push(next);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(f64::from(squared_l2(row(i), row(next))));
        }
    }
    chosen.iter().flat_map(|&i| row(i).iter().copied()).collect()
}

/// Deterministic row subsample used to cap k-means training cost.
pub(crate) fn training_sample(data: &[f32], dim: usize, k: usize, seed: u64) -> Vec<f32> {
    let rows = data.len() / dim;
    let cap = k.saturating_mul(MAX_POINTS_PER_CENTROID);
    if rows <= cap {
        return data.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut picked = index::sample(&mut rng, rows, cap).into_vec();
    picked.sort_unstable();
    picked
        .into_iter()
        .flat_map(|i| data[i * dim..(i + 1) * dim].iter().copied())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn k_equal_rows_reproduces_the_data() {
        let data = vec![0.0, 0.0, 1.0, 5.0, -3.0, 2.0];
        let km = fit_kmeans(&data, 2, 3, 5, 1).unwrap();
        let mut got: Vec<Vec<f32>> = (0..3).map(|c| km.centroid(c).to_vec()).collect();
        got.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(got, vec![vec![-3.0, 2.0], vec![0.0, 0.0], vec![1.0, 5.0]]);
        assert_eq!(*km.objective_trace.last().unwrap(), 0.0);
    }

    #[test]
    fn two_blobs_recover_their_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut data = Vec::new();
        let centers = [[-10.0f64, 0.0], [10.0, 4.0]];
        let mut sums = [[0.0f64; 2]; 2];
        for i in 0..400 {
            let c = i % 2;
            for d in 0..2 {
                let z: f64 = StandardNormal.sample(&mut rng);
                let v = (centers[c][d] + 0.5 * z) as f32;
                sums[c][d] += f64::from(v);
                data.push(v);
            }
        }
        let km = fit_kmeans(&data, 2, 2, 25, 11).unwrap();
        for blob in sums {
            let mean = [blob[0] / 200.0, blob[1] / 200.0];
            let close = (0..2).any(|c| {
                let ctr = km.centroid(c);
                (f64::from(ctr[0]) - mean[0]).abs() < 0.1 && (f64::from(ctr[1]) - mean[1]).abs() < 0.1
            });
            assert!(close, "{:?} vs {:?}", km.centroids, mean);
        }
    }

    #[test]
    fn objective_is_monotone_and_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data: Vec<f32> = (0..3000).map(|_| rng.gen::<f32>()).collect();
        let a = fit_kmeans(&data, 3, 16, 25, 9).unwrap();
        let b = fit_kmeans(&data, 3, 16, 25, 9).unwrap();
        assert_eq!(a, b);
        for w in a.objective_trace.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-9), "{:?}", a.objective_trace);
        }
    }

    #[test]
    fn bad_arguments() {
        assert!(matches!(fit_kmeans(&[1.0], 1, 2, 5, 0), Err(IndexError::TooFewRows { .. })));
        assert!(matches!(fit_kmeans(&[], 1, 1, 5, 0), Err(IndexError::Empty)));
        assert!(fit_kmeans(&[1.0], 1, 1, 0, 0).is_err());
    }
}
