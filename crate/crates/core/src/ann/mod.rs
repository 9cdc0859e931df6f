//! Exact and approximate k-nearest-neighbor search.
//!
//! All distances are squared L2. Results are ordered by ascending distance
//! with ties broken by ascending row id, so exact search is reproducible
//! element for element.

mod index;
mod io;
pub mod kmeans;
mod pca;
mod pq;

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

pub use index::{AnnIndex, IndexConfig, IndexKind, InvertedLists};
pub use io::{read_index, write_index, INDEX_MAGIC};
pub use kmeans::{fit_kmeans, KMeans};
pub use pca::{fit_pca, PcaProjection};
pub use pq::PqCodebook;

use crate::datastore::Datastore;
use crate::error::IndexError;

/// The `k` nearest rows of one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighborhood {
    pub ids: Vec<u32>,
    pub dists: Vec<f32>,
    /// The `k` that was asked for. Fewer results than this means the probed
    /// candidate set was too small.
    pub requested: usize,
}

impl Neighborhood {
    pub fn k(&self) -> usize {
        self.ids.len()
    }

    pub fn is_short(&self) -> bool {
        self.ids.len() < self.requested
    }

    pub fn mean_dist(&self) -> f64 {
        if self.dists.is_empty() {
            return 0.0;
        }
        self.dists.iter().map(|&d| f64::from(d)).sum::<f64>() / self.dists.len() as f64
    }
}

/// Squared Euclidean distance in `f32`. Coordinates are summed in eight
/// interleaved lanes (lane `j` takes indices `j, j+8, ...`), the lanes are
/// combined pairwise and the tail is added last. The order is fixed, so
/// results are reproducible, and the compiler can vectorize the loop.
#[inline]
pub fn squared_l2(a: &[f32], b: &[f32]) -> f32 {
    const LANES: usize = 8;
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f32; LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let (ta, tb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for j in 0..LANES {
            let d = x[j] - y[j];
            acc[j] += d * d;
        }
    }
    let mut total = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (x, y) in ta.iter().zip(tb) {
        let d = x - y;
        total += d * d;
    }
    total
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    dist: f32,
    id: u32,
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist
            .total_cmp(&other.dist)
            .then(self.id.cmp(&other.id))
    }
}

/// Bounded max-heap keeping the `k` smallest `(dist, id)` pairs.
pub(crate) struct TopK {
    k: usize,
    heap: BinaryHeap<Candidate>,
}

impl TopK {
    pub(crate) fn new(k: usize) -> Self {
        Self {
            k,
            heap: BinaryHeap::with_capacity(k + 1),
        }
    }

    #[inline]
    pub(crate) fn push(&mut self, dist: f32, id: u32) {
        let c = Candidate { dist, id };
        if self.heap.len() < self.k {
            self.heap.push(c);
        } else if let Some(top) = self.heap.peek() {
            if c < *top {
                self.heap.pop();
                self.heap.push(c);
            }
        }
    }

    pub(crate) fn into_neighborhood(self) -> Neighborhood {
        let sorted = self.heap.into_sorted_vec();
        Neighborhood {
            ids: sorted.iter().map(|c| c.id).collect(),
            dists: sorted.iter().map(|c| c.dist).collect(),
            requested: self.k,
        }
    }
}

/// Exact distances from `query` to each of `ids`, re-sorted by the tie rule.
pub fn recompute_distances(
    ds: &Datastore,
    ids: &[u32],
    query: &[f32],
) -> Result<Neighborhood, IndexError> {
    if query.len() != ds.dim() {
        return Err(IndexError::DimensionMismatch {
            expected: ds.dim(),
            actual: query.len(),
        });
    }
    recompute_in(ds.keys(), ds.dim(), ids, query, ids.len())
}

pub(crate) fn recompute_in(
    keys: &[f32],
    dim: usize,
    ids: &[u32],
    query: &[f32],
    requested: usize,
) -> Result<Neighborhood, IndexError> {
    let n = keys.len() / dim;
    let mut pairs = Vec::with_capacity(ids.len());
    for &id in ids {
        let i = id as usize;
        if i >= n {
            return Err(IndexError::IdOutOfRange { id: i, n });
        }
        pairs.push(Candidate {
            dist: squared_l2(&keys[i * dim..(i + 1) * dim], query),
            id,
        });
    }
    pairs.sort();
    Ok(Neighborhood {
        ids: pairs.iter().map(|c| c.id).collect(),
        dists: pairs.iter().map(|c| c.dist).collect(),
        requested,
    })
}

/// Percentage of reference neighbor ids recovered by the approximate
/// neighborhoods: `100 * mean_q |ref_q ∩ approx_q| / K`.
pub fn coverage(reference: &[Neighborhood], approx: &[Neighborhood]) -> Result<f64, IndexError> {
    if reference.len() != approx.len() {
        return Err(IndexError::LengthMismatch(format!(
            "{} reference queries vs {} approximate",
            reference.len(),
            approx.len()
        )));
    }
    if reference.is_empty() {
        return Err(IndexError::LengthMismatch("no queries".into()));
    }
    let mut total = 0.0;
    for (r, a) in reference.iter().zip(approx) {
        if r.requested != a.requested || r.requested == 0 {
            return Err(IndexError::LengthMismatch(format!(
                "k={} vs k={}",
                r.requested, a.requested
            )));
        }
        let hits = a.ids.iter().filter(|id| r.ids.contains(id)).count();
        total += hits as f64 / r.requested as f64;
    }
    Ok(100.0 * total / reference.len() as f64)
}
