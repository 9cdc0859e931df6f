//! Shared fixtures for the criterion benchmarks.

use knnue::datastore::random_keys;
use knnue::{AnnIndex, Datastore, IndexConfig, IndexKind};

/// Clustered random keys plus `queries` query rows.
pub struct Fixture {
    pub ds: Datastore,
    pub queries: Vec<Vec<f32>>,
}

impl Fixture {
    pub fn new(n: usize, dim: usize, queries: usize, seed: u64) -> Self {
        let (ds, q) = random_keys(n, dim, 32, queries, seed).expect("valid fixture sizes");
        Self {
            queries: q.chunks(dim).map(<[f32]>::to_vec).collect(),
            ds,
        }
    }

    /// Every index kind over the fixture, labelled for benchmark ids.
    pub fn indexes(&self) -> Vec<(&'static str, AnnIndex)> {
        let dim = self.ds.dim();
        let base = IndexConfig {
            n_list: 64,
            n_probe: 8,
            n_sub: (dim / 4).max(1),
            n_centroids: 64,
            kmeans_iters: 10,
            ..IndexConfig::default()
        };
        [
            ("flat", IndexKind::Flat),
            ("ivf", IndexKind::Ivf),
            ("pq", IndexKind::Pq),
            ("composed", IndexKind::Composed),
        ]
        .into_iter()
        .map(|(name, kind)| {
            let cfg = IndexConfig { kind, ..base.clone() };
            (name, AnnIndex::build(&self.ds, &cfg).expect("index builds"))
        })
        .collect()
    }
}
