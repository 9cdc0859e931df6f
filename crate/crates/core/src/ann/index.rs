use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::kmeans::{fit_kmeans, training_sample, DEFAULT_ITERS};
use super::pca::{fit_pca, PcaProjection};
use super::pq::PqCodebook;
use super::{recompute_in, squared_l2, Neighborhood, TopK};
use crate::datastore::Datastore;
use crate::error::IndexError;
use crate::seed::{self, stream};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndexKind {
    /// Exhaustive scan.
    #[default]
    Flat,
    /// Inverted file over k-means cells.
    Ivf,
    /// Product-quantized codes scanned exhaustively.
    Pq,
    /// Inverted file whose cells hold product-quantized codes.
    Composed,
}

/// Index configuration. PCA applies to any kind when `d_pca` is set; the
/// pipeline order is PCA, then IVF partitioning, then PQ encoding, with IVF
/// and PQ trained in the reduced space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IndexConfig {
    pub kind: IndexKind,
    pub n_list: usize,
    pub n_probe: usize,
    pub n_sub: usize,
    pub n_centroids: usize,
    pub d_pca: Option<usize>,
    /// Replace estimated distances by exact ones over the original vectors.
    pub recompute: bool,
    pub kmeans_iters: usize,
    pub seed: u64,
}

impl Default for IndexConfig {
    fn default() -> Self {
        Self {
            kind: IndexKind::Flat,
            n_list: 100,
            n_probe: 32,
            n_sub: 32,
            n_centroids: 32,
            d_pca: None,
            recompute: false,
            kmeans_iters: DEFAULT_ITERS,
            seed: 0,
        }
    }
}

impl IndexConfig {
    pub fn flat() -> Self {
        Self::default()
    }

    pub fn uses_ivf(&self) -> bool {
        matches!(self.kind, IndexKind::Ivf | IndexKind::Composed)
    }

    pub fn uses_pq(&self) -> bool {
        matches!(self.kind, IndexKind::Pq | IndexKind::Composed)
    }

    /// True when search is guaranteed to be exact.
    pub fn is_exact(&self) -> bool {
        self.kind == IndexKind::Flat && self.d_pca.is_none()
    }

    /// Checks the configuration against a datastore shape.
    pub fn validate(&self, dim: usize, n: usize) -> Result<(), IndexError> {
        let bad = |m: String| Err(IndexError::InvalidConfig(m));
        if let Some(d) = self.d_pca {
            if d == 0 || d > dim {
                return bad(format!("d_pca={d} must be in [1, {dim}]"));
            }
        }
        let work = self.d_pca.unwrap_or(dim);
        if self.kmeans_iters == 0 {
            return bad("kmeans_iters must be positive".into());
        }
        if self.uses_ivf() {
            if self.n_list == 0 || self.n_probe == 0 {
                return bad("n_list and n_probe must be positive".into());
            }
            if self.n_probe > self.n_list {
                return bad(format!(
                    "n_probe={} exceeds n_list={}",
                    self.n_probe, self.n_list
                ));
            }
            if self.n_list > n {
                return bad(format!("n_list={} exceeds datastore size {n}", self.n_list));
            }
        }
        if self.uses_pq() {
            if self.n_sub == 0 || !work.is_multiple_of(self.n_sub) {
                return bad(format!(
                    "dimension {work} is not divisible by n_sub={}",
                    self.n_sub
                ));
            }
            if !(1..=256).contains(&self.n_centroids) {
                return bad(format!("n_centroids={} must be in [1, 256]", self.n_centroids));
            }
            if self.n_centroids > n {
                return bad(format!(
                    "n_centroids={} exceeds datastore size {n}",
                    self.n_centroids
                ));
            }
        }
        Ok(())
    }
}

/// k-means cells with the row ids assigned to each.
#[derive(Debug, Clone, PartialEq)]
pub struct InvertedLists {
    pub dim: usize,
    pub centroids: Vec<f32>,
    pub lists: Vec<Vec<u32>>,
}

impl InvertedLists {
    fn build(vectors: &[f32], dim: usize, n_list: usize, iters: usize, seed: u64) -> Result<Self, IndexError> {
        let train = training_sample(vectors, dim, n_list, seed);
        let km = fit_kmeans(&train, dim, n_list, iters, seed)?;
        let assign: Vec<usize> = vectors
            .par_chunks_exact(dim)
            .map(|x| km.assign(x).0)
            .collect();
        let mut lists = vec![Vec::new(); n_list];
        for (i, c) in assign.into_iter().enumerate() {
            lists[c].push(i as u32);
        }
        Ok(Self {
            dim,
            centroids: km.centroids,
            lists,
        })
    }

    pub fn n_list(&self) -> usize {
        self.lists.len()
    }

    /// The `n_probe` nearest cells, closest first, lowest id on ties.
    pub fn probe(&self, query: &[f32], n_probe: usize) -> Vec<usize> {
        let mut top = TopK::new(n_probe);
        for (c, row) in self.centroids.chunks_exact(self.dim).enumerate() {
            top.push(squared_l2(row, query), c as u32);
        }
        top.into_neighborhood()
            .ids
            .into_iter()
            .map(|c| c as usize)
            .collect()
    }
}

/// A searchable index over a datastore's keys.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnIndex {
    pub(crate) config: IndexConfig,
    pub(crate) input_dim: usize,
    pub(crate) n: usize,
    pub(crate) pca: Option<PcaProjection>,
    /// Keys in the working (possibly reduced) space; absent under PQ.
    pub(crate) vectors: Option<Vec<f32>>,
    pub(crate) ivf: Option<InvertedLists>,
    pub(crate) pq: Option<PqCodebook>,
    /// Original keys kept for distance recomputation.
    pub(crate) raw: Option<Vec<f32>>,
}

impl AnnIndex {
    /// Exhaustive exact index.
    pub fn flat(ds: &Datastore) -> Result<Self, IndexError> {
        Self::build(ds, &IndexConfig::flat())
    }

    pub fn ivf(ds: &Datastore, n_list: usize, n_probe: usize, seed: u64) -> Result<Self, IndexError> {
        Self::build(
            ds,
            &IndexConfig {
                kind: IndexKind::Ivf,
                n_list,
                n_probe,
                seed,
                ..IndexConfig::default()
            },
        )
    }

    pub fn pq(ds: &Datastore, n_sub: usize, n_centroids: usize, seed: u64) -> Result<Self, IndexError> {
        Self::build(
            ds,
            &IndexConfig {
                kind: IndexKind::Pq,
                n_sub,
                n_centroids,
                seed,
                ..IndexConfig::default()
            },
        )
    }

    /// Builds the index described by `config`: PCA first when requested,
    /// then IVF partitioning, then PQ encoding.
    pub fn build(ds: &Datastore, config: &IndexConfig) -> Result<Self, IndexError> {
        if ds.is_empty() {
            return Err(IndexError::Empty);
        }
        config.validate(ds.dim(), ds.len())?;
        let pca = config
            .d_pca
            .map(|d| fit_pca(ds.keys(), ds.dim(), d))
            .transpose()?;
        let work: Vec<f32> = match &pca {
            Some(p) => p.apply_all(ds.keys()),
            None => ds.keys().to_vec(),
        };
        let work_dim = config.d_pca.unwrap_or(ds.dim());
        let ivf = if config.uses_ivf() {
            Some(InvertedLists::build(
                &work,
                work_dim,
                config.n_list,
                config.kmeans_iters,
                seed::derive(config.seed, stream::IVF),
            )?)
        } else {
            None
        };
        let pq = if config.uses_pq() {
            Some(PqCodebook::train(
                &work,
                work_dim,
                config.n_sub,
                config.n_centroids,
                config.kmeans_iters,
                seed::derive(config.seed, stream::PQ),
            )?)
        } else {
            None
        };
        let raw = (config.recompute && (pca.is_some() || pq.is_some())).then(|| ds.keys().to_vec());
        Ok(Self {
            config: config.clone(),
            input_dim: ds.dim(),
            n: ds.len(),
            vectors: pq.is_none().then_some(work),
            pca,
            ivf,
            pq,
            raw,
        })
    }

    pub fn config(&self) -> &IndexConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn work_dim(&self) -> usize {
        self.pca.as_ref().map_or(self.input_dim, |p| p.output_dim)
    }

    pub fn pca(&self) -> Option<&PcaProjection> {
        self.pca.as_ref()
    }

    pub fn ivf_lists(&self) -> Option<&InvertedLists> {
        self.ivf.as_ref()
    }

    pub fn pq_codebook(&self) -> Option<&PqCodebook> {
        self.pq.as_ref()
    }

    /// Searches with the configured probe count.
    pub fn search(&self, query: &[f32], k: usize) -> Result<Neighborhood, IndexError> {
        self.search_with_probe(query, k, self.config.n_probe)
    }

    /// Searches probing `n_probe` IVF cells (ignored without IVF).
    pub fn search_with_probe(
        &self,
        query: &[f32],
        k: usize,
        n_probe: usize,
    ) -> Result<Neighborhood, IndexError> {
        if query.len() != self.input_dim {
            return Err(IndexError::DimensionMismatch {
                expected: self.input_dim,
                actual: query.len(),
            });
        }
        if k == 0 {
            return Err(IndexError::ZeroK);
        }
        if k > self.n {
            return Err(IndexError::KTooLarge { k, n: self.n });
        }
        let reduced;
        let q = match &self.pca {
            Some(p) => {
                reduced = p.apply(query);
                &reduced[..]
            }
            None => query,
        };
        let dim = self.work_dim();
        let mut top = TopK::new(k);
        let table = self.pq.as_ref().map(|pq| pq.distance_table(q));
        let mut score = |i: u32| {
            let d = match (&self.pq, &table, &self.vectors) {
                (Some(pq), Some(t), _) => pq.adc(t, i as usize),
                (_, _, Some(v)) => squared_l2(&v[i as usize * dim..(i as usize + 1) * dim], q),
                _ => unreachable!("index holds either codes or vectors"),
            };
            top.push(d, i);
        };
        match &self.ivf {
            Some(ivf) => {
                if n_probe == 0 || n_probe > ivf.n_list() {
                    return Err(IndexError::InvalidConfig(format!(
                        "n_probe={n_probe} must be in [1, {}]",
                        ivf.n_list()
                    )));
                }
                for c in ivf.probe(q, n_probe) {
                    for &i in &ivf.lists[c] {
                        score(i);
                    }
                }
            }
            None => {
                for i in 0..self.n as u32 {
                    score(i);
                }
            }
        }
        let found = top.into_neighborhood();
        match &self.raw {
            Some(raw) if self.config.recompute => {
                recompute_in(raw, self.input_dim, &found.ids, query, k)
            }
            _ => Ok(found),
        }
    }

    /// Searches every query, fanning out over `parallelism` worker threads
    /// (1 runs inline). Output order follows input order.
    pub fn search_batch<Q: AsRef<[f32]> + Sync>(
        &self,
        queries: &[Q],
        k: usize,
        parallelism: usize,
    ) -> Result<Vec<Neighborhood>, IndexError> {
        if parallelism <= 1 {
            return queries.iter().map(|q| self.search(q.as_ref(), k)).collect();
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(parallelism)
            .build()
            .map_err(|e| IndexError::InvalidConfig(e.to_string()))?;
        pool.install(|| {
            queries
                .par_iter()
                .map(|q| self.search(q.as_ref(), k))
                .collect()
        })
    }
}
