//! Product quantization with asymmetric distance computation.

use rayon::prelude::*;

use super::kmeans::{fit_kmeans, nearest, training_sample};
use super::squared_l2;
use crate::error::IndexError;

/// Per-subspace codebooks and one byte code per (row, subspace).
#[derive(Debug, Clone, PartialEq)]
pub struct PqCodebook {
    pub n_sub: usize,
    pub n_centroids: usize,
    pub sub_dim: usize,
    /// `n_sub x n_centroids x sub_dim`.
    pub centroids: Vec<f32>,
    /// `n x n_sub`.
    pub codes: Vec<u8>,
}

impl PqCodebook {
    /// Trains one k-means codebook per subspace and encodes every row.
    pub fn train(
        data: &[f32],
        dim: usize,
        n_sub: usize,
        n_centroids: usize,
        iters: usize,
        seed: u64,
    ) -> Result<Self, IndexError> {
        if n_sub == 0 || !dim.is_multiple_of(n_sub) {
            return Err(IndexError::InvalidConfig(format!(
                "dimension {dim} is not divisible by n_sub={n_sub}"
            )));
        }
        if !(1..=256).contains(&n_centroids) {
            return Err(IndexError::InvalidConfig(format!(
                "n_centroids={n_centroids} must be in [1, 256]"
            )));
        }
        let rows = data.len() / dim;
        if n_centroids > rows {
            return Err(IndexError::TooFewRows {
                k: n_centroids,
                rows,
            });
        }
        let sub_dim = dim / n_sub;
        let books: Vec<Vec<f32>> = (0..n_sub)
            .map(|s| {
                let sub: Vec<f32> = data
                    .chunks_exact(dim)
                    .flat_map(|row| row[s * sub_dim..(s + 1) * sub_dim].iter().copied())
                    .collect();
                let sample_seed = seed.wrapping_add(s as u64);
                let train = training_sample(&sub, sub_dim, n_centroids, sample_seed);
                fit_kmeans(&train, sub_dim, n_centroids, iters, sample_seed).map(|k| k.centroids)
            })
            .collect::<Result<_, _>>()?;
        let centroids: Vec<f32> = books.concat();
        let mut pq = Self {
            n_sub,
            n_centroids,
            sub_dim,
            centroids,
            codes: Vec::new(),
        };
        pq.codes = data
            .par_chunks_exact(dim)
            .flat_map_iter(|row| pq.encode(row))
            .collect();
        Ok(pq)
    }

    fn book(&self, s: usize) -> &[f32] {
        let len = self.n_centroids * self.sub_dim;
        &self.centroids[s * len..(s + 1) * len]
    }

    pub fn encode(&self, x: &[f32]) -> Vec<u8> {
        (0..self.n_sub)
            .map(|s| {
                let part = &x[s * self.sub_dim..(s + 1) * self.sub_dim];
                nearest(self.book(s), self.sub_dim, part).0 as u8
            })
            .collect()
    }

    pub fn decode(&self, codes: &[u8]) -> Vec<f32> {
        codes
            .iter()
            .enumerate()
            .flat_map(|(s, &c)| {
                let book = self.book(s);
                book[c as usize * self.sub_dim..(c as usize + 1) * self.sub_dim]
                    .iter()
                    .copied()
            })
            .collect()
    }

    pub fn row_codes(&self, i: usize) -> &[u8] {
        &self.codes[i * self.n_sub..(i + 1) * self.n_sub]
    }

    /// Per-query table of squared distances from each query subvector to
    /// every centroid of its subspace.
    pub fn distance_table(&self, query: &[f32]) -> Vec<f32> {
        let mut table = Vec::with_capacity(self.n_sub * self.n_centroids);
        for s in 0..self.n_sub {
            let part = &query[s * self.sub_dim..(s + 1) * self.sub_dim];
            for c in self.book(s).chunks_exact(self.sub_dim) {
                table.push(squared_l2(c, part));
            }
        }
        table
    }

    /// Estimated squared distance of row `i` from a precomputed table.
    #[inline]
    pub fn adc(&self, table: &[f32], i: usize) -> f32 {
        let mut acc = 0.0f32;
        for (s, &c) in self.row_codes(i).iter().enumerate() {
            acc += table[s * self.n_centroids + c as usize];
        }
        acc
    }
}
