//! Density softmax: logits scaled by how typical the embedding is under a
//! density model fitted on the datastore keys.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::scaled_softmax;
use crate::ann::fit_kmeans;
use crate::datastore::Datastore;
use crate::error::{CalibrationError, IndexError};

/// Smallest per-dimension variance a mixture component may reach.
pub const VAR_FLOOR: f64 = 1e-6;
const EM_MAX_ITER: usize = 100;
const EM_TOL: f64 = 1e-7;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Anything that scores embeddings by log-likelihood.
pub trait DensityModel {
    fn dim(&self) -> usize;
    fn log_likelihood(&self, x: &[f32]) -> f64;
}

/// Diagonal-covariance Gaussian mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture {
    pub dim: usize,
    pub weights: Vec<f64>,
    /// `n_components x dim`, row-major.
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
    /// Mean train log-likelihood after each EM step.
    pub ll_trace: Vec<f64>,
}

impl GaussianMixture {
    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    /// Per-component `log w_c + log N(x; mu_c, diag var_c)`.
    fn component_log_probs(&self, x: &[f32], out: &mut [f64]) {
        let d = self.dim;
        for (c, o) in out.iter_mut().enumerate() {
            let mu = &self.means[c * d..(c + 1) * d];
            let var = &self.variances[c * d..(c + 1) * d];
            let mut acc = 0.0;
            for j in 0..d {
                let diff = f64::from(x[j]) - mu[j];
                acc += diff * diff / var[j] + var[j].ln();
            }
            *o = self.weights[c].ln() - 0.5 * (acc + d as f64 * LN_2PI);
        }
    }

    /// Fits by EM from a k-means initialization.
    pub fn fit(
        data: &[f32],
        dim: usize,
        n_components: usize,
        seed: u64,
    ) -> Result<Self, CalibrationError> {
        if dim == 0 || data.is_empty() {
            return Err(IndexError::Empty.into());
        }
        let n = data.len() / dim;
        let km = fit_kmeans(data, dim, n_components, 10, seed)?;
        let c_count = km.k();

        let mut gmm = GaussianMixture {
            dim,
            weights: vec![0.0; c_count],
            means: km.centroids.iter().map(|&v| f64::from(v)).collect(),
            variances: vec![0.0; c_count * dim],
            ll_trace: Vec::new(),
        };
        // Hard-assignment statistics as the starting point.
        let mut resp = vec![0.0; n * c_count];
        for i in 0..n {
            let (c, _) = km.assign(&data[i * dim..(i + 1) * dim]);
            resp[i * c_count + c] = 1.0;
        }
        gmm.m_step(data, &resp);

        let mut prev = f64::NEG_INFINITY;
        for _ in 0..EM_MAX_ITER {
            let ll = gmm.e_step(data, &mut resp);
            gmm.ll_trace.push(ll);
            if ll - prev <= EM_TOL * ll.abs().max(1.0) {
                break;
            }
            prev = ll;
            gmm.m_step(data, &resp);
        }
        Ok(gmm)
    }

    /// Fills responsibilities; returns the mean log-likelihood.
    fn e_step(&self, data: &[f32], resp: &mut [f64]) -> f64 {
        let c_count = self.n_components();
        let lls: Vec<f64> = data
            .par_chunks(self.dim)
            .zip(resp.par_chunks_mut(c_count))
            .map(|(x, r)| {
                self.component_log_probs(x, r);
                let m = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = r.iter().map(|v| (v - m).exp()).sum();
                let lse = m + s.ln();
                for v in r.iter_mut() {
                    *v = (*v - lse).exp();
                }
                lse
            })
            .collect();
        lls.iter().sum::<f64>() / lls.len() as f64
    }

    fn m_step(&mut self, data: &[f32], resp: &[f64]) {
        let d = self.dim;
        let c_count = self.n_components();
        let n = data.len() / d;
        for c in 0..c_count {
            let nk: f64 = (0..n).map(|i| resp[i * c_count + c]).sum();
            self.weights[c] = nk / n as f64;
            if nk < 1e-12 {
                // Dead component: keep its shape, it carries no weight.
                for j in 0..d {
                    self.variances[c * d + j] = self.variances[c * d + j].max(VAR_FLOOR);
                }
                continue;
            }
            let mut mean = vec![0.0; d];
            for i in 0..n {
                let r = resp[i * c_count + c];
                if r == 0.0 {
                    continue;
                }
                for j in 0..d {
                    mean[j] += r * f64::from(data[i * d + j]);
                }
            }
            mean.iter_mut().for_each(|m| *m /= nk);
            let mut var = vec![0.0; d];
            for i in 0..n {
                let r = resp[i * c_count + c];
                if r == 0.0 {
                    continue;
                }
                for j in 0..d {
                    let diff = f64::from(data[i * d + j]) - mean[j];
                    var[j] += r * diff * diff;
                }
            }
            for j in 0..d {
                self.means[c * d + j] = mean[j];
                self.variances[c * d + j] = (var[j] / nk).max(VAR_FLOOR);
            }
        }
    }
}

impl DensityModel for GaussianMixture {
    fn dim(&self) -> usize {
        self.dim
    }

    fn log_likelihood(&self, x: &[f32]) -> f64 {
        let mut lp = vec![0.0; self.n_components()];
        self.component_log_probs(x, &mut lp);
        let m = lp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        m + lp.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
    }
}

/// A density model with min-max normalization over its training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedDensity<M> {
    pub model: M,
    pub ll_min: f64,
    pub ll_max: f64,
}

impl<M: DensityModel> NormalizedDensity<M> {
    /// Wraps `model`, taking the log-likelihood range over `train` rows.
    pub fn new(model: M, train: &[f32]) -> Self {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for x in train.chunks(model.dim()) {
            let ll = model.log_likelihood(x);
            lo = lo.min(ll);
            hi = hi.max(ll);
        }
        Self {
            model,
            ll_min: lo,
            ll_max: hi,
        }
    }

    /// Log-likelihood mapped to [0, 1]; a flat training range maps to 1.
    pub fn normalized(&self, x: &[f32]) -> f64 {
        let span = self.ll_max - self.ll_min;
        if span.is_nan() || span <= 0.0 {
            return 1.0;
        }
        ((self.model.log_likelihood(x) - self.ll_min) / span).clamp(0.0, 1.0)
    }
}

/// Fits a mixture on the datastore keys and normalizes over them.
pub fn fit_density(
    ds: &Datastore,
    n_components: usize,
    seed: u64,
) -> Result<NormalizedDensity<GaussianMixture>, CalibrationError> {
    let gmm = GaussianMixture::fit(ds.keys(), ds.dim(), n_components, seed)?;
    Ok(NormalizedDensity::new(gmm, ds.keys()))
}

/// `softmax(norm_ll * logits)`.
pub fn density_softmax_apply(logits: &[f32], norm_ll: f64) -> Result<Vec<f64>, CalibrationError> {
    if !(0.0..=1.0).contains(&norm_ll) {
        return Err(CalibrationError::ParamOutOfRange(format!(
            "normalized log-likelihood {norm_ll} not in [0, 1]"
        )));
    }
    scaled_softmax(logits, norm_ll)
}
