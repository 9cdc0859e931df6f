//! Density-aware calibration: a temperature built from mean kNN distances in
//! several embedding layers.

use serde::{Deserialize, Serialize};

use super::{scaled_nll, scaled_softmax};
use crate::ann::AnnIndex;
use crate::datastore::{Datastore, EvalRecord};
use crate::error::{CalibrationError, IndexError};
use crate::optim::{minimize_bounded, BoundedProblem};

/// Lower clamp on the temperature.
pub const PHI_FLOOR: f64 = 1e-3;
/// Box for every DAC weight.
pub const DAC_WEIGHT_BOUNDS: [f64; 2] = [0.0, 100.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DacParams {
    pub w0: f64,
    /// One weight per layer: intermediate layers first, final layer last.
    pub w: Vec<f64>,
    pub k: usize,
}

impl DacParams {
    /// The starting point: `w0 = 1`, all layer weights zero.
    pub fn initial(layers: usize, k: usize) -> Self {
        Self {
            w0: 1.0,
            w: vec![0.0; layers],
            k,
        }
    }
}

/// Per-record inputs to the DAC objective.
#[derive(Debug, Clone, PartialEq)]
pub struct DacFeatures {
    pub logits: Vec<f32>,
    pub gold: usize,
    /// Mean squared kNN distance per layer.
    pub s: Vec<f64>,
}

/// `max(w0 + sum_l w_l s_l, PHI_FLOOR)`.
pub fn dac_phi(s: &[f64], params: &DacParams) -> Result<f64, CalibrationError> {
    if s.len() != params.w.len() {
        return Err(CalibrationError::LayerMismatch {
            expected: params.w.len(),
            actual: s.len(),
        });
    }
    let phi = params.w0 + params.w.iter().zip(s).map(|(w, s)| w * s).sum::<f64>();
    Ok(phi.max(PHI_FLOOR))
}

/// `softmax(logits / phi)`.
pub fn dac_apply(logits: &[f32], phi: f64) -> Result<Vec<f64>, CalibrationError> {
    if !(phi >= PHI_FLOOR && phi.is_finite()) {
        return Err(CalibrationError::ParamOutOfRange(format!("phi {phi}")));
    }
    scaled_softmax(logits, 1.0 / phi)
}

/// Flat indexes over each intermediate layer and then the final keys.
pub fn build_layer_indexes(ds: &Datastore) -> Result<Vec<AnnIndex>, IndexError> {
    let mut out = Vec::with_capacity(ds.layers().len() + 1);
    for l in 0..ds.layers().len() {
        out.push(AnnIndex::flat(&ds.layer_view(l))?);
    }
    out.push(AnnIndex::flat(ds)?);
    Ok(out)
}

/// Mean distance to the `k` nearest rows in each layer index.
pub fn layer_mean_distances(
    record: &EvalRecord,
    layer_indexes: &[AnnIndex],
    k: usize,
) -> Result<Vec<f64>, CalibrationError> {
    let expected = record.layer_embeddings.len() + 1;
    if layer_indexes.len() != expected {
        return Err(CalibrationError::LayerMismatch {
            expected,
            actual: layer_indexes.len(),
        });
    }
    let queries = record
        .layer_embeddings
        .iter()
        .map(Vec::as_slice)
        .chain(std::iter::once(record.embedding.as_slice()));
    queries
        .zip(layer_indexes)
        .map(|(q, idx)| {
            let nb = idx.search(q, k)?;
            if nb.ids.is_empty() {
                return Err(CalibrationError::EmptyNeighborhood);
            }
            Ok(nb.mean_dist())
        })
        .collect()
}

fn objective(dev: &[DacFeatures], x: &[f64]) -> (f64, Vec<f64>) {
    let mut f = 0.0;
    let mut g = vec![0.0; x.len()];
    for r in dev {
        let raw = x[0] + x[1..].iter().zip(&r.s).map(|(w, s)| w * s).sum::<f64>();
        let phi = raw.max(PHI_FLOOR);
        let (nll, d_scale) = scaled_nll(&r.logits, r.gold, 1.0 / phi);
        f += nll;
        if raw > PHI_FLOOR {
            let d_phi = d_scale * (-1.0 / (phi * phi));
            g[0] += d_phi;
            for (gl, s) in g[1..].iter_mut().zip(&r.s) {
                *gl += d_phi * s;
            }
        }
    }
    let n = dev.len() as f64;
    g.iter_mut().for_each(|v| *v /= n);
    (f / n, g)
}

/// Fits the weights by bounded minimization of dev NLL.
///
/// Layer distances are divided by their dev means during the search so that
/// every weight sees a unit-scale feature; the result is mapped back to raw
/// weights. Besides the default start, the search also starts from the best
/// `w0`-only fit, so the result is never worse than plain temperature scaling.
pub fn dac_fit_features(
    dev: &[DacFeatures],
    k: usize,
) -> Result<(DacParams, f64), CalibrationError> {
    let first = dev.first().ok_or(CalibrationError::EmptyDevSet)?;
    let layers = first.s.len();
    if let Some(r) = dev.iter().find(|r| r.s.len() != layers) {
        return Err(CalibrationError::LayerMismatch {
            expected: layers,
            actual: r.s.len(),
        });
    }
    let scale: Vec<f64> = (0..layers)
        .map(|l| {
            let m = dev.iter().map(|r| r.s[l]).sum::<f64>() / dev.len() as f64;
            if m > 0.0 && m.is_finite() {
                m
            } else {
                1.0
            }
        })
        .collect();
    let scaled: Vec<DacFeatures> = dev
        .iter()
        .map(|r| DacFeatures {
            logits: r.logits.clone(),
            gold: r.gold,
            s: r.s.iter().zip(&scale).map(|(s, m)| s / m).collect(),
        })
        .collect();

    let dim = layers + 1;
    let [lo, hi] = DAC_WEIGHT_BOUNDS;
    let lower = vec![lo; dim];
    let mut upper = vec![hi; dim];
    for (u, m) in upper[1..].iter_mut().zip(&scale) {
        *u = hi * m;
    }
    let run = |lower: &[f64], upper: &[f64], x0: &[f64]| {
        let problem = BoundedProblem::new(
            |x: &[f64]| objective(&scaled, x).0,
            lower.to_vec(),
            upper.to_vec(),
        )?
        .with_gradient(|x: &[f64]| objective(&scaled, x).1);
        minimize_bounded(&problem, x0)
    };

    let init = DacParams::initial(layers, k);
    let mut x0 = vec![init.w0];
    x0.extend(&init.w);
    let mut frozen = upper.clone();
    frozen[1..].fill(lo);
    let temp_only = run(&lower, &frozen, &x0)?;

    let mut best = run(&lower, &upper, &x0)?;
    let warm = run(&lower, &upper, &temp_only.x)?;
    if warm.f < best.f {
        best = warm;
    }
    Ok((
        DacParams {
            w0: best.x[0],
            w: best.x[1..].iter().zip(&scale).map(|(w, m)| w / m).collect(),
            k,
        },
        best.f,
    ))
}

/// Computes layer distances for the dev records, then fits.
pub fn dac_fit(
    dev: &[EvalRecord],
    layer_indexes: &[AnnIndex],
    k: usize,
) -> Result<(DacParams, f64), CalibrationError> {
    let feats = dev
        .iter()
        .map(|r| {
            Ok(DacFeatures {
                logits: r.logits.clone(),
                gold: r.gold as usize,
                s: layer_mean_distances(r, layer_indexes, k)?,
            })
        })
        .collect::<Result<Vec<_>, CalibrationError>>()?;
    dac_fit_features(&feats, k)
}
