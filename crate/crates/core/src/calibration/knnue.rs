//! kNN-UE: the logit scale grows with neighbor proximity and with how many
//! neighbors share the predicted label.

use serde::{Deserialize, Serialize};

use super::{scaled_nll, scaled_softmax};
use crate::ann::{AnnIndex, Neighborhood};
use crate::datastore::{Datastore, EvalRecord};
use crate::error::CalibrationError;
use crate::optim::{grid_refine, minimize_bounded, BoundedProblem};

pub const DEFAULT_K: usize = 32;
/// Lower clamp on the weight so the softmax stays defined.
pub const W_FLOOR: f64 = 1e-6;
/// Boxes for alpha, tau, lambda and b, in that order.
pub const KNNUE_BOUNDS: [[f64; 2]; 4] = [[0.0, 10.0], [1e-3, 1e3], [0.0, 10.0], [0.0, 10.0]];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KnnUeParams {
    pub alpha: f64,
    pub tau: f64,
    pub lambda: f64,
    pub b: f64,
    pub k: usize,
}

impl KnnUeParams {
    fn as_vec(&self) -> [f64; 4] {
        [self.alpha, self.tau, self.lambda, self.b]
    }

    fn check(&self) -> Result<(), CalibrationError> {
        for (v, [lo, hi]) in self.as_vec().iter().zip(KNNUE_BOUNDS) {
            if !(*v >= lo && *v <= hi) {
                return Err(CalibrationError::ParamOutOfRange(format!(
                    "{v} outside [{lo}, {hi}] in {self:?}"
                )));
            }
        }
        Ok(())
    }
}

/// What the objective needs from one dev record.
#[derive(Debug, Clone, PartialEq)]
pub struct KnnFeatures {
    pub logits: Vec<f32>,
    pub gold: usize,
    pub dists: Vec<f64>,
    /// Neighbors whose label equals the raw prediction.
    pub same_label: usize,
}

impl KnnFeatures {
    pub fn from_neighborhood(
        logits: &[f32],
        gold: usize,
        nb: &Neighborhood,
        labels: &[u32],
    ) -> Result<Self, CalibrationError> {
        if nb.ids.is_empty() {
            return Err(CalibrationError::EmptyNeighborhood);
        }
        let pred = super::argmax(logits) as u32;
        Ok(Self {
            logits: logits.to_vec(),
            gold,
            dists: nb.dists.iter().map(|&d| f64::from(d)).collect(),
            same_label: nb.ids.iter().filter(|&&id| labels[id as usize] == pred).count(),
        })
    }

    fn k(&self) -> f64 {
        self.dists.len() as f64
    }

    /// Unclamped weight and its partials in (alpha, tau, lambda, b).
    fn raw_weight(&self, x: &[f64]) -> (f64, [f64; 4]) {
        let [alpha, tau, lambda, b] = [x[0], x[1], x[2], x[3]];
        let k = self.k();
        let mut prox = 0.0;
        let mut prox_dtau = 0.0;
        for &d in &self.dists {
            let e = (-d / tau).exp();
            prox += e;
            prox_dtau += e * d / (tau * tau);
        }
        prox /= k;
        prox_dtau /= k;
        let agree = self.same_label as f64 / k + b;
        (
            alpha * prox + lambda * agree,
            [prox, alpha * prox_dtau, agree, lambda],
        )
    }
}

/// `max((alpha/K) sum exp(-d/tau) + lambda (S/K + b), W_FLOOR)` where `K` is
/// the number of neighbors returned.
pub fn knnue_weight(
    nb: &Neighborhood,
    predicted: u32,
    labels: &[u32],
    params: &KnnUeParams,
) -> Result<f64, CalibrationError> {
    params.check()?;
    if nb.ids.is_empty() {
        return Err(CalibrationError::EmptyNeighborhood);
    }
    let k = nb.ids.len() as f64;
    let prox: f64 = nb
        .dists
        .iter()
        .map(|&d| (-f64::from(d) / params.tau).exp())
        .sum::<f64>()
        / k;
    let same = nb
        .ids
        .iter()
        .filter(|&&id| labels[id as usize] == predicted)
        .count() as f64;
    let w = params.alpha * prox + params.lambda * (same / k + params.b);
    Ok(w.max(W_FLOOR))
}

/// `softmax(w * logits)`.
pub fn knnue_apply(logits: &[f32], w: f64) -> Result<Vec<f64>, CalibrationError> {
    if !(w > 0.0 && w.is_finite()) {
        return Err(CalibrationError::ParamOutOfRange(format!("weight {w}")));
    }
    scaled_softmax(logits, w)
}

fn objective(dev: &[KnnFeatures], x: &[f64]) -> (f64, Vec<f64>) {
    let mut f = 0.0;
    let mut g = vec![0.0; 4];
    for r in dev {
        let (raw, partials) = r.raw_weight(x);
        let w = raw.max(W_FLOOR);
        let (nll, d_w) = scaled_nll(&r.logits, r.gold, w);
        f += nll;
        if raw > W_FLOOR {
            for (gi, p) in g.iter_mut().zip(partials) {
                *gi += d_w * p;
            }
        }
    }
    let n = dev.len() as f64;
    g.iter_mut().for_each(|v| *v /= n);
    (f / n, g)
}

/// Searches the index for each record and collects objective inputs.
pub fn knnue_features(
    records: &[EvalRecord],
    index: &AnnIndex,
    ds: &Datastore,
    k: usize,
) -> Result<Vec<KnnFeatures>, CalibrationError> {
    let queries: Vec<&[f32]> = records.iter().map(|r| r.embedding.as_slice()).collect();
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    let nbs = index.search_batch(&queries, k, threads)?;
    records
        .iter()
        .zip(&nbs)
        .map(|(r, nb)| KnnFeatures::from_neighborhood(&r.logits, r.gold as usize, nb, ds.labels()))
        .collect()
}

/// Minimizes dev NLL from `x0`.
fn descend(
    dev: &[KnnFeatures],
    lower: &[f64],
    upper: &[f64],
    x0: &[f64],
) -> Result<(Vec<f64>, f64), CalibrationError> {
    let problem = BoundedProblem::new(
        |x: &[f64]| objective(dev, x).0,
        lower.to_vec(),
        upper.to_vec(),
    )?
    .with_gradient(|x: &[f64]| objective(dev, x).1);
    let m = minimize_bounded(&problem, x0)?;
    Ok((m.x, m.f))
}

/// Fits (alpha, tau, lambda, b) on precomputed dev features. Without labels,
/// lambda and b stay at zero.
///
/// Starts from alpha = 1, tau = mean dev neighbor distance, lambda = 1,
/// b = 0, and also from the best point of a coarse grid. The labelled fit
/// additionally starts from the label-free optimum, so it never ends with a
/// higher dev NLL than that variant. The lowest final NLL wins.
pub fn knnue_fit_features(
    dev: &[KnnFeatures],
    k: usize,
    with_label: bool,
) -> Result<(KnnUeParams, f64), CalibrationError> {
    if dev.is_empty() {
        return Err(CalibrationError::EmptyDevSet);
    }
    if dev.iter().any(|r| r.dists.is_empty()) {
        return Err(CalibrationError::EmptyNeighborhood);
    }
    let [a_b, t_b, l_b, b_b] = KNNUE_BOUNDS;
    let total: f64 = dev.iter().flat_map(|r| &r.dists).sum();
    let count: usize = dev.iter().map(|r| r.dists.len()).sum();
    let tau0 = (total / count as f64).clamp(t_b[0], t_b[1]);

    let (mut lower, mut upper) = (
        vec![a_b[0], t_b[0], l_b[0], b_b[0]],
        vec![a_b[1], t_b[1], l_b[1], b_b[1]],
    );
    let mut starts = Vec::new();
    if with_label {
        starts.push(vec![1.0, tau0, 1.0, 0.0]);
    } else {
        lower[2..].fill(0.0);
        upper[2..].fill(0.0);
        starts.push(vec![1.0, tau0, 0.0, 0.0]);
    }

    // Coarse grid over the free coordinates, tau around its data scale.
    let t_lo = (tau0 / 20.0).max(t_b[0]);
    let t_hi = (tau0 * 5.0).min(t_b[1]);
    let grid_best = if with_label {
        grid_refine(
            |x| objective(dev, x).0,
            &[a_b[0], t_lo, l_b[0], 0.0],
            &[a_b[1], t_hi, l_b[1], 2.0],
            5,
        )?
    } else {
        let g = grid_refine(
            |x| objective(dev, &[x[0], x[1], 0.0, 0.0]).0,
            &[a_b[0], t_lo],
            &[a_b[1], t_hi],
            9,
        )?;
        vec![g[0], g[1], 0.0, 0.0]
    };
    starts.push(grid_best);
    if with_label {
        let (nested, _) = knnue_fit_features(dev, k, false)?;
        starts.push(nested.as_vec().to_vec());
    }

    let mut best: Option<(Vec<f64>, f64)> = None;
    for s in &starts {
        let (x, f) = descend(dev, &lower, &upper, s)?;
        if best.as_ref().is_none_or(|(_, bf)| f < *bf) {
            best = Some((x, f));
        }
    }
    let (x, f) = best.expect("at least one start");
    Ok((
        KnnUeParams {
            alpha: x[0],
            tau: x[1],
            lambda: x[2],
            b: x[3],
            k,
        },
        f,
    ))
}

/// Fits on dev records using neighbors from `index`.
pub fn knnue_fit(
    dev: &[EvalRecord],
    index: &AnnIndex,
    ds: &Datastore,
    k: usize,
    with_label: bool,
) -> Result<(KnnUeParams, f64), CalibrationError> {
    if dev.is_empty() {
        return Err(CalibrationError::EmptyDevSet);
    }
    let feats = knnue_features(dev, index, ds, k)?;
    knnue_fit_features(&feats, k, with_label)
}

/// Everything needed to explain one kNN-UE confidence.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaseReport {
    pub predicted: u32,
    pub gold: u32,
    pub correct: bool,
    pub sr_confidence: f64,
    pub knnue_confidence: f64,
    pub knnue_no_label_confidence: Option<f64>,
    pub weight: f64,
    pub same_label: usize,
    pub k: usize,
    pub neighbor_ids: Vec<u32>,
    pub neighbor_labels: Vec<u32>,
    pub neighbor_dists: Vec<f32>,
}

/// Confidence breakdown for one record under fitted parameters, optionally
/// next to the label-free variant.
pub fn case_report(
    record: &EvalRecord,
    index: &AnnIndex,
    ds: &Datastore,
    params: &KnnUeParams,
    no_label: Option<&KnnUeParams>,
) -> Result<CaseReport, CalibrationError> {
    let nb = index.search(&record.embedding, params.k)?;
    let pred = record.predicted();
    let weight = knnue_weight(&nb, pred, ds.labels(), params)?;
    let p = pred as usize;
    let sr = scaled_softmax(&record.logits, 1.0)?[p];
    let conf = knnue_apply(&record.logits, weight)?[p];
    let wo = match no_label {
        Some(q) => {
            let nb_q = if q.k == params.k {
                nb.clone()
            } else {
                index.search(&record.embedding, q.k)?
            };
            let w = knnue_weight(&nb_q, pred, ds.labels(), q)?;
            Some(knnue_apply(&record.logits, w)?[p])
        }
        None => None,
    };
    let labels: Vec<u32> = nb.ids.iter().map(|&i| ds.labels()[i as usize]).collect();
    Ok(CaseReport {
        predicted: pred,
        gold: record.gold,
        correct: pred == record.gold,
        sr_confidence: sr,
        knnue_confidence: conf,
        knnue_no_label_confidence: wo,
        weight,
        same_label: labels.iter().filter(|&&l| l == pred).count(),
        k: nb.ids.len(),
        neighbor_ids: nb.ids,
        neighbor_labels: labels,
        neighbor_dists: nb.dists,
    })
}
