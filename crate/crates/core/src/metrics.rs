//! Calibration, selective-prediction and out-of-distribution metrics, plus
//! the wall-clock latency harness.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::ann::IndexConfig;
use crate::error::MetricsError;

/// Default number of confidence bins.
pub const DEFAULT_BINS: usize = 10;
/// Minimum repeats accepted by [`bench_latency`].
pub const MIN_REPEATS: usize = 3;

/// One prediction's confidence and whether the prediction was right.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredPrediction {
    pub confidence: f64,
    pub correct: bool,
}

impl ScoredPrediction {
    pub fn new(confidence: f64, correct: bool) -> Result<Self, MetricsError> {
        if !(confidence.is_finite() && (0.0..=1.0).contains(&confidence)) {
            return Err(MetricsError::InvalidConfidence(confidence));
        }
        Ok(Self {
            confidence,
            correct,
        })
    }
}

fn check(preds: &[ScoredPrediction]) -> Result<(), MetricsError> {
    if preds.is_empty() {
        return Err(MetricsError::Empty);
    }
    for p in preds {
        if !(p.confidence.is_finite() && (0.0..=1.0).contains(&p.confidence)) {
            return Err(MetricsError::InvalidConfidence(p.confidence));
        }
    }
    Ok(())
}

/// Upper edge of bin `b` (0-based) out of `bins`.
fn edge(b: usize, bins: usize) -> f64 {
    b as f64 / bins as f64
}

/// Bin of a confidence: equal-width, right-inclusive `(lo, hi]`, with 0
/// placed in the first bin.
pub fn bin_index(confidence: f64, bins: usize) -> usize {
    if confidence <= 0.0 {
        return 0;
    }
    let mut b = ((confidence * bins as f64).ceil() as usize).clamp(1, bins) - 1;
    // settle floating-point disagreements against the exact edge values
    while b > 0 && confidence <= edge(b, bins) {
        b -= 1;
    }
    while b + 1 < bins && confidence > edge(b + 1, bins) {
        b += 1;
    }
    b
}

struct Bin {
    count: usize,
    correct: usize,
    conf_sum: f64,
}

fn binned(preds: &[ScoredPrediction], bins: usize) -> Result<Vec<Bin>, MetricsError> {
    check(preds)?;
    if bins == 0 {
        return Err(MetricsError::ZeroBins);
    }
    let mut out: Vec<Bin> = (0..bins)
        .map(|_| Bin {
            count: 0,
            correct: 0,
            conf_sum: 0.0,
        })
        .collect();
    for p in preds {
        let b = &mut out[bin_index(p.confidence, bins)];
        b.count += 1;
        b.correct += usize::from(p.correct);
        b.conf_sum += p.confidence;
    }
    Ok(out)
}

fn gap(b: &Bin) -> f64 {
    let n = b.count as f64;
    (b.correct as f64 / n - b.conf_sum / n).abs()
}

/// Expected calibration error: `sum_b |D_b|/n * |acc(D_b) - conf(D_b)|`.
pub fn ece(preds: &[ScoredPrediction], bins: usize) -> Result<f64, MetricsError> {
    let n = preds.len() as f64;
    Ok(binned(preds, bins)?
        .iter()
        .filter(|b| b.count > 0)
        .map(|b| b.count as f64 / n * gap(b))
        .sum())
}

/// Maximum calibration error over the non-empty bins.
pub fn mce(preds: &[ScoredPrediction], bins: usize) -> Result<f64, MetricsError> {
    Ok(binned(preds, bins)?
        .iter()
        .filter(|b| b.count > 0)
        .map(gap)
        .fold(0.0, f64::max))
}

/// Order by confidence descending, ties by ascending input position.
fn risk_order(preds: &[ScoredPrediction]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| {
        preds[b]
            .confidence
            .total_cmp(&preds[a].confidence)
            .then(a.cmp(&b))
    });
    order
}

/// Area under the risk-coverage curve:
/// `sum_{i=1..n} (errors among the i most confident) / (i * n)`.
pub fn aurc(preds: &[ScoredPrediction]) -> Result<f64, MetricsError> {
    check(preds)?;
    let n = preds.len() as f64;
    let mut errors = 0usize;
    let mut total = 0.0;
    for (i, idx) in risk_order(preds).into_iter().enumerate() {
        errors += usize::from(!preds[idx].correct);
        total += errors as f64 / ((i + 1) as f64 * n);
    }
    Ok(total)
}

/// Area of the optimal risk-coverage curve for error rate `r`:
/// `r + (1 - r) ln(1 - r)`, which is 0 at `r = 0` and 1 at `r = 1`.
pub fn optimal_aurc(error_rate: f64) -> f64 {
    if error_rate <= 0.0 {
        0.0
    } else if error_rate >= 1.0 {
        1.0
    } else {
        error_rate + (1.0 - error_rate) * (1.0 - error_rate).ln()
    }
}

/// Excess AURC over the optimum, multiplied by 1000.
pub fn e_aurc(preds: &[ScoredPrediction]) -> Result<f64, MetricsError> {
    let a = aurc(preds)?;
    let r = preds.iter().filter(|p| !p.correct).count() as f64 / preds.len() as f64;
    Ok((a - optimal_aurc(r)) * 1000.0)
}

/// Probability that a random positive scores above a random negative, ties
/// counted one half (rank-sum form).
fn mann_whitney(pos: &[f64], neg: &[f64]) -> f64 {
    let mut all: Vec<(f64, bool)> = pos
        .iter()
        .map(|&s| (s, true))
        .chain(neg.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        // average 1-based rank of the tie group
        let avg = (i + j) as f64 / 2.0 + 1.0;
        let group_pos = all[i..=j].iter().filter(|x| x.1).count();
        rank_sum += avg * group_pos as f64;
        i = j + 1;
    }
    let np = pos.len() as f64;
    let nn = neg.len() as f64;
    (rank_sum - np * (np + 1.0) / 2.0) / (np * nn)
}

/// AUROC of confidence as a detector of correct predictions.
pub fn auroc_selective(preds: &[ScoredPrediction]) -> Result<f64, MetricsError> {
    check(preds)?;
    let (pos, neg): (Vec<&ScoredPrediction>, Vec<&ScoredPrediction>) =
        preds.iter().partition(|p| p.correct);
    if pos.is_empty() || neg.is_empty() {
        return Err(MetricsError::Undefined(
            "selective AUROC needs both correct and incorrect predictions",
        ));
    }
    let pos: Vec<f64> = pos.iter().map(|p| p.confidence).collect();
    let neg: Vec<f64> = neg.iter().map(|p| p.confidence).collect();
    Ok(mann_whitney(&pos, &neg))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OodMetrics {
    /// False-positive rate on out-of-domain data at the largest threshold
    /// whose in-domain true-positive rate reaches 95%.
    pub fpr_at_95: f64,
    pub auroc: f64,
    pub aupr_in: f64,
    pub aupr_out: f64,
}

/// Step-wise average precision of `pos` against `neg` with rule
/// "positive if score >= threshold".
fn average_precision(pos: &[f64], neg: &[f64]) -> f64 {
    let mut all: Vec<(f64, bool)> = pos
        .iter()
        .map(|&s| (s, true))
        .chain(neg.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let p = pos.len() as f64;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < all.len() {
        let t = all[i].0;
        while i < all.len() && all[i].0 == t {
            if all[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / p;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    ap
}

/// Out-of-distribution detection metrics with in-domain as the positive
/// class: a sample is called in-domain when its score is at least the
/// threshold. `aupr_out` swaps the roles and negates the scores.
pub fn ood_metrics(id_scores: &[f64], ood_scores: &[f64]) -> Result<OodMetrics, MetricsError> {
    if id_scores.is_empty() || ood_scores.is_empty() {
        return Err(MetricsError::Empty);
    }
    if id_scores.iter().chain(ood_scores).any(|s| !s.is_finite()) {
        return Err(MetricsError::Undefined("non-finite score"));
    }
    let mut id_sorted = id_scores.to_vec();
    id_sorted.sort_by(|a, b| b.total_cmp(a));
    let mut thresholds = id_sorted.clone();
    thresholds.dedup();
    let n_id = id_scores.len() as f64;
    let n_ood = ood_scores.len() as f64;
    let mut fpr_at_95 = 1.0;
    for &t in &thresholds {
        let tp = id_sorted.iter().take_while(|&&s| s >= t).count() as f64;
        if tp / n_id >= 0.95 {
            fpr_at_95 = ood_scores.iter().filter(|&&s| s >= t).count() as f64 / n_ood;
            break;
        }
    }
    let neg_id: Vec<f64> = id_scores.iter().map(|s| -s).collect();
    let neg_ood: Vec<f64> = ood_scores.iter().map(|s| -s).collect();
    Ok(OodMetrics {
        fpr_at_95,
        auroc: mann_whitney(id_scores, ood_scores),
        aupr_in: average_precision(id_scores, ood_scores),
        aupr_out: average_precision(&neg_ood, &neg_id),
    })
}

/// Wall-clock time per full pass over a query set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean_s: f64,
    /// Sample standard deviation over repeats.
    pub std_s: f64,
    pub repeats: usize,
    pub queries: usize,
    pub parallelism: usize,
    pub runs_s: Vec<f64>,
}

/// Times `pass` over the whole query set `repeats` times and returns the
/// statistics together with the output of the last pass.
pub fn bench_latency<Q, R>(
    queries: &[Q],
    repeats: usize,
    parallelism: usize,
    mut pass: impl FnMut(&[Q]) -> R,
) -> Result<(LatencyStats, R), MetricsError> {
    if queries.is_empty() {
        return Err(MetricsError::Empty);
    }
    if repeats < MIN_REPEATS {
        return Err(MetricsError::TooFewRepeats {
            min: MIN_REPEATS,
            got: repeats,
        });
    }
    let mut runs = Vec::with_capacity(repeats);
    let mut last = None;
    for _ in 0..repeats {
        let start = Instant::now();
        let out = pass(queries);
        runs.push(start.elapsed().as_secs_f64());
        last = Some(out);
    }
    let mean = runs.iter().sum::<f64>() / repeats as f64;
    let var = runs.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (repeats - 1) as f64;
    Ok((
        LatencyStats {
            mean_s: mean,
            std_s: var.sqrt(),
            repeats,
            queries: queries.len(),
            parallelism,
            runs_s: runs,
        },
        last.expect("repeats >= 3"),
    ))
}

/// Every metric for one (method, index config, split).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub split: String,
    pub n: usize,
    pub bins: usize,
    pub k: Option<usize>,
    pub accuracy: f64,
    pub ece: f64,
    pub mce: f64,
    /// Null when every prediction is correct (or every one wrong).
    pub auroc: Option<f64>,
    pub aurc: f64,
    /// AURC minus its optimum, times 1000.
    pub e_aurc: f64,
    pub mean_confidence: f64,
    pub ood: Option<OodMetrics>,
    pub latency: Option<LatencyStats>,
    pub coverage: Option<f64>,
    pub index: Option<IndexConfig>,
    /// True when scores are per entity (token confidences multiplied).
    pub entity_level: bool,
}

impl MetricsReport {
    /// Computes the calibration and selective-prediction block.
    pub fn from_predictions(
        method: impl Into<String>,
        split: impl Into<String>,
        preds: &[ScoredPrediction],
        bins: usize,
    ) -> Result<Self, MetricsError> {
        let n = preds.len();
        let auroc = match auroc_selective(preds) {
            Ok(v) => Some(v),
            Err(MetricsError::Undefined(_)) => None,
            Err(e) => return Err(e),
        };
        Ok(Self {
            method: method.into(),
            split: split.into(),
            n,
            bins,
            k: None,
            accuracy: preds.iter().filter(|p| p.correct).count() as f64 / n as f64,
            ece: ece(preds, bins)?,
            mce: mce(preds, bins)?,
            auroc,
            aurc: aurc(preds)?,
            e_aurc: e_aurc(preds)?,
            mean_confidence: preds.iter().map(|p| p.confidence).sum::<f64>() / n as f64,
            ood: None,
            latency: None,
            coverage: None,
            index: None,
            entity_level: false,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(c: f64, ok: bool) -> ScoredPrediction {
        ScoredPrediction::new(c, ok).unwrap()
    }

    #[test]
    fn four_point_calibration_errors() {
        let preds = [p(0.95, true), p(0.65, false), p(0.65, true), p(0.85, true)];
        assert!((ece(&preds, 10).unwrap() - 0.125).abs() < 1e-12);
        assert!((mce(&preds, 10).unwrap() - 0.15).abs() < 1e-12);
    }

    #[test]
    fn perfect_and_worst_calibration() {
        let good = vec![p(1.0, true); 5];
        assert_eq!(ece(&good, 10).unwrap(), 0.0);
        assert_eq!(mce(&good, 10).unwrap(), 0.0);
        assert_eq!(ece(&[p(1.0, false)], 10).unwrap(), 1.0);
    }

    #[test]
    fn bin_edges_are_right_inclusive() {
        assert_eq!(bin_index(0.0, 10), 0);
        assert_eq!(bin_index(0.1, 10), 0);
        assert_eq!(bin_index(0.3, 10), 2);
        assert_eq!(bin_index(0.30000001, 10), 3);
        assert_eq!(bin_index(0.7, 10), 6);
        assert_eq!(bin_index(1.0, 10), 9);
        assert_eq!(bin_index(0.5, 1), 0);
    }

    #[test]
    fn two_point_risk_coverage() {
        let preds = [p(0.9, true), p(0.8, false)];
        assert!((aurc(&preds).unwrap() - 0.25).abs() < 1e-15);
        let expected = (0.25 - (0.5 + 0.5 * 0.5f64.ln())) * 1000.0;
        assert!((e_aurc(&preds).unwrap() - expected).abs() < 1e-12);
        assert!((e_aurc(&preds).unwrap() - 96.57).abs() < 0.01);
    }

    #[test]
    fn all_correct_has_zero_risk() {
        let preds = [p(0.3, true), p(0.9, true)];
        assert_eq!(aurc(&preds).unwrap(), 0.0);
        assert_eq!(e_aurc(&preds).unwrap(), 0.0);
    }

    #[test]
    fn selective_auroc_cases() {
        let sep = [p(0.9, true), p(0.8, true), p(0.2, false)];
        assert_eq!(auroc_selective(&sep).unwrap(), 1.0);
        let tied = [p(0.5, true), p(0.5, false), p(0.5, true)];
        assert_eq!(auroc_selective(&tied).unwrap(), 0.5);
        assert!(matches!(
            auroc_selective(&[p(0.5, true)]),
            Err(MetricsError::Undefined(_))
        ));
    }

    #[test]
    fn ood_disjoint_and_identical() {
        let m = ood_metrics(&[0.9, 0.8, 0.7], &[0.1, 0.2]).unwrap();
        assert_eq!(m.fpr_at_95, 0.0);
        assert_eq!(m.auroc, 1.0);
        assert_eq!(m.aupr_in, 1.0);
        assert_eq!(m.aupr_out, 1.0);
        let s = [0.1, 0.5, 0.5, 0.9];
        assert_eq!(ood_metrics(&s, &s).unwrap().auroc, 0.5);
        assert!(ood_metrics(&[], &s).is_err());
    }

    #[test]
    fn empty_inputs_are_errors() {
        assert_eq!(ece(&[], 10), Err(MetricsError::Empty));
        assert_eq!(aurc(&[]), Err(MetricsError::Empty));
        assert_eq!(ece(&[p(0.5, true)], 0), Err(MetricsError::ZeroBins));
        assert!(ScoredPrediction::new(1.5, true).is_err());
    }

    #[test]
    fn latency_needs_three_repeats() {
        let q = [1, 2, 3];
        assert!(bench_latency(&q, 2, 1, |qs| qs.len()).is_err());
        let (stats, out) = bench_latency(&q, 3, 1, |qs| qs.iter().sum::<i32>()).unwrap();
        assert_eq!(out, 6);
        assert_eq!(stats.runs_s.len(), 3);
        assert!(stats.std_s >= 0.0);
        assert!(bench_latency::<i32, ()>(&[], 3, 1, |_| ()).is_err());
    }
}
