//! Confidence estimators.
//!
//! Every calibrator here multiplies the logits by one positive scalar per
//! example before the softmax, so the predicted class never changes:
//!
//! | method            | scalar                                          |
//! |-------------------|-------------------------------------------------|
//! | softmax response  | 1                                               |
//! | temperature       | 1 / T                                           |
//! | density softmax   | normalized train-density log-likelihood          |
//! | DAC               | 1 / (w_0 + sum_l w_l s_l)                       |
//! | kNN-UE            | (a/K) sum_k exp(-d_k/tau) + lambda (S/K + b)    |

mod dac;
mod density;
mod knnue;
mod ts;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use dac::{
    build_layer_indexes, dac_apply, dac_fit, dac_fit_features, dac_phi, layer_mean_distances,
    DacFeatures, DacParams, DAC_WEIGHT_BOUNDS, PHI_FLOOR,
};
pub use density::{
    density_softmax_apply, fit_density, DensityModel, GaussianMixture, NormalizedDensity, VAR_FLOOR,
};
pub use knnue::{
    case_report, knnue_apply, knnue_features, knnue_fit, knnue_fit_features, knnue_weight,
    CaseReport, KnnFeatures, KnnUeParams, DEFAULT_K, KNNUE_BOUNDS, W_FLOOR,
};
pub use ts::{ts_apply, ts_fit, ts_fit_features, ts_nll_gradient, TsParams, TS_BOUNDS};

use crate::error::CalibrationError;

/// Index of the largest value, lowest index on ties.
pub fn argmax<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn check_logits(logits: &[f32]) -> Result<(), CalibrationError> {
    if logits.is_empty() {
        return Err(CalibrationError::EmptyLogits);
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(CalibrationError::NonFiniteLogits);
    }
    Ok(())
}

/// Softmax with max subtraction; sums to one within 1e-9.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>, CalibrationError> {
    if logits.is_empty() {
        return Err(CalibrationError::EmptyLogits);
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(CalibrationError::NonFiniteLogits);
    }
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// `softmax(scale * logits)`.
pub fn scaled_softmax(logits: &[f32], scale: f64) -> Result<Vec<f64>, CalibrationError> {
    check_logits(logits)?;
    let scaled: Vec<f64> = logits.iter().map(|&z| scale * f64::from(z)).collect();
    softmax(&scaled)
}

/// Softmax response: argmax label and its probability.
pub fn sr_confidence(logits: &[f32]) -> Result<(usize, f64), CalibrationError> {
    let p = scaled_softmax(logits, 1.0)?;
    let label = argmax(logits);
    Ok((label, p[label]))
}

/// Negative log-likelihood of `gold` under `softmax(scale * logits)` and its
/// derivative with respect to `scale`.
pub(crate) fn scaled_nll(logits: &[f32], gold: usize, scale: f64) -> (f64, f64) {
    let m = logits
        .iter()
        .map(|&z| scale * f64::from(z))
        .fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    let mut weighted = 0.0;
    for &z in logits {
        let e = (scale * f64::from(z) - m).exp();
        sum += e;
        weighted += e * f64::from(z);
    }
    let lse = m + sum.ln();
    let zy = f64::from(logits[gold]);
    (lse - scale * zy, weighted / sum - zy)
}

/// Confidence of an entity: product of its token confidences.
pub fn entity_confidence(token_confidences: &[f64]) -> Result<f64, CalibrationError> {
    if token_confidences.is_empty() {
        return Err(CalibrationError::EmptySpan);
    }
    if let Some(c) = token_confidences
        .iter()
        .find(|c| !(**c > 0.0 && **c <= 1.0))
    {
        return Err(CalibrationError::ParamOutOfRange(format!(
            "token confidence {c} not in (0, 1]"
        )));
    }
    Ok(token_confidences.iter().product())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Sr,
    Ts,
    DensitySoftmax,
    Dac,
    KnnUe,
    KnnUeNoLabel,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Sr,
        Method::Ts,
        Method::DensitySoftmax,
        Method::Dac,
        Method::KnnUe,
        Method::KnnUeNoLabel,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Sr => "sr",
            Method::Ts => "ts",
            Method::DensitySoftmax => "density_softmax",
            Method::Dac => "dac",
            Method::KnnUe => "knn_ue",
            Method::KnnUeNoLabel => "knn_ue_no_label",
        }
    }

    pub fn uses_knn(self) -> bool {
        matches!(self, Method::KnnUe | Method::KnnUeNoLabel)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                format!(
                    "unknown method {s:?} (expected one of: {})",
                    Method::ALL.map(Method::name).join(", ")
                )
            })
    }
}

/// Fitted parameters of one calibrator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibratorParams {
    Sr,
    Ts(TsParams),
    DensitySoftmax(NormalizedDensity<GaussianMixture>),
    Dac(DacParams),
    KnnUe(KnnUeParams),
}

/// Serialized fit result: `{method, params, bounds, dev_nll, seed}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedCalibrator {
    pub method: Method,
    pub params: CalibratorParams,
    /// Box bounds per optimized parameter, in parameter order.
    pub bounds: Vec<[f64; 2]>,
    pub dev_nll: f64,
    pub seed: u64,
}

impl FittedCalibrator {
    /// The identity calibrator (softmax response).
    pub fn sr(dev_nll: f64) -> Self {
        Self {
            method: Method::Sr,
            params: CalibratorParams::Sr,
            bounds: Vec::new(),
            dev_nll,
            seed: 0,
        }
    }

    /// Checks that the parameters match the declared method.
    pub fn check(&self) -> Result<(), CalibrationError> {
        let ok = matches!(
            (self.method, &self.params),
            (Method::Sr, CalibratorParams::Sr)
                | (Method::Ts, CalibratorParams::Ts(_))
                | (Method::DensitySoftmax, CalibratorParams::DensitySoftmax(_))
                | (Method::Dac, CalibratorParams::Dac(_))
                | (Method::KnnUe, CalibratorParams::KnnUe(_))
                | (Method::KnnUeNoLabel, CalibratorParams::KnnUe(_))
        );
        if !ok {
            return Err(CalibrationError::MethodMismatch(self.method.to_string()));
        }
        if let (Method::KnnUeNoLabel, CalibratorParams::KnnUe(p)) = (self.method, &self.params) {
            if p.lambda != 0.0 || p.b != 0.0 {
                return Err(CalibrationError::MethodMismatch(
                    "knn_ue_no_label requires lambda = b = 0".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Mean negative log-likelihood of the gold labels under plain softmax.
pub fn sr_nll<'a>(records: impl IntoIterator<Item = (&'a [f32], usize)>) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for (logits, gold) in records {
        total += scaled_nll(logits, gold, 1.0).0;
        n += 1;
    }
    total / n.max(1) as f64
}
