//! Temperature scaling.

use serde::{Deserialize, Serialize};

use super::{scaled_nll, scaled_softmax};
use crate::error::CalibrationError;
use crate::optim::{minimize_bounded, BoundedProblem};

/// Search interval for the temperature.
pub const TS_BOUNDS: [f64; 2] = [1e-2, 1e2];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TsParams {
    pub t: f64,
}

/// `softmax(logits / t)`.
pub fn ts_apply(logits: &[f32], t: f64) -> Result<Vec<f64>, CalibrationError> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(CalibrationError::ParamOutOfRange(format!("temperature {t}")));
    }
    scaled_softmax(logits, 1.0 / t)
}

/// Mean dev NLL at temperature `t` and its derivative in `t`.
pub fn ts_nll_gradient(dev: &[(&[f32], usize)], t: f64) -> (f64, f64) {
    let mut nll = 0.0;
    let mut grad = 0.0;
    for &(z, y) in dev {
        let (v, d_scale) = scaled_nll(z, y, 1.0 / t);
        nll += v;
        grad += d_scale * (-1.0 / (t * t));
    }
    let n = dev.len() as f64;
    (nll / n, grad / n)
}

/// Fits `t` by minimizing dev NLL over [`TS_BOUNDS`] from `t = 1`.
/// Returns the parameters and the dev NLL they reach.
pub fn ts_fit_features(dev: &[(&[f32], usize)]) -> Result<(TsParams, f64), CalibrationError> {
    if dev.is_empty() {
        return Err(CalibrationError::EmptyDevSet);
    }
    let problem = BoundedProblem::new(
        |x: &[f64]| ts_nll_gradient(dev, x[0]).0,
        vec![TS_BOUNDS[0]],
        vec![TS_BOUNDS[1]],
    )?
    .with_gradient(|x: &[f64]| vec![ts_nll_gradient(dev, x[0]).1]);
    let m = minimize_bounded(&problem, &[1.0])?;
    Ok((TsParams { t: m.x[0] }, m.f))
}

/// Fits temperature scaling on dev records.
pub fn ts_fit(dev: &[crate::datastore::EvalRecord]) -> Result<(TsParams, f64), CalibrationError> {
    let feats: Vec<(&[f32], usize)> = dev
        .iter()
        .map(|r| (r.logits.as_slice(), r.gold as usize))
        .collect();
    ts_fit_features(&feats)
}
