//! Fitting and scoring calibrators over whole record sets, and turning the
//! scores into metric reports.

use std::sync::OnceLock;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ann::{coverage, AnnIndex, Neighborhood};
use crate::calibration::{
    argmax, build_layer_indexes, dac_fit, dac_phi, entity_confidence, fit_density, knnue_fit,
    knnue_weight, layer_mean_distances, scaled_softmax, sr_nll, ts_fit, CalibratorParams,
    FittedCalibrator, KnnUeParams, Method, DAC_WEIGHT_BOUNDS, DEFAULT_K, KNNUE_BOUNDS, TS_BOUNDS,
};
use crate::datastore::{Datastore, EvalRecord, EvalSet};
use crate::error::{CalibrationError, DataError, IndexError, PipelineError};
use crate::metrics::{
    bench_latency, ood_metrics, LatencyStats, MetricsReport, ScoredPrediction, DEFAULT_BINS,
};
use crate::seed;

/// Shared read-only state for fitting and scoring.
pub struct Context<'a> {
    pub ds: &'a Datastore,
    /// Index over `ds` used by kNN-UE.
    pub index: &'a AnnIndex,
    pool: rayon::ThreadPool,
    parallelism: usize,
    layer_indexes: OnceLock<Vec<AnnIndex>>,
}

impl<'a> Context<'a> {
    /// `parallelism` worker threads fan out over records (0 means all cores).
    pub fn new(ds: &'a Datastore, index: &'a AnnIndex, parallelism: usize) -> Result<Self, PipelineError> {
        if index.len() != ds.len() || index.input_dim() != ds.dim() {
            return Err(PipelineError::Invalid(format!(
                "index ({} x {}) does not match datastore ({} x {})",
                index.len(),
                index.input_dim(),
                ds.len(),
                ds.dim()
            )));
        }
        let parallelism = if parallelism == 0 {
            std::thread::available_parallelism().map_or(1, |n| n.get())
        } else {
            parallelism
        };
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(parallelism)
            .build()
            .map_err(|e| PipelineError::Invalid(e.to_string()))?;
        Ok(Self {
            ds,
            index,
            pool,
            parallelism,
            layer_indexes: OnceLock::new(),
        })
    }

    pub fn parallelism(&self) -> usize {
        self.parallelism
    }

    /// Flat per-layer indexes for DAC, built on first use.
    pub fn layer_indexes(&self) -> Result<&[AnnIndex], IndexError> {
        if let Some(v) = self.layer_indexes.get() {
            return Ok(v);
        }
        let built = build_layer_indexes(self.ds)?;
        Ok(self.layer_indexes.get_or_init(|| built))
    }

    fn check_set(&self, set: &EvalSet) -> Result<(), PipelineError> {
        set.validate()?;
        if set.dim != self.ds.dim() {
            return Err(DataError::DimensionMismatch {
                expected: self.ds.dim(),
                actual: set.dim,
                row: 0,
            }
            .into());
        }
        if set.num_classes != self.ds.num_classes() {
            return Err(PipelineError::Invalid(format!(
                "num_classes: records have {}, datastore has {}",
                set.num_classes,
                self.ds.num_classes()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub k: usize,
    pub seed: u64,
    /// Mixture size for density softmax; defaults to the class count.
    pub density_components: Option<usize>,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            seed: 0,
            density_components: None,
        }
    }
}

/// Fits `method` on the dev set.
pub fn fit(
    method: Method,
    dev: &EvalSet,
    ctx: &Context<'_>,
    opts: &FitOptions,
) -> Result<FittedCalibrator, PipelineError> {
    ctx.check_set(dev)?;
    if dev.is_empty() {
        return Err(CalibrationError::EmptyDevSet.into());
    }
    let records = &dev.records;
    let (params, bounds, nll) = match method {
        Method::Sr => {
            let nll = sr_nll(records.iter().map(|r| (r.logits.as_slice(), r.gold as usize)));
            (CalibratorParams::Sr, Vec::new(), nll)
        }
        Method::Ts => {
            let (p, nll) = ts_fit(records)?;
            (CalibratorParams::Ts(p), vec![TS_BOUNDS], nll)
        }
        Method::DensitySoftmax => {
            let c = opts.density_components.unwrap_or(ctx.ds.num_classes());
            let nd = fit_density(ctx.ds, c, seed::derive(opts.seed, seed::stream::DENSITY))?;
            let params = CalibratorParams::DensitySoftmax(nd);
            let provisional = FittedCalibrator {
                method,
                params,
                bounds: Vec::new(),
                dev_nll: 0.0,
                seed: opts.seed,
            };
            let nll = mean_nll(&score(&provisional, records, ctx)?);
            (provisional.params, Vec::new(), nll)
        }
        Method::Dac => {
            let layers = ctx.layer_indexes()?;
            let (p, nll) = dac_fit(records, layers, opts.k)?;
            let n = p.w.len() + 1;
            (CalibratorParams::Dac(p), vec![DAC_WEIGHT_BOUNDS; n], nll)
        }
        Method::KnnUe | Method::KnnUeNoLabel => {
            let with_label = method == Method::KnnUe;
            let (p, nll) = knnue_fit(records, ctx.index, ctx.ds, opts.k, with_label)?;
            let mut bounds = KNNUE_BOUNDS.to_vec();
            if !with_label {
                bounds[2] = [0.0, 0.0];
                bounds[3] = [0.0, 0.0];
            }
            (CalibratorParams::KnnUe(p), bounds, nll)
        }
    };
    Ok(FittedCalibrator {
        method,
        params,
        bounds,
        dev_nll: nll,
        seed: opts.seed,
    })
}

/// One calibrated prediction.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Scored {
    pub predicted: u32,
    pub gold: u32,
    /// Calibrated probability of the predicted class.
    pub confidence: f64,
    /// The positive factor applied to the logits.
    pub scale: f64,
    pub probs: Vec<f64>,
    pub span_id: Option<u32>,
}

impl Scored {
    pub fn correct(&self) -> bool {
        self.predicted == self.gold
    }
}

fn scale_of(
    fitted: &FittedCalibrator,
    r: &EvalRecord,
    ctx: &Context<'_>,
) -> Result<f64, CalibrationError> {
    Ok(match &fitted.params {
        CalibratorParams::Sr => 1.0,
        CalibratorParams::Ts(p) => 1.0 / p.t,
        CalibratorParams::DensitySoftmax(nd) => nd.normalized(&r.embedding),
        CalibratorParams::Dac(p) => {
            let s = layer_mean_distances(r, ctx.layer_indexes()?, p.k)?;
            1.0 / dac_phi(&s, p)?
        }
        CalibratorParams::KnnUe(p) => {
            let nb = ctx.index.search(&r.embedding, p.k)?;
            knnue_weight(&nb, r.predicted(), ctx.ds.labels(), p)?
        }
    })
}

/// Calibrated probabilities for every record, in input order.
pub fn score(
    fitted: &FittedCalibrator,
    records: &[EvalRecord],
    ctx: &Context<'_>,
) -> Result<Vec<Scored>, PipelineError> {
    fitted.check()?;
    let out: Result<Vec<Scored>, CalibrationError> = ctx.pool.install(|| {
        records
            .par_iter()
            .map(|r| {
                let scale = scale_of(fitted, r, ctx)?;
                let probs = scaled_softmax(&r.logits, scale)?;
                let predicted = argmax(&r.logits) as u32;
                Ok(Scored {
                    predicted,
                    gold: r.gold,
                    confidence: probs[predicted as usize],
                    scale,
                    probs,
                    span_id: r.span_id,
                })
            })
            .collect()
    });
    Ok(out?)
}

/// Mean negative log-probability of the gold class.
pub fn mean_nll(scored: &[Scored]) -> f64 {
    let total: f64 = scored
        .iter()
        .map(|s| -s.probs[s.gold as usize].max(f64::MIN_POSITIVE).ln())
        .sum();
    total / scored.len().max(1) as f64
}

/// Token predictions as metric inputs.
pub fn token_predictions(scored: &[Scored]) -> Result<Vec<ScoredPrediction>, PipelineError> {
    scored
        .iter()
        .map(|s| Ok(ScoredPrediction::new(s.confidence, s.correct())?))
        .collect()
}

/// Groups consecutive records sharing a span id into one entity whose
/// confidence is the product of its token confidences and which is correct
/// only when every token is. Records without a span stand alone.
pub fn entity_predictions(scored: &[Scored]) -> Result<Vec<ScoredPrediction>, PipelineError> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < scored.len() {
        let mut j = i + 1;
        if let Some(span) = scored[i].span_id {
            while j < scored.len() && scored[j].span_id == Some(span) {
                j += 1;
            }
        }
        let group = &scored[i..j];
        let confs: Vec<f64> = group.iter().map(|s| s.confidence).collect();
        out.push(ScoredPrediction::new(
            entity_confidence(&confs)?,
            group.iter().all(Scored::correct),
        )?);
        i = j;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub bins: usize,
    /// Time the scoring pass this many times when set.
    pub latency_repeats: Option<usize>,
    /// Score entities instead of tokens when the records carry spans.
    pub entity_level: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            bins: DEFAULT_BINS,
            latency_repeats: None,
            entity_level: true,
        }
    }
}

fn k_of(fitted: &FittedCalibrator) -> Option<usize> {
    match &fitted.params {
        CalibratorParams::KnnUe(p) => Some(p.k),
        CalibratorParams::Dac(p) => Some(p.k),
        _ => None,
    }
}

fn report_for(
    fitted: &FittedCalibrator,
    split: &str,
    set: &EvalSet,
    scored: &[Scored],
    ctx: &Context<'_>,
    opts: &EvalOptions,
) -> Result<MetricsReport, PipelineError> {
    let entity = opts.entity_level && set.has_spans();
    let preds = if entity {
        entity_predictions(scored)?
    } else {
        token_predictions(scored)?
    };
    let mut report = MetricsReport::from_predictions(fitted.method.name(), split, &preds, opts.bins)?;
    report.entity_level = entity;
    report.k = k_of(fitted);
    if fitted.method.uses_knn() {
        report.index = Some(ctx.index.config().clone());
    }
    Ok(report)
}

/// Scores the in-domain test set (and optionally an out-of-domain set) and
/// returns one report per split. The in-domain report carries the OOD
/// detection block, using the calibrated maximum probability as the score.
pub fn evaluate(
    fitted: &FittedCalibrator,
    test: &EvalSet,
    ood: Option<&EvalSet>,
    ctx: &Context<'_>,
    opts: &EvalOptions,
) -> Result<Vec<MetricsReport>, PipelineError> {
    ctx.check_set(test)?;
    if test.is_empty() {
        return Err(DataError::Empty.into());
    }
    let (latency, scored) = match opts.latency_repeats {
        Some(repeats) => {
            let (stats, out) =
                bench_latency(&test.records, repeats, ctx.parallelism, |q| score(fitted, q, ctx))?;
            (Some(stats), out?)
        }
        None => (None, score(fitted, &test.records, ctx)?),
    };
    let mut id_report = report_for(fitted, "test_id", test, &scored, ctx, opts)?;
    id_report.latency = latency;
    let mut reports = vec![id_report];
    if let Some(ood) = ood {
        ctx.check_set(ood)?;
        if ood.is_empty() {
            return Err(DataError::Empty.into());
        }
        let ood_scored = score(fitted, &ood.records, ctx)?;
        let id_scores: Vec<f64> = scored.iter().map(|s| s.confidence).collect();
        let ood_scores: Vec<f64> = ood_scored.iter().map(|s| s.confidence).collect();
        let block = ood_metrics(&id_scores, &ood_scores)?;
        reports[0].ood = Some(block);
        let mut ood_report = report_for(fitted, "test_ood", ood, &ood_scored, ctx, opts)?;
        ood_report.ood = Some(block);
        reports.push(ood_report);
    }
    Ok(reports)
}

/// Neighborhoods of every query.
pub fn search_all(
    index: &AnnIndex,
    queries: &[&[f32]],
    k: usize,
    parallelism: usize,
) -> Result<Vec<Neighborhood>, IndexError> {
    index.search_batch(queries, k, parallelism)
}

/// Percentage of `reference` neighbor ids that `approx` recovers over the
/// queries.
pub fn coverage_between(
    reference: &AnnIndex,
    approx: &AnnIndex,
    queries: &[&[f32]],
    k: usize,
    parallelism: usize,
) -> Result<f64, IndexError> {
    let r = search_all(reference, queries, k, parallelism)?;
    let a = search_all(approx, queries, k, parallelism)?;
    coverage(&r, &a)
}

/// Times the retrieval half of kNN-UE (neighbor search plus the weight) over
/// a query set, for comparing index configurations without fitted logits.
pub fn bench_knn_pass(
    index: &AnnIndex,
    labels: &[u32],
    queries: &[&[f32]],
    k: usize,
    repeats: usize,
    parallelism: usize,
) -> Result<LatencyStats, PipelineError> {
    let params = KnnUeParams {
        alpha: 1.0,
        tau: 1.0,
        lambda: 1.0,
        b: 0.0,
        k,
    };
    let (stats, out) = bench_latency(queries, repeats, parallelism, |qs| {
        let nbs = index.search_batch(qs, k, parallelism)?;
        nbs.iter()
            .map(|nb| {
                let pred = nb.ids.first().map_or(0, |&i| labels[i as usize]);
                knnue_weight(nb, pred, labels, &params)
            })
            .collect::<Result<Vec<f64>, CalibrationError>>()
            .map_err(PipelineError::from)
    })?;
    out?;
    Ok(stats)
}
