//! One function per subcommand. Each returns the JSON it wrote so callers
//! and tests can inspect it without reparsing files.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use knnue::ann::{read_index, write_index};
use knnue::calibration::{FittedCalibrator, Method};
use knnue::datastore::{
    generate_synthetic, random_keys, read_datastore, read_records, write_datastore, write_records,
};
use knnue::metrics::{LatencyStats, MetricsReport};
use knnue::pipeline::{
    bench_knn_pass, coverage_between, evaluate, fit, Context, EvalOptions, FitOptions,
};
use knnue::{AnnIndex, Datastore, EvalSet, IndexConfig, IndexKind, SynthSpec};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{
    read_json, RunConfig, DATASTORE_FILE, DEV_FILE, TEST_ID_FILE, TEST_OOD_FILE,
};
use crate::error::CliError;

/// Fixed header of the sweep CSV.
pub const SWEEP_CSV_HEADER: &str =
    "param,value,method,accuracy,ece,mce,e_aurc,time_mean_s,time_std_s,coverage";

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
    }
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn load_datastore(path: &Path) -> Result<Datastore, CliError> {
    read_datastore(path).map_err(|e| CliError::from(e).context(path.display()))
}

fn load_records(path: &Path) -> Result<EvalSet, CliError> {
    read_records(path).map_err(|e| CliError::from(e).context(path.display()))
}

/// Writes the four synthetic splits plus the datastore sidecar into `out`.
pub fn cmd_synth(spec_path: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<Value, CliError> {
    let mut spec: SynthSpec = match spec_path {
        Some(p) => read_json(p)?,
        None => SynthSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    let data = generate_synthetic(&spec)?;
    fs::create_dir_all(out).map_err(|e| CliError::Data(format!("{}: {e}", out.display())))?;
    write_datastore(&data.train, out.join(DATASTORE_FILE))?;
    write_records(&data.dev, out.join(DEV_FILE))?;
    write_records(&data.test_id, out.join(TEST_ID_FILE))?;
    write_records(&data.test_ood, out.join(TEST_OOD_FILE))?;
    let summary = json!({
        "out_dir": out,
        "spec": spec,
        "files": [DATASTORE_FILE, DEV_FILE, TEST_ID_FILE, TEST_OOD_FILE],
    });
    Ok(summary)
}

/// Loads the index named in the config or builds it from `index`.
fn obtain_index(cfg: &RunConfig, ds: &Datastore) -> Result<AnnIndex, CliError> {
    let index = match &cfg.paths.index {
        Some(p) => read_index(p).map_err(|e| CliError::from(e).context(p.display()))?,
        None => AnnIndex::build(ds, &cfg.index).map_err(|e| CliError::from(e).context("index"))?,
    };
    if index.len() != ds.len() || index.input_dim() != ds.dim() {
        return Err(CliError::Data(format!(
            "paths.index: index covers {} x {} but the datastore is {} x {}",
            index.len(),
            index.input_dim(),
            ds.len(),
            ds.dim()
        )));
    }
    Ok(index)
}

pub fn cmd_build_index(cfg: &RunConfig, out: Option<&Path>) -> Result<Value, CliError> {
    let ds = load_datastore(&cfg.datastore_path()?)?;
    let index = AnnIndex::build(&ds, &cfg.index).map_err(|e| CliError::from(e).context("index"))?;
    let path = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.out_dir().join("index.kui"));
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    write_index(&index, &path)?;
    Ok(json!({ "index": path, "config": cfg.index, "n": ds.len(), "dim": ds.dim() }))
}

fn check_k(k: usize, ds: &Datastore, field: &str) -> Result<(), CliError> {
    if k == 0 || k > ds.len() {
        return Err(CliError::Usage(format!(
            "{field}: K={k} must be in [1, {}] (datastore size)",
            ds.len()
        )));
    }
    Ok(())
}

fn default_params_path(cfg: &RunConfig, method: Method) -> PathBuf {
    cfg.out_dir().join(format!("{method}.params.json"))
}

/// Fits the configured method on the dev split. `sr` has nothing to fit and
/// returns `None` without writing anything.
pub fn cmd_fit(cfg: &RunConfig, out: Option<&Path>) -> Result<Option<(PathBuf, FittedCalibrator)>, CliError> {
    let method = cfg.method();
    if method == Method::Sr {
        return Ok(None);
    }
    let ds = load_datastore(&cfg.datastore_path()?)?;
    let dev = load_records(&cfg.dev_path()?)?;
    check_k(cfg.k, &ds, "k")?;
    let index = obtain_index(cfg, &ds)?;
    let ctx = Context::new(&ds, &index, cfg.parallelism)?;
    let opts = FitOptions {
        k: cfg.k,
        seed: cfg.seed,
        density_components: None,
    };
    let fitted = fit(method, &dev, &ctx, &opts)?;
    let path = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| default_params_path(cfg, method));
    write_json(&path, &fitted)?;
    Ok(Some((path, fitted)))
}

/// Resolves the calibrator for `eval`: the params file when there is one,
/// the identity for `sr`.
fn load_fitted(cfg: &RunConfig) -> Result<FittedCalibrator, CliError> {
    let from_file = |p: &Path| -> Result<FittedCalibrator, CliError> {
        let f: FittedCalibrator = read_json(p)?;
        f.check().map_err(|e| CliError::from(e).context(p.display()))?;
        Ok(f)
    };
    if let Some(p) = &cfg.paths.params {
        let f = from_file(p)?;
        if let Some(m) = cfg.method {
            if m != f.method {
                return Err(CliError::Usage(format!(
                    "method: params file {} holds {} but method is {m}",
                    p.display(),
                    f.method
                )));
            }
        }
        return Ok(f);
    }
    let method = cfg.method();
    if method == Method::Sr {
        return Ok(FittedCalibrator::sr(f64::NAN));
    }
    let p = default_params_path(cfg, method);
    if !p.exists() {
        return Err(CliError::Usage(format!(
            "paths.params: {method} needs fitted parameters; run `fit` first or pass --params ({} not found)",
            p.display()
        )));
    }
    from_file(&p)
}

fn eval_options(cfg: &RunConfig) -> EvalOptions {
    EvalOptions {
        bins: cfg.bins,
        latency_repeats: Some(cfg.bench_repeats),
        entity_level: true,
    }
}

/// Scores the test splits and writes one report per split.
pub fn cmd_eval(cfg: &RunConfig) -> Result<Vec<MetricsReport>, CliError> {
    let fitted = load_fitted(cfg)?;
    let ds = load_datastore(&cfg.datastore_path()?)?;
    let test = load_records(&cfg.test_id_path()?)?;
    let ood = cfg.test_ood_path().map(|p| load_records(&p)).transpose()?;
    let index = obtain_index(cfg, &ds)?;
    let ctx = Context::new(&ds, &index, cfg.parallelism)?;
    let reports = evaluate(&fitted, &test, ood.as_ref(), &ctx, &eval_options(cfg))?;
    let out = cfg.out_dir();
    for r in &reports {
        write_json(&out.join(format!("{}_{}.json", r.method, r.split)), r)?;
    }
    Ok(reports)
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepPoint {
    pub param: String,
    pub value: usize,
    pub file: PathBuf,
    pub report: MetricsReport,
}

/// Forces the kind to include the structure a swept field belongs to.
fn with_structure(mut cfg: IndexConfig, param: &str) -> IndexConfig {
    cfg.kind = match (param, cfg.kind) {
        ("n_sub", IndexKind::Flat) => IndexKind::Pq,
        ("n_sub", IndexKind::Ivf) => IndexKind::Composed,
        ("n_probe", IndexKind::Flat) => IndexKind::Ivf,
        ("n_probe", IndexKind::Pq) => IndexKind::Composed,
        (_, k) => k,
    };
    cfg
}

/// Runs every sweep list, one parameter at a time around the base config.
/// Writes one report per point and a combined CSV.
pub fn cmd_sweep(cfg: &RunConfig) -> Result<Vec<SweepPoint>, CliError> {
    if cfg.sweep.is_empty() {
        return Err(CliError::Usage("sweep: every sweep list is empty".into()));
    }
    let method = cfg.method();
    let ds = load_datastore(&cfg.datastore_path()?)?;
    let dev = load_records(&cfg.dev_path()?)?;
    let test = load_records(&cfg.test_id_path()?)?;
    let ood = cfg.test_ood_path().map(|p| load_records(&p)).transpose()?;

    // Every point is checked before any work starts.
    let mut plan: Vec<(&str, usize, usize, IndexConfig)> = Vec::new();
    for &k in &cfg.sweep.k {
        check_k(k, &ds, "sweep.k")?;
        plan.push(("k", k, k, cfg.index.clone()));
    }
    check_k(cfg.k, &ds, "k")?;
    for (param, values) in [
        ("n_sub", &cfg.sweep.n_sub),
        ("n_probe", &cfg.sweep.n_probe),
        ("d_pca", &cfg.sweep.d_pca),
    ] {
        for &v in values {
            let mut ic = with_structure(cfg.index.clone(), param);
            match param {
                "n_sub" => ic.n_sub = v,
                "n_probe" => ic.n_probe = v,
                _ => ic.d_pca = Some(v),
            }
            ic.validate(ds.dim(), ds.len())
                .map_err(|e| CliError::from(e).context(format!("sweep.{param}={v}")))?;
            plan.push((param, v, cfg.k, ic));
        }
    }

    let flat = AnnIndex::flat(&ds)?;
    let queries: Vec<&[f32]> = test.records.iter().map(|r| r.embedding.as_slice()).collect();
    let base_index = obtain_index(cfg, &ds)?;
    let out = cfg.out_dir().join("sweep");
    fs::create_dir_all(&out)?;
    let mut csv = String::from(SWEEP_CSV_HEADER);
    csv.push('\n');
    let mut points = Vec::new();
    for (param, value, k, ic) in plan {
        let built;
        let index = if param == "k" {
            &base_index
        } else {
            built = AnnIndex::build(&ds, &ic)?;
            &built
        };
        let ctx = Context::new(&ds, index, cfg.parallelism)?;
        let opts = FitOptions {
            k,
            seed: cfg.seed,
            density_components: None,
        };
        let fitted = fit(method, &dev, &ctx, &opts)?;
        let mut reports = evaluate(&fitted, &test, ood.as_ref(), &ctx, &eval_options(cfg))?;
        let mut report = reports.swap_remove(0);
        report.k = Some(k);
        report.index = Some(index.config().clone());
        report.coverage = Some(coverage_between(&flat, index, &queries, k, ctx.parallelism())?);
        let file = out.join(format!("{param}_{value:05}.json"));
        write_json(&file, &report)?;
        let lat = report.latency.as_ref();
        csv.push_str(&format!(
            "{param},{value},{},{},{},{},{},{},{},{}\n",
            report.method,
            report.accuracy,
            report.ece,
            report.mce,
            report.e_aurc,
            lat.map_or(f64::NAN, |l| l.mean_s),
            lat.map_or(f64::NAN, |l| l.std_s),
            report.coverage.unwrap_or(f64::NAN),
        ));
        points.push(SweepPoint {
            param: param.to_string(),
            value,
            file,
            report,
        });
    }
    fs::write(out.join("sweep.csv"), csv)?;
    Ok(points)
}

#[derive(Debug, Clone, Serialize)]
pub struct CoverageResult {
    pub config: IndexConfig,
    pub coverage: f64,
}

/// Coverage of each approximate config against the reference over the
/// test split.
pub fn cmd_coverage(cfg: &RunConfig) -> Result<Value, CliError> {
    let ds = load_datastore(&cfg.datastore_path()?)?;
    let test = load_records(&cfg.test_id_path()?)?;
    check_k(cfg.k, &ds, "k")?;
    let reference = AnnIndex::build(&ds, &cfg.coverage.reference)
        .map_err(|e| CliError::from(e).context("coverage.reference"))?;
    let configs = if cfg.coverage.configs.is_empty() {
        vec![cfg.index.clone()]
    } else {
        cfg.coverage.configs.clone()
    };
    let queries: Vec<&[f32]> = test.records.iter().map(|r| r.embedding.as_slice()).collect();
    let mut results = Vec::new();
    for (i, c) in configs.into_iter().enumerate() {
        let idx = AnnIndex::build(&ds, &c)
            .map_err(|e| CliError::from(e).context(format!("coverage.configs[{i}]")))?;
        let coverage = coverage_between(&reference, &idx, &queries, cfg.k, cfg.parallelism.max(1))?;
        results.push(CoverageResult { config: c, coverage });
    }
    let value = json!({
        "k": cfg.k,
        "queries": queries.len(),
        "reference": cfg.coverage.reference,
        "results": results,
    });
    write_json(&cfg.out_dir().join("coverage.json"), &value)?;
    Ok(value)
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchResult {
    pub config: IndexConfig,
    pub latency: LatencyStats,
}

/// Times the retrieval pass for the flat index and the configured one.
pub fn cmd_bench(cfg: &RunConfig) -> Result<Value, CliError> {
    let (ds, query_data) = match &cfg.bench_keys {
        Some(b) => random_keys(b.n, b.dim, b.clusters, b.queries, cfg.seed)
            .map_err(|e| CliError::from(e).context("bench_keys"))?,
        None => {
            let ds = load_datastore(&cfg.datastore_path()?)?;
            let test = load_records(&cfg.test_id_path()?)?;
            let q = test.records.iter().flat_map(|r| r.embedding.clone()).collect();
            (ds, q)
        }
    };
    check_k(cfg.k, &ds, "k")?;
    let queries: Vec<&[f32]> = query_data.chunks(ds.dim()).collect();
    let parallelism = if cfg.parallelism == 0 {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    } else {
        cfg.parallelism
    };
    let mut configs = vec![IndexConfig::flat()];
    if cfg.index != IndexConfig::flat() {
        configs.push(cfg.index.clone());
    }
    let mut results = Vec::new();
    for c in configs {
        let idx = AnnIndex::build(&ds, &c).map_err(|e| CliError::from(e).context("index"))?;
        let latency = bench_knn_pass(&idx, ds.labels(), &queries, cfg.k, cfg.bench_repeats, parallelism)?;
        results.push(BenchResult { config: c, latency });
    }
    let value = json!({
        "n": ds.len(),
        "dim": ds.dim(),
        "queries": queries.len(),
        "k": cfg.k,
        "parallelism": parallelism,
        "results": results,
    });
    write_json(&cfg.out_dir().join("bench.json"), &value)?;
    Ok(value)
}

/// Prints a JSON value on stdout.
pub fn emit(value: &impl Serialize) -> Result<(), CliError> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}
