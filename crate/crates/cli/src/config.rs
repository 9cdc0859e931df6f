//! Run configuration: one JSON document, overridden field by field by
//! command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use knnue::calibration::{Method, DEFAULT_K};
use knnue::metrics::DEFAULT_BINS;
use knnue::{IndexConfig, IndexKind};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// File names used inside a data directory written by `synth`.
pub const DATASTORE_FILE: &str = "train.kue";
pub const DEV_FILE: &str = "dev.kur";
pub const TEST_ID_FILE: &str = "test_id.kur";
pub const TEST_OOD_FILE: &str = "test_ood.kur";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Directory holding the four `synth` outputs; fills any unset path.
    pub data_dir: Option<PathBuf>,
    pub datastore: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub test_id: Option<PathBuf>,
    pub test_ood: Option<PathBuf>,
    /// Prebuilt index; built from `index` when unset.
    pub index: Option<PathBuf>,
    /// Fitted parameters for `eval`.
    pub params: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepLists {
    pub k: Vec<usize>,
    pub n_sub: Vec<usize>,
    pub n_probe: Vec<usize>,
    pub d_pca: Vec<usize>,
}

impl SweepLists {
    pub fn is_empty(&self) -> bool {
        self.k.is_empty() && self.n_sub.is_empty() && self.n_probe.is_empty() && self.d_pca.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoverageConfig {
    /// Index whose neighbors count as ground truth.
    pub reference: IndexConfig,
    /// Approximate configurations to compare; the run's `index` when empty.
    pub configs: Vec<IndexConfig>,
}

impl Default for CoverageConfig {
    fn default() -> Self {
        Self {
            reference: IndexConfig::flat(),
            configs: Vec::new(),
        }
    }
}

/// Random clustered keys for `bench` instead of the datastore.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchKeys {
    pub n: usize,
    pub dim: usize,
    pub clusters: usize,
    pub queries: usize,
}

impl Default for BenchKeys {
    fn default() -> Self {
        Self {
            n: 100_000,
            dim: 768,
            clusters: 64,
            queries: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: Paths,
    /// Defaults to the method stored in the params file, then `knn_ue`.
    pub method: Option<Method>,
    pub k: usize,
    pub index: IndexConfig,
    pub sweep: SweepLists,
    pub coverage: CoverageConfig,
    pub bench_keys: Option<BenchKeys>,
    pub bench_repeats: usize,
    /// Worker threads for per-query work; 0 uses every core.
    pub parallelism: usize,
    pub bins: usize,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            paths: Paths::default(),
            method: None,
            k: DEFAULT_K,
            index: IndexConfig::flat(),
            sweep: SweepLists::default(),
            coverage: CoverageConfig::default(),
            bench_keys: None,
            bench_repeats: 3,
            parallelism: 0,
            bins: DEFAULT_BINS,
            seed: 0,
        }
    }
}

/// Flag values that take precedence over the config file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub method: Option<Method>,
    pub k: Option<usize>,
    pub kind: Option<IndexKind>,
    pub n_sub: Option<usize>,
    pub n_probe: Option<usize>,
    pub d_pca: Option<usize>,
    pub recompute: bool,
    pub params: Option<PathBuf>,
}

/// Reads a JSON file into `T`, reporting the path on failure.
pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
}

impl RunConfig {
    /// Defaults, then the config file (relative paths resolved against its
    /// directory), then the flags.
    pub fn load(path: Option<&Path>, flags: &Overrides) -> Result<Self, CliError> {
        let mut cfg = match path {
            Some(p) => {
                let mut cfg: RunConfig = read_json(p)?;
                let base = p.parent().unwrap_or(Path::new(""));
                cfg.paths.resolve(base);
                cfg
            }
            None => RunConfig::default(),
        };
        cfg.apply(flags);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, flags: &Overrides) {
        if let Some(s) = flags.seed {
            self.seed = s;
        }
        if let Some(m) = flags.method {
            self.method = Some(m);
        }
        if let Some(k) = flags.k {
            self.k = k;
        }
        if let Some(kind) = flags.kind {
            self.index.kind = kind;
        }
        if let Some(v) = flags.n_sub {
            self.index.n_sub = v;
        }
        if let Some(v) = flags.n_probe {
            self.index.n_probe = v;
        }
        if let Some(v) = flags.d_pca {
            self.index.d_pca = Some(v);
        }
        if flags.recompute {
            self.index.recompute = true;
        }
        if let Some(p) = &flags.params {
            self.paths.params = Some(p.clone());
        }
        // one top-level seed drives every index build
        self.index.seed = self.seed;
    }

    fn validate(&self) -> Result<(), CliError> {
        if self.k == 0 {
            return Err(CliError::Usage("k: must be positive".into()));
        }
        if self.bins == 0 {
            return Err(CliError::Usage("bins: must be positive".into()));
        }
        if self.bench_repeats < knnue::metrics::MIN_REPEATS {
            return Err(CliError::Usage(format!(
                "bench_repeats: must be at least {}",
                knnue::metrics::MIN_REPEATS
            )));
        }
        Ok(())
    }

    pub fn method(&self) -> Method {
        self.method.unwrap_or(Method::KnnUe)
    }

    pub fn out_dir(&self) -> PathBuf {
        self.paths.out_dir.clone().unwrap_or_else(|| PathBuf::from("."))
    }

    fn data_path(&self, explicit: &Option<PathBuf>, file: &str, field: &str) -> Result<PathBuf, CliError> {
        explicit
            .clone()
            .or_else(|| self.paths.data_dir.as_ref().map(|d| d.join(file)))
            .ok_or_else(|| CliError::Usage(format!("paths.{field}: not set (and no paths.data_dir)")))
    }

    pub fn datastore_path(&self) -> Result<PathBuf, CliError> {
        self.data_path(&self.paths.datastore, DATASTORE_FILE, "datastore")
    }

    pub fn dev_path(&self) -> Result<PathBuf, CliError> {
        self.data_path(&self.paths.dev, DEV_FILE, "dev")
    }

    pub fn test_id_path(&self) -> Result<PathBuf, CliError> {
        self.data_path(&self.paths.test_id, TEST_ID_FILE, "test_id")
    }

    /// The OOD split is optional; `None` when neither set nor present.
    pub fn test_ood_path(&self) -> Option<PathBuf> {
        self.paths.test_ood.clone().or_else(|| {
            let p = self.paths.data_dir.as_ref()?.join(TEST_OOD_FILE);
            p.exists().then_some(p)
        })
    }
}

impl Paths {
    fn resolve(&mut self, base: &Path) {
        for p in [
            &mut self.data_dir,
            &mut self.datastore,
            &mut self.dev,
            &mut self.test_id,
            &mut self.test_ood,
            &mut self.index,
            &mut self.params,
            &mut self.out_dir,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}
