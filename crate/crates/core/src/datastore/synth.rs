//! Seeded synthetic corpus: Gaussian classes, a fitted multinomial logistic
//! "base model", and a shifted out-of-domain split.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Datastore, EvalRecord, EvalSet, LayerMatrix};
use crate::error::DataError;
use crate::optim::{minimize_bounded, BoundedProblem};
use crate::seed::{self, stream};

/// Parameters of the synthetic generator. Missing JSON fields take the defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub dim: usize,
    /// Norm of every class mean.
    pub class_separation: f64,
    /// Per-class isotropic standard deviation; empty means 1.0 for every class.
    pub class_scales: Vec<f64>,
    /// Probability that a label is replaced by a uniformly drawn class.
    pub label_noise: f64,
    /// Out-of-domain mean shift per coordinate, in units of the mean class scale.
    pub ood_shift: f64,
    /// Multiplier applied to the fitted logits.
    pub overconfidence: f64,
    /// Number of intermediate layer representations per row.
    pub layer_count: usize,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub n_ood: usize,
    /// When positive, evaluation records are grouped into spans of 1..=max tokens.
    pub max_span_len: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_classes: 3,
            dim: 32,
            class_separation: 1.5,
            class_scales: Vec::new(),
            label_noise: 0.05,
            ood_shift: 2.0,
            overconfidence: 3.0,
            layer_count: 2,
            n_train: 5000,
            n_dev: 1000,
            n_test: 2000,
            n_ood: 1000,
            max_span_len: 0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::InvalidSpec(m.to_string()));
        if self.num_classes == 0 || self.dim == 0 {
            return bad("num_classes and dim must be positive");
        }
        if self.n_train == 0 || self.n_dev == 0 || self.n_test == 0 || self.n_ood == 0 {
            return bad("split sizes must be positive");
        }
        if !(0.0..=1.0).contains(&self.label_noise) {
            return bad("label_noise must be in [0, 1]");
        }
        if !self.class_scales.is_empty() && self.class_scales.len() != self.num_classes {
            return bad("class_scales must be empty or have one entry per class");
        }
        if self.class_scales.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return bad("class_scales must be positive");
        }
        if !(self.overconfidence > 0.0 && self.overconfidence.is_finite()) {
            return bad("overconfidence must be positive");
        }
        if !(self.class_separation.is_finite() && self.ood_shift.is_finite()) {
            return bad("separation and shift must be finite");
        }
        Ok(())
    }

    fn scale(&self, class: usize) -> f64 {
        self.class_scales.get(class).copied().unwrap_or(1.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub train: Datastore,
    pub dev: EvalSet,
    pub test_id: EvalSet,
    pub test_ood: EvalSet,
}

struct Sample {
    x: Vec<f32>,
    layers: Vec<Vec<f32>>,
    label: u32,
}

struct Generator<'a> {
    spec: &'a SynthSpec,
    means: Vec<Vec<f64>>,
}

impl Generator<'_> {
    fn sample(&self, rng: &mut ChaCha8Rng, shift: Option<&[f64]>) -> Sample {
        let spec = self.spec;
        let class = rng.gen_range(0..spec.num_classes);
        let sd = spec.scale(class);
        let x: Vec<f64> = (0..spec.dim)
            .map(|d| {
                let z: f64 = StandardNormal.sample(rng);
                self.means[class][d] + shift.map_or(0.0, |s| s[d]) + sd * z
            })
            .collect();
        // earlier layers are noisier views of the final representation
        let layers = (0..spec.layer_count)
            .map(|l| {
                let noise = 0.5 * (spec.layer_count - l) as f64;
                x.iter()
                    .map(|v| {
                        let z: f64 = StandardNormal.sample(rng);
                        (v + noise * z) as f32
                    })
                    .collect()
            })
            .collect();
        let label = if spec.label_noise > 0.0 && rng.gen::<f64>() < spec.label_noise {
            rng.gen_range(0..spec.num_classes)
        } else {
            class
        };
        Sample {
            x: x.into_iter().map(|v| v as f32).collect(),
            layers,
            label: label as u32,
        }
    }

    fn samples(&self, n: usize, stream_id: u64, shift: Option<&[f64]>) -> Vec<Sample> {
        let mut rng = seed::rng(self.spec.seed, stream_id);
        (0..n).map(|_| self.sample(&mut rng, shift)).collect()
    }
}

/// Multinomial logistic regression, row-major `J x (D + 1)` weights with the
/// bias in the last column.
struct Logistic {
    classes: usize,
    dim: usize,
    weights: Vec<f64>,
}

impl Logistic {
    const L2: f64 = 1e-4;

    fn logits_into(dim: usize, w: &[f64], x: &[f32], out: &mut [f64]) {
        let stride = dim + 1;
        for (j, o) in out.iter_mut().enumerate() {
            let row = &w[j * stride..(j + 1) * stride];
            *o = row[dim]
                + row[..dim]
                    .iter()
                    .zip(x)
                    .map(|(a, b)| a * f64::from(*b))
                    .sum::<f64>();
        }
    }

    fn fit(samples: &[Sample], classes: usize, dim: usize) -> Self {
        let mut model = Self {
            classes,
            dim,
            weights: vec![0.0; classes * (dim + 1)],
        };
        let n = samples.len() as f64;
        let stride = dim + 1;
        let value_grad = |w: &[f64], want_grad: bool| {
            let mut loss = 0.0;
            let mut grad = vec![0.0; w.len()];
            let mut z = vec![0.0; classes];
            for s in samples {
                Self::logits_into(dim, w, &s.x, &mut z);
                let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = z.iter().map(|v| (v - m).exp()).sum();
                let lse = m + sum.ln();
                loss += lse - z[s.label as usize];
                if want_grad {
                    for j in 0..classes {
                        let p = (z[j] - lse).exp() - f64::from(u8::from(j == s.label as usize));
                        let row = &mut grad[j * stride..(j + 1) * stride];
                        for (g, xv) in row[..dim].iter_mut().zip(&s.x) {
                            *g += p * f64::from(*xv);
                        }
                        row[dim] += p;
                    }
                }
            }
            let reg: f64 = w.iter().map(|v| v * v).sum::<f64>() * 0.5 * Self::L2;
            for (g, v) in grad.iter_mut().zip(w) {
                *g = *g / n + Self::L2 * v;
            }
            (loss / n + reg, grad)
        };
        let dimw = model.weights.len();
        let problem = BoundedProblem::new(
            |w: &[f64]| value_grad(w, false).0,
            vec![-1e4; dimw],
            vec![1e4; dimw],
        )
        .expect("finite bounds")
        .with_gradient(|w: &[f64]| value_grad(w, true).1)
        .with_max_iter(300)
        .with_pgtol(1e-7);
        if let Ok(m) = minimize_bounded(&problem, &model.weights) {
            model.weights = m.x;
        }
        model
    }

    fn logits(&self, x: &[f32], factor: f64) -> Vec<f32> {
        let mut z = vec![0.0; self.classes];
        Self::logits_into(self.dim, &self.weights, x, &mut z);
        z.into_iter().map(|v| (v * factor) as f32).collect()
    }
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|a| a / norm).collect();
        }
    }
}

/// Generates train/dev/test-ID/test-OOD splits. A pure function of `spec`,
/// seed included.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<SyntheticData, DataError> {
    spec.validate()?;
    let mut mean_rng = seed::rng(spec.seed, stream::SYNTH_MEANS);
    let means = (0..spec.num_classes)
        .map(|_| {
            unit_vector(&mut mean_rng, spec.dim)
                .into_iter()
                .map(|v| v * spec.class_separation)
                .collect()
        })
        .collect();
    let gen = Generator { spec, means };

    let mean_scale =
        (0..spec.num_classes).map(|c| spec.scale(c)).sum::<f64>() / spec.num_classes as f64;
    let mut shift_rng = seed::rng(spec.seed, stream::SYNTH_OOD_SHIFT);
    let shift: Vec<f64> = (0..spec.dim)
        .map(|_| {
            let sign = if shift_rng.gen::<bool>() { 1.0 } else { -1.0 };
            sign * spec.ood_shift * mean_scale
        })
        .collect();

    let train = gen.samples(spec.n_train, stream::SYNTH_TRAIN, None);
    let model = Logistic::fit(&train, spec.num_classes, spec.dim);

    let to_set = |samples: Vec<Sample>, span_stream: u64| -> Result<EvalSet, DataError> {
        let mut span_rng = seed::rng(spec.seed, stream::SYNTH_SPANS ^ (span_stream << 8));
        let mut span = 0u32;
        let mut left = 0usize;
        let records = samples
            .into_iter()
            .map(|s| {
                let span_id = (spec.max_span_len > 0).then(|| {
                    if left == 0 {
                        left = span_rng.gen_range(1..=spec.max_span_len);
                        span += 1;
                    }
                    left -= 1;
                    span - 1
                });
                EvalRecord {
                    logits: model.logits(&s.x, spec.overconfidence),
                    embedding: s.x,
                    layer_embeddings: s.layers,
                    gold: s.label,
                    span_id,
                }
            })
            .collect();
        EvalSet::new(
            spec.num_classes,
            spec.dim,
            vec![spec.dim; spec.layer_count],
            records,
        )
    };

    let dev = to_set(gen.samples(spec.n_dev, stream::SYNTH_DEV, None), 1)?;
    let test_id = to_set(gen.samples(spec.n_test, stream::SYNTH_TEST_ID, None), 2)?;
    // shift 0 takes the same sampling branch as the in-domain split
    let test_ood = to_set(
        gen.samples(spec.n_ood, stream::SYNTH_TEST_OOD, Some(&shift)),
        3,
    )?;

    let mut keys = Vec::with_capacity(spec.n_train * spec.dim);
    let mut labels = Vec::with_capacity(spec.n_train);
    let mut layers: Vec<LayerMatrix> = (0..spec.layer_count)
        .map(|_| LayerMatrix {
            dim: spec.dim,
            data: Vec::with_capacity(spec.n_train * spec.dim),
        })
        .collect();
    for s in train {
        keys.extend_from_slice(&s.x);
        labels.push(s.label);
        for (m, l) in layers.iter_mut().zip(&s.layers) {
            m.data.extend_from_slice(l);
        }
    }
    let train = Datastore::from_parts(
        keys,
        spec.dim,
        labels,
        spec.num_classes,
        layers,
        spec.seed,
        "synthetic",
    )?;
    Ok(SyntheticData {
        train,
        dev,
        test_id,
        test_ood,
    })
}

/// Clustered Gaussian keys for search benchmarks, with queries drawn from
/// the same clusters. Rows are generated independently, so the result does
/// not depend on thread count.
pub fn random_keys(
    n: usize,
    dim: usize,
    clusters: usize,
    n_queries: usize,
    seed: u64,
) -> Result<(Datastore, Vec<f32>), DataError> {
    if n == 0 || dim == 0 || clusters == 0 || n_queries == 0 {
        return Err(DataError::InvalidSpec(
            "random keys need positive n, dim, clusters and queries".into(),
        ));
    }
    let base = seed::derive(seed, stream::BENCH);
    let mut center_rng = seed::rng(base, 0);
    let centers: Vec<f32> = (0..clusters * dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut center_rng);
            (3.0 * z) as f32
        })
        .collect();
    let row = |i: usize| -> (u32, Vec<f32>) {
        let mut rng = seed::rng(base, 1 + i as u64);
        let c = rng.gen_range(0..clusters);
        let x = centers[c * dim..(c + 1) * dim]
            .iter()
            .map(|m| {
                let z: f64 = StandardNormal.sample(&mut rng);
                m + z as f32
            })
            .collect();
        (c as u32, x)
    };
    let rows: Vec<(u32, Vec<f32>)> = (0..n + n_queries).into_par_iter().map(row).collect();
    let mut keys = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    let mut queries = Vec::with_capacity(n_queries * dim);
    for (i, (label, x)) in rows.into_iter().enumerate() {
        if i < n {
            keys.extend_from_slice(&x);
            labels.push(label);
        } else {
            queries.extend_from_slice(&x);
        }
    }
    let ds = Datastore::from_parts(keys, dim, labels, clusters, Vec::new(), seed, "random_keys")?;
    Ok((ds, queries))
}
