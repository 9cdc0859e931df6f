//! Stored train-set representations, evaluation records and their file formats.

mod io;
mod synth;

pub use io::{
    read_datastore, read_records, write_datastore, write_records, DATASTORE_MAGIC,
    FORMAT_VERSION, RECORDS_MAGIC,
};
pub use synth::{generate_synthetic, random_keys, SynthSpec, SyntheticData};

use serde::{Deserialize, Serialize};

use crate::error::DataError;

/// Per-layer hidden representations stored alongside the final-layer keys.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerMatrix {
    pub dim: usize,
    /// Row-major `n x dim`.
    pub data: Vec<f32>,
}

impl LayerMatrix {
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> usize {
        self.data.len().checked_div(self.dim).unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatastoreMeta {
    pub n: usize,
    pub dim: usize,
    pub num_classes: usize,
    pub layer_count: usize,
    pub layer_dims: Vec<usize>,
    pub seed: u64,
    pub source: String,
}

/// Immutable matrix of key vectors with a parallel label array.
///
/// Invariants (checked on every construction path): `keys.len() == n * dim`,
/// `labels.len() == n`, every label is below `num_classes`, each layer group
/// has `n` rows and no stored float is NaN or infinite.
#[derive(Debug, Clone, PartialEq)]
pub struct Datastore {
    keys: Vec<f32>,
    labels: Vec<u32>,
    layers: Vec<LayerMatrix>,
    meta: DatastoreMeta,
}

/// One input row for [`build_datastore`].
#[derive(Debug, Clone, PartialEq)]
pub struct DatastoreRecord {
    pub embedding: Vec<f32>,
    pub label: u32,
    pub layer_embeddings: Vec<Vec<f32>>,
}

impl Datastore {
    /// Builds a datastore from flat row-major parts, validating every invariant.
    pub fn from_parts(
        keys: Vec<f32>,
        dim: usize,
        labels: Vec<u32>,
        num_classes: usize,
        layers: Vec<LayerMatrix>,
        seed: u64,
        source: impl Into<String>,
    ) -> Result<Self, DataError> {
        if labels.is_empty() || dim == 0 {
            return Err(DataError::Empty);
        }
        let n = labels.len();
        if keys.len() != n * dim {
            return Err(DataError::DimensionMismatch {
                expected: n * dim,
                actual: keys.len(),
                row: 0,
            });
        }
        if num_classes == 0 {
            return Err(DataError::InvalidMeta("num_classes must be positive".into()));
        }
        for (row, &label) in labels.iter().enumerate() {
            if label as usize >= num_classes {
                return Err(DataError::LabelOutOfRange {
                    label: label as i64,
                    num_classes,
                    row,
                });
            }
        }
        check_finite(&keys, dim, "keys")?;
        for (layer, m) in layers.iter().enumerate() {
            if m.dim == 0 || m.data.len() % m.dim != 0 || m.rows() != n {
                return Err(DataError::LayerRowMismatch {
                    layer,
                    expected: n,
                    actual: m.rows(),
                });
            }
            check_finite(&m.data, m.dim, "layer")?;
        }
        let meta = DatastoreMeta {
            n,
            dim,
            num_classes,
            layer_count: layers.len(),
            layer_dims: layers.iter().map(|m| m.dim).collect(),
            seed,
            source: source.into(),
        };
        Ok(Self {
            keys,
            labels,
            layers,
            meta,
        })
    }

    pub fn len(&self) -> usize {
        self.meta.n
    }

    pub fn is_empty(&self) -> bool {
        self.meta.n == 0
    }

    pub fn dim(&self) -> usize {
        self.meta.dim
    }

    pub fn num_classes(&self) -> usize {
        self.meta.num_classes
    }

    pub fn meta(&self) -> &DatastoreMeta {
        &self.meta
    }

    pub fn keys(&self) -> &[f32] {
        &self.keys
    }

    pub fn key(&self, i: usize) -> &[f32] {
        &self.keys[i * self.meta.dim..(i + 1) * self.meta.dim]
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn layers(&self) -> &[LayerMatrix] {
        &self.layers
    }

    /// A datastore over layer `l` of this one, sharing labels. Used for the
    /// per-layer searches of density-aware calibration.
    pub fn layer_view(&self, l: usize) -> Datastore {
        let m = &self.layers[l];
        Datastore {
            keys: m.data.clone(),
            labels: self.labels.clone(),
            layers: Vec::new(),
            meta: DatastoreMeta {
                n: self.meta.n,
                dim: m.dim,
                num_classes: self.meta.num_classes,
                layer_count: 0,
                layer_dims: Vec::new(),
                seed: self.meta.seed,
                source: format!("{}#layer{}", self.meta.source, l),
            },
        }
    }

    /// Keeps only the final-layer keys and labels.
    pub fn without_layers(&self) -> Datastore {
        let mut meta = self.meta.clone();
        meta.layer_count = 0;
        meta.layer_dims.clear();
        Datastore {
            keys: self.keys.clone(),
            labels: self.labels.clone(),
            layers: Vec::new(),
            meta,
        }
    }

    pub(crate) fn set_provenance(&mut self, seed: u64, source: String) {
        self.meta.seed = seed;
        self.meta.source = source;
    }
}

fn check_finite(data: &[f32], dim: usize, field: &'static str) -> Result<(), DataError> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(pos) => Err(DataError::NonFinite {
            field,
            row: pos / dim.max(1),
        }),
        None => Ok(()),
    }
}

/// Builds a datastore from records, keeping rows in input order.
pub fn build_datastore(
    records: &[DatastoreRecord],
    num_classes: usize,
) -> Result<Datastore, DataError> {
    let first = records.first().ok_or(DataError::Empty)?;
    let dim = first.embedding.len();
    let layer_dims: Vec<usize> = first.layer_embeddings.iter().map(Vec::len).collect();
    let mut keys = Vec::with_capacity(records.len() * dim);
    let mut labels = Vec::with_capacity(records.len());
    let mut layers: Vec<LayerMatrix> = layer_dims
        .iter()
        .map(|&d| LayerMatrix {
            dim: d,
            data: Vec::with_capacity(records.len() * d),
        })
        .collect();
    for (row, r) in records.iter().enumerate() {
        if r.embedding.len() != dim {
            return Err(DataError::DimensionMismatch {
                expected: dim,
                actual: r.embedding.len(),
                row,
            });
        }
        if r.layer_embeddings.len() != layers.len() {
            return Err(DataError::LayerRowMismatch {
                layer: r.layer_embeddings.len().min(layers.len()),
                expected: records.len(),
                actual: row,
            });
        }
        for (m, v) in layers.iter_mut().zip(&r.layer_embeddings) {
            if v.len() != m.dim {
                return Err(DataError::DimensionMismatch {
                    expected: m.dim,
                    actual: v.len(),
                    row,
                });
            }
            m.data.extend_from_slice(v);
        }
        keys.extend_from_slice(&r.embedding);
        labels.push(r.label);
    }
    Datastore::from_parts(keys, dim, labels, num_classes, layers, 0, "records")
}

/// One prediction instance to be calibrated and scored.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub logits: Vec<f32>,
    pub embedding: Vec<f32>,
    pub layer_embeddings: Vec<Vec<f32>>,
    pub gold: u32,
    /// Groups consecutive token records into one entity.
    pub span_id: Option<u32>,
}

impl EvalRecord {
    pub fn validate(&self, num_classes: usize, dim: usize) -> Result<(), DataError> {
        if self.logits.len() != num_classes {
            return Err(DataError::DimensionMismatch {
                expected: num_classes,
                actual: self.logits.len(),
                row: 0,
            });
        }
        if self.embedding.len() != dim {
            return Err(DataError::DimensionMismatch {
                expected: dim,
                actual: self.embedding.len(),
                row: 0,
            });
        }
        if self.logits.iter().any(|v| !v.is_finite()) {
            return Err(DataError::NonFinite {
                field: "logits",
                row: 0,
            });
        }
        if self.embedding.iter().any(|v| !v.is_finite()) {
            return Err(DataError::NonFinite {
                field: "embedding",
                row: 0,
            });
        }
        if self.gold as usize >= num_classes {
            return Err(DataError::LabelOutOfRange {
                label: self.gold as i64,
                num_classes,
                row: 0,
            });
        }
        Ok(())
    }

    /// Raw-logit prediction, lowest class index on ties.
    pub fn predicted(&self) -> u32 {
        crate::calibration::argmax(&self.logits) as u32
    }
}

/// A homogeneous list of evaluation records, as stored in a records file.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSet {
    pub num_classes: usize,
    pub dim: usize,
    pub layer_dims: Vec<usize>,
    pub records: Vec<EvalRecord>,
}

impl EvalSet {
    pub fn new(
        num_classes: usize,
        dim: usize,
        layer_dims: Vec<usize>,
        records: Vec<EvalRecord>,
    ) -> Result<Self, DataError> {
        let set = Self {
            num_classes,
            dim,
            layer_dims,
            records,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        for (row, r) in self.records.iter().enumerate() {
            r.validate(self.num_classes, self.dim).map_err(|e| at_row(e, row))?;
            if r.layer_embeddings.len() != self.layer_dims.len() {
                return Err(DataError::LayerRowMismatch {
                    layer: r.layer_embeddings.len(),
                    expected: self.layer_dims.len(),
                    actual: r.layer_embeddings.len(),
                });
            }
            for (v, &d) in r.layer_embeddings.iter().zip(&self.layer_dims) {
                if v.len() != d {
                    return Err(DataError::DimensionMismatch {
                        expected: d,
                        actual: v.len(),
                        row,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn has_spans(&self) -> bool {
        self.records.iter().any(|r| r.span_id.is_some())
    }
}

fn at_row(e: DataError, row: usize) -> DataError {
    match e {
        DataError::DimensionMismatch {
            expected, actual, ..
        } => DataError::DimensionMismatch {
            expected,
            actual,
            row,
        },
        DataError::LabelOutOfRange {
            label, num_classes, ..
        } => DataError::LabelOutOfRange {
            label,
            num_classes,
            row,
        },
        DataError::NonFinite { field, .. } => DataError::NonFinite { field, row },
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(v: &[f32], label: u32) -> DatastoreRecord {
        DatastoreRecord {
            embedding: v.to_vec(),
            label,
            layer_embeddings: Vec::new(),
        }
    }

    #[test]
    fn rows_keep_input_order() {
        let rs = vec![
            rec(&[1.0, 2.0, 3.0, 4.0], 0),
            rec(&[5.0, 6.0, 7.0, 8.0], 1),
            rec(&[9.0, 10.0, 11.0, 12.0], 0),
        ];
        let ds = build_datastore(&rs, 2).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.dim(), 4);
        assert_eq!(ds.key(1), &[5.0, 6.0, 7.0, 8.0]);
        assert_eq!(ds.labels(), &[0, 1, 0]);
    }

    #[test]
    fn label_equal_to_class_count_is_rejected() {
        let err = build_datastore(&[rec(&[0.0], 2)], 2).unwrap_err();
        assert!(matches!(err, DataError::LabelOutOfRange { label: 2, .. }));
        assert!(err.to_string().contains("label out of range"));
    }

    #[test]
    fn empty_and_ragged_inputs_are_rejected() {
        assert!(matches!(build_datastore(&[], 2), Err(DataError::Empty)));
        let rs = vec![rec(&[0.0, 1.0], 0), rec(&[0.0], 1)];
        assert!(matches!(
            build_datastore(&rs, 2),
            Err(DataError::DimensionMismatch { row: 1, .. })
        ));
    }

    #[test]
    fn mismatched_layer_groups_are_rejected() {
        let layers = vec![
            LayerMatrix {
                dim: 2,
                data: vec![0.0; 6],
            },
            LayerMatrix {
                dim: 2,
                data: vec![0.0; 4],
            },
        ];
        let err = Datastore::from_parts(vec![0.0; 3], 1, vec![0, 0, 0], 1, layers, 0, "t")
            .unwrap_err();
        assert!(matches!(
            err,
            DataError::LayerRowMismatch {
                layer: 1,
                expected: 3,
                actual: 2
            }
        ));
    }

    #[test]
    fn non_finite_keys_are_rejected() {
        let err =
            Datastore::from_parts(vec![0.0, f32::NAN], 1, vec![0, 0], 1, vec![], 0, "t")
                .unwrap_err();
        assert!(matches!(err, DataError::NonFinite { row: 1, .. }));
    }
}
