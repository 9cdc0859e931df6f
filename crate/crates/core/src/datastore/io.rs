//! Binary container formats.
//!
//! Datastore file (`KUE1`), all integers little-endian:
//!
//! ```text
//! magic "KUE1" | version u32 | N u64 | D u32 | J u32 | layer_count u32
//! | D_l u32 * layer_count | keys f32[N*D] | layer matrices f32[N*D_l]...
//! | labels i32[N]
//! ```
//!
//! Records file (`KUR1`):
//!
//! ```text
//! magic "KUR1" | version u32 | count u64 | J u32 | D u32 | layer_count u32
//! | D_l u32 * layer_count | flags u32 (bit 0: span ids present)
//! | logits f32[count*J] | embeddings f32[count*D] | layer matrices...
//! | gold i32[count] | span i32[count] (only when flagged, -1 = none)
//! ```
//!
//! A JSON sidecar `<stem>.meta.json` mirrors the datastore header plus the
//! generator seed and source tag.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::codec::{put_f32s, put_i32s, put_u32, Reader};
use super::{Datastore, DatastoreMeta, EvalRecord, EvalSet, LayerMatrix};
use crate::error::DataError;

pub const DATASTORE_MAGIC: [u8; 4] = *b"KUE1";
pub const RECORDS_MAGIC: [u8; 4] = *b"KUR1";
pub const FORMAT_VERSION: u32 = 1;

const FLAG_SPANS: u32 = 1;

/// Path of the JSON sidecar for a datastore file.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}.meta.json"))
}

fn to_u32(v: usize, what: &str) -> Result<u32, DataError> {
    u32::try_from(v).map_err(|_| DataError::InvalidMeta(format!("{what} too large: {v}")))
}

pub fn write_datastore(ds: &Datastore, path: impl AsRef<Path>) -> Result<(), DataError> {
    let path = path.as_ref();
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(&DATASTORE_MAGIC)?;
    put_u32(&mut w, FORMAT_VERSION)?;
    w.write_all(&(ds.len() as u64).to_le_bytes())?;
    put_u32(&mut w, to_u32(ds.dim(), "D")?)?;
    put_u32(&mut w, to_u32(ds.num_classes(), "J")?)?;
    put_u32(&mut w, to_u32(ds.layers().len(), "layer_count")?)?;
    for m in ds.layers() {
        put_u32(&mut w, to_u32(m.dim, "D_l")?)?;
    }
    put_f32s(&mut w, ds.keys())?;
    for m in ds.layers() {
        put_f32s(&mut w, &m.data)?;
    }
    put_i32s(&mut w, ds.labels().iter().map(|&l| l as i32))?;
    w.flush()?;
    fs::write(sidecar_path(path), serde_json::to_vec_pretty(ds.meta())?)?;
    Ok(())
}

/// Reads a datastore, re-checking every invariant. Seed and source tag come
/// from the sidecar when present.
pub fn read_datastore(path: impl AsRef<Path>) -> Result<Datastore, DataError> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let mut r = Reader::new(&bytes);
    r.magic(DATASTORE_MAGIC)?;
    r.version(FORMAT_VERSION)?;
    let n = r.u64("N")? as usize;
    let dim = r.u32("D")? as usize;
    let num_classes = r.u32("J")? as usize;
    let layer_count = r.u32("layer_count")? as usize;
    let layer_dims = (0..layer_count)
        .map(|_| r.u32("D_l").map(|d| d as usize))
        .collect::<Result<Vec<_>, _>>()?;
    let keys = r.f32s(checked_len(n, dim)?, "keys")?;
    let mut layers = Vec::with_capacity(layer_count);
    for &d in &layer_dims {
        layers.push(LayerMatrix {
            dim: d,
            data: r.f32s(checked_len(n, d)?, "layer matrix")?,
        });
    }
    let labels = r
        .i32s(n, "labels")?
        .into_iter()
        .enumerate()
        .map(|(row, l)| {
            u32::try_from(l).map_err(|_| DataError::LabelOutOfRange {
                label: l as i64,
                num_classes,
                row,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    r.finish()?;

    let (seed, source) = match fs::read(sidecar_path(path)) {
        Ok(meta) => {
            let meta: DatastoreMeta = serde_json::from_slice(&meta)?;
            if meta.n != n || meta.dim != dim || meta.num_classes != num_classes {
                return Err(DataError::InvalidMeta(format!(
                    "sidecar disagrees with header: N={} D={} J={} vs N={n} D={dim} J={num_classes}",
                    meta.n, meta.dim, meta.num_classes
                )));
            }
            (meta.seed, meta.source)
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => (0, "import".to_string()),
        Err(e) => return Err(e.into()),
    };
    let mut ds = Datastore::from_parts(keys, dim, labels, num_classes, layers, seed, "")?;
    ds.set_provenance(seed, source);
    Ok(ds)
}

pub fn write_records(set: &EvalSet, path: impl AsRef<Path>) -> Result<(), DataError> {
    set.validate()?;
    let mut w = BufWriter::new(fs::File::create(path.as_ref())?);
    w.write_all(&RECORDS_MAGIC)?;
    put_u32(&mut w, FORMAT_VERSION)?;
    w.write_all(&(set.records.len() as u64).to_le_bytes())?;
    put_u32(&mut w, to_u32(set.num_classes, "J")?)?;
    put_u32(&mut w, to_u32(set.dim, "D")?)?;
    put_u32(&mut w, to_u32(set.layer_dims.len(), "layer_count")?)?;
    for &d in &set.layer_dims {
        put_u32(&mut w, to_u32(d, "D_l")?)?;
    }
    let spans = set.has_spans();
    put_u32(&mut w, if spans { FLAG_SPANS } else { 0 })?;
    for r in &set.records {
        put_f32s(&mut w, &r.logits)?;
    }
    for r in &set.records {
        put_f32s(&mut w, &r.embedding)?;
    }
    for l in 0..set.layer_dims.len() {
        for r in &set.records {
            put_f32s(&mut w, &r.layer_embeddings[l])?;
        }
    }
    put_i32s(&mut w, set.records.iter().map(|r| r.gold as i32))?;
    if spans {
        put_i32s(
            &mut w,
            set.records
                .iter()
                .map(|r| r.span_id.map_or(-1, |s| s as i32)),
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records(path: impl AsRef<Path>) -> Result<EvalSet, DataError> {
    let bytes = fs::read(path.as_ref())?;
    let mut r = Reader::new(&bytes);
    r.magic(RECORDS_MAGIC)?;
    r.version(FORMAT_VERSION)?;
    let n = r.u64("count")? as usize;
    let num_classes = r.u32("J")? as usize;
    let dim = r.u32("D")? as usize;
    let layer_count = r.u32("layer_count")? as usize;
    let layer_dims = (0..layer_count)
        .map(|_| r.u32("D_l").map(|d| d as usize))
        .collect::<Result<Vec<_>, _>>()?;
    let flags = r.u32("flags")?;
    let logits = r.f32s(checked_len(n, num_classes)?, "logits")?;
    let embeddings = r.f32s(checked_len(n, dim)?, "embeddings")?;
    let mut layers = Vec::with_capacity(layer_count);
    for &d in &layer_dims {
        layers.push(r.f32s(checked_len(n, d)?, "layer matrix")?);
    }
    let gold = r.i32s(n, "gold")?;
    let spans = if flags & FLAG_SPANS != 0 {
        Some(r.i32s(n, "span ids")?)
    } else {
        None
    };
    r.finish()?;

    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let g = u32::try_from(gold[i]).map_err(|_| DataError::LabelOutOfRange {
            label: gold[i] as i64,
            num_classes,
            row: i,
        })?;
        records.push(EvalRecord {
            logits: logits[i * num_classes..(i + 1) * num_classes].to_vec(),
            embedding: embeddings[i * dim..(i + 1) * dim].to_vec(),
            layer_embeddings: layers
                .iter()
                .zip(&layer_dims)
                .map(|(m, &d)| m[i * d..(i + 1) * d].to_vec())
                .collect(),
            gold: g,
            span_id: spans
                .as_ref()
                .and_then(|s| u32::try_from(s[i]).ok()),
        });
    }
    EvalSet::new(num_classes, dim, layer_dims, records)
}

fn checked_len(n: usize, d: usize) -> Result<usize, DataError> {
    n.checked_mul(d)
        .ok_or_else(|| DataError::InvalidMeta(format!("matrix size overflow: {n} x {d}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Datastore {
        Datastore::from_parts(
            vec![0.5, -1.25, 3.0, f32::MIN_POSITIVE, -0.0, 7.0],
            2,
            vec![1, 0, 2],
            3,
            vec![LayerMatrix {
                dim: 1,
                data: vec![1.0, 2.0, 3.0],
            }],
            42,
            "unit",
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ds.kue");
        let ds = sample();
        write_datastore(&ds, &p).unwrap();
        let back = read_datastore(&p).unwrap();
        let bits = |d: &Datastore| d.keys().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&ds), bits(&back));
        assert_eq!(ds.labels(), back.labels());
        assert_eq!(ds.meta(), back.meta());
        assert!(dir.path().join("ds.meta.json").exists());
    }

    #[test]
    fn wrong_magic_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ds.kue");
        write_datastore(&sample(), &p).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes[..4].copy_from_slice(b"XXXX");
        fs::write(&p, bytes).unwrap();
        let err = read_datastore(&p).unwrap_err();
        assert!(matches!(err, DataError::BadMagic { .. }));
        assert!(err.to_string().contains("bad magic"));
    }

    #[test]
    fn version_and_truncation_are_distinct_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ds.kue");
        write_datastore(&sample(), &p).unwrap();
        let bytes = fs::read(&p).unwrap();

        let mut v2 = bytes.clone();
        v2[4..8].copy_from_slice(&2u32.to_le_bytes());
        fs::write(&p, &v2).unwrap();
        assert!(matches!(
            read_datastore(&p),
            Err(DataError::VersionMismatch { found: 2, .. })
        ));

        // header is 4+4+8+4+4+4+4 = 32 bytes; cut inside the key matrix
        fs::write(&p, &bytes[..40]).unwrap();
        let err = read_datastore(&p).unwrap_err();
        assert!(matches!(err, DataError::Truncated(_)));
        assert!(err.to_string().contains("truncated"));
    }

    #[test]
    fn negative_label_on_disk_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ds.kue");
        write_datastore(&sample(), &p).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        let n = bytes.len();
        bytes[n - 4..].copy_from_slice(&(-1i32).to_le_bytes());
        fs::write(&p, bytes).unwrap();
        assert!(matches!(
            read_datastore(&p),
            Err(DataError::LabelOutOfRange { label: -1, .. })
        ));
    }

    #[test]
    fn records_round_trip_with_spans() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.kur");
        let set = EvalSet::new(
            2,
            2,
            vec![1],
            vec![
                EvalRecord {
                    logits: vec![0.1, -0.2],
                    embedding: vec![1.0, 2.0],
                    layer_embeddings: vec![vec![3.0]],
                    gold: 1,
                    span_id: Some(0),
                },
                EvalRecord {
                    logits: vec![1.5, 2.5],
                    embedding: vec![-1.0, 0.0],
                    layer_embeddings: vec![vec![4.0]],
                    gold: 0,
                    span_id: None,
                },
            ],
        )
        .unwrap();
        write_records(&set, &p).unwrap();
        assert_eq!(read_records(&p).unwrap(), set);
    }
}
