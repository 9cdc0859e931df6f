//! Index file (`KUI1`): the datastore container conventions with
//! kind-specific tagged sections.
//!
//! ```text
//! magic "KUI1" | version u32 | config_len u32 | config JSON | N u64 | D u32
//! | sections: tag [u8; 4] | payload_len u64 | payload
//! ```
//!
//! Section tags: `PCAM` mean f64[D], `PCAC` components f64[d_pca*D],
//! `PCAV` explained variance f64[d_pca], `VECS` working keys f32,
//! `IVFC` centroids f32, `IVFL` per-list u32 length + u32 ids,
//! `PQCB` n_sub u32 | n_centroids u32 | sub_dim u32 | centroids f32,
//! `PQCD` codes u8[N*n_sub], `RAWK` original keys f32[N*D].

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::index::{AnnIndex, IndexConfig, InvertedLists};
use super::pca::PcaProjection;
use super::pq::PqCodebook;
use crate::codec::{put_f32s, put_f64s, put_u32, put_u64, Reader};
use crate::datastore::FORMAT_VERSION;
use crate::error::{DataError, IndexError};

pub const INDEX_MAGIC: [u8; 4] = *b"KUI1";

fn section(w: &mut impl Write, tag: &[u8; 4], payload: &[u8]) -> std::io::Result<()> {
    w.write_all(tag)?;
    put_u64(w, payload.len() as u64)?;
    w.write_all(payload)
}

fn bytes_of(f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Vec<u8> {
    let mut buf = Vec::new();
    f(&mut buf).expect("writing to a Vec cannot fail");
    buf
}

pub fn write_index(index: &AnnIndex, path: impl AsRef<Path>) -> Result<(), IndexError> {
    let mut w = BufWriter::new(fs::File::create(path.as_ref()).map_err(DataError::from)?);
    let io = |e: std::io::Error| IndexError::Data(DataError::Io(e));
    let config = serde_json::to_vec(&index.config).map_err(DataError::from)?;
    w.write_all(&INDEX_MAGIC).map_err(io)?;
    put_u32(&mut w, FORMAT_VERSION).map_err(io)?;
    put_u32(&mut w, config.len() as u32).map_err(io)?;
    w.write_all(&config).map_err(io)?;
    put_u64(&mut w, index.n as u64).map_err(io)?;
    put_u32(&mut w, index.input_dim as u32).map_err(io)?;
    if let Some(p) = &index.pca {
        section(&mut w, b"PCAM", &bytes_of(|b| put_f64s(b, &p.mean))).map_err(io)?;
        section(&mut w, b"PCAC", &bytes_of(|b| put_f64s(b, &p.components))).map_err(io)?;
        section(&mut w, b"PCAV", &bytes_of(|b| put_f64s(b, &p.explained_variance))).map_err(io)?;
    }
    if let Some(v) = &index.vectors {
        section(&mut w, b"VECS", &bytes_of(|b| put_f32s(b, v))).map_err(io)?;
    }
    if let Some(ivf) = &index.ivf {
        section(&mut w, b"IVFC", &bytes_of(|b| put_f32s(b, &ivf.centroids))).map_err(io)?;
        let lists = bytes_of(|b| {
            for l in &ivf.lists {
                put_u32(b, l.len() as u32)?;
                for &id in l {
                    put_u32(b, id)?;
                }
            }
            Ok(())
        });
        section(&mut w, b"IVFL", &lists).map_err(io)?;
    }
    if let Some(pq) = &index.pq {
        let book = bytes_of(|b| {
            put_u32(b, pq.n_sub as u32)?;
            put_u32(b, pq.n_centroids as u32)?;
            put_u32(b, pq.sub_dim as u32)?;
            put_f32s(b, &pq.centroids)
        });
        section(&mut w, b"PQCB", &book).map_err(io)?;
        section(&mut w, b"PQCD", &pq.codes).map_err(io)?;
    }
    if let Some(raw) = &index.raw {
        section(&mut w, b"RAWK", &bytes_of(|b| put_f32s(b, raw))).map_err(io)?;
    }
    w.flush().map_err(io)?;
    Ok(())
}

pub fn read_index(path: impl AsRef<Path>) -> Result<AnnIndex, IndexError> {
    let bytes = fs::read(path.as_ref()).map_err(DataError::from)?;
    let mut r = Reader::new(&bytes);
    r.magic(INDEX_MAGIC)?;
    r.version(FORMAT_VERSION)?;
    let config_len = r.u32("config length")? as usize;
    let config: IndexConfig =
        serde_json::from_slice(r.take(config_len, "config")?).map_err(DataError::from)?;
    let n = r.u64("N")? as usize;
    let dim = r.u32("D")? as usize;
    let work_dim = config.d_pca.unwrap_or(dim);

    let mut index = AnnIndex {
        config,
        input_dim: dim,
        n,
        pca: None,
        vectors: None,
        ivf: None,
        pq: None,
        raw: None,
    };
    let mut pca_mean = None;
    let mut pca_components = None;
    let mut pca_var = None;
    let mut ivf_centroids = None;
    let mut ivf_lists = None;
    while r.remaining() > 0 {
        let tag: [u8; 4] = r.take(4, "section tag")?.try_into().unwrap();
        let len = r.u64("section length")? as usize;
        let payload = r.take(len, "section payload")?;
        let mut s = Reader::new(payload);
        match &tag {
            b"PCAM" => pca_mean = Some(s.f64s(len / 8, "pca mean")?),
            b"PCAC" => pca_components = Some(s.f64s(len / 8, "pca components")?),
            b"PCAV" => pca_var = Some(s.f64s(len / 8, "pca variance")?),
            b"VECS" => index.vectors = Some(s.f32s(len / 4, "vectors")?),
            b"IVFC" => ivf_centroids = Some(s.f32s(len / 4, "ivf centroids")?),
            b"IVFL" => {
                let mut lists = Vec::new();
                while s.remaining() > 0 {
                    let l = s.u32("list length")? as usize;
                    let ids = s.i32s(l, "list ids")?;
                    lists.push(ids.into_iter().map(|v| v as u32).collect());
                }
                ivf_lists = Some(lists);
            }
            b"PQCB" => {
                let n_sub = s.u32("n_sub")? as usize;
                let n_centroids = s.u32("n_centroids")? as usize;
                let sub_dim = s.u32("sub_dim")? as usize;
                let centroids = s.f32s(n_sub * n_centroids * sub_dim, "pq centroids")?;
                index.pq = Some(PqCodebook {
                    n_sub,
                    n_centroids,
                    sub_dim,
                    centroids,
                    codes: Vec::new(),
                });
            }
            b"PQCD" => {
                let codes = payload.to_vec();
                s.take(len, "pq codes")?;
                match index.pq.as_mut() {
                    Some(pq) => pq.codes = codes,
                    None => {
                        return Err(IndexError::InvalidConfig("PQCD before PQCB".into()));
                    }
                }
            }
            b"RAWK" => index.raw = Some(s.f32s(len / 4, "raw keys")?),
            other => {
                return Err(IndexError::InvalidConfig(format!(
                    "unknown section {:?}",
                    String::from_utf8_lossy(other)
                )))
            }
        }
        s.finish()?;
    }
    if let (Some(mean), Some(components), Some(var)) = (pca_mean, pca_components, pca_var) {
        index.pca = Some(PcaProjection {
            input_dim: dim,
            output_dim: work_dim,
            mean,
            components,
            explained_variance: var,
        });
    }
    if let (Some(centroids), Some(lists)) = (ivf_centroids, ivf_lists) {
        index.ivf = Some(InvertedLists {
            dim: work_dim,
            centroids,
            lists,
        });
    }
    let complete = index.config.d_pca.is_some() == index.pca.is_some()
        && index.config.uses_ivf() == index.ivf.is_some()
        && index.config.uses_pq() == index.pq.is_some()
        && (index.pq.is_some() || index.vectors.is_some());
    if !complete {
        return Err(IndexError::InvalidConfig(
            "index file is missing sections required by its config".into(),
        ));
    }
    Ok(index)
}
