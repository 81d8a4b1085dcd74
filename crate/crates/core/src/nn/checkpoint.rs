//! Parameter checkpoints.
//!
//! Layout of `params.bin` (all integers little-endian `u64`, all values
//! little-endian IEEE-754 `f64` regardless of the training dtype):
//!
//! ```text
//! magic    8 bytes  "MCTSCKPT"
//! version  u64      1
//! count    u64      number of records
//! record*  { name_len u64, name utf-8, rows u64, cols u64, n u64, n x f64 }
//! ```
//!
//! `manifest.json` lists every record's name, shape and byte offset, the
//! training dtype, and free-form run metadata.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Matrix, ParamStore};
use crate::error::{Error, Result};
use crate::Scalar;

pub const MAGIC: &[u8; 8] = b"MCTSCKPT";
pub const VERSION: u64 = 1;
pub const PARAMS_FILE: &str = "params.bin";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl Record {
    pub fn from_matrix<S: Scalar>(name: impl Into<String>, m: &Matrix<S>) -> Self {
        Self {
            name: name.into(),
            rows: m.rows(),
            cols: m.cols(),
            values: m.to_f64_vec(),
        }
    }

    pub fn to_matrix<S: Scalar>(&self) -> Result<Matrix<S>> {
        Matrix::from_f64(self.rows, self.cols, &self.values)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u64,
    pub dtype: String,
    pub records: Vec<ManifestEntry>,
    pub meta: serde_json::Value,
}

pub fn encode(records: &[Record]) -> (Vec<u8>, Vec<ManifestEntry>) {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(records.len() as u64).to_le_bytes());
    let mut entries = Vec::with_capacity(records.len());
    for r in records {
        entries.push(ManifestEntry {
            name: r.name.clone(),
            shape: [r.rows, r.cols],
            offset: buf.len() as u64,
        });
        buf.extend_from_slice(&(r.name.len() as u64).to_le_bytes());
        buf.extend_from_slice(r.name.as_bytes());
        buf.extend_from_slice(&(r.rows as u64).to_le_bytes());
        buf.extend_from_slice(&(r.cols as u64).to_le_bytes());
        buf.extend_from_slice(&(r.values.len() as u64).to_le_bytes());
        for v in &r.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    (buf, entries)
}

pub fn decode(mut bytes: &[u8]) -> Result<Vec<Record>> {
    let mut magic = [0u8; 8];
    read_exact(&mut bytes, &mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = read_u64(&mut bytes)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = read_u64(&mut bytes)? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = read_u64(&mut bytes)? as usize;
        if len > bytes.len() {
            return Err(Error::Checkpoint("truncated name".into()));
        }
        let mut name = vec![0u8; len];
        read_exact(&mut bytes, &mut name)?;
        let name = String::from_utf8(name).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let rows = read_u64(&mut bytes)? as usize;
        let cols = read_u64(&mut bytes)? as usize;
        let n = read_u64(&mut bytes)? as usize;
        if n != rows * cols || n.saturating_mul(8) > bytes.len() {
            return Err(Error::Checkpoint(format!("record {name}: bad value count {n}")));
        }
        let mut values = Vec::with_capacity(n);
        for _ in 0..n {
            let mut b = [0u8; 8];
            read_exact(&mut bytes, &mut b)?;
            values.push(f64::from_le_bytes(b));
        }
        out.push(Record {
            name,
            rows,
            cols,
            values,
        });
    }
    if !bytes.is_empty() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok(out)
}

fn read_exact(src: &mut &[u8], dst: &mut [u8]) -> Result<()> {
    src.read_exact(dst)
        .map_err(|_| Error::Checkpoint("unexpected end of data".into()))
}

fn read_u64(src: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(src, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn save(dir: &Path, dtype: &str, records: &[Record], meta: serde_json::Value) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (bytes, entries) = encode(records);
    fs::File::create(dir.join(PARAMS_FILE))?.write_all(&bytes)?;
    let manifest = Manifest {
        format: "mactas-checkpoint".into(),
        version: VERSION,
        dtype: dtype.into(),
        records: entries,
        meta,
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load(dir: &Path) -> Result<(Vec<Record>, Manifest)> {
    let bytes = fs::read(dir.join(PARAMS_FILE))?;
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
    let records = decode(&bytes)?;
    if records.len() != manifest.records.len()
        || records
            .iter()
            .zip(&manifest.records)
            .any(|(r, e)| r.name != e.name || [r.rows, r.cols] != e.shape)
    {
        return Err(Error::Checkpoint("manifest does not match params.bin".into()));
    }
    Ok((records, manifest))
}

/// One record per parameter, names prefixed with `prefix`.
pub fn store_records<S: Scalar>(store: &ParamStore<S>, prefix: &str) -> Vec<Record> {
    store
        .iter()
        .map(|(_, p)| Record::from_matrix(format!("{prefix}{}", p.name), &p.tensor))
        .collect()
}

/// Fills every parameter of `store` from the records named `prefix + name`.
pub fn restore_store<S: Scalar>(store: &mut ParamStore<S>, records: &[Record], prefix: &str) -> Result<()> {
    for (_, p) in store.iter_mut() {
        let key = format!("{prefix}{}", p.name);
        let rec = records
            .iter()
            .find(|r| r.name == key)
            .ok_or_else(|| Error::Checkpoint(format!("missing record {key}")))?;
        if (rec.rows, rec.cols) != p.tensor.shape() {
            return Err(Error::Checkpoint(format!("shape mismatch for {key}")));
        }
        p.tensor = rec.to_matrix()?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn encode_decode_roundtrip(
            recs in proptest::collection::vec(
                ("[a-z./0-9]{1,12}", 0usize..4, 0usize..4, any::<u64>()),
                0..5,
            )
        ) {
            let records: Vec<Record> = recs
                .into_iter()
                .map(|(name, rows, cols, seed)| Record {
                    name,
                    rows,
                    cols,
                    values: (0..rows * cols).map(|i| f64::from_bits(seed.wrapping_add(i as u64) >> 2)).collect(),
                })
                .collect();
            let (bytes, entries) = encode(&records);
            let back = decode(&bytes).unwrap();
            prop_assert_eq!(back.len(), records.len());
            for (a, b) in back.iter().zip(&records) {
                prop_assert_eq!(&a.name, &b.name);
                prop_assert_eq!((a.rows, a.cols), (b.rows, b.cols));
                prop_assert!(a.values.iter().zip(&b.values).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
            for (e, r) in entries.iter().zip(&records) {
                let off = e.offset as usize;
                let len = u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
                prop_assert_eq!(len as usize, r.name.len());
            }
        }
    }

    #[test]
    fn truncated_input_is_rejected() {
        let rec = Record {
            name: "w".into(),
            rows: 1,
            cols: 2,
            values: vec![1.0, 2.0],
        };
        let (bytes, _) = encode(&[rec]);
        assert!(decode(&bytes[..bytes.len() - 3]).is_err());
        assert!(decode(b"NOTMAGIC").is_err());
    }

    #[test]
    fn header_layout_is_little_endian() {
        let (bytes, _) = encode(&[]);
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(&bytes[8..16], &[1, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(&bytes[16..24], &[0u8; 8]);
    }
}
