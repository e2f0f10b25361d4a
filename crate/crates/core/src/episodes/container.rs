//! Little-endian feature container.
//!
//! ```text
//! "ATAF"                      4 bytes
//! version            u32      = 1
//! num_videos, M, C   u32 x 3
//! per video:
//!   label            i32      (-1 = unlabelled)
//!   id_len           u16
//!   id               id_len bytes, UTF-8
//!   features         M*C f32, row-major (frames as rows)
//! ```

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::Dataset;
use crate::alignment::{check_row_norms, FeatureSequence};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const MAGIC: &[u8; 4] = b"ATAF";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

/// One decoded record.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub label: Option<usize>,
    pub id: String,
    pub features: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub m: usize,
    pub c: usize,
    pub records: Vec<Record>,
}

pub fn encode(m: usize, c: usize, records: &[Record]) -> Result<Vec<u8>> {
    let dims = [records.len(), m, c];
    let mut out = Vec::with_capacity(HEADER_LEN + records.len() * (8 + m * c * 4));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for d in dims {
        let d = u32::try_from(d).map_err(|_| Error::DimMismatch(format!("{d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for (index, r) in records.iter().enumerate() {
        if r.features.shape() != (m, c) {
            return Err(Error::DimMismatch(format!(
                "record {index} is {:?}, header says {:?}",
                r.features.shape(),
                (m, c)
            )));
        }
        let label = match r.label {
            None => -1,
            Some(y) => i32::try_from(y)
                .map_err(|_| Error::InvalidLabels(format!("label {y} exceeds i32")))?,
        };
        out.extend_from_slice(&label.to_le_bytes());
        let id = r.id.as_bytes();
        let len = u16::try_from(id.len())
            .map_err(|_| Error::InvalidLabels(format!("id of record {index} is too long")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(id);
        for &v in r.features.as_slice() {
            let f = v as f32;
            if !f.is_finite() {
                return Err(Error::CorruptRecord {
                    index,
                    reason: format!("value {v} not representable as f32"),
                });
            }
            out.extend_from_slice(&f.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Container> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::BadMagic {
            found: bytes[..bytes.len().min(4)].to_vec(),
        });
    }
    let mut cur = Cursor { bytes, pos: 4 };
    let truncated = || Error::DimMismatch("truncated header".into());
    let version = cur.u32().ok_or_else(truncated)?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let n = cur.u32().ok_or_else(truncated)? as usize;
    let m = cur.u32().ok_or_else(truncated)? as usize;
    let c = cur.u32().ok_or_else(truncated)? as usize;
    if m == 0 || c == 0 {
        return Err(Error::DimMismatch(format!("header dims M={m}, C={c}")));
    }

    let corrupt = |index: usize, reason: &str| Error::CorruptRecord {
        index,
        reason: reason.to_string(),
    };
    let mut records = Vec::with_capacity(n.min(1 << 20));
    for index in 0..n {
        let label = cur
            .take(4)
            .map(|b| i32::from_le_bytes(b.try_into().unwrap()))
            .ok_or_else(|| corrupt(index, "truncated label"))?;
        let label = match label {
            -1 => None,
            y if y >= 0 => Some(y as usize),
            y => return Err(corrupt(index, &format!("invalid label {y}"))),
        };
        let id_len = cur
            .take(2)
            .map(|b| u16::from_le_bytes(b.try_into().unwrap()))
            .ok_or_else(|| corrupt(index, "truncated id length"))?;
        let id = cur
            .take(id_len as usize)
            .ok_or_else(|| corrupt(index, "truncated id"))?;
        let id = std::str::from_utf8(id)
            .map_err(|_| corrupt(index, "id is not UTF-8"))?
            .to_string();
        let raw = cur
            .take(m * c * 4)
            .ok_or_else(|| corrupt(index, "truncated features"))?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        let features =
            Matrix::new(m, c, data).map_err(|_| corrupt(index, "non-finite feature value"))?;
        records.push(Record {
            label,
            id,
            features,
        });
    }
    if cur.pos != bytes.len() {
        return Err(corrupt(n, "trailing bytes after last record"));
    }
    Ok(Container { m, c, records })
}

pub fn read_container(path: impl AsRef<Path>) -> Result<Container> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub fn write_container(
    path: impl AsRef<Path>,
    m: usize,
    c: usize,
    records: &[Record],
) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(m, c, records)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn save_dataset(path: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    let records: Vec<Record> = ds
        .sequences
        .iter()
        .map(|s| Record {
            label: s.label,
            id: s.id.clone(),
            features: s.features().clone(),
        })
        .collect();
    write_container(path, ds.m, ds.c, &records)
}

pub fn load_features(path: impl AsRef<Path>) -> Result<Dataset> {
    load_features_with_labels(path, None::<&Path>)
}

/// Loads a container, optionally overriding labels from an `id,label` CSV.
pub fn load_features_with_labels(
    path: impl AsRef<Path>,
    labels_csv: Option<impl AsRef<Path>>,
) -> Result<Dataset> {
    let mut container = read_container(path)?;
    if let Some(csv_path) = labels_csv {
        let overrides = read_label_csv(csv_path.as_ref())?;
        let mut used = 0;
        for r in &mut container.records {
            if let Some(&y) = overrides.get(&r.id) {
                r.label = Some(y);
                used += 1;
            }
        }
        if used != overrides.len() {
            return Err(Error::InvalidLabels(format!(
                "{} label rows name ids missing from the container",
                overrides.len() - used
            )));
        }
    }
    dataset_from_container(container)
}

pub fn dataset_from_container(container: Container) -> Result<Dataset> {
    let mut sequences = Vec::with_capacity(container.records.len());
    for (index, r) in container.records.into_iter().enumerate() {
        check_row_norms(&r.features).map_err(|e| Error::CorruptRecord {
            index,
            reason: e.to_string(),
        })?;
        sequences.push(FeatureSequence::new(r.id, r.label, r.features)?);
    }
    Dataset::new(sequences)
}

fn read_label_csv(path: &Path) -> Result<HashMap<String, usize>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(file);
    let mut out = HashMap::new();
    for (line, row) in reader.records().enumerate() {
        let row = row.map_err(|e| Error::InvalidLabels(format!("{}: {e}", path.display())))?;
        if row.len() != 2 {
            return Err(Error::InvalidLabels(format!(
                "{}: line {} has {} fields, expected id,label",
                path.display(),
                line + 1,
                row.len()
            )));
        }
        if line == 0 && &row[0] == "id" && &row[1] == "label" {
            continue;
        }
        let y: usize = row[1].parse().map_err(|_| {
            Error::InvalidLabels(format!(
                "{}: line {} has non-integer label {:?}",
                path.display(),
                line + 1,
                &row[1]
            ))
        })?;
        if out.insert(row[0].to_string(), y).is_some() {
            return Err(Error::InvalidLabels(format!("duplicate id {:?}", &row[0])));
        }
    }
    Ok(out)
}
