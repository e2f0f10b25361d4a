//! Prototype-bank checkpoints: the feature container with one record per
//! prototype, plus a JSON sidecar at `<path>.json` with training settings.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::episodes::container::{read_container, write_container, Record};
use crate::error::{Error, Result};
use crate::losses::PrototypeBank;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub alpha: f64,
    pub nu: f64,
    pub lambda: f64,
    pub sigma: f64,
    pub epochs: usize,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes the bank (values rounded to `f32`) and its sidecar.
pub fn save_checkpoint(
    path: impl AsRef<Path>,
    bank: &PrototypeBank,
    meta: &CheckpointMeta,
) -> Result<()> {
    let path = path.as_ref();
    let records: Vec<Record> = bank
        .prototypes()
        .iter()
        .enumerate()
        .map(|(p, w)| Record {
            label: Some(p),
            id: format!("prototype_{p}"),
            features: w.clone(),
        })
        .collect();
    write_container(path, bank.frames(), bank.channels(), &records)?;
    let side = sidecar_path(path);
    let json = serde_json::to_string_pretty(meta).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(&side, json + "\n").map_err(|e| Error::io(&side, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(PrototypeBank, CheckpointMeta)> {
    let path = path.as_ref();
    let container = read_container(path)?;
    let mut prototypes = Vec::with_capacity(container.records.len());
    for (index, r) in container.records.into_iter().enumerate() {
        if r.label != Some(index) {
            return Err(Error::CorruptRecord {
                index,
                reason: format!("prototype record labelled {:?}", r.label),
            });
        }
        prototypes.push(r.features);
    }
    let bank = PrototypeBank::new(prototypes)?;
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let meta = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", side.display())))?;
    Ok((bank, meta))
}
