//! Datasets of labelled feature sequences: synthetic generation, the binary
//! feature container, and seeded episode sampling.

pub mod container;
mod sampler;
mod synthetic;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::alignment::FeatureSequence;
use crate::error::{Error, Result};

pub use container::{load_features, load_features_with_labels, save_dataset};
pub use sampler::{episode_seed, sample_episodes, EpisodeSampler, EpisodeSpec};
pub use synthetic::{generate, Family, SyntheticSpec};

/// Labelled sequences sharing one `(M, C)` shape, labels dense in `0..N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub sequences: Vec<FeatureSequence>,
    pub class_names: Vec<String>,
    pub m: usize,
    pub c: usize,
}

impl Dataset {
    /// Builds a dataset, checking shapes and label density. Class names
    /// default to `class_<i>`.
    pub fn new(sequences: Vec<FeatureSequence>) -> Result<Self> {
        let first = sequences
            .first()
            .ok_or_else(|| Error::InsufficientData("dataset is empty".into()))?;
        let (m, c) = first.features().shape();
        let mut labels = BTreeSet::new();
        for (i, s) in sequences.iter().enumerate() {
            if s.features().shape() != (m, c) {
                return Err(Error::DimensionMismatch(format!(
                    "sequence {i} is {:?}, expected {:?}",
                    s.features().shape(),
                    (m, c)
                )));
            }
            let y = s.label.ok_or_else(|| {
                Error::InvalidLabels(format!("sequence {:?} is unlabelled", s.id))
            })?;
            labels.insert(y);
        }
        let num_classes = labels.len();
        if labels.iter().copied().ne(0..num_classes) {
            return Err(Error::InvalidLabels(format!(
                "labels are not dense in 0..{num_classes}"
            )));
        }
        let class_names = (0..num_classes).map(|i| format!("class_{i}")).collect();
        Ok(Self {
            sequences,
            class_names,
            m,
            c,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn label(&self, index: usize) -> usize {
        self.sequences[index]
            .label
            .expect("dataset sequences are labelled")
    }

    /// Sequence indices grouped by class, in dataset order.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.num_classes()];
        for i in 0..self.len() {
            by_class[self.label(i)].push(i);
        }
        by_class
    }
}
