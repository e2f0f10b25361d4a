use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::classifier::Episode;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub n_way: usize,
    pub k_shot: usize,
    pub queries_per_class: usize,
    pub num_episodes: usize,
    pub seed: u64,
}

impl Default for EpisodeSpec {
    fn default() -> Self {
        Self {
            n_way: 5,
            k_shot: 1,
            queries_per_class: 15,
            num_episodes: 1000,
            seed: 0,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of episode `index`, so any episode can be rebuilt on its own.
pub fn episode_seed(seed: u64, index: usize) -> u64 {
    splitmix64(seed ^ splitmix64(index as u64))
}

/// Draws reproducible N-way K-shot episodes from a dataset.
#[derive(Debug, Clone)]
pub struct EpisodeSampler<'a> {
    ds: &'a Dataset,
    spec: EpisodeSpec,
    by_class: Vec<Vec<usize>>,
}

impl<'a> EpisodeSampler<'a> {
    pub fn new(ds: &'a Dataset, spec: EpisodeSpec) -> Result<Self> {
        if spec.n_way == 0 || spec.k_shot == 0 {
            return Err(Error::InvalidConfig(
                "n_way and k_shot must be positive".into(),
            ));
        }
        if spec.n_way > ds.num_classes() {
            return Err(Error::InsufficientData(format!(
                "{}-way episodes need {} classes, dataset has {}",
                spec.n_way,
                spec.n_way,
                ds.num_classes()
            )));
        }
        let by_class = ds.indices_by_class();
        let need = spec.k_shot + spec.queries_per_class;
        if let Some((class, members)) = by_class.iter().enumerate().find(|(_, v)| v.len() < need) {
            return Err(Error::InsufficientData(format!(
                "class {class} has {} samples, episodes need {need}",
                members.len()
            )));
        }
        Ok(Self { ds, spec, by_class })
    }

    pub fn spec(&self) -> &EpisodeSpec {
        &self.spec
    }

    /// Episode `i`: N classes without replacement, then K supports and the
    /// queries of each class without replacement.
    pub fn episode(&self, i: usize) -> Episode {
        let spec = &self.spec;
        let mut rng = ChaCha8Rng::seed_from_u64(episode_seed(spec.seed, i));
        let classes = index::sample(&mut rng, self.ds.num_classes(), spec.n_way).into_vec();
        let need = spec.k_shot + spec.queries_per_class;
        let mut support = Vec::with_capacity(spec.n_way * spec.k_shot);
        let mut query = Vec::with_capacity(spec.n_way * spec.queries_per_class);
        let mut query_labels = Vec::with_capacity(query.capacity());
        for (local, &class) in classes.iter().enumerate() {
            let members = &self.by_class[class];
            let picks = index::sample(&mut rng, members.len(), need).into_vec();
            for (n, &p) in picks.iter().enumerate() {
                let s = self.ds.sequences[members[p]].clone();
                if n < spec.k_shot {
                    support.push((s, local));
                } else {
                    query.push(s);
                    query_labels.push(local);
                }
            }
        }
        Episode {
            n_way: spec.n_way,
            k_shot: spec.k_shot,
            support,
            query,
            query_labels,
            classes,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = Episode> + '_ {
        (0..self.spec.num_episodes).map(|i| self.episode(i))
    }
}

/// Lazily yields the `spec.num_episodes` episodes in index order.
pub fn sample_episodes(
    ds: &Dataset,
    spec: EpisodeSpec,
) -> Result<impl Iterator<Item = Episode> + '_> {
    let sampler = EpisodeSampler::new(ds, spec)?;
    Ok((0..spec.num_episodes).map(move |i| sampler.episode(i)))
}
