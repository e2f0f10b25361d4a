use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::alignment::FeatureSequence;
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    /// Pairs of classes share one frame set in opposite orders.
    OrderSensitive,
    /// Each class has its own frame set; frame order is shuffled per sample.
    OrderInsensitive,
    /// First half of the classes order-sensitive, the rest order-insensitive.
    Mixed,
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::OrderSensitive => "order_sensitive",
            Family::OrderInsensitive => "order_insensitive",
            Family::Mixed => "mixed",
        })
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "order_sensitive" => Ok(Family::OrderSensitive),
            "order_insensitive" => Ok(Family::OrderInsensitive),
            "mixed" => Ok(Family::Mixed),
            other => Err(Error::InvalidSpec(format!("unknown family {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub family: Family,
    pub num_classes: usize,
    /// Frames per sequence.
    pub m: usize,
    /// Channels per frame.
    pub c: usize,
    pub noise_std: f64,
    /// Largest cyclic shift (in frames) applied to order-sensitive samples.
    pub jitter: usize,
    pub samples_per_class: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            family: Family::Mixed,
            num_classes: 10,
            m: 8,
            c: 16,
            noise_std: 0.1,
            jitter: 1,
            samples_per_class: 20,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.samples_per_class == 0 {
            return Err(Error::InvalidSpec(
                "num_classes and samples_per_class must be positive".into(),
            ));
        }
        if self.m == 0 || self.c == 0 {
            return Err(Error::InvalidSpec("m and c must be positive".into()));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::InvalidSpec(format!(
                "noise_std must be >= 0, got {}",
                self.noise_std
            )));
        }
        if self.family != Family::OrderInsensitive {
            if self.m < 2 {
                return Err(Error::InvalidSpec(
                    "order-sensitive classes need at least 2 frames".into(),
                ));
            }
            if self.m > self.c {
                return Err(Error::InvalidSpec(format!(
                    "cannot orthonormalise {} frames in {} channels",
                    self.m, self.c
                )));
            }
        }
        Ok(())
    }

    fn sensitive_classes(&self) -> usize {
        match self.family {
            Family::OrderSensitive => self.num_classes,
            Family::OrderInsensitive => 0,
            Family::Mixed => self.num_classes / 2,
        }
    }
}

/// How one class produces its samples.
enum ClassTemplate {
    Ordered { frames: Matrix, reversed: bool },
    Shuffled { frames: Matrix },
}

fn gaussian_row<R: Rng>(rng: &mut R, c: usize) -> Vec<f64> {
    (0..c)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn unit(mut v: Vec<f64>) -> Option<Vec<f64>> {
    let n = linalg::norm(&v);
    if n < 1e-6 {
        return None;
    }
    v.iter_mut().for_each(|x| *x /= n);
    Some(v)
}

/// Gram-Schmidt on Gaussian draws, redrawing any nearly dependent vector.
fn orthonormal_frames<R: Rng>(rng: &mut R, m: usize, c: usize) -> Matrix {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(m);
    while basis.len() < m {
        let mut v = gaussian_row(rng, c);
        for b in &basis {
            let proj = linalg::dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= proj * y);
        }
        if let Some(u) = unit(v) {
            basis.push(u);
        }
    }
    Matrix::from_rows(&basis).expect("rows share length")
}

fn random_unit_frames<R: Rng>(rng: &mut R, m: usize, c: usize) -> Matrix {
    let rows: Vec<Vec<f64>> = (0..m)
        .map(|_| loop {
            if let Some(u) = unit(gaussian_row(rng, c)) {
                break u;
            }
        })
        .collect();
    Matrix::from_rows(&rows).expect("rows share length")
}

/// Adds noise, renormalises every row to unit length, and rounds to `f32`
/// so the sample survives a container round trip unchanged.
fn finish_rows<R: Rng>(rng: &mut R, rows: Vec<Vec<f64>>, noise_std: f64) -> Matrix {
    let rows: Vec<Vec<f64>> = rows
        .into_iter()
        .map(|base| loop {
            let noisy: Vec<f64> = base
                .iter()
                .map(|&v| v + noise_std * rng.sample::<f64, _>(StandardNormal))
                .collect();
            if let Some(u) = unit(noisy) {
                break u.into_iter().map(|v| v as f32 as f64).collect();
            }
        })
        .collect();
    Matrix::from_rows(&rows).expect("rows share length")
}

/// Deterministic synthetic dataset for the requested class family.
pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (m, c) = (spec.m, spec.c);

    let sensitive = spec.sensitive_classes();
    let mut templates = Vec::with_capacity(spec.num_classes);
    while templates.len() < sensitive {
        let frames = orthonormal_frames(&mut rng, m, c);
        templates.push(ClassTemplate::Ordered {
            frames: frames.clone(),
            reversed: false,
        });
        if templates.len() < sensitive {
            templates.push(ClassTemplate::Ordered {
                frames,
                reversed: true,
            });
        }
    }
    while templates.len() < spec.num_classes {
        templates.push(ClassTemplate::Shuffled {
            frames: random_unit_frames(&mut rng, m, c),
        });
    }

    let mut sequences = Vec::with_capacity(spec.num_classes * spec.samples_per_class);
    for (label, template) in templates.iter().enumerate() {
        for s in 0..spec.samples_per_class {
            let rows: Vec<Vec<f64>> = match template {
                ClassTemplate::Ordered { frames, reversed } => {
                    let span = 2 * spec.jitter as i64 + 1;
                    let shift = rng.random_range(0..span) - spec.jitter as i64;
                    (0..m)
                        .map(|i| {
                            let src = (i as i64 + shift).rem_euclid(m as i64) as usize;
                            let src = if *reversed { m - 1 - src } else { src };
                            frames.row(src).to_vec()
                        })
                        .collect()
                }
                ClassTemplate::Shuffled { frames } => {
                    let mut order: Vec<usize> = (0..m).collect();
                    order.shuffle(&mut rng);
                    order.into_iter().map(|i| frames.row(i).to_vec()).collect()
                }
            };
            let features = finish_rows(&mut rng, rows, spec.noise_std);
            sequences.push(FeatureSequence::new(
                format!("c{label:03}_s{s:04}"),
                Some(label),
                features,
            )?);
        }
    }
    Dataset::new(sequences)
}
