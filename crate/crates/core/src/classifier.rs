//! Few-shot inference over one episode.
//!
//! Prototypes start as per-class support means. Each query gets a mixture of
//! two softmax predictions (appearance and temporal), weighted by `beta`.
//! Prototypes can optionally be refined first, either by gradient descent on
//! the support cross-entropy (inductive) or by soft K-means over supports and
//! queries (transductive).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::alignment::{Aligner, AlignmentConfig, FeatureSequence};
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::losses::{self, PrototypeBank, Sample, LOSS_RISE_TOLERANCE};

/// One N-way K-shot task. Support labels are episode-local (`0..n_way`);
/// query labels are kept apart for scoring only.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub n_way: usize,
    pub k_shot: usize,
    pub support: Vec<(FeatureSequence, usize)>,
    pub query: Vec<FeatureSequence>,
    pub query_labels: Vec<usize>,
    /// Dataset class behind each episode label.
    pub classes: Vec<usize>,
}

impl Episode {
    pub fn validate(&self) -> Result<()> {
        if self.n_way == 0 || self.k_shot == 0 {
            return Err(Error::InvalidEpisode(
                "n_way and k_shot must be positive".into(),
            ));
        }
        let mut counts = vec![0usize; self.n_way];
        for (_, y) in &self.support {
            if *y >= self.n_way {
                return Err(Error::InvalidEpisode(format!(
                    "support label {y} outside 0..{}",
                    self.n_way
                )));
            }
            counts[*y] += 1;
        }
        if let Some(c) = counts.iter().position(|&k| k != self.k_shot) {
            return Err(Error::InvalidEpisode(format!(
                "class {c} has {} supports, expected {}",
                counts[c], self.k_shot
            )));
        }
        let shape = self.support[0].0.features().shape();
        if self
            .support
            .iter()
            .map(|(s, _)| s)
            .chain(&self.query)
            .any(|s| s.features().shape() != shape)
        {
            return Err(Error::InvalidEpisode("sequences differ in shape".into()));
        }
        if !self.query_labels.is_empty() && self.query_labels.len() != self.query.len() {
            return Err(Error::InvalidEpisode("query label count mismatch".into()));
        }
        Ok(())
    }

    pub fn frames(&self) -> usize {
        self.support[0].0.frames()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Refinement {
    #[default]
    None,
    Inductive,
    Transductive,
}

impl fmt::Display for Refinement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Refinement::None => "none",
            Refinement::Inductive => "inductive",
            Refinement::Transductive => "transductive",
        })
    }
}

impl FromStr for Refinement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Refinement::None),
            "inductive" => Ok(Refinement::Inductive),
            "transductive" => Ok(Refinement::Transductive),
            other => Err(Error::InvalidConfig(format!(
                "unknown refinement {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    /// Weight of the temporal prediction in the mixture.
    pub beta: f64,
    pub refine: Refinement,
    /// Soft K-means iterations.
    pub refine_iters: usize,
    pub inductive_lr: f64,
    pub inductive_steps: usize,
    /// Temporal-term weight of the inductive objective (0 = pure cross-entropy).
    pub inductive_alpha: f64,
    /// Entropy-term weight of the inductive objective (0 = pure cross-entropy).
    pub inductive_nu: f64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            beta: 0.5,
            refine: Refinement::None,
            refine_iters: 10,
            inductive_lr: 0.01,
            inductive_steps: 50,
            inductive_alpha: 0.0,
            inductive_nu: 0.0,
        }
    }
}

impl InferenceConfig {
    /// Defaults for data whose classes do not depend on frame order.
    pub fn order_insensitive() -> Self {
        Self {
            beta: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::InvalidConfig(format!(
                "beta must be in [0, 1], got {}",
                self.beta
            )));
        }
        if !(self.inductive_lr > 0.0 && self.inductive_lr.is_finite()) {
            return Err(Error::InvalidConfig(
                "inductive learning rate must be positive".into(),
            ));
        }
        for (name, v) in [("alpha", self.inductive_alpha), ("nu", self.inductive_nu)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Per-class mean of the support features.
pub fn init_prototypes(episode: &Episode) -> Result<PrototypeBank> {
    episode.validate()?;
    let (m, c) = episode.support[0].0.features().shape();
    let mut sums = vec![Matrix::zeros(m, c); episode.n_way];
    for (x, y) in &episode.support {
        sums[*y].add_scaled(x.features(), 1.0);
    }
    let k = episode.k_shot as f64;
    for s in &mut sums {
        s.as_mut_slice().iter_mut().for_each(|v| *v /= k);
    }
    PrototypeBank::new(sums)
}

/// Mixture predictive distribution over the bank's classes.
pub fn predict(
    x: &Matrix,
    bank: &PrototypeBank,
    beta: f64,
    acfg: &AlignmentConfig,
) -> Result<Vec<f64>> {
    let aligner = Aligner::new(*acfg, x.rows())?;
    predict_with(x, bank, beta, &aligner)
}

pub fn predict_with(
    x: &Matrix,
    bank: &PrototypeBank,
    beta: f64,
    aligner: &Aligner,
) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::InvalidConfig(format!(
            "beta must be in [0, 1], got {beta}"
        )));
    }
    let mut appearance = Vec::with_capacity(bank.num_classes());
    let mut temporal = Vec::with_capacity(bank.num_classes());
    for w in bank.prototypes() {
        if beta == 0.0 {
            appearance.push(aligner.sim_a(x, w)?);
        } else {
            let s = aligner.scores(x, w)?;
            appearance.push(s.appearance);
            temporal.push(s.temporal);
        }
    }
    linalg::softmax_in_place(&mut appearance);
    if beta == 0.0 {
        return Ok(appearance);
    }
    linalg::softmax_in_place(&mut temporal);
    Ok(appearance
        .iter()
        .zip(&temporal)
        .map(|(a, t)| (1.0 - beta) * a + beta * t)
        .collect())
}

/// Support cross-entropy of appearance logits, optionally with the temporal
/// and entropy terms of the training objective.
pub fn support_loss(
    bank: &PrototypeBank,
    episode: &Episode,
    icfg: &InferenceConfig,
    acfg: &AlignmentConfig,
) -> Result<f64> {
    let aligner = Aligner::new(*acfg, episode.frames())?;
    let batch = support_batch(episode);
    losses::batch_loss(
        &batch,
        bank,
        &aligner,
        icfg.inductive_alpha,
        icfg.inductive_nu,
    )
    .map(|l| l.total)
}

/// Gradient of [`support_loss`] with respect to every prototype.
pub fn support_loss_grad(
    bank: &PrototypeBank,
    episode: &Episode,
    icfg: &InferenceConfig,
    acfg: &AlignmentConfig,
) -> Result<Vec<Matrix>> {
    let aligner = Aligner::new(*acfg, episode.frames())?;
    let batch = support_batch(episode);
    losses::loss_and_grad(
        &batch,
        bank,
        &aligner,
        icfg.inductive_alpha,
        icfg.inductive_nu,
    )
    .map(|(_, g)| g)
}

fn support_batch(episode: &Episode) -> Vec<Sample<'_>> {
    episode
        .support
        .iter()
        .map(|(x, y)| (x.features(), *y))
        .collect()
}

/// Result of [`refine_inductive_with_history`].
#[derive(Debug, Clone, PartialEq)]
pub struct InductiveOutcome {
    pub bank: PrototypeBank,
    /// Support loss before the first step and after every accepted step.
    pub loss_history: Vec<f64>,
}

/// Full-batch gradient descent on the support loss.
pub fn refine_inductive(
    bank: &PrototypeBank,
    episode: &Episode,
    icfg: &InferenceConfig,
    acfg: &AlignmentConfig,
) -> Result<PrototypeBank> {
    refine_inductive_with_history(bank, episode, icfg, acfg).map(|o| o.bank)
}

pub fn refine_inductive_with_history(
    bank: &PrototypeBank,
    episode: &Episode,
    icfg: &InferenceConfig,
    acfg: &AlignmentConfig,
) -> Result<InductiveOutcome> {
    icfg.validate()?;
    episode.validate()?;
    let aligner = Aligner::new(*acfg, episode.frames())?;
    let batch = support_batch(episode);
    let (alpha, nu) = (icfg.inductive_alpha, icfg.inductive_nu);

    let mut bank = bank.clone();
    let mut lr = icfg.inductive_lr;
    let (mut loss, mut grads) = losses::loss_and_grad(&batch, &bank, &aligner, alpha, nu)?;
    let mut history = vec![loss.total];
    for _ in 0..icfg.inductive_steps {
        let mut next = bank.clone();
        next.descend(&grads, lr);
        let (next_loss, next_grads) = losses::loss_and_grad(&batch, &next, &aligner, alpha, nu)?;
        if next_loss.total > loss.total + LOSS_RISE_TOLERANCE {
            lr *= 0.5;
            continue;
        }
        bank = next;
        loss = next_loss;
        grads = next_grads;
        history.push(loss.total);
    }
    Ok(InductiveOutcome {
        bank,
        loss_history: history,
    })
}

/// Soft assignment of `x` to class `c`: the one-hot label for supports, the
/// predictive probability for queries.
#[allow(clippy::too_many_arguments)]
pub fn assignment(
    x: &Matrix,
    c: usize,
    bank: &PrototypeBank,
    beta: f64,
    acfg: &AlignmentConfig,
    is_support: bool,
    support_label: Option<usize>,
) -> Result<f64> {
    if c >= bank.num_classes() {
        return Err(Error::LabelOutOfRange {
            label: c,
            num_classes: bank.num_classes(),
        });
    }
    if is_support {
        let y = support_label.ok_or(Error::MissingSupportLabel)?;
        return Ok(if y == c { 1.0 } else { 0.0 });
    }
    predict(x, bank, beta, acfg).map(|p| p[c])
}

/// One soft K-means update: each prototype becomes the assignment-weighted
/// mean of supports (one-hot) and queries (`query_assignments[q][c]`).
pub fn soft_kmeans_update(
    episode: &Episode,
    query_assignments: &[Vec<f64>],
) -> Result<PrototypeBank> {
    episode.validate()?;
    if query_assignments.len() != episode.query.len() {
        return Err(Error::InvalidEpisode(format!(
            "{} assignment rows for {} queries",
            query_assignments.len(),
            episode.query.len()
        )));
    }
    let (m, c) = episode.support[0].0.features().shape();
    let mut num = vec![Matrix::zeros(m, c); episode.n_way];
    let mut den = vec![0.0; episode.n_way];
    for (x, y) in &episode.support {
        num[*y].add_scaled(x.features(), 1.0);
        den[*y] += 1.0;
    }
    for (x, z) in episode.query.iter().zip(query_assignments) {
        for (class, &weight) in z.iter().enumerate().take(episode.n_way) {
            if weight != 0.0 {
                num[class].add_scaled(x.features(), weight);
                den[class] += weight;
            }
        }
    }
    for (w, d) in num.iter_mut().zip(&den) {
        w.as_mut_slice().iter_mut().for_each(|v| *v /= d);
    }
    PrototypeBank::new(num)
}

/// Transductive soft K-means. Every iteration recomputes all query
/// assignments with the current bank before updating any prototype.
pub fn refine_transductive(
    bank: &PrototypeBank,
    episode: &Episode,
    icfg: &InferenceConfig,
    acfg: &AlignmentConfig,
) -> Result<PrototypeBank> {
    icfg.validate()?;
    episode.validate()?;
    let aligner = Aligner::new(*acfg, episode.frames())?;
    let mut bank = bank.clone();
    for _ in 0..icfg.refine_iters {
        let z = episode
            .query
            .iter()
            .map(|q| predict_with(q.features(), &bank, icfg.beta, &aligner))
            .collect::<Result<Vec<_>>>()?;
        bank = soft_kmeans_update(episode, &z)?;
    }
    Ok(bank)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    pub predicted: Vec<usize>,
    pub probabilities: Vec<Vec<f64>>,
}

impl Classification {
    /// Fraction of queries whose prediction matches `labels`.
    pub fn accuracy(&self, labels: &[usize]) -> f64 {
        if labels.is_empty() {
            return 0.0;
        }
        let hits = self
            .predicted
            .iter()
            .zip(labels)
            .filter(|(p, y)| p == y)
            .count();
        hits as f64 / labels.len() as f64
    }
}

/// Initialise, optionally refine, then label every query by its most
/// probable class (ties go to the lowest class index).
pub fn classify_episode(
    episode: &Episode,
    icfg: &InferenceConfig,
    acfg: &AlignmentConfig,
) -> Result<Classification> {
    icfg.validate()?;
    let aligner = Aligner::new(*acfg, episode.frames())?;
    let bank = init_prototypes(episode)?;
    let bank = match icfg.refine {
        Refinement::None => bank,
        Refinement::Inductive => refine_inductive(&bank, episode, icfg, acfg)?,
        Refinement::Transductive => refine_transductive(&bank, episode, icfg, acfg)?,
    };
    let probabilities = episode
        .query
        .iter()
        .map(|q| predict_with(q.features(), &bank, icfg.beta, &aligner))
        .collect::<Result<Vec<_>>>()?;
    let predicted = probabilities.iter().map(|p| linalg::argmax(p)).collect();
    Ok(Classification {
        predicted,
        probabilities,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(rows: Vec<Vec<f64>>, label: Option<usize>) -> FeatureSequence {
        FeatureSequence::new("s", label, Matrix::from_rows(&rows).unwrap()).unwrap()
    }

    fn toy_episode() -> Episode {
        let a = seq(vec![vec![1.0, 0.1], vec![0.9, 0.2]], Some(0));
        let b = seq(vec![vec![0.1, 1.0], vec![-0.2, 0.8]], Some(1));
        let q = seq(vec![vec![0.95, 0.15], vec![1.0, 0.0]], None);
        Episode {
            n_way: 2,
            k_shot: 1,
            support: vec![(a, 0), (b, 1)],
            query: vec![q],
            query_labels: vec![0],
            classes: vec![0, 1],
        }
    }

    #[test]
    fn one_shot_prototype_is_the_support() {
        let ep = toy_episode();
        let bank = init_prototypes(&ep).unwrap();
        assert_eq!(bank.get(0), ep.support[0].0.features());
        assert_eq!(bank.get(1), ep.support[1].0.features());
    }

    #[test]
    fn invalid_episode_shapes() {
        let mut ep = toy_episode();
        ep.support.pop();
        assert!(matches!(
            init_prototypes(&ep),
            Err(Error::InvalidEpisode(_))
        ));
    }

    #[test]
    fn beta_extremes_pick_one_term() {
        let ep = toy_episode();
        let bank = init_prototypes(&ep).unwrap();
        let acfg = AlignmentConfig::default();
        let q = ep.query[0].features();
        let a = predict(q, &bank, 0.0, &acfg).unwrap();
        let logits: Vec<f64> = bank
            .prototypes()
            .iter()
            .map(|w| crate::alignment::sim_a(q, w, &acfg).unwrap())
            .collect();
        assert_eq!(a, linalg::softmax_row(&logits).unwrap());
        let t = predict(q, &bank, 1.0, &acfg).unwrap();
        let logits: Vec<f64> = bank
            .prototypes()
            .iter()
            .map(|w| crate::alignment::sim_t(q, w, &acfg).unwrap())
            .collect();
        let expect = linalg::softmax_row(&logits).unwrap();
        for (x, y) in t.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-15);
        }
        assert!(predict(q, &bank, 1.5, &acfg).is_err());
    }

    #[test]
    fn support_assignments_are_one_hot() {
        let ep = toy_episode();
        let bank = init_prototypes(&ep).unwrap();
        let acfg = AlignmentConfig::default();
        let x = ep.support[1].0.features();
        assert_eq!(
            assignment(x, 1, &bank, 0.5, &acfg, true, Some(1)).unwrap(),
            1.0
        );
        assert_eq!(
            assignment(x, 0, &bank, 0.5, &acfg, true, Some(1)).unwrap(),
            0.0
        );
        assert!(matches!(
            assignment(x, 0, &bank, 0.5, &acfg, true, None),
            Err(Error::MissingSupportLabel)
        ));
        let q = ep.query[0].features();
        let total: f64 = (0..2)
            .map(|c| assignment(q, c, &bank, 0.5, &acfg, false, None).unwrap())
            .sum();
        assert!((total - 1.0).abs() < 1e-9);
        assert!(assignment(q, 0, &bank, 0.0, &acfg, false, None).unwrap() > 0.5);
    }

    #[test]
    fn zero_steps_leave_bank_unchanged() {
        let ep = toy_episode();
        let bank = init_prototypes(&ep).unwrap();
        let icfg = InferenceConfig {
            inductive_steps: 0,
            refine_iters: 0,
            ..InferenceConfig::default()
        };
        let acfg = AlignmentConfig::default();
        assert_eq!(refine_inductive(&bank, &ep, &icfg, &acfg).unwrap(), bank);
        assert_eq!(refine_transductive(&bank, &ep, &icfg, &acfg).unwrap(), bank);
    }

    #[test]
    fn refinement_parses() {
        for r in [
            Refinement::None,
            Refinement::Inductive,
            Refinement::Transductive,
        ] {
            assert_eq!(r.to_string().parse::<Refinement>().unwrap(), r);
        }
        assert!("soft".parse::<Refinement>().is_err());
    }
}
