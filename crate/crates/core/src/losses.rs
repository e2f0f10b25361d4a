//! Training objective over a bank of sequence prototypes.
//!
//! Per sample `(x, y)` the loss is
//!
//! ```text
//! sup  = -log softmax_p(sim_a(x, W_p))[y] - alpha * sim_t(x, W_y)
//! info = H(row-softmax of D(x, W_y))            (mean row entropy)
//! total = sup + nu * info
//! ```
//!
//! averaged over the batch. Gradients with respect to every prototype are
//! derived by hand and checked against central differences in the tests.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alignment::{normalize_rows, similarity_of_unit_rows, Aligner, AlignmentConfig};
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, NORM_FLOOR};

/// One labelled training sample: features (frames as rows) and class index.
pub type Sample<'a> = (&'a Matrix, usize);

/// Learnable per-class prototypes, each an `M x C` frame sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    prototypes: Vec<Matrix>,
}

impl PrototypeBank {
    pub fn new(prototypes: Vec<Matrix>) -> Result<Self> {
        let first = prototypes
            .first()
            .ok_or_else(|| Error::InvalidConfig("prototype bank must not be empty".into()))?;
        let shape = first.shape();
        for p in &prototypes {
            if p.shape() != shape {
                return Err(Error::DimensionMismatch(format!(
                    "prototype shapes {:?} and {:?}",
                    shape,
                    p.shape()
                )));
            }
        }
        Ok(Self { prototypes })
    }

    /// Rows drawn i.i.d. standard normal, scaled by `1/sqrt(C)`.
    pub fn random(num_classes: usize, frames: usize, channels: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::random_with(num_classes, frames, channels, &mut rng)
    }

    fn random_with(
        num_classes: usize,
        frames: usize,
        channels: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if num_classes == 0 || frames == 0 || channels == 0 {
            return Err(Error::InvalidConfig(
                "prototype bank dimensions must be positive".into(),
            ));
        }
        let scale = 1.0 / (channels as f64).sqrt();
        let prototypes = (0..num_classes)
            .map(|_| {
                Matrix::from_fn(frames, channels, |_, _| {
                    rng.sample::<f64, _>(StandardNormal) * scale
                })
            })
            .collect();
        Self::new(prototypes)
    }

    pub fn num_classes(&self) -> usize {
        self.prototypes.len()
    }

    pub fn frames(&self) -> usize {
        self.prototypes[0].rows()
    }

    pub fn channels(&self) -> usize {
        self.prototypes[0].cols()
    }

    pub fn get(&self, class: usize) -> &Matrix {
        &self.prototypes[class]
    }

    pub fn prototypes(&self) -> &[Matrix] {
        &self.prototypes
    }

    pub fn prototypes_mut(&mut self) -> &mut [Matrix] {
        &mut self.prototypes
    }

    pub fn into_prototypes(self) -> Vec<Matrix> {
        self.prototypes
    }

    /// `W_p -= lr * grad_p` for every prototype.
    pub fn descend(&mut self, grads: &[Matrix], lr: f64) {
        for (w, g) in self.prototypes.iter_mut().zip(grads) {
            w.add_scaled(g, -lr);
        }
    }

    /// Adds tiny noise to any row whose norm fell below the floor.
    /// Returns the number of rows touched.
    pub fn rejitter<R: Rng>(&mut self, rng: &mut R) -> usize {
        let mut touched = 0;
        for w in &mut self.prototypes {
            for i in 0..w.rows() {
                let row = w.row_mut(i);
                if linalg::norm(row) <= NORM_FLOOR {
                    row.iter_mut()
                        .for_each(|v| *v += 1e-6 * rng.sample::<f64, _>(StandardNormal));
                    touched += 1;
                }
            }
        }
        touched
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the temporal term in the supervised loss.
    pub alpha: f64,
    /// Weight of the entropy term.
    pub nu: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            nu: 0.1,
            learning_rate: 0.01,
            epochs: 200,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl LossConfig {
    /// Defaults for data whose classes do not depend on frame order.
    pub fn order_insensitive() -> Self {
        Self {
            alpha: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "alpha must be >= 0, got {}",
                self.alpha
            )));
        }
        if !(self.nu >= 0.0 && self.nu.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "nu must be >= 0, got {}",
                self.nu
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub sup: f64,
    pub info: f64,
    pub total: f64,
}

/// Per-sample forward pass (and optionally backward pass).
struct SampleEval {
    sup: f64,
    info: f64,
    grads: Option<Vec<Matrix>>,
}

fn check_sample(x: &Matrix, label: usize, bank: &PrototypeBank) -> Result<()> {
    if label >= bank.num_classes() {
        return Err(Error::LabelOutOfRange {
            label,
            num_classes: bank.num_classes(),
        });
    }
    if x.shape() != (bank.frames(), bank.channels()) {
        return Err(Error::DimensionMismatch(format!(
            "sample is {:?}, prototypes are {:?}",
            x.shape(),
            (bank.frames(), bank.channels())
        )));
    }
    Ok(())
}

/// Row-wise log-softmax of `d` at temperature 1.
fn log_softmax_rows(d: &Matrix) -> Matrix {
    let mut out = d.clone();
    for i in 0..out.rows() {
        linalg::log_softmax_in_place(out.row_mut(i));
    }
    out
}

/// Mean row entropy of the row-softmax of `d`.
fn entropy_from_similarity(d: &Matrix) -> f64 {
    let logp = log_softmax_rows(d);
    let h: f64 = logp.as_slice().iter().map(|&lp| -lp.exp() * lp).sum();
    (h / d.rows() as f64).max(0.0)
}

fn evaluate_sample(
    x: &Matrix,
    label: usize,
    bank: &PrototypeBank,
    aligner: &Aligner,
    alpha: f64,
    nu: f64,
    want_grad: bool,
) -> Result<SampleEval> {
    check_sample(x, label, bank)?;
    let lambda = aligner.cfg.lambda;
    let m = x.rows() as f64;
    let (xn, _) = normalize_rows(x)?;

    let mut unit = Vec::with_capacity(bank.num_classes());
    let mut sims = Vec::with_capacity(bank.num_classes());
    let mut logits = Vec::with_capacity(bank.num_classes());
    for w in bank.prototypes() {
        let (wn, norms) = normalize_rows(w)?;
        let d = similarity_of_unit_rows(&xn, &wn);
        logits.push(crate::alignment::appearance_from_similarity(&d, lambda));
        unit.push((wn, norms));
        sims.push(d);
    }

    let lse = linalg::lse_unchecked(&logits, 1.0);
    let ce = lse - logits[label];

    let d_y = &sims[label];
    let logp = log_softmax_rows(d_y);
    let log_q = &aligner.prior().log_t_tilde;
    let mut kl = 0.0;
    let mut neg_ent = 0.0;
    for (&lp, &lq) in logp.as_slice().iter().zip(log_q.as_slice()) {
        let p = lp.exp();
        kl += p * (lp - lq);
        neg_ent += p * lp;
    }
    let sim_t = -(kl / m).max(0.0);
    let info = (-neg_ent / m).max(0.0);
    let sup = ce - alpha * sim_t;

    if !want_grad {
        return Ok(SampleEval {
            sup,
            info,
            grads: None,
        });
    }

    let mut probs = logits.clone();
    linalg::softmax_in_place(&mut probs);

    let (rows, cols) = d_y.shape();
    let mut grads = Vec::with_capacity(bank.num_classes());
    for (p, d) in sims.iter().enumerate() {
        // dL/dD for this prototype
        let coef = probs[p] - if p == label { 1.0 } else { 0.0 };
        let mut g = Matrix::zeros(rows, cols);
        for i in 0..rows {
            let row = g.row_mut(i);
            row.copy_from_slice(d.row(i));
            row.iter_mut().for_each(|v| *v /= lambda);
            linalg::softmax_in_place(row);
            row.iter_mut().for_each(|v| *v *= coef);
        }
        if p == label && (alpha != 0.0 || nu != 0.0) {
            for i in 0..rows {
                let lp = logp.row(i);
                let lq = log_q.row(i);
                let kl_i: f64 = lp.iter().zip(lq).map(|(&a, &b)| a.exp() * (a - b)).sum();
                let ne_i: f64 = lp.iter().map(|&a| a.exp() * a).sum();
                for j in 0..cols {
                    let pij = lp[j].exp();
                    // d(sim_t)/dD = -(1/M) p (r - KL_i);  d(H)/dD = -(1/M) p (log p - sum p log p)
                    let d_sim_t = -pij * ((lp[j] - lq[j]) - kl_i) / m;
                    let d_info = -pij * (lp[j] - ne_i) / m;
                    g.set(i, j, g.get(i, j) - alpha * d_sim_t + nu * d_info);
                }
            }
        }
        grads.push(backprop_cosine(&g, d, &xn, &unit[p].0, &unit[p].1));
    }

    Ok(SampleEval {
        sup,
        info,
        grads: Some(grads),
    })
}

/// Pulls `dL/dD` back to the second argument of the cosine similarity:
/// `dL/dw_j = (1/|w_j|) * sum_i G(i,j) (x^_i - D(i,j) w^_j)`.
fn backprop_cosine(g: &Matrix, d: &Matrix, xn: &Matrix, wn: &Matrix, w_norms: &[f64]) -> Matrix {
    let (rows, cols) = d.shape();
    let channels = wn.cols();
    let mut out = Matrix::zeros(cols, channels);
    for (j, &w_norm) in w_norms.iter().enumerate().take(cols) {
        let out_row = out.row_mut(j);
        let mut along_w = 0.0;
        for i in 0..rows {
            let gij = g.get(i, j);
            if gij == 0.0 {
                continue;
            }
            along_w += gij * d.get(i, j);
            for (o, &xv) in out_row.iter_mut().zip(xn.row(i)) {
                *o += gij * xv;
            }
        }
        let inv = 1.0 / w_norm;
        for (o, &wv) in out_row.iter_mut().zip(wn.row(j)) {
            *o = (*o - along_w * wv) * inv;
        }
    }
    out
}

/// Supervised loss of one sample: appearance cross-entropy plus the
/// temporal penalty `-alpha * sim_t` against its own class prototype.
pub fn loss_sup(
    x: &Matrix,
    label: usize,
    bank: &PrototypeBank,
    acfg: &AlignmentConfig,
    lcfg: &LossConfig,
) -> Result<f64> {
    let aligner = Aligner::new(*acfg, x.rows())?;
    evaluate_sample(x, label, bank, &aligner, lcfg.alpha, 0.0, false).map(|e| e.sup)
}

/// Mean row entropy of the row-softmax similarity between `x` and its class
/// prototype. Lies in `[0, ln M]`.
pub fn loss_info(x: &Matrix, label: usize, bank: &PrototypeBank) -> Result<f64> {
    check_sample(x, label, bank)?;
    let d = crate::alignment::similarity_matrix(x, bank.get(label))?;
    Ok(entropy_from_similarity(&d))
}

fn run_batch(
    batch: &[Sample<'_>],
    bank: &PrototypeBank,
    aligner: &Aligner,
    alpha: f64,
    nu: f64,
    want_grad: bool,
) -> Result<(LossBreakdown, Option<Vec<Matrix>>)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let evals = batch
        .par_iter()
        .map(|&(x, y)| evaluate_sample(x, y, bank, aligner, alpha, nu, want_grad))
        .collect::<Result<Vec<_>>>()?;

    // fixed-order reduction keeps results independent of the worker count
    let n = batch.len() as f64;
    let mut sup = 0.0;
    let mut info = 0.0;
    let mut grads: Option<Vec<Matrix>> = want_grad.then(|| {
        bank.prototypes()
            .iter()
            .map(|w| Matrix::zeros(w.rows(), w.cols()))
            .collect()
    });
    for e in evals {
        sup += e.sup;
        info += e.info;
        if let (Some(acc), Some(g)) = (grads.as_mut(), e.grads) {
            for (a, gp) in acc.iter_mut().zip(&g) {
                a.add_scaled(gp, 1.0);
            }
        }
    }
    if let Some(acc) = grads.as_mut() {
        acc.iter_mut().for_each(|g| g.scale(1.0 / n));
    }
    let sup = sup / n;
    let info = info / n;
    Ok((
        LossBreakdown {
            sup,
            info,
            total: sup + nu * info,
        },
        grads,
    ))
}

pub fn total_loss_batch(
    batch: &[Sample<'_>],
    bank: &PrototypeBank,
    acfg: &AlignmentConfig,
    lcfg: &LossConfig,
) -> Result<LossBreakdown> {
    let aligner = aligner_for(batch, acfg)?;
    run_batch(batch, bank, &aligner, lcfg.alpha, lcfg.nu, false).map(|(l, _)| l)
}

/// Gradient of the batch-mean total loss with respect to every prototype.
pub fn grad_prototypes(
    batch: &[Sample<'_>],
    bank: &PrototypeBank,
    acfg: &AlignmentConfig,
    lcfg: &LossConfig,
) -> Result<Vec<Matrix>> {
    let aligner = aligner_for(batch, acfg)?;
    loss_and_grad(batch, bank, &aligner, lcfg.alpha, lcfg.nu).map(|(_, g)| g)
}

pub(crate) fn loss_and_grad(
    batch: &[Sample<'_>],
    bank: &PrototypeBank,
    aligner: &Aligner,
    alpha: f64,
    nu: f64,
) -> Result<(LossBreakdown, Vec<Matrix>)> {
    let (loss, grads) = run_batch(batch, bank, aligner, alpha, nu, true)?;
    Ok((loss, grads.expect("gradients requested")))
}

pub(crate) fn batch_loss(
    batch: &[Sample<'_>],
    bank: &PrototypeBank,
    aligner: &Aligner,
    alpha: f64,
    nu: f64,
) -> Result<LossBreakdown> {
    run_batch(batch, bank, aligner, alpha, nu, false).map(|(l, _)| l)
}

fn aligner_for(batch: &[Sample<'_>], acfg: &AlignmentConfig) -> Result<Aligner> {
    let first = batch.first().ok_or(Error::EmptyBatch)?;
    Aligner::new(*acfg, first.0.rows())
}

/// Epoch-level record of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub bank: PrototypeBank,
    /// Full-set loss of the initial bank followed by every accepted epoch.
    pub loss_history: Vec<LossBreakdown>,
    /// Epochs whose loss rose by more than the tolerance; each was rolled
    /// back and the learning rate halved.
    pub rejected_epochs: usize,
    pub final_learning_rate: f64,
}

/// Allowed rise in full-set loss between epoch checkpoints.
pub const LOSS_RISE_TOLERANCE: f64 = 1e-3;

/// Mini-batch gradient descent from a seeded random bank.
pub fn train_prototypes(
    samples: &[Sample<'_>],
    num_classes: usize,
    lcfg: &LossConfig,
    acfg: &AlignmentConfig,
) -> Result<PrototypeBank> {
    train_prototypes_with_history(samples, num_classes, lcfg, acfg).map(|o| o.bank)
}

pub fn train_prototypes_with_history(
    samples: &[Sample<'_>],
    num_classes: usize,
    lcfg: &LossConfig,
    acfg: &AlignmentConfig,
) -> Result<TrainOutcome> {
    lcfg.validate()?;
    let first = samples.first().ok_or(Error::EmptyBatch)?;
    let mut seen = vec![false; num_classes];
    for &(x, y) in samples {
        if y >= num_classes {
            return Err(Error::LabelOutOfRange {
                label: y,
                num_classes,
            });
        }
        if x.shape() != first.0.shape() {
            return Err(Error::DimensionMismatch(
                "training samples differ in shape".into(),
            ));
        }
        seen[y] = true;
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::MissingClass(missing));
    }

    let aligner = Aligner::new(*acfg, first.0.rows())?;
    let mut rng = ChaCha8Rng::seed_from_u64(lcfg.seed);
    let mut bank =
        PrototypeBank::random_with(num_classes, first.0.rows(), first.0.cols(), &mut rng)?;
    let mut lr = lcfg.learning_rate;
    let mut last = batch_loss(samples, &bank, &aligner, lcfg.alpha, lcfg.nu)?;
    let mut history = vec![last];
    let mut rejected = 0;
    let mut order: Vec<usize> = (0..samples.len()).collect();

    for _ in 0..lcfg.epochs {
        let snapshot = bank.clone();
        order.shuffle(&mut rng);
        for chunk in order.chunks(lcfg.batch_size) {
            let batch: Vec<Sample<'_>> = chunk.iter().map(|&i| samples[i]).collect();
            let (_, grads) = loss_and_grad(&batch, &bank, &aligner, lcfg.alpha, lcfg.nu)?;
            bank.descend(&grads, lr);
            bank.rejitter(&mut rng);
        }
        let loss = batch_loss(samples, &bank, &aligner, lcfg.alpha, lcfg.nu)?;
        if loss.total > last.total + LOSS_RISE_TOLERANCE {
            bank = snapshot;
            lr *= 0.5;
            rejected += 1;
        } else {
            last = loss;
            history.push(loss);
        }
    }

    Ok(TrainOutcome {
        bank,
        loss_history: history,
        rejected_epochs: rejected,
        final_learning_rate: lr,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfgs(alpha: f64, nu: f64) -> (AlignmentConfig, LossConfig) {
        (
            AlignmentConfig::default(),
            LossConfig {
                alpha,
                nu,
                ..LossConfig::default()
            },
        )
    }

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
    }

    #[test]
    fn single_class_has_no_cross_entropy() {
        let (a, l) = cfgs(0.3, 0.0);
        let x = random_matrix(4, 3, 1);
        let bank = PrototypeBank::new(vec![random_matrix(4, 3, 2)]).unwrap();
        let sup = loss_sup(&x, 0, &bank, &a, &l).unwrap();
        let st = crate::alignment::sim_t(&x, bank.get(0), &a).unwrap();
        assert!((sup - (-0.3 * st)).abs() < 1e-12);
    }

    #[test]
    fn alpha_zero_is_plain_cross_entropy() {
        let (a, l) = cfgs(0.0, 0.0);
        let x = random_matrix(3, 4, 5);
        let bank = PrototypeBank::random(3, 3, 4, 9).unwrap();
        let logits: Vec<f64> = bank
            .prototypes()
            .iter()
            .map(|w| crate::alignment::sim_a(&x, w, &a).unwrap())
            .collect();
        let p = linalg::softmax_row(&logits).unwrap();
        let sup = loss_sup(&x, 2, &bank, &a, &l).unwrap();
        assert!((sup + p[2].ln()).abs() < 1e-12);
    }

    #[test]
    fn info_bounds_and_closed_form() {
        // identical rows in the prototype make D rows constant: uniform D~
        let x = random_matrix(4, 3, 3);
        let w = Matrix::from_fn(4, 3, |_, j| [1.0, 2.0, -0.5][j]);
        let bank = PrototypeBank::new(vec![w]).unwrap();
        let h = loss_info(&x, 0, &bank).unwrap();
        assert!((h - 4f64.ln()).abs() < 1e-12);

        // D rows [ln 3, 0] -> D~ rows [0.75, 0.25]
        let d = Matrix::from_fn(2, 2, |i, j| if i == j { 3f64.ln() } else { 0.0 });
        let h = entropy_from_similarity(&d);
        let expect = -(0.75f64 * 0.75f64.ln() + 0.25 * 0.25f64.ln());
        assert!((h - expect).abs() < 1e-12);
        assert!((h - 0.5623).abs() < 1e-4);
    }

    #[test]
    fn batch_errors() {
        let (a, l) = cfgs(0.0, 0.0);
        let bank = PrototypeBank::random(2, 2, 2, 0).unwrap();
        assert!(matches!(
            total_loss_batch(&[], &bank, &a, &l),
            Err(Error::EmptyBatch)
        ));
        let x = random_matrix(2, 2, 1);
        assert!(matches!(
            total_loss_batch(&[(&x, 2)], &bank, &a, &l),
            Err(Error::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn zero_gradient_for_constant_loss() {
        let (a, l) = cfgs(0.0, 0.0);
        let x = random_matrix(3, 2, 4);
        let bank = PrototypeBank::random(1, 3, 2, 8).unwrap();
        let g = grad_prototypes(&[(&x, 0)], &bank, &a, &l).unwrap();
        assert!(g[0].as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_label_prototypes_only_get_cross_entropy_gradient() {
        let a = AlignmentConfig::default();
        let x = random_matrix(3, 4, 11);
        let bank = PrototypeBank::random(3, 3, 4, 12).unwrap();
        let with = grad_prototypes(
            &[(&x, 0)],
            &bank,
            &a,
            &LossConfig {
                alpha: 0.7,
                nu: 0.4,
                ..LossConfig::default()
            },
        )
        .unwrap();
        let without = grad_prototypes(
            &[(&x, 0)],
            &bank,
            &a,
            &LossConfig {
                alpha: 0.0,
                nu: 0.0,
                ..LossConfig::default()
            },
        )
        .unwrap();
        assert_eq!(with[1], without[1]);
        assert_eq!(with[2], without[2]);
        assert!(with[0].max_abs_diff(&without[0]) > 1e-6);
        assert!(with[1].as_slice().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn rejitter_repairs_collapsed_rows() {
        let mut bank = PrototypeBank::new(vec![Matrix::zeros(2, 3)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(bank.rejitter(&mut rng), 2);
        assert!(bank.get(0).row_iter().all(|r| linalg::norm(r) > NORM_FLOOR));
    }
}
