//! Hand-written reference computations checked against the library.

use ata_core::classifier::{init_prototypes, predict, refine_inductive_with_history};
use ata_core::losses::{loss_info, loss_sup, total_loss_batch, train_prototypes_with_history};
use ata_core::{
    AlignmentConfig, Episode, FeatureSequence, InferenceConfig, LossConfig, Matrix, PrototypeBank,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn m(rows: &[&[f64]]) -> Matrix {
    Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn sim(x: &Matrix, y: &Matrix) -> Vec<Vec<f64>> {
    (0..x.rows())
        .map(|i| (0..y.rows()).map(|j| cos(x.row(i), y.row(j))).collect())
        .collect()
}

/// Naive appearance score: no max shift.
fn naive_sim_a(x: &Matrix, y: &Matrix, lambda: f64) -> f64 {
    sim(x, y)
        .iter()
        .map(|r| lambda * r.iter().map(|d| (d / lambda).exp()).sum::<f64>().ln())
        .sum()
}

/// Naive temporal score with the prior written out directly.
fn naive_sim_t(x: &Matrix, y: &Matrix, sigma: f64) -> f64 {
    let d = sim(x, y);
    let n = d.len();
    let mut total = 0.0;
    for (i, row) in d.iter().enumerate() {
        let t: Vec<f64> = (0..n)
            .map(|j| {
                let dist = (i as f64 - j as f64).abs();
                (-(dist * dist / 2.0) / (2.0 * sigma * sigma)).exp()
                    / (sigma * (2.0 * std::f64::consts::PI).sqrt())
            })
            .collect();
        let tsum: f64 = t.iter().sum();
        let esum: f64 = row.iter().map(|v| v.exp()).sum();
        for j in 0..n {
            let p = row[j].exp() / esum;
            total += p * (p / (t[j] / tsum)).ln();
        }
    }
    -total / n as f64
}

fn random(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

#[test]
fn loss_sup_matches_straight_line_formula() {
    let x = m(&[&[1.0, 0.2], &[0.3, -1.0]]);
    let bank = PrototypeBank::new(vec![
        m(&[&[1.0, 0.0], &[0.0, -1.0]]),
        m(&[&[0.0, -1.0], &[1.0, 0.0]]),
        m(&[&[-0.5, 0.5], &[0.7, 0.7]]),
    ])
    .unwrap();
    let acfg = AlignmentConfig::default();
    let lcfg = LossConfig {
        alpha: 0.05,
        ..LossConfig::default()
    };
    for label in 0..3 {
        let logits: Vec<f64> = bank
            .prototypes()
            .iter()
            .map(|w| naive_sim_a(&x, w, 0.1))
            .collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        let ce = -(logits[label].exp() / z).ln();
        let expected = ce - 0.05 * naive_sim_t(&x, bank.get(label), 1.0);
        let got = loss_sup(&x, label, &bank, &acfg, &lcfg).unwrap();
        assert!(
            (got - expected).abs() < 1e-10,
            "label {label}: {got} vs {expected}"
        );
    }
}

#[test]
fn loss_info_is_mean_row_entropy() {
    let x = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
    let bank = PrototypeBank::new(vec![m(&[&[1.0, 0.0], &[0.0, 1.0]])]).unwrap();
    let p = 1.0f64.exp() / (1.0f64.exp() + 1.0);
    let h = -(p * p.ln() + (1.0 - p) * (1.0 - p).ln());
    assert!((loss_info(&x, 0, &bank).unwrap() - h).abs() < 1e-12);
}

#[test]
fn predict_matches_two_class_mixture() {
    let x = m(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]]);
    let bank = PrototypeBank::new(vec![
        m(&[&[1.0, 0.1, 0.0], &[0.0, 1.0, 0.2]]),
        m(&[&[0.0, 1.0, 0.2], &[1.0, 0.1, 0.0]]),
    ])
    .unwrap();
    let acfg = AlignmentConfig::default();
    let beta = 0.3;
    let a: Vec<f64> = bank
        .prototypes()
        .iter()
        .map(|w| naive_sim_a(&x, w, 0.1))
        .collect();
    let t: Vec<f64> = bank
        .prototypes()
        .iter()
        .map(|w| naive_sim_t(&x, w, 1.0))
        .collect();
    let pa0 = 1.0 / (1.0 + (a[1] - a[0]).exp());
    let pt0 = 1.0 / (1.0 + (t[1] - t[0]).exp());
    let expected = [
        (1.0 - beta) * pa0 + beta * pt0,
        (1.0 - beta) * (1.0 - pa0) + beta * (1.0 - pt0),
    ];
    let got = predict(&x, &bank, beta, &acfg).unwrap();
    for (g, e) in got.iter().zip(expected) {
        assert!((g - e).abs() < 1e-12);
    }
    assert!(got[0] > got[1]);
}

#[test]
fn batch_loss_is_mean_of_sample_losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let bank = PrototypeBank::random(4, 3, 5, 1).unwrap();
    let xs: Vec<Matrix> = (0..6).map(|_| random(3, 5, &mut rng)).collect();
    let batch: Vec<(&Matrix, usize)> = xs.iter().enumerate().map(|(i, x)| (x, i % 4)).collect();
    let acfg = AlignmentConfig::default();
    let lcfg = LossConfig {
        alpha: 0.2,
        nu: 0.3,
        ..LossConfig::default()
    };
    let mean: f64 = batch
        .iter()
        .map(|&(x, y)| {
            loss_sup(x, y, &bank, &acfg, &lcfg).unwrap() + 0.3 * loss_info(x, y, &bank).unwrap()
        })
        .sum::<f64>()
        / 6.0;
    let total = total_loss_batch(&batch, &bank, &acfg, &lcfg).unwrap().total;
    assert!((total - mean).abs() < 1e-10);
}

fn episode(k: usize, n: usize, rng: &mut impl Rng) -> Episode {
    let support = (0..n * k)
        .map(|i| {
            let s = FeatureSequence::new(format!("s{i}"), None, random(3, 4, rng)).unwrap();
            (s, i / k)
        })
        .collect();
    Episode {
        n_way: n,
        k_shot: k,
        support,
        query: Vec::new(),
        query_labels: Vec::new(),
        classes: (0..n).collect(),
    }
}

#[test]
fn five_shot_prototypes_are_support_means() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let ep = episode(5, 3, &mut rng);
    let bank = init_prototypes(&ep).unwrap();
    for class in 0..3 {
        let mut mean = Matrix::zeros(3, 4);
        for (s, _) in ep.support.iter().filter(|(_, y)| *y == class) {
            mean.add_scaled(s.features(), 0.2);
        }
        assert!(mean.max_abs_diff(bank.get(class)) < 1e-12);
    }
}

#[test]
fn inductive_loss_strictly_decreases() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let ep = episode(1, 2, &mut rng);
    let start = PrototypeBank::random(2, 3, 4, 2).unwrap();
    let icfg = InferenceConfig {
        inductive_steps: 20,
        inductive_lr: 0.05,
        ..InferenceConfig::default()
    };
    let out =
        refine_inductive_with_history(&start, &ep, &icfg, &AlignmentConfig::default()).unwrap();
    assert!(out.loss_history.len() > 1);
    assert!(
        out.loss_history.windows(2).all(|w| w[1] < w[0]),
        "{:?}",
        out.loss_history
    );
}

#[test]
fn training_is_deterministic_and_zero_epochs_keep_the_initial_bank() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let xs: Vec<Matrix> = (0..12).map(|_| random(3, 4, &mut rng)).collect();
    let samples: Vec<(&Matrix, usize)> = xs.iter().enumerate().map(|(i, x)| (x, i % 3)).collect();
    let acfg = AlignmentConfig::default();
    let lcfg = LossConfig {
        epochs: 15,
        batch_size: 5,
        seed: 11,
        ..LossConfig::default()
    };
    let a = train_prototypes_with_history(&samples, 3, &lcfg, &acfg).unwrap();
    let b = train_prototypes_with_history(&samples, 3, &lcfg, &acfg).unwrap();
    assert_eq!(a, b);

    let zero = LossConfig { epochs: 0, ..lcfg };
    let z = train_prototypes_with_history(&samples, 3, &zero, &acfg).unwrap();
    assert_eq!(z.loss_history.len(), 1);
    assert_eq!(z.rejected_epochs, 0);
    assert_ne!(z.bank, a.bank);
    assert_eq!(z.loss_history[0], a.loss_history[0]);
}
