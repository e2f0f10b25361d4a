//! Appearance and temporal alignment scores between two frame sequences.
//!
//! Every score starts from the frame-by-frame cosine similarity matrix `D`.
//! The appearance score smooths the per-row maximum of `D` with a
//! log-sum-exp; the temporal score is the negative KL divergence between the
//! row-softmax of `D` and a row-normalised Gaussian band around the diagonal.
//! Two aggregation baselines (hard max, entropic optimal transport) are kept
//! alongside for comparison.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, NORM_FLOOR};

/// One video: `M` frames of `C`-dimensional features, frames as rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSequence {
    pub id: String,
    pub label: Option<usize>,
    features: Matrix,
}

impl FeatureSequence {
    pub fn new(id: impl Into<String>, label: Option<usize>, features: Matrix) -> Result<Self> {
        check_row_norms(&features)?;
        Ok(Self {
            id: id.into(),
            label,
            features,
        })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn frames(&self) -> usize {
        self.features.rows()
    }

    pub fn channels(&self) -> usize {
        self.features.cols()
    }

    /// Same frames in reverse temporal order.
    pub fn reversed(&self) -> Self {
        Self {
            id: format!("{}~rev", self.id),
            label: self.label,
            features: self.features.reversed_rows(),
        }
    }
}

pub(crate) fn check_row_norms(m: &Matrix) -> Result<()> {
    for row in m.row_iter() {
        let n = linalg::norm(row);
        if !(n > NORM_FLOOR) {
            return Err(Error::ZeroNormVector { norm: n });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignmentConfig {
    /// Log-sum-exp temperature of the appearance score.
    pub lambda: f64,
    /// Standard deviation of the diagonal prior.
    pub sigma: f64,
    pub sinkhorn_iters: usize,
    /// Entropic regularisation strength of the OT baseline.
    pub sinkhorn_eps: f64,
    /// L1 marginal tolerance of the OT baseline.
    pub sinkhorn_tol: f64,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            sigma: 1.0,
            sinkhorn_iters: 100,
            sinkhorn_eps: 0.05,
            sinkhorn_tol: 1e-6,
        }
    }
}

impl AlignmentConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lambda", self.lambda),
            ("sigma", self.sigma),
            ("sinkhorn_eps", self.sinkhorn_eps),
            ("sinkhorn_tol", self.sinkhorn_tol),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        if self.sinkhorn_iters == 0 {
            return Err(Error::InvalidConfig(
                "sinkhorn_iters must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// The `D`, `D~`, `T`, `T~` quadruple for one sequence pair.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentMatrices {
    pub d: Matrix,
    pub d_tilde: Matrix,
    pub t: Matrix,
    pub t_tilde: Matrix,
}

/// Unit-normalised copy of every row, plus the original norms.
pub(crate) fn normalize_rows(m: &Matrix) -> Result<(Matrix, Vec<f64>)> {
    let mut out = m.clone();
    let mut norms = Vec::with_capacity(m.rows());
    for i in 0..m.rows() {
        let row = out.row_mut(i);
        let n = linalg::norm(row);
        if !(n >= NORM_FLOOR) {
            return Err(Error::ZeroNormVector { norm: n });
        }
        row.iter_mut().for_each(|v| *v /= n);
        norms.push(n);
    }
    Ok((out, norms))
}

fn check_pair(x: &Matrix, y: &Matrix) -> Result<()> {
    if x.cols() != y.cols() || x.rows() != y.rows() {
        return Err(Error::DimensionMismatch(format!(
            "sequence shapes {:?} and {:?}",
            x.shape(),
            y.shape()
        )));
    }
    if x.rows() == 0 {
        return Err(Error::EmptyVector);
    }
    Ok(())
}

/// Cosine of every frame of `x` against every frame of `y`.
pub fn similarity_matrix(x: &Matrix, y: &Matrix) -> Result<Matrix> {
    check_pair(x, y)?;
    let (xn, _) = normalize_rows(x)?;
    let (yn, _) = normalize_rows(y)?;
    Ok(similarity_of_unit_rows(&xn, &yn))
}

pub(crate) fn similarity_of_unit_rows(xn: &Matrix, yn: &Matrix) -> Matrix {
    Matrix::from_fn(xn.rows(), yn.rows(), |i, j| {
        linalg::dot(xn.row(i), yn.row(j)).clamp(-1.0, 1.0)
    })
}

/// Sum over rows of the log-sum-exp of `D`.
pub fn appearance_from_similarity(d: &Matrix, lambda: f64) -> f64 {
    d.row_iter().map(|r| linalg::lse_unchecked(r, lambda)).sum()
}

pub fn max_from_similarity(d: &Matrix) -> f64 {
    d.row_iter()
        .map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .sum()
}

/// Appearance score. Not symmetric in its arguments.
pub fn sim_a(x: &Matrix, y: &Matrix, cfg: &AlignmentConfig) -> Result<f64> {
    if !(cfg.lambda > 0.0) {
        return Err(Error::InvalidConfig("lambda must be positive".into()));
    }
    let d = similarity_matrix(x, y)?;
    Ok(appearance_from_similarity(&d, cfg.lambda))
}

/// Hard-max aggregation baseline.
pub fn sim_max(x: &Matrix, y: &Matrix) -> Result<f64> {
    let d = similarity_matrix(x, y)?;
    Ok(max_from_similarity(&d))
}

/// Gaussian band around the diagonal; `T(i, j)` depends only on `|i - j|`.
pub fn temporal_prior(m: usize, sigma: f64) -> Result<Matrix> {
    if m == 0 {
        return Err(Error::EmptyVector);
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "sigma must be positive, got {sigma}"
        )));
    }
    let peak = 1.0 / (sigma * (2.0 * std::f64::consts::PI).sqrt());
    Ok(Matrix::from_fn(m, m, |i, j| {
        // squared distance to the diagonal: (|i-j| / sqrt 2)^2
        let l2 = (i.abs_diff(j) as f64).powi(2) / 2.0;
        peak * (-l2 / (2.0 * sigma * sigma)).exp()
    }))
}

/// Row-softmax of `d` and row-sum normalisation of `t`.
pub fn normalize_pair(d: &Matrix, t: &Matrix) -> Result<(Matrix, Matrix)> {
    if d.shape() != t.shape() {
        return Err(Error::DimensionMismatch(format!(
            "D is {:?}, T is {:?}",
            d.shape(),
            t.shape()
        )));
    }
    if t.as_slice().iter().any(|&v| !(v > 0.0)) {
        return Err(Error::InvalidConfig(
            "prior must be strictly positive".into(),
        ));
    }
    let mut d_tilde = d.clone();
    for i in 0..d.rows() {
        linalg::softmax_in_place(d_tilde.row_mut(i));
    }
    let mut t_tilde = t.clone();
    for i in 0..t.rows() {
        let row = t_tilde.row_mut(i);
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    Ok((d_tilde, t_tilde))
}

pub fn alignment_matrices(
    x: &Matrix,
    y: &Matrix,
    cfg: &AlignmentConfig,
) -> Result<AlignmentMatrices> {
    let d = similarity_matrix(x, y)?;
    let t = temporal_prior(x.rows(), cfg.sigma)?;
    let (d_tilde, t_tilde) = normalize_pair(&d, &t)?;
    Ok(AlignmentMatrices {
        d,
        d_tilde,
        t,
        t_tilde,
    })
}

/// Negative KL divergence from the row-softmax of `d` to `t_tilde`, averaged
/// over rows. Always `<= 0`.
pub fn temporal_from_similarity(d: &Matrix, log_t_tilde: &Matrix) -> f64 {
    let m = d.rows();
    let mut buf = vec![0.0; d.cols()];
    let mut kl = 0.0;
    for i in 0..m {
        buf.copy_from_slice(d.row(i));
        linalg::log_softmax_in_place(&mut buf);
        kl += buf
            .iter()
            .zip(log_t_tilde.row(i))
            .map(|(&lp, &lq)| lp.exp() * (lp - lq))
            .sum::<f64>();
    }
    // KL is non-negative; clip the round-off that can push it a hair below 0
    -(kl / m as f64).max(0.0)
}

/// Temporal score.
pub fn sim_t(x: &Matrix, y: &Matrix, cfg: &AlignmentConfig) -> Result<f64> {
    let d = similarity_matrix(x, y)?;
    let prior = TemporalPrior::new(x.rows(), cfg.sigma)?;
    Ok(temporal_from_similarity(&d, &prior.log_t_tilde))
}

/// `T~` and its logarithm for one `(M, sigma)`, computed once and shared.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalPrior {
    pub t: Matrix,
    pub t_tilde: Matrix,
    pub log_t_tilde: Matrix,
}

impl TemporalPrior {
    pub fn new(m: usize, sigma: f64) -> Result<Self> {
        let t = temporal_prior(m, sigma)?;
        let mut t_tilde = t.clone();
        for i in 0..m {
            let row = t_tilde.row_mut(i);
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        let log_t_tilde = Matrix::from_fn(m, m, |i, j| t_tilde.get(i, j).ln());
        Ok(Self {
            t,
            t_tilde,
            log_t_tilde,
        })
    }

    pub fn frames(&self) -> usize {
        self.t.rows()
    }
}

/// Scores one sequence against many candidates with a cached prior.
#[derive(Debug, Clone)]
pub struct Aligner {
    pub cfg: AlignmentConfig,
    prior: TemporalPrior,
}

/// Appearance and temporal score of one pair, computed from a shared `D`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairScores {
    pub appearance: f64,
    pub temporal: f64,
}

impl Aligner {
    pub fn new(cfg: AlignmentConfig, frames: usize) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            prior: TemporalPrior::new(frames, cfg.sigma)?,
        })
    }

    pub fn prior(&self) -> &TemporalPrior {
        &self.prior
    }

    pub fn frames(&self) -> usize {
        self.prior.frames()
    }

    fn check_frames(&self, x: &Matrix) -> Result<()> {
        if x.rows() != self.frames() {
            return Err(Error::DimensionMismatch(format!(
                "aligner built for {} frames, got {}",
                self.frames(),
                x.rows()
            )));
        }
        Ok(())
    }

    pub fn sim_a(&self, x: &Matrix, y: &Matrix) -> Result<f64> {
        let d = similarity_matrix(x, y)?;
        Ok(appearance_from_similarity(&d, self.cfg.lambda))
    }

    pub fn sim_t(&self, x: &Matrix, y: &Matrix) -> Result<f64> {
        self.check_frames(x)?;
        let d = similarity_matrix(x, y)?;
        Ok(temporal_from_similarity(&d, &self.prior.log_t_tilde))
    }

    pub fn scores(&self, x: &Matrix, y: &Matrix) -> Result<PairScores> {
        self.check_frames(x)?;
        let d = similarity_matrix(x, y)?;
        Ok(PairScores {
            appearance: appearance_from_similarity(&d, self.cfg.lambda),
            temporal: temporal_from_similarity(&d, &self.prior.log_t_tilde),
        })
    }
}

/// Entropic OT plan between uniform marginals and its similarity `<P, D>`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub plan: Matrix,
    pub score: f64,
    pub iterations: usize,
    /// L1 deviation of the row marginals after each iteration (columns are
    /// exact after every column update).
    pub residuals: Vec<f64>,
}

impl TransportPlan {
    pub fn residual(&self) -> f64 {
        self.residuals.last().copied().unwrap_or(f64::INFINITY)
    }
}

/// Runs log-domain Sinkhorn on cost `-d` with uniform marginals. Returns the
/// plan whether or not the tolerance was reached.
pub fn sinkhorn_plan(d: &Matrix, cfg: &AlignmentConfig) -> Result<TransportPlan> {
    cfg.validate()?;
    let (n, m) = d.shape();
    if n == 0 || m == 0 {
        return Err(Error::EmptyVector);
    }
    let eps = cfg.sinkhorn_eps;
    let log_a = -(n as f64).ln();
    let log_b = -(m as f64).ln();
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let mut buf = vec![0.0; n.max(m)];
    let mut residuals = Vec::new();
    let mut iterations = 0;

    while iterations < cfg.sinkhorn_iters {
        iterations += 1;
        for (i, fi) in f.iter_mut().enumerate() {
            for (j, (b, gj)) in buf.iter_mut().zip(&g).enumerate() {
                *b = (d.get(i, j) + gj) / eps;
            }
            *fi = eps * (log_a - linalg::lse_unchecked(&buf[..m], 1.0));
        }
        for (j, gj) in g.iter_mut().enumerate() {
            for (i, (b, fi)) in buf.iter_mut().zip(&f).enumerate() {
                *b = (d.get(i, j) + fi) / eps;
            }
            *gj = eps * (log_b - linalg::lse_unchecked(&buf[..n], 1.0));
        }
        let target = 1.0 / n as f64;
        let residual: f64 = (0..n)
            .map(|i| {
                let row: f64 = (0..m)
                    .map(|j| ((f[i] + g[j] + d.get(i, j)) / eps).exp())
                    .sum();
                (row - target).abs()
            })
            .sum();
        residuals.push(residual);
        if residual < cfg.sinkhorn_tol {
            break;
        }
    }

    let plan = Matrix::from_fn(n, m, |i, j| ((f[i] + g[j] + d.get(i, j)) / eps).exp());
    let score = plan
        .as_slice()
        .iter()
        .zip(d.as_slice())
        .map(|(p, s)| p * s)
        .sum();
    Ok(TransportPlan {
        plan,
        score,
        iterations,
        residuals,
    })
}

/// Like [`sinkhorn_plan`], but an unmet tolerance is an error.
pub fn sinkhorn(d: &Matrix, cfg: &AlignmentConfig) -> Result<TransportPlan> {
    let plan = sinkhorn_plan(d, cfg)?;
    if plan.residual() < cfg.sinkhorn_tol {
        Ok(plan)
    } else {
        Err(Error::SinkhornNotConverged {
            residual: plan.residual(),
            iterations: plan.iterations,
            score: plan.score,
        })
    }
}

/// Optimal-transport aggregation baseline: total similarity under the
/// equal-partition plan.
pub fn sim_ot(x: &Matrix, y: &Matrix, cfg: &AlignmentConfig) -> Result<f64> {
    let d = similarity_matrix(x, y)?;
    sinkhorn(&d, cfg).map(|p| p.score)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn orthonormal(m: usize) -> Matrix {
        Matrix::identity(m)
    }

    #[test]
    fn identity_and_reversal() {
        let x = orthonormal(4);
        let d = similarity_matrix(&x, &x).unwrap();
        assert_eq!(d, Matrix::identity(4));
        let d = similarity_matrix(&x, &x.reversed_rows()).unwrap();
        let anti = Matrix::from_fn(4, 4, |i, j| if i + j == 3 { 1.0 } else { 0.0 });
        assert_eq!(d, anti);
    }

    #[test]
    fn dimension_mismatch() {
        let x = Matrix::identity(3);
        let y = Matrix::from_fn(3, 4, |i, j| (i + j + 1) as f64);
        assert!(matches!(
            similarity_matrix(&x, &y),
            Err(Error::DimensionMismatch(_))
        ));
        let z = Matrix::from_fn(3, 3, |i, _| if i == 1 { 0.0 } else { 1.0 });
        assert!(matches!(
            similarity_matrix(&x, &z),
            Err(Error::ZeroNormVector { .. })
        ));
    }

    #[test]
    fn sim_a_closed_forms() {
        let cfg = AlignmentConfig::default();
        let x = orthonormal(8);
        let v = sim_a(&x, &x, &cfg).unwrap();
        let expect = 8.0 * 0.1 * ((10f64).exp() + 7.0).ln();
        assert!((v - expect).abs() < 1e-12);
        assert!((v - 8.000_254_2).abs() < 1e-5, "{v}");

        let x = orthonormal(2);
        let v = sim_a(&x, &x, &cfg).unwrap();
        // 2 * 0.1 * ln(e^10 + 1)
        assert!((v - 2.000_009_080).abs() < 1e-6, "{v}");
        assert_eq!(sim_max(&orthonormal(8), &orthonormal(8)).unwrap(), 8.0);
    }

    #[test]
    fn prior_values() {
        let t = temporal_prior(4, 1.0).unwrap();
        for i in 0..4 {
            assert!((t.get(i, i) - 0.398_942_280).abs() < 1e-8);
        }
        assert!((t.get(1, 2) - 0.310_696_560).abs() < 1e-8);
        assert!((t.get(2, 1) - 0.310_696_560).abs() < 1e-8);
        let one = temporal_prior(1, 1.0).unwrap();
        assert!((one.get(0, 0) - 0.398_942_280).abs() < 1e-8);
        assert!(temporal_prior(3, 0.0).is_err());
    }

    #[test]
    fn normalize_pair_examples() {
        let (dt, _) =
            normalize_pair(&Matrix::zeros(2, 2), &temporal_prior(2, 1.0).unwrap()).unwrap();
        assert_eq!(dt.as_slice(), &[0.5; 4]);
        let (_, tt) =
            normalize_pair(&Matrix::zeros(2, 2), &temporal_prior(2, 1.0).unwrap()).unwrap();
        // 0.39894 / (0.39894 + 0.31069)
        assert!((tt.get(0, 0) - 0.562).abs() < 1e-3);
        assert!((tt.get(0, 1) - 0.438).abs() < 1e-3);
        assert!((tt.get(1, 0) - 0.438).abs() < 1e-3);
        assert!((tt.get(1, 1) - 0.562).abs() < 1e-3);
    }

    #[test]
    fn temporal_zero_when_softmax_matches_prior() {
        let prior = TemporalPrior::new(6, 1.0).unwrap();
        let d = prior.log_t_tilde.clone();
        let s = temporal_from_similarity(&d, &prior.log_t_tilde);
        assert!(s.abs() < 1e-9, "{s}");
    }

    #[test]
    fn temporal_prefers_forward_order() {
        let cfg = AlignmentConfig::default();
        let x = orthonormal(8);
        let fwd = sim_t(&x, &x, &cfg).unwrap();
        let rev = sim_t(&x, &x.reversed_rows(), &cfg).unwrap();
        assert!(fwd <= 0.0 && rev <= 0.0);
        assert!(fwd > rev, "{fwd} vs {rev}");
    }

    #[test]
    fn sinkhorn_constant_similarity() {
        let d = Matrix::from_fn(3, 3, |_, _| 0.4);
        let p = sinkhorn(&d, &AlignmentConfig::default()).unwrap();
        assert!((p.score - 0.4).abs() < 1e-9);
    }

    #[test]
    fn sinkhorn_identity_small_eps() {
        let cfg = AlignmentConfig {
            sinkhorn_eps: 0.01,
            ..Default::default()
        };
        let p = sinkhorn(&Matrix::identity(2), &cfg).unwrap();
        assert!((p.plan.get(0, 0) - 0.5).abs() < 1e-6);
        assert!(p.plan.get(0, 1) < 1e-6);
        assert!((p.score - 1.0).abs() < 1e-5);
    }

    #[test]
    fn sinkhorn_reports_non_convergence() {
        let cfg = AlignmentConfig {
            sinkhorn_iters: 1,
            sinkhorn_tol: 1e-15,
            sinkhorn_eps: 0.01,
            ..Default::default()
        };
        let d = Matrix::from_fn(3, 3, |i, j| ((i * 3 + j) as f64 * 0.37).sin());
        match sinkhorn(&d, &cfg) {
            Err(Error::SinkhornNotConverged {
                residual,
                iterations,
                ..
            }) => {
                assert!(residual > 0.0);
                assert_eq!(iterations, 1);
            }
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }
}
