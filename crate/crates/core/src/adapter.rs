//! Rank-tied variational low-rank adapter.
//!
//! The posterior over the factors of `ΔW = (λ / r_init) · B · A` is
//!
//! ```text
//! A_ij ~ N(μA_ij, α_i · μA_ij²)      B_ki ~ N(μB_ki, α_i · μB_ki²)
//! ```
//!
//! with one noise-to-signal ratio `α_i = exp(log_alpha[i])` shared by every
//! entry of rank component `i` (row `i` of `A`, column `i` of `B`). The
//! KL surrogate then decomposes over ranks, and a rank whose `log α`
//! crosses the threshold `τ` is switched off.

use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Tape, Var};
use crate::error::{shape_err, LrvdError, Result};
use crate::numerics::{Matrix, RngState};

/// Variance floor inside the square root of the local reparameterization.
pub const LOCAL_REPARAM_EPS: f64 = 1e-8;

/// Default clamp interval for `log α`.
pub const DEFAULT_LOG_ALPHA_CLAMP: (f64, f64) = (-10.0, 8.0);

/// Default `log α` at initialization.
pub const DEFAULT_INIT_LOG_ALPHA: f64 = -8.0;

/// Default pruning / effective-rank threshold.
pub const DEFAULT_TAU: f64 = 4.0;

/// Constants of the sparse variational dropout KL approximation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KlConstants {
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
}

impl KlConstants {
    pub const MOLCHANOV: KlConstants = KlConstants {
        k1: 0.63576,
        k2: 1.87320,
        k3: 1.48695,
    };
}

/// Whether the per-rank KL is counted once or once per tied element.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlScaling {
    #[default]
    PerRank,
    /// Multiplies each rank's term by `d_in + d_out`.
    PerElement,
}

/// Negative-KL surrogate for one rank:
/// `k1·σ(k2 + k3·log α) − ½·log(1 + α⁻¹) − k1`.
///
/// Never positive, nondecreasing in `log α`, tends to 0 as `log α → ∞`.
pub fn kl_term(log_alpha: f64) -> f64 {
    let KlConstants { k1, k2, k3 } = KlConstants::MOLCHANOV;
    // log(1 + e^{-t}) evaluated stably on both tails.
    let softplus_neg = if log_alpha > 0.0 {
        (-log_alpha).exp().ln_1p()
    } else {
        -log_alpha + log_alpha.exp().ln_1p()
    };
    k1 * sigmoid(k2 + k3 * log_alpha) - 0.5 * softplus_neg - k1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RankTiedAdapter {
    /// r_init x d_in.
    #[serde(rename = "mu_A")]
    pub mu_a: Matrix,
    /// d_out x r_init.
    #[serde(rename = "mu_B")]
    pub mu_b: Matrix,
    pub log_alpha: Vec<f64>,
    pub lambda: f64,
    pub r_init: usize,
    pub active_mask: Vec<bool>,
}

impl RankTiedAdapter {
    /// Standard LoRA initialization: `μA ~ N(0, 1/d_in)`, `μB = 0`, so the
    /// update starts at zero.
    pub fn init(
        d_in: usize,
        d_out: usize,
        r_init: usize,
        lambda: f64,
        init_log_alpha: f64,
        rng: &mut RngState,
    ) -> Result<Self> {
        if r_init == 0 {
            return Err(LrvdError::InvalidArgument("adapter r_init must be at least 1".into()));
        }
        let mu_a = rng.gaussian_matrix(r_init, d_in, 0.0, (1.0 / d_in as f64).sqrt())?;
        Self::from_parts(mu_a, Matrix::zeros(d_out, r_init), vec![init_log_alpha; r_init], lambda)
    }

    pub fn from_parts(mu_a: Matrix, mu_b: Matrix, log_alpha: Vec<f64>, lambda: f64) -> Result<Self> {
        let r_init = mu_a.rows();
        let adapter = Self {
            mu_a,
            mu_b,
            active_mask: vec![true; r_init],
            log_alpha,
            lambda,
            r_init,
        };
        adapter.validate()?;
        Ok(adapter)
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.r_init;
        if r == 0 || self.mu_a.rows() != r || self.mu_b.cols() != r {
            return shape_err(
                "adapter",
                format!(
                    "mu_A is {}x{}, mu_B is {}x{}, r_init {r}",
                    self.mu_a.rows(),
                    self.mu_a.cols(),
                    self.mu_b.rows(),
                    self.mu_b.cols()
                ),
            );
        }
        if self.log_alpha.len() != r || self.active_mask.len() != r {
            return shape_err(
                "adapter",
                format!(
                    "log_alpha has {} entries and active_mask {}, expected {r}",
                    self.log_alpha.len(),
                    self.active_mask.len()
                ),
            );
        }
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return Err(LrvdError::InvalidArgument(format!(
                "adapter lambda must be positive, got {}",
                self.lambda
            )));
        }
        if self.log_alpha.iter().any(|v| !v.is_finite()) {
            return Err(LrvdError::InvalidArgument("log_alpha has non-finite entries".into()));
        }
        Ok(())
    }

    pub fn d_in(&self) -> usize {
        self.mu_a.cols()
    }

    pub fn d_out(&self) -> usize {
        self.mu_b.rows()
    }

    /// `λ / r_init`; fixed for the life of the adapter, pruning included.
    pub fn scale(&self) -> f64 {
        self.lambda / self.r_init as f64
    }

    pub fn alpha(&self) -> Vec<f64> {
        self.log_alpha.iter().map(|t| t.exp()).collect()
    }

    pub fn mask_values(&self) -> Vec<f64> {
        self.active_mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect()
    }

    pub fn active_ranks(&self) -> Vec<usize> {
        (0..self.r_init).filter(|&i| self.active_mask[i]).collect()
    }

    pub fn n_active(&self) -> usize {
        self.active_mask.iter().filter(|&&m| m).count()
    }

    /// Trainable parameter count: both factors plus one `log α` per rank.
    pub fn parameter_count(&self) -> usize {
        self.r_init * (self.d_in() + self.d_out()) + self.r_init
    }

    pub fn clamp_log_alpha(&mut self, lo: f64, hi: f64) {
        for t in &mut self.log_alpha {
            *t = t.clamp(lo, hi);
        }
    }

    /// Posterior-mean update `(λ/r_init) · μB · diag(mask) · μA` (d_out x d_in).
    pub fn delta_w(&self) -> Matrix {
        self.mu_b
            .scale_cols(&self.mask_values())
            .and_then(|b| b.matmul(&self.mu_a))
            .expect("adapter factors are conformable")
            .scale(self.scale())
    }

    /// Rank component `i` of the mean update: `(λ/r_init) · μB[:, i] · μA[i, :]`.
    pub fn component(&self, i: usize) -> Matrix {
        let s = self.scale();
        Matrix::from_fn(self.d_out(), self.d_in(), |k, j| s * self.mu_b[(k, i)] * self.mu_a[(i, j)])
    }

    fn check_input(&self, op: &'static str, x: &Matrix, base_out: &Matrix) -> Result<()> {
        if x.cols() != self.d_in() || base_out.shape() != (x.rows(), self.d_out()) {
            return shape_err(
                op,
                format!(
                    "x {}x{} and base_out {}x{} for adapter {}->{}",
                    x.rows(),
                    x.cols(),
                    base_out.rows(),
                    base_out.cols(),
                    self.d_in(),
                    self.d_out()
                ),
            );
        }
        Ok(())
    }

    /// Posterior-mean forward: `base_out + (λ/r_init) · x · μAᵀ · diag(mask) · μBᵀ`.
    pub fn forward_deterministic(&self, x: &Matrix, base_out: &Matrix) -> Result<Matrix> {
        self.check_input("forward_deterministic", x, base_out)?;
        let s = x.matmul_t(&self.mu_a)?.scale_cols(&self.mask_values())?;
        let y = s.matmul_t(&self.mu_b)?;
        base_out.add(&y.scale(self.scale()))
    }

    /// Unscaled output moments `(m_y, v_y)` of the adapter under the
    /// rank-tied posterior, with pruned ranks excluded.
    pub fn local_moments(&self, x: &Matrix) -> Result<(Matrix, Matrix)> {
        if x.cols() != self.d_in() {
            return shape_err(
                "local_moments",
                format!("x has {} columns, adapter d_in {}", x.cols(), self.d_in()),
            );
        }
        let mask = self.mask_values();
        let alpha = self.alpha();
        let masked_alpha: Vec<f64> = alpha.iter().zip(&mask).map(|(a, m)| a * m).collect();
        let m_s = x.matmul_t(&self.mu_a)?.scale_cols(&mask)?;
        let x2 = x.map(|v| v * v);
        let a2 = self.mu_a.map(|v| v * v);
        let v_s = x2.matmul_t(&a2)?.scale_cols(&masked_alpha)?;
        let b2 = self.mu_b.map(|v| v * v);
        let m_y = m_s.matmul_t(&self.mu_b)?;
        let inner = v_s.add(&m_s.map(|v| v * v).scale_cols(&alpha)?)?;
        let v_y = inner.matmul_t(&b2)?;
        Ok((m_y, v_y))
    }

    /// The term the local approximation drops relative to direct factor
    /// sampling: `v_s · (α ⊙ μB²)ᵀ`, unscaled.
    pub fn dropped_cross_term(&self, x: &Matrix) -> Result<Matrix> {
        let mask = self.mask_values();
        let alpha = self.alpha();
        let masked_alpha: Vec<f64> = alpha.iter().zip(&mask).map(|(a, m)| a * m).collect();
        let v_s = x
            .map(|v| v * v)
            .matmul_t(&self.mu_a.map(|v| v * v))?
            .scale_cols(&masked_alpha)?;
        v_s.scale_cols(&alpha)?.matmul_t(&self.mu_b.map(|v| v * v))
    }

    /// Local reparameterization: samples the adapter output in activation
    /// space, `base_out + (λ/r_init) · (m_y + ε ⊙ √(v_y + 1e-8))`.
    pub fn forward_local_reparam(&self, x: &Matrix, rng: &mut RngState, base_out: &Matrix) -> Result<Matrix> {
        self.check_input("forward_local_reparam", x, base_out)?;
        let eps = rng.gaussian_matrix(x.rows(), self.d_out(), 0.0, 1.0)?;
        self.forward_local_reparam_with_noise(x, &eps, base_out)
    }

    pub fn forward_local_reparam_with_noise(&self, x: &Matrix, eps: &Matrix, base_out: &Matrix) -> Result<Matrix> {
        self.check_input("forward_local_reparam", x, base_out)?;
        if eps.shape() != base_out.shape() {
            return shape_err("forward_local_reparam", "noise shape differs from output shape");
        }
        let (m_y, v_y) = self.local_moments(x)?;
        let s = self.scale();
        Ok(Matrix::from_fn(base_out.rows(), base_out.cols(), |i, j| {
            base_out[(i, j)] + s * (m_y[(i, j)] + eps[(i, j)] * (v_y[(i, j)] + LOCAL_REPARAM_EPS).sqrt())
        }))
    }

    /// Draws `(Ã, B̃)` from the posterior. Pruned ranks keep their means;
    /// they are masked out downstream.
    pub fn sample_factors(&self, rng: &mut RngState) -> (Matrix, Matrix) {
        let sd: Vec<f64> = self.log_alpha.iter().map(|t| (0.5 * t).exp()).collect();
        let a = Matrix::from_fn(self.r_init, self.d_in(), |i, j| {
            let mu = self.mu_a[(i, j)];
            mu + sd[i] * mu.abs() * rng.normal()
        });
        let b = Matrix::from_fn(self.d_out(), self.r_init, |k, i| {
            let mu = self.mu_b[(k, i)];
            mu + sd[i] * mu.abs() * rng.normal()
        });
        (a, b)
    }

    /// Direct factor sampling: `base_out + (λ/r_init) · x · Ãᵀ · diag(mask) · B̃ᵀ`.
    pub fn forward_direct_sample(&self, x: &Matrix, rng: &mut RngState, base_out: &Matrix) -> Result<Matrix> {
        self.check_input("forward_direct_sample", x, base_out)?;
        let (a, b) = self.sample_factors(rng);
        let s = x.matmul_t(&a)?.scale_cols(&self.mask_values())?;
        base_out.add(&s.matmul_t(&b)?.scale(self.scale()))
    }

    /// Number of active ranks with `log α < τ`.
    pub fn effective_rank(&self, tau: f64) -> usize {
        self.log_alpha
            .iter()
            .zip(&self.active_mask)
            .filter(|(&t, &m)| m && t < tau)
            .count()
    }

    /// Permanently deactivates every rank with `log α ≥ τ`. Returns the
    /// indices newly pruned.
    pub fn prune(&mut self, tau: f64) -> Vec<usize> {
        let mut newly = Vec::new();
        for i in 0..self.r_init {
            if self.active_mask[i] && self.log_alpha[i] >= tau {
                self.active_mask[i] = false;
                newly.push(i);
            }
        }
        newly
    }

    /// Rank-wise scaling gauge `μA ← S⁻¹ μA`, `μB ← μB S`.
    pub fn rescaled(&self, s: &[f64]) -> Result<Self> {
        if s.len() != self.r_init || s.iter().any(|&v| v == 0.0 || !v.is_finite()) {
            return Err(LrvdError::InvalidArgument(
                "scaling gauge needs r_init finite nonzero factors".into(),
            ));
        }
        let inv: Vec<f64> = s.iter().map(|v| 1.0 / v).collect();
        Ok(Self {
            mu_a: self.mu_a.scale_rows(&inv)?,
            mu_b: self.mu_b.scale_cols(s)?,
            ..self.clone()
        })
    }
}

/// Sum of [`kl_term`] over active ranks.
pub fn kl_sum(adapter: &RankTiedAdapter) -> f64 {
    kl_sum_scaled(adapter, KlScaling::PerRank)
}

pub fn kl_sum_scaled(adapter: &RankTiedAdapter, scaling: KlScaling) -> f64 {
    let weight = match scaling {
        KlScaling::PerRank => 1.0,
        KlScaling::PerElement => (adapter.d_in() + adapter.d_out()) as f64,
    };
    adapter
        .log_alpha
        .iter()
        .zip(&adapter.active_mask)
        .filter(|(_, &m)| m)
        .map(|(&t, _)| weight * kl_term(t))
        .sum()
}

/// An adapter's trainable parameters registered on a tape.
#[derive(Clone, Copy, Debug)]
pub struct AdapterVars {
    pub mu_a: Var,
    pub mu_b: Var,
    pub log_alpha: Var,
    mask: Var,
}

impl AdapterVars {
    pub fn register(tape: &mut Tape, adapter: &RankTiedAdapter) -> Self {
        Self {
            mu_a: tape.leaf(adapter.mu_a.clone()),
            mu_b: tape.leaf(adapter.mu_b.clone()),
            log_alpha: tape.leaf(Matrix::row_vector(&adapter.log_alpha)),
            mask: tape.leaf(Matrix::row_vector(&adapter.mask_values())),
        }
    }

    /// Taped local reparameterization with fixed noise `eps`; returns the
    /// scaled adapter contribution (without the base output).
    pub fn local_reparam(
        &self,
        tape: &mut Tape,
        x: Var,
        eps: Var,
        scale: f64,
        clamp: (f64, f64),
    ) -> Result<Var> {
        let la = tape.clamp(self.log_alpha, clamp.0, clamp.1)?;
        let alpha = tape.exp(la);
        let at = tape.transpose(self.mu_a);
        let m_s = tape.matmul(x, at)?;
        let m_s = tape.mul(m_s, self.mask)?;
        let x2 = tape.square(x);
        let a2 = tape.square(self.mu_a);
        let a2t = tape.transpose(a2);
        let v_s = tape.matmul(x2, a2t)?;
        let v_s = tape.mul(v_s, alpha)?;
        let v_s = tape.mul(v_s, self.mask)?;
        let bt = tape.transpose(self.mu_b);
        let m_y = tape.matmul(m_s, bt)?;
        let ms2 = tape.square(m_s);
        let ms2a = tape.mul(ms2, alpha)?;
        let inner = tape.add(v_s, ms2a)?;
        let b2 = tape.square(self.mu_b);
        let b2t = tape.transpose(b2);
        let v_y = tape.matmul(inner, b2t)?;
        let v_y = tape.offset(v_y, LOCAL_REPARAM_EPS);
        let sd = tape.sqrt(v_y);
        let noise = tape.mul(eps, sd)?;
        let y = tape.add(m_y, noise)?;
        Ok(tape.scale(y, scale))
    }

    /// Taped posterior-mean contribution `(λ/r_init) · x μAᵀ diag(mask) μBᵀ`.
    pub fn deterministic(&self, tape: &mut Tape, x: Var, scale: f64) -> Result<Var> {
        let at = tape.transpose(self.mu_a);
        let s = tape.matmul(x, at)?;
        let s = tape.mul(s, self.mask)?;
        let bt = tape.transpose(self.mu_b);
        let y = tape.matmul(s, bt)?;
        Ok(tape.scale(y, scale))
    }

    /// Taped `Σ_active weight · kl_term(log α_i)`.
    pub fn kl_sum(&self, tape: &mut Tape, clamp: (f64, f64), weight: f64) -> Result<Var> {
        let KlConstants { k1, k2, k3 } = KlConstants::MOLCHANOV;
        let la = tape.clamp(self.log_alpha, clamp.0, clamp.1)?;
        let z = tape.scale(la, k3);
        let z = tape.offset(z, k2);
        let sig = tape.sigmoid(z);
        let first = tape.scale(sig, k1);
        let neg = tape.scale(la, -1.0);
        let inv_alpha = tape.exp(neg);
        let one_plus = tape.offset(inv_alpha, 1.0);
        let log_term = tape.log(one_plus);
        let half = tape.scale(log_term, -0.5);
        let per_rank = tape.add(first, half)?;
        let per_rank = tape.offset(per_rank, -k1);
        let masked = tape.mul(per_rank, self.mask)?;
        let total = tape.sum(masked);
        Ok(tape.scale(total, weight))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_adapter(alpha: f64) -> RankTiedAdapter {
        RankTiedAdapter::from_parts(
            Matrix::row_vector(&[1.0, 0.0]),
            Matrix::col_vector(&[2.0]),
            vec![alpha.ln()],
            1.0,
        )
        .unwrap()
    }

    fn random_adapter(seed: u64, d_in: usize, d_out: usize, r: usize) -> RankTiedAdapter {
        let mut rng = RngState::new(seed);
        let mu_a = rng.gaussian_matrix(r, d_in, 0.0, 1.0).unwrap();
        let mu_b = rng.gaussian_matrix(d_out, r, 0.0, 1.0).unwrap();
        let la = (0..r).map(|_| -3.0 + 2.0 * rng.normal()).collect();
        RankTiedAdapter::from_parts(mu_a, mu_b, la, 8.0).unwrap()
    }

    #[test]
    fn kl_term_limits_and_values() {
        assert!(kl_term(8.0).abs() < 5e-4);
        assert!((kl_term(0.0) - -0.4312).abs() < 1e-3);
        // Closed form evaluated by hand: σ(1.8732 - 29.739) ≈ 7.9e-13, ½·ln(1+e^20) ≈ 10.
        let direct = 0.63576 * sigmoid(1.87320 - 20.0 * 1.48695) - 0.5 * (1.0 + 20f64.exp()).ln() - 0.63576;
        assert!((kl_term(-20.0) - direct).abs() < 1e-12);
        assert!((kl_term(-20.0) - -10.636).abs() < 1e-3);
    }

    #[test]
    fn kl_term_monotone_nonpositive() {
        let mut prev = f64::NEG_INFINITY;
        for k in 0..=1800 {
            let v = kl_term(-10.0 + 0.01 * k as f64);
            assert!(v >= prev && v <= 0.0);
            prev = v;
        }
    }

    #[test]
    fn kl_sum_mask_and_additivity() {
        let mut a = random_adapter(1, 4, 3, 2);
        a.log_alpha = vec![0.0, 0.0];
        assert!((kl_sum(&a) - 2.0 * kl_term(0.0)).abs() < 1e-15);
        a.active_mask = vec![false, false];
        assert_eq!(kl_sum(&a), 0.0);

        let mut b = random_adapter(2, 4, 3, 6);
        b.active_mask = vec![true, false, true, true, false, true];
        let mut expected = 0.0;
        for i in 0..6 {
            if b.active_mask[i] {
                expected += kl_term(b.log_alpha[i]);
            }
        }
        assert!((kl_sum(&b) - expected).abs() < 1e-14);
        assert!((kl_sum_scaled(&b, KlScaling::PerElement) - 7.0 * expected).abs() < 1e-12);
    }

    #[test]
    fn deterministic_single_rank() {
        let a = RankTiedAdapter::from_parts(
            Matrix::row_vector(&[2.0, 0.0]),
            Matrix::col_vector(&[1.0, 0.0]),
            vec![-8.0],
            16.0,
        )
        .unwrap();
        let out = a
            .forward_deterministic(&Matrix::row_vector(&[1.0, 0.0]), &Matrix::zeros(1, 2))
            .unwrap();
        assert_eq!(out.data(), &[32.0, 0.0]);
    }

    #[test]
    fn deterministic_matches_materialized_update() {
        let mut rng = RngState::new(9);
        let mut a = random_adapter(3, 7, 5, 4);
        a.active_mask[2] = false;
        let x = rng.gaussian_matrix(6, 7, 0.0, 1.0).unwrap();
        let base = rng.gaussian_matrix(6, 5, 0.0, 1.0).unwrap();
        let expected = base.add(&x.matmul_t(&a.delta_w()).unwrap()).unwrap();
        assert!(a.forward_deterministic(&x, &base).unwrap().max_abs_diff(&expected) < 1e-12);

        a.active_mask = vec![false; 4];
        assert_eq!(a.forward_deterministic(&x, &base).unwrap(), base);
    }

    #[test]
    fn local_moments_hand_expansion() {
        let a = scalar_adapter(0.25);
        let x = Matrix::row_vector(&[1.0, 0.0]);
        let (m, v) = a.local_moments(&x).unwrap();
        assert!((m.item() - 2.0).abs() < 1e-12);
        assert!((v.item() - 2.0).abs() < 1e-12);
        assert!((a.dropped_cross_term(&x).unwrap().item() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn zero_noise_limits() {
        let mut a = random_adapter(4, 5, 3, 3);
        a.lambda = 3.0; // scale 1
        a.log_alpha = vec![-60.0; 3];
        let mut rng = RngState::new(5);
        let x = rng.gaussian_matrix(50, 5, 0.0, 1.0).unwrap();
        let base = Matrix::zeros(50, 3);
        let det = a.forward_deterministic(&x, &base).unwrap();
        let local = a.forward_local_reparam(&x, &mut rng, &base).unwrap();
        let mean_dev = local.sub(&det).unwrap().map(f64::abs).sum() / local.len() as f64;
        assert!(mean_dev < 1e-4, "{mean_dev}");
        let direct = a.forward_direct_sample(&x, &mut rng, &base).unwrap();
        assert!(direct.max_abs_diff(&det) < 1e-12);
    }

    #[test]
    fn scalar_case_mc_moments() {
        let a = scalar_adapter(0.25);
        let x = Matrix::row_vector(&[1.0, 0.0]);
        let base = Matrix::zeros(1, 1);
        let n = 100_000;
        let mut rng = RngState::new(77);
        let draws: Vec<f64> = (0..n)
            .map(|_| a.forward_direct_sample(&x, &mut rng, &base).unwrap().item())
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        // Var(s·b) = E[s²]E[b²] − (Es)²(Eb)² = 1.25 · 5 − 4.
        let true_var = 2.25;
        assert!((mean - 2.0).abs() < 4.0 * (true_var / n as f64).sqrt(), "mean {mean}");
        let var_se = var_standard_error(&draws, mean);
        assert!((var - true_var).abs() < 4.0 * var_se, "var {var}");

        let local: Vec<f64> = (0..n)
            .map(|_| a.forward_local_reparam(&x, &mut rng, &base).unwrap().item())
            .collect();
        let lm = local.iter().sum::<f64>() / n as f64;
        let lv = local.iter().map(|d| (d - lm).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        assert!((lm - 2.0).abs() < 4.0 * (2.0 / n as f64).sqrt());
        assert!((lv - 2.0).abs() < 4.0 * var_standard_error(&local, lm));
    }

    fn var_standard_error(xs: &[f64], mean: f64) -> f64 {
        let n = xs.len() as f64;
        let m2 = xs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n;
        let m4 = xs.iter().map(|d| (d - mean).powi(4)).sum::<f64>() / n;
        ((m4 - m2 * m2) / n).sqrt()
    }

    #[test]
    fn effective_rank_and_prune() {
        let mut a = random_adapter(5, 3, 3, 4);
        a.log_alpha = vec![-8.0, 3.9, 4.1, 10.0];
        assert_eq!(a.effective_rank(4.0), 2);
        assert_eq!(a.effective_rank(-10.0), 0);
        a.log_alpha = vec![-10.0; 4];
        assert_eq!(a.effective_rank(4.0), 4);

        let mut b = random_adapter(6, 3, 3, 2);
        b.log_alpha = vec![5.0, -8.0];
        let untouched = b.clone();
        assert_eq!(b.prune(6.0), Vec::<usize>::new());
        assert_eq!(b, untouched);
        assert_eq!(b.prune(4.0), vec![0]);
        assert_eq!(b.active_mask, vec![false, true]);
        assert_eq!(b.effective_rank(4.0), 1);
        let once = b.clone();
        b.prune(4.0);
        assert_eq!(b, once);
        // A pruned rank never comes back even if its log α later drops.
        b.log_alpha[0] = -10.0;
        b.prune(4.0);
        assert_eq!(b.active_mask, vec![false, true]);
    }

    #[test]
    fn pruned_rank_nullity() {
        let mut a = random_adapter(7, 6, 4, 5);
        a.active_mask = vec![true, false, true, false, true];
        let mut zeroed = a.clone();
        for i in [1, 3] {
            for j in 0..6 {
                zeroed.mu_a[(i, j)] = 0.0;
            }
            for k in 0..4 {
                zeroed.mu_b[(k, i)] = 0.0;
            }
            zeroed.log_alpha[i] = 3.0;
        }
        let mut rng = RngState::new(8);
        let x = rng.gaussian_matrix(5, 6, 0.0, 1.0).unwrap();
        let base = Matrix::zeros(5, 4);
        assert_eq!(a.forward_deterministic(&x, &base).unwrap(), zeroed.forward_deterministic(&x, &base).unwrap());
        assert_eq!(a.local_moments(&x).unwrap().0, zeroed.local_moments(&x).unwrap().0);
        assert!(a.local_moments(&x).unwrap().1.max_abs_diff(&zeroed.local_moments(&x).unwrap().1) < 1e-14);
        assert_eq!(kl_sum(&a), kl_sum(&zeroed));
        let d1 = a.forward_direct_sample(&x, &mut RngState::new(1), &base).unwrap();
        let d2 = zeroed.forward_direct_sample(&x, &mut RngState::new(1), &base).unwrap();
        assert!(d1.max_abs_diff(&d2) < 1e-12);
    }

    #[test]
    fn scaling_gauge_invariance() {
        let mut rng = RngState::new(10);
        let a = random_adapter(11, 6, 4, 3);
        let s: Vec<f64> = (0..3).map(|_| (rng.normal()).exp() * if rng.uniform() < 0.5 { -1.0 } else { 1.0 }).collect();
        let b = a.rescaled(&s).unwrap();
        let x = rng.gaussian_matrix(4, 6, 0.0, 1.0).unwrap();
        let base = Matrix::zeros(4, 4);
        let ya = a.forward_deterministic(&x, &base).unwrap();
        let yb = b.forward_deterministic(&x, &base).unwrap();
        assert!(ya.max_abs_diff(&yb) <= 1e-10 * ya.max_abs());
        assert_eq!(a.log_alpha, b.log_alpha);
        // Multiplicative noise makes the local moments gauge-invariant too.
        let (ma, va) = a.local_moments(&x).unwrap();
        let (mb, vb) = b.local_moments(&x).unwrap();
        assert!(ma.max_abs_diff(&mb) < 1e-10 * ma.max_abs());
        assert!(va.max_abs_diff(&vb) < 1e-10 * va.max_abs());
    }

    #[test]
    fn taped_forward_matches_plain() {
        let mut rng = RngState::new(12);
        let mut a = random_adapter(13, 5, 3, 4);
        a.active_mask[1] = false;
        let x = rng.gaussian_matrix(6, 5, 0.0, 1.0).unwrap();
        let eps = rng.gaussian_matrix(6, 3, 0.0, 1.0).unwrap();
        let base = Matrix::zeros(6, 3);
        let mut tape = Tape::new();
        let vars = AdapterVars::register(&mut tape, &a);
        let xv = tape.leaf(x.clone());
        let ev = tape.leaf(eps.clone());
        let y = vars.local_reparam(&mut tape, xv, ev, a.scale(), (-10.0, 8.0)).unwrap();
        let plain = a.forward_local_reparam_with_noise(&x, &eps, &base).unwrap();
        assert!(tape.value(y).max_abs_diff(&plain) < 1e-12);
        let d = vars.deterministic(&mut tape, xv, a.scale()).unwrap();
        assert!(tape.value(d).max_abs_diff(&a.forward_deterministic(&x, &base).unwrap()) < 1e-12);
        let k = vars.kl_sum(&mut tape, (-10.0, 8.0), 1.0).unwrap();
        assert!((tape.value(k).item() - kl_sum(&a)).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_json_keys() {
        let mut a = random_adapter(14, 2, 2, 2);
        a.active_mask[0] = false;
        let v: serde_json::Value = serde_json::to_value(&a).unwrap();
        let mut keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        assert_eq!(keys, ["active_mask", "lambda", "log_alpha", "mu_A", "mu_B", "r_init"]);
        let back: RankTiedAdapter = serde_json::from_value(v).unwrap();
        assert_eq!(back, a);
    }
}
