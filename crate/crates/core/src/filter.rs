//! The conservative imputation filter.
//!
//! Imputation uncertainty is estimated with MC dropout on the imputation
//! model's embeddings; an imputation is kept (`γ = 1`) when its coefficient
//! of variation `σ̂/μ̂` is below `η`. [`theoretical_threshold`] gives the
//! value of `η` that guarantees `P(|ê − e| < e) ≥ ρ` under a Gaussian model.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{pointwise_error, FactorModel, LossKind};
use crate::rng::{self, Stream};

/// Per-pair MC-dropout mean and standard deviation.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ImputationStats {
    pub mu_hat: Vec<f64>,
    pub sigma_hat: Vec<f64>,
}

impl ImputationStats {
    pub fn len(&self) -> usize {
        self.mu_hat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu_hat.is_empty()
    }

    /// TSV of `user item mu_hat sigma_hat gamma` for offline analysis.
    pub fn decisions_tsv(&self, pairs: &[(usize, usize)], gamma: &[bool]) -> Result<String> {
        if pairs.len() != self.len() || gamma.len() != self.len() {
            return Err(Error::LengthMismatch {
                what: "filter decisions",
                got: pairs.len().min(gamma.len()),
                expected: self.len(),
            });
        }
        let mut out = String::from("user\titem\tmu_hat\tsigma_hat\tgamma\n");
        for k in 0..self.len() {
            let (u, i) = pairs[k];
            let _ = writeln!(
                out,
                "{u}\t{i}\t{}\t{}\t{}",
                self.mu_hat[k], self.sigma_hat[k], gamma[k] as u8
            );
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub eta: f64,
    pub passes: usize,
    pub dropout_rate: f64,
    pub seed: u64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            eta: 5.0,
            passes: 10,
            dropout_rate: 0.5,
            seed: 0,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.passes < 2 {
            return Err(Error::invalid(format!("MC dropout needs passes >= 2, got {}", self.passes)));
        }
        if !(self.dropout_rate > 0.0 && self.dropout_rate < 1.0) {
            return Err(Error::invalid(format!(
                "dropout_rate must lie in (0, 1), got {}",
                self.dropout_rate
            )));
        }
        check_eta(self.eta)
    }
}

fn check_eta(eta: f64) -> Result<()> {
    if eta.is_nan() || eta <= 0.0 {
        return Err(Error::invalid(format!("eta must be positive, got {eta}")));
    }
    Ok(())
}

/// One inverted-dropout mask over `dim` embedding dimensions.
pub fn dropout_mask<R: Rng + ?Sized>(dim: usize, rate: f64, rng: &mut R) -> Vec<f64> {
    let keep = 1.0 / (1.0 - rate);
    (0..dim)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect()
}

/// MC-dropout statistics of an arbitrary per-pair transform of the model output.
///
/// Each pass draws one mask shared by every pair; `transform(k, output)` maps
/// the masked output for pair `k` to the quantity being summarised.
pub fn mc_dropout_stats_with<F>(
    model: &FactorModel,
    pairs: &[(usize, usize)],
    config: &FilterConfig,
    transform: F,
) -> Result<ImputationStats>
where
    F: Fn(usize, f64) -> f64,
{
    if config.passes < 2 {
        return Err(Error::invalid(format!("MC dropout needs passes >= 2, got {}", config.passes)));
    }
    if !(config.dropout_rate > 0.0 && config.dropout_rate < 1.0) {
        return Err(Error::invalid(format!(
            "dropout_rate must lie in (0, 1), got {}",
            config.dropout_rate
        )));
    }
    let mut rng = rng::stream(config.seed, Stream::Dropout);
    let n = pairs.len();
    // Welford accumulators per pair.
    let mut mean = vec![0.0; n];
    let mut m2 = vec![0.0; n];
    for pass in 0..config.passes {
        let mask = dropout_mask(model.dim, config.dropout_rate, &mut rng);
        let count = (pass + 1) as f64;
        for (k, &(u, i)) in pairs.iter().enumerate() {
            let x = transform(k, model.link.apply(model.logit_masked(u, i, &mask)));
            let delta = x - mean[k];
            mean[k] += delta / count;
            m2[k] += delta * (x - mean[k]);
        }
    }
    let denom = (config.passes - 1) as f64;
    Ok(ImputationStats {
        mu_hat: mean,
        sigma_hat: m2.into_iter().map(|s| (s / denom).max(0.0).sqrt()).collect(),
    })
}

/// MC-dropout mean and sample standard deviation of the imputation model's
/// raw output.
pub fn mc_dropout_stats(
    imputation_model: &FactorModel,
    pairs: &[(usize, usize)],
    config: &FilterConfig,
) -> Result<ImputationStats> {
    mc_dropout_stats_with(imputation_model, pairs, config, |_, y| y)
}

/// MC-dropout statistics of the imputed error `ê = ℓ(r̃, r̂)`, where `r̃` is
/// the dropped-out imputed label and `r̂` the recommendation prediction.
pub fn mc_dropout_error_stats(
    imputation_model: &FactorModel,
    pairs: &[(usize, usize)],
    predictions: &[f64],
    kind: LossKind,
    config: &FilterConfig,
) -> Result<ImputationStats> {
    if predictions.len() != pairs.len() {
        return Err(Error::LengthMismatch {
            what: "predictions",
            got: predictions.len(),
            expected: pairs.len(),
        });
    }
    mc_dropout_stats_with(imputation_model, pairs, config, |k, imputed| {
        pointwise_error(imputed, predictions[k], kind)
    })
}

/// `γ = 1` iff `μ̂ > 0` and `σ̂/μ̂ < η`.
pub fn decide(stats: &ImputationStats, eta: f64) -> Result<Vec<bool>> {
    check_eta(eta)?;
    if stats.mu_hat.len() != stats.sigma_hat.len() {
        return Err(Error::LengthMismatch {
            what: "sigma_hat",
            got: stats.sigma_hat.len(),
            expected: stats.mu_hat.len(),
        });
    }
    Ok(stats
        .mu_hat
        .iter()
        .zip(&stats.sigma_hat)
        .map(|(&mu, &sigma)| mu > 0.0 && sigma / mu < eta)
        .collect())
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard normal quantile `Φ⁻¹(ρ)`.
///
/// Acklam's rational approximation (relative error ~1e-9) followed by one
/// Halley step against [`normal_cdf`].
pub fn normal_quantile(rho: f64) -> Result<f64> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::invalid(format!("quantile level must lie in (0, 1), got {rho}")));
    }
    #[allow(clippy::excessive_precision)]
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const LOW: f64 = 0.02425;

    let tail = |q: f64| {
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    let x = if rho < LOW {
        tail((-2.0 * rho.ln()).sqrt())
    } else if rho <= 1.0 - LOW {
        let q = rho - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        -tail((-2.0 * (1.0 - rho).ln()).sqrt())
    };

    // Halley refinement
    let e = normal_cdf(x) - rho;
    let u = e * (2.0 * std::f64::consts::PI).sqrt() * (x * x / 2.0).exp();
    Ok(x - u / (1.0 + x * u / 2.0))
}

/// Constants of the Gaussian filtering lemma.
///
/// `m_mu` is carried for completeness; the threshold does not depend on it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoryParams {
    pub rho: f64,
    pub eps_mu: f64,
    pub eps_sigma: f64,
    pub big_m_mu: f64,
    pub m_sigma: f64,
    pub m_mu: f64,
}

impl TheoryParams {
    pub fn validate(&self) -> Result<()> {
        if self.m_sigma.is_nan() || self.m_sigma <= 0.0 {
            return Err(Error::invalid(format!("m_sigma must be positive, got {}", self.m_sigma)));
        }
        if !(self.eps_mu >= 0.0 && self.eps_sigma >= 0.0) {
            return Err(Error::invalid("eps_mu and eps_sigma must be non-negative"));
        }
        if self.big_m_mu < self.m_mu {
            return Err(Error::invalid(format!(
                "M_mu ({}) must be >= m_mu ({})",
                self.big_m_mu, self.m_mu
            )));
        }
        Ok(())
    }
}

/// Largest `σ̂/μ̂` for which `P(|ê − e| < e) ≥ ρ` is guaranteed:
///
/// `(√5 Φ⁻¹(ρ) + 2 M_μ ε_σ / (m_σ (√5 m_σ + 2 ε_σ)) + 2√5 ε_μ / (√5 m_σ + 2 ε_σ))⁻¹`,
///
/// or `+∞` when the bracket is not positive.
pub fn theoretical_threshold(params: &TheoryParams) -> Result<f64> {
    params.validate()?;
    let s5 = 5f64.sqrt();
    let TheoryParams {
        rho,
        eps_mu,
        eps_sigma,
        big_m_mu,
        m_sigma,
        ..
    } = *params;
    let spread = s5 * m_sigma + 2.0 * eps_sigma;
    let bracket = s5 * normal_quantile(rho)?
        + 2.0 * big_m_mu * eps_sigma / (m_sigma * spread)
        + 2.0 * s5 * eps_mu / spread;
    Ok(if bracket <= 0.0 { f64::INFINITY } else { 1.0 / bracket })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Link;

    // Frozen from an arbitrary-precision quantile (mpmath, 30 digits).
    const Q_0975: f64 = 1.959963984540054;
    const Q_06: f64 = 0.2533471031357997;
    const Q_0001: f64 = -3.090232306167813;

    #[test]
    fn quantile_examples() {
        assert!(normal_quantile(0.5).unwrap().abs() < 1e-12);
        assert!((normal_quantile(0.975).unwrap() - Q_0975).abs() < 1e-9);
        assert!((normal_quantile(0.6).unwrap() - Q_06).abs() < 1e-9);
        assert!((normal_quantile(0.001).unwrap() - Q_0001).abs() < 1e-9);
        assert!((normal_quantile(0.999).unwrap() + Q_0001).abs() < 1e-9);
        assert!(normal_quantile(0.0).is_err());
        assert!(normal_quantile(1.0).is_err());
    }

    #[test]
    fn quantile_inverts_cdf() {
        for k in 1..200 {
            let rho = k as f64 / 200.0;
            let x = normal_quantile(rho).unwrap();
            assert!((normal_cdf(x) - rho).abs() < 1e-12, "rho {rho}");
        }
    }

    fn params(rho: f64, eps_mu: f64, eps_sigma: f64) -> TheoryParams {
        TheoryParams {
            rho,
            eps_mu,
            eps_sigma,
            big_m_mu: 2.0,
            m_sigma: 0.1,
            m_mu: 0.5,
        }
    }

    #[test]
    fn threshold_examples() {
        let t = theoretical_threshold(&params(0.6, 0.0, 0.0)).unwrap();
        assert!((t - 1.0 / (5f64.sqrt() * Q_06)).abs() < 1e-9);
        assert!((t - 1.7652).abs() < 1e-4);
        assert_eq!(theoretical_threshold(&params(0.5, 0.0, 0.0)).unwrap(), f64::INFINITY);
        let mut prev = f64::INFINITY;
        for eps in [0.0, 0.01, 0.05, 0.2] {
            let t = theoretical_threshold(&params(0.6, eps, 0.0)).unwrap();
            assert!(t < prev);
            prev = t;
        }
        let mut bad = params(0.6, 0.0, 0.0);
        bad.m_sigma = 0.0;
        assert!(theoretical_threshold(&bad).is_err());
    }

    #[test]
    fn decide_examples() {
        let s = ImputationStats {
            mu_hat: vec![0.5],
            sigma_hat: vec![0.1],
        };
        assert_eq!(decide(&s, 1.0).unwrap(), vec![true]);
        assert_eq!(decide(&s, 0.1).unwrap(), vec![false]);
        let degenerate = ImputationStats {
            mu_hat: vec![0.0, -0.2],
            sigma_hat: vec![0.0, 0.01],
        };
        assert_eq!(decide(&degenerate, 1e9).unwrap(), vec![false, false]);
        assert!(decide(&s, 0.0).is_err());
        assert!(decide(&s, -1.0).is_err());
    }

    #[test]
    fn bias_only_model_has_zero_spread() {
        let mut m = FactorModel::zeros(3, 4, 2, Link::Sigmoid).unwrap();
        m.user_bias = vec![0.1, -0.4, 0.3];
        m.item_bias = vec![0.2, 0.0, -0.1, 0.5];
        let pairs = [(0, 0), (1, 3), (2, 1)];
        let stats = mc_dropout_stats(&m, &pairs, &FilterConfig::default()).unwrap();
        for (k, &(u, i)) in pairs.iter().enumerate() {
            assert_eq!(stats.sigma_hat[k], 0.0);
            assert!((stats.mu_hat[k] - m.output(u, i)).abs() < 1e-15);
        }
    }

    #[test]
    fn stats_are_deterministic_per_seed() {
        let m = FactorModel::init_uniform(4, 4, 3, Link::Sigmoid, 1.0, &mut rng::stream(5, Stream::Init)).unwrap();
        let pairs: Vec<_> = (0..4).flat_map(|u| (0..4).map(move |i| (u, i))).collect();
        let cfg = FilterConfig {
            seed: 11,
            ..FilterConfig::default()
        };
        let a = mc_dropout_stats(&m, &pairs, &cfg).unwrap();
        let b = mc_dropout_stats(&m, &pairs, &cfg).unwrap();
        assert_eq!(a, b);
        let c = mc_dropout_stats(&m, &pairs, &FilterConfig { seed: 12, ..cfg }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn too_few_passes_is_an_error() {
        let m = FactorModel::zeros(1, 1, 1, Link::Sigmoid).unwrap();
        let cfg = FilterConfig {
            passes: 1,
            ..FilterConfig::default()
        };
        assert!(mc_dropout_stats(&m, &[(0, 0)], &cfg).is_err());
    }

    #[test]
    fn decisions_tsv_layout() {
        let s = ImputationStats {
            mu_hat: vec![0.5, 0.25],
            sigma_hat: vec![0.1, 0.5],
        };
        let g = decide(&s, 1.0).unwrap();
        let tsv = s.decisions_tsv(&[(0, 1), (2, 3)], &g).unwrap();
        assert_eq!(tsv, "user\titem\tmu_hat\tsigma_hat\tgamma\n0\t1\t0.5\t0.1\t1\n2\t3\t0.25\t0.5\t0\n");
    }
}
