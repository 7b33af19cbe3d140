//! Synthetic worlds with known labels and propensities, and Monte Carlo
//! harnesses that check the closed-form moments, the Gaussian filtering
//! condition, the tail bound and variance dominance against simulation.

use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::{triplets_to_string, InteractionRecord, RatingTable};
use crate::error::{Error, Result};
use crate::estimators::{self, oracle_gamma, EstimatorInputs, EstimatorKind};
use crate::filter::{theoretical_threshold, TheoryParams};
use crate::models::{pointwise_error, LossKind, PropensityTable};
use crate::numeric::{sigmoid, CompensatedSum};
use crate::rng::{self, Stream};

pub const DEFAULT_MEAN_PROPENSITY: f64 = 0.05;
pub const WORLD_PROPENSITY_FLOOR: f64 = 0.005;
pub const DEFAULT_WORLD_SIZE: usize = 30;
pub const DEFAULT_TRIALS: usize = 10_000;
pub const MIN_LEMMA1_DRAWS: usize = 10_000;

/// Generative knobs of a synthetic world.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub num_users: usize,
    pub num_items: usize,
    pub seed: u64,
    pub bias_strength: f64,
    pub mean_propensity: f64,
    pub floor: f64,
    pub rank: usize,
    /// Slope of the label link; larger values make labels less noisy.
    pub label_sharpness: f64,
}

impl WorldConfig {
    pub fn new(num_users: usize, num_items: usize, seed: u64, bias_strength: f64) -> Self {
        Self {
            num_users,
            num_items,
            seed,
            bias_strength,
            mean_propensity: DEFAULT_MEAN_PROPENSITY,
            floor: WORLD_PROPENSITY_FLOOR,
            rank: 3,
            label_sharpness: 4.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_users == 0 || self.num_items == 0 {
            return Err(Error::invalid("world dimensions must be >= 1"));
        }
        if self.rank == 0 {
            return Err(Error::invalid("planted rank must be >= 1"));
        }
        if !(self.bias_strength >= 0.0 && self.bias_strength.is_finite()) {
            return Err(Error::invalid(format!("bias_strength must be >= 0, got {}", self.bias_strength)));
        }
        if !(self.floor > 0.0 && self.floor <= self.mean_propensity && self.mean_propensity <= 1.0) {
            return Err(Error::invalid(format!(
                "need 0 < floor ({}) <= mean_propensity ({}) <= 1",
                self.floor, self.mean_propensity
            )));
        }
        Ok(())
    }
}

/// Ground truth over the full `num_users × num_items` grid, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWorld {
    pub num_users: usize,
    pub num_items: usize,
    pub labels: Vec<bool>,
    pub p_true: Vec<f64>,
    /// A frozen error field `e_ui` for estimator-level studies.
    pub reference_errors: Option<Vec<f64>>,
    pub floor: f64,
}

/// `make_world` with the default 0.05 mean propensity.
pub fn make_world(num_users: usize, num_items: usize, seed: u64, bias_strength: f64) -> Result<SyntheticWorld> {
    make_world_with(&WorldConfig::new(num_users, num_items, seed, bias_strength))
}

/// Labels from a planted low-rank model; `p = clip(p₀ exp(b (r − 0.5)), floor, 1)`
/// with `p₀` solved so the mean propensity hits the target. Reference errors
/// are the BCE of a noisy frozen predictor of the planted score.
pub fn make_world_with(cfg: &WorldConfig) -> Result<SyntheticWorld> {
    cfg.validate()?;
    let (nu, ni, k) = (cfg.num_users, cfg.num_items, cfg.rank);
    let mut r = rng::stream(cfg.seed, Stream::Simulator);
    let mut normal = |n: usize| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(&mut r)).collect() };
    let users = normal(nu * k);
    let items = normal(ni * k);
    let scale = (k as f64).sqrt();
    let scores: Vec<f64> = (0..nu * ni)
        .map(|x| {
            let (u, i) = (x / ni, x % ni);
            (0..k).map(|d| users[u * k + d] * items[i * k + d]).sum::<f64>() / scale
        })
        .collect();
    let labels: Vec<bool> = scores
        .iter()
        .map(|&s| r.random::<f64>() < sigmoid(cfg.label_sharpness * s))
        .collect();
    let predictions: Vec<f64> = scores
        .iter()
        .map(|&s| sigmoid(2.0 * s + Distribution::<f64>::sample(&StandardNormal, &mut r)))
        .collect();
    let errors = labels
        .iter()
        .zip(&predictions)
        .map(|(&l, &p)| pointwise_error(if l { 1.0 } else { 0.0 }, p, LossKind::Bce))
        .collect();

    let shape: Vec<f64> = labels
        .iter()
        .map(|&l| (cfg.bias_strength * (if l { 0.5 } else { -0.5 })).exp())
        .collect();
    let p_at = |p0: f64| -> Vec<f64> { shape.iter().map(|s| (p0 * s).clamp(cfg.floor, 1.0)).collect() };
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mut lo, mut hi) = (0.0, 1.0 / shape.iter().cloned().fold(f64::INFINITY, f64::min));
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mean(&p_at(mid)) < cfg.mean_propensity {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(SyntheticWorld {
        num_users: nu,
        num_items: ni,
        labels,
        p_true: p_at(0.5 * (lo + hi)),
        reference_errors: Some(errors),
        floor: cfg.floor,
    })
}

impl SyntheticWorld {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn pairs(&self) -> Vec<(usize, usize)> {
        (0..self.len()).map(|x| (x / self.num_items, x % self.num_items)).collect()
    }

    pub fn label(&self, user: usize, item: usize) -> bool {
        self.labels[user * self.num_items + item]
    }

    pub fn errors(&self) -> Result<&[f64]> {
        self.reference_errors.as_deref().ok_or(Error::MissingField("reference_errors"))
    }

    pub fn mean_propensity(&self) -> f64 {
        self.p_true.iter().sum::<f64>() / self.len() as f64
    }

    pub fn propensity_table(&self) -> Result<PropensityTable> {
        PropensityTable::dense(self.num_users, self.num_items, self.p_true.clone(), self.floor)
    }

    /// Every pair with its binary label, marked observed.
    pub fn ground_truth(&self) -> Result<RatingTable> {
        let records = self
            .pairs()
            .into_iter()
            .map(|(u, i)| InteractionRecord::observed(u, i, self.label(u, i) as u8 as f64))
            .collect();
        RatingTable::new(self.num_users, self.num_items, records)
    }

    /// The missing-not-at-random training log: pairs revealed by one
    /// Bernoulli(`p_true`) draw.
    pub fn biased_sample(&self, seed: u64) -> Result<RatingTable> {
        let o = draw_observations(self, seed);
        let records = self
            .pairs()
            .into_iter()
            .zip(o)
            .filter(|(_, o)| *o)
            .map(|((u, i), _)| InteractionRecord::observed(u, i, self.label(u, i) as u8 as f64))
            .collect();
        RatingTable::new(self.num_users, self.num_items, records)
    }

    /// A uniformly random subset of `count` pairs, in pair order; the
    /// missing-at-random evaluation log.
    pub fn uniform_sample(&self, count: usize, seed: u64) -> Result<RatingTable> {
        if count == 0 || count > self.len() {
            return Err(Error::invalid(format!("sample size {count} outside 1..={}", self.len())));
        }
        let mut r = rng::indexed(seed, Stream::Simulator, 1);
        let mut picked = sample(&mut r, self.len(), count).into_vec();
        picked.sort_unstable();
        let records = picked
            .into_iter()
            .map(|x| {
                let (u, i) = (x / self.num_items, x % self.num_items);
                InteractionRecord::observed(u, i, self.label(u, i) as u8 as f64)
            })
            .collect();
        RatingTable::new(self.num_users, self.num_items, records)
    }

    /// Estimator inputs over all of `D` with `p_true`, the reference errors
    /// and all-unobserved `o`.
    pub fn inputs(&self, e_hat: &[f64], p_hat: &[f64], gamma: Option<&[bool]>) -> Result<EstimatorInputs> {
        let mut x = EstimatorInputs::new(self.errors()?.to_vec(), vec![false; self.len()], p_hat.to_vec())
            .with_e_hat(e_hat.to_vec())
            .with_p_true(self.p_true.clone())
            .with_floor(self.floor.min(estimators::DEFAULT_ESTIMATOR_FLOOR));
        if let Some(g) = gamma {
            x = x.with_gamma(g.to_vec());
        }
        x.validate()?;
        Ok(x)
    }

    /// Writes `world.tsv` (ground-truth triplets) and `propensity.tsv`.
    pub fn export(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let world = dir.join("world.tsv");
        fs::write(&world, triplets_to_string(&self.ground_truth()?)).map_err(|e| Error::io(&world, e))?;
        self.propensity_table()?.save(dir.join("propensity.tsv"))
    }
}

/// Independent Bernoulli(`p_true`) observation indicators, one per pair.
pub fn draw_observations(world: &SyntheticWorld, seed: u64) -> Vec<bool> {
    let mut r = rng::stream(seed, Stream::Observations);
    world.p_true.iter().map(|&p| r.random::<f64>() < p).collect()
}

fn trial_observations(p_true: &[f64], seed: u64, trial: usize) -> Vec<bool> {
    let mut r = rng::indexed(seed, Stream::Trials, trial as u64);
    p_true.iter().map(|&p| r.random::<f64>() < p).collect()
}

/// `|ê − e|`-style perturbation of the reference errors:
/// `ê = |e + scale · mean(e) · z|`, `z ~ N(0, 1)`.
pub fn perturbed_imputation(errors: &[f64], scale: f64, seed: u64) -> Vec<f64> {
    let mut r = rng::indexed(seed, Stream::Simulator, 2);
    let m = errors.iter().sum::<f64>() / errors.len().max(1) as f64;
    errors
        .iter()
        .map(|&e| (e + scale * m * Distribution::<f64>::sample(&StandardNormal, &mut r)).abs())
        .collect()
}

/// `p̂ = clip(p · exp(strength · z), floor, 1)`, `z ~ N(0, 1)`.
pub fn misspecified_propensity(p_true: &[f64], strength: f64, floor: f64, seed: u64) -> Vec<f64> {
    let mut r = rng::indexed(seed, Stream::Simulator, 3);
    p_true
        .iter()
        .map(|&p| {
            let z: f64 = StandardNormal.sample(&mut r);
            (p * (strength * z).exp()).clamp(floor, 1.0)
        })
        .collect()
}

/// A random estimator instance with `p_true`, `p̂`, `e` and `ê`; used for
/// property sweeps over many small problems.
pub fn random_inputs(n: usize, seed: u64) -> EstimatorInputs {
    let mut r = rng::indexed(seed, Stream::Simulator, 4);
    let e: Vec<f64> = (0..n).map(|_| r.random_range(0.0..2.0)).collect();
    let e_hat: Vec<f64> = e.iter().map(|&x| (x + r.random_range(-1.5..1.5)).max(0.0)).collect();
    let p_true: Vec<f64> = (0..n).map(|_| r.random_range(0.02..1.0)).collect();
    let p_hat: Vec<f64> = p_true.iter().map(|&p| (p * r.random_range(0.5..1.5)).clamp(0.02, 1.0)).collect();
    let o: Vec<bool> = p_true.iter().map(|&p| r.random::<f64>() < p).collect();
    EstimatorInputs::new(e, o, p_hat).with_e_hat(e_hat).with_p_true(p_true)
}

/// Monte Carlo moments of one estimator next to their closed forms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloReport {
    pub estimator: EstimatorKind,
    pub trials: usize,
    pub ideal_loss: f64,
    pub empirical_mean: f64,
    pub empirical_variance: f64,
    /// `|empirical_mean − ideal_loss|`.
    pub empirical_bias: f64,
    /// `|E[L] − ideal_loss|` from the closed form.
    pub closed_form_bias: f64,
    pub closed_form_mean: f64,
    pub closed_form_variance: f64,
    /// Standard error of the empirical mean.
    pub standard_error: f64,
    /// Standard error of the empirical (unbiased) variance.
    pub variance_standard_error: f64,
}

impl MonteCarloReport {
    /// `|empirical_mean − closed-form mean|` in standard errors.
    pub fn mean_z(&self) -> f64 {
        z_score(self.empirical_mean - self.closed_form_mean, self.standard_error)
    }

    /// `|empirical_variance − closed-form variance|` in standard errors.
    pub fn variance_z(&self) -> f64 {
        z_score(self.empirical_variance - self.closed_form_variance, self.variance_standard_error)
    }

    /// Both moments agree within `z` standard errors.
    pub fn agrees(&self, z: f64) -> bool {
        self.mean_z() <= z && self.variance_z() <= z
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

fn z_score(diff: f64, se: f64) -> f64 {
    let slack = 1e-12 * (1.0 + diff.abs());
    if diff.abs() <= slack {
        0.0
    } else if se > 0.0 {
        diff.abs() / se
    } else {
        f64::INFINITY
    }
}

/// Estimator values over `trials` independent observation draws. Trial `t`
/// uses its own substream of `seed`, so two calls with the same seed see
/// identical draws whatever the estimator.
pub fn trial_values(
    kind: EstimatorKind,
    world: &SyntheticWorld,
    e_hat: &[f64],
    p_hat: &[f64],
    gamma: Option<&[bool]>,
    trials: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if !matches!(kind, EstimatorKind::Ips | EstimatorKind::Dr | EstimatorKind::Cdr) {
        return Err(Error::invalid(format!("Monte Carlo moments cover IPS, DR and CDR, not {kind:?}")));
    }
    let base = world.inputs(e_hat, p_hat, gamma)?;
    (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut x = base.clone();
            x.o = trial_observations(&world.p_true, seed, t);
            estimators::value(kind, &x)
        })
        .collect()
}

/// Empirical mean and variance of an estimator over repeated observation
/// draws, reported beside the closed-form bias and variance.
pub fn empirical_moments(
    kind: EstimatorKind,
    world: &SyntheticWorld,
    e_hat: &[f64],
    p_hat: &[f64],
    gamma: Option<&[bool]>,
    trials: usize,
    seed: u64,
) -> Result<MonteCarloReport> {
    if trials < 2 {
        return Err(Error::invalid(format!("need at least 2 trials, got {trials}")));
    }
    let values = trial_values(kind, world, e_hat, p_hat, gamma, trials, seed)?;
    let inputs = world.inputs(e_hat, p_hat, gamma)?;
    let ideal = estimators::ideal_loss(&inputs)?;
    let closed_mean = estimators::expected_value(kind, &inputs)?;
    let closed_var = estimators::variance(kind, &inputs)?;

    let n = trials as f64;
    let mean = values.iter().copied().collect::<CompensatedSum>().value() / n;
    let m2 = values.iter().map(|v| (v - mean).powi(2)).collect::<CompensatedSum>().value() / n;
    let m4 = values.iter().map(|v| (v - mean).powi(4)).collect::<CompensatedSum>().value() / n;
    let var = m2 * n / (n - 1.0);
    let var_of_var = ((m4 - m2 * m2 * (n - 3.0) / (n - 1.0)) / n).max(0.0);
    Ok(MonteCarloReport {
        estimator: kind,
        trials,
        ideal_loss: ideal,
        empirical_mean: mean,
        empirical_variance: var,
        empirical_bias: (mean - ideal).abs(),
        closed_form_bias: (closed_mean - ideal).abs(),
        closed_form_mean: closed_mean,
        closed_form_variance: closed_var,
        standard_error: (var / n).sqrt(),
        variance_standard_error: var_of_var.sqrt(),
    })
}

/// One cell of the Gaussian filtering check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lemma1Cell {
    pub mu_hat: f64,
    pub sigma_hat: f64,
    pub eps_mu: f64,
    pub eps_sigma: f64,
    pub rho: f64,
}

impl Lemma1Cell {
    /// Constants at their tightest values for this single pair:
    /// `M_μ = m_μ = μ̂`, `m_σ = σ̂`.
    pub fn theory(&self) -> TheoryParams {
        TheoryParams {
            rho: self.rho,
            eps_mu: self.eps_mu,
            eps_sigma: self.eps_sigma,
            big_m_mu: self.mu_hat,
            m_sigma: self.sigma_hat,
            m_mu: self.mu_hat,
        }
    }

    pub fn threshold(&self) -> Result<f64> {
        theoretical_threshold(&self.theory())
    }

    /// The worst-case truth `μ = μ̂ − ε_μ`, `σ² = σ̂² + ε_μ²` satisfies
    /// `|μ − μ̂| ≤ ε_μ`, `|σ² − σ̂²| ≤ ε_σ²` and `2ε_μ ≤ μ̂` exactly when
    /// `ε_μ ≤ ε_σ` and `2ε_μ ≤ μ̂`.
    pub fn satisfies_hypotheses(&self) -> bool {
        self.mu_hat > 0.0 && self.sigma_hat > 0.0 && 2.0 * self.eps_mu <= self.mu_hat && self.eps_mu <= self.eps_sigma
    }

    /// `σ̂/μ̂` is strictly below the threshold.
    pub fn below_threshold(&self) -> Result<bool> {
        Ok(self.sigma_hat / self.mu_hat < self.threshold()?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lemma1Report {
    pub cell: Lemma1Cell,
    pub draws: usize,
    pub threshold: f64,
    pub ratio: f64,
    /// Empirical `P(|ê − e| < e)`.
    pub probability: f64,
    /// Empirical `P(ê − 2e < 0)`, the bound the proof works with.
    pub gap_probability: f64,
    pub standard_error: f64,
    pub gap_standard_error: f64,
}

impl Lemma1Report {
    /// `P(|ê − e| < e) ≥ ρ − z·SE`.
    pub fn holds(&self, z: f64) -> bool {
        self.probability >= self.cell.rho - z * self.standard_error
    }

    pub fn gap_holds(&self, z: f64) -> bool {
        self.gap_probability >= self.cell.rho - z * self.gap_standard_error
    }
}

/// Draws paired `ê ~ N(μ̂, σ̂²)`, `e ~ N(μ̂ − ε_μ, σ̂² + ε_μ²)` and reports how
/// often `|ê − e| < e` (and `ê − 2e < 0`).
pub fn verify_lemma1(
    mu_hat: f64,
    sigma_hat: f64,
    eps_mu: f64,
    eps_sigma: f64,
    rho: f64,
    draws: usize,
    seed: u64,
) -> Result<Lemma1Report> {
    let cell = Lemma1Cell {
        mu_hat,
        sigma_hat,
        eps_mu,
        eps_sigma,
        rho,
    };
    verify_lemma1_cell(&cell, draws, seed)
}

pub fn verify_lemma1_cell(cell: &Lemma1Cell, draws: usize, seed: u64) -> Result<Lemma1Report> {
    if draws < MIN_LEMMA1_DRAWS {
        return Err(Error::invalid(format!("need at least {MIN_LEMMA1_DRAWS} draws, got {draws}")));
    }
    if !(cell.mu_hat.is_finite() && cell.sigma_hat > 0.0 && cell.sigma_hat.is_finite()) {
        return Err(Error::invalid("mu_hat must be finite and sigma_hat positive"));
    }
    let threshold = cell.threshold()?;
    let imputed = Normal::new(cell.mu_hat, cell.sigma_hat).map_err(|e| Error::invalid(e.to_string()))?;
    let truth = Normal::new(cell.mu_hat - cell.eps_mu, (cell.sigma_hat.powi(2) + cell.eps_mu.powi(2)).sqrt())
        .map_err(|e| Error::invalid(e.to_string()))?;
    let mut r = rng::stream(seed, Stream::Simulator);
    let (mut hits, mut gap_hits) = (0usize, 0usize);
    for _ in 0..draws {
        let eh = imputed.sample(&mut r);
        let e = truth.sample(&mut r);
        hits += ((eh - e).abs() < e) as usize;
        gap_hits += (eh - 2.0 * e < 0.0) as usize;
    }
    let n = draws as f64;
    let (p, g) = (hits as f64 / n, gap_hits as f64 / n);
    Ok(Lemma1Report {
        cell: *cell,
        draws,
        threshold,
        ratio: cell.sigma_hat / cell.mu_hat,
        probability: p,
        gap_probability: g,
        standard_error: (p * (1.0 - p) / n).sqrt(),
        gap_standard_error: (g * (1.0 - g) / n).sqrt(),
    })
}

/// Every combination of `ρ`, `(ε_μ, ε_σ)` and `σ̂` (with `μ̂ = 1`) that
/// satisfies the hypotheses and lies strictly below its threshold.
pub fn lemma1_grid() -> Result<Vec<Lemma1Cell>> {
    let rhos = [0.5, 0.55, 0.6, 0.65, 0.7, 0.8, 0.9, 0.95];
    let eps = [(0.0, 0.0), (0.0, 0.02), (0.02, 0.02), (0.02, 0.05), (0.05, 0.1)];
    let sigmas = [0.05, 0.1, 0.15, 0.2, 0.3, 0.4, 0.5, 0.7, 1.0];
    let mut cells = Vec::new();
    for &rho in &rhos {
        for &(eps_mu, eps_sigma) in &eps {
            for &sigma_hat in &sigmas {
                let cell = Lemma1Cell {
                    mu_hat: 1.0,
                    sigma_hat,
                    eps_mu,
                    eps_sigma,
                    rho,
                };
                if cell.satisfies_hypotheses() && cell.below_threshold()? {
                    cells.push(cell);
                }
            }
        }
    }
    Ok(cells)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailBoundReport {
    pub kappa: f64,
    pub trials: usize,
    pub bound: f64,
    pub empirical_mean: f64,
    pub coverage: f64,
}

impl TailBoundReport {
    pub fn holds(&self) -> bool {
        self.coverage >= 1.0 - self.kappa
    }
}

/// Fraction of trials with `|L_CDR − mean over trials| ≤ cdr_tail_bound(κ)`.
pub fn verify_tail_bound(
    world: &SyntheticWorld,
    e_hat: &[f64],
    p_hat: &[f64],
    gamma: &[bool],
    kappa: f64,
    trials: usize,
    seed: u64,
) -> Result<TailBoundReport> {
    if trials < 2 {
        return Err(Error::invalid(format!("need at least 2 trials, got {trials}")));
    }
    let inputs = world.inputs(e_hat, p_hat, Some(gamma))?;
    let bound = estimators::cdr_tail_bound(&inputs, kappa)?;
    let values = trial_values(EstimatorKind::Cdr, world, e_hat, p_hat, Some(gamma), trials, seed)?;
    let mean = values.iter().copied().collect::<CompensatedSum>().value() / trials as f64;
    let covered = values.iter().filter(|v| (*v - mean).abs() <= bound).count();
    Ok(TailBoundReport {
        kappa,
        trials,
        bound,
        empirical_mean: mean,
        coverage: covered as f64 / trials as f64,
    })
}

/// A frozen estimator-level scenario on a world: imputed errors with a
/// noticeable share of poisonous pairs and a misspecified `p̂`.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub world: SyntheticWorld,
    pub e_hat: Vec<f64>,
    pub p_hat: Vec<f64>,
}

impl Scenario {
    pub fn default_with_seed(seed: u64) -> Result<Self> {
        let world = make_world(DEFAULT_WORLD_SIZE, DEFAULT_WORLD_SIZE, seed, 1.5)?;
        let e_hat = perturbed_imputation(world.errors()?, 0.8, seed);
        let p_hat = misspecified_propensity(&world.p_true, 0.3, world.floor, seed);
        Ok(Self { world, e_hat, p_hat })
    }

    pub fn oracle_gamma(&self) -> Vec<bool> {
        oracle_gamma(self.world.errors().expect("scenario worlds carry errors"), &self.e_hat)
    }

    /// `(label, γ)` for the all-0, all-1 and oracle retention patterns.
    pub fn gamma_patterns(&self) -> Vec<(&'static str, Vec<bool>)> {
        let n = self.world.len();
        vec![
            ("none", vec![false; n]),
            ("all", vec![true; n]),
            ("oracle", self.oracle_gamma()),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_bias_gives_uniform_propensities() {
        let w = make_world(10, 12, 3, 0.0).unwrap();
        assert!(w.p_true.iter().all(|&p| (p - w.p_true[0]).abs() < 1e-15));
        assert!((w.mean_propensity() - DEFAULT_MEAN_PROPENSITY).abs() < 1e-9);
    }

    #[test]
    fn positive_bias_favours_positive_labels() {
        let w = make_world(30, 30, 5, 2.0).unwrap();
        let mean_for = |want: bool| {
            let v: Vec<f64> = w.labels.iter().zip(&w.p_true).filter(|(l, _)| **l == want).map(|(_, p)| *p).collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        assert!(mean_for(true) > mean_for(false));
        assert!((w.mean_propensity() - DEFAULT_MEAN_PROPENSITY).abs() < 1e-6);
        assert!(w.p_true.iter().all(|&p| (WORLD_PROPENSITY_FLOOR..=1.0).contains(&p)));
    }

    #[test]
    fn worlds_are_deterministic() {
        assert_eq!(make_world(30, 30, 7, 1.0).unwrap(), make_world(30, 30, 7, 1.0).unwrap());
        assert_ne!(make_world(30, 30, 7, 1.0).unwrap(), make_world(30, 30, 8, 1.0).unwrap());
    }

    #[test]
    fn observations_follow_propensities() {
        let mut w = make_world(5, 5, 1, 0.0).unwrap();
        w.p_true = vec![1.0; 25];
        assert!(draw_observations(&w, 9).iter().all(|&o| o));

        let mut w = make_world(100, 100, 1, 0.0).unwrap();
        w.p_true = vec![w.floor; 10_000];
        let o = draw_observations(&w, 9);
        assert_eq!(o, draw_observations(&w, 9));
        let frac = o.iter().filter(|&&x| x).count() as f64 / 1e4;
        let se = (w.floor * (1.0 - w.floor) / 1e4).sqrt();
        assert!((frac - w.floor).abs() <= 3.0 * se, "{frac}");
    }

    #[test]
    fn dr_with_exact_imputation_has_no_spread() {
        let w = make_world(10, 10, 2, 1.0).unwrap();
        let e = w.errors().unwrap().to_vec();
        let r = empirical_moments(EstimatorKind::Dr, &w, &e, &w.p_true, None, 200, 4).unwrap();
        assert!(r.empirical_variance < 1e-25);
        assert_eq!(r.closed_form_variance, 0.0);
    }

    #[test]
    fn ips_with_true_propensity_is_unbiased() {
        let w = make_world(30, 30, 11, 1.0).unwrap();
        let e = w.errors().unwrap().to_vec();
        let r = empirical_moments(EstimatorKind::Ips, &w, &e, &w.p_true, None, DEFAULT_TRIALS, 12).unwrap();
        assert!(r.empirical_bias <= 3.0 * (r.closed_form_variance / r.trials as f64).sqrt());
        assert_eq!(r.closed_form_bias, 0.0);
    }

    #[test]
    fn oracle_cdr_has_the_smallest_paired_variance() {
        let s = Scenario::default_with_seed(3).unwrap();
        let g = s.oracle_gamma();
        let var = |kind, gamma: Option<&[bool]>| {
            empirical_moments(kind, &s.world, &s.e_hat, &s.p_hat, gamma, 2000, 5).unwrap().empirical_variance
        };
        let cdr = var(EstimatorKind::Cdr, Some(&g));
        assert!(cdr <= var(EstimatorKind::Ips, None));
        assert!(cdr <= var(EstimatorKind::Dr, None));
    }

    #[test]
    fn too_few_trials_or_draws() {
        let w = make_world(3, 3, 0, 0.0).unwrap();
        let e = w.errors().unwrap().to_vec();
        assert!(empirical_moments(EstimatorKind::Ips, &w, &e, &w.p_true, None, 1, 0).is_err());
        assert!(empirical_moments(EstimatorKind::Naive, &w, &e, &w.p_true, None, 10, 0).is_err());
        assert!(verify_lemma1(1.0, 0.1, 0.0, 0.0, 0.6, 100, 0).is_err());
    }

    #[test]
    fn concentrated_imputation_is_almost_always_safe() {
        let r = verify_lemma1(100.0, 1e-3, 0.0, 0.0, 0.9, MIN_LEMMA1_DRAWS, 1).unwrap();
        assert_eq!(r.probability, 1.0);
    }

    #[test]
    fn symmetric_case_at_rho_one_half() {
        let r = verify_lemma1(1.0, 0.4, 0.0, 0.0, 0.5, 100_000, 2).unwrap();
        assert!(r.threshold.is_infinite());
        assert!(r.holds(3.0), "{r:?}");
    }

    #[test]
    fn tail_bound_is_trivial_for_exact_imputation() {
        let w = make_world(10, 10, 2, 1.0).unwrap();
        let e = w.errors().unwrap().to_vec();
        let r = verify_tail_bound(&w, &e, &w.p_true, &[true; 100], 0.05, 500, 3).unwrap();
        assert_eq!(r.bound, 0.0);
        assert_eq!(r.coverage, 1.0);
    }

    #[test]
    fn grid_cells_respect_hypotheses() {
        let grid = lemma1_grid().unwrap();
        assert!(grid.len() >= 50, "{}", grid.len());
        for c in &grid {
            assert!(c.satisfies_hypotheses());
            assert!(c.below_threshold().unwrap());
        }
        assert!(grid.iter().any(|c| c.rho == 0.6));
    }

    #[test]
    fn samples_have_expected_sizes() {
        let w = make_world(20, 20, 1, 1.0).unwrap();
        assert_eq!(w.uniform_sample(40, 2).unwrap().len(), 40);
        assert!(w.uniform_sample(0, 2).is_err());
        let b = w.biased_sample(3).unwrap();
        assert!(b.records().iter().all(|r| r.rating == 0.0 || r.rating == 1.0));
        assert_eq!(w.ground_truth().unwrap().len(), 400);
    }

    #[test]
    fn export_writes_both_files() {
        let dir = tempfile::tempdir().unwrap();
        let w = make_world(4, 3, 1, 1.0).unwrap();
        w.export(dir.path()).unwrap();
        let back = crate::datamodel::load_triplets_with_dims(dir.path().join("world.tsv"), 4, 3).unwrap();
        assert_eq!(back, w.ground_truth().unwrap());
        let p = PropensityTable::load(dir.path().join("propensity.tsv"), 4, 3, w.floor).unwrap();
        assert_eq!(p, w.propensity_table().unwrap());
    }
}
