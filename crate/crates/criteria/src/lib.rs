//! Acceptance criteria for the CDR library, each evaluated against an
//! independent oracle (brute force, finite differences, Monte Carlo) and
//! reported as one PASS/FAIL line.
//!
//! Criteria 9 and 10 need the Coat dataset: a directory holding
//! `train.ascii` and `test.ascii`, found through the `COAT_DIR` environment
//! variable or at `data/coat` in the workspace root.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use cdr_core::estimators::{cdr_loss, dr_bias, dr_loss, ips_loss, EstimatorInputs};
use cdr_core::experiment::{
    prepare_dataset, run_cells, run_verify, synthetic_dataset, Cell, CellOutcome, DataSection, Dataset,
    ExperimentConfig, FilterSection, PrepareSpec, RawFormat, RunSection, Suite, SweepSection, SyntheticSpec,
    TrainSection, VerifyReport, DEFAULT_ETA_GRID,
};
use cdr_core::metrics::{auc, ndcg_at_k, rank_per_user, recall_at_k};
use cdr_core::models::{FactorModel, Link, LossKind};
use cdr_core::rng::{self, Stream};
use cdr_core::simulator::random_inputs;
use cdr_core::trainer::{imputation_objective, recommendation_objective, Batch, Method, PropensitySource};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const COAT_ENV: &str = "COAT_DIR";
pub const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

/// Reference values for the soft (non-gating) Coat comparisons.
pub const COAT_REFERENCE_CDR_AUC: f64 = 0.7502;
pub const COAT_REFERENCE_AUC_BAND: f64 = 0.02;
pub const COAT_REFERENCE_POISONOUS: f64 = 0.459;
pub const COAT_REFERENCE_POISONOUS_BAND: f64 = 0.10;

#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub id: u8,
    pub title: &'static str,
    pub passed: bool,
    pub detail: String,
    /// Soft references reported alongside, never affecting `passed`.
    pub notes: Vec<String>,
}

impl Outcome {
    fn new(id: u8, title: &'static str, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            id,
            title,
            passed,
            detail: detail.into(),
            notes: Vec::new(),
        }
    }

    fn error(id: u8, title: &'static str, err: impl std::fmt::Display) -> Self {
        Self::new(id, title, false, format!("error: {err}"))
    }

    pub fn line(&self) -> String {
        let mut s = format!(
            "{} #{:<2} {}: {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.title,
            self.detail
        );
        for n in &self.notes {
            s.push_str(&format!("\n          note: {n}"));
        }
        s
    }
}

fn workers() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

fn verify_outcome(id: u8, title: &'static str, suite: Suite, budget: Option<Duration>) -> Outcome {
    let started = Instant::now();
    let report: VerifyReport = match run_verify(suite, 0, workers()) {
        Ok(r) => r,
        Err(e) => return Outcome::error(id, title, e),
    };
    let elapsed = started.elapsed();
    let failures: Vec<String> = report.failures().map(|c| c.name.clone()).collect();
    let in_budget = budget.is_none_or(|b| elapsed <= b);
    let gating = report.checks.iter().filter(|c| c.gating).count();
    let mut detail = format!(
        "{} of {gating} checks failed in {:.1}s",
        failures.len(),
        elapsed.as_secs_f64()
    );
    if let Some(b) = budget {
        detail.push_str(&format!(" (budget {}s)", b.as_secs()));
    }
    if !failures.is_empty() {
        let shown: Vec<&str> = failures.iter().take(3).map(String::as_str).collect();
        detail.push_str(&format!("; first: {}", shown.join("; ")));
    }
    Outcome::new(id, title, report.passed && in_budget, detail)
}

/// Monte Carlo moments of IPS, DR and CDR against their closed forms.
pub fn closed_form_moments() -> Outcome {
    verify_outcome(
        1,
        "closed-form bias/variance within 3 SE",
        Suite::Formulas,
        Some(Duration::from_secs(60)),
    )
}

/// DR bias vanishes when either the propensities or the imputations are exact.
pub fn doubly_robust_property() -> Outcome {
    const INSTANCES: u64 = 100;
    let mut worst: f64 = 0.0;
    for k in 0..INSTANCES {
        let n = 1 + (rng::derive(2, k) % 80) as usize;
        let x = random_inputs(n, rng::derive(2, k));
        let p = x.p_true.clone().expect("random inputs carry p_true");
        let g = vec![true; n];
        let exact_p = EstimatorInputs::new(x.e.clone(), x.o.clone(), p.clone())
            .with_e_hat(x.e_hat.clone().expect("random inputs carry e_hat"))
            .with_p_true(p.clone())
            .with_gamma(g.clone());
        let exact_e = EstimatorInputs::new(x.e.clone(), x.o.clone(), x.p_hat.clone())
            .with_e_hat(x.e.clone())
            .with_p_true(p)
            .with_gamma(g);
        match (dr_bias(&exact_p), dr_bias(&exact_e)) {
            (Ok(a), Ok(b)) => worst = worst.max(a).max(b),
            (Err(e), _) | (_, Err(e)) => return Outcome::error(2, "DR bias vanishes", e),
        }
    }
    Outcome::new(
        2,
        "DR bias vanishes under exact p or exact e",
        worst <= 1e-12,
        format!("max |bias| {worst:e} over {INSTANCES} instances (limit 1e-12)"),
    )
}

/// CDR with all-0 / all-1 retention reproduces IPS / DR bit for bit.
pub fn estimator_identities() -> Outcome {
    const INSTANCES: u64 = 1000;
    let mut mismatches = 0;
    for k in 0..INSTANCES {
        let n = 1 + (rng::derive(3, k) % 100) as usize;
        let x = random_inputs(n, rng::derive(3, k));
        let none = x.clone().with_gamma(vec![false; n]);
        let all = x.with_gamma(vec![true; n]);
        let same = |a: cdr_core::Result<f64>, b: cdr_core::Result<f64>| match (a, b) {
            (Ok(a), Ok(b)) => a.to_bits() == b.to_bits(),
            _ => false,
        };
        if !same(cdr_loss(&none), ips_loss(&none)) || !same(cdr_loss(&all), dr_loss(&all)) {
            mismatches += 1;
        }
    }
    Outcome::new(
        3,
        "CDR(γ≡0) = IPS and CDR(γ≡1) = DR bit-exactly",
        mismatches == 0,
        format!("{mismatches} of {INSTANCES} instances differ"),
    )
}

/// Empirical coverage of the retention rule's guarantee over the grid.
pub fn retention_guarantee() -> Outcome {
    verify_outcome(
        4,
        "P(|ê−e| < e) ≥ ρ − 3 SE below the threshold",
        Suite::Lemma1,
        Some(Duration::from_secs(120)),
    )
}

pub fn tail_bound_coverage() -> Outcome {
    verify_outcome(5, "Hoeffding tail-bound coverage ≥ 1 − κ", Suite::Tailbound, None)
}

pub fn variance_dominance() -> Outcome {
    verify_outcome(
        6,
        "oracle-γ CDR variance ≤ min(IPS, DR)",
        Suite::Corollary,
        None,
    )
}

fn gradient_instance(seed: u64) -> (FactorModel, FactorModel, Batch, Vec<bool>) {
    let mut r = rng::stream(seed, Stream::Init);
    let (nu, ni) = (4, 5);
    let dim = r.random_range(1..=4);
    let rec = FactorModel::init_uniform(nu, ni, dim, Link::Sigmoid, 0.7, &mut r).expect("valid shape");
    let mut imp = FactorModel::init_uniform(nu, ni, dim, Link::Sigmoid, 0.7, &mut r).expect("valid shape");
    imp.global_bias = r.random_range(-0.5..0.5);
    let mut all: Vec<(usize, usize)> = (0..nu).flat_map(|u| (0..ni).map(move |i| (u, i))).collect();
    all.shuffle(&mut r);
    let n = r.random_range(1..=20);
    let mut batch = Batch::default();
    for &pair in &all[..n] {
        batch.pairs.push(pair);
        batch.observed.push(r.random::<f64>() < 0.6);
        batch.labels.push(if r.random::<bool>() { 1.0 } else { 0.0 });
        batch.p_hat.push(r.random_range(0.1..1.0));
    }
    let gamma = (0..n).map(|_| r.random::<bool>()).collect();
    (rec, imp, batch, gamma)
}

/// Largest relative error between an analytic gradient and central
/// differences of `f` around `model`.
fn max_relative_error(
    model: &FactorModel,
    grad: &FactorModel,
    f: impl Fn(&FactorModel) -> f64,
) -> f64 {
    const H: f64 = 1e-5;
    let mut worst: f64 = 0.0;
    for b in 0..5 {
        for k in 0..model.blocks()[b].len() {
            let eval = |delta: f64| {
                let mut m = model.clone();
                m.blocks_mut()[b][k] += delta;
                f(&m)
            };
            let numeric = (eval(H) - eval(-H)) / (2.0 * H);
            let analytic = grad.blocks()[b][k];
            let scale = analytic.abs().max(numeric.abs());
            if scale > 1e-8 {
                worst = worst.max((analytic - numeric).abs() / scale);
            }
        }
    }
    worst
}

/// Analytic training-loss gradients against central finite differences.
pub fn gradient_checks() -> Outcome {
    const INSTANCES: u64 = 40;
    let variants: [(&str, Method, &str); 6] = [
        ("naive", Method::Naive, "all"),
        ("IPS", Method::Ips, "all"),
        ("EIB", Method::Eib, "random"),
        ("DR", Method::DrJl, "all"),
        ("CDR", Method::DrJl, "random"),
        ("imputation", Method::DrJl, "-"),
    ];
    let mut worst: (f64, &str) = (0.0, "");
    for seed in 0..INSTANCES {
        for kind in [LossKind::Bce, LossKind::Rmse] {
            let (rec, imp, batch, random_gamma) = gradient_instance(seed);
            for &(name, method, gamma_mode) in &variants {
                let gamma = if gamma_mode == "all" {
                    vec![true; batch.len()]
                } else {
                    random_gamma.clone()
                };
                let err = if name == "imputation" {
                    let (_, g) = imputation_objective(&rec, &imp, &batch, kind).expect("valid batch");
                    max_relative_error(&imp, &g, |m| {
                        imputation_objective(&rec, m, &batch, kind).expect("valid batch").0
                    })
                } else {
                    let imp = method.uses_imputation().then_some(&imp);
                    let (_, g) = recommendation_objective(method, &rec, imp, &batch, &gamma, kind).expect("valid batch");
                    max_relative_error(&rec, &g, |m| {
                        recommendation_objective(method, m, imp, &batch, &gamma, kind)
                            .expect("valid batch")
                            .0
                    })
                };
                if err > worst.0 {
                    worst = (err, name);
                }
            }
        }
    }
    Outcome::new(
        7,
        "analytic gradients match finite differences",
        worst.0 <= 1e-4,
        format!(
            "max relative error {:.2e} ({}) over {INSTANCES} instances × 2 losses (limit 1e-4)",
            worst.0,
            if worst.1.is_empty() { "-" } else { worst.1 }
        ),
    )
}

struct MetricInstance {
    users: Vec<usize>,
    items: Vec<usize>,
    scores: Vec<f64>,
    labels: Vec<bool>,
}

fn metric_instance(seed: u64) -> MetricInstance {
    let mut r = ChaCha8Rng::seed_from_u64(rng::derive(8, seed));
    let (nu, ni) = (r.random_range(1..7), r.random_range(2..12));
    let mut m = MetricInstance {
        users: vec![],
        items: vec![],
        scores: vec![],
        labels: vec![],
    };
    for u in 0..nu {
        let mut items: Vec<usize> = (0..ni).collect();
        items.shuffle(&mut r);
        for &i in &items[..r.random_range(1..=ni)] {
            m.users.push(u);
            m.items.push(i);
            m.scores.push(r.random_range(0..8) as f64 / 7.0);
            m.labels.push(r.random::<f64>() < 0.4);
        }
    }
    let n = m.labels.len();
    m.labels[0] = true;
    if n == 1 {
        m.users.push(0);
        m.items.push(usize::MAX);
        m.scores.push(0.5);
        m.labels.push(false);
    } else if m.labels.iter().all(|&l| l) {
        m.labels[n - 1] = false;
    }
    m
}

fn brute_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for a in 0..scores.len() {
        for b in 0..scores.len() {
            if labels[a] && !labels[b] {
                pairs += 1.0;
                wins += if scores[a] > scores[b] {
                    1.0
                } else if scores[a] == scores[b] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    wins / pairs
}

fn brute_ranking(m: &MetricInstance, k: usize) -> (f64, f64) {
    let mut users: Vec<usize> = m.users.clone();
    users.sort_unstable();
    users.dedup();
    let (mut ndcg, mut recall, mut count) = (0.0, 0.0, 0.0);
    for u in users {
        let mut rows: Vec<(f64, usize, bool)> = (0..m.users.len())
            .filter(|&j| m.users[j] == u)
            .map(|j| (m.scores[j], m.items[j], m.labels[j]))
            .collect();
        let positives = rows.iter().filter(|r| r.2).count();
        if positives == 0 {
            continue;
        }
        rows.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let top = &rows[..k.min(rows.len())];
        let dcg: f64 = top
            .iter()
            .enumerate()
            .filter(|(_, r)| r.2)
            .map(|(pos, _)| 1.0 / ((pos + 2) as f64).log2())
            .sum();
        let idcg: f64 = (0..positives.min(k)).map(|p| 1.0 / ((p + 2) as f64).log2()).sum();
        ndcg += dcg / idcg;
        recall += top.iter().filter(|r| r.2).count() as f64 / positives as f64;
        count += 1.0;
    }
    (ndcg / count, recall / count)
}

/// AUC, NDCG@5 and Recall@5 against brute-force references.
pub fn metric_oracles() -> Outcome {
    const INSTANCES: u64 = 200;
    const K: usize = 5;
    let mut worst: f64 = 0.0;
    for seed in 0..INSTANCES {
        let m = metric_instance(seed);
        let ranked = match rank_per_user(&m.users, &m.items, &m.scores, &m.labels) {
            Ok(r) => r,
            Err(e) => return Outcome::error(8, "metric oracles", e),
        };
        let (ndcg, recall) = brute_ranking(&m, K);
        let got = (
            auc(&m.scores, &m.labels),
            ndcg_at_k(&ranked, K),
            recall_at_k(&ranked, K),
        );
        match got {
            (Ok(a), Ok(n), Ok(r)) => {
                worst = worst
                    .max((a - brute_auc(&m.scores, &m.labels)).abs())
                    .max((n - ndcg).abs())
                    .max((r - recall).abs());
            }
            (Err(e), _, _) | (_, Err(e), _) | (_, _, Err(e)) => return Outcome::error(8, "metric oracles", e),
        }
    }
    Outcome::new(
        8,
        "AUC / NDCG@5 / Recall@5 match brute force",
        worst <= 1e-12,
        format!("max deviation {worst:e} over {INSTANCES} instances (limit 1e-12)"),
    )
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Directory holding the Coat release, if one is available.
pub fn coat_dir() -> Option<PathBuf> {
    let candidate = std::env::var_os(COAT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/coat"));
    (candidate.join("train.ascii").is_file() && candidate.join("test.ascii").is_file()).then_some(candidate)
}

/// Hyperparameter grid searched on seed 0's validation AUC.
pub const COAT_LEARNING_RATES: [f64; 2] = [0.01, 0.05];
pub const COAT_ETAS: [f64; 3] = [0.5, 1.0, 3.0];

fn coat_config(dir: &Path, learning_rate: f64) -> ExperimentConfig {
    ExperimentConfig {
        run: RunSection {
            seeds: SEEDS.to_vec(),
            workers: workers(),
            k: 5,
            ..RunSection::default()
        },
        data: DataSection { dir: dir.to_path_buf() },
        train: TrainSection {
            learning_rate,
            imputation_learning_rate: learning_rate,
            propensity: PropensitySource::Popularity,
            ..TrainSection::default()
        },
        filter: FilterSection::default(),
        sweep: SweepSection::default(),
    }
}

/// Tuned, five-seed Coat results for EIB and DRJL with and without the filter.
#[derive(Debug, Clone)]
pub struct CoatRun {
    /// `(label, outcomes in seed order)` for EIB, EIB+CDR, DRJL, DRJL+CDR.
    pub variants: Vec<(String, Vec<CellOutcome>)>,
    pub wall_time: Duration,
}

impl CoatRun {
    fn outcomes(&self, label: &str) -> &[CellOutcome] {
        self.variants
            .iter()
            .find(|(l, _)| l == label)
            .map(|(_, o)| o.as_slice())
            .unwrap_or(&[])
    }

    pub fn median_auc(&self, label: &str) -> f64 {
        median(self.outcomes(label).iter().map(|o| o.metrics.auc).collect())
    }

    pub fn poisonous(&self, label: &str) -> Vec<f64> {
        self.outcomes(label)
            .iter()
            .map(|o| o.metrics.poisonous_ratio.unwrap_or(f64::NAN))
            .collect()
    }
}

/// Prepares Coat under `work`, tunes each variant on seed 0 and trains all
/// seeds with the chosen setting.
pub fn run_coat(coat: &Path, work: &Path) -> cdr_core::Result<CoatRun> {
    let started = Instant::now();
    let data_dir = work.join("coat");
    let data: Dataset = prepare_dataset(
        &PrepareSpec {
            name: "coat".into(),
            train: coat.join("train.ascii"),
            test: coat.join("test.ascii"),
            format: RawFormat::Matrix,
            threshold: 3.0,
            validation_fraction: 0.1,
            seed: 0,
        },
        &data_dir,
    )?;
    let mut variants = Vec::new();
    for method in [Method::Eib, Method::DrJl] {
        for cdr in [false, true] {
            let etas: &[f64] = if cdr { &COAT_ETAS } else { &[COAT_ETAS[0]] };
            let mut best: Option<(f64, f64, f64)> = None;
            for &lr in &COAT_LEARNING_RATES {
                let cfg = coat_config(&data_dir, lr);
                let cells: Vec<Cell> = etas
                    .iter()
                    .map(|&eta| Cell {
                        seed: 0,
                        method,
                        cdr,
                        eta,
                    })
                    .collect();
                for (result, outcome) in run_cells(&cfg, &data, &cells, false)? {
                    let val = result.history[result.best_epoch - 1].val_auc;
                    if best.is_none_or(|b| val > b.0) {
                        best = Some((val, lr, outcome.cell.eta));
                    }
                }
            }
            let (_, lr, eta) = best.expect("grid is non-empty");
            let cfg = coat_config(&data_dir, lr);
            let cells: Vec<Cell> = SEEDS
                .iter()
                .map(|&seed| Cell { seed, method, cdr, eta })
                .collect();
            let outcomes: Vec<CellOutcome> = run_cells(&cfg, &data, &cells, true)?
                .into_iter()
                .map(|(_, o)| o)
                .collect();
            variants.push((cells[0].label(), outcomes));
        }
    }
    Ok(CoatRun {
        variants,
        wall_time: started.elapsed(),
    })
}

fn coat_missing(id: u8, title: &'static str) -> Outcome {
    Outcome::new(
        id,
        title,
        false,
        format!("Coat data not found; set {COAT_ENV} to a directory with train.ascii and test.ascii (or place them in data/coat)"),
    )
}

/// Median test AUC ordering on Coat with and without the filter.
pub fn coat_ordering(run: Option<&cdr_core::Result<CoatRun>>) -> Outcome {
    const TITLE: &str = "Coat: CDR does not lower median AUC (EIB, DRJL)";
    let run = match run {
        None => return coat_missing(9, TITLE),
        Some(Err(e)) => return Outcome::error(9, TITLE, e),
        Some(Ok(r)) => r,
    };
    let m = |l: &str| run.median_auc(l);
    let (eib, eib_cdr, dr, dr_cdr) = (m("EIB"), m("EIB+CDR"), m("DRJL"), m("DRJL+CDR"));
    let in_budget = run.wall_time <= Duration::from_secs(15 * 60);
    let mut o = Outcome::new(
        9,
        TITLE,
        dr_cdr >= dr && eib_cdr >= eib && in_budget,
        format!(
            "median AUC DRJL {dr:.4} vs DRJL+CDR {dr_cdr:.4}; EIB {eib:.4} vs EIB+CDR {eib_cdr:.4}; {:.0}s (budget 900s)",
            run.wall_time.as_secs_f64()
        ),
    );
    o.notes.push(format!(
        "DRJL+CDR median AUC {dr_cdr:.4} vs reference {COAT_REFERENCE_CDR_AUC} ± {COAT_REFERENCE_AUC_BAND}: {}",
        if (dr_cdr - COAT_REFERENCE_CDR_AUC).abs() <= COAT_REFERENCE_AUC_BAND {
            "within"
        } else {
            "outside"
        }
    ));
    o
}

/// Poisonous-imputation ratio with and without the filter on Coat.
pub fn coat_poisonous(run: Option<&cdr_core::Result<CoatRun>>) -> Outcome {
    const TITLE: &str = "Coat: CDR lowers the poisonous ratio in ≥ 4 of 5 seeds";
    let run = match run {
        None => return coat_missing(10, TITLE),
        Some(Err(e)) => return Outcome::error(10, TITLE, e),
        Some(Ok(r)) => r,
    };
    let (plain, filtered) = (run.poisonous("DRJL"), run.poisonous("DRJL+CDR"));
    let wins = plain.iter().zip(&filtered).filter(|(a, b)| b < a).count();
    let mut o = Outcome::new(
        10,
        TITLE,
        wins >= 4,
        format!("lower in {wins} of {} seeds; DRJL {plain:.3?}, DRJL+CDR {filtered:.3?}", plain.len()),
    );
    let m = median(plain);
    o.notes.push(format!(
        "DRJL median poisonous ratio {:.1}% vs reference {:.1}% ± {:.0} pp: {}",
        100.0 * m,
        100.0 * COAT_REFERENCE_POISONOUS,
        100.0 * COAT_REFERENCE_POISONOUS_BAND,
        if (m - COAT_REFERENCE_POISONOUS).abs() <= COAT_REFERENCE_POISONOUS_BAND {
            "within"
        } else {
            "outside"
        }
    ));
    o
}

/// Synthetic η-sweep setting: RMSE errors, true propensities, DRJL+CDR.
pub fn sweep_config() -> ExperimentConfig {
    ExperimentConfig {
        run: RunSection {
            workers: workers(),
            ..RunSection::default()
        },
        data: DataSection { dir: PathBuf::new() },
        train: TrainSection {
            method: Method::DrJl.to_string(),
            learning_rate: 0.05,
            batch_size: 256,
            dim: 16,
            init_half_width: 0.1,
            patience: 5,
            loss: LossKind::Rmse,
            propensity: PropensitySource::Oracle,
            ..TrainSection::default()
        },
        filter: FilterSection {
            enabled: true,
            ..FilterSection::default()
        },
        sweep: SweepSection::default(),
    }
}

/// Test AUC per η of the default grid for one seed of the sweep world.
pub fn sweep_aucs(seed: u64) -> cdr_core::Result<Vec<f64>> {
    let data = synthetic_dataset(&SyntheticSpec::sweep_world(seed))?;
    let cells: Vec<Cell> = DEFAULT_ETA_GRID
        .iter()
        .map(|&eta| Cell {
            seed,
            method: Method::DrJl,
            cdr: true,
            eta,
        })
        .collect();
    Ok(run_cells(&sweep_config(), &data, &cells, false)?
        .into_iter()
        .map(|(_, o)| o.metrics.auc)
        .collect())
}

/// Some interior η strictly beats both ends of the grid in ≥ 4 of 5 seeds.
pub fn eta_tradeoff() -> Outcome {
    const TITLE: &str = "AUC-vs-η has an interior optimum in ≥ 4 of 5 seeds";
    let last = DEFAULT_ETA_GRID.len() - 1;
    let mut wins = 0;
    let mut rows = Vec::new();
    for seed in SEEDS {
        let aucs = match sweep_aucs(seed) {
            Ok(a) => a,
            Err(e) => return Outcome::error(11, TITLE, e),
        };
        let (best_k, best) = aucs[1..last]
            .iter()
            .enumerate()
            .fold((0, f64::MIN), |acc, (k, &a)| if a > acc.1 { (k + 1, a) } else { acc });
        let win = best > aucs[0] && best > aucs[last];
        wins += win as usize;
        rows.push(format!(
            "seed {seed}: η={} {best:.4} vs {:.4}/{:.4}",
            DEFAULT_ETA_GRID[best_k], aucs[0], aucs[last]
        ));
    }
    Outcome::new(11, TITLE, wins >= 4, format!("{wins} of {} seeds; {}", SEEDS.len(), rows.join("; ")))
}

/// Every criterion in order; the Coat experiment runs once when available.
pub fn run_all(work: &Path) -> Vec<Outcome> {
    let mut out = vec![
        closed_form_moments(),
        doubly_robust_property(),
        estimator_identities(),
        retention_guarantee(),
        tail_bound_coverage(),
        variance_dominance(),
        gradient_checks(),
        metric_oracles(),
    ];
    let coat = coat_dir().map(|dir| run_coat(&dir, work));
    out.push(coat_ordering(coat.as_ref()));
    out.push(coat_poisonous(coat.as_ref()));
    out.push(eta_tradeoff());
    out
}
