//! Experiment configuration, prepared datasets, and the runners behind the
//! command line: training, evaluation, η sweeps, poisonous-imputation
//! analysis and the verification suites.
//!
//! Every run directory receives a `manifest.json` before any result file.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::{
    binarize, load_raw_triplets, load_rating_matrix, load_triplets, load_triplets_with_dims, split_unbiased,
    write_triplets, IdMap, RatingTable, SplitSpec,
};
use crate::error::{Error, Result};
use crate::estimators::{self, EstimatorKind};
use crate::filter::FilterConfig;
use crate::metrics::{analyze_poisonous, evaluate, MetricsReport};
use crate::models::{estimate_propensity_popularity, FactorModel, LossKind, PropensityTable};
use crate::rng;
use crate::simulator::{
    empirical_moments, lemma1_grid, make_world_with, random_inputs, verify_lemma1_cell, verify_tail_bound, Scenario,
    WorldConfig, DEFAULT_TRIALS,
};
use crate::trainer::{train, Method, PropensitySource, TrainConfig, TrainResult};

pub const LIBRARY_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const MANIFEST_FILE: &str = "manifest.json";
pub const META_FILE: &str = "meta.json";
pub const ENV_PREFIX: &str = "CDR_";
/// The η grid used for sweeps unless a config overrides it.
pub const DEFAULT_ETA_GRID: [f64; 8] = [0.1, 0.5, 1.0, 3.0, 5.0, 7.0, 10.0, 50.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub output: PathBuf,
    pub seeds: Vec<u64>,
    pub workers: usize,
    pub k: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            output: PathBuf::from("runs"),
            seeds: vec![0],
            workers: 1,
            k: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// A directory produced by `prepare`.
    pub dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub method: String,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub imputation_learning_rate: f64,
    pub imputation_weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub dim: usize,
    pub loss: LossKind,
    pub propensity: PropensitySource,
    pub propensity_exponent: f64,
    pub propensity_floor: f64,
    pub patience: usize,
    pub init_half_width: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            method: t.method.to_string(),
            learning_rate: t.learning_rate,
            weight_decay: t.weight_decay,
            imputation_learning_rate: t.imputation_learning_rate,
            imputation_weight_decay: t.imputation_weight_decay,
            batch_size: t.batch_size,
            epochs: t.epochs,
            dim: t.dim,
            loss: t.loss_kind,
            propensity: t.propensity_source,
            propensity_exponent: 0.5,
            propensity_floor: crate::models::DEFAULT_PROPENSITY_FLOOR,
            patience: t.patience,
            init_half_width: t.init_half_width,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterSection {
    pub enabled: bool,
    pub eta: f64,
    pub passes: usize,
    pub dropout_rate: f64,
}

impl Default for FilterSection {
    fn default() -> Self {
        let f = FilterConfig::default();
        Self {
            enabled: false,
            eta: f.eta,
            passes: f.passes,
            dropout_rate: f.dropout_rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub etas: Vec<f64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            etas: DEFAULT_ETA_GRID.to_vec(),
        }
    }
}

/// The experiment file: `[run]`, `[data]`, `[train]`, `[filter]`, `[sweep]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub run: RunSection,
    pub data: DataSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub filter: FilterSection,
    #[serde(default)]
    pub sweep: SweepSection,
}

const SECTIONS: [&str; 5] = ["run", "data", "train", "filter", "sweep"];

/// Applies `CDR_<SECTION>_<KEY>=value` overrides to a parsed table. Values
/// are read as TOML when they parse (`0.05`, `true`, `[0, 1]`) and as plain
/// strings otherwise. Variables naming no known section are ignored.
pub fn apply_env_overrides<I>(table: &mut toml::Table, vars: I) -> Result<()>
where
    I: IntoIterator<Item = (String, String)>,
{
    for (name, raw) in vars {
        let Some(rest) = name.strip_prefix(ENV_PREFIX) else {
            continue;
        };
        let rest = rest.to_ascii_lowercase();
        let Some((section, key)) = SECTIONS
            .iter()
            .find_map(|s| rest.strip_prefix(&format!("{s}_")).map(|k| (*s, k.to_string())))
        else {
            continue;
        };
        if key.is_empty() {
            return Err(Error::Config(format!("{name}: missing key after section")));
        }
        let value = format!("v = {raw}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.clone()));
        let entry = table
            .entry(section.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        match entry {
            toml::Value::Table(t) => {
                t.insert(key, value);
            }
            _ => return Err(Error::Config(format!("{section} must be a table"))),
        }
    }
    Ok(())
}

impl ExperimentConfig {
    /// Reads a config file, applies `CDR_*` environment overrides, resolves
    /// relative paths against the file's directory and validates.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml_str(&text, base, std::env::vars())
    }

    pub fn from_toml_str<I>(text: &str, base: &Path, env: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        apply_env_overrides(&mut table, env)?;
        let mut cfg: Self = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        if cfg.data.dir.is_relative() {
            cfg.data.dir = base.join(&cfg.data.dir);
        }
        if cfg.run.output.is_relative() {
            cfg.run.output = base.join(&cfg.run.output);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.run.seeds.is_empty() {
            return bad("run.seeds must not be empty".into());
        }
        if self.run.workers == 0 {
            return bad("run.workers must be >= 1".into());
        }
        if self.run.k == 0 {
            return bad("run.k must be >= 1".into());
        }
        if self.sweep.etas.is_empty() {
            return bad("sweep.etas must not be empty".into());
        }
        if let Some(e) = self.sweep.etas.iter().find(|e| !(**e > 0.0 && e.is_finite())) {
            return bad(format!("sweep.etas must be positive, got {e}"));
        }
        self.method()?;
        for file in [META_FILE, "train.tsv", "validation.tsv", "test.tsv"] {
            let p = self.data.dir.join(file);
            if !p.is_file() {
                return bad(format!("data.dir: missing {}", p.display()));
            }
        }
        if self.train.propensity != PropensitySource::Popularity && !self.data.dir.join("propensity.tsv").is_file() {
            return bad(format!(
                "train.propensity = {:?} needs {}",
                self.train.propensity,
                self.data.dir.join("propensity.tsv").display()
            ));
        }
        self.train_config(self.run.seeds[0], self.method()?, self.filter.enabled, self.filter.eta)
            .validate()
    }

    pub fn method(&self) -> Result<Method> {
        self.train
            .method
            .parse()
            .map_err(|e: String| Error::Config(format!("train.method: {e}")))
    }

    pub fn train_config(&self, seed: u64, method: Method, cdr: bool, eta: f64) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            method,
            cdr_enabled: cdr,
            eta,
            learning_rate: t.learning_rate,
            weight_decay: t.weight_decay,
            batch_size: t.batch_size,
            epochs: t.epochs,
            dim: t.dim,
            loss_kind: t.loss,
            seed,
            propensity_source: t.propensity,
            patience: t.patience,
            imputation_learning_rate: t.imputation_learning_rate,
            imputation_weight_decay: t.imputation_weight_decay,
            dropout_passes: self.filter.passes,
            dropout_rate: self.filter.dropout_rate,
            init_half_width: t.init_half_width,
        }
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Description of a prepared dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub name: String,
    pub source: String,
    pub seed: u64,
    pub num_users: usize,
    pub num_items: usize,
    pub train: usize,
    pub validation: usize,
    pub test: usize,
    /// Whether `propensity.tsv` holds known true propensities.
    pub has_propensity: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub train: RatingTable,
    pub validation: RatingTable,
    pub test: RatingTable,
    pub propensity: Option<PropensityTable>,
}

impl Dataset {
    /// Writes `train.tsv`, `validation.tsv`, `test.tsv`, the optional
    /// `propensity.tsv`, and `meta.json`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_triplets(&self.train, dir.join("train.tsv"))?;
        write_triplets(&self.validation, dir.join("validation.tsv"))?;
        write_triplets(&self.test, dir.join("test.tsv"))?;
        if let Some(p) = &self.propensity {
            p.save(dir.join("propensity.tsv"))?;
        }
        write_json(&dir.join(META_FILE), &self.meta)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta_path = dir.join(META_FILE);
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: DatasetMeta =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", meta_path.display())))?;
        let (nu, ni) = (meta.num_users, meta.num_items);
        let propensity = if meta.has_propensity {
            Some(PropensityTable::load(dir.join("propensity.tsv"), nu, ni, 1e-6)?)
        } else {
            None
        };
        Ok(Self {
            train: load_triplets_with_dims(dir.join("train.tsv"), nu, ni)?,
            validation: load_triplets_with_dims(dir.join("validation.tsv"), nu, ni)?,
            test: load_triplets_with_dims(dir.join("test.tsv"), nu, ni)?,
            propensity,
            meta,
        })
    }

    /// `p̂` for training according to `source`.
    pub fn propensities(&self, source: PropensitySource, exponent: f64, floor: f64) -> Result<PropensityTable> {
        match source {
            PropensitySource::Popularity => estimate_propensity_popularity(&self.train, exponent, floor),
            PropensitySource::Oracle | PropensitySource::File => self
                .propensity
                .clone()
                .ok_or_else(|| Error::Config(format!("dataset {} has no propensity.tsv", self.meta.name))),
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RawFormat {
    /// Dense whitespace matrix, one row per user, `0` = unrated.
    Matrix,
    /// `user item rating` with dense 0-based indices.
    Triplets,
    /// `user item rating` with arbitrary ids, remapped densely.
    Raw,
}

impl std::str::FromStr for RawFormat {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "matrix" => Ok(Self::Matrix),
            "triplets" => Ok(Self::Triplets),
            "raw" => Ok(Self::Raw),
            _ => Err(format!("unknown format {s:?} (expected matrix, triplets or raw)")),
        }
    }
}

/// Inputs of a real-data preparation.
#[derive(Debug, Clone, PartialEq)]
pub struct PrepareSpec {
    pub name: String,
    pub train: PathBuf,
    pub test: PathBuf,
    pub format: RawFormat,
    pub threshold: f64,
    pub validation_fraction: f64,
    pub seed: u64,
}

/// Binarizes a biased training log and an unbiased log, splits the latter
/// into validation and test, and writes the dataset directory.
pub fn prepare_dataset(spec: &PrepareSpec, out: impl AsRef<Path>) -> Result<Dataset> {
    for p in [&spec.train, &spec.test] {
        if !p.is_file() {
            return Err(Error::Io {
                path: p.clone(),
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "input file not found"),
            });
        }
    }
    let out = out.as_ref();
    let (train, unbiased) = match spec.format {
        RawFormat::Matrix => (load_rating_matrix(&spec.train)?, load_rating_matrix(&spec.test)?),
        RawFormat::Triplets => (load_triplets(&spec.train)?, load_triplets(&spec.test)?),
        RawFormat::Raw => {
            let mut ids = IdMap::default();
            let train = load_raw_triplets(&spec.train, &mut ids)?;
            let test = load_raw_triplets(&spec.test, &mut ids)?;
            fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
            for (file, text) in [("users.tsv", ids.users_tsv()), ("items.tsv", ids.items_tsv())] {
                let p = out.join(file);
                fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
            }
            (train, test)
        }
    };
    let nu = train.num_users().max(unbiased.num_users());
    let ni = train.num_items().max(unbiased.num_items());
    let train = binarize(&train, spec.threshold).with_dims(nu, ni)?;
    let unbiased = binarize(&unbiased, spec.threshold).with_dims(nu, ni)?;
    let (validation, test) = split_unbiased(
        &unbiased,
        SplitSpec {
            validation_fraction: spec.validation_fraction,
            seed: spec.seed,
        },
    )?;
    let dataset = Dataset {
        meta: DatasetMeta {
            name: spec.name.clone(),
            source: format!("{:?}", spec.format).to_lowercase(),
            seed: spec.seed,
            num_users: nu,
            num_items: ni,
            train: train.len(),
            validation: validation.len(),
            test: test.len(),
            has_propensity: false,
        },
        train,
        validation,
        test,
        propensity: None,
    };
    dataset.save(out)?;
    Ok(dataset)
}

/// A synthetic dataset: one biased draw for training and a uniformly
/// sampled unbiased set split into validation and test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub world: WorldConfig,
    /// Share of all pairs revealed as unbiased (validation + test).
    pub unbiased_fraction: f64,
    pub validation_fraction: f64,
}

impl SyntheticSpec {
    /// The 40×40 world used for η sweeps.
    pub fn sweep_world(seed: u64) -> Self {
        let mut world = WorldConfig::new(40, 40, seed, 3.0);
        world.mean_propensity = 0.2;
        Self {
            world,
            unbiased_fraction: 0.35,
            validation_fraction: 0.3,
        }
    }

    /// The small strongly biased world used to compare methods.
    pub fn small_biased_world(seed: u64) -> Self {
        let mut world = WorldConfig::new(20, 20, seed, 3.0);
        world.mean_propensity = 0.3;
        Self {
            world,
            unbiased_fraction: 0.35,
            validation_fraction: 0.3,
        }
    }
}

pub fn synthetic_dataset(spec: &SyntheticSpec) -> Result<Dataset> {
    if !(spec.unbiased_fraction > 0.0 && spec.unbiased_fraction <= 1.0) {
        return Err(Error::invalid(format!(
            "unbiased_fraction must lie in (0, 1], got {}",
            spec.unbiased_fraction
        )));
    }
    let world = make_world_with(&spec.world)?;
    let seed = spec.world.seed;
    let train = world.biased_sample(seed)?;
    let count = ((world.len() as f64 * spec.unbiased_fraction).round() as usize).max(2);
    let unbiased = world.uniform_sample(count, seed)?;
    let (validation, test) = split_unbiased(
        &unbiased,
        SplitSpec {
            validation_fraction: spec.validation_fraction,
            seed,
        },
    )?;
    Ok(Dataset {
        meta: DatasetMeta {
            name: format!("synthetic-{}x{}", world.num_users, world.num_items),
            source: "synthetic".into(),
            seed,
            num_users: world.num_users,
            num_items: world.num_items,
            train: train.len(),
            validation: validation.len(),
            test: test.len(),
            has_propensity: true,
        },
        train,
        validation,
        test,
        propensity: Some(world.propensity_table()?),
    })
}

pub fn prepare_synthetic(spec: &SyntheticSpec, out: impl AsRef<Path>) -> Result<Dataset> {
    let d = synthetic_dataset(spec)?;
    d.save(out)?;
    Ok(d)
}

/// Provenance of one run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub library_version: String,
    pub command: String,
    pub seeds: Vec<u64>,
    pub config: ExperimentConfig,
    pub artifacts: Vec<String>,
    /// Seconds per artifact-producing cell; empty until the run finishes.
    pub wall_times: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn new(command: &str, seeds: Vec<u64>, config: &ExperimentConfig, artifacts: Vec<String>) -> Self {
        Self {
            library_version: LIBRARY_VERSION.to_string(),
            command: command.to_string(),
            seeds,
            config: config.clone(),
            artifacts,
            wall_times: BTreeMap::new(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_json(&dir.join(MANIFEST_FILE), self)
    }
}

/// One `(seed, method, η)` training cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub seed: u64,
    pub method: Method,
    pub cdr: bool,
    pub eta: f64,
}

impl Cell {
    pub fn label(&self) -> String {
        if self.cdr && self.method.uses_imputation() {
            format!("{}+CDR", self.method)
        } else {
            self.method.to_string()
        }
    }

    fn eta_column(&self) -> Option<f64> {
        (self.cdr && self.method.uses_imputation()).then_some(self.eta)
    }
}

/// Test metrics of a trained cell plus bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellOutcome {
    pub cell: Cell,
    pub label: String,
    pub dataset: String,
    pub metrics: MetricsReport,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub wall_time: f64,
    pub manifest: String,
}

impl CellOutcome {
    pub fn csv_row(&self) -> String {
        self.metrics
            .csv_row(&self.label, &self.dataset, self.cell.seed, self.cell.eta_column())
    }
}

/// Trains one cell and scores it on the test set; with `poisonous`, also
/// reports the poisonous ratio (filtered by the cell's own γ rule when CDR
/// is on).
pub fn run_cell(
    cfg: &ExperimentConfig,
    data: &Dataset,
    propensities: &PropensityTable,
    cell: &Cell,
    poisonous: bool,
) -> Result<(TrainResult, CellOutcome)> {
    let tc = cfg.train_config(cell.seed, cell.method, cell.cdr, cell.eta);
    let result = train(&data.train, &data.validation, propensities, &tc)?;
    let mut metrics = evaluate(&result.recommendation_model, &data.test, cfg.run.k)?;
    if poisonous && cell.method.uses_imputation() {
        let filter = tc.applies_filter().then(|| FilterConfig {
            seed: rng::derive(cell.seed, u64::MAX),
            ..tc.filter_config(0)
        });
        metrics.poisonous_ratio = Some(analyze_poisonous(
            &result.recommendation_model,
            result.imputation_model.as_ref(),
            &data.test,
            tc.loss_kind,
            filter.as_ref(),
        )?);
    }
    let outcome = CellOutcome {
        cell: *cell,
        label: cell.label(),
        dataset: data.meta.name.clone(),
        metrics,
        best_epoch: result.best_epoch,
        epochs_run: result.history.len(),
        wall_time: result.wall_time,
        manifest: MANIFEST_FILE.into(),
    };
    Ok((result, outcome))
}

fn thread_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))
}

/// Runs independent cells concurrently on `workers` threads; results come
/// back in input order.
pub fn run_cells(
    cfg: &ExperimentConfig,
    data: &Dataset,
    cells: &[Cell],
    poisonous: bool,
) -> Result<Vec<(TrainResult, CellOutcome)>> {
    let p = data.propensities(cfg.train.propensity, cfg.train.propensity_exponent, cfg.train.propensity_floor)?;
    thread_pool(cfg.run.workers)?.install(|| {
        cells
            .par_iter()
            .map(|c| run_cell(cfg, data, &p, c, poisonous))
            .collect()
    })
}

fn seed_dir(root: &Path, label: &str, seed: u64) -> PathBuf {
    root.join(label.replace('+', "-")).join(format!("seed-{seed}"))
}

/// `train`: one run directory per seed with checkpoints, history, metrics
/// and its manifest. Returns the outcomes in seed order.
pub fn run_train(cfg: &ExperimentConfig) -> Result<Vec<CellOutcome>> {
    let data = Dataset::load(&cfg.data.dir)?;
    let method = cfg.method()?;
    let cells: Vec<Cell> = cfg
        .run
        .seeds
        .iter()
        .map(|&seed| Cell {
            seed,
            method,
            cdr: cfg.filter.enabled,
            eta: cfg.filter.eta,
        })
        .collect();
    let root = cfg.run.output.join("train");
    let mut artifacts = vec!["recommendation.json", "history.csv", "metrics.json"];
    if method.uses_imputation() {
        artifacts.push("imputation.json");
    }
    let artifacts: Vec<String> = artifacts.into_iter().map(String::from).collect();
    for c in &cells {
        RunManifest::new("train", vec![c.seed], cfg, artifacts.clone()).write(&seed_dir(&root, &c.label(), c.seed))?;
    }
    let results = run_cells(cfg, &data, &cells, true)?;
    let mut outcomes = Vec::new();
    for (result, outcome) in results {
        let dir = seed_dir(&root, &outcome.label, outcome.cell.seed);
        result.recommendation_model.save(dir.join("recommendation.json"))?;
        if let Some(imp) = &result.imputation_model {
            imp.save(dir.join("imputation.json"))?;
        }
        let history = dir.join("history.csv");
        fs::write(&history, result.history_csv()).map_err(|e| Error::io(&history, e))?;
        write_json(&dir.join("metrics.json"), &outcome)?;
        let mut manifest = RunManifest::new("train", vec![outcome.cell.seed], cfg, artifacts.clone());
        manifest.wall_times.insert(outcome.label.clone(), outcome.wall_time);
        manifest.write(&dir)?;
        outcomes.push(outcome);
    }
    Ok(outcomes)
}

/// `MetricsReport::CSV_HEADER` followed by one row per outcome.
pub fn results_csv(outcomes: &[CellOutcome]) -> String {
    let mut out = String::from(MetricsReport::CSV_HEADER);
    out.push('\n');
    for o in outcomes {
        out.push_str(&o.csv_row());
        out.push('\n');
    }
    out
}

fn finish_manifest(dir: &Path, mut manifest: RunManifest, outcomes: &[CellOutcome]) -> Result<()> {
    for o in outcomes {
        let key = format!("{}/seed-{}/eta-{}", o.label, o.cell.seed, o.cell.eta);
        manifest.wall_times.insert(key, o.wall_time);
    }
    manifest.write(dir)
}

/// `sweep-eta`: trains the configured imputation method with CDR at every
/// η for every seed; writes `sweep.csv` and one `sweep-seed-<s>.csv` each.
pub fn run_sweep_eta(cfg: &ExperimentConfig) -> Result<Vec<CellOutcome>> {
    let method = cfg.method()?;
    if !method.uses_imputation() {
        return Err(Error::Config(format!("train.method: {method} has no imputation to filter")));
    }
    let data = Dataset::load(&cfg.data.dir)?;
    let cells: Vec<Cell> = cfg
        .run
        .seeds
        .iter()
        .flat_map(|&seed| {
            cfg.sweep.etas.iter().map(move |&eta| Cell {
                seed,
                method,
                cdr: true,
                eta,
            })
        })
        .collect();
    let dir = cfg.run.output.join("sweep-eta");
    let mut artifacts = vec!["sweep.csv".to_string()];
    artifacts.extend(cfg.run.seeds.iter().map(|s| format!("sweep-seed-{s}.csv")));
    let manifest = RunManifest::new("sweep-eta", cfg.run.seeds.clone(), cfg, artifacts);
    manifest.write(&dir)?;
    let outcomes: Vec<CellOutcome> = run_cells(cfg, &data, &cells, false)?.into_iter().map(|(_, o)| o).collect();
    write_text(&dir.join("sweep.csv"), &results_csv(&outcomes))?;
    for &seed in &cfg.run.seeds {
        let rows: Vec<CellOutcome> = outcomes.iter().filter(|o| o.cell.seed == seed).cloned().collect();
        write_text(&dir.join(format!("sweep-seed-{seed}.csv")), &results_csv(&rows))?;
    }
    finish_manifest(&dir, manifest, &outcomes)?;
    Ok(outcomes)
}

/// `analyze-poisonous`: trains the configured imputation method with and
/// without CDR per seed and writes `poisonous.csv`.
pub fn run_analyze_poisonous(cfg: &ExperimentConfig) -> Result<Vec<CellOutcome>> {
    let method = cfg.method()?;
    if !method.uses_imputation() {
        return Err(Error::Config(format!("train.method: {method} has no imputation model")));
    }
    let data = Dataset::load(&cfg.data.dir)?;
    let cells: Vec<Cell> = cfg
        .run
        .seeds
        .iter()
        .flat_map(|&seed| {
            [false, true].map(|cdr| Cell {
                seed,
                method,
                cdr,
                eta: cfg.filter.eta,
            })
        })
        .collect();
    let dir = cfg.run.output.join("analyze-poisonous");
    let manifest = RunManifest::new("analyze-poisonous", cfg.run.seeds.clone(), cfg, vec!["poisonous.csv".into()]);
    manifest.write(&dir)?;
    let outcomes: Vec<CellOutcome> = run_cells(cfg, &data, &cells, true)?.into_iter().map(|(_, o)| o).collect();
    write_text(&dir.join("poisonous.csv"), &results_csv(&outcomes))?;
    finish_manifest(&dir, manifest, &outcomes)?;
    Ok(outcomes)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Scores saved checkpoints on a triplet test file.
pub fn evaluate_checkpoint(
    recommendation: impl AsRef<Path>,
    imputation: Option<&Path>,
    test: impl AsRef<Path>,
    k: usize,
    loss: LossKind,
) -> Result<MetricsReport> {
    let rec = FactorModel::load(recommendation)?;
    let test = load_triplets_with_dims(test, rec.num_users, rec.num_items)?;
    let mut report = evaluate(&rec, &test, k)?;
    if let Some(path) = imputation {
        let imp = FactorModel::load(path)?;
        if (imp.num_users, imp.num_items) != (rec.num_users, rec.num_items) {
            return Err(Error::Checkpoint("imputation and recommendation universes differ".into()));
        }
        report.poisonous_ratio = Some(analyze_poisonous(&rec, Some(&imp), &test, loss, None)?);
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Formulas,
    Lemma1,
    Tailbound,
    Corollary,
}

impl std::str::FromStr for Suite {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "formulas" => Ok(Self::Formulas),
            "lemma1" => Ok(Self::Lemma1),
            "tailbound" => Ok(Self::Tailbound),
            "corollary" => Ok(Self::Corollary),
            _ => Err(format!(
                "unknown suite {s:?} (expected formulas, lemma1, tailbound or corollary)"
            )),
        }
    }
}

/// One numeric check: `passed` iff `value` respects `limit` in the stated
/// direction. Non-gating checks are reported but do not fail the suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub limit: f64,
    pub at_most: bool,
    pub gating: bool,
    pub passed: bool,
}

impl Check {
    pub fn at_most(name: impl Into<String>, value: f64, limit: f64) -> Self {
        Self {
            name: name.into(),
            value,
            limit,
            at_most: true,
            gating: true,
            passed: value <= limit,
        }
    }

    pub fn at_least(name: impl Into<String>, value: f64, limit: f64) -> Self {
        Self {
            name: name.into(),
            value,
            limit,
            at_most: false,
            gating: true,
            passed: value >= limit,
        }
    }

    pub fn informational(mut self) -> Self {
        self.gating = false;
        self
    }

    pub fn line(&self) -> String {
        format!(
            "{} {}: {:.6} {} {:.6}{}",
            if self.passed { "ok  " } else { "FAIL" },
            self.name,
            self.value,
            if self.at_most { "<=" } else { ">=" },
            self.limit,
            if self.gating { "" } else { " (informational)" }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub suite: Suite,
    pub seed: u64,
    pub checks: Vec<Check>,
    pub passed: bool,
    pub wall_time: f64,
}

impl VerifyReport {
    fn new(suite: Suite, seed: u64, checks: Vec<Check>, started: Instant) -> Self {
        let passed = checks.iter().filter(|c| c.gating).all(|c| c.passed);
        Self {
            suite,
            seed,
            checks,
            passed,
            wall_time: started.elapsed().as_secs_f64(),
        }
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| c.gating && !c.passed)
    }

    pub fn to_text(&self) -> String {
        let mut out: String = self.checks.iter().map(|c| c.line() + "\n").collect();
        let gating = self.checks.iter().filter(|c| c.gating).count();
        out.push_str(&format!(
            "{:?}: {} ({} of {} gating checks failed, {:.2}s)\n",
            self.suite,
            if self.passed { "PASS" } else { "FAIL" },
            self.failures().count(),
            gating,
            self.wall_time
        ));
        out
    }
}

pub const Z_LIMIT: f64 = 3.0;
pub const TAIL_KAPPAS: [f64; 3] = [0.05, 0.2, 0.5];
pub const LEMMA1_DRAWS: usize = 100_000;
pub const COROLLARY_INSTANCES: u64 = 10_000;

pub fn run_verify(suite: Suite, seed: u64, workers: usize) -> Result<VerifyReport> {
    let started = Instant::now();
    let checks = thread_pool(workers)?.install(|| match suite {
        Suite::Formulas => formulas_checks(seed),
        Suite::Lemma1 => lemma1_checks(seed),
        Suite::Tailbound => tail_checks(seed),
        Suite::Corollary => corollary_checks(seed),
    })?;
    Ok(VerifyReport::new(suite, seed, checks, started))
}

fn formulas_checks(seed: u64) -> Result<Vec<Check>> {
    let s = Scenario::default_with_seed(seed)?;
    let mut runs: Vec<(String, EstimatorKind, Option<Vec<bool>>)> = vec![
        ("IPS".into(), EstimatorKind::Ips, None),
        ("DR".into(), EstimatorKind::Dr, None),
    ];
    for (name, g) in s.gamma_patterns() {
        runs.push((format!("CDR[{name}]"), EstimatorKind::Cdr, Some(g)));
    }
    let mut checks = Vec::new();
    for (name, kind, gamma) in runs {
        let r = empirical_moments(kind, &s.world, &s.e_hat, &s.p_hat, gamma.as_deref(), DEFAULT_TRIALS, seed)?;
        checks.push(Check::at_most(format!("{name} mean (z)"), r.mean_z(), Z_LIMIT));
        checks.push(Check::at_most(format!("{name} variance (z)"), r.variance_z(), Z_LIMIT));
    }
    Ok(checks)
}

fn lemma1_checks(seed: u64) -> Result<Vec<Check>> {
    let grid = lemma1_grid()?;
    let reports = grid
        .par_iter()
        .enumerate()
        .map(|(k, c)| verify_lemma1_cell(c, LEMMA1_DRAWS, rng::derive(seed, k as u64)))
        .collect::<Result<Vec<_>>>()?;
    let mut checks = Vec::new();
    for r in &reports {
        let c = r.cell;
        let name = format!(
            "rho={} sigma/mu={:.3} eps=({}, {}) threshold={:.3}",
            c.rho, r.ratio, c.eps_mu, c.eps_sigma, r.threshold
        );
        checks.push(Check::at_least(
            format!("P(|e_hat-e|<e) {name}"),
            r.probability,
            c.rho - Z_LIMIT * r.standard_error,
        ));
        checks.push(
            Check::at_least(
                format!("P(e_hat-2e<0) {name}"),
                r.gap_probability,
                c.rho - Z_LIMIT * r.gap_standard_error,
            )
            .informational(),
        );
    }
    Ok(checks)
}

fn tail_checks(seed: u64) -> Result<Vec<Check>> {
    let s = Scenario::default_with_seed(seed)?;
    let mut checks = Vec::new();
    for (name, g) in s.gamma_patterns() {
        for &kappa in &TAIL_KAPPAS {
            let r = verify_tail_bound(&s.world, &s.e_hat, &s.p_hat, &g, kappa, DEFAULT_TRIALS, seed)?;
            checks.push(Check::at_least(
                format!("coverage gamma={name} kappa={kappa} (bound {:.4})", r.bound),
                r.coverage,
                1.0 - kappa,
            ));
        }
    }
    Ok(checks)
}

fn corollary_checks(seed: u64) -> Result<Vec<Check>> {
    let violations = (0..COROLLARY_INSTANCES)
        .into_par_iter()
        .map(|k| -> Result<usize> {
            let n = 1 + (rng::derive(seed, k) % 60) as usize;
            let x = random_inputs(n, rng::derive(seed, k));
            let gamma = estimators::oracle_gamma(&x.e, x.e_hat.as_deref().expect("random inputs carry e_hat"));
            let x = x.with_gamma(gamma);
            let cdr = estimators::cdr_variance(&x)?;
            let bound = estimators::ips_variance(&x)?.min(estimators::dr_variance(&x)?);
            Ok((cdr > bound) as usize)
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum::<usize>();
    Ok(vec![Check::at_most(
        format!("instances with CDR variance above min(IPS, DR) of {COROLLARY_INSTANCES}"),
        violations as f64,
        0.0,
    )])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prepared() -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        prepare_synthetic(&SyntheticSpec::small_biased_world(1), &data).unwrap();
        (dir, data)
    }

    #[test]
    fn config_round_trip_and_defaults() {
        let (_d, data) = prepared();
        let text = format!("[data]\ndir = {:?}\n", data.display().to_string());
        let cfg = ExperimentConfig::from_toml_str(&text, Path::new("."), Vec::new()).unwrap();
        assert_eq!(cfg.run.k, 5);
        assert_eq!(cfg.sweep.etas, DEFAULT_ETA_GRID.to_vec());
        let again = ExperimentConfig::from_toml_str(&cfg.to_toml_string(), Path::new("."), Vec::new()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn unknown_keys_and_bad_methods_are_rejected() {
        let (_d, data) = prepared();
        let base = format!("[data]\ndir = {:?}\n", data.display().to_string());
        let err = ExperimentConfig::from_toml_str(&format!("{base}[train]\nlearning_rat = 0.1\n"), Path::new("."), Vec::new())
            .unwrap_err();
        assert!(err.to_string().contains("learning_rat"), "{err}");
        let err = ExperimentConfig::from_toml_str(&format!("{base}[train]\nmethod = \"MRDR\"\n"), Path::new("."), Vec::new())
            .unwrap_err();
        assert!(err.to_string().contains("train.method"), "{err}");
        let err = ExperimentConfig::from_toml_str(&format!("{base}[sweep]\netas = []\n"), Path::new("."), Vec::new())
            .unwrap_err();
        assert!(err.to_string().contains("etas"), "{err}");
    }

    #[test]
    fn missing_data_dir_is_a_config_error() {
        let err = ExperimentConfig::from_toml_str("[data]\ndir = \"/nonexistent/x\"\n", Path::new("."), Vec::new())
            .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn environment_overrides_win() {
        let (_d, data) = prepared();
        let text = format!("[data]\ndir = {:?}\n[train]\nlearning_rate = 0.01\n", data.display().to_string());
        let env = vec![
            ("CDR_TRAIN_LEARNING_RATE".to_string(), "0.05".to_string()),
            ("CDR_TRAIN_METHOD".to_string(), "EIB".to_string()),
            ("CDR_RUN_SEEDS".to_string(), "[3, 4]".to_string()),
            ("CDR_UNRELATED".to_string(), "x".to_string()),
            ("HOME".to_string(), "/root".to_string()),
        ];
        let cfg = ExperimentConfig::from_toml_str(&text, Path::new("."), env).unwrap();
        assert_eq!(cfg.train.learning_rate, 0.05);
        assert_eq!(cfg.method().unwrap(), Method::Eib);
        assert_eq!(cfg.run.seeds, vec![3, 4]);
        let bad = vec![("CDR_FILTER_ETAA".to_string(), "1".to_string())];
        assert!(ExperimentConfig::from_toml_str(&text, Path::new("."), bad).is_err());
    }

    #[test]
    fn dataset_save_load_round_trip() {
        let (_d, data) = prepared();
        let loaded = Dataset::load(&data).unwrap();
        let fresh = synthetic_dataset(&SyntheticSpec::small_biased_world(1)).unwrap();
        assert_eq!(loaded.meta, fresh.meta);
        assert_eq!(loaded.train, fresh.train);
        assert_eq!(loaded.test, fresh.test);
        assert_eq!(loaded.meta.validation + loaded.meta.test, 140);
    }

    #[test]
    fn suites_parse() {
        assert_eq!("lemma1".parse::<Suite>().unwrap(), Suite::Lemma1);
        assert!("bogus".parse::<Suite>().is_err());
    }

    #[test]
    fn corollary_suite_passes() {
        let r = run_verify(Suite::Corollary, 0, 2).unwrap();
        assert!(r.passed, "{}", r.to_text());
    }
}
