//! Joint training of the recommendation and imputation models.
//!
//! Each step draws a batch, optionally filters imputations with MC dropout,
//! takes one Adam step on the recommendation model, and (for imputation
//! methods) one Adam step on the imputation model.
//!
//! The imputation model predicts a label `r̃`; the imputed error is
//! `ê = ℓ(r̃, r̂)`. The recommendation step differentiates through `r̂` with
//! `r̃` frozen, and the imputation step differentiates through `r̃` with `r̂`
//! and `e` frozen.

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::datamodel::RatingTable;
use crate::error::{Error, Result};
pub use crate::estimators::eib_loss;
use crate::estimators::EstimatorInputs;
use crate::filter::{decide, mc_dropout_error_stats, FilterConfig};
use crate::metrics::auc;
use crate::models::{
    adam_step, pointwise_error, pointwise_error_grad, AdamConfig, AdamState, FactorModel, Link, LossKind,
    PropensityTable,
};
use crate::numeric::CompensatedSum;
use crate::rng::{self, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "NAIVE")]
    Naive,
    #[serde(rename = "IPS")]
    Ips,
    #[serde(rename = "EIB")]
    Eib,
    #[serde(rename = "DRJL")]
    DrJl,
}

impl Method {
    pub fn uses_imputation(self) -> bool {
        matches!(self, Method::Eib | Method::DrJl)
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Naive => "NAIVE",
            Method::Ips => "IPS",
            Method::Eib => "EIB",
            Method::DrJl => "DRJL",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_uppercase().replace(['-', '_'], "").as_str() {
            "NAIVE" | "MF" => Ok(Method::Naive),
            "IPS" => Ok(Method::Ips),
            "EIB" => Ok(Method::Eib),
            "DRJL" | "DR" => Ok(Method::DrJl),
            _ => Err(format!("unknown method {s:?} (expected NAIVE, IPS, EIB or DRJL)")),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PropensitySource {
    #[default]
    Popularity,
    Oracle,
    File,
}

impl std::str::FromStr for PropensitySource {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "popularity" => Ok(Self::Popularity),
            "oracle" => Ok(Self::Oracle),
            "file" => Ok(Self::File),
            _ => Err(format!("unknown propensity source {s:?} (expected popularity, oracle or file)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: Method,
    pub cdr_enabled: bool,
    pub eta: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub dim: usize,
    pub loss_kind: LossKind,
    pub seed: u64,
    pub propensity_source: PropensitySource,
    pub patience: usize,
    pub imputation_learning_rate: f64,
    pub imputation_weight_decay: f64,
    pub dropout_passes: usize,
    pub dropout_rate: f64,
    pub init_half_width: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::DrJl,
            cdr_enabled: false,
            eta: 5.0,
            learning_rate: 0.01,
            weight_decay: 1e-4,
            batch_size: 512,
            epochs: 100,
            dim: 8,
            loss_kind: LossKind::Bce,
            seed: 0,
            propensity_source: PropensitySource::Popularity,
            patience: 5,
            imputation_learning_rate: 0.01,
            imputation_weight_decay: 1e-4,
            dropout_passes: 10,
            dropout_rate: 0.5,
            init_half_width: 0.01,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.dim == 0 {
            return bad("dim must be >= 1".into());
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("imputation_learning_rate", self.imputation_learning_rate),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [
            ("weight_decay", self.weight_decay),
            ("imputation_weight_decay", self.imputation_weight_decay),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be >= 0, got {v}"));
            }
        }
        if self.applies_filter() {
            self.filter_config(0).validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }

    /// Whether batches go through the MC-dropout filter.
    pub fn applies_filter(&self) -> bool {
        self.cdr_enabled && self.method.uses_imputation()
    }

    pub fn filter_config(&self, step: u64) -> FilterConfig {
        FilterConfig {
            eta: self.eta,
            passes: self.dropout_passes,
            dropout_rate: self.dropout_rate,
            seed: rng::derive(self.seed, step),
        }
    }

    pub fn label(&self) -> String {
        if self.applies_filter() {
            format!("{}+CDR", self.method)
        } else {
            self.method.to_string()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auc: f64,
    /// Share of imputations kept; `None` for methods without imputation.
    pub retained_fraction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainResult {
    pub recommendation_model: FactorModel,
    pub imputation_model: Option<FactorModel>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub wall_time: f64,
}

impl TrainResult {
    pub const HISTORY_HEADER: &'static str = "epoch,train_loss,val_auc,retained_fraction";

    pub fn history_csv(&self) -> String {
        let mut out = String::from(Self::HISTORY_HEADER);
        out.push('\n');
        for h in &self.history {
            let retained = h.retained_fraction.map(|r| r.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{},{}\n", h.epoch, h.train_loss, h.val_auc, retained));
        }
        out
    }
}

/// A training batch: pairs, observation flags, labels (meaningful only where
/// observed) and propensity estimates.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Batch {
    pub pairs: Vec<(usize, usize)>,
    pub observed: Vec<bool>,
    pub labels: Vec<f64>,
    pub p_hat: Vec<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Per-pair errors of a batch under the current models.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchErrors {
    pub predictions: Vec<f64>,
    pub imputed_labels: Option<Vec<f64>>,
    /// `e`; zero for unobserved pairs, whose true error is unknown.
    pub e: Vec<f64>,
    pub e_hat: Option<Vec<f64>>,
}

pub fn batch_errors(
    rec: &FactorModel,
    imp: Option<&FactorModel>,
    batch: &Batch,
    kind: LossKind,
) -> BatchErrors {
    let predictions: Vec<f64> = batch.pairs.iter().map(|&(u, i)| rec.output(u, i)).collect();
    let e = (0..batch.len())
        .map(|k| {
            if batch.observed[k] {
                pointwise_error(batch.labels[k], predictions[k], kind)
            } else {
                0.0
            }
        })
        .collect();
    let imputed_labels: Option<Vec<f64>> =
        imp.map(|m| batch.pairs.iter().map(|&(u, i)| m.output(u, i)).collect());
    let e_hat = imputed_labels.as_ref().map(|labels| {
        labels
            .iter()
            .zip(&predictions)
            .map(|(&r, &p)| pointwise_error(r, p, kind))
            .collect()
    });
    BatchErrors {
        predictions,
        imputed_labels,
        e,
        e_hat,
    }
}

/// The batch as estimator inputs (`|D|` is the batch size).
pub fn batch_inputs(batch: &Batch, errors: &BatchErrors, gamma: Option<&[bool]>) -> EstimatorInputs {
    let mut x = EstimatorInputs::new(errors.e.clone(), batch.observed.clone(), batch.p_hat.clone())
        .with_pairs(batch.pairs.clone());
    if let Some(eh) = &errors.e_hat {
        x = x.with_e_hat(eh.clone());
    }
    if let Some(g) = gamma {
        x = x.with_gamma(g.to_vec());
    }
    x
}

/// Recommendation-step objective and its gradient w.r.t. `rec`.
///
/// NAIVE and IPS ignore `imp` and `gamma`; EIB and DRJL need both. DRJL
/// evaluates the CDR summand, which is the DR summand wherever `γ = 1`.
pub fn recommendation_objective(
    method: Method,
    rec: &FactorModel,
    imp: Option<&FactorModel>,
    batch: &Batch,
    gamma: &[bool],
    kind: LossKind,
) -> Result<(f64, FactorModel)> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    if method.uses_imputation() && (imp.is_none() || gamma.len() != batch.len()) {
        return Err(Error::invalid(format!("{method} needs an imputation model and one gamma per pair")));
    }
    let errors = batch_errors(rec, imp.filter(|_| method.uses_imputation()), batch, kind);
    let n = batch.len() as f64;
    let mut loss = CompensatedSum::new();
    let mut grad = rec.zeros_like();
    for (k, &(u, i)) in batch.pairs.iter().enumerate() {
        let p = errors.predictions[k];
        let dlink = rec.link.derivative_from_output(p);
        let o = batch.observed[k];
        let ph = batch.p_hat[k];
        let e = errors.e[k];
        let de = if o {
            pointwise_error_grad(batch.labels[k], p, kind).1 * dlink
        } else {
            0.0
        };
        let (term, dterm) = match method {
            Method::Naive => (if o { e } else { 0.0 }, de),
            Method::Ips => (if o { e / ph } else { 0.0 }, if o { de / ph } else { 0.0 }),
            Method::Eib | Method::DrJl => {
                let imputed = errors.imputed_labels.as_ref().expect("imputation")[k];
                let eh = errors.e_hat.as_ref().expect("imputation")[k];
                let deh = pointwise_error_grad(imputed, p, kind).1 * dlink;
                let keep = gamma[k];
                match (method, keep, o) {
                    (Method::Eib, _, true) => (e, de),
                    (Method::Eib, true, false) => (eh, deh),
                    (Method::Eib, false, false) => (0.0, 0.0),
                    (_, true, true) => (eh + (e - eh) / ph, deh + (de - deh) / ph),
                    (_, true, false) => (eh, deh),
                    (_, false, true) => (e / ph, de / ph),
                    (_, false, false) => (0.0, 0.0),
                }
            }
        };
        loss.add(term);
        if dterm != 0.0 {
            rec.accumulate_logit_grad(u, i, dterm / n, &mut grad);
        }
    }
    Ok((loss.value() * (1.0 / n), grad))
}

/// Imputation-step objective `mean(o (ê − e)² / p̂)` and its gradient w.r.t.
/// `imp`, with the recommendation model frozen.
pub fn imputation_objective(
    rec: &FactorModel,
    imp: &FactorModel,
    batch: &Batch,
    kind: LossKind,
) -> Result<(f64, FactorModel)> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let n = batch.len() as f64;
    let mut loss = CompensatedSum::new();
    let mut grad = imp.zeros_like();
    for (k, &(u, i)) in batch.pairs.iter().enumerate() {
        if !batch.observed[k] {
            continue;
        }
        let p = rec.output(u, i);
        let imputed = imp.output(u, i);
        let e = pointwise_error(batch.labels[k], p, kind);
        let eh = pointwise_error(imputed, p, kind);
        let ph = batch.p_hat[k];
        let diff = eh - e;
        loss.add(diff * diff / ph);
        let deh = pointwise_error_grad(imputed, p, kind).0 * imp.link.derivative_from_output(imputed);
        let g = 2.0 * diff / ph * deh / n;
        if g != 0.0 {
            imp.accumulate_logit_grad(u, i, g, &mut grad);
        }
    }
    Ok((loss.value() * (1.0 / n), grad))
}

/// Dense label lookup: `NaN` marks an unobserved pair.
struct LabelGrid {
    num_items: usize,
    labels: Vec<f32>,
}

impl LabelGrid {
    fn new(table: &RatingTable) -> Self {
        let mut labels = vec![f32::NAN; table.num_users() * table.num_items()];
        for r in table.records().iter().filter(|r| r.observed) {
            labels[r.user * table.num_items() + r.item] = r.rating as f32;
        }
        Self {
            num_items: table.num_items(),
            labels,
        }
    }

    fn get(&self, u: usize, i: usize) -> Option<f64> {
        let v = self.labels[u * self.num_items + i];
        (!v.is_nan()).then_some(v as f64)
    }
}

/// Validation AUC of the recommendation model.
pub fn validation_auc(model: &FactorModel, validation: &RatingTable) -> Result<f64> {
    let scores = validation
        .records()
        .iter()
        .map(|r| model.predict(r.user, r.item))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<bool> = validation.records().iter().map(|r| r.rating > 0.5).collect();
    auc(&scores, &labels)
}

/// Trains the recommendation model (and the imputation model for EIB/DRJL)
/// with early stopping on validation AUC; returns the best-epoch models.
pub fn train(
    data: &RatingTable,
    validation: &RatingTable,
    propensities: &PropensityTable,
    config: &TrainConfig,
) -> Result<TrainResult> {
    config.validate()?;
    let (nu, ni) = (data.num_users(), data.num_items());
    if propensities.dims() != (nu, ni) {
        return Err(Error::invalid(format!(
            "propensity table is {:?}, data universe is {:?}",
            propensities.dims(),
            (nu, ni)
        )));
    }
    if validation.num_users() > nu || validation.num_items() > ni {
        return Err(Error::invalid("validation table exceeds the training universe"));
    }
    let observed: Vec<(usize, usize)> = data
        .records()
        .iter()
        .filter(|r| r.observed)
        .map(|r| (r.user, r.item))
        .collect();
    if observed.is_empty() {
        return Err(Error::Empty("observed training interactions"));
    }
    let started = Instant::now();
    let grid = LabelGrid::new(data);

    let mut init_rng = rng::stream(config.seed, Stream::Init);
    let mut rec = FactorModel::init_uniform(nu, ni, config.dim, Link::Sigmoid, config.init_half_width, &mut init_rng)?;
    let mut imp = if config.method.uses_imputation() {
        Some(FactorModel::init_uniform(nu, ni, config.dim, Link::Sigmoid, config.init_half_width, &mut init_rng)?)
    } else {
        None
    };
    let rec_opt = AdamConfig::new(config.learning_rate, config.weight_decay);
    let imp_opt = AdamConfig::new(config.imputation_learning_rate, config.imputation_weight_decay);
    let mut rec_state = AdamState::new(&rec);
    let mut imp_state = imp.as_ref().map(AdamState::new);

    // NAIVE/IPS iterate over observed pairs, EIB/DRJL over all of D.
    let mut space: Vec<u32> = if config.method.uses_imputation() {
        (0..(nu * ni) as u32).collect()
    } else {
        observed.iter().map(|&(u, i)| (u * ni + i) as u32).collect()
    };
    let mut batch_rng = rng::stream(config.seed, Stream::Batches);

    let mut history = Vec::new();
    let mut best = (f64::NEG_INFINITY, 0usize, rec.clone(), imp.clone());
    let mut step: u64 = 0;
    for epoch in 1..=config.epochs {
        space.shuffle(&mut batch_rng);
        let mut epoch_loss = CompensatedSum::new();
        let mut batches = 0usize;
        let mut kept = 0usize;
        let mut filtered_over = 0usize;
        for chunk in space.chunks(config.batch_size) {
            let mut batch = Batch::default();
            for &flat in chunk {
                let (u, i) = (flat as usize / ni, flat as usize % ni);
                let label = grid.get(u, i);
                batch.pairs.push((u, i));
                batch.observed.push(label.is_some());
                batch.labels.push(label.unwrap_or(0.0));
                batch.p_hat.push(propensities.get(u, i));
            }
            let gamma = match (&imp, config.applies_filter()) {
                (Some(m), true) => {
                    let preds: Vec<f64> = batch.pairs.iter().map(|&(u, i)| rec.output(u, i)).collect();
                    let stats =
                        mc_dropout_error_stats(m, &batch.pairs, &preds, config.loss_kind, &config.filter_config(step))?;
                    decide(&stats, config.eta)?
                }
                _ => vec![true; batch.len()],
            };
            if imp.is_some() {
                kept += gamma.iter().filter(|&&g| g).count();
                filtered_over += gamma.len();
            }

            let (loss, grad) =
                recommendation_objective(config.method, &rec, imp.as_ref(), &batch, &gamma, config.loss_kind)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("training loss at epoch {epoch}, step {step}")));
            }
            adam_step(&mut rec, &grad, &mut rec_state, &rec_opt)?;

            if let (Some(m), Some(state)) = (imp.as_mut(), imp_state.as_mut()) {
                if batch.observed.iter().any(|&o| o) {
                    let (_, g) = imputation_objective(&rec, m, &batch, config.loss_kind)?;
                    adam_step(m, &g, state, &imp_opt)?;
                }
            }
            epoch_loss.add(loss);
            batches += 1;
            step += 1;
        }

        let val_auc = validation_auc(&rec, validation)?;
        history.push(EpochRecord {
            epoch,
            train_loss: epoch_loss.value() / batches as f64,
            val_auc,
            retained_fraction: imp.as_ref().map(|_| kept as f64 / filtered_over.max(1) as f64),
        });
        if val_auc > best.0 {
            best = (val_auc, epoch, rec.clone(), imp.clone());
        } else if epoch - best.1 >= config.patience {
            break;
        }
    }

    Ok(TrainResult {
        recommendation_model: best.2,
        imputation_model: best.3,
        history,
        best_epoch: best.1,
        wall_time: started.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::{cdr_loss, ips_loss, naive_loss};

    fn models(seed: u64) -> (FactorModel, FactorModel) {
        let mut r = rng::stream(seed, Stream::Init);
        (
            FactorModel::init_uniform(4, 5, 3, Link::Sigmoid, 0.7, &mut r).unwrap(),
            FactorModel::init_uniform(4, 5, 3, Link::Sigmoid, 0.7, &mut r).unwrap(),
        )
    }

    fn batch(all_observed: bool) -> Batch {
        let mut b = Batch::default();
        for k in 0..12 {
            let (u, i) = (k % 4, (k * 3) % 5);
            if b.pairs.contains(&(u, i)) {
                continue;
            }
            b.pairs.push((u, i));
            b.observed.push(all_observed || k % 3 == 0);
            b.labels.push((k % 2) as f64);
            b.p_hat.push(if all_observed { 1.0 } else { 0.1 + 0.07 * k as f64 });
        }
        b
    }

    #[test]
    fn naive_matches_ips_with_full_observation_and_unit_propensity() {
        let (rec, _) = models(1);
        let b = batch(true);
        let g = vec![false; b.len()];
        let (naive, _) = recommendation_objective(Method::Naive, &rec, None, &b, &g, LossKind::Bce).unwrap();
        let (ips, _) = recommendation_objective(Method::Ips, &rec, None, &b, &g, LossKind::Bce).unwrap();
        assert_eq!(naive, ips);
    }

    #[test]
    fn objectives_agree_with_estimators() {
        let (rec, imp) = models(2);
        let b = batch(false);
        let gamma: Vec<bool> = (0..b.len()).map(|k| k % 2 == 0).collect();
        for kind in [LossKind::Bce, LossKind::Rmse] {
            let errs = batch_errors(&rec, Some(&imp), &b, kind);
            let x = batch_inputs(&b, &errs, Some(&gamma));
            let (v, _) = recommendation_objective(Method::DrJl, &rec, Some(&imp), &b, &gamma, kind).unwrap();
            assert_eq!(v, cdr_loss(&x).unwrap());
            let (v, _) = recommendation_objective(Method::Eib, &rec, Some(&imp), &b, &gamma, kind).unwrap();
            assert_eq!(v, eib_loss(&x).unwrap());
            let (v, _) = recommendation_objective(Method::Ips, &rec, None, &b, &gamma, kind).unwrap();
            assert_eq!(v, ips_loss(&x).unwrap());
            let (v, _) = recommendation_objective(Method::Naive, &rec, None, &b, &gamma, kind).unwrap();
            assert_eq!(v, naive_loss(&x).unwrap());
        }
    }

    #[test]
    fn zero_gamma_drjl_step_is_the_ips_step() {
        let (rec, imp) = models(3);
        let b = batch(false);
        let g0 = vec![false; b.len()];
        let (dr, dr_grad) = recommendation_objective(Method::DrJl, &rec, Some(&imp), &b, &g0, LossKind::Bce).unwrap();
        let (ips, ips_grad) = recommendation_objective(Method::Ips, &rec, None, &b, &g0, LossKind::Bce).unwrap();
        assert_eq!(dr, ips);
        assert_eq!(dr_grad, ips_grad);
    }

    #[test]
    fn method_and_source_parse() {
        assert_eq!("dr-jl".parse::<Method>().unwrap(), Method::DrJl);
        assert_eq!("EIB".parse::<Method>().unwrap(), Method::Eib);
        assert!("MRDR".parse::<Method>().is_err());
        assert_eq!("oracle".parse::<PropensitySource>().unwrap(), PropensitySource::Oracle);
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        assert!(c.validate().is_ok());
        c.batch_size = 0;
        assert!(c.validate().is_err());
        let c = TrainConfig {
            cdr_enabled: true,
            eta: 0.0,
            ..TrainConfig::default()
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn history_csv_layout() {
        let (rec, _) = models(1);
        let r = TrainResult {
            recommendation_model: rec,
            imputation_model: None,
            history: vec![EpochRecord {
                epoch: 1,
                train_loss: 0.5,
                val_auc: 0.75,
                retained_fraction: None,
            }],
            best_epoch: 1,
            wall_time: 0.0,
        };
        assert_eq!(r.history_csv(), "epoch,train_loss,val_auc,retained_fraction\n1,0.5,0.75,\n");
    }
}
