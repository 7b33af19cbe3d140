//! Loss estimators over a pair set `D` and their closed-form moments.
//!
//! Every estimator here is a pure function of [`EstimatorInputs`]. Sums run
//! in pair-list order through a compensated accumulator, and the IPS, DR and
//! CDR estimators share one per-pair summand, so `cdr(γ ≡ 0)` and `ips`
//! (likewise `cdr(γ ≡ 1)` and `dr`) agree bit for bit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::sum;

/// Smallest admissible `p̂` unless a caller sets a different floor.
pub const DEFAULT_ESTIMATOR_FLOOR: f64 = 1e-6;

/// Aligned per-pair vectors over one pair set.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EstimatorInputs {
    /// `(user, item)` of each entry; informational, the math never reads it.
    pub pairs: Option<Vec<(usize, usize)>>,
    /// Prediction error `e_ui ≥ 0`.
    pub e: Vec<f64>,
    /// Imputed error `ê_ui ≥ 0`.
    pub e_hat: Option<Vec<f64>>,
    /// True propensity `p_ui`; only known in simulation.
    pub p_true: Option<Vec<f64>>,
    /// Estimated propensity `p̂_ui ∈ [floor, 1]`.
    pub p_hat: Vec<f64>,
    /// Observation indicator `o_ui`.
    pub o: Vec<bool>,
    /// Imputation retention `γ_ui`.
    pub gamma: Option<Vec<bool>>,
    pub floor: f64,
}

impl EstimatorInputs {
    pub fn new(e: Vec<f64>, o: Vec<bool>, p_hat: Vec<f64>) -> Self {
        Self {
            e,
            o,
            p_hat,
            floor: DEFAULT_ESTIMATOR_FLOOR,
            ..Self::default()
        }
    }

    pub fn with_e_hat(mut self, e_hat: Vec<f64>) -> Self {
        self.e_hat = Some(e_hat);
        self
    }

    pub fn with_p_true(mut self, p_true: Vec<f64>) -> Self {
        self.p_true = Some(p_true);
        self
    }

    pub fn with_gamma(mut self, gamma: Vec<bool>) -> Self {
        self.gamma = Some(gamma);
        self
    }

    pub fn with_pairs(mut self, pairs: Vec<(usize, usize)>) -> Self {
        self.pairs = Some(pairs);
        self
    }

    pub fn with_floor(mut self, floor: f64) -> Self {
        self.floor = floor;
        self
    }

    pub fn len(&self) -> usize {
        self.e.len()
    }

    pub fn is_empty(&self) -> bool {
        self.e.is_empty()
    }

    /// Checks lengths, finiteness and ranges of every supplied vector.
    pub fn validate(&self) -> Result<()> {
        let n = self.e.len();
        if n == 0 {
            return Err(Error::Empty("estimator pair set"));
        }
        let check_len = |what: &'static str, got: usize| {
            if got == n {
                Ok(())
            } else {
                Err(Error::LengthMismatch { what, got, expected: n })
            }
        };
        check_len("p_hat", self.p_hat.len())?;
        check_len("o", self.o.len())?;
        if let Some(p) = &self.pairs {
            check_len("pairs", p.len())?;
        }
        if let Some(v) = &self.e_hat {
            check_len("e_hat", v.len())?;
        }
        if let Some(v) = &self.p_true {
            check_len("p_true", v.len())?;
        }
        if let Some(v) = &self.gamma {
            check_len("gamma", v.len())?;
        }
        if self.floor.is_nan() || self.floor <= 0.0 {
            return Err(Error::invalid(format!("estimator floor must be positive, got {}", self.floor)));
        }
        for (what, v) in [("e", Some(&self.e)), ("e_hat", self.e_hat.as_ref())] {
            if let Some(x) = v.and_then(|v| v.iter().find(|x| !(x.is_finite() && **x >= 0.0))) {
                return Err(Error::invalid(format!("{what} must be finite and >= 0, got {x}")));
            }
        }
        if let Some(p) = self.p_hat.iter().find(|p| !(**p >= self.floor && **p <= 1.0)) {
            return Err(Error::invalid(format!(
                "p_hat {p} outside [floor = {}, 1]",
                self.floor
            )));
        }
        if let Some(p) = self.p_true.as_ref().and_then(|v| v.iter().find(|p| !(**p > 0.0 && **p <= 1.0))) {
            return Err(Error::invalid(format!("p_true {p} outside (0, 1]")));
        }
        Ok(())
    }

    fn e_hat(&self) -> Result<&[f64]> {
        self.e_hat.as_deref().ok_or(Error::MissingField("e_hat"))
    }

    fn p_true(&self) -> Result<&[f64]> {
        self.p_true.as_deref().ok_or(Error::MissingField("p_true"))
    }

    fn gamma(&self) -> Result<&[bool]> {
        self.gamma.as_deref().ok_or(Error::MissingField("gamma"))
    }

    fn inv_len(&self) -> f64 {
        1.0 / self.len() as f64
    }
}

/// Which pairs keep their imputation in a summand.
#[derive(Clone, Copy)]
enum Retention<'a> {
    None,
    All,
    Mask(&'a [bool]),
}

impl Retention<'_> {
    #[inline]
    fn get(&self, k: usize) -> bool {
        match self {
            Retention::None => false,
            Retention::All => true,
            Retention::Mask(m) => m[k],
        }
    }
}

struct Prepared<'a> {
    inputs: &'a EstimatorInputs,
    e_hat: &'a [f64],
    retention: Retention<'a>,
}

impl<'a> Prepared<'a> {
    fn new(inputs: &'a EstimatorInputs, retention: Retention<'a>) -> Result<Self> {
        inputs.validate()?;
        let e_hat = match retention {
            Retention::None => &[][..],
            _ => inputs.e_hat()?,
        };
        Ok(Self {
            inputs,
            e_hat,
            retention,
        })
    }

    /// Estimator summand: `o e / p̂` without imputation,
    /// `ê + o (e − ê) / p̂` with it.
    #[inline]
    fn value_term(&self, k: usize) -> f64 {
        let x = self.inputs;
        if self.retention.get(k) {
            let eh = self.e_hat[k];
            if x.o[k] {
                eh + (x.e[k] - eh) / x.p_hat[k]
            } else {
                eh
            }
        } else if x.o[k] {
            x.e[k] / x.p_hat[k]
        } else {
            0.0
        }
    }

    /// The error component each moment formula weighs: `e − ê` or `e`.
    #[inline]
    fn residual(&self, k: usize) -> f64 {
        if self.retention.get(k) {
            self.inputs.e[k] - self.e_hat[k]
        } else {
            self.inputs.e[k]
        }
    }

    fn value(&self) -> f64 {
        sum((0..self.inputs.len()).map(|k| self.value_term(k))) * self.inputs.inv_len()
    }

    fn signed_bias(&self) -> Result<f64> {
        let p = self.inputs.p_true()?;
        let ph = &self.inputs.p_hat;
        Ok(sum((0..self.inputs.len()).map(|k| (p[k] - ph[k]) / ph[k] * self.residual(k))) * self.inputs.inv_len())
    }

    fn variance(&self) -> Result<f64> {
        let p = self.inputs.p_true()?;
        let ph = &self.inputs.p_hat;
        let n = self.inputs.inv_len();
        Ok(sum((0..self.inputs.len()).map(|k| {
            let r = self.residual(k);
            p[k] * (1.0 - p[k]) / (ph[k] * ph[k]) * r * r
        })) * n
            * n)
    }

    fn tail_bound(&self, kappa: f64) -> Result<f64> {
        if !(kappa > 0.0 && kappa < 1.0) {
            return Err(Error::invalid(format!("kappa must lie in (0, 1), got {kappa}")));
        }
        let ph = &self.inputs.p_hat;
        let ranges = sum((0..self.inputs.len()).map(|k| {
            let r = self.residual(k);
            r * r / (ph[k] * ph[k])
        }));
        let n = self.inputs.len() as f64;
        Ok(((2.0 / kappa).ln() / (2.0 * n * n) * ranges).sqrt())
    }
}

fn retained(inputs: &EstimatorInputs) -> Result<Retention<'_>> {
    Ok(Retention::Mask(inputs.gamma()?))
}

/// `|D|⁻¹ Σ e`.
pub fn ideal_loss(inputs: &EstimatorInputs) -> Result<f64> {
    if inputs.e.is_empty() {
        return Err(Error::Empty("estimator pair set"));
    }
    Ok(sum(inputs.e.iter().copied()) * inputs.inv_len())
}

/// `|D|⁻¹ Σ o e`.
pub fn naive_loss(inputs: &EstimatorInputs) -> Result<f64> {
    inputs.validate()?;
    Ok(sum(inputs.e.iter().zip(&inputs.o).map(|(e, &o)| if o { *e } else { 0.0 })) * inputs.inv_len())
}

/// `|D|⁻¹ Σ o e / p̂`.
pub fn ips_loss(inputs: &EstimatorInputs) -> Result<f64> {
    Ok(Prepared::new(inputs, Retention::None)?.value())
}

/// `|D|⁻¹ Σ (ê + o (e − ê) / p̂)`.
pub fn dr_loss(inputs: &EstimatorInputs) -> Result<f64> {
    Ok(Prepared::new(inputs, Retention::All)?.value())
}

/// `|D|⁻¹ Σ (o e / p̂ + γ ê (1 − o / p̂))`.
pub fn cdr_loss(inputs: &EstimatorInputs) -> Result<f64> {
    Ok(Prepared::new(inputs, retained(inputs)?)?.value())
}

/// `|D|⁻¹ Σ (o e + γ (1 − o) ê)`: error imputation without propensities.
pub fn eib_loss(inputs: &EstimatorInputs) -> Result<f64> {
    inputs.validate()?;
    let e_hat = inputs.e_hat()?;
    let gamma = inputs.gamma()?;
    Ok(sum((0..inputs.len()).map(|k| {
        if inputs.o[k] {
            inputs.e[k]
        } else if gamma[k] {
            e_hat[k]
        } else {
            0.0
        }
    })) * inputs.inv_len())
}

/// `|D|⁻¹ |Σ (p − p̂)/p̂ · e|`.
pub fn ips_bias(inputs: &EstimatorInputs) -> Result<f64> {
    Ok(Prepared::new(inputs, Retention::None)?.signed_bias()?.abs())
}

/// `|D|⁻² Σ p(1 − p)/p̂² · e²`.
pub fn ips_variance(inputs: &EstimatorInputs) -> Result<f64> {
    Prepared::new(inputs, Retention::None)?.variance()
}

pub fn dr_bias(inputs: &EstimatorInputs) -> Result<f64> {
    Ok(Prepared::new(inputs, Retention::All)?.signed_bias()?.abs())
}

pub fn dr_variance(inputs: &EstimatorInputs) -> Result<f64> {
    Prepared::new(inputs, Retention::All)?.variance()
}

/// `|D|⁻¹ |Σ (p − p̂)/p̂ · (γ (e − ê) + (1 − γ) e)|`.
pub fn cdr_bias(inputs: &EstimatorInputs) -> Result<f64> {
    Ok(Prepared::new(inputs, retained(inputs)?)?.signed_bias()?.abs())
}

/// `|D|⁻² Σ p(1 − p)/p̂² · (γ (ê − e)² + (1 − γ) e²)`.
pub fn cdr_variance(inputs: &EstimatorInputs) -> Result<f64> {
    Prepared::new(inputs, retained(inputs)?)?.variance()
}

/// Hoeffding deviation bound holding with probability `1 − κ`:
/// `sqrt(log(2/κ) / (2|D|²) · Σ (γ (e − ê)² + (1 − γ) e²) / p̂²)`.
pub fn cdr_tail_bound(inputs: &EstimatorInputs, kappa: f64) -> Result<f64> {
    Prepared::new(inputs, retained(inputs)?)?.tail_bound(kappa)
}

pub fn ips_tail_bound(inputs: &EstimatorInputs, kappa: f64) -> Result<f64> {
    Prepared::new(inputs, Retention::None)?.tail_bound(kappa)
}

pub fn dr_tail_bound(inputs: &EstimatorInputs, kappa: f64) -> Result<f64> {
    Prepared::new(inputs, Retention::All)?.tail_bound(kappa)
}

/// Fraction of pairs whose imputation is poisonous, i.e. `|ê − e| > e`.
pub fn poisonous_ratio(e: &[f64], e_hat: &[f64]) -> Result<f64> {
    if e.is_empty() {
        return Err(Error::Empty("poisonous_ratio input"));
    }
    if e.len() != e_hat.len() {
        return Err(Error::LengthMismatch {
            what: "e_hat",
            got: e_hat.len(),
            expected: e.len(),
        });
    }
    let bad = e.iter().zip(e_hat).filter(|(e, eh)| (*eh - *e).abs() > **e).count();
    Ok(bad as f64 / e.len() as f64)
}

/// The infeasible ideal filter: keep an imputation iff `|ê − e| < e`.
pub fn oracle_gamma(e: &[f64], e_hat: &[f64]) -> Vec<bool> {
    e.iter().zip(e_hat).map(|(e, eh)| (eh - e).abs() < *e).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum EstimatorKind {
    Naive,
    Ips,
    Dr,
    Cdr,
    Eib,
}

impl std::str::FromStr for EstimatorKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "NAIVE" => Ok(Self::Naive),
            "IPS" => Ok(Self::Ips),
            "DR" => Ok(Self::Dr),
            "CDR" => Ok(Self::Cdr),
            "EIB" => Ok(Self::Eib),
            other => Err(format!("unknown estimator {other:?}")),
        }
    }
}

/// Estimator value with optional closed-form moments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorReport {
    pub value: f64,
    pub bias: Option<f64>,
    pub variance: Option<f64>,
    pub tail_bound: Option<f64>,
}

impl EstimatorReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

/// Value plus bias/variance (when `p_true` is known) and, for the
/// propensity-weighted estimators, the tail bound at `kappa`.
pub fn report(kind: EstimatorKind, inputs: &EstimatorInputs, kappa: Option<f64>) -> Result<EstimatorReport> {
    let retention = match kind {
        EstimatorKind::Naive => {
            return Ok(EstimatorReport {
                value: naive_loss(inputs)?,
                bias: None,
                variance: None,
                tail_bound: None,
            })
        }
        EstimatorKind::Eib => {
            return Ok(EstimatorReport {
                value: eib_loss(inputs)?,
                bias: None,
                variance: None,
                tail_bound: None,
            })
        }
        EstimatorKind::Ips => Retention::None,
        EstimatorKind::Dr => Retention::All,
        EstimatorKind::Cdr => retained(inputs)?,
    };
    let prepared = Prepared::new(inputs, retention)?;
    let (bias, variance) = if inputs.p_true.is_some() {
        (Some(prepared.signed_bias()?.abs()), Some(prepared.variance()?))
    } else {
        (None, None)
    };
    Ok(EstimatorReport {
        value: prepared.value(),
        bias,
        variance,
        tail_bound: kappa.map(|k| prepared.tail_bound(k)).transpose()?,
    })
}

/// `E_o[L] = L_ideal + signed bias` for IPS / DR / CDR; needs `p_true`.
pub fn expected_value(kind: EstimatorKind, inputs: &EstimatorInputs) -> Result<f64> {
    let retention = match kind {
        EstimatorKind::Ips => Retention::None,
        EstimatorKind::Dr => Retention::All,
        EstimatorKind::Cdr => retained(inputs)?,
        other => return Err(Error::invalid(format!("no closed-form expectation for {other:?}"))),
    };
    let prepared = Prepared::new(inputs, retention)?;
    Ok(ideal_loss(inputs)? + prepared.signed_bias()?)
}

/// Closed-form variance for IPS / DR / CDR; needs `p_true`.
pub fn variance(kind: EstimatorKind, inputs: &EstimatorInputs) -> Result<f64> {
    match kind {
        EstimatorKind::Ips => ips_variance(inputs),
        EstimatorKind::Dr => dr_variance(inputs),
        EstimatorKind::Cdr => cdr_variance(inputs),
        other => Err(Error::invalid(format!("no closed-form variance for {other:?}"))),
    }
}

/// Estimator value for IPS / DR / CDR / naive / EIB.
pub fn value(kind: EstimatorKind, inputs: &EstimatorInputs) -> Result<f64> {
    match kind {
        EstimatorKind::Naive => naive_loss(inputs),
        EstimatorKind::Ips => ips_loss(inputs),
        EstimatorKind::Dr => dr_loss(inputs),
        EstimatorKind::Cdr => cdr_loss(inputs),
        EstimatorKind::Eib => eib_loss(inputs),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    fn two_pair() -> EstimatorInputs {
        EstimatorInputs::new(vec![0.8, 0.6], vec![true, false], vec![0.5, 0.5]).with_e_hat(vec![0.5, 0.2])
    }

    #[test]
    fn ideal_loss_examples() {
        let mk = |e: Vec<f64>| EstimatorInputs::new(e, vec![], vec![]);
        assert!(close(ideal_loss(&mk(vec![0.5, 0.5])).unwrap(), 0.5));
        assert!(close(ideal_loss(&mk(vec![1.0, 0.0])).unwrap(), 0.5));
        assert!(close(ideal_loss(&mk(vec![0.8, 0.6, 0.1])).unwrap(), 0.5));
        assert!(matches!(ideal_loss(&mk(vec![])), Err(Error::Empty(_))));
    }

    #[test]
    fn naive_loss_examples() {
        let all = EstimatorInputs::new(vec![0.3, 0.9], vec![true, true], vec![1.0, 1.0]);
        assert_eq!(naive_loss(&all).unwrap(), ideal_loss(&all).unwrap());
        let none = EstimatorInputs::new(vec![0.3, 0.9], vec![false, false], vec![1.0, 1.0]);
        assert_eq!(naive_loss(&none).unwrap(), 0.0);
        assert!(close(naive_loss(&two_pair()).unwrap(), 0.4));
    }

    #[test]
    fn ips_loss_examples() {
        let all = EstimatorInputs::new(vec![0.3, 0.9], vec![true, true], vec![1.0, 1.0]);
        assert_eq!(ips_loss(&all).unwrap(), naive_loss(&all).unwrap());
        assert!(close(ips_loss(&two_pair()).unwrap(), 0.8));
        let none = EstimatorInputs::new(vec![0.3, 0.9], vec![false, false], vec![0.5, 0.5]);
        assert_eq!(ips_loss(&none).unwrap(), 0.0);
        let low = EstimatorInputs::new(vec![0.3], vec![true], vec![0.01]).with_floor(0.05);
        assert!(ips_loss(&low).is_err());
    }

    #[test]
    fn ips_moment_examples() {
        let one = |p: f64, ph: f64| {
            EstimatorInputs::new(vec![1.0], vec![true], vec![ph]).with_p_true(vec![p])
        };
        assert_eq!(ips_bias(&one(0.5, 0.5)).unwrap(), 0.0);
        assert!(close(ips_bias(&one(0.5, 0.25)).unwrap(), 1.0));
        assert!(close(ips_variance(&one(0.5, 0.5)).unwrap(), 1.0));
        let no_p = EstimatorInputs::new(vec![1.0], vec![true], vec![0.5]);
        assert!(matches!(ips_bias(&no_p), Err(Error::MissingField("p_true"))));
    }

    #[test]
    fn dr_loss_examples() {
        let perfect = EstimatorInputs::new(vec![0.8, 0.6, 0.2], vec![true, false, true], vec![0.3, 0.7, 0.1])
            .with_e_hat(vec![0.8, 0.6, 0.2]);
        assert!(close(dr_loss(&perfect).unwrap(), ideal_loss(&perfect).unwrap()));
        assert!(close(dr_loss(&two_pair()).unwrap(), 0.65));
        let none = EstimatorInputs::new(vec![0.8, 0.6], vec![false, false], vec![0.5, 0.5]).with_e_hat(vec![0.5, 0.2]);
        assert!(close(dr_loss(&none).unwrap(), 0.35));
        let missing = EstimatorInputs::new(vec![0.8], vec![true], vec![0.5]);
        assert!(matches!(dr_loss(&missing), Err(Error::MissingField("e_hat"))));
    }

    #[test]
    fn dr_moment_examples() {
        let base = EstimatorInputs::new(vec![1.0], vec![true], vec![0.25])
            .with_e_hat(vec![0.5])
            .with_p_true(vec![0.5]);
        assert!(close(dr_bias(&base).unwrap(), 0.5));
        assert!(close(dr_variance(&base).unwrap(), 1.0));
        let exact = base.clone().with_e_hat(vec![1.0]);
        assert_eq!(dr_bias(&exact).unwrap(), 0.0);
        assert_eq!(dr_variance(&exact).unwrap(), 0.0);
        let matched = EstimatorInputs::new(vec![1.0], vec![true], vec![0.5])
            .with_e_hat(vec![0.5])
            .with_p_true(vec![0.5]);
        assert_eq!(dr_bias(&matched).unwrap(), 0.0);
    }

    #[test]
    fn cdr_loss_examples() {
        let x = two_pair();
        let g0 = x.clone().with_gamma(vec![false, false]);
        let g1 = x.clone().with_gamma(vec![true, true]);
        assert_eq!(cdr_loss(&g0).unwrap().to_bits(), ips_loss(&x).unwrap().to_bits());
        assert_eq!(cdr_loss(&g1).unwrap().to_bits(), dr_loss(&x).unwrap().to_bits());
        let mixed = x.with_gamma(vec![false, true]);
        assert!(close(cdr_loss(&mixed).unwrap(), 0.9));
        let missing = two_pair();
        assert!(matches!(cdr_loss(&missing), Err(Error::MissingField("gamma"))));
    }

    #[test]
    fn cdr_moments_match_term_by_term_oracle() {
        let e = [0.9, 0.2, 1.4];
        let eh = [0.5, 0.7, 1.3];
        let p = [0.3, 0.6, 0.05];
        let ph = [0.2, 0.6, 0.1];
        let g = [true, false, true];
        let x = EstimatorInputs::new(e.to_vec(), vec![true, false, false], ph.to_vec())
            .with_e_hat(eh.to_vec())
            .with_p_true(p.to_vec())
            .with_gamma(g.to_vec());
        let mut bias = 0.0;
        let mut var = 0.0;
        for k in 0..3 {
            let r = if g[k] { e[k] - eh[k] } else { e[k] };
            bias += (p[k] - ph[k]) / ph[k] * r;
            var += p[k] * (1.0 - p[k]) / (ph[k] * ph[k]) * r * r;
        }
        assert!(close(cdr_bias(&x).unwrap(), bias.abs() / 3.0));
        assert!(close(cdr_variance(&x).unwrap(), var / 9.0));

        let g0 = x.clone().with_gamma(vec![false; 3]);
        assert_eq!(cdr_bias(&g0).unwrap(), ips_bias(&x).unwrap());
        assert_eq!(cdr_variance(&g0).unwrap(), ips_variance(&x).unwrap());
        let g1 = x.clone().with_gamma(vec![true; 3]);
        assert_eq!(cdr_bias(&g1).unwrap(), dr_bias(&x).unwrap());
        assert_eq!(cdr_variance(&g1).unwrap(), dr_variance(&x).unwrap());
    }

    #[test]
    fn tail_bound_examples() {
        let exact = EstimatorInputs::new(vec![0.4, 0.7], vec![true, false], vec![0.2, 0.3])
            .with_e_hat(vec![0.4, 0.7])
            .with_gamma(vec![true, true]);
        assert_eq!(cdr_tail_bound(&exact, 0.05).unwrap(), 0.0);

        let one = EstimatorInputs::new(vec![1.0], vec![false], vec![0.5])
            .with_e_hat(vec![0.3])
            .with_gamma(vec![false]);
        let b = cdr_tail_bound(&one, 0.05).unwrap();
        assert!(close(b, (40f64.ln() / 2.0 * 4.0).sqrt()));
        assert!((b - 2.716).abs() < 1e-3);

        let mut prev = f64::INFINITY;
        for kappa in [0.01, 0.1, 0.5, 0.9, 0.999_999] {
            let b = cdr_tail_bound(&one, kappa).unwrap();
            assert!(b < prev);
            prev = b;
        }
        assert!((prev - (2f64.ln() * 4.0 / 2.0).sqrt()).abs() < 1e-5);
        assert!(cdr_tail_bound(&one, 0.0).is_err());
        assert!(cdr_tail_bound(&one, 1.0).is_err());
    }

    #[test]
    fn poisonous_ratio_examples() {
        assert_eq!(poisonous_ratio(&[0.3, 0.5], &[0.3, 0.5]).unwrap(), 0.0);
        let r = poisonous_ratio(&[1.0, 1.0, 1.0], &[1.5, 2.5, 0.4]).unwrap();
        assert!(close(r, 1.0 / 3.0));
        let e = [0.2, 0.9, 3.0];
        let tripled: Vec<f64> = e.iter().map(|x| 3.0 * x).collect();
        assert_eq!(poisonous_ratio(&e, &tripled).unwrap(), 1.0);
        assert!(poisonous_ratio(&[], &[]).is_err());
        assert!(poisonous_ratio(&[1.0], &[]).is_err());
    }

    #[test]
    fn eib_examples() {
        let x = two_pair();
        assert!(close(eib_loss(&x.clone().with_gamma(vec![true, true])).unwrap(), 0.5));
        assert_eq!(
            eib_loss(&x.clone().with_gamma(vec![false, false])).unwrap(),
            naive_loss(&x).unwrap()
        );
        let all = EstimatorInputs::new(vec![0.8, 0.6], vec![true, true], vec![0.5, 0.5])
            .with_e_hat(vec![0.1, 0.9])
            .with_gamma(vec![true, false]);
        assert_eq!(eib_loss(&all).unwrap(), naive_loss(&all).unwrap());
    }

    #[test]
    fn validation_catches_bad_inputs() {
        let short = EstimatorInputs::new(vec![0.1, 0.2], vec![true], vec![0.5, 0.5]);
        assert!(matches!(ips_loss(&short), Err(Error::LengthMismatch { what: "o", .. })));
        let neg = EstimatorInputs::new(vec![-0.1], vec![true], vec![0.5]);
        assert!(ips_loss(&neg).is_err());
        let nan = EstimatorInputs::new(vec![0.1], vec![true], vec![f64::NAN]);
        assert!(ips_loss(&nan).is_err());
    }

    #[test]
    fn report_serializes_with_fixed_keys() {
        let x = two_pair().with_p_true(vec![0.4, 0.6]).with_gamma(vec![true, false]);
        let r = report(EstimatorKind::Cdr, &x, Some(0.05)).unwrap();
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        let keys: Vec<&str> = v.as_object().unwrap().keys().map(|k| k.as_str()).collect();
        assert_eq!(keys.len(), 4);
        for k in ["value", "bias", "variance", "tail_bound"] {
            assert!(keys.contains(&k));
        }
        let plain = report(EstimatorKind::Ips, &two_pair(), None).unwrap();
        assert!(plain.bias.is_none() && plain.variance.is_none() && plain.tail_bound.is_none());
        assert!(r#"{"value":0.8,"bias":null,"variance":null,"tail_bound":null}"# == plain.to_json());
    }
}
