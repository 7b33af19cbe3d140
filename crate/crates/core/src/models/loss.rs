use serde::{Deserialize, Serialize};

/// Predictions are clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]` before the logs.
pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum LossKind {
    #[default]
    Bce,
    Rmse,
}

impl std::str::FromStr for LossKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "BCE" => Ok(LossKind::Bce),
            "RMSE" | "MSE" => Ok(LossKind::Rmse),
            other => Err(format!("unknown loss kind {other:?} (expected BCE or RMSE)")),
        }
    }
}

/// Per-pair error `e(label, prediction)`; non-negative for labels in `[0, 1]`.
///
/// The label may be soft (an imputed label in `(0, 1)`), which is how
/// imputed errors are formed.
pub fn pointwise_error(label: f64, prediction: f64, kind: LossKind) -> f64 {
    match kind {
        LossKind::Bce => {
            let p = prediction.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            let e = -label * p.ln() - (1.0 - label) * (1.0 - p).ln();
            e.max(0.0)
        }
        LossKind::Rmse => (label - prediction) * (label - prediction),
    }
}

/// Partial derivatives `(∂e/∂label, ∂e/∂prediction)` of [`pointwise_error`].
pub fn pointwise_error_grad(label: f64, prediction: f64, kind: LossKind) -> (f64, f64) {
    match kind {
        LossKind::Bce => {
            let clamped = !(BCE_CLAMP..=1.0 - BCE_CLAMP).contains(&prediction);
            let p = prediction.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            let d_label = (1.0 - p).ln() - p.ln();
            let d_pred = if clamped {
                0.0
            } else {
                -label / p + (1.0 - label) / (1.0 - p)
            };
            (d_label, d_pred)
        }
        LossKind::Rmse => {
            let d = label - prediction;
            (2.0 * d, -2.0 * d)
        }
    }
}
