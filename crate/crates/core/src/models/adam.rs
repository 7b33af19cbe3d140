use crate::error::{Error, Result};

use super::FactorModel;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First/second moment accumulators for one model.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first: FactorModel,
    pub second: FactorModel,
    pub step: u64,
}

impl AdamState {
    pub fn new(model: &FactorModel) -> Self {
        Self {
            first: model.zeros_like(),
            second: model.zeros_like(),
            step: 0,
        }
    }
}

/// One Adam update with decoupled weight decay on every parameter block.
///
/// Fails without touching `model` or `state` if the gradient has a non-finite
/// entry or the shapes disagree.
pub fn adam_step(
    model: &mut FactorModel,
    gradient: &FactorModel,
    state: &mut AdamState,
    config: &AdamConfig,
) -> Result<()> {
    if !model.same_shape(gradient) || !model.same_shape(&state.first) || !model.same_shape(&state.second) {
        return Err(Error::invalid("adam: gradient/state shape does not match model"));
    }
    for (b, block) in gradient.blocks().iter().enumerate() {
        if let Some(k) = block.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient block {b} entry {k} = {}", block[k])));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - config.beta1.powi(t);
    let bc2 = 1.0 - config.beta2.powi(t);
    let lr = config.learning_rate;
    let wd = config.weight_decay;
    let grads = gradient.blocks();
    let firsts = state.first.blocks_mut();
    let seconds = state.second.blocks_mut();
    for (((params, g), m), v) in model.blocks_mut().into_iter().zip(grads).zip(firsts).zip(seconds) {
        for k in 0..params.len() {
            m[k] = config.beta1 * m[k] + (1.0 - config.beta1) * g[k];
            v[k] = config.beta2 * v[k] + (1.0 - config.beta2) * g[k] * g[k];
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            params[k] -= lr * (m_hat / (v_hat.sqrt() + config.epsilon) + wd * params[k]);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Link;
    use crate::rng::{self, Stream};

    fn model() -> FactorModel {
        FactorModel::init_uniform(3, 2, 2, Link::Sigmoid, 0.5, &mut rng::stream(2, Stream::Init)).unwrap()
    }

    #[test]
    fn zero_gradient_without_decay_is_a_fixed_point() {
        let mut m = model();
        let before = m.clone();
        let g = m.zeros_like();
        let mut s = AdamState::new(&m);
        for _ in 0..3 {
            adam_step(&mut m, &g, &mut s, &AdamConfig::new(0.1, 0.0)).unwrap();
        }
        assert_eq!(m, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate_times_sign() {
        let mut m = model();
        let before = m.clone();
        let mut g = m.zeros_like();
        g.user_embeddings[0] = 3.0;
        g.item_bias[1] = -0.02;
        g.global_bias = 1e-3;
        let mut s = AdamState::new(&m);
        let lr = 0.01;
        adam_step(&mut m, &g, &mut s, &AdamConfig::new(lr, 0.0)).unwrap();
        // closed form: lr * g / (|g| + eps)
        let step = |g: f64| lr * g / (g.abs() + 1e-8);
        assert!((before.user_embeddings[0] - m.user_embeddings[0] - step(3.0)).abs() < 1e-15);
        assert!((before.item_bias[1] - m.item_bias[1] - step(-0.02)).abs() < 1e-15);
        assert!((before.global_bias - m.global_bias - step(1e-3)).abs() < 1e-15);
        assert!((before.user_embeddings[0] - m.user_embeddings[0] - lr).abs() < 1e-9);
        assert_eq!(before.user_embeddings[1], m.user_embeddings[1]);
    }

    #[test]
    fn decoupled_weight_decay_shrinks_parameters() {
        let mut m = model();
        let before = m.clone();
        let g = m.zeros_like();
        let mut s = AdamState::new(&m);
        adam_step(&mut m, &g, &mut s, &AdamConfig::new(0.1, 0.5)).unwrap();
        for (a, b) in before.user_embeddings.iter().zip(&m.user_embeddings) {
            assert!((b - a * 0.95).abs() < 1e-15);
        }
    }

    #[test]
    fn non_finite_gradient_fails_fast() {
        let mut m = model();
        let before = m.clone();
        let mut g = m.zeros_like();
        g.item_embeddings[1] = f64::NAN;
        let mut s = AdamState::new(&m);
        let err = adam_step(&mut m, &g, &mut s, &AdamConfig::new(0.1, 0.0)).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
        assert_eq!(m, before);
        assert_eq!(s.step, 0);
    }
}
