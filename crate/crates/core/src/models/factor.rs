use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::sigmoid;

pub const CHECKPOINT_FORMAT: &str = "cdr-factor-model";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Output link applied to the factorization logit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Link {
    #[default]
    Sigmoid,
    Identity,
}

impl Link {
    #[inline]
    pub fn apply(self, logit: f64) -> f64 {
        match self {
            Link::Sigmoid => sigmoid(logit),
            Link::Identity => logit,
        }
    }

    /// Derivative of the output w.r.t. the logit, given the output value.
    #[inline]
    pub fn derivative_from_output(self, output: f64) -> f64 {
        match self {
            Link::Sigmoid => output * (1.0 - output),
            Link::Identity => 1.0,
        }
    }
}

/// Biased matrix factorization:
/// `link(⟨P_u, Q_i⟩ + b_u + b_i + b)`.
///
/// Embeddings are stored row-major (`num_users × dim`, `num_items × dim`).
/// The same type doubles as a gradient or moment buffer of identical shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorModel {
    pub dim: usize,
    pub num_users: usize,
    pub num_items: usize,
    pub link: Link,
    pub user_embeddings: Vec<f64>,
    pub item_embeddings: Vec<f64>,
    pub user_bias: Vec<f64>,
    pub item_bias: Vec<f64>,
    pub global_bias: f64,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    model: FactorModel,
}

impl FactorModel {
    pub fn zeros(num_users: usize, num_items: usize, dim: usize, link: Link) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("embedding dimension must be >= 1"));
        }
        Ok(Self {
            dim,
            num_users,
            num_items,
            link,
            user_embeddings: vec![0.0; num_users * dim],
            item_embeddings: vec![0.0; num_items * dim],
            user_bias: vec![0.0; num_users],
            item_bias: vec![0.0; num_items],
            global_bias: 0.0,
        })
    }

    /// Embeddings uniform in `[-half_width, half_width]`, biases zero.
    pub fn init_uniform<R: Rng + ?Sized>(
        num_users: usize,
        num_items: usize,
        dim: usize,
        link: Link,
        half_width: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut m = Self::zeros(num_users, num_items, dim, link)?;
        for x in m.user_embeddings.iter_mut().chain(m.item_embeddings.iter_mut()) {
            *x = rng.random_range(-half_width..=half_width);
        }
        Ok(m)
    }

    /// A zero buffer with this model's shape.
    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.num_users, self.num_items, self.dim, self.link).expect("dim >= 1")
    }

    #[inline]
    pub fn user_row(&self, u: usize) -> &[f64] {
        &self.user_embeddings[u * self.dim..(u + 1) * self.dim]
    }

    #[inline]
    pub fn item_row(&self, i: usize) -> &[f64] {
        &self.item_embeddings[i * self.dim..(i + 1) * self.dim]
    }

    fn check(&self, u: usize, i: usize) -> Result<()> {
        if u >= self.num_users {
            return Err(Error::IndexOutOfBounds {
                what: "user",
                index: u,
                bound: self.num_users,
            });
        }
        if i >= self.num_items {
            return Err(Error::IndexOutOfBounds {
                what: "item",
                index: i,
                bound: self.num_items,
            });
        }
        Ok(())
    }

    #[inline]
    pub fn logit(&self, u: usize, i: usize) -> f64 {
        let dot: f64 = self.user_row(u).iter().zip(self.item_row(i)).map(|(a, b)| a * b).sum();
        dot + self.user_bias[u] + self.item_bias[i] + self.global_bias
    }

    /// Logit with each embedding dimension `k` scaled by `mask[k]`
    /// (zero for a dropped dimension, the inverse keep rate otherwise).
    #[inline]
    pub fn logit_masked(&self, u: usize, i: usize, mask: &[f64]) -> f64 {
        let dot: f64 = self
            .user_row(u)
            .iter()
            .zip(self.item_row(i))
            .zip(mask)
            .map(|((a, b), m)| a * b * m)
            .sum();
        dot + self.user_bias[u] + self.item_bias[i] + self.global_bias
    }

    /// Output without bounds checking beyond slice indexing.
    #[inline]
    pub fn output(&self, u: usize, i: usize) -> f64 {
        self.link.apply(self.logit(u, i))
    }

    /// Prediction for `(user, item)`; errors on out-of-bounds indices.
    pub fn predict(&self, user: usize, item: usize) -> Result<f64> {
        self.check(user, item)?;
        Ok(self.output(user, item))
    }

    /// Adds `g · ∂logit(u, i)/∂θ` into `grad`.
    #[inline]
    pub fn accumulate_logit_grad(&self, u: usize, i: usize, g: f64, grad: &mut FactorModel) {
        let d = self.dim;
        let (pu, qi) = (self.user_row(u), self.item_row(i));
        for k in 0..d {
            grad.user_embeddings[u * d + k] += g * qi[k];
            grad.item_embeddings[i * d + k] += g * pu[k];
        }
        grad.user_bias[u] += g;
        grad.item_bias[i] += g;
        grad.global_bias += g;
    }

    /// Parameter blocks in a fixed order; used by the optimizer.
    pub fn blocks(&self) -> [&[f64]; 5] {
        [
            &self.user_embeddings,
            &self.item_embeddings,
            &self.user_bias,
            &self.item_bias,
            std::slice::from_ref(&self.global_bias),
        ]
    }

    pub fn blocks_mut(&mut self) -> [&mut [f64]; 5] {
        [
            &mut self.user_embeddings,
            &mut self.item_embeddings,
            &mut self.user_bias,
            &mut self.item_bias,
            std::slice::from_mut(&mut self.global_bias),
        ]
    }

    pub fn same_shape(&self, other: &FactorModel) -> bool {
        self.dim == other.dim && self.num_users == other.num_users && self.num_items == other.num_items
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.iter().all(|x| x.is_finite()))
    }

    pub fn to_checkpoint_string(&self) -> String {
        let ck = Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            model: self.clone(),
        };
        serde_json::to_string(&ck).expect("model serializes")
    }

    pub fn from_checkpoint_str(s: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(s).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        let m = ck.model;
        let ok = m.dim >= 1
            && m.user_embeddings.len() == m.num_users * m.dim
            && m.item_embeddings.len() == m.num_items * m.dim
            && m.user_bias.len() == m.num_users
            && m.item_bias.len() == m.num_items;
        if !ok {
            return Err(Error::Checkpoint("parameter block sizes do not match header".into()));
        }
        if !m.is_finite() {
            return Err(Error::Checkpoint("non-finite parameters".into()));
        }
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_checkpoint_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_str(&s)
    }
}
