use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::datamodel::RatingTable;
use crate::error::{Error, Result};

pub const DEFAULT_PROPENSITY_FLOOR: f64 = 0.05;

/// Estimated propensities `p̂_ui ∈ [floor, 1]` over a full universe.
#[derive(Debug, Clone, PartialEq)]
pub enum PropensityTable {
    /// `max(floor, (user_share · item_share)^exponent)`, kept in factored form.
    Popularity {
        user_share: Vec<f64>,
        item_share: Vec<f64>,
        exponent: f64,
        floor: f64,
    },
    /// One value per pair, row-major over `num_users × num_items`.
    Dense {
        num_users: usize,
        num_items: usize,
        values: Vec<f64>,
        floor: f64,
    },
}

impl PropensityTable {
    /// Dense table; every value is clipped into `[floor, 1]`.
    pub fn dense(num_users: usize, num_items: usize, values: Vec<f64>, floor: f64) -> Result<Self> {
        check_floor(floor)?;
        if values.len() != num_users * num_items {
            return Err(Error::LengthMismatch {
                what: "propensity values",
                got: values.len(),
                expected: num_users * num_items,
            });
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("propensity {v}")));
        }
        let values = values.into_iter().map(|p| p.clamp(floor, 1.0)).collect();
        Ok(Self::Dense {
            num_users,
            num_items,
            values,
            floor,
        })
    }

    pub fn floor(&self) -> f64 {
        match self {
            Self::Popularity { floor, .. } | Self::Dense { floor, .. } => *floor,
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        match self {
            Self::Popularity {
                user_share,
                item_share,
                ..
            } => (user_share.len(), item_share.len()),
            Self::Dense {
                num_users,
                num_items,
                ..
            } => (*num_users, *num_items),
        }
    }

    #[inline]
    pub fn get(&self, user: usize, item: usize) -> f64 {
        match self {
            Self::Popularity {
                user_share,
                item_share,
                exponent,
                floor,
            } => (user_share[user] * item_share[item]).powf(*exponent).clamp(*floor, 1.0),
            Self::Dense {
                num_items, values, ..
            } => values[user * num_items + item],
        }
    }

    /// `user<TAB>item<TAB>p` for every pair of the universe.
    pub fn to_tsv(&self) -> String {
        let (nu, ni) = self.dims();
        let mut out = String::with_capacity(nu * ni * 16);
        for u in 0..nu {
            for i in 0..ni {
                let _ = writeln!(out, "{u}\t{i}\t{}", self.get(u, i));
            }
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    /// Reads a propensity TSV covering every pair of the universe.
    pub fn load(path: impl AsRef<Path>, num_users: usize, num_items: usize, floor: f64) -> Result<Self> {
        let path = path.as_ref();
        let table = crate::datamodel::load_triplets_with_dims(path, num_users, num_items)?;
        if table.len() != num_users * num_items {
            return Err(Error::invalid(format!(
                "{}: propensity file covers {} of {} pairs",
                path.display(),
                table.len(),
                num_users * num_items
            )));
        }
        let mut values = vec![0.0; num_users * num_items];
        for r in table.records() {
            values[r.user * num_items + r.item] = r.rating;
        }
        Self::dense(num_users, num_items, values, floor)
    }
}

fn check_floor(floor: f64) -> Result<()> {
    if !(floor > 0.0 && floor <= 1.0) {
        return Err(Error::invalid(format!("propensity floor must lie in (0, 1], got {floor}")));
    }
    Ok(())
}

/// Popularity propensities from observation counts:
/// `p̂_ui = max(floor, ((n_u / max n) · (n_i / max n))^exponent)`.
pub fn estimate_propensity_popularity(
    observations: &RatingTable,
    exponent: f64,
    floor: f64,
) -> Result<PropensityTable> {
    check_floor(floor)?;
    if observations.records().iter().all(|r| !r.observed) {
        return Err(Error::Empty("observations"));
    }
    if !(exponent.is_finite() && exponent > 0.0) {
        return Err(Error::invalid(format!("popularity exponent must be positive, got {exponent}")));
    }
    let (users, items) = observations.observation_counts();
    let share = |counts: Vec<usize>| {
        let max = counts.iter().copied().max().unwrap_or(1).max(1) as f64;
        counts.into_iter().map(|c| c as f64 / max).collect::<Vec<_>>()
    };
    Ok(PropensityTable::Popularity {
        user_share: share(users),
        item_share: share(items),
        exponent,
        floor,
    })
}
