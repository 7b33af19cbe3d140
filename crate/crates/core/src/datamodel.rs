//! Rating tables, triplet TSV ingestion, binarization and unbiased splits.
//!
//! The canonical on-disk format is one `user<TAB>item<TAB>rating` triplet per
//! line with dense 0-based indices. Lines starting with `#` and blank lines are
//! ignored. Raw releases with arbitrary ids go through [`IdMap`], and the
//! Coat-style dense rating matrix goes through [`load_rating_matrix`].

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Stream};

/// One user-item interaction. `rating` is on the raw scale until the table is
/// binarized, after which it is a label in `{0, 1}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InteractionRecord {
    pub user: usize,
    pub item: usize,
    pub rating: f64,
    pub observed: bool,
}

impl InteractionRecord {
    pub fn observed(user: usize, item: usize, rating: f64) -> Self {
        Self {
            user,
            item,
            rating,
            observed: true,
        }
    }
}

/// A sparse set of interactions over a `num_users × num_items` universe.
///
/// Immutable after construction; every record is in bounds and no
/// `(user, item)` pair occurs twice.
#[derive(Debug, Clone, PartialEq)]
pub struct RatingTable {
    num_users: usize,
    num_items: usize,
    records: Vec<InteractionRecord>,
}

impl RatingTable {
    pub fn new(num_users: usize, num_items: usize, records: Vec<InteractionRecord>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(records.len());
        for r in &records {
            if r.user >= num_users {
                return Err(Error::IndexOutOfBounds {
                    what: "user",
                    index: r.user,
                    bound: num_users,
                });
            }
            if r.item >= num_items {
                return Err(Error::IndexOutOfBounds {
                    what: "item",
                    index: r.item,
                    bound: num_items,
                });
            }
            if !seen.insert((r.user, r.item)) {
                return Err(Error::DuplicatePair {
                    user: r.user,
                    item: r.item,
                });
            }
        }
        Ok(Self {
            num_users,
            num_items,
            records,
        })
    }

    /// Builds a table whose dimensions are the smallest that fit the records.
    pub fn with_inferred_dims(records: Vec<InteractionRecord>) -> Result<Self> {
        let num_users = records.iter().map(|r| r.user + 1).max().unwrap_or(0);
        let num_items = records.iter().map(|r| r.item + 1).max().unwrap_or(0);
        Self::new(num_users, num_items, records)
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn records(&self) -> &[InteractionRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Same records, widened to a larger universe.
    pub fn with_dims(self, num_users: usize, num_items: usize) -> Result<Self> {
        Self::new(num_users, num_items, self.records)
    }

    /// Per-user and per-item counts of observed records.
    pub fn observation_counts(&self) -> (Vec<usize>, Vec<usize>) {
        let mut users = vec![0; self.num_users];
        let mut items = vec![0; self.num_items];
        for r in self.records.iter().filter(|r| r.observed) {
            users[r.user] += 1;
            items[r.item] += 1;
        }
        (users, items)
    }

    /// Map from `(user, item)` to label for observed records.
    pub fn label_map(&self) -> HashMap<(usize, usize), f64> {
        self.records
            .iter()
            .filter(|r| r.observed)
            .map(|r| ((r.user, r.item), r.rating))
            .collect()
    }
}

/// Parameters of the validation/test partition of the unbiased set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            validation_fraction: 0.10,
            seed: 0,
        }
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().filter_map(|(i, line)| {
        let t = line.trim();
        (!t.is_empty() && !t.starts_with('#')).then_some((i + 1, t))
    })
}

fn parse_triplet_fields<'a>(path: &Path, line_no: usize, line: &'a str) -> Result<[&'a str; 3]> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    match fields.as_slice() {
        [u, i, r] => Ok([u, i, r]),
        _ => Err(Error::MalformedLine {
            path: path.to_path_buf(),
            line: line_no,
            reason: format!("expected 3 fields, found {}", fields.len()),
        }),
    }
}

fn parse_field<T: std::str::FromStr>(path: &Path, line_no: usize, what: &str, s: &str) -> Result<T> {
    s.parse().map_err(|_| Error::MalformedLine {
        path: path.to_path_buf(),
        line: line_no,
        reason: format!("invalid {what} {s:?}"),
    })
}

/// Loads a triplet file with dense 0-based indices; dimensions are inferred.
pub fn load_triplets(path: impl AsRef<Path>) -> Result<RatingTable> {
    let records = read_triplet_records(path.as_ref())?;
    RatingTable::with_inferred_dims(records)
}

/// Loads a triplet file into a universe of declared size.
pub fn load_triplets_with_dims(
    path: impl AsRef<Path>,
    num_users: usize,
    num_items: usize,
) -> Result<RatingTable> {
    let records = read_triplet_records(path.as_ref())?;
    RatingTable::new(num_users, num_items, records)
}

fn read_triplet_records(path: &Path) -> Result<Vec<InteractionRecord>> {
    let text = read_text(path)?;
    let mut records = Vec::new();
    for (line_no, line) in content_lines(&text) {
        let [u, i, r] = parse_triplet_fields(path, line_no, line)?;
        let user = parse_field(path, line_no, "user index", u)?;
        let item = parse_field(path, line_no, "item index", i)?;
        let rating: f64 = parse_field(path, line_no, "rating", r)?;
        if !rating.is_finite() {
            return Err(Error::MalformedLine {
                path: path.to_path_buf(),
                line: line_no,
                reason: format!("non-finite rating {r:?}"),
            });
        }
        records.push(InteractionRecord::observed(user, item, rating));
    }
    Ok(records)
}

/// Serializes observed records as triplet TSV.
pub fn triplets_to_string(table: &RatingTable) -> String {
    let mut out = String::with_capacity(table.len() * 12);
    for r in table.records().iter().filter(|r| r.observed) {
        let _ = writeln!(out, "{}\t{}\t{}", r.user, r.item, r.rating);
    }
    out
}

pub fn write_triplets(table: &RatingTable, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, triplets_to_string(table)).map_err(|e| Error::io(path, e))
}

/// Loads a dense rating matrix (one row per user, whitespace-separated
/// columns per item, `0` meaning "not rated") as used by the Coat release.
pub fn load_rating_matrix(path: impl AsRef<Path>) -> Result<RatingTable> {
    let path = path.as_ref();
    let text = read_text(path)?;
    let mut records = Vec::new();
    let mut num_items = None;
    let mut user = 0;
    for (line_no, line) in content_lines(&text) {
        let cols: Vec<&str> = line.split_whitespace().collect();
        match num_items {
            None => num_items = Some(cols.len()),
            Some(n) if n != cols.len() => {
                return Err(Error::MalformedLine {
                    path: path.to_path_buf(),
                    line: line_no,
                    reason: format!("expected {n} columns, found {}", cols.len()),
                })
            }
            _ => {}
        }
        for (item, c) in cols.iter().enumerate() {
            let rating: f64 = parse_field(path, line_no, "rating", c)?;
            if rating != 0.0 {
                records.push(InteractionRecord::observed(user, item, rating));
            }
        }
        user += 1;
    }
    RatingTable::new(user, num_items.unwrap_or(0), records)
}

/// Dense remapping of raw user/item ids.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IdMap {
    users: Vec<String>,
    items: Vec<String>,
    user_index: HashMap<String, usize>,
    item_index: HashMap<String, usize>,
}

impl IdMap {
    pub fn user(&mut self, raw: &str) -> usize {
        intern(&mut self.users, &mut self.user_index, raw)
    }

    pub fn item(&mut self, raw: &str) -> usize {
        intern(&mut self.items, &mut self.item_index, raw)
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn num_items(&self) -> usize {
        self.items.len()
    }

    /// Two-column sidecar (`dense<TAB>raw`) for users.
    pub fn users_tsv(&self) -> String {
        sidecar(&self.users)
    }

    pub fn items_tsv(&self) -> String {
        sidecar(&self.items)
    }

    /// Parses a sidecar written by [`IdMap::users_tsv`] back into raw ids.
    pub fn parse_sidecar(text: &str) -> Result<Vec<String>> {
        let mut out = Vec::new();
        for (line_no, line) in content_lines(text) {
            let mut parts = line.splitn(2, '\t');
            let dense: usize = parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::invalid(format!("id sidecar line {line_no}: bad index")))?;
            if dense != out.len() {
                return Err(Error::invalid(format!(
                    "id sidecar line {line_no}: expected index {}, got {dense}",
                    out.len()
                )));
            }
            out.push(parts.next().unwrap_or_default().to_string());
        }
        Ok(out)
    }
}

fn intern(names: &mut Vec<String>, index: &mut HashMap<String, usize>, raw: &str) -> usize {
    if let Some(&i) = index.get(raw) {
        return i;
    }
    let i = names.len();
    names.push(raw.to_string());
    index.insert(raw.to_string(), i);
    i
}

fn sidecar(names: &[String]) -> String {
    let mut out = String::new();
    for (i, n) in names.iter().enumerate() {
        let _ = writeln!(out, "{i}\t{n}");
    }
    out
}

/// Loads triplets with arbitrary raw ids, assigning dense indices through
/// `ids` in first-seen order. Sharing one `IdMap` across files keeps their
/// indices consistent.
pub fn load_raw_triplets(path: impl AsRef<Path>, ids: &mut IdMap) -> Result<RatingTable> {
    let path = path.as_ref();
    let text = read_text(path)?;
    let mut records = Vec::new();
    for (line_no, line) in content_lines(&text) {
        let [u, i, r] = parse_triplet_fields(path, line_no, line)?;
        let rating: f64 = parse_field(path, line_no, "rating", r)?;
        records.push(InteractionRecord::observed(ids.user(u), ids.item(i), rating));
    }
    RatingTable::new(ids.num_users(), ids.num_items(), records)
}

/// Label is 1 iff the raw rating is strictly above `threshold`.
pub fn binarize(table: &RatingTable, threshold: f64) -> RatingTable {
    let records = table
        .records
        .iter()
        .map(|r| InteractionRecord {
            rating: if r.rating > threshold { 1.0 } else { 0.0 },
            ..*r
        })
        .collect();
    RatingTable {
        num_users: table.num_users,
        num_items: table.num_items,
        records,
    }
}

/// Uniform random partition of an unbiased table into validation and test.
///
/// `|validation| = round(fraction · |table|)`; both parts keep the input's
/// record order and universe dimensions.
pub fn split_unbiased(table: &RatingTable, spec: SplitSpec) -> Result<(RatingTable, RatingTable)> {
    if table.is_empty() {
        return Err(Error::Empty("unbiased table"));
    }
    if !(spec.validation_fraction > 0.0 && spec.validation_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "validation_fraction must lie in (0, 1), got {}",
            spec.validation_fraction
        )));
    }
    let n = table.len();
    let n_val = (spec.validation_fraction * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(spec.seed, Stream::Split));
    let mut in_validation = vec![false; n];
    for &i in &order[..n_val] {
        in_validation[i] = true;
    }
    let (val, test): (Vec<_>, Vec<_>) = table
        .records
        .iter()
        .zip(&in_validation)
        .partition(|(_, &v)| v);
    let strip = |v: Vec<(&InteractionRecord, &bool)>| v.into_iter().map(|(r, _)| *r).collect();
    Ok((
        RatingTable {
            num_users: table.num_users,
            num_items: table.num_items,
            records: strip(val),
        },
        RatingTable {
            num_users: table.num_users,
            num_items: table.num_items,
            records: strip(test),
        },
    ))
}
