//! Ranking and classification metrics plus the poisonous-imputation analysis.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::datamodel::RatingTable;
use crate::error::{Error, Result};
use crate::estimators::poisonous_ratio;
use crate::filter::{decide, mc_dropout_error_stats, FilterConfig};
use crate::models::{pointwise_error, FactorModel, LossKind};

/// One scored test interaction with its rank among the user's test items.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankedPrediction {
    pub user: usize,
    pub item: usize,
    pub score: f64,
    pub label: bool,
    /// 1-based position within the user's test items.
    pub rank_within_user: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auc: f64,
    pub ndcg_at_k: f64,
    pub recall_at_k: f64,
    pub k: usize,
    pub poisonous_ratio: Option<f64>,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "method,dataset,seed,eta,auc,ndcg_at_k,recall_at_k,k,poisonous_ratio";

    pub fn csv_row(&self, method: &str, dataset: &str, seed: u64, eta: Option<f64>) -> String {
        let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{method},{dataset},{seed},{},{},{},{},{},{}",
            opt(eta),
            self.auc,
            self.ndcg_at_k,
            self.recall_at_k,
            self.k,
            opt(self.poisonous_ratio)
        )
    }
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half. Computed from average ranks in `O(n log n)`.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::LengthMismatch {
            what: "labels",
            got: labels.len(),
            expected: scores.len(),
        });
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::NonFinite(format!("score {s}")));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::invalid("AUC needs at least one positive and one negative label"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut pos_rank_sum = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        // ranks start+1 ..= end share their average
        let avg_rank = (start + 1 + end) as f64 / 2.0;
        let tied_pos = order[start..end].iter().filter(|&&k| labels[k]).count();
        pos_rank_sum += avg_rank * tied_pos as f64;
        start = end;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((pos_rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Ranks each user's test items by descending score, ties broken by item
/// index.
pub fn rank_per_user(
    users: &[usize],
    items: &[usize],
    scores: &[f64],
    labels: &[bool],
) -> Result<Vec<RankedPrediction>> {
    let n = users.len();
    for (what, len) in [("items", items.len()), ("scores", scores.len()), ("labels", labels.len())] {
        if len != n {
            return Err(Error::LengthMismatch {
                what,
                got: len,
                expected: n,
            });
        }
    }
    let mut by_user: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (k, &u) in users.iter().enumerate() {
        by_user.entry(u).or_default().push(k);
    }
    let mut out = Vec::with_capacity(n);
    for (_, mut ks) in by_user {
        ks.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(items[a].cmp(&items[b])));
        for (pos, k) in ks.into_iter().enumerate() {
            out.push(RankedPrediction {
                user: users[k],
                item: items[k],
                score: scores[k],
                label: labels[k],
                rank_within_user: pos + 1,
            });
        }
    }
    Ok(out)
}

/// Ranks of each user's positive test items, for users with at least one.
fn positives_by_user(ranked: &[RankedPrediction]) -> BTreeMap<usize, Vec<usize>> {
    let mut map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for r in ranked {
        let entry = map.entry(r.user).or_default();
        if r.label {
            entry.push(r.rank_within_user);
        }
    }
    map.retain(|_, v| !v.is_empty());
    map
}

fn check_k(k: usize) -> Result<()> {
    if k < 1 {
        return Err(Error::invalid("k must be >= 1"));
    }
    Ok(())
}

/// Mean over users with a positive test item of `DCG@k / IDCG@k`, with unit
/// gains on positives and `log2(rank + 1)` discounts.
pub fn ndcg_at_k(ranked: &[RankedPrediction], k: usize) -> Result<f64> {
    check_k(k)?;
    let users = positives_by_user(ranked);
    if users.is_empty() {
        return Err(Error::Empty("users with positive test items"));
    }
    let gain = |rank: usize| 1.0 / ((rank + 1) as f64).log2();
    let total: f64 = users
        .values()
        .map(|ranks| {
            let dcg: f64 = ranks.iter().filter(|&&z| z <= k).map(|&z| gain(z)).sum();
            let idcg: f64 = (1..=ranks.len().min(k)).map(gain).sum();
            dcg / idcg
        })
        .sum();
    Ok(total / users.len() as f64)
}

/// Mean over users with a positive test item of the share of positives
/// ranked within the top `k`.
pub fn recall_at_k(ranked: &[RankedPrediction], k: usize) -> Result<f64> {
    check_k(k)?;
    let users = positives_by_user(ranked);
    if users.is_empty() {
        return Err(Error::Empty("users with positive test items"));
    }
    let total: f64 = users
        .values()
        .map(|ranks| ranks.iter().filter(|&&z| z <= k).count() as f64 / ranks.len() as f64)
        .sum();
    Ok(total / users.len() as f64)
}

/// Scores a test table with a model and computes AUC, NDCG@k and Recall@k.
pub fn evaluate(model: &FactorModel, test: &RatingTable, k: usize) -> Result<MetricsReport> {
    let recs = test.records();
    let users: Vec<usize> = recs.iter().map(|r| r.user).collect();
    let items: Vec<usize> = recs.iter().map(|r| r.item).collect();
    let labels: Vec<bool> = recs.iter().map(|r| r.rating > 0.5).collect();
    let scores = recs
        .iter()
        .map(|r| model.predict(r.user, r.item))
        .collect::<Result<Vec<f64>>>()?;
    let ranked = rank_per_user(&users, &items, &scores, &labels)?;
    Ok(MetricsReport {
        auc: auc(&scores, &labels)?,
        ndcg_at_k: ndcg_at_k(&ranked, k)?,
        recall_at_k: recall_at_k(&ranked, k)?,
        k,
        poisonous_ratio: None,
    })
}

/// Share of test pairs carrying a poisonous imputation (`|ê − e| > e`).
///
/// `e` comes from the recommendation model against the true label and `ê`
/// from the undropped imputation model. With a `filter`, imputations the
/// filter discards do not count, so the ratio reflects what training used.
pub fn analyze_poisonous(
    recommendation: &FactorModel,
    imputation: Option<&FactorModel>,
    test: &RatingTable,
    kind: LossKind,
    filter: Option<&FilterConfig>,
) -> Result<f64> {
    let imputation = imputation.ok_or(Error::MissingField("imputation model"))?;
    let recs = test.records();
    let mut e = Vec::with_capacity(recs.len());
    let mut e_hat = Vec::with_capacity(recs.len());
    let mut preds = Vec::with_capacity(recs.len());
    for r in recs {
        let pred = recommendation.predict(r.user, r.item)?;
        let imputed = imputation.predict(r.user, r.item)?;
        e.push(pointwise_error(r.rating, pred, kind));
        e_hat.push(pointwise_error(imputed, pred, kind));
        preds.push(pred);
    }
    match filter {
        None => poisonous_ratio(&e, &e_hat),
        Some(cfg) => {
            let pairs: Vec<(usize, usize)> = recs.iter().map(|r| (r.user, r.item)).collect();
            let stats = mc_dropout_error_stats(imputation, &pairs, &preds, kind, cfg)?;
            let gamma = decide(&stats, cfg.eta)?;
            if e.is_empty() {
                return Err(Error::Empty("test pairs"));
            }
            let bad = (0..e.len())
                .filter(|&k| gamma[k] && (e_hat[k] - e[k]).abs() > e[k])
                .count();
            Ok(bad as f64 / e.len() as f64)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::InteractionRecord;
    use crate::models::Link;

    fn rp(user: usize, rank: usize, label: bool) -> RankedPrediction {
        RankedPrediction {
            user,
            item: rank,
            score: -(rank as f64),
            label,
            rank_within_user: rank,
        }
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.9, 0.1], &[true, false]).unwrap(), 1.0);
        assert_eq!(auc(&[0.3; 4], &[true, false, true, false]).unwrap(), 0.5);
        assert_eq!(auc(&[0.9, 0.8, 0.7, 0.1], &[true, false, true, false]).unwrap(), 0.75);
        assert!(auc(&[0.1, 0.2], &[true, true]).is_err());
    }

    #[test]
    fn ndcg_examples() {
        assert_eq!(ndcg_at_k(&[rp(0, 1, true)], 5).unwrap(), 1.0);
        let six: Vec<_> = (1..=6).map(|r| rp(0, r, r == 6)).collect();
        assert_eq!(ndcg_at_k(&six, 5).unwrap(), 0.0);
        let five: Vec<_> = (1..=5).map(|r| rp(0, r, r == 1 || r == 3)).collect();
        let expected = (1.0 + 1.0 / 4f64.log2()) / (1.0 + 1.0 / 3f64.log2());
        assert!((ndcg_at_k(&five, 5).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.9197).abs() < 1e-4);
        assert!(ndcg_at_k(&five, 0).is_err());
    }

    #[test]
    fn users_without_positives_are_excluded() {
        let mut v: Vec<_> = (1..=3).map(|r| rp(0, r, r == 1)).collect();
        v.extend((1..=3).map(|r| rp(1, r, false)));
        assert_eq!(ndcg_at_k(&v, 5).unwrap(), 1.0);
        assert_eq!(recall_at_k(&v, 5).unwrap(), 1.0);
    }

    #[test]
    fn recall_examples() {
        let all: Vec<_> = (1..=6).map(|r| rp(0, r, r <= 2)).collect();
        assert_eq!(recall_at_k(&all, 5).unwrap(), 1.0);
        let none: Vec<_> = (1..=8).map(|r| rp(0, r, r >= 6)).collect();
        assert_eq!(recall_at_k(&none, 5).unwrap(), 0.0);
        let half: Vec<_> = (1..=8).map(|r| rp(0, r, r == 2 || r == 7)).collect();
        assert_eq!(recall_at_k(&half, 5).unwrap(), 0.5);
    }

    #[test]
    fn ranking_breaks_ties_by_item() {
        let ranked = rank_per_user(&[0, 0, 0], &[7, 3, 5], &[0.5, 0.5, 0.9], &[true, false, false]).unwrap();
        let order: Vec<(usize, usize)> = ranked.iter().map(|r| (r.item, r.rank_within_user)).collect();
        assert_eq!(order, vec![(5, 1), (3, 2), (7, 3)]);
    }

    fn tiny_test() -> RatingTable {
        RatingTable::new(
            1,
            3,
            vec![
                InteractionRecord::observed(0, 0, 1.0),
                InteractionRecord::observed(0, 1, 1.0),
                InteractionRecord::observed(0, 2, 1.0),
            ],
        )
        .unwrap()
    }

    #[test]
    fn exact_imputation_is_never_poisonous() {
        let mut rec = FactorModel::zeros(1, 3, 1, Link::Sigmoid).unwrap();
        rec.item_bias = vec![0.3, -0.2, 1.0];
        // imputation that outputs the true label (≈1) reproduces e exactly under RMSE
        let mut imp = FactorModel::zeros(1, 3, 1, Link::Sigmoid).unwrap();
        imp.global_bias = 1e3;
        let r = analyze_poisonous(&rec, Some(&imp), &tiny_test(), LossKind::Rmse, None).unwrap();
        assert_eq!(r, 0.0);
        assert!(analyze_poisonous(&rec, None, &tiny_test(), LossKind::Rmse, None).is_err());
    }

    #[test]
    fn hand_built_poisonous_case() {
        // label 1 everywhere; r̂ = (0.5, 0.5, σ(3)), r̃ = (1, 1, 0):
        // the first two imputations reproduce e exactly, the third has ê ≫ 2e.
        let mut rec = FactorModel::zeros(1, 3, 1, Link::Sigmoid).unwrap();
        rec.item_bias = vec![0.0, 0.0, 3.0];
        let mut imp = FactorModel::zeros(1, 3, 1, Link::Sigmoid).unwrap();
        imp.item_bias = vec![1e3, 1e3, -1e3];
        let r = analyze_poisonous(&rec, Some(&imp), &tiny_test(), LossKind::Bce, None).unwrap();
        assert!((r - 1.0 / 3.0).abs() < 1e-12);
    }
}
