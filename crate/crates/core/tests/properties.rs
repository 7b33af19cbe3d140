use std::collections::HashSet;

use cdr_core::datamodel::{split_unbiased, triplets_to_string, InteractionRecord, RatingTable, SplitSpec};
use cdr_core::estimators::{
    cdr_bias, cdr_loss, cdr_variance, dr_bias, dr_loss, dr_variance, ips_bias, ips_loss, ips_variance,
    EstimatorInputs,
};
use cdr_core::filter::{decide, ImputationStats};
use cdr_core::metrics::{auc, ndcg_at_k, rank_per_user, recall_at_k};
use proptest::prelude::*;

fn table_strategy() -> impl Strategy<Value = RatingTable> {
    (1usize..8, 1usize..8)
        .prop_flat_map(|(nu, ni)| {
            (
                Just(nu),
                Just(ni),
                prop::collection::vec((any::<bool>(), 1u8..=5), nu * ni),
            )
        })
        .prop_filter_map("at least one record", |(nu, ni, cells)| {
            let records: Vec<InteractionRecord> = cells
                .iter()
                .enumerate()
                .filter(|(_, c)| c.0)
                .map(|(k, c)| InteractionRecord::observed(k / ni, k % ni, c.1 as f64))
                .collect();
            (!records.is_empty()).then(|| RatingTable::new(nu, ni, records).unwrap())
        })
}

#[derive(Debug, Clone)]
struct Pairs {
    e: Vec<f64>,
    e_hat: Vec<f64>,
    p_true: Vec<f64>,
    p_hat: Vec<f64>,
    o: Vec<bool>,
    gamma: Vec<bool>,
}

fn pairs_strategy() -> impl Strategy<Value = Pairs> {
    (1usize..40).prop_flat_map(|n| {
        (
            prop::collection::vec(0.0f64..3.0, n),
            prop::collection::vec(0.0f64..3.0, n),
            prop::collection::vec(0.01f64..=1.0, n),
            prop::collection::vec(0.01f64..=1.0, n),
            prop::collection::vec(any::<bool>(), n),
            prop::collection::vec(any::<bool>(), n),
        )
            .prop_map(|(e, e_hat, p_true, p_hat, o, gamma)| Pairs {
                e,
                e_hat,
                p_true,
                p_hat,
                o,
                gamma,
            })
    })
}

fn inputs(p: &Pairs, gamma: Vec<bool>) -> EstimatorInputs {
    EstimatorInputs::new(p.e.clone(), p.o.clone(), p.p_hat.clone())
        .with_e_hat(p.e_hat.clone())
        .with_p_true(p.p_true.clone())
        .with_gamma(gamma)
}

fn approx(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-10 * (1.0 + a.abs().max(b.abs()))
}

proptest! {
    #[test]
    fn split_is_a_partition(table in table_strategy(), frac in 0.05f64..0.95, seed in any::<u64>()) {
        let (val, test) = split_unbiased(&table, SplitSpec { validation_fraction: frac, seed }).unwrap();
        prop_assert_eq!(val.len() + test.len(), table.len());
        prop_assert_eq!(val.len(), (frac * table.len() as f64).round() as usize);
        let key = |r: &InteractionRecord| (r.user, r.item);
        let a: HashSet<_> = val.records().iter().map(key).collect();
        let b: HashSet<_> = test.records().iter().map(key).collect();
        prop_assert!(a.is_disjoint(&b));
        let all: HashSet<_> = table.records().iter().map(key).collect();
        prop_assert_eq!(a.union(&b).copied().collect::<HashSet<_>>(), all);
        let again = split_unbiased(&table, SplitSpec { validation_fraction: frac, seed }).unwrap();
        prop_assert_eq!(again.0, val);
    }

    #[test]
    fn triplets_round_trip(table in table_strategy()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.tsv");
        std::fs::write(&path, triplets_to_string(&table)).unwrap();
        let back = cdr_core::datamodel::load_triplets_with_dims(&path, table.num_users(), table.num_items()).unwrap();
        prop_assert_eq!(back, table);
    }

    #[test]
    fn metrics_invariant_under_monotone_rescaling(
        rows in prop::collection::vec((0usize..4, 0.0f64..1.0, any::<bool>()), 2..40),
    ) {
        let users: Vec<usize> = rows.iter().map(|r| r.0).collect();
        let items: Vec<usize> = (0..rows.len()).collect();
        let scores: Vec<f64> = rows.iter().map(|r| r.1).collect();
        let labels: Vec<bool> = rows.iter().map(|r| r.2).collect();
        let shifted: Vec<f64> = scores.iter().map(|s| 3.0 * s + 1.0).collect();
        if labels.iter().any(|&l| l) && labels.iter().any(|&l| !l) {
            prop_assert!(approx(auc(&scores, &labels).unwrap(), auc(&shifted, &labels).unwrap()));
        }
        let a = rank_per_user(&users, &items, &scores, &labels).unwrap();
        let b = rank_per_user(&users, &items, &shifted, &labels).unwrap();
        if labels.iter().any(|&l| l) {
            let mut prev_recall = 0.0;
            for k in 1..=10 {
                prop_assert_eq!(ndcg_at_k(&a, k).unwrap(), ndcg_at_k(&b, k).unwrap());
                let r = recall_at_k(&a, k).unwrap();
                prop_assert!(r >= prev_recall);
                prop_assert!((0.0..=1.0).contains(&r));
                prev_recall = r;
            }
        }
    }

    #[test]
    fn retention_is_monotone_in_eta(
        stats in prop::collection::vec((-0.5f64..2.0, 0.0f64..2.0), 1..50),
        eta_small in 0.01f64..5.0,
        extra in 0.0f64..5.0,
    ) {
        let s = ImputationStats {
            mu_hat: stats.iter().map(|x| x.0).collect(),
            sigma_hat: stats.iter().map(|x| x.1).collect(),
        };
        let lo = decide(&s, eta_small).unwrap();
        let hi = decide(&s, eta_small + extra).unwrap();
        for k in 0..lo.len() {
            prop_assert!(!lo[k] || hi[k]);
            if s.mu_hat[k] <= 0.0 {
                prop_assert!(!hi[k]);
            }
        }
    }

    #[test]
    fn filter_extremes_recover_ips_and_dr(p in pairs_strategy()) {
        let n = p.e.len();
        let none = inputs(&p, vec![false; n]);
        let all = inputs(&p, vec![true; n]);
        prop_assert_eq!(cdr_loss(&none).unwrap().to_bits(), ips_loss(&none).unwrap().to_bits());
        prop_assert_eq!(cdr_loss(&all).unwrap().to_bits(), dr_loss(&all).unwrap().to_bits());
        prop_assert_eq!(cdr_bias(&none).unwrap().to_bits(), ips_bias(&none).unwrap().to_bits());
        prop_assert_eq!(cdr_bias(&all).unwrap().to_bits(), dr_bias(&all).unwrap().to_bits());
        prop_assert_eq!(cdr_variance(&none).unwrap().to_bits(), ips_variance(&none).unwrap().to_bits());
        prop_assert_eq!(cdr_variance(&all).unwrap().to_bits(), dr_variance(&all).unwrap().to_bits());
    }

    #[test]
    fn closed_forms_match_direct_sums(p in pairs_strategy()) {
        let n = p.e.len() as f64;
        let x = inputs(&p, p.gamma.clone());
        let ehat_kept: Vec<f64> = (0..p.e.len()).map(|k| if p.gamma[k] { p.e_hat[k] } else { 0.0 }).collect();
        let bias: f64 = (0..p.e.len())
            .map(|k| (p.p_true[k] - p.p_hat[k]) / p.p_hat[k] * (p.e[k] - ehat_kept[k]))
            .sum::<f64>()
            .abs()
            / n;
        let var: f64 = (0..p.e.len())
            .map(|k| {
                let d = p.e[k] - ehat_kept[k];
                p.p_true[k] * (1.0 - p.p_true[k]) * d * d / (p.p_hat[k] * p.p_hat[k])
            })
            .sum::<f64>()
            / (n * n);
        prop_assert!(approx(cdr_bias(&x).unwrap(), bias));
        prop_assert!(approx(cdr_variance(&x).unwrap(), var));
        let loss: f64 = (0..p.e.len())
            .map(|k| {
                let o = if p.o[k] { 1.0 } else { 0.0 };
                o * p.e[k] / p.p_hat[k] + ehat_kept[k] * (1.0 - o / p.p_hat[k])
            })
            .sum::<f64>()
            / n;
        prop_assert!(approx(cdr_loss(&x).unwrap(), loss));
    }

    #[test]
    fn dr_is_unbiased_with_either_model_exact(p in pairs_strategy()) {
        let n = p.e.len();
        let exact_propensity = EstimatorInputs::new(p.e.clone(), p.o.clone(), p.p_true.clone())
            .with_e_hat(p.e_hat.clone())
            .with_p_true(p.p_true.clone())
            .with_gamma(vec![true; n]);
        prop_assert_eq!(dr_bias(&exact_propensity).unwrap(), 0.0);
        let exact_imputation = EstimatorInputs::new(p.e.clone(), p.o.clone(), p.p_hat.clone())
            .with_e_hat(p.e.clone())
            .with_p_true(p.p_true.clone())
            .with_gamma(vec![true; n]);
        prop_assert_eq!(dr_bias(&exact_imputation).unwrap(), 0.0);
    }
}
