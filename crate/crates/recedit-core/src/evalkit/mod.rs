//! Time-based splits, ranking metrics, and the cold-start diagnostics.

pub mod compare;

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::decoding::{beam_generate_depth, parse_candidates, GateMode, RankedList, SidTrie};
use crate::editor::EditBundle;
use crate::error::{CoreError, Result};
use crate::model::Model;
use crate::num::Scalar;
use crate::tokenizer::{ItemId, SidTable, VocabLayout};

/// One next-item prediction instance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvalExample {
    pub user_id: String,
    pub history: Vec<ItemId>,
    pub target: ItemId,
    pub timestamp: i64,
}

/// Time-partitioned splits, filtered to test-set users, with the warm/cold
/// item partition derived from training presence.
#[derive(Clone, Debug)]
pub struct SplitSpec {
    pub train: Vec<EvalExample>,
    pub valid: Vec<EvalExample>,
    pub test: Vec<EvalExample>,
    pub warm_items: BTreeSet<ItemId>,
    pub cold_items: BTreeSet<ItemId>,
    pub boundaries: (i64, i64),
    pub n_test_users: usize,
}

impl SplitSpec {
    pub fn test_cold(&self) -> Vec<EvalExample> {
        self.test.iter().filter(|e| self.cold_items.contains(&e.target)).cloned().collect()
    }

    pub fn test_warm(&self) -> Vec<EvalExample> {
        self.test.iter().filter(|e| !self.cold_items.contains(&e.target)).cloned().collect()
    }

    /// |test_cold| / |test|.
    pub fn cold_fraction(&self) -> f64 {
        if self.test.is_empty() {
            return 0.0;
        }
        self.test_cold().len() as f64 / self.test.len() as f64
    }
}

/// Partition by the two time boundaries (train end, valid end), keep only
/// users that appear in the test split, and derive warm/cold item sets.
pub fn make_splits(dataset: &Dataset, boundaries: (i64, i64)) -> Result<SplitSpec> {
    let (t_train, t_valid) = boundaries;
    if t_valid < t_train {
        return Err(CoreError::config("validation boundary precedes training boundary"));
    }
    let mut train = Vec::new();
    let mut valid = Vec::new();
    let mut test = Vec::new();
    let mut warm_items: BTreeSet<ItemId> = BTreeSet::new();
    let mut n_test_users = 0;
    for seq in &dataset.sequences {
        let has_test = seq.timestamps.iter().any(|&ts| ts > t_valid);
        if !has_test {
            continue; // user absent from test: dropped everywhere
        }
        n_test_users += 1;
        for (i, (&ts, item)) in seq.timestamps.iter().zip(&seq.items).enumerate() {
            if ts <= t_train {
                warm_items.insert(item.clone());
            }
            let example = EvalExample {
                user_id: seq.user_id.clone(),
                history: seq.items[..i].to_vec(),
                target: item.clone(),
                timestamp: ts,
            };
            if ts <= t_train {
                if i > 0 {
                    train.push(example);
                }
            } else if ts <= t_valid {
                if i > 0 {
                    valid.push(example);
                }
            } else {
                test.push(example);
            }
        }
    }
    if test.is_empty() {
        return Err(CoreError::data("empty test split: no interactions after the boundary"));
    }
    if train.is_empty() {
        return Err(CoreError::data("empty training split"));
    }
    let cold_items: BTreeSet<ItemId> = test
        .iter()
        .map(|e| e.target.clone())
        .filter(|item| !warm_items.contains(item))
        .collect();
    Ok(SplitSpec { train, valid, test, warm_items, cold_items, boundaries, n_test_users })
}

/// NDCG@K for a single-target instance: 1/log2(rank+1) at 1-indexed rank,
/// zero when the target misses the top K. Invalid markers occupy ranks.
pub fn ndcg_at_k(list: &RankedList, target: &str, k: usize) -> f64 {
    for (idx, (cand, _)) in list.candidates.iter().take(k).enumerate() {
        if cand.item().is_some_and(|i| i == target) {
            return 1.0 / ((idx + 2) as f64).log2();
        }
    }
    0.0
}

pub fn recall_at_k(list: &RankedList, target: &str, k: usize) -> f64 {
    for (cand, _) in list.candidates.iter().take(k) {
        if cand.item().is_some_and(|i| i == target) {
            return 1.0;
        }
    }
    0.0
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IidNorm {
    /// |R_iid ∩ top-K| / |R_iid| — the verbatim definition.
    Paper,
    /// |R_iid ∩ top-K| / K — comparable across subset sizes.
    Share,
}

/// Mean over ranked lists of the normalized overlap between the top-K
/// generated items and the in-distribution item set.
pub fn iid_ratio_at_k(
    lists: &[RankedList],
    r_iid: &BTreeSet<ItemId>,
    k: usize,
    norm: IidNorm,
) -> Result<f64> {
    if r_iid.is_empty() {
        return Err(CoreError::input("IID ratio needs a non-empty item set"));
    }
    if lists.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = lists
        .iter()
        .map(|list| {
            let hits = list
                .candidates
                .iter()
                .take(k)
                .filter(|(c, _)| c.item().is_some_and(|i| r_iid.contains(i)))
                .count() as f64;
            match norm {
                IidNorm::Paper => hits / r_iid.len() as f64,
                IidNorm::Share => hits / k as f64,
            }
        })
        .sum();
    Ok(total / lists.len() as f64)
}

/// A prediction instance lowered to tokens, ready for beam decoding.
#[derive(Clone, Debug)]
pub struct EvalCase {
    pub history_tokens: Vec<usize>,
    pub target_item: ItemId,
    pub target_digits: Vec<u16>,
}

/// Beam-decode every case and parse into item lists. Pure per case given a
/// frozen bundle; cases run in parallel, collected in order.
#[allow(clippy::too_many_arguments)]
pub fn rank_cases<S: Scalar>(
    model: &Model<S>,
    bundle: &EditBundle<S>,
    mode: GateMode,
    cases: &[EvalCase],
    layout: &VocabLayout,
    sid_table: &SidTable,
    beam_width: usize,
    trie: Option<&SidTrie>,
) -> Result<Vec<RankedList>> {
    cases
        .par_iter()
        .map(|case| {
            let ranked = beam_generate_depth(
                model,
                bundle,
                mode,
                &case.history_tokens,
                layout,
                beam_width,
                trie,
                layout.sid_len(),
            )?;
            Ok(parse_candidates(&ranked, sid_table))
        })
        .collect()
}

/// Prefix-level NDCG@K: items are redefined as the first `n` digits; a hit
/// is a beam prefix equal to the target's first `n` digits.
#[allow(clippy::too_many_arguments)]
pub fn prefix_ndcg<S: Scalar>(
    model: &Model<S>,
    bundle: &EditBundle<S>,
    mode: GateMode,
    cases: &[EvalCase],
    layout: &VocabLayout,
    beam_width: usize,
    n: usize,
    k: usize,
) -> Result<f64> {
    if n == 0 || n > layout.sid_len() {
        return Err(CoreError::input(format!("prefix length {n} outside 1..=M")));
    }
    if cases.is_empty() {
        return Ok(0.0);
    }
    let scores: Vec<Result<f64>> = cases
        .par_iter()
        .map(|case| {
            let ranked = beam_generate_depth(
                model,
                bundle,
                mode,
                &case.history_tokens,
                layout,
                beam_width,
                None,
                n,
            )?;
            let target_prefix = &case.target_digits[..n];
            for (idx, sd) in ranked.iter().take(k).enumerate() {
                if sd.digits == target_prefix {
                    return Ok(1.0 / ((idx + 2) as f64).log2());
                }
            }
            Ok(0.0)
        })
        .collect();
    let mut total = 0.0;
    for s in scores {
        total += s?;
    }
    Ok(total / cases.len() as f64)
}

/// Deterministic subsample of at most `n` elements (returns clones in
/// shuffled order). `n == 0` keeps everything.
pub fn subsample<T: Clone>(items: &[T], n: usize, seed: u64) -> Vec<T> {
    if n == 0 || items.len() <= n {
        return items.to_vec();
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    order.truncate(n);
    order.into_iter().map(|i| items[i].clone()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub split: String,
    pub k: usize,
    pub metric: String,
    pub value: f64,
}

/// Flat metric table with text and CSV renderings.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
}

impl MetricsReport {
    pub fn push(&mut self, split: &str, k: usize, metric: &str, value: f64) {
        self.rows.push(MetricsRow {
            split: split.to_string(),
            k,
            metric: metric.to_string(),
            value,
        });
    }

    pub fn get(&self, split: &str, k: usize, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.split == split && r.k == k && r.metric == metric)
            .map(|r| r.value)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("split,k,metric,value\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{:.6}\n", r.split, r.k, r.metric, r.value));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if i == 0 || line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 4 {
                return Err(CoreError::data(format!("bad metrics row: {line}")));
            }
            rows.push(MetricsRow {
                split: parts[0].to_string(),
                k: parts[1].parse().map_err(|e| CoreError::data(format!("{e}")))?,
                metric: parts[2].to_string(),
                value: parts[3].parse().map_err(|e| CoreError::data(format!("{e}")))?,
            });
        }
        Ok(MetricsReport { rows })
    }

    pub fn to_table(&self) -> String {
        let mut out = String::from("split      K   metric           value\n");
        for r in &self.rows {
            out.push_str(&format!("{:<9} {:>3}   {:<14} {:>9.4}\n", r.split, r.k, r.metric, r.value));
        }
        out
    }
}

/// Standard metric block over ranked lists for one split.
pub fn split_metrics(
    report: &mut MetricsReport,
    split: &str,
    lists: &[RankedList],
    examples: &[EvalCase],
    r_iid: &BTreeSet<ItemId>,
    ks: &[usize],
) -> Result<()> {
    for &k in ks {
        let (mut ndcg, mut recall) = (0.0, 0.0);
        for (list, ex) in lists.iter().zip(examples) {
            ndcg += ndcg_at_k(list, &ex.target_item, k);
            recall += recall_at_k(list, &ex.target_item, k);
        }
        let n = examples.len().max(1) as f64;
        report.push(split, k, "ndcg", ndcg / n);
        report.push(split, k, "recall", recall / n);
        if !r_iid.is_empty() {
            report.push(split, k, "iid_paper", iid_ratio_at_k(lists, r_iid, k, IidNorm::Paper)?);
            report.push(split, k, "iid_share", iid_ratio_at_k(lists, r_iid, k, IidNorm::Share)?);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Interaction;
    use crate::decoding::Candidate;
    use proptest::prelude::{prop_assert, proptest};

    fn list(items: &[Option<&str>]) -> RankedList {
        RankedList {
            candidates: items
                .iter()
                .enumerate()
                .map(|(i, it)| {
                    let c = match it {
                        Some(id) => Candidate::Item(id.to_string()),
                        None => Candidate::Invalid(vec![i as u16]),
                    };
                    (c, -(i as f64))
                })
                .collect(),
        }
    }

    #[test]
    fn ndcg_hand_values() {
        let l = list(&[Some("a"), Some("b"), Some("c")]);
        assert_eq!(ndcg_at_k(&l, "a", 10), 1.0);
        let expected = 1.0 / 3f64.log2();
        assert!((ndcg_at_k(&l, "b", 10) - expected).abs() < 1e-12);
        assert!((ndcg_at_k(&l, "b", 10) - 0.6309).abs() < 1e-4);
        assert_eq!(ndcg_at_k(&l, "zzz", 10), 0.0);
        assert_eq!(ndcg_at_k(&l, "c", 2), 0.0, "outside top-K");
    }

    #[test]
    fn recall_hand_values() {
        let l = list(&[Some("a"), Some("b")]);
        assert_eq!(recall_at_k(&l, "a", 1), 1.0);
        assert_eq!(recall_at_k(&l, "b", 1), 0.0);
        assert_eq!(recall_at_k(&l, "b", 2), 1.0);
    }

    #[test]
    fn iid_ratio_hand_count() {
        // Single user, K=10, 7 of the 10 in R_iid, |R_iid| = 100.
        let mut items: Vec<Option<String>> = Vec::new();
        for i in 0..7 {
            items.push(Some(format!("in-{i}")));
        }
        for i in 0..3 {
            items.push(Some(format!("out-{i}")));
        }
        let refs: Vec<Option<&str>> = items.iter().map(|o| o.as_deref()).collect();
        let l = list(&refs);
        let r_iid: BTreeSet<String> = (0..100).map(|i| format!("in-{i}")).collect();
        let paper = iid_ratio_at_k(&[l.clone()], &r_iid, 10, IidNorm::Paper).unwrap();
        let share = iid_ratio_at_k(&[l], &r_iid, 10, IidNorm::Share).unwrap();
        assert!((paper - 0.07).abs() < 1e-12);
        assert!((share - 0.7).abs() < 1e-12);
    }

    #[test]
    fn iid_ratio_edges() {
        let l = list(&[Some("x"), None]);
        let r_iid: BTreeSet<String> = ["a".to_string()].into_iter().collect();
        assert_eq!(iid_ratio_at_k(&[l.clone()], &r_iid, 2, IidNorm::Paper).unwrap(), 0.0);
        assert_eq!(iid_ratio_at_k(&[l.clone()], &r_iid, 2, IidNorm::Share).unwrap(), 0.0);
        let full: BTreeSet<String> = ["x".to_string(), "y".to_string()].into_iter().collect();
        let l2 = list(&[Some("x"), Some("y")]);
        assert_eq!(iid_ratio_at_k(&[l2.clone()], &full, 2, IidNorm::Paper).unwrap(), 1.0);
        assert_eq!(iid_ratio_at_k(&[l2], &full, 2, IidNorm::Share).unwrap(), 1.0);
        assert!(iid_ratio_at_k(&[], &BTreeSet::new(), 2, IidNorm::Paper).is_err());
    }

    proptest! {
        #[test]
        fn metrics_monotone_in_k(target_rank in 0usize..30, len in 1usize..30) {
            let ids: Vec<String> = (0..len).map(|i| format!("i{i}")).collect();
            let refs: Vec<Option<&str>> = ids.iter().map(|s| Some(s.as_str())).collect();
            let l = list(&refs);
            let target = format!("i{target_rank}");
            let mut last_n = 0.0;
            let mut last_r = 0.0;
            for k in [1usize, 5, 10, 20, 50] {
                let n = ndcg_at_k(&l, &target, k);
                let r = recall_at_k(&l, &target, k);
                prop_assert!(n >= last_n - 1e-12);
                prop_assert!(r >= last_r - 1e-12);
                prop_assert!((0.0..=1.0).contains(&n));
                last_n = n;
                last_r = r;
            }
        }
    }

    fn toy_dataset() -> Dataset {
        // Users u1, u2 span all three periods; u3 has no test interaction.
        let mk = |u: &str, i: &str, t: i64| Interaction {
            user_id: u.into(),
            item_id: i.into(),
            timestamp: t,
            title: format!("title {i}"),
        };
        Dataset::from_interactions(vec![
            mk("u1", "a", 10),
            mk("u1", "b", 20),
            mk("u1", "c", 150),
            mk("u1", "new", 250),
            mk("u2", "b", 15),
            mk("u2", "a", 30),
            mk("u2", "d", 240),
            mk("u3", "a", 5),
            mk("u3", "d", 50),
        ])
        .unwrap()
    }

    #[test]
    fn splits_partition_and_classify() {
        let ds = toy_dataset();
        let spec = make_splits(&ds, (100, 200)).unwrap();
        assert_eq!(spec.n_test_users, 2);
        // u3 dropped everywhere.
        assert!(spec.train.iter().all(|e| e.user_id != "u3"));
        // "new" appears only after the boundary: cold. "d" was in u3's
        // training period, but u3 is dropped, so d is cold too.
        assert!(spec.cold_items.contains("new"));
        assert!(spec.cold_items.contains("d"));
        assert!(spec.warm_items.contains("a") && spec.warm_items.contains("b"));
        // Histories include everything strictly before the target.
        let test_new = spec.test.iter().find(|e| e.target == "new").unwrap();
        assert_eq!(test_new.history, vec!["a", "b", "c"]);
        // Valid example for u1: target c with history [a, b].
        assert_eq!(spec.valid.len(), 1);
        assert_eq!(spec.valid[0].target, "c");
        assert_eq!(spec.cold_fraction(), 1.0);
    }

    #[test]
    fn empty_test_split_is_an_error() {
        let ds = toy_dataset();
        assert!(make_splits(&ds, (100, 500)).is_err());
    }

    #[test]
    fn subsample_is_deterministic_and_bounded() {
        let items: Vec<usize> = (0..100).collect();
        let a = subsample(&items, 10, 4);
        let b = subsample(&items, 10, 4);
        assert_eq!(a, b);
        assert_eq!(a.len(), 10);
        let all = subsample(&items, 0, 4);
        assert_eq!(all.len(), 100);
    }

    #[test]
    fn metrics_csv_roundtrip() {
        let mut r = MetricsReport::default();
        r.push("cold", 10, "ndcg", 0.123456);
        r.push("warm", 20, "recall", 0.5);
        let csv = r.to_csv();
        let back = MetricsReport::from_csv(&csv).unwrap();
        assert_eq!(back.rows.len(), 2);
        assert!((back.get("cold", 10, "ndcg").unwrap() - 0.123456).abs() < 1e-9);
    }
}
