//! Pseudo-history synthesis for cold items and position-wise edit requests.
//!
//! A cold item has no interactions, so we borrow them: find its most
//! similar warm items, take the interactions that preceded those neighbors
//! in real training sequences, and use those prefixes as surrogate
//! histories with the cold item as target. Each surrogate pair then
//! expands into one edit request per SID digit position.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::tokenizer::{ItemEmbedding, ItemId, SidTable};

/// Context/target pair for one digit position of one pseudo interaction.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditRequest {
    pub position: usize,
    pub history: Vec<ItemId>,
    /// First `position` digits of the cold item's SID.
    pub prefix: Vec<u16>,
    /// The digit to inject at `position`.
    pub object: u16,
    pub cold_item_id: ItemId,
}

#[derive(Clone, Debug)]
pub struct Neighbor {
    pub item_id: ItemId,
    pub similarity: f64,
}

/// Top-k warm items by cosine similarity; ties break toward the
/// lexicographically smaller item id.
pub fn cosine_topk(
    cold: &ItemEmbedding,
    warm: &[ItemEmbedding],
    k: usize,
) -> Result<Vec<Neighbor>> {
    if warm.is_empty() {
        return Err(CoreError::input("warm embedding set is empty"));
    }
    let mut scored: Vec<Neighbor> = warm
        .iter()
        .map(|w| Neighbor { item_id: w.item_id.clone(), similarity: cold.cosine(w) })
        .collect();
    scored.sort_by(|a, b| {
        b.similarity
            .partial_cmp(&a.similarity)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.item_id.cmp(&b.item_id))
    });
    scored.truncate(k);
    Ok(scored)
}

/// One surrogate history for a cold item.
#[derive(Clone, Debug)]
pub struct PseudoSequence {
    pub cold_item_id: ItemId,
    pub history: Vec<ItemId>,
    /// Similarity of the neighbor this history was borrowed from.
    pub neighbor_similarity: f64,
}

/// Outcome of synthesis: kept sequences plus cold items that produced none.
#[derive(Clone, Debug, Default)]
pub struct SynthesisReport {
    pub sequences: Vec<PseudoSequence>,
    pub cold_without_history: Vec<ItemId>,
}

/// Training-split occurrences of each item: (user index, position) pairs
/// against the training sequences passed to [`synthesize_histories`].
pub type TrainingSequences = Vec<Vec<ItemId>>;

/// For each neighbor occurrence in a training sequence, emit the strict
/// predecessor prefix (truncated to the last `history_limit` items) as a
/// pseudo history. Keeps at most `per_item_quota` per cold item, preferring
/// higher-similarity neighbors, then longer histories.
pub fn synthesize_histories(
    cold_item: &ItemId,
    neighbors: &[Neighbor],
    training: &TrainingSequences,
    per_item_quota: usize,
    history_limit: usize,
) -> Result<Vec<PseudoSequence>> {
    if neighbors.is_empty() {
        return Err(CoreError::input(format!("no neighbors for cold item {cold_item}")));
    }
    let mut candidates: Vec<(f64, Vec<ItemId>)> = Vec::new();
    for n in neighbors {
        for seq in training {
            for (pos, item) in seq.iter().enumerate() {
                if item != &n.item_id || pos == 0 {
                    continue; // no predecessor context at position 0
                }
                let start = pos.saturating_sub(history_limit);
                let history = seq[start..pos].to_vec();
                debug_assert!(!history.contains(cold_item), "cold item leaked into history");
                candidates.push((n.similarity, history));
            }
        }
    }
    candidates.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| b.1.len().cmp(&a.1.len()))
            .then_with(|| a.1.cmp(&b.1))
    });
    candidates.truncate(per_item_quota);
    Ok(candidates
        .into_iter()
        .map(|(sim, history)| PseudoSequence {
            cold_item_id: cold_item.clone(),
            history,
            neighbor_similarity: sim,
        })
        .collect())
}

/// Run synthesis over every cold item. Cold items with zero usable pseudo
/// sequences are reported, not fatal.
pub fn synthesize_all(
    cold: &[ItemEmbedding],
    warm: &[ItemEmbedding],
    training: &TrainingSequences,
    k_neighbors: usize,
    per_item_quota: usize,
    history_limit: usize,
) -> Result<SynthesisReport> {
    let mut report = SynthesisReport::default();
    for c in cold {
        let neighbors = cosine_topk(c, warm, k_neighbors)?;
        let seqs =
            synthesize_histories(&c.item_id, &neighbors, training, per_item_quota, history_limit)?;
        if seqs.is_empty() {
            report.cold_without_history.push(c.item_id.clone());
        } else {
            report.sequences.extend(seqs);
        }
    }
    Ok(report)
}

/// Expand pseudo sequences into position-wise requests: one per SID digit.
pub fn build_edit_requests(
    pseudo: &[PseudoSequence],
    sid_table: &SidTable,
) -> Result<Vec<EditRequest>> {
    let mut out = Vec::new();
    for seq in pseudo {
        let sid = sid_table.get(&seq.cold_item_id).ok_or_else(|| {
            CoreError::data(format!("no SID for cold item {}", seq.cold_item_id))
        })?;
        for item in &seq.history {
            if sid_table.get(item).is_none() {
                return Err(CoreError::data(format!("no SID for history item {item}")));
            }
        }
        for p in 0..sid.len() {
            out.push(EditRequest {
                position: p,
                history: seq.history.clone(),
                prefix: sid.prefix(p).to_vec(),
                object: sid.digits()[p],
                cold_item_id: seq.cold_item_id.clone(),
            });
        }
    }
    Ok(out)
}

/// Sanity checks on a request set: no cold item inside its own history and
/// every history item warm.
pub fn verify_no_leakage(requests: &[EditRequest], warm_items: &HashSet<ItemId>) -> Result<()> {
    for r in requests {
        if r.history.contains(&r.cold_item_id) {
            return Err(CoreError::data(format!(
                "pseudo history for {} contains the item itself",
                r.cold_item_id
            )));
        }
        if let Some(bad) = r.history.iter().find(|i| !warm_items.contains(*i)) {
            return Err(CoreError::data(format!(
                "pseudo history for {} contains non-warm item {bad}",
                r.cold_item_id
            )));
        }
    }
    Ok(())
}

pub fn save_requests(path: &Path, requests: &[EditRequest]) -> Result<()> {
    let file =
        std::fs::File::create(path).map_err(|e| CoreError::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    for r in requests {
        let line = serde_json::to_string(r)
            .map_err(|e| CoreError::format(path.display().to_string(), e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| CoreError::io(path.display().to_string(), e))?;
    }
    Ok(())
}

pub fn load_requests(path: &Path) -> Result<Vec<EditRequest>> {
    let file =
        std::fs::File::open(path).map_err(|e| CoreError::io(path.display().to_string(), e))?;
    let mut out = Vec::new();
    for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CoreError::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: EditRequest = serde_json::from_str(&line).map_err(|e| {
            CoreError::format(path.display().to_string(), format!("line {}: {e}", lineno + 1))
        })?;
        out.push(r);
    }
    if out.is_empty() {
        return Err(CoreError::data(format!("no edit requests in {}", path.display())));
    }
    Ok(out)
}

/// Requests grouped by position, totals preserved.
pub fn group_by_position(requests: &[EditRequest]) -> BTreeMap<usize, Vec<&EditRequest>> {
    let mut map: BTreeMap<usize, Vec<&EditRequest>> = BTreeMap::new();
    for r in requests {
        map.entry(r.position).or_default().push(r);
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::SemanticId;

    fn emb(id: &str, v: Vec<f64>) -> ItemEmbedding {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        ItemEmbedding { item_id: id.into(), vector: v.into_iter().map(|x| x / n).collect() }
    }

    #[test]
    fn identical_vector_ranks_first_with_similarity_one() {
        let cold = emb("c", vec![1.0, 0.0]);
        let warm = vec![emb("w1", vec![0.0, 1.0]), emb("w2", vec![1.0, 0.0])];
        let nb = cosine_topk(&cold, &warm, 2).unwrap();
        assert_eq!(nb[0].item_id, "w2");
        assert!((nb[0].similarity - 1.0).abs() < 1e-12);
        assert!(nb[1].similarity.abs() < 1e-12, "orthogonal vectors score 0");
    }

    #[test]
    fn topk_matches_brute_force_sort() {
        let cold = emb("c", vec![0.8, 0.6]);
        let warm: Vec<ItemEmbedding> = (0..5)
            .map(|i| {
                let angle = i as f64 * 0.5;
                emb(&format!("w{i}"), vec![angle.cos(), angle.sin()])
            })
            .collect();
        let mut brute: Vec<(String, f64)> =
            warm.iter().map(|w| (w.item_id.clone(), cold.cosine(w))).collect();
        brute.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let nb = cosine_topk(&cold, &warm, 2).unwrap();
        assert_eq!(nb[0].item_id, brute[0].0);
        assert_eq!(nb[1].item_id, brute[1].0);
    }

    #[test]
    fn predecessor_prefix_becomes_history() {
        let training: TrainingSequences = vec![vec![
            "a".to_string(),
            "b".to_string(),
            "c".to_string(),
            "j".to_string(),
            "x".to_string(),
        ]];
        let neighbors = vec![Neighbor { item_id: "j".into(), similarity: 0.9 }];
        let seqs =
            synthesize_histories(&"cold".to_string(), &neighbors, &training, 4, 20).unwrap();
        assert_eq!(seqs.len(), 1);
        assert_eq!(seqs[0].history, vec!["a", "b", "c"]);
    }

    #[test]
    fn neighbor_at_sequence_start_is_skipped() {
        let training: TrainingSequences = vec![vec!["j".to_string(), "a".to_string()]];
        let neighbors = vec![Neighbor { item_id: "j".into(), similarity: 0.9 }];
        let seqs =
            synthesize_histories(&"cold".to_string(), &neighbors, &training, 4, 20).unwrap();
        assert!(seqs.is_empty(), "no predecessor context means no pseudo history");
    }

    #[test]
    fn quota_keeps_best_by_similarity_then_length() {
        let training: TrainingSequences = vec![
            vec!["x".into(), "hi".into()],
            vec!["x".into(), "y".into(), "hi".into()],
            vec!["x".into(), "lo".into()],
            vec!["x".into(), "y".into(), "z".into(), "lo".into()],
            vec!["q".into(), "lo".into()],
        ];
        let neighbors = vec![
            Neighbor { item_id: "hi".into(), similarity: 0.9 },
            Neighbor { item_id: "lo".into(), similarity: 0.5 },
        ];
        let seqs = synthesize_histories(&"cold".to_string(), &neighbors, &training, 2, 20).unwrap();
        assert_eq!(seqs.len(), 2);
        // Both retained sequences come from the higher-similarity neighbor,
        // longer history first.
        assert!(seqs.iter().all(|s| (s.neighbor_similarity - 0.9).abs() < 1e-12));
        assert_eq!(seqs[0].history, vec!["x", "y"]);
        assert_eq!(seqs[1].history, vec!["x"]);
    }

    #[test]
    fn history_truncated_to_limit() {
        let seq: Vec<String> = (0..30).map(|i| format!("i{i:02}")).collect();
        let mut with_target = seq.clone();
        with_target.push("j".to_string());
        let training: TrainingSequences = vec![with_target];
        let neighbors = vec![Neighbor { item_id: "j".into(), similarity: 1.0 }];
        let seqs = synthesize_histories(&"cold".to_string(), &neighbors, &training, 1, 20).unwrap();
        assert_eq!(seqs[0].history.len(), 20);
        assert_eq!(seqs[0].history[0], "i10", "keeps the most recent items");
    }

    #[test]
    fn requests_expand_one_per_position() {
        let mut table = SidTable::default();
        table.insert("cold".into(), SemanticId::new(vec![3, 1, 4, 1]));
        table.insert("a".into(), SemanticId::new(vec![0, 0, 0, 0]));
        let pseudo = vec![PseudoSequence {
            cold_item_id: "cold".into(),
            history: vec!["a".into()],
            neighbor_similarity: 0.8,
        }];
        let requests = build_edit_requests(&pseudo, &table).unwrap();
        assert_eq!(requests.len(), 4, "M requests per pseudo pair");
        assert!(requests[0].prefix.is_empty());
        assert_eq!(requests[2].position, 2);
        assert_eq!(requests[2].prefix, vec![3, 1]);
        assert_eq!(requests[2].object, 4, "object is digit at the position");
        let grouped = group_by_position(&requests);
        let total: usize = grouped.values().map(|v| v.len()).sum();
        assert_eq!(total, 4);
    }

    #[test]
    fn request_jsonl_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("requests.jsonl");
        let requests = vec![EditRequest {
            position: 2,
            history: vec!["a".into(), "b".into()],
            prefix: vec![1, 2],
            object: 7,
            cold_item_id: "cold".into(),
        }];
        save_requests(&path, &requests).unwrap();
        let loaded = load_requests(&path).unwrap();
        assert_eq!(loaded, requests);
    }

    #[test]
    fn leakage_checks_fire() {
        let warm: HashSet<String> = ["a".to_string()].into_iter().collect();
        let bad = vec![EditRequest {
            position: 0,
            history: vec!["cold".into()],
            prefix: vec![],
            object: 0,
            cold_item_id: "cold".into(),
        }];
        assert!(verify_no_leakage(&bad, &warm).is_err());
        let bad2 = vec![EditRequest {
            position: 0,
            history: vec!["stranger".into()],
            prefix: vec![],
            object: 0,
            cold_item_id: "cold".into(),
        }];
        assert!(verify_no_leakage(&bad2, &warm).is_err());
        let ok = vec![EditRequest {
            position: 0,
            history: vec!["a".into()],
            prefix: vec![],
            object: 0,
            cold_item_id: "cold".into(),
        }];
        assert!(verify_no_leakage(&ok, &warm).is_ok());
    }

}
