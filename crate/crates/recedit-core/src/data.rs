//! Interaction datasets: JSONL ingestion and per-user chronological sequences.

use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::tokenizer::ItemId;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Interaction {
    pub user_id: String,
    pub item_id: ItemId,
    pub timestamp: i64,
    /// Item title / metadata text, denormalized per interaction record.
    pub title: String,
}

/// One user's interactions, sorted by timestamp (stable for ties).
#[derive(Clone, Debug)]
pub struct UserSequence {
    pub user_id: String,
    pub items: Vec<ItemId>,
    pub timestamps: Vec<i64>,
}

impl UserSequence {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    /// Sorted by user id; interactions within each user sorted by time.
    pub sequences: Vec<UserSequence>,
    /// item id -> metadata text (first seen wins).
    pub items: BTreeMap<ItemId, String>,
    pub skipped_lines: usize,
}

impl Dataset {
    pub fn n_interactions(&self) -> usize {
        self.sequences.iter().map(|s| s.len()).sum()
    }

    pub fn item_metadata(&self) -> Vec<(ItemId, String)> {
        self.items.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    /// Timestamp at the given quantile of all interactions (0 <= q <= 1).
    pub fn timestamp_quantile(&self, q: f64) -> i64 {
        let mut ts: Vec<i64> =
            self.sequences.iter().flat_map(|s| s.timestamps.iter().copied()).collect();
        ts.sort_unstable();
        if ts.is_empty() {
            return 0;
        }
        let idx = ((ts.len() - 1) as f64 * q).round() as usize;
        ts[idx]
    }

    pub fn from_interactions(raw: Vec<Interaction>) -> Result<Dataset> {
        Self::from_interactions_with_skips(raw, 0)
    }

    fn from_interactions_with_skips(raw: Vec<Interaction>, skipped: usize) -> Result<Dataset> {
        if raw.is_empty() {
            return Err(CoreError::data("dataset has no valid interactions".to_string()));
        }
        let mut items = BTreeMap::new();
        let mut by_user: BTreeMap<String, Vec<(i64, ItemId)>> = BTreeMap::new();
        let mut seen = std::collections::HashSet::new();
        for rec in raw {
            // Duplicate (user, item, timestamp) triples keep the first record.
            if !seen.insert((rec.user_id.clone(), rec.item_id.clone(), rec.timestamp)) {
                continue;
            }
            items.entry(rec.item_id.clone()).or_insert(rec.title);
            by_user.entry(rec.user_id).or_default().push((rec.timestamp, rec.item_id));
        }
        let sequences = by_user
            .into_iter()
            .map(|(user_id, mut evs)| {
                evs.sort_by_key(|(ts, _)| *ts); // stable: file order breaks ties
                let (timestamps, items) = evs.into_iter().unzip();
                UserSequence { user_id, items, timestamps }
            })
            .collect();
        Ok(Dataset { sequences, items, skipped_lines: skipped })
    }
}

/// Parse a JSONL interaction log. Lines that are not valid records are
/// counted and skipped; an empty result is an error.
pub fn ingest_jsonl(path: &Path) -> Result<Dataset> {
    let file =
        std::fs::File::open(path).map_err(|e| CoreError::io(path.display().to_string(), e))?;
    let mut raw = Vec::new();
    let mut skipped = 0usize;
    for line in std::io::BufReader::new(file).lines() {
        let line = line.map_err(|e| CoreError::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<Interaction>(&line) {
            Ok(rec) if !rec.user_id.is_empty() && !rec.item_id.is_empty() => raw.push(rec),
            _ => skipped += 1,
        }
    }
    if raw.is_empty() {
        return Err(CoreError::data(format!("no valid interaction lines in {}", path.display())));
    }
    Dataset::from_interactions_with_skips(raw, skipped)
}

pub fn write_jsonl(path: &Path, interactions: &[Interaction]) -> Result<()> {
    use std::io::Write;
    let file =
        std::fs::File::create(path).map_err(|e| CoreError::io(path.display().to_string(), e))?;
    let mut w = std::io::BufWriter::new(file);
    for rec in interactions {
        let line = serde_json::to_string(rec)
            .map_err(|e| CoreError::format(path.display().to_string(), e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| CoreError::io(path.display().to_string(), e))?;
    }
    Ok(())
}
