//! Item tokenization: metadata -> unit-norm embedding -> M-digit semantic ID.
//!
//! Codebooks are fit on warm items only; cold items are quantized with the
//! frozen codebooks, so new catalog entries get IDs without retraining
//! anything. Collisions are resolved by bumping the last digit to the
//! nearest unused code.

mod embed;
mod rq;
mod vocab;

pub use embed::{embed_items, load_embedding_csv, ItemEmbedding};
pub use rq::{fit_rq, residual_energies, Codebooks};
pub use vocab::{VocabLayout, TOKEN_BOS, TOKEN_EOS, TOKEN_PAD, TOKEN_UNK, N_SPECIAL_TOKENS};

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use crate::error::{CoreError, Result};

pub type ItemId = String;

/// Fixed-length semantic ID: one code index per quantization level.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SemanticId {
    digits: Vec<u16>,
}

impl SemanticId {
    pub fn new(digits: Vec<u16>) -> Self {
        SemanticId { digits }
    }

    pub fn digits(&self) -> &[u16] {
        &self.digits
    }

    pub fn len(&self) -> usize {
        self.digits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.digits.is_empty()
    }

    pub fn prefix(&self, n: usize) -> &[u16] {
        &self.digits[..n]
    }
}

impl std::fmt::Display for SemanticId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s: Vec<String> = self.digits.iter().map(|d| d.to_string()).collect();
        write!(f, "{}", s.join(","))
    }
}

/// Catalog-wide item -> SID mapping with a reverse index for parsing
/// generated digit sequences back into items.
#[derive(Clone, Debug, Default)]
pub struct SidTable {
    forward: BTreeMap<ItemId, SemanticId>,
    reverse: HashMap<Vec<u16>, ItemId>,
}

impl SidTable {
    pub fn get(&self, item: &str) -> Option<&SemanticId> {
        self.forward.get(item)
    }

    pub fn item_for_digits(&self, digits: &[u16]) -> Option<&ItemId> {
        self.reverse.get(digits)
    }

    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ItemId, &SemanticId)> {
        self.forward.iter()
    }

    pub fn insert(&mut self, item: ItemId, sid: SemanticId) {
        self.reverse.insert(sid.digits().to_vec(), item.clone());
        self.forward.insert(item, sid);
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)
            .map_err(|e| CoreError::io(path.display().to_string(), e))?;
        let mut w = BufWriter::new(file);
        for (item, sid) in &self.forward {
            writeln!(w, "{item}\t{sid}").map_err(|e| CoreError::io(path.display().to_string(), e))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)
            .map_err(|e| CoreError::io(path.display().to_string(), e))?;
        let mut table = SidTable::default();
        for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| CoreError::io(path.display().to_string(), e))?;
            if line.trim().is_empty() {
                continue;
            }
            let (item, digits) = line.split_once('\t').ok_or_else(|| {
                CoreError::format(path.display().to_string(), format!("line {}: missing tab", lineno + 1))
            })?;
            let digits: std::result::Result<Vec<u16>, _> =
                digits.split(',').map(|d| d.trim().parse::<u16>()).collect();
            let digits = digits.map_err(|e| {
                CoreError::format(path.display().to_string(), format!("line {}: {e}", lineno + 1))
            })?;
            table.insert(item.to_string(), SemanticId::new(digits));
        }
        if table.is_empty() {
            return Err(CoreError::data(format!("empty SID table at {}", path.display())));
        }
        Ok(table)
    }
}

/// Quantize embeddings into unique SIDs. Items earlier in the slice win
/// collisions; callers pass warm items before cold so cold assignment never
/// perturbs warm IDs.
pub fn assign_sids(embeddings: &[ItemEmbedding], codebooks: &Codebooks) -> Result<SidTable> {
    let k = codebooks.codes_per_level();
    let mut table = SidTable::default();
    let mut used: HashSet<Vec<u16>> = HashSet::new();
    for emb in embeddings {
        let (mut digits, residuals) = codebooks.quantize(&emb.vector);
        if used.contains(&digits) {
            // Reassign the last digit to the nearest unused code, ties to the
            // lower index.
            let last_level = codebooks.levels() - 1;
            let pre_residual = &residuals[last_level];
            let mut best: Option<(f64, u16)> = None;
            for cand in 0..k as u16 {
                let mut trial = digits.clone();
                *trial.last_mut().expect("non-empty sid") = cand;
                if used.contains(&trial) {
                    continue;
                }
                let d = codebooks.distance_at_level(last_level, pre_residual, cand as usize);
                if best.map_or(true, |(bd, _)| d < bd) {
                    best = Some((d, cand));
                }
            }
            match best {
                Some((_, cand)) => *digits.last_mut().unwrap() = cand,
                None => {
                    return Err(CoreError::data(format!(
                        "unresolvable SID collision for item {}: all {k} last-digit codes taken",
                        emb.item_id
                    )))
                }
            }
        }
        used.insert(digits.clone());
        table.insert(emb.item_id.clone(), SemanticId::new(digits));
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;

    fn unit(v: Vec<f64>) -> Vec<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    #[test]
    fn hand_nearest_neighbor_assignment() {
        // 1-dim toy, K=2 centroids {-1, +1}: -0.9 -> code 0, 0.8 -> code 1.
        let codebooks = Codebooks::from_levels(vec![Matrix::from_rows(vec![vec![-1.0], vec![1.0]])]);
        let embs = vec![
            ItemEmbedding { item_id: "a".into(), vector: vec![-0.9] },
            ItemEmbedding { item_id: "b".into(), vector: vec![0.8] },
        ];
        let table = assign_sids(&embs, &codebooks).unwrap();
        assert_eq!(table.get("a").unwrap().digits(), &[0]);
        assert_eq!(table.get("b").unwrap().digits(), &[1]);
    }

    #[test]
    fn identical_embeddings_get_distinct_sids() {
        let codebooks = Codebooks::from_levels(vec![
            Matrix::from_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0]]),
            Matrix::from_rows(vec![vec![0.0, 0.0], vec![0.1, 0.1]]),
        ]);
        let v = unit(vec![1.0, 0.1]);
        let embs = vec![
            ItemEmbedding { item_id: "x".into(), vector: v.clone() },
            ItemEmbedding { item_id: "y".into(), vector: v },
        ];
        let table = assign_sids(&embs, &codebooks).unwrap();
        let sx = table.get("x").unwrap();
        let sy = table.get("y").unwrap();
        assert_ne!(sx, sy);
        assert_eq!(sx.digits()[0], sy.digits()[0], "only last digit may differ");
    }

    #[test]
    fn unique_codes_unchanged_by_resolution() {
        let codebooks = Codebooks::from_levels(vec![Matrix::from_rows(vec![vec![-1.0], vec![1.0]])]);
        let embs = vec![
            ItemEmbedding { item_id: "a".into(), vector: vec![-1.0] },
            ItemEmbedding { item_id: "b".into(), vector: vec![1.0] },
        ];
        let table = assign_sids(&embs, &codebooks).unwrap();
        assert_eq!(table.get("a").unwrap().digits(), &[0]);
        assert_eq!(table.get("b").unwrap().digits(), &[1]);
    }

    #[test]
    fn collision_overflow_errors() {
        // K=1 and two identical items: only one last-digit slot exists.
        let codebooks = Codebooks::from_levels(vec![Matrix::from_rows(vec![vec![0.5]])]);
        let embs = vec![
            ItemEmbedding { item_id: "a".into(), vector: vec![1.0] },
            ItemEmbedding { item_id: "b".into(), vector: vec![1.0] },
        ];
        let err = assign_sids(&embs, &codebooks).unwrap_err();
        assert!(matches!(err, CoreError::Data(_)));
    }

    #[test]
    fn sid_table_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sids.tsv");
        let mut table = SidTable::default();
        table.insert("item-1".into(), SemanticId::new(vec![0, 3, 2, 1]));
        table.insert("item-2".into(), SemanticId::new(vec![5, 0, 0, 0]));
        table.save(&path).unwrap();
        let loaded = SidTable::load(&path).unwrap();
        assert_eq!(loaded.get("item-1").unwrap().digits(), &[0, 3, 2, 1]);
        assert_eq!(loaded.item_for_digits(&[5, 0, 0, 0]).unwrap(), "item-2");
    }
}
