//! Deterministic text embedder: hashed bag-of-tokens with signed buckets.
//!
//! Stands in for a pretrained sentence encoder. Texts sharing tokens land
//! near each other; hashing is FNV-1a so vectors are stable across runs and
//! platforms. Precomputed embeddings can be loaded from CSV instead.

use std::io::BufRead;
use std::path::Path;

use crate::error::{CoreError, Result};

#[derive(Clone, Debug)]
pub struct ItemEmbedding {
    pub item_id: String,
    /// Unit ell-2 norm.
    pub vector: Vec<f64>,
}

impl ItemEmbedding {
    pub fn cosine(&self, other: &ItemEmbedding) -> f64 {
        self.vector.iter().zip(&other.vector).map(|(a, b)| a * b).sum()
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_string())
        .collect()
}

/// Embed one text into a signed hashed bag-of-tokens vector, unit-normed.
pub fn embed_text(text: &str, d_emb: usize) -> Result<Vec<f64>> {
    let tokens = tokenize(text);
    if tokens.is_empty() {
        return Err(CoreError::input(format!("cannot embed text with no tokens: {text:?}")));
    }
    let mut v = vec![0.0; d_emb];
    for tok in &tokens {
        let h = fnv1a64(tok.as_bytes());
        let bucket = (h % d_emb as u64) as usize;
        let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
        v[bucket] += sign;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(CoreError::input(format!("text hashes to the zero vector: {text:?}")));
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Ok(v)
}

pub fn embed_items(metadata: &[(String, String)], d_emb: usize) -> Result<Vec<ItemEmbedding>> {
    metadata
        .iter()
        .map(|(item_id, text)| {
            Ok(ItemEmbedding { item_id: item_id.clone(), vector: embed_text(text, d_emb)? })
        })
        .collect()
}

/// Load precomputed embeddings from CSV lines `item_id,f0,...,f{d-1}`.
/// Vectors are re-normalized to unit length on load.
pub fn load_embedding_csv(path: &Path, d_emb: usize) -> Result<Vec<ItemEmbedding>> {
    let file =
        std::fs::File::open(path).map_err(|e| CoreError::io(path.display().to_string(), e))?;
    let mut out = Vec::new();
    for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CoreError::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let item_id = parts
            .next()
            .ok_or_else(|| {
                CoreError::format(path.display().to_string(), format!("line {}: empty", lineno + 1))
            })?
            .trim()
            .to_string();
        let vals: std::result::Result<Vec<f64>, _> =
            parts.map(|p| p.trim().parse::<f64>()).collect();
        let mut vector = vals.map_err(|e| {
            CoreError::format(path.display().to_string(), format!("line {}: {e}", lineno + 1))
        })?;
        if vector.len() != d_emb {
            return Err(CoreError::format(
                path.display().to_string(),
                format!("line {}: expected {d_emb} floats, got {}", lineno + 1, vector.len()),
            ));
        }
        let norm = vector.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(norm.is_finite() && norm > 0.0) {
            return Err(CoreError::format(
                path.display().to_string(),
                format!("line {}: embedding for {item_id} is degenerate", lineno + 1),
            ));
        }
        vector.iter_mut().for_each(|x| *x /= norm);
        out.push(ItemEmbedding { item_id, vector });
    }
    if out.is_empty() {
        return Err(CoreError::data(format!("no embeddings in {}", path.display())));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identical_text_identical_vector() {
        let a = embed_text("usb cable", 32).unwrap();
        let b = embed_text("usb cable", 32).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn outputs_are_unit_norm() {
        for text in ["usb cable", "a", "wireless noise cancelling headphones 2024"] {
            let v = embed_text(text, 32).unwrap();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6, "{text}: {norm}");
        }
    }

    #[test]
    fn empty_text_rejected() {
        assert!(embed_text("", 32).is_err());
        assert!(embed_text("!!! --- ???", 32).is_err());
    }

    #[test]
    fn shared_tokens_raise_cosine_over_disjoint() {
        // 100-item corpus: pairs sharing half their tokens should be more
        // similar on average than token-disjoint pairs.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut words: Vec<String> = (0..1200).map(|i| format!("w{i}")).collect();
        words.shuffle(&mut rng);
        let mut sim_half = 0.0;
        let mut sim_disjoint = 0.0;
        let n = 100;
        for i in 0..n {
            let base: Vec<&String> = words[i * 12..i * 12 + 8].iter().collect();
            let spare: Vec<&String> = words[i * 12 + 8..i * 12 + 12].iter().collect();
            let text_a = base.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(" ");
            // shares 4 of 8 tokens with A
            let text_b = base[..4]
                .iter()
                .chain(spare.iter())
                .map(|s| s.as_str())
                .collect::<Vec<_>>()
                .join(" ");
            // disjoint tokens, drawn from a different item's block
            let j = (i + 50) % n;
            let text_c =
                words[j * 12..j * 12 + 8].iter().map(|s| s.as_str()).collect::<Vec<_>>().join(" ");
            let va = embed_text(&text_a, 32).unwrap();
            let vb = embed_text(&text_b, 32).unwrap();
            let vc = embed_text(&text_c, 32).unwrap();
            sim_half += va.iter().zip(&vb).map(|(a, b)| a * b).sum::<f64>();
            sim_disjoint += va.iter().zip(&vc).map(|(a, b)| a * b).sum::<f64>();
        }
        assert!(
            sim_half / n as f64 > sim_disjoint / n as f64,
            "half-overlap {} should beat disjoint {}",
            sim_half / n as f64,
            sim_disjoint / n as f64
        );
    }

    #[test]
    fn csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.csv");
        std::fs::write(&path, "item-a,1.0,0.0,0.0,0.0\nitem-b,0.5,0.5,0.5,0.5\n").unwrap();
        let embs = load_embedding_csv(&path, 4).unwrap();
        assert_eq!(embs.len(), 2);
        assert!((embs[1].vector[0] - 0.5).abs() < 1e-12);
        let bad = dir.path().join("bad.csv");
        std::fs::write(&bad, "item-a,1.0,2.0\n").unwrap();
        assert!(load_embedding_csv(&bad, 4).is_err());
    }
}
