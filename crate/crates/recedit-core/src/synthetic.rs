//! Synthetic interaction corpus with latent clusters and withheld cold items.
//!
//! Items live in latent clusters with cluster-coherent metadata tokens, so
//! the hashed embedder recovers the cluster geometry. Users follow a sticky
//! cluster-level Markov walk with Zipf-popular items inside each cluster.
//! Cold items never appear before the cold boundary and only surface as
//! late targets, which is exactly the precondition for cold-start collapse:
//! their SID patterns are unseen at training time.

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Interaction};
use crate::error::{CoreError, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_items: usize,
    pub n_cold: usize,
    pub n_users: usize,
    pub seq_len_min: usize,
    pub seq_len_max: usize,
    pub n_clusters: usize,
    /// Probability an interaction ignores the cluster walk entirely.
    pub noise: f64,
    pub horizon: i64,
    /// Probability of staying in the current cluster at each step.
    pub cluster_stay_prob: f64,
    /// Zipf exponent for within-cluster item popularity.
    pub popularity_exponent: f64,
    /// After the cold boundary, probability that a pick targets a cold item.
    pub cold_target_rate: f64,
    /// Fraction of the horizon before which cold items are withheld.
    pub cold_boundary_frac: f64,
    /// Cold items concentrate in this many clusters (new catalog entries
    /// arrive in emerging categories, not uniformly).
    pub cold_clusters: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_items: 2000,
            n_cold: 200,
            n_users: 5000,
            seq_len_min: 5,
            seq_len_max: 12,
            n_clusters: 8,
            noise: 0.08,
            horizon: 1_000_000,
            cluster_stay_prob: 0.82,
            popularity_exponent: 1.3,
            cold_target_rate: 0.5,
            cold_boundary_frac: 0.9,
            cold_clusters: 3,
        }
    }
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        if self.n_cold >= self.n_items {
            return Err(CoreError::config("n_cold must be < n_items"));
        }
        if self.n_clusters < 2 {
            return Err(CoreError::config("need at least 2 latent clusters"));
        }
        if self.n_items < 2 * self.n_clusters {
            return Err(CoreError::config("need >= 2 items per cluster"));
        }
        if self.seq_len_min < 2 || self.seq_len_max < self.seq_len_min {
            return Err(CoreError::config("invalid seq_len range"));
        }
        if self.n_users == 0 || self.horizon < 1000 {
            return Err(CoreError::config("n_users >= 1 and horizon >= 1000 required"));
        }
        if !(0.0..=1.0).contains(&self.noise)
            || !(0.0..=1.0).contains(&self.cold_target_rate)
            || !(0.0..1.0).contains(&self.cold_boundary_frac)
        {
            return Err(CoreError::config("rates must lie in [0, 1]"));
        }
        if self.cold_clusters == 0 || self.cold_clusters > self.n_clusters {
            return Err(CoreError::config("cold_clusters must lie in 1..=n_clusters"));
        }
        // Every cluster must own at least one warm item.
        let warm = self.n_items - self.n_cold;
        if warm < self.n_clusters {
            return Err(CoreError::config("fewer warm items than clusters"));
        }
        Ok(())
    }
}

const SYLLABLES: &[&str] = &[
    "ba", "ce", "di", "fo", "gu", "ha", "ke", "li", "mo", "nu", "pa", "re", "si", "to", "vu",
    "wa", "xe", "yo", "za", "qu",
];

fn pseudo_word(rng: &mut ChaCha8Rng) -> String {
    let n = rng.gen_range(2..=4);
    (0..n).map(|_| SYLLABLES[rng.gen_range(0..SYLLABLES.len())]).collect()
}

struct Catalog {
    /// item index -> cluster
    cluster_of: Vec<usize>,
    /// item index -> title
    titles: Vec<String>,
    /// warm item indices per cluster, popularity-ranked
    warm_by_cluster: Vec<Vec<usize>>,
    cold_by_cluster: Vec<Vec<usize>>,
    zipf_by_cluster: Vec<WeightedIndex<f64>>,
}

fn item_id(idx: usize) -> String {
    format!("item-{idx:05}")
}

fn build_catalog(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Catalog {
    let n = spec.n_items;
    let first_cold = n - spec.n_cold;
    // Cluster vocabularies are disjoint so embeddings separate cleanly.
    let mut vocab: Vec<Vec<String>> = Vec::with_capacity(spec.n_clusters);
    for c in 0..spec.n_clusters {
        let words: Vec<String> =
            (0..40).map(|i| format!("{}{}{}", pseudo_word(rng), c, i)).collect();
        vocab.push(words);
    }
    let global: Vec<String> = (0..20).map(|_| pseudo_word(rng)).collect();

    let mut cluster_of = Vec::with_capacity(n);
    let mut titles = Vec::with_capacity(n);
    let mut warm_by_cluster = vec![Vec::new(); spec.n_clusters];
    let mut cold_by_cluster = vec![Vec::new(); spec.n_clusters];
    for idx in 0..n {
        let c = if idx < first_cold { idx % spec.n_clusters } else { idx % spec.cold_clusters };
        cluster_of.push(c);
        let mut words = Vec::with_capacity(7);
        for _ in 0..5 {
            words.push(vocab[c][rng.gen_range(0..vocab[c].len())].clone());
        }
        words.push(global[rng.gen_range(0..global.len())].clone());
        words.push(format!("sku{idx}"));
        titles.push(words.join(" "));
        if idx < first_cold {
            warm_by_cluster[c].push(idx);
        } else {
            cold_by_cluster[c].push(idx);
        }
    }
    let zipf_by_cluster = warm_by_cluster
        .iter()
        .map(|items| {
            let weights: Vec<f64> = (0..items.len())
                .map(|r| 1.0 / ((r + 1) as f64).powf(spec.popularity_exponent))
                .collect();
            WeightedIndex::new(weights).expect("non-empty cluster")
        })
        .collect();
    Catalog { cluster_of, titles, warm_by_cluster, cold_by_cluster, zipf_by_cluster }
}

/// Generate the full interaction log. Deterministic per (spec, seed).
pub fn gen_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Vec<Interaction>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let catalog = build_catalog(spec, &mut rng);
    let cold_boundary = (spec.horizon as f64 * spec.cold_boundary_frac) as i64;
    let any_cold = spec.n_cold > 0;

    let mut interactions = Vec::new();
    for u in 0..spec.n_users {
        let len = rng.gen_range(spec.seq_len_min..=spec.seq_len_max);
        let mut ts: Vec<i64> = (0..len).map(|_| rng.gen_range(0..spec.horizon)).collect();
        ts.sort_unstable();
        for i in 1..ts.len() {
            if ts[i] <= ts[i - 1] {
                ts[i] = ts[i - 1] + 1;
            }
        }
        let mut cluster = rng.gen_range(0..spec.n_clusters);
        for &t in &ts {
            // Cluster walk: sticky, mostly-adjacent transitions.
            if !rng.gen_bool(spec.cluster_stay_prob) {
                cluster = if rng.gen_bool(0.75) {
                    let dir = if rng.gen_bool(0.5) { 1 } else { spec.n_clusters - 1 };
                    (cluster + dir) % spec.n_clusters
                } else {
                    rng.gen_range(0..spec.n_clusters)
                };
            }
            let pick_cluster = if rng.gen_bool(spec.noise) {
                rng.gen_range(0..spec.n_clusters)
            } else {
                cluster
            };
            let idx = if any_cold
                && t >= cold_boundary
                && !catalog.cold_by_cluster[pick_cluster].is_empty()
                && rng.gen_bool(spec.cold_target_rate)
            {
                let cold = &catalog.cold_by_cluster[pick_cluster];
                cold[rng.gen_range(0..cold.len())]
            } else {
                let r = catalog.zipf_by_cluster[pick_cluster].sample(&mut rng);
                catalog.warm_by_cluster[pick_cluster][r]
            };
            interactions.push(Interaction {
                user_id: format!("user-{u:05}"),
                item_id: item_id(idx),
                timestamp: t,
                title: catalog.titles[idx].clone(),
            });
        }
    }
    let _ = &catalog.cluster_of; // cluster labels are implicit in titles
    Ok(interactions)
}

pub fn synthetic_dataset(spec: &SyntheticSpec, seed: u64) -> Result<Dataset> {
    Dataset::from_interactions(gen_synthetic(spec, seed)?)
}
