//! Residual quantization via deterministic k-means.
//!
//! Level 0 clusters the raw embeddings; each following level clusters the
//! residuals left by the previous one. Seeding is k-means++ under a fixed
//! RNG, Lloyd runs a fixed iteration count, and empty clusters are reseeded
//! from the farthest point, so a given (data, seed) pair always produces the
//! same codebooks.

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::linalg::Matrix;

use super::embed::ItemEmbedding;

const LLOYD_ITERATIONS: usize = 50;

#[derive(Clone, Debug)]
pub struct Codebooks {
    /// One K x d_emb centroid matrix per level.
    levels: Vec<Matrix<f64>>,
}

impl Codebooks {
    pub fn from_levels(levels: Vec<Matrix<f64>>) -> Self {
        assert!(!levels.is_empty());
        Codebooks { levels }
    }

    pub fn levels(&self) -> usize {
        self.levels.len()
    }

    pub fn codes_per_level(&self) -> usize {
        self.levels[0].rows()
    }

    pub fn dim(&self) -> usize {
        self.levels[0].cols()
    }

    pub fn level(&self, l: usize) -> &Matrix<f64> {
        &self.levels[l]
    }

    pub fn centroid(&self, level: usize, code: usize) -> &[f64] {
        self.levels[level].row(code)
    }

    /// Squared distance between a residual and a centroid at a level.
    pub fn distance_at_level(&self, level: usize, residual: &[f64], code: usize) -> f64 {
        sq_dist(residual, self.centroid(level, code))
    }

    /// Greedy nearest-centroid quantization. Returns the digit per level and
    /// the residual *entering* each level (residuals[l] is what level l saw).
    pub fn quantize(&self, vector: &[f64]) -> (Vec<u16>, Vec<Vec<f64>>) {
        let mut residual = vector.to_vec();
        let mut digits = Vec::with_capacity(self.levels.len());
        let mut residuals = Vec::with_capacity(self.levels.len());
        for level in &self.levels {
            residuals.push(residual.clone());
            let code = nearest_row(level, &residual);
            let c = level.row(code);
            for (r, ci) in residual.iter_mut().zip(c) {
                *r -= ci;
            }
            digits.push(code as u16);
        }
        (digits, residuals)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest row by squared distance, ties to the lower index.
fn nearest_row(m: &Matrix<f64>, v: &[f64]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for i in 0..m.rows() {
        let d = sq_dist(m.row(i), v);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

fn kmeans_pp_init(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    let first = rng.gen_range(0..n);
    centroids.push(points[first].clone());
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            WeightedIndex::new(&d2).expect("non-negative weights").sample(rng)
        } else {
            // All mass on chosen points (duplicates); fall back to uniform.
            rng.gen_range(0..n)
        };
        centroids.push(points[idx].clone());
        for (di, p) in d2.iter_mut().zip(points) {
            let d = sq_dist(p, centroids.last().unwrap());
            if d < *di {
                *di = d;
            }
        }
    }
    centroids
}

fn lloyd(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
    let dim = points[0].len();
    let mut centroids = kmeans_pp_init(points, k, rng);
    let mut assignment = vec![0usize; points.len()];
    for _ in 0..LLOYD_ITERATIONS {
        // Assign.
        for (a, p) in assignment.iter_mut().zip(points) {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, cent) in centroids.iter().enumerate() {
                let d = sq_dist(p, cent);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            *a = best;
        }
        // Update.
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (a, p) in assignment.iter().zip(points) {
            counts[*a] += 1;
            for (s, x) in sums[*a].iter_mut().zip(p) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for (ci, s) in centroids[c].iter_mut().zip(&sums[c]) {
                    *ci = s / counts[c] as f64;
                }
            } else {
                // Reseed the empty cluster from the farthest point.
                let far = points
                    .iter()
                    .enumerate()
                    .map(|(i, p)| (i, sq_dist(p, &centroids[assignment[i]])))
                    .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(b.0.cmp(&a.0)))
                    .map(|(i, _)| i)
                    .unwrap();
                centroids[c] = points[far].clone();
            }
        }
    }
    Matrix::from_rows(centroids)
}

/// Fit residual codebooks: `m` levels of k-means with `k` codes each.
pub fn fit_rq(embeddings: &[ItemEmbedding], m: usize, k: usize, seed: u64) -> Result<Codebooks> {
    if m == 0 || k == 0 {
        return Err(CoreError::config("fit_rq requires m >= 1 and k >= 1".to_string()));
    }
    if embeddings.len() < k {
        return Err(CoreError::config(format!(
            "fit_rq needs at least k={k} items, got {}",
            embeddings.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut residuals: Vec<Vec<f64>> = embeddings.iter().map(|e| e.vector.clone()).collect();
    let mut levels = Vec::with_capacity(m);
    for _ in 0..m {
        let centroids = lloyd(&residuals, k, &mut rng);
        for r in residuals.iter_mut() {
            let code = nearest_row(&centroids, r);
            let c = centroids.row(code);
            for (ri, ci) in r.iter_mut().zip(c) {
                *ri -= ci;
            }
        }
        levels.push(centroids);
    }
    Ok(Codebooks::from_levels(levels))
}

/// Sum over items of the squared residual norm after each level.
/// `energies[l]` is the energy remaining once level `l` has been applied.
pub fn residual_energies(embeddings: &[ItemEmbedding], codebooks: &Codebooks) -> Vec<f64> {
    let mut energies = vec![0.0; codebooks.levels()];
    for emb in embeddings {
        let mut residual = emb.vector.clone();
        for (l, level) in codebooks.levels.iter().enumerate() {
            let code = nearest_row(level, &residual);
            let c = level.row(code);
            for (ri, ci) in residual.iter_mut().zip(c) {
                *ri -= ci;
            }
            energies[l] += residual.iter().map(|x| x * x).sum::<f64>();
        }
    }
    energies
}
