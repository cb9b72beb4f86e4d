//! Probing-based edit-layer location.
//!
//! For each digit position, keys captured from edit-request contexts
//! (label 1) and from original training contexts at the same decoder
//! position (label 0) feed a binary linear probe per layer. The layer
//! whose probe separates the classes best becomes that position's edit
//! layer: if a linear map can tell the new keys apart there, a linear
//! update can remap them with little collateral damage.

use std::collections::BTreeMap;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::linalg::dot;
use crate::model::Model;
use crate::num::{sigmoid, Scalar};

/// Keys plus binary labels for one (position, layer) probing cell.
#[derive(Clone, Debug)]
pub struct ProbeDataset {
    pub position: usize,
    pub layer: usize,
    /// (key, label); label 1 = edit-request context, 0 = original data.
    pub samples: Vec<(Vec<f64>, u8)>,
}

impl ProbeDataset {
    pub fn class_counts(&self) -> (usize, usize) {
        let ones = self.samples.iter().filter(|(_, y)| *y == 1).count();
        (self.samples.len() - ones, ones)
    }
}

/// Chosen edit layer for a position.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerChoice {
    pub position: usize,
    pub layer: usize,
    pub validation_accuracy: f64,
}

/// Trained probe parameters.
#[derive(Clone, Debug)]
pub struct Probe {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub validation_accuracy: f64,
}

pub const PROBE_STEPS: usize = 500;
pub const PROBE_LR: f64 = 0.1;
pub const PROBE_L2: f64 = 1e-4;

/// Capture keys for every decoder layer in one forward per context.
/// Returns per-layer key vectors at the requested position.
pub fn capture_layer_keys<S: Scalar>(
    model: &Model<S>,
    history: &[usize],
    decoder: &[usize],
    position: usize,
) -> Result<Vec<Vec<f64>>> {
    let sites: Vec<(usize, usize)> =
        (0..model.cfg.n_dec_layers).map(|l| (l, position)).collect();
    let caps = model.capture_activations(history, decoder, &sites)?;
    Ok(caps
        .into_iter()
        .map(|c| c.key.iter().map(|x| x.as_f64()).collect())
        .collect())
}

/// Build probe datasets for all layers of one position in a single pass
/// over the provided contexts.
///
/// `edit_contexts` and `original_contexts` are (history, decoder) token
/// pairs whose last decoder position plays the digit-`position` role.
pub fn build_probe_datasets<S: Scalar>(
    model: &Model<S>,
    position: usize,
    edit_contexts: &[(Vec<usize>, Vec<usize>)],
    original_contexts: &[(Vec<usize>, Vec<usize>)],
) -> Result<Vec<ProbeDataset>> {
    if edit_contexts.is_empty() || original_contexts.is_empty() {
        return Err(CoreError::input(format!(
            "degenerate probe at position {position}: {} edit / {} original contexts",
            edit_contexts.len(),
            original_contexts.len()
        )));
    }
    let n_layers = model.cfg.n_dec_layers;
    let capture = |contexts: &[(Vec<usize>, Vec<usize>)], label: u8| {
        let per_ctx: Vec<Result<Vec<Vec<f64>>>> = contexts
            .par_iter()
            .map(|(h, d)| capture_layer_keys(model, h, d, position))
            .collect();
        let mut by_layer: Vec<Vec<(Vec<f64>, u8)>> = vec![Vec::new(); n_layers];
        for keys in per_ctx {
            let keys = keys?;
            for (l, k) in keys.into_iter().enumerate() {
                by_layer[l].push((k, label));
            }
        }
        Ok::<_, CoreError>(by_layer)
    };
    let ones = capture(edit_contexts, 1)?;
    let zeros = capture(original_contexts, 0)?;
    Ok(ones
        .into_iter()
        .zip(zeros)
        .enumerate()
        .map(|(layer, (mut pos_samples, neg_samples))| {
            pos_samples.extend(neg_samples);
            ProbeDataset { position, layer, samples: pos_samples }
        })
        .collect())
}

fn accuracy(weights: &[f64], bias: f64, samples: &[&(Vec<f64>, u8)]) -> f64 {
    let correct = samples
        .iter()
        .filter(|(k, y)| {
            let p = sigmoid(dot(weights, k) + bias);
            (p >= 0.5) == (*y == 1)
        })
        .count();
    correct as f64 / samples.len().max(1) as f64
}

/// Logistic regression by full-batch gradient descent with an 80/20 split.
/// A single-class training split is reshuffled once, then rejected.
pub fn train_probe(dataset: &ProbeDataset, split_ratio: f64, seed: u64) -> Result<Probe> {
    let n = dataset.samples.len();
    if n < 2 {
        return Err(CoreError::input("probe needs at least two samples"));
    }
    let (c0, c1) = dataset.class_counts();
    if c0 == 0 || c1 == 0 {
        return Err(CoreError::input(format!(
            "probe dataset at (p{}, l{}) has a single class",
            dataset.position, dataset.layer
        )));
    }
    let n_train = ((n as f64 * split_ratio).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train: Vec<&(Vec<f64>, u8)>;
    let mut valid: Vec<&(Vec<f64>, u8)>;
    let mut attempts = 0;
    loop {
        order.shuffle(&mut rng);
        train = order[..n_train].iter().map(|&i| &dataset.samples[i]).collect();
        valid = order[n_train..].iter().map(|&i| &dataset.samples[i]).collect();
        let ones = train.iter().filter(|(_, y)| *y == 1).count();
        if ones > 0 && ones < train.len() {
            break;
        }
        attempts += 1;
        if attempts >= 2 {
            return Err(CoreError::input(format!(
                "single-class training split at (p{}, l{}) after resample",
                dataset.position, dataset.layer
            )));
        }
    }

    let dim = dataset.samples[0].0.len();
    let mut weights = vec![0.0f64; dim];
    let mut bias = 0.0f64;
    let inv_n = 1.0 / train.len() as f64;
    for _ in 0..PROBE_STEPS {
        let mut gw = vec![0.0f64; dim];
        let mut gb = 0.0f64;
        for (k, y) in &train {
            let p = sigmoid(dot(&weights, k) + bias);
            let err = p - f64::from(*y);
            for (g, kj) in gw.iter_mut().zip(k) {
                *g += err * kj;
            }
            gb += err;
        }
        for (w, g) in weights.iter_mut().zip(&gw) {
            *w -= PROBE_LR * (g * inv_n + PROBE_L2 * *w);
        }
        bias -= PROBE_LR * gb * inv_n;
    }
    let validation_accuracy = accuracy(&weights, bias, &valid);
    Ok(Probe { weights, bias, validation_accuracy })
}

/// Top-1 layer per position by validation accuracy; ties break toward the
/// shallower layer.
pub fn select_layers(accuracies: &BTreeMap<(usize, usize), f64>) -> BTreeMap<usize, LayerChoice> {
    let mut best: BTreeMap<usize, LayerChoice> = BTreeMap::new();
    for (&(position, layer), &acc) in accuracies {
        best.entry(position)
            .and_modify(|cur| {
                if acc > cur.validation_accuracy {
                    *cur = LayerChoice { position, layer, validation_accuracy: acc };
                }
            })
            .or_insert(LayerChoice { position, layer, validation_accuracy: acc });
    }
    best
}

/// Threshold below which a position is flagged as weakly separable.
pub const SEPARABILITY_WARN: f64 = 0.7;

/// Positions whose best layer fails the separability precondition.
pub fn weak_positions(choices: &BTreeMap<usize, LayerChoice>) -> Vec<usize> {
    choices
        .values()
        .filter(|c| c.validation_accuracy < SEPARABILITY_WARN)
        .map(|c| c.position)
        .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub position: usize,
    pub layer: usize,
    pub accuracy: f64,
    pub selected: bool,
}

/// Human-readable table plus JSON-lines records.
pub fn layer_report(
    accuracies: &BTreeMap<(usize, usize), f64>,
    choices: &BTreeMap<usize, LayerChoice>,
) -> (String, Vec<ProbeRecord>) {
    let mut table = String::from("position  layer  accuracy  selected\n");
    let mut records = Vec::new();
    for (&(position, layer), &acc) in accuracies {
        let selected = choices.get(&position).is_some_and(|c| c.layer == layer);
        table.push_str(&format!(
            "{position:>8}  {layer:>5}  {acc:>8.4}  {}\n",
            if selected { "*" } else { "" }
        ));
        records.push(ProbeRecord { position, layer, accuracy: acc, selected });
    }
    (table, records)
}

pub fn save_probe_records(path: &Path, records: &[ProbeRecord]) -> Result<()> {
    let file =
        std::fs::File::create(path).map_err(|e| CoreError::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r)
            .map_err(|e| CoreError::format(path.display().to_string(), e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| CoreError::io(path.display().to_string(), e))?;
    }
    Ok(())
}

pub fn load_probe_records(path: &Path) -> Result<Vec<ProbeRecord>> {
    let file =
        std::fs::File::open(path).map_err(|e| CoreError::io(path.display().to_string(), e))?;
    let mut out = Vec::new();
    for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CoreError::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| {
            CoreError::format(path.display().to_string(), format!("line {}: {e}", lineno + 1))
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn separable_dataset() -> ProbeDataset {
        // Class 0 lives at x0 < -1, class 1 at x0 > 1.
        let mut samples = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..60 {
            let x0: f64 = rng.gen_range(1.0..3.0);
            samples.push((vec![x0, rng.gen_range(-1.0..1.0)], 1u8));
            let x0: f64 = rng.gen_range(-3.0..-1.0);
            samples.push((vec![x0, rng.gen_range(-1.0..1.0)], 0u8));
        }
        ProbeDataset { position: 0, layer: 0, samples }
    }

    #[test]
    fn separable_toy_reaches_perfect_accuracy() {
        let probe = train_probe(&separable_dataset(), 0.8, 1).unwrap();
        assert_eq!(probe.validation_accuracy, 1.0);
    }

    #[test]
    fn zero_init_predicts_half_everywhere() {
        // At step 0 the probe is theta = 0, so sigmoid(<0, k>) = 0.5.
        let p = sigmoid(dot(&[0.0, 0.0], &[3.0, -4.0]) + 0.0);
        assert_eq!(p, 0.5);
    }

    #[test]
    fn shuffled_labels_score_near_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let samples: Vec<(Vec<f64>, u8)> = (0..200)
            .map(|_| {
                let k: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
                (k, u8::from(rng.gen_bool(0.5)))
            })
            .collect();
        let ds = ProbeDataset { position: 0, layer: 0, samples };
        let probe = train_probe(&ds, 0.8, 3).unwrap();
        assert!(
            (0.35..=0.65).contains(&probe.validation_accuracy),
            "permutation-null accuracy {} outside [0.35, 0.65]",
            probe.validation_accuracy
        );
    }

    #[test]
    fn probe_deterministic_under_seed() {
        let ds = separable_dataset();
        let a = train_probe(&ds, 0.8, 9).unwrap();
        let b = train_probe(&ds, 0.8, 9).unwrap();
        assert_eq!(a.weights, b.weights);
        assert_eq!(a.validation_accuracy, b.validation_accuracy);
    }

    #[test]
    fn single_class_dataset_rejected() {
        let samples: Vec<(Vec<f64>, u8)> = (0..10).map(|i| (vec![i as f64], 1u8)).collect();
        let ds = ProbeDataset { position: 0, layer: 0, samples };
        assert!(train_probe(&ds, 0.8, 0).is_err());
    }

    #[test]
    fn argmax_selection_with_shallow_tie_break() {
        let mut acc = BTreeMap::new();
        acc.insert((0usize, 0usize), 0.6);
        acc.insert((0, 1), 0.9);
        acc.insert((0, 2), 0.7);
        acc.insert((1, 0), 0.8);
        acc.insert((1, 3), 0.8);
        acc.insert((2, 2), 0.1);
        let choices = select_layers(&acc);
        assert_eq!(choices[&0].layer, 1, "argmax");
        assert_eq!(choices[&1].layer, 0, "tie breaks shallow");
        assert_eq!(choices[&2].layer, 2, "single layer wins regardless");
        // Scaling accuracies by a positive constant keeps the argmax.
        let scaled: BTreeMap<(usize, usize), f64> =
            acc.iter().map(|(&k, &v)| (k, v * 0.5)).collect();
        let choices2 = select_layers(&scaled);
        for (p, c) in &choices {
            assert_eq!(choices2[p].layer, c.layer);
        }
        assert_eq!(weak_positions(&choices), vec![2]);
    }

    #[test]
    fn report_marks_selection() {
        let mut acc = BTreeMap::new();
        acc.insert((0usize, 0usize), 0.4);
        acc.insert((0, 1), 0.9);
        let choices = select_layers(&acc);
        let (table, records) = layer_report(&acc, &choices);
        assert!(table.contains('*'));
        assert_eq!(records.iter().filter(|r| r.selected).count(), 1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("probes.jsonl");
        save_probe_records(&path, &records).unwrap();
        assert_eq!(load_probe_records(&path).unwrap().len(), 2);
    }
}
