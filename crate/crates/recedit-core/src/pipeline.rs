//! Glue between the modules: lowering items and histories to tokens,
//! assembling corpora, and orchestrating tokenize -> train -> locate ->
//! edit -> evaluate flows shared by the CLI and the acceptance suite.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::editor::{EditPipelineConfig, TokenizedRequest};
use crate::error::{CoreError, Result};
use crate::evalkit::compare::CompareConfig;
use crate::evalkit::{subsample, EvalCase, EvalExample, IidNorm, SplitSpec};
use crate::knowledge::{
    build_edit_requests, synthesize_all, EditRequest, PseudoSequence, SynthesisReport,
};
use crate::locator::{
    build_probe_datasets, select_layers, train_probe, LayerChoice, ProbeRecord,
};
use crate::model::{Model, ModelConfig, TrainConfig, TrainExample};
use crate::num::Scalar;
use crate::tokenizer::{
    assign_sids, embed_items, fit_rq, load_embedding_csv, Codebooks, ItemEmbedding, ItemId,
    SidTable, VocabLayout, TOKEN_BOS,
};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TokenizerParams {
    /// SID length (codebook levels).
    pub m: usize,
    /// Codes per level.
    pub k: usize,
    pub d_emb: usize,
    pub seed: u64,
}

impl Default for TokenizerParams {
    fn default() -> Self {
        TokenizerParams { m: 4, k: 64, d_emb: 32, seed: 7 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitParams {
    pub train_frac: f64,
    pub valid_frac: f64,
}

impl Default for SplitParams {
    fn default() -> Self {
        SplitParams { train_frac: 0.8, valid_frac: 0.1 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct KnowledgeParams {
    pub neighbors: usize,
    pub per_item_quota: usize,
    /// Pseudo histories keep at most this many most-recent items; the same
    /// cap applies to training and evaluation histories.
    pub history_limit: usize,
}

impl Default for KnowledgeParams {
    fn default() -> Self {
        KnowledgeParams { neighbors: 5, per_item_quota: 4, history_limit: 20 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeParams {
    /// Cap on per-class contexts per position (balanced classes).
    pub samples: usize,
    pub split_ratio: f64,
    pub seed: u64,
}

impl Default for ProbeParams {
    fn default() -> Self {
        ProbeParams { samples: 512, split_ratio: 0.8, seed: 11 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalParams {
    pub beam_width: usize,
    pub top_k: usize,
    pub ks: Vec<usize>,
    pub constrain_trie: bool,
    /// Per-split evaluation subsample; zero evaluates everything.
    pub max_cases: usize,
    pub seed: u64,
    pub iid_norm: IidNorm,
}

impl Default for EvalParams {
    fn default() -> Self {
        EvalParams {
            beam_width: 20,
            top_k: 10,
            ks: vec![10, 20, 50],
            constrain_trie: false,
            max_cases: 600,
            seed: 17,
            iid_norm: IidNorm::Share,
        }
    }
}

/// Every knob of the pipeline, with documented defaults. The CLI config
/// file is a TOML rendering of this struct.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineParams {
    pub tokenizer: TokenizerParams,
    pub split: SplitParams,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub knowledge: KnowledgeParams,
    pub probe: ProbeParams,
    pub edit: EditPipelineConfig,
    pub eval: EvalParams,
    pub compare: CompareConfig,
}

impl PipelineParams {
    pub fn layout(&self) -> VocabLayout {
        VocabLayout::new(self.tokenizer.m, self.tokenizer.k)
    }

    /// Model config with the vocabulary sized to the SID layout.
    pub fn model_config(&self) -> ModelConfig {
        let mut cfg = self.model.clone();
        cfg.vocab_size = self.layout().vocab_size();
        cfg
    }

    pub fn boundaries(&self, dataset: &Dataset) -> (i64, i64) {
        (
            dataset.timestamp_quantile(self.split.train_frac),
            dataset.timestamp_quantile(self.split.train_frac + self.split.valid_frac),
        )
    }
}

/// Tokenization products: layout, codebooks fit on warm items, unique SIDs
/// for the whole catalog, and embeddings keyed by item.
pub struct TokenArtifacts {
    pub layout: VocabLayout,
    pub codebooks: Codebooks,
    pub sid_table: SidTable,
    pub embeddings: BTreeMap<ItemId, ItemEmbedding>,
}

/// Embed the catalog (or load a CSV), fit codebooks on warm items only, and
/// assign unique SIDs warm-first so cold assignment never perturbs warm.
pub fn build_token_artifacts(
    dataset: &Dataset,
    splits: &SplitSpec,
    params: &TokenizerParams,
    embeddings_csv: Option<&Path>,
) -> Result<TokenArtifacts> {
    let metadata = dataset.item_metadata();
    let all: Vec<ItemEmbedding> = match embeddings_csv {
        Some(path) => {
            let loaded = load_embedding_csv(path, params.d_emb)?;
            let known: BTreeMap<ItemId, ItemEmbedding> =
                loaded.into_iter().map(|e| (e.item_id.clone(), e)).collect();
            let missing: Vec<&(ItemId, String)> =
                metadata.iter().filter(|(id, _)| !known.contains_key(id)).collect();
            if !missing.is_empty() {
                return Err(CoreError::data(format!(
                    "embedding CSV misses {} catalog items (first: {})",
                    missing.len(),
                    missing[0].0
                )));
            }
            metadata.iter().map(|(id, _)| known[id].clone()).collect()
        }
        None => embed_items(&metadata, params.d_emb)?,
    };
    let warm: Vec<ItemEmbedding> =
        all.iter().filter(|e| splits.warm_items.contains(&e.item_id)).cloned().collect();
    if warm.len() < params.k {
        return Err(CoreError::config(format!(
            "warm catalog ({}) smaller than codebook size k={}",
            warm.len(),
            params.k
        )));
    }
    let codebooks = fit_rq(&warm, params.m, params.k, params.seed)?;
    // Warm items first, then the rest of the catalog, both id-sorted.
    let mut ordered = warm.clone();
    ordered.extend(all.iter().filter(|e| !splits.warm_items.contains(&e.item_id)).cloned());
    let sid_table = assign_sids(&ordered, &codebooks)?;
    let embeddings = all.into_iter().map(|e| (e.item_id.clone(), e)).collect();
    Ok(TokenArtifacts { layout: VocabLayout::new(params.m, params.k), codebooks, sid_table, embeddings })
}

/// Concatenated SID tokens of the most recent `limit` history items;
/// `[BOS]` when the history is empty.
pub fn history_to_tokens(
    items: &[ItemId],
    table: &SidTable,
    layout: &VocabLayout,
    limit: usize,
) -> Result<Vec<usize>> {
    let start = items.len().saturating_sub(limit.max(1));
    let recent = &items[start..];
    if recent.is_empty() {
        return Ok(vec![TOKEN_BOS]);
    }
    let mut tokens = Vec::with_capacity(recent.len() * layout.sid_len());
    for item in recent {
        let sid = table
            .get(item)
            .ok_or_else(|| CoreError::data(format!("no SID for history item {item}")))?;
        tokens.extend(layout.tokens_for_sid(sid.digits())?);
    }
    Ok(tokens)
}

/// Decoder input `[BOS, d0, .., d_{upto-1}]` in position-coded tokens.
pub fn sid_decoder_tokens(digits: &[u16], layout: &VocabLayout, upto: usize) -> Vec<usize> {
    let mut tokens = Vec::with_capacity(upto + 1);
    tokens.push(TOKEN_BOS);
    for (p, &d) in digits.iter().take(upto).enumerate() {
        tokens.push(layout.token(p, d));
    }
    tokens
}

pub fn to_train_example(
    ex: &EvalExample,
    table: &SidTable,
    layout: &VocabLayout,
    limit: usize,
) -> Result<TrainExample> {
    let history = history_to_tokens(&ex.history, table, layout, limit)?;
    let sid = table
        .get(&ex.target)
        .ok_or_else(|| CoreError::data(format!("no SID for target {}", ex.target)))?;
    let m = sid.len();
    let decoder = sid_decoder_tokens(sid.digits(), layout, m - 1);
    let targets: Vec<usize> =
        sid.digits().iter().enumerate().map(|(p, &d)| layout.token(p, d)).collect();
    Ok(TrainExample { history, decoder, targets })
}

pub fn to_eval_case(
    ex: &EvalExample,
    table: &SidTable,
    layout: &VocabLayout,
    limit: usize,
) -> Result<EvalCase> {
    let history_tokens = history_to_tokens(&ex.history, table, layout, limit)?;
    let sid = table
        .get(&ex.target)
        .ok_or_else(|| CoreError::data(format!("no SID for target {}", ex.target)))?;
    Ok(EvalCase {
        history_tokens,
        target_item: ex.target.clone(),
        target_digits: sid.digits().to_vec(),
    })
}

pub fn to_tokenized_request(
    req: &EditRequest,
    table: &SidTable,
    layout: &VocabLayout,
    limit: usize,
) -> Result<TokenizedRequest> {
    let history = history_to_tokens(&req.history, table, layout, limit)?;
    let mut decoder = vec![TOKEN_BOS];
    for (p, &d) in req.prefix.iter().enumerate() {
        decoder.push(layout.token(p, d));
    }
    Ok(TokenizedRequest {
        position: req.position,
        history,
        decoder,
        target: layout.token(req.position, req.object),
    })
}

pub fn pseudo_to_train_example(
    seq: &PseudoSequence,
    table: &SidTable,
    layout: &VocabLayout,
    limit: usize,
) -> Result<TrainExample> {
    let ex = EvalExample {
        user_id: String::new(),
        history: seq.history.clone(),
        target: seq.cold_item_id.clone(),
        timestamp: 0,
    };
    to_train_example(&ex, table, layout, limit)
}

/// Knowledge preparation: neighbors, pseudo histories, position-wise
/// requests. `upper_bound` swaps pseudo histories for the true cold-item
/// histories from the test split (the quality-gap control).
pub struct KnowledgeArtifacts {
    pub report: SynthesisReport,
    pub requests: Vec<EditRequest>,
}

pub fn prepare_knowledge(
    splits: &SplitSpec,
    artifacts: &TokenArtifacts,
    params: &KnowledgeParams,
    upper_bound: bool,
) -> Result<KnowledgeArtifacts> {
    let report = if upper_bound {
        let mut sequences = Vec::new();
        let mut per_item: BTreeMap<&ItemId, usize> = BTreeMap::new();
        for ex in &splits.test {
            if !splits.cold_items.contains(&ex.target) || ex.history.is_empty() {
                continue;
            }
            let used = per_item.entry(&ex.target).or_insert(0);
            if *used >= params.per_item_quota {
                continue;
            }
            *used += 1;
            let start = ex.history.len().saturating_sub(params.history_limit);
            sequences.push(PseudoSequence {
                cold_item_id: ex.target.clone(),
                history: ex.history[start..].to_vec(),
                neighbor_similarity: 1.0,
            });
        }
        SynthesisReport { sequences, cold_without_history: Vec::new() }
    } else {
        let warm: Vec<ItemEmbedding> = artifacts
            .embeddings
            .values()
            .filter(|e| splits.warm_items.contains(&e.item_id))
            .cloned()
            .collect();
        let cold: Vec<ItemEmbedding> = artifacts
            .embeddings
            .values()
            .filter(|e| splits.cold_items.contains(&e.item_id))
            .cloned()
            .collect();
        let train_sequences: Vec<Vec<ItemId>> = training_sequences(splits);
        synthesize_all(
            &cold,
            &warm,
            &train_sequences,
            params.neighbors,
            params.per_item_quota,
            params.history_limit,
        )?
    };
    let requests = build_edit_requests(&report.sequences, &artifacts.sid_table)?;
    Ok(KnowledgeArtifacts { report, requests })
}

/// Per-user training-period item sequences (neighbor occurrences are drawn
/// from the training split only).
pub fn training_sequences(splits: &SplitSpec) -> Vec<Vec<ItemId>> {
    // Training examples enumerate prefixes; the longest prefix plus target
    // per user reconstructs the user's training-period sequence.
    let mut best: BTreeMap<&str, &EvalExample> = BTreeMap::new();
    for ex in &splits.train {
        best.entry(ex.user_id.as_str())
            .and_modify(|cur| {
                if ex.history.len() > cur.history.len() {
                    *cur = ex;
                }
            })
            .or_insert(ex);
    }
    best.values()
        .map(|ex| {
            let mut seq = ex.history.clone();
            seq.push(ex.target.clone());
            seq
        })
        .collect()
}

/// Locate artifacts: per-(position, layer) probe accuracy and the chosen
/// edit layer per position.
pub struct LocateArtifacts {
    pub accuracies: BTreeMap<(usize, usize), f64>,
    pub choices: BTreeMap<usize, LayerChoice>,
    pub records: Vec<ProbeRecord>,
    pub weak_positions: Vec<usize>,
}

/// Probing across every (position, layer) cell. Label-1 keys come from edit
/// requests, label-0 keys from training examples at the same decoder
/// position; classes are balanced at `params.samples` per side.
pub fn run_locate<S: Scalar>(
    model: &Model<S>,
    requests: &[EditRequest],
    splits: &SplitSpec,
    artifacts: &TokenArtifacts,
    knowledge: &KnowledgeParams,
    params: &ProbeParams,
) -> Result<LocateArtifacts> {
    let layout = &artifacts.layout;
    let table = &artifacts.sid_table;
    let mut accuracies = BTreeMap::new();
    for position in 0..layout.sid_len() {
        let at_p: Vec<&EditRequest> =
            requests.iter().filter(|r| r.position == position).collect();
        if at_p.is_empty() {
            return Err(CoreError::input(format!("no edit requests at position {position}")));
        }
        let picked = subsample(&at_p, params.samples, params.seed ^ (position as u64) << 8);
        let edit_contexts: Vec<(Vec<usize>, Vec<usize>)> = picked
            .iter()
            .map(|r| {
                let t = to_tokenized_request(r, table, layout, knowledge.history_limit)?;
                Ok((t.history, t.decoder))
            })
            .collect::<Result<_>>()?;
        let n = edit_contexts.len();
        let originals = subsample(&splits.train, n, params.seed ^ 0xabcd ^ (position as u64));
        let original_contexts: Vec<(Vec<usize>, Vec<usize>)> = originals
            .iter()
            .map(|ex| {
                let case = to_eval_case(ex, table, layout, knowledge.history_limit)?;
                let decoder = sid_decoder_tokens(&case.target_digits, layout, position);
                Ok((case.history_tokens, decoder))
            })
            .collect::<Result<_>>()?;
        let datasets =
            build_probe_datasets(model, position, &edit_contexts, &original_contexts)?;
        for ds in &datasets {
            let probe = train_probe(
                ds,
                params.split_ratio,
                params.seed ^ ((position as u64) << 16) ^ ds.layer as u64,
            )?;
            accuracies.insert((position, ds.layer), probe.validation_accuracy);
        }
    }
    let choices = select_layers(&accuracies);
    let weak = crate::locator::weak_positions(&choices);
    if !weak.is_empty() {
        eprintln!(
            "warning: probe accuracy below {} at positions {:?}; edit keys may not be separable",
            crate::locator::SEPARABILITY_WARN,
            weak
        );
    }
    let (_, records) = crate::locator::layer_report(&accuracies, &choices);
    Ok(LocateArtifacts { accuracies, choices, records, weak_positions: weak })
}

/// Layer-choice map in the shape the editor wants.
pub fn choice_map(choices: &BTreeMap<usize, LayerChoice>) -> BTreeMap<usize, usize> {
    choices.iter().map(|(&p, c)| (p, c.layer)).collect()
}

/// Covariance contexts: training examples lowered to full decoder
/// sequences, deterministically subsampled.
pub fn covariance_contexts(
    splits: &SplitSpec,
    artifacts: &TokenArtifacts,
    history_limit: usize,
    n: usize,
    seed: u64,
) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    let picked = subsample(&splits.train, n, seed);
    picked
        .iter()
        .map(|ex| {
            let case = to_eval_case(ex, &artifacts.sid_table, &artifacts.layout, history_limit)?;
            let decoder = sid_decoder_tokens(
                &case.target_digits,
                &artifacts.layout,
                artifacts.layout.sid_len() - 1,
            );
            Ok((case.history_tokens, decoder))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalkit::make_splits;
    use crate::synthetic::{synthetic_dataset, SyntheticSpec};
    use crate::tokenizer::SemanticId;

    fn small_dataset() -> Dataset {
        let spec = SyntheticSpec {
            n_items: 120,
            n_cold: 12,
            n_users: 150,
            seq_len_min: 4,
            seq_len_max: 9,
            n_clusters: 4,
            ..SyntheticSpec::default()
        };
        synthetic_dataset(&spec, 3).unwrap()
    }

    #[test]
    fn token_artifacts_cover_catalog_uniquely() {
        let ds = small_dataset();
        let params = PipelineParams {
            tokenizer: TokenizerParams { m: 4, k: 16, d_emb: 32, seed: 1 },
            ..PipelineParams::default()
        };
        let splits = make_splits(&ds, params.boundaries(&ds)).unwrap();
        let arts = build_token_artifacts(&ds, &splits, &params.tokenizer, None).unwrap();
        assert_eq!(arts.sid_table.len(), ds.items.len());
        // Uniqueness is enforced by assign_sids; verify the reverse index.
        let mut seen = std::collections::HashSet::new();
        for (_, sid) in arts.sid_table.iter() {
            assert!(seen.insert(sid.digits().to_vec()), "duplicate SID");
        }
        // Cold items got SIDs through pure inference on warm codebooks.
        for cold in &splits.cold_items {
            assert!(arts.sid_table.get(cold).is_some());
        }
    }

    #[test]
    fn history_tokens_truncate_and_bos() {
        let mut table = SidTable::default();
        table.insert("a".into(), SemanticId::new(vec![0, 1]));
        table.insert("b".into(), SemanticId::new(vec![2, 3]));
        let layout = VocabLayout::new(2, 8);
        let items = vec!["a".to_string(), "b".to_string()];
        let tokens = history_to_tokens(&items, &table, &layout, 1).unwrap();
        assert_eq!(tokens, vec![layout.token(0, 2), layout.token(1, 3)], "keeps most recent");
        let empty: Vec<ItemId> = Vec::new();
        assert_eq!(history_to_tokens(&empty, &table, &layout, 5).unwrap(), vec![TOKEN_BOS]);
    }

    #[test]
    fn train_example_grouping_counts() {
        let mut table = SidTable::default();
        table.insert("t".into(), SemanticId::new(vec![1, 2, 3, 4]));
        table.insert("h".into(), SemanticId::new(vec![0, 0, 0, 0]));
        let layout = VocabLayout::new(4, 8);
        let ex = EvalExample {
            user_id: "u".into(),
            history: vec!["h".into()],
            target: "t".into(),
            timestamp: 0,
        };
        let te = to_train_example(&ex, &table, &layout, 20).unwrap();
        assert_eq!(te.decoder.len(), 4, "[BOS, d0, d1, d2]");
        assert_eq!(te.targets.len(), 4);
        assert_eq!(te.targets[3], layout.token(3, 4));
    }

    #[test]
    fn request_tokenization_matches_roles() {
        let mut table = SidTable::default();
        table.insert("cold".into(), SemanticId::new(vec![7, 6, 5, 4]));
        table.insert("w".into(), SemanticId::new(vec![0, 1, 2, 3]));
        let layout = VocabLayout::new(4, 8);
        let req = EditRequest {
            position: 2,
            history: vec!["w".into()],
            prefix: vec![7, 6],
            object: 5,
            cold_item_id: "cold".into(),
        };
        let t = to_tokenized_request(&req, &table, &layout, 20).unwrap();
        assert_eq!(t.decoder, vec![TOKEN_BOS, layout.token(0, 7), layout.token(1, 6)]);
        assert_eq!(t.target, layout.token(2, 5));
        assert_eq!(t.decoder.len() - 1, req.position, "site sits at the last position");
    }

    #[test]
    fn training_sequences_reconstruct_longest_prefix() {
        let ds = small_dataset();
        let splits = make_splits(&ds, (800_000, 900_000)).unwrap();
        let seqs = training_sequences(&splits);
        assert!(!seqs.is_empty());
        // Each sequence must be consistent with some user's train examples.
        let total_train_targets: usize = splits.train.len();
        assert!(seqs.iter().map(|s| s.len().saturating_sub(1)).sum::<usize>() <= total_train_targets + seqs.len());
    }

    #[test]
    fn upper_bound_uses_real_cold_histories() {
        let ds = small_dataset();
        let params = PipelineParams {
            tokenizer: TokenizerParams { m: 4, k: 16, d_emb: 32, seed: 1 },
            ..PipelineParams::default()
        };
        let splits = make_splits(&ds, params.boundaries(&ds)).unwrap();
        let arts = build_token_artifacts(&ds, &splits, &params.tokenizer, None).unwrap();
        let kn = prepare_knowledge(&splits, &arts, &params.knowledge, true).unwrap();
        for seq in &kn.report.sequences {
            assert!(splits.cold_items.contains(&seq.cold_item_id));
            assert!((seq.neighbor_similarity - 1.0).abs() < 1e-12);
        }
        let m = arts.layout.sid_len();
        assert_eq!(kn.requests.len(), kn.report.sequences.len() * m);
    }
}
