//! Subcommand implementations against a run directory.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use recedit_core::data::{ingest_jsonl, write_jsonl, Dataset};
use recedit_core::decoding::{GateMode, RankedList, SidTrie};
use recedit_core::editor::{
    optimize_delta_multi, sha256_file, solve_bundle, EditBundle, EditTiming, PositionSolveData,
    TokenizedRequest,
};
use recedit_core::evalkit::compare::{compare_update_cost, timing_csv};
use recedit_core::evalkit::{
    self, make_splits, subsample, EvalCase, IidNorm, MetricsReport, SplitSpec,
};
use recedit_core::knowledge::{load_requests, save_requests, verify_no_leakage};
use recedit_core::locator::{load_probe_records, save_probe_records, LayerChoice};
use recedit_core::model::{
    load_checkpoint, save_checkpoint, train, Model, TrainExample,
};
use recedit_core::pipeline::*;
use recedit_core::synthetic::gen_synthetic;
use recedit_core::tokenizer::SidTable;
use recedit_core::ModelF32;

use crate::config::RunConfig;
use crate::rundir::{ManifestEntry, RunDir};

pub struct Ctx {
    pub cfg: RunConfig,
    pub run: RunDir,
    pub cfg_hash: String,
}

impl Ctx {
    fn manifest(&self, command: &str) -> ManifestEntry {
        ManifestEntry::new(command, self.cfg_hash.clone())
    }

    fn write_config_copy(&self) -> Result<()> {
        std::fs::write(self.run.config(), self.cfg.to_toml()?)
            .with_context(|| format!("writing {}", self.run.config().display()))
    }

    fn load_dataset(&self) -> Result<Dataset> {
        let path = match self.cfg.dataset.source.as_str() {
            "synthetic" => self.run.dataset(),
            "jsonl" => self.cfg.dataset.path.clone().expect("validated"),
            _ => unreachable!("validated"),
        };
        self.run.require(&path, "gen-data")?;
        Ok(ingest_jsonl(&path)?)
    }

    fn splits(&self, dataset: &Dataset) -> Result<SplitSpec> {
        Ok(make_splits(dataset, self.cfg.pipeline.boundaries(dataset))?)
    }

    fn artifacts(&self, dataset: &Dataset, splits: &SplitSpec) -> Result<TokenArtifacts> {
        self.run.require(&self.run.sids(), "tokenize")?;
        // Embeddings are recomputed deterministically; SIDs come from disk
        // so downstream commands see exactly what tokenize produced.
        let mut arts = build_token_artifacts(
            dataset,
            splits,
            &self.cfg.pipeline.tokenizer,
            self.cfg.dataset.embeddings_csv.as_deref(),
        )?;
        arts.sid_table = SidTable::load(&self.run.sids())?;
        Ok(arts)
    }

    fn model(&self) -> Result<ModelF32> {
        self.run.require(&self.run.checkpoint(), "train")?;
        Ok(load_checkpoint(&self.run.checkpoint())?)
    }

    fn eval_cases(
        &self,
        examples: &[evalkit::EvalExample],
        arts: &TokenArtifacts,
        seed_salt: u64,
    ) -> Result<Vec<EvalCase>> {
        let picked = subsample(
            examples,
            self.cfg.pipeline.eval.max_cases,
            self.cfg.pipeline.eval.seed ^ seed_salt,
        );
        picked
            .iter()
            .map(|e| {
                Ok(to_eval_case(
                    e,
                    &arts.sid_table,
                    &arts.layout,
                    self.cfg.pipeline.knowledge.history_limit,
                )?)
            })
            .collect()
    }
}

pub fn gen_data(ctx: &Ctx) -> Result<()> {
    if ctx.cfg.dataset.source != "synthetic" {
        bail!("gen-data only applies to dataset.source = \"synthetic\"");
    }
    let interactions = gen_synthetic(&ctx.cfg.synthetic, ctx.cfg.dataset.seed)?;
    write_jsonl(&ctx.run.dataset(), &interactions)?;
    ctx.write_config_copy()?;
    let mut entry = ctx.manifest("gen-data");
    entry.output(&ctx.run.dataset())?;
    entry.append_to(&ctx.run.manifest())?;
    println!(
        "wrote {} interactions to {}",
        interactions.len(),
        ctx.run.dataset().display()
    );
    Ok(())
}

pub fn tokenize(ctx: &Ctx) -> Result<()> {
    let dataset = ctx.load_dataset()?;
    let splits = ctx.splits(&dataset)?;
    let arts = build_token_artifacts(
        &dataset,
        &splits,
        &ctx.cfg.pipeline.tokenizer,
        ctx.cfg.dataset.embeddings_csv.as_deref(),
    )?;
    arts.sid_table.save(&ctx.run.sids())?;
    ctx.write_config_copy()?;
    let mut entry = ctx.manifest("tokenize");
    entry.input(&dataset_path(ctx)?)?;
    entry.output(&ctx.run.sids())?;
    entry.append_to(&ctx.run.manifest())?;
    println!(
        "assigned {} SIDs ({} warm items, {} cold items, {} skipped lines)",
        arts.sid_table.len(),
        splits.warm_items.len(),
        splits.cold_items.len(),
        dataset.skipped_lines
    );
    Ok(())
}

fn dataset_path(ctx: &Ctx) -> Result<std::path::PathBuf> {
    Ok(match ctx.cfg.dataset.source.as_str() {
        "synthetic" => ctx.run.dataset(),
        _ => ctx.cfg.dataset.path.clone().expect("validated"),
    })
}

pub fn train_cmd(ctx: &Ctx) -> Result<()> {
    let dataset = ctx.load_dataset()?;
    let splits = ctx.splits(&dataset)?;
    let arts = ctx.artifacts(&dataset, &splits)?;
    let limit = ctx.cfg.pipeline.knowledge.history_limit;
    let examples: Vec<TrainExample> = splits
        .train
        .iter()
        .map(|e| Ok(to_train_example(e, &arts.sid_table, &arts.layout, limit)?))
        .collect::<Result<_>>()?;
    let mut model: ModelF32 = Model::new(ctx.cfg.pipeline.model_config())?;
    let report = train(&mut model, &examples, &ctx.cfg.pipeline.train)?;
    save_checkpoint(&model, &ctx.run.checkpoint())?;
    let mut csv = String::from("epoch,mean_nats_per_token\n");
    for (i, loss) in report.epoch_losses.iter().enumerate() {
        csv.push_str(&format!("{i},{loss:.6}\n"));
    }
    std::fs::write(ctx.run.loss_trace(), csv)?;
    let mut entry = ctx.manifest("train");
    entry.input(&ctx.run.sids())?;
    entry.output(&ctx.run.checkpoint())?;
    entry.output(&ctx.run.loss_trace())?;
    entry.append_to(&ctx.run.manifest())?;
    println!(
        "trained {} steps over {} examples in {:.1}s; epoch losses {:?}",
        report.steps, report.examples_seen, report.seconds, report.epoch_losses
    );
    Ok(())
}

struct EvalBlock {
    report: MetricsReport,
    lists_by_split: BTreeMap<String, Vec<RankedList>>,
}

#[allow(clippy::too_many_arguments)]
fn evaluate_model(
    ctx: &Ctx,
    model: &ModelF32,
    bundle: &EditBundle<f32>,
    mode: GateMode,
    splits: &SplitSpec,
    arts: &TokenArtifacts,
    with_prefix: bool,
) -> Result<EvalBlock> {
    let eval = &ctx.cfg.pipeline.eval;
    let trie = eval.constrain_trie.then(|| SidTrie::from_table(&arts.sid_table));
    let mut report = MetricsReport::default();
    let mut lists_by_split = BTreeMap::new();
    let overall_items: BTreeSet<String> =
        splits.warm_items.union(&splits.cold_items).cloned().collect();
    let blocks: Vec<(&str, Vec<evalkit::EvalExample>, &BTreeSet<String>)> = vec![
        ("cold", splits.test_cold(), &splits.cold_items),
        ("warm", splits.test_warm(), &splits.warm_items),
        ("overall", splits.test.clone(), &overall_items),
    ];
    for (name, examples, r_iid) in blocks {
        let cases = ctx.eval_cases(&examples, arts, name.len() as u64)?;
        let lists = evalkit::rank_cases(
            model,
            bundle,
            mode,
            &cases,
            &arts.layout,
            &arts.sid_table,
            eval.beam_width,
            trie.as_ref(),
        )?;
        evalkit::split_metrics(&mut report, name, &lists, &cases, r_iid, &eval.ks)?;
        if with_prefix {
            for n in 1..=arts.layout.sid_len() {
                let v = evalkit::prefix_ndcg(
                    model,
                    bundle,
                    mode,
                    &cases,
                    &arts.layout,
                    eval.beam_width,
                    n,
                    eval.top_k,
                )?;
                report.push(name, eval.top_k, &format!("prefix_ndcg_n{n}"), v);
            }
        }
        lists_by_split.insert(name.to_string(), lists);
    }
    Ok(EvalBlock { report, lists_by_split })
}

pub fn diagnose(ctx: &Ctx) -> Result<()> {
    let dataset = ctx.load_dataset()?;
    let splits = ctx.splits(&dataset)?;
    let arts = ctx.artifacts(&dataset, &splits)?;
    let model = ctx.model()?;
    let bundle = EditBundle::new([0u8; 32]);
    let block = evaluate_model(ctx, &model, &bundle, GateMode::OneOne, &splits, &arts, true)?;
    std::fs::write(ctx.run.diagnostics(), block.report.to_csv())?;
    println!("{}", block.report.to_table());
    println!(
        "test split: {} instances, cold fraction {:.3} ({} cold items)",
        splits.test.len(),
        splits.cold_fraction(),
        splits.cold_items.len()
    );
    let mut entry = ctx.manifest("diagnose");
    entry.input(&ctx.run.checkpoint())?;
    entry.output(&ctx.run.diagnostics())?;
    entry.append_to(&ctx.run.manifest())?;
    Ok(())
}

pub fn prepare_knowledge_cmd(ctx: &Ctx, upper_bound: bool) -> Result<()> {
    let dataset = ctx.load_dataset()?;
    let splits = ctx.splits(&dataset)?;
    let arts = ctx.artifacts(&dataset, &splits)?;
    let kn = prepare_knowledge(&splits, &arts, &ctx.cfg.pipeline.knowledge, upper_bound)?;
    let warm: std::collections::HashSet<String> = splits.warm_items.iter().cloned().collect();
    if !upper_bound {
        verify_no_leakage(&kn.requests, &warm)?;
    }
    save_requests(&ctx.run.requests(), &kn.requests)?;
    if !kn.report.cold_without_history.is_empty() {
        println!(
            "{} cold items had no usable pseudo history and are excluded: {:?}",
            kn.report.cold_without_history.len(),
            &kn.report.cold_without_history[..kn.report.cold_without_history.len().min(5)]
        );
    }
    println!(
        "{} pseudo sequences -> {} position-wise edit requests",
        kn.report.sequences.len(),
        kn.requests.len()
    );
    let mut entry = ctx.manifest("prepare-knowledge");
    entry.input(&ctx.run.sids())?;
    entry.output(&ctx.run.requests())?;
    entry.append_to(&ctx.run.manifest())?;
    Ok(())
}

pub fn locate(ctx: &Ctx) -> Result<()> {
    let dataset = ctx.load_dataset()?;
    let splits = ctx.splits(&dataset)?;
    let arts = ctx.artifacts(&dataset, &splits)?;
    let model = ctx.model()?;
    self::require_requests(ctx)?;
    let requests = load_requests(&ctx.run.requests())?;
    let locate = run_locate(
        &model,
        &requests,
        &splits,
        &arts,
        &ctx.cfg.pipeline.knowledge,
        &ctx.cfg.pipeline.probe,
    )?;
    let (table, records) =
        recedit_core::locator::layer_report(&locate.accuracies, &locate.choices);
    save_probe_records(&ctx.run.probes(), &records)?;
    std::fs::write(ctx.run.layer_table(), &table)?;
    println!("{table}");
    let mut entry = ctx.manifest("locate");
    entry.input(&ctx.run.checkpoint())?;
    entry.input(&ctx.run.requests())?;
    entry.output(&ctx.run.probes())?;
    entry.output(&ctx.run.layer_table())?;
    entry.append_to(&ctx.run.manifest())?;
    Ok(())
}

fn require_requests(ctx: &Ctx) -> Result<()> {
    ctx.run.require(&ctx.run.requests(), "prepare-knowledge")
}

fn choices_from_probes(ctx: &Ctx) -> Result<BTreeMap<usize, usize>> {
    ctx.run.require(&ctx.run.probes(), "locate")?;
    let records = load_probe_records(&ctx.run.probes())?;
    let choices: BTreeMap<usize, usize> =
        records.iter().filter(|r| r.selected).map(|r| (r.position, r.layer)).collect();
    if choices.is_empty() {
        bail!("no selected layers in {}", ctx.run.probes().display());
    }
    Ok(choices)
}

struct EditInputs {
    tokenized: Vec<TokenizedRequest>,
    covariance: Vec<(Vec<usize>, Vec<usize>)>,
}

fn edit_inputs(ctx: &Ctx, splits: &SplitSpec, arts: &TokenArtifacts) -> Result<EditInputs> {
    require_requests(ctx)?;
    let requests = load_requests(&ctx.run.requests())?;
    let limit = ctx.cfg.pipeline.knowledge.history_limit;
    let tokenized: Vec<TokenizedRequest> = requests
        .iter()
        .map(|r| Ok(to_tokenized_request(r, &arts.sid_table, &arts.layout, limit)?))
        .collect::<Result<_>>()?;
    let covariance = covariance_contexts(
        splits,
        arts,
        limit,
        ctx.cfg.pipeline.edit.covariance_samples,
        ctx.cfg.pipeline.edit.seed,
    )?;
    Ok(EditInputs { tokenized, covariance })
}

pub fn edit(ctx: &Ctx, lambda_override: Option<f64>) -> Result<()> {
    let dataset = ctx.load_dataset()?;
    let splits = ctx.splits(&dataset)?;
    let arts = ctx.artifacts(&dataset, &splits)?;
    let model = ctx.model()?;
    let choices = choices_from_probes(ctx)?;
    let inputs = edit_inputs(ctx, &splits, &arts)?;
    let mut edit_cfg = ctx.cfg.pipeline.edit.clone();
    if let Some(lambda) = lambda_override {
        edit_cfg.lambda = lambda;
    }
    let base_hash = sha256_file(&ctx.run.checkpoint())?;
    let (bundle, timing, data) = recedit_core::editor::run_edit_pipeline(
        &model,
        base_hash,
        &inputs.tokenized,
        &choices,
        &inputs.covariance,
        &edit_cfg,
    )?;
    bundle.save(&ctx.run.bundle())?;
    write_edit_timing(&ctx.run.root.join("edit-timing.csv"), &timing)?;
    for d in &data {
        println!(
            "position {}: layer {}, m={}, mean target prob {:.3} -> {:.3} ({} improved)",
            d.position, d.layer, d.m, d.mean_prob_before, d.mean_prob_after, d.improved
        );
    }
    println!(
        "edit pipeline: {:.1}s total (delta {:.1}s, covariance {:.1}s, solve {:.2}s), lambda {}",
        timing.total_seconds,
        timing.delta_seconds,
        timing.covariance_seconds,
        timing.solve_seconds,
        edit_cfg.lambda
    );
    let mut entry = ctx.manifest("edit");
    entry.input(&ctx.run.checkpoint())?;
    entry.input(&ctx.run.requests())?;
    entry.input(&ctx.run.probes())?;
    entry.output(&ctx.run.bundle())?;
    entry.unhashed_output(&ctx.run.root.join("edit-timing.csv"));
    entry.append_to(&ctx.run.manifest())?;
    Ok(())
}

fn write_edit_timing(path: &Path, timing: &EditTiming) -> Result<()> {
    let csv = format!(
        "phase,seconds\ndelta,{:.4}\ncovariance,{:.4}\nsolve,{:.4}\ntotal,{:.4}\n",
        timing.delta_seconds, timing.covariance_seconds, timing.solve_seconds, timing.total_seconds
    );
    std::fs::write(path, csv)?;
    Ok(())
}

pub struct EvaluateOpts {
    pub base_only: bool,
    pub gate_mode: GateMode,
    pub dump_recommendations: bool,
    pub iid_norm: Option<IidNorm>,
}

pub fn evaluate(ctx: &Ctx, opts: &EvaluateOpts) -> Result<()> {
    let dataset = ctx.load_dataset()?;
    let splits = ctx.splits(&dataset)?;
    let arts = ctx.artifacts(&dataset, &splits)?;
    let model = ctx.model()?;
    let bundle = if opts.base_only {
        EditBundle::new([0u8; 32])
    } else {
        ctx.run.require(&ctx.run.bundle(), "edit")?;
        EditBundle::load(&ctx.run.bundle(), &ctx.run.checkpoint())?
    };
    let block = evaluate_model(ctx, &model, &bundle, opts.gate_mode, &splits, &arts, false)?;
    std::fs::write(ctx.run.metrics(), block.report.to_csv())?;
    print_metric_summary(&block.report, opts.iid_norm.unwrap_or(ctx.cfg.pipeline.eval.iid_norm));
    if opts.dump_recommendations {
        dump_recs(&ctx.run.recommendations(), &block)?;
        println!("recommendation dump: {}", ctx.run.recommendations().display());
    }
    let mut entry = ctx.manifest("evaluate");
    entry.input(&ctx.run.checkpoint())?;
    if !opts.base_only {
        entry.input(&ctx.run.bundle())?;
    }
    entry.output(&ctx.run.metrics())?;
    entry.append_to(&ctx.run.manifest())?;
    Ok(())
}

fn print_metric_summary(report: &MetricsReport, iid: IidNorm) {
    let iid_name = match iid {
        IidNorm::Paper => "iid_paper",
        IidNorm::Share => "iid_share",
    };
    println!("split      K   ndcg     recall   iid ({iid_name})");
    for split in ["cold", "warm", "overall"] {
        for k in [10usize, 20, 50] {
            if let (Some(n), Some(r)) =
                (report.get(split, k, "ndcg"), report.get(split, k, "recall"))
            {
                let iid_v = report.get(split, k, iid_name).unwrap_or(f64::NAN);
                println!("{split:<9} {k:>3}  {n:.4}   {r:.4}   {iid_v:.4}");
            }
        }
    }
}

fn dump_recs(path: &Path, block: &EvalBlock) -> Result<()> {
    use std::io::Write;
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    for (split, lists) in &block.lists_by_split {
        for (i, list) in lists.iter().enumerate() {
            let candidates: Vec<serde_json::Value> = list
                .candidates
                .iter()
                .map(|(c, score)| {
                    let name = match c.item() {
                        Some(id) => id.clone(),
                        None => "INVALID".to_string(),
                    };
                    serde_json::json!({"item": name, "score": score})
                })
                .collect();
            let line = serde_json::json!({
                "split": split,
                "case": i,
                "candidates": candidates,
            });
            writeln!(w, "{line}")?;
        }
    }
    Ok(())
}

pub fn compare(ctx: &Ctx) -> Result<()> {
    let dataset = ctx.load_dataset()?;
    let splits = ctx.splits(&dataset)?;
    let arts = ctx.artifacts(&dataset, &splits)?;
    let model = ctx.model()?;
    let choices = choices_from_probes(ctx)?;
    let inputs = edit_inputs(ctx, &splits, &arts)?;
    let limit = ctx.cfg.pipeline.knowledge.history_limit;
    let train_examples: Vec<TrainExample> = splits
        .train
        .iter()
        .map(|e| Ok(to_train_example(e, &arts.sid_table, &arts.layout, limit)?))
        .collect::<Result<_>>()?;
    // Pseudo corpus from the stored requests (position-0 rows carry the
    // full pair once expanded back to a full-SID example).
    let requests = load_requests(&ctx.run.requests())?;
    let pseudo: Vec<TrainExample> = requests
        .iter()
        .filter(|r| r.position == 0)
        .map(|r| {
            let ex = evalkit::EvalExample {
                user_id: String::new(),
                history: r.history.clone(),
                target: r.cold_item_id.clone(),
                timestamp: 0,
            };
            Ok(to_train_example(&ex, &arts.sid_table, &arts.layout, limit)?)
        })
        .collect::<Result<_>>()?;
    let base_hash = sha256_file(&ctx.run.checkpoint())?;
    let outcome = compare_update_cost(
        &model,
        base_hash,
        &train_examples,
        &pseudo,
        &ctx.cfg.pipeline.train,
        &inputs.tokenized,
        &choices,
        &inputs.covariance,
        &ctx.cfg.pipeline.edit,
        &ctx.cfg.pipeline.compare,
    )?;
    std::fs::write(ctx.run.timing(), timing_csv(&outcome.timings))?;
    println!("{}", timing_csv(&outcome.timings));

    let empty = EditBundle::new([0u8; 32]);
    let arm_metrics: Vec<(&str, Option<MetricsReport>)> = vec![
        (
            "retrain",
            match &outcome.retrain.result {
                Ok(m) => Some(
                    evaluate_model(ctx, m, &empty, GateMode::OneOne, &splits, &arts, false)?
                        .report,
                ),
                Err(e) => {
                    eprintln!("retrain arm failed: {e}");
                    None
                }
            },
        ),
        (
            "finetune",
            match &outcome.finetune.result {
                Ok(m) => Some(
                    evaluate_model(ctx, m, &empty, GateMode::OneOne, &splits, &arts, false)?
                        .report,
                ),
                Err(e) => {
                    eprintln!("finetune arm failed: {e}");
                    None
                }
            },
        ),
        (
            "edit",
            match &outcome.edit.result {
                Ok(bundle) => Some(
                    evaluate_model(ctx, &model, bundle, GateMode::OneOne, &splits, &arts, false)?
                        .report,
                ),
                Err(e) => {
                    eprintln!("edit arm failed: {e}");
                    None
                }
            },
        ),
    ];
    let mut entry = ctx.manifest("compare");
    entry.input(&ctx.run.checkpoint())?;
    entry.input(&ctx.run.requests())?;
    entry.unhashed_output(&ctx.run.timing());
    for (arm, report) in arm_metrics {
        if let Some(report) = report {
            let path = ctx.run.metrics_named(arm);
            std::fs::write(&path, report.to_csv())?;
            println!("--- {arm} ---");
            print_metric_summary(&report, ctx.cfg.pipeline.eval.iid_norm);
            entry.output(&path)?;
        }
    }
    entry.append_to(&ctx.run.manifest())?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblateArm {
    PositionWiseOff,
    ClassifierRandom,
    ClassifierWorst,
    OneOneOff,
}

impl AblateArm {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "position-wise-off" => Ok(AblateArm::PositionWiseOff),
            "classifier-random" => Ok(AblateArm::ClassifierRandom),
            "classifier-worst" => Ok(AblateArm::ClassifierWorst),
            "one-one-off" => Ok(AblateArm::OneOneOff),
            other => Err(anyhow!(
                "unknown ablation arm {other:?}; expected position-wise-off, classifier-random, classifier-worst, or one-one-off"
            )),
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            AblateArm::PositionWiseOff => "position-wise-off",
            AblateArm::ClassifierRandom => "classifier-random",
            AblateArm::ClassifierWorst => "classifier-worst",
            AblateArm::OneOneOff => "one-one-off",
        }
    }
}

pub fn ablate(ctx: &Ctx, arm: AblateArm) -> Result<()> {
    let dataset = ctx.load_dataset()?;
    let splits = ctx.splits(&dataset)?;
    let arts = ctx.artifacts(&dataset, &splits)?;
    let model = ctx.model()?;
    let base_hash = sha256_file(&ctx.run.checkpoint())?;

    let (bundle, mode): (EditBundle<f32>, GateMode) = match arm {
        AblateArm::OneOneOff => {
            ctx.run.require(&ctx.run.bundle(), "edit")?;
            let bundle = EditBundle::load(&ctx.run.bundle(), &ctx.run.checkpoint())?;
            (bundle, GateMode::AllOn)
        }
        AblateArm::ClassifierRandom | AblateArm::ClassifierWorst => {
            let inputs = edit_inputs(ctx, &splits, &arts)?;
            let records = {
                ctx.run.require(&ctx.run.probes(), "locate")?;
                load_probe_records(&ctx.run.probes())?
            };
            let mut by_pos: BTreeMap<usize, Vec<(usize, f64)>> = BTreeMap::new();
            for r in &records {
                by_pos.entry(r.position).or_default().push((r.layer, r.accuracy));
            }
            let mut choices = BTreeMap::new();
            for (p, layers) in &by_pos {
                let layer = match arm {
                    AblateArm::ClassifierWorst => {
                        layers
                            .iter()
                            .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)))
                            .unwrap()
                            .0
                    }
                    _ => {
                        // Seeded pick, stable per position.
                        use rand::Rng;
                        use rand::SeedableRng;
                        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(
                            ctx.cfg.pipeline.edit.seed ^ (*p as u64),
                        );
                        layers[rng.gen_range(0..layers.len())].0
                    }
                };
                choices.insert(*p, layer);
            }
            println!("ablation layer choices: {choices:?}");
            let (bundle, _, _) = recedit_core::editor::run_edit_pipeline(
                &model,
                base_hash,
                &inputs.tokenized,
                &choices,
                &inputs.covariance,
                &ctx.cfg.pipeline.edit,
            )?;
            (bundle, GateMode::OneOne)
        }
        AblateArm::PositionWiseOff => {
            let inputs = edit_inputs(ctx, &splits, &arts)?;
            let bundle = object_wise_bundle(ctx, &model, base_hash, &arts, &inputs)?;
            (bundle, GateMode::AllOn)
        }
    };

    let block = evaluate_model(ctx, &model, &bundle, mode, &splits, &arts, false)?;
    let path = ctx.run.metrics_named(&format!("ablate-{}", arm.tag()));
    std::fs::write(&path, block.report.to_csv())?;
    println!("--- ablation {} ---", arm.tag());
    print_metric_summary(&block.report, ctx.cfg.pipeline.eval.iid_norm);
    let mut entry = ctx.manifest(&format!("ablate --arm {}", arm.tag()));
    entry.input(&ctx.run.checkpoint())?;
    entry.output(&path)?;
    entry.append_to(&ctx.run.manifest())?;
    Ok(())
}

/// Object-wise editing: one edit per pseudo pair at the position-0 site,
/// loss spread over the whole token bundle, applied without gating.
fn object_wise_bundle(
    ctx: &Ctx,
    model: &ModelF32,
    base_hash: [u8; 32],
    arts: &TokenArtifacts,
    inputs: &EditInputs,
) -> Result<EditBundle<f32>> {
    use rayon::prelude::*;
    let requests = load_requests(&ctx.run.requests())?;
    let limit = ctx.cfg.pipeline.knowledge.history_limit;
    let pairs: Vec<&recedit_core::knowledge::EditRequest> =
        requests.iter().filter(|r| r.position == 0).collect();
    if pairs.is_empty() {
        bail!("no position-0 requests found for the object-wise arm");
    }
    let layout = &arts.layout;
    let results: Vec<recedit_core::Result<recedit_core::editor::DeltaResult<f32>>> = pairs
        .par_iter()
        .map(|r| {
            let sid = arts
                .sid_table
                .get(&r.cold_item_id)
                .ok_or_else(|| {
                    recedit_core::CoreError::Data(format!("no SID for {}", r.cold_item_id))
                })?;
            let history = history_to_tokens(&r.history, &arts.sid_table, layout, limit)?;
            let m = layout.sid_len();
            let decoder = sid_decoder_tokens(sid.digits(), layout, m - 1);
            let targets: Vec<Option<usize>> = sid
                .digits()
                .iter()
                .enumerate()
                .map(|(p, &d)| Some(layout.token(p, d)))
                .collect();
            optimize_delta_multi(
                model,
                &history,
                &decoder,
                (0, 0),
                &targets,
                &ctx.cfg.pipeline.edit.delta,
            )
        })
        .collect();
    let d_ff = model.cfg.d_ff;
    let d_model = model.cfg.d_model;
    let mut columns = Vec::new();
    for r in results {
        match r {
            Ok(res) => {
                let key: Vec<f64> = res.key.iter().map(|&x| x as f64).collect();
                let zprime: Vec<f64> = res
                    .original_value
                    .iter()
                    .zip(&res.delta)
                    .map(|(&z, &d)| (z + d) as f64)
                    .collect();
                columns.push((key, zprime));
            }
            Err(e) => eprintln!("object-wise request skipped: {e}"),
        }
    }
    if columns.is_empty() {
        bail!("every object-wise request failed");
    }
    let mut k1 = recedit_core::linalg::Matrix::<f64>::zeros(d_ff, columns.len());
    let mut zprime1 = recedit_core::linalg::Matrix::<f64>::zeros(d_model, columns.len());
    for (j, (key, zp)) in columns.iter().enumerate() {
        for i in 0..d_ff {
            k1.set(i, j, key[i]);
        }
        for i in 0..d_model {
            zprime1.set(i, j, zp[i]);
        }
    }
    let c0 = recedit_core::editor::collect_covariance(model, &inputs.covariance, 0, 0)?;
    let data = vec![PositionSolveData {
        position: 0,
        layer: 0,
        k1,
        zprime1,
        c0,
        m: columns.len(),
        mean_prob_before: 0.0,
        mean_prob_after: 0.0,
        improved: 0,
    }];
    let (bundle, _, _) =
        solve_bundle(model, base_hash, &data, ctx.cfg.pipeline.edit.lambda, ctx.cfg.pipeline.edit.jitter)?;
    Ok(bundle)
}
