//! Temporary end-to-end edit probe (deleted before final).
use recedit_core::decoding::GateMode;
use recedit_core::editor::{solve_bundle, EditPipelineConfig};
use recedit_core::evalkit::{self, make_splits, subsample};
use recedit_core::model::{train, Model};
use recedit_core::pipeline::*;
use recedit_core::synthetic::{synthetic_dataset, SyntheticSpec};
use std::time::Instant;

#[test]
#[ignore]
fn edit_probe() {
    let params = PipelineParams::default();
    let ds = synthetic_dataset(&SyntheticSpec::default(), 42).unwrap();
    let splits = make_splits(&ds, params.boundaries(&ds)).unwrap();
    let arts = build_token_artifacts(&ds, &splits, &params.tokenizer, None).unwrap();
    let examples: Vec<_> = splits.train.iter()
        .map(|e| to_train_example(e, &arts.sid_table, &arts.layout, params.knowledge.history_limit).unwrap())
        .collect();
    let mut model: Model<f32> = Model::new(params.model_config()).unwrap();
    let t0 = Instant::now();
    train(&mut model, &examples, &params.train).unwrap();
    println!("train: {:.0}s", t0.elapsed().as_secs_f64());

    // knowledge
    let t0 = Instant::now();
    let kn = prepare_knowledge(&splits, &arts, &params.knowledge, false).unwrap();
    println!("knowledge: {:.1}s pairs={} requests={} skipped_cold={}",
        t0.elapsed().as_secs_f64(), kn.report.sequences.len(), kn.requests.len(),
        kn.report.cold_without_history.len());

    // locate
    let t0 = Instant::now();
    let locate = run_locate(&model, &kn.requests, &splits, &arts, &params.knowledge, &params.probe).unwrap();
    println!("locate: {:.0}s choices:", t0.elapsed().as_secs_f64());
    for (p, c) in &locate.choices {
        println!("  p{p} -> layer {} (acc {:.3})", c.layer, c.validation_accuracy);
    }
    for ((p, l), a) in &locate.accuracies {
        print!("  ({p},{l})={a:.2}");
    }
    println!();

    // edit data
    let t0 = Instant::now();
    let tokenized: Vec<_> = kn.requests.iter()
        .map(|r| to_tokenized_request(r, &arts.sid_table, &arts.layout, params.knowledge.history_limit).unwrap())
        .collect();
    let cov = covariance_contexts(&splits, &arts, params.knowledge.history_limit,
        params.edit.covariance_samples, params.edit.seed).unwrap();
    let (data, timing) = recedit_core::editor::prepare_edit_data(
        &model, &tokenized, &choice_map(&locate.choices), &cov, &params.edit).unwrap();
    println!("prepare_edit: {:.0}s (delta {:.0}s cov {:.0}s) requests={} skipped={}",
        t0.elapsed().as_secs_f64(), timing.delta_seconds, timing.covariance_seconds,
        timing.requests, timing.skipped);
    for d in &data {
        println!("  p{} layer {} m={} prob {:.3}->{:.3} improved {}/{}",
            d.position, d.layer, d.m, d.mean_prob_before, d.mean_prob_after, d.improved, d.m);
    }

    // eval sets
    let cold_cases: Vec<_> = subsample(&splits.test_cold(), 400, 1).iter()
        .map(|e| to_eval_case(e, &arts.sid_table, &arts.layout, params.knowledge.history_limit).unwrap()).collect();
    let warm_cases: Vec<_> = subsample(&splits.test_warm(), 400, 1).iter()
        .map(|e| to_eval_case(e, &arts.sid_table, &arts.layout, params.knowledge.history_limit).unwrap()).collect();

    let eval = |bundle: &recedit_core::editor::EditBundle<f32>, mode: GateMode, cases: &[evalkit::EvalCase], riid: &std::collections::BTreeSet<String>| {
        let lists = evalkit::rank_cases(&model, bundle, mode, cases, &arts.layout, &arts.sid_table, 20, None).unwrap();
        let mut ndcg = 0.0;
        for (l, c) in lists.iter().zip(cases) { ndcg += evalkit::ndcg_at_k(l, &c.target_item, 10); }
        let share = evalkit::iid_ratio_at_k(&lists, riid, 10, evalkit::IidNorm::Share).unwrap();
        (ndcg / cases.len() as f64, share)
    };

    let empty = recedit_core::editor::EditBundle::new([0u8; 32]);
    let (pre_cold, pre_cold_share) = eval(&empty, GateMode::OneOne, &cold_cases, &splits.cold_items);
    let (pre_warm, pre_warm_share) = eval(&empty, GateMode::OneOne, &warm_cases, &splits.warm_items);
    println!("pre: cold ndcg {pre_cold:.4} share {pre_cold_share:.4} | warm ndcg {pre_warm:.4} share {pre_warm_share:.4}");

    for lambda in [10.0, 100.0, 1000.0, 10000.0] {
        let (bundle, _, norms) = solve_bundle(&model, [0u8; 32], &data, lambda, None).unwrap();
        let dw_total: f64 = norms.iter().map(|(_, n, _)| n * n).sum::<f64>();
        let (cold_n, cold_s) = eval(&bundle, GateMode::OneOne, &cold_cases, &splits.cold_items);
        let (warm_n, warm_s) = eval(&bundle, GateMode::OneOne, &warm_cases, &splits.warm_items);
        let (allon_c, _) = eval(&bundle, GateMode::AllOn, &cold_cases, &splits.cold_items);
        println!("lambda {lambda:>7}: |dW| {:.3} | cold {cold_n:.4} (share {cold_s:.3}, allon {allon_c:.4}) | warm {warm_n:.4} (share {warm_s:.3})",
            dw_total.sqrt());
    }
}
