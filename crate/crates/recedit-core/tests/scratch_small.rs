//! Temporary small-scale repro (deleted before final).
use recedit_core::decoding::GateMode;
use recedit_core::editor::{solve_bundle, EditBundle};
use recedit_core::evalkit::{self, make_splits, subsample};
use recedit_core::model::{train, Model, TrainConfig};
use recedit_core::pipeline::*;
use recedit_core::synthetic::{synthetic_dataset, SyntheticSpec};

#[test]
#[ignore]
fn small_edit_effect() {
    let params = PipelineParams {
        tokenizer: TokenizerParams { m: 4, k: 16, d_emb: 32, seed: 1 },
        train: TrainConfig { epochs: 2, max_examples_per_epoch: 3000, ..TrainConfig::default() },
        ..PipelineParams::default()
    };
    let spec = SyntheticSpec {
        n_items: 300, n_cold: 30, n_users: 800, n_clusters: 4,
        ..SyntheticSpec::default()
    };
    let ds = synthetic_dataset(&spec, 42).unwrap();
    let splits = make_splits(&ds, params.boundaries(&ds)).unwrap();
    let arts = build_token_artifacts(&ds, &splits, &params.tokenizer, None).unwrap();
    let examples: Vec<_> = splits.train.iter()
        .map(|e| to_train_example(e, &arts.sid_table, &arts.layout, 20).unwrap()).collect();
    let mut model: Model<f32> = Model::new(params.model_config()).unwrap();
    train(&mut model, &examples, &params.train).unwrap();

    let kn = prepare_knowledge(&splits, &arts, &params.knowledge, false).unwrap();
    let locate = run_locate(&model, &kn.requests, &splits, &arts, &params.knowledge, &params.probe).unwrap();
    for (p, c) in &locate.choices { println!("p{p} -> l{} ({:.2})", c.layer, c.validation_accuracy); }
    let tokenized: Vec<_> = kn.requests.iter()
        .map(|r| to_tokenized_request(r, &arts.sid_table, &arts.layout, 20).unwrap()).collect();
    let cov = covariance_contexts(&splits, &arts, 20, 500, 0).unwrap();
    let (data, _) = recedit_core::editor::prepare_edit_data(
        &model, &tokenized, &choice_map(&locate.choices), &cov, &params.edit).unwrap();
    for d in &data {
        println!("p{} l{} m={} prob {:.3}->{:.3}", d.position, d.layer, d.m, d.mean_prob_before, d.mean_prob_after);
    }

    // One cold request context: check the target-token logit pre/post edit.
    let req = &tokenized[0];
    println!("request: position {} target {}", req.position, req.target);
    let base_logits = model.forward_logits(&req.history, &req.decoder).unwrap();
    let base_row = base_logits.row(base_logits.rows() - 1).to_vec();

    for lambda in [0.01, 10.0, 1000.0] {
        let (bundle, _, norms) = solve_bundle(&model, [0u8; 32], &data, lambda, None).unwrap();
        println!("lambda {lambda}: bundle entries {} norms {:?}", bundle.len(),
            norms.iter().map(|(p, n, _)| format!("p{p}:{n:.2}")).collect::<Vec<_>>());
        let gated = model.gated_forward(&bundle, GateMode::OneOne, &req.history, &req.decoder,
            req.position, arts.layout.sid_len()).unwrap();
        let row = gated.row(gated.rows() - 1);
        let shift: f32 = row.iter().zip(&base_row).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        let lp_base = recedit_core::linalg::log_softmax_f64(&base_row);
        let lp_post = recedit_core::linalg::log_softmax_f64(row);
        println!("  max |dlogit| {shift:.4}; p(target) {:.4} -> {:.4}",
            lp_base[req.target].exp(), lp_post[req.target].exp());
    }

    // Realized per-position injection: mean p(o_p | true prefix) on a
    // sample of request contexts, per lambda.
    let sample: Vec<_> = tokenized.iter().step_by(7).take(60).collect();
    for lambda in [0.01, 1.0, 10.0, 100.0, 1000.0] {
        let (bundle, _, _) = solve_bundle(&model, [0u8; 32], &data, lambda, None).unwrap();
        let mut by_pos = std::collections::BTreeMap::new();
        for req in &sample {
            let gated = model.gated_forward(&bundle, GateMode::OneOne, &req.history, &req.decoder,
                req.position, arts.layout.sid_len()).unwrap();
            let lp = recedit_core::linalg::log_softmax_f64(gated.row(gated.rows() - 1));
            let e = by_pos.entry(req.position).or_insert((0.0, 0usize));
            e.0 += lp[req.target].exp();
            e.1 += 1;
        }
        let probs: Vec<String> = by_pos.iter().map(|(p, (s, n))| format!("p{p}:{:.3}", s / *n as f64)).collect();
        println!("lambda {lambda}: realized {probs:?}");
    }

    // And metric-level effect on the cold split.
    let cold_cases: Vec<_> = subsample(&splits.test_cold(), 200, 1).iter()
        .map(|e| to_eval_case(e, &arts.sid_table, &arts.layout, 20).unwrap()).collect();
    let empty = EditBundle::new([0u8; 32]);
    let warm_cases: Vec<_> = subsample(&splits.test_warm(), 200, 1).iter()
        .map(|e| to_eval_case(e, &arts.sid_table, &arts.layout, 20).unwrap()).collect();
    for (name, bundle) in [
        ("base", empty.clone()),
        ("l0.01", solve_bundle(&model, [0u8;32], &data, 0.01, None).unwrap().0),
        ("l1", solve_bundle(&model, [0u8;32], &data, 1.0, None).unwrap().0),
        ("l10", solve_bundle(&model, [0u8;32], &data, 10.0, None).unwrap().0),
        ("l1000", solve_bundle(&model, [0u8;32], &data, 1000.0, None).unwrap().0),
    ] {
        let lists = evalkit::rank_cases(&model, &bundle, GateMode::OneOne, &cold_cases,
            &arts.layout, &arts.sid_table, 20, None).unwrap();
        let mut ndcg = 0.0;
        for (l, c) in lists.iter().zip(&cold_cases) { ndcg += evalkit::ndcg_at_k(l, &c.target_item, 10); }
        let wlists = evalkit::rank_cases(&model, &bundle, GateMode::OneOne, &warm_cases,
            &arts.layout, &arts.sid_table, 20, None).unwrap();
        let mut wndcg = 0.0;
        for (l, c) in wlists.iter().zip(&warm_cases) { wndcg += evalkit::ndcg_at_k(l, &c.target_item, 10); }
        println!("{name}: cold ndcg@10 {:.4} warm ndcg@10 {:.4}",
            ndcg / cold_cases.len() as f64, wndcg / warm_cases.len() as f64);
    }
}
