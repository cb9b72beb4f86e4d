use recedit_core::decoding::{beam_generate, GateMode};
use recedit_core::editor::{EditBundle, EditEntry};
use recedit_core::linalg::Matrix;
use recedit_core::model::{Activation, Model, ModelConfig, Precision};
use recedit_core::tokenizer::VocabLayout;

#[test]
fn deltas_flow_through_decode_step() {
    let layout = VocabLayout::new(2, 3);
    let cfg = ModelConfig {
        vocab_size: layout.vocab_size(), d_model: 8, d_ff: 8, n_enc_layers: 1,
        n_dec_layers: 2, n_heads: 2, max_seq_len: 8,
        activation: Activation::GatedSilu, precision: Precision::Fp64, seed: 3,
    };
    let model: Model<f64> = Model::new(cfg).unwrap();
    let mut bundle = EditBundle::new([0u8; 32]);
    let dw = Matrix::from_fn(8, 8, |i, j| ((i * 3 + j) % 5) as f64 * 2.0);
    bundle.install(&model, 0, EditEntry { layer: 1, lambda: 1.0, m: 1, delta_w: dw }).unwrap();
    let history = vec![layout.token(0, 1)];
    let base = beam_generate(&model, &EditBundle::new([0u8;32]), GateMode::OneOne, &history, &layout, 3, None).unwrap();
    let edited = beam_generate(&model, &bundle, GateMode::OneOne, &history, &layout, 3, None).unwrap();
    println!("base:   {:?}", base.iter().map(|b| (b.digits.clone(), b.score)).collect::<Vec<_>>());
    println!("edited: {:?}", edited.iter().map(|b| (b.digits.clone(), b.score)).collect::<Vec<_>>());
    assert_ne!(base[0].score, edited[0].score, "big delta must change step-0 scores");
}
