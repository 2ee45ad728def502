use mtjr_core::decode::{beam_search, extract_accent_tag, wer, AttentionScorer};
use mtjr_core::losses::{LossBreakdown, LossConfig};
use mtjr_core::model::{FeatureBatch, Model, ModelConfig};
use mtjr_core::{rng, Tape, Tensor};
use proptest::prelude::*;
use rand::Rng;

proptest! {
    #[test]
    fn edit_count_is_symmetric(a in prop::collection::vec(0u8..5, 1..10), b in prop::collection::vec(0u8..5, 1..10)) {
        prop_assert_eq!(wer(&a, &b).unwrap().edits(), wer(&b, &a).unwrap().edits());
    }

    #[test]
    fn pooled_variance_is_non_negative(
        rows in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 4), 1..12),
    ) {
        let n = rows.len();
        let x = Tensor::new(vec![n, 4], rows.concat()).unwrap();
        let mut tape = Tape::new();
        let v = tape.leaf(x, false);
        let pooled = tape.stats_pool(v, &[(0, n)]).unwrap();
        prop_assert!(tape.value(pooled).data()[4..].iter().all(|&s| s >= 0.0));
    }

    #[test]
    fn single_tag_is_extracted_and_removed(
        transcript in prop::collection::vec(1usize..=20, 0..10),
        accent in 0usize..8,
        at in 0usize..10,
    ) {
        let cfg = ModelConfig::default();
        let mut tokens = transcript.clone();
        let at = at.min(tokens.len());
        tokens.insert(at, cfg.accent_tag(accent));
        let (rest, tag) = extract_accent_tag(&tokens, &cfg);
        prop_assert_eq!(tag, Some(accent));
        prop_assert_eq!(rest, transcript);
    }

    #[test]
    fn combine_is_linear_in_each_weight(
        ctc in 0.0f64..50.0, att in 0.0f64..50.0, acc in 0.0f64..50.0,
        lambda in 0.0f64..3.0, gamma in 0.0f64..=1.0,
    ) {
        let cfg = LossConfig { lambda, gamma, ..LossConfig::default() };
        let b = LossBreakdown::combine(ctc, att, acc, &cfg).unwrap();
        let asr = gamma * ctc + (1.0 - gamma) * att;
        prop_assert!((b.asr - asr).abs() <= 1e-12 * (1.0 + asr));
        prop_assert!((b.total - (asr + lambda * acc)).abs() <= 1e-12 * (1.0 + b.total));
        let zero = LossBreakdown::combine(ctc, att, acc, &LossConfig { lambda: 0.0, ..cfg }).unwrap();
        prop_assert_eq!(zero.total, zero.asr);
    }
}

fn toy(seed: u64) -> (Model, Tensor) {
    let cfg = ModelConfig {
        d_model: 8,
        heads: 2,
        enc_layers: 1,
        dec_layers: 1,
        ffn_dim: 16,
        dropout: 0.0,
        vocab_size: ModelConfig::vocab_for(4, 2),
        accent_count: 2,
        subsample_factor: 2,
        feature_dim: 3,
    };
    // Larger weights than the initializer gives make the decoder peaked,
    // which is where pruning decisions matter.
    let mut model = Model::new(cfg, seed).unwrap();
    for p in model.params.iter_mut() {
        p.value.data_mut().iter_mut().for_each(|x| *x *= 4.0);
    }
    let mut r = rng::stream(seed, &[rng::label("features")]);
    let frames: Vec<f32> = (0..12 * 3).map(|_| r.random_range(-1.0..1.0)).collect();
    let feats = FeatureBatch::from_utterances(3, [(frames.as_slice(), 12)]).unwrap();
    let mut tape = model.tape(false);
    let enc = model.encode_features(&mut tape, &feats, None).unwrap();
    let memory = tape.value(enc.last()).clone();
    (model, memory)
}

#[test]
fn wider_beams_never_find_worse_best_hypotheses() {
    let mut violations = Vec::new();
    for seed in 0..30 {
        let (model, memory) = toy(seed);
        let scorer = AttentionScorer::new(&model, memory);
        let best: Vec<f64> = (1..=6).map(|b| beam_search(&scorer, b, 4).unwrap()[0].final_score).collect();
        for b in 1..best.len() {
            if best[b] < best[b - 1] - 1e-12 {
                violations.push((seed, b, best[b - 1], best[b]));
            }
        }
    }
    assert!(violations.is_empty(), "{violations:?}");
}
