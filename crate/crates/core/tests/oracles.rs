mod support;

use mtjr_core::decode::{beam_search, ctc_greedy, wer, AttentionScorer};
use mtjr_core::losses::{ctc_min_frames, ctc_nll};
use mtjr_core::model::{FeatureBatch, Model, ModelConfig};
use mtjr_core::{rng, Error, Tensor};
use rand::Rng;

fn logits(rows: usize, cols: usize, r: &mut impl Rng) -> Tensor {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| r.random_range(-3.0..3.0)).collect()).unwrap()
}

#[test]
fn ctc_equals_alignment_sum() {
    let mut r = rng::stream(2024, &[]);
    let mut checked = 0;
    for t in 1..=6 {
        for v in 2..=4 {
            for l in 0..=3 {
                for _ in 0..100 {
                    let x = logits(t, v, &mut r);
                    let target: Vec<usize> = (0..l).map(|_| r.random_range(1..v)).collect();
                    let p = support::ctc_probability(&x, &target);
                    match ctc_nll(&x, &target) {
                        Ok(nll) => {
                            assert!((nll - (-p.ln())).abs() < 1e-8, "T={t} V={v} {target:?}: {nll} vs {}", -p.ln());
                            checked += 1;
                        }
                        Err(Error::InfeasibleAlignment { .. }) => {
                            assert!(ctc_min_frames(&target) > t);
                            assert_eq!(p, 0.0);
                        }
                        Err(e) => panic!("{e:?}"),
                    }
                }
            }
        }
    }
    assert!(checked > 5000, "{checked}");
}

#[test]
fn wer_equals_exhaustive_edit_distance() {
    let mut r = rng::stream(77, &[]);
    for _ in 0..1000 {
        let reference: Vec<u8> = (0..r.random_range(1..=8)).map(|_| r.random_range(0..4)).collect();
        let hypothesis: Vec<u8> = (0..r.random_range(0..=8)).map(|_| r.random_range(0..4)).collect();
        let stats = wer(&reference, &hypothesis).unwrap();
        assert_eq!(stats.edits(), support::edit_distance(&reference, &hypothesis), "{reference:?} {hypothesis:?}");
        assert_eq!(reference.len() - stats.deletions, hypothesis.len() - stats.insertions);
        assert_eq!(stats.wer, stats.edits() as f64 / reference.len() as f64);
    }
}

#[test]
fn greedy_matches_rule() {
    let mut r = rng::stream(5, &[]);
    for _ in 0..1000 {
        let t = r.random_range(1..12);
        // Few distinct values so ties and repeats actually occur.
        let x = Tensor::new(vec![t, 5], (0..t * 5).map(|_| r.random_range(0..3) as f64).collect()).unwrap();
        assert_eq!(ctc_greedy(&x), support::greedy_rule(&x));
    }
}

fn toy_model(seed: u64) -> Model {
    let cfg = ModelConfig {
        d_model: 8,
        heads: 2,
        enc_layers: 1,
        dec_layers: 1,
        ffn_dim: 16,
        dropout: 0.0,
        vocab_size: ModelConfig::vocab_for(3, 2),
        accent_count: 2,
        subsample_factor: 2,
        feature_dim: 3,
    };
    Model::new(cfg, seed).unwrap()
}

fn memory(model: &Model, seed: u64) -> Tensor {
    let mut r = rng::stream(seed, &[rng::label("features")]);
    let frames: Vec<f32> = (0..10 * 3).map(|_| r.random_range(-1.0..1.0)).collect();
    let feats = FeatureBatch::from_utterances(3, [(frames.as_slice(), 10)]).unwrap();
    let mut tape = model.tape(false);
    let enc = model.encode_features(&mut tape, &feats, None).unwrap();
    tape.value(enc.last()).clone()
}

#[test]
fn full_width_beam_matches_exhaustive_search() {
    for seed in 0..20 {
        let model = toy_model(seed);
        let scorer = AttentionScorer::new(&model, memory(&model, seed));
        let v = model.config.vocab_size;
        let hyps = beam_search(&scorer, v, 2).unwrap();
        let all = support::enumerate_hypotheses(&scorer, 2);
        assert_eq!(hyps[0].tokens, all[0].0, "seed {seed}");
        assert!((hyps[0].final_score - all[0].2).abs() < 1e-12);
        assert!((hyps[0].att_logprob - all[0].1).abs() < 1e-12);
    }
}
