use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wordalchemy::evaluator::{compute_metrics, rank_of_target, Candidate, RankedCandidates};
use wordalchemy::model::{forward, param_shapes, BoundParams, ModelConfig, ModelParams, SeqBatch};
use wordalchemy::numerics::{grad_check, Array, Graph, NumericsError, Var};
use wordalchemy::tokenizer::{TokenSeq, Tokenizer, PAD_ID};
use wordalchemy::trainer::{adamw_step, OptimizerState, TrainConfig};

fn random_array(rng: &mut ChaCha8Rng, shape: &[usize]) -> Array<f64> {
    let n = shape.iter().product();
    Array::from_vec(shape, (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

fn random_params(cfg: &ModelConfig, seed: u64) -> ModelParams<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tensors = param_shapes(cfg)
        .into_iter()
        .map(|(name, shape)| {
            let n = shape.iter().product();
            let data = (0..n).map(|_| rng.random_range(-0.5..0.5)).collect();
            (name, Array::from_vec(&shape, data).unwrap())
        })
        .collect();
    ModelParams::new(cfg, tensors).unwrap()
}

fn seq(rng: &mut ChaCha8Rng, len: usize, real: usize, vocab: u32) -> TokenSeq {
    TokenSeq {
        ids: (0..len).map(|i| if i < real { rng.random_range(3..vocab) } else { PAD_ID }).collect(),
        mask: (0..len).map(|i| (i < real) as u8).collect(),
    }
}

fn logits(params: &ModelParams<f64>, cfg: &ModelConfig, batch: &SeqBatch) -> Vec<f64> {
    let mut g = Graph::new();
    let p = BoundParams::bind(&mut g, params);
    let out = forward(&mut g, &p, cfg, batch, None).unwrap();
    g.value(out).data().to_vec()
}

fn dot_with_fixed(g: &mut Graph<f64>, x: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(random_array(&mut rng, &g.shape(x).to_vec()));
    let y = g.mul(x, w).unwrap();
    g.sum(y)
}

fn candidates(scores: &[i32]) -> Vec<Candidate> {
    scores
        .iter()
        .enumerate()
        .map(|(i, &s)| Candidate {
            word: format!("w{:03}", (i * 37) % 1000),
            score: s as f64,
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..6, cols in 1usize..12, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new();
        let x = g.input(random_array(&mut rng, &[rows, cols]).map(|v| v * 20.0));
        let y = g.softmax(x);
        for row in g.value(y).data().chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn primitive_gradients_match_differences(op in 0usize..7, m in 1usize..4, k in 2usize..5, n in 2usize..5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        params.insert("a".to_string(), random_array(&mut rng, &[m, k]));
        params.insert("b".to_string(), random_array(&mut rng, &[k, n]));
        params.insert("c".to_string(), random_array(&mut rng, &[m, k]));
        params.insert("gain".to_string(), random_array(&mut rng, &[k]));
        let build = |g: &mut Graph<f64>, p: &BTreeMap<String, Array<f64>>| -> Result<Var, NumericsError> {
            let a = g.param("a", p["a"].clone());
            let b = g.param("b", p["b"].clone());
            let c = g.param("c", p["c"].clone());
            let gain = g.param("gain", p["gain"].clone());
            let y = match op {
                0 => g.matmul(a, b, false)?,
                1 => g.add(a, c)?,
                2 => g.mul(a, c)?,
                3 => g.relu(a),
                4 => g.softmax(a),
                5 => g.rms_norm(a, gain)?,
                _ => {
                    let a3 = g.reshape(a, &[1, m, k])?;
                    let b3 = g.reshape(b, &[1, k, n])?;
                    g.bmm(a3, b3, false)?
                }
            };
            // unused parameters get zero gradients on both sides
            let y = dot_with_fixed(g, y, seed ^ 1);
            let rest = [b, c, gain].map(|v| g.scale(v, 0.0));
            let mut total = y;
            for r in rest {
                let s = g.sum(r);
                total = g.add(total, s)?;
            }
            Ok(total)
        };
        let r = grad_check(build, &params, 1e-5, seed).unwrap();
        prop_assert!(r.max_rel_error < 1e-5, "op {}: {:?}", op, r);
    }

    #[test]
    fn primitives_are_pure(m in 1usize..5, n in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = (random_array(&mut rng, &[m, n]), random_array(&mut rng, &[n, m]));
        let run = || {
            let mut g = Graph::new();
            let x = g.input(a.clone());
            let w = g.input(b.clone());
            let y = g.matmul(x, w, false).unwrap();
            let y = g.softmax(y);
            let y = g.relu(y);
            g.value(y).data().to_vec()
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn causal_and_padding_neutral(seed in any::<u64>(), real in 1usize..6, t in 0usize..4) {
        let cfg = ModelConfig::tiny(30);
        let params = random_params(&cfg, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
        let src = seq(&mut rng, 6, real, 30);
        let tgt = seq(&mut rng, 5, 5, 30);
        let base = SeqBatch::from_pairs([(&src, &tgt)]).unwrap();
        let reference = logits(&params, &cfg, &base);
        prop_assert_eq!(&reference, &logits(&params, &cfg, &base));

        let mut future = base.clone();
        for pos in t + 1..5 {
            future.decoder_input[pos] = rng.random_range(3..30);
        }
        let keep = (t + 1) * 30;
        prop_assert_eq!(&reference[..keep], &logits(&params, &cfg, &future)[..keep]);

        let mut padded = base.clone();
        for pos in real..6 {
            padded.input_ids[pos] = rng.random_range(0..30);
        }
        prop_assert_eq!(reference, logits(&params, &cfg, &padded));
    }

    #[test]
    fn zero_gradient_step_only_decays(seed in any::<u64>(), lr in 1e-5f64..1e-1, wd in 0.0f64..0.5) {
        let cfg = ModelConfig::tiny(20);
        let mut params = random_params(&cfg, seed).cast::<f32>();
        let before = params.clone();
        let grads: BTreeMap<String, Array<f32>> =
            params.tensors().iter().map(|(k, v)| (k.clone(), Array::zeros(v.shape()))).collect();
        let tcfg = TrainConfig { learning_rate: lr, weight_decay: wd, ..TrainConfig::default() };
        let mut state = OptimizerState::new(&params);
        adamw_step(&mut params, &grads, &mut state, &tcfg, lr).unwrap();
        let factor = (1.0 - lr * wd) as f32;
        for (name, p) in params.tensors() {
            for (&x, &x0) in p.data().iter().zip(before.get(name).data()) {
                prop_assert_eq!(x, x0 * factor);
            }
        }
    }

    #[test]
    fn encode_is_total_and_masked(text in "[a-z ]{0,60}", max_len in 2usize..24, eos in any::<bool>()) {
        let tok = Tokenizer::train(["the act of conquering", "a body of water"], 280).unwrap();
        let e = tok.encode(&text, None, max_len, eos);
        prop_assert_eq!(e.ids.len(), max_len);
        prop_assert_eq!(e.mask.len(), max_len);
        for (&id, &m) in e.ids.iter().zip(&e.mask) {
            prop_assert!(m == 1 || id == PAD_ID);
        }
        prop_assert_eq!(e.mask.iter().filter(|&&m| m == 1).count(), e.real_len());
    }

    #[test]
    fn rank_matches_count_of_preceding(scores in prop::collection::vec(-5i32..5, 1..60), pick in any::<prop::sample::Index>()) {
        let cands = candidates(&scores);
        let target = cands[pick.index(cands.len())].clone();
        let ranked = RankedCandidates::new("q", "en", cands.clone());
        let preceding = cands
            .iter()
            .filter(|c| c.score > target.score || (c.score == target.score && c.word < target.word))
            .count();
        prop_assert_eq!(rank_of_target(&ranked, &target.word).unwrap(), 1 + preceding);
    }

    #[test]
    fn increasing_transform_keeps_order(scores in prop::collection::vec(-50i32..50, 1..60)) {
        let cands = candidates(&scores);
        let moved: Vec<Candidate> = cands
            .iter()
            .map(|c| Candidate { word: c.word.clone(), score: (c.score / 7.0).exp() * 3.0 - 1.0 })
            .collect();
        let a = RankedCandidates::new("q", "en", cands);
        let b = RankedCandidates::new("q", "en", moved);
        let words = |r: &RankedCandidates| r.candidates.iter().map(|c| c.word.clone()).collect::<Vec<_>>();
        prop_assert_eq!(words(&a), words(&b));
    }

    #[test]
    fn metrics_are_ordered_and_monotone(ranks in prop::collection::vec(1usize..400, 1..80)) {
        let m = compute_metrics(&ranks).unwrap();
        prop_assert!(0.0 <= m.acc_at_1 && m.acc_at_1 <= m.acc_at_10);
        prop_assert!(m.acc_at_10 <= m.acc_at_100 && m.acc_at_100 <= 1.0);
        prop_assert!(m.median_rank >= 1.0);
        if let Some(i) = ranks.iter().position(|&r| r > 100) {
            let mut fewer = ranks.clone();
            fewer.remove(i);
            if !fewer.is_empty() {
                let f = compute_metrics(&fewer).unwrap();
                prop_assert!(f.acc_at_1 >= m.acc_at_1);
                prop_assert!(f.acc_at_10 >= m.acc_at_10);
                prop_assert!(f.acc_at_100 >= m.acc_at_100);
            }
        }
    }
}

#[test]
fn vocabulary_is_a_bijection() {
    let tok = Tokenizer::train(["the act of conquering", "a body of water", "पानी का"], 300).unwrap();
    let tokens: Vec<String> = (0..tok.vocab_size() as u32).map(|i| tok.token(i).unwrap()).collect();
    let unique: std::collections::BTreeSet<&String> = tokens.iter().collect();
    assert_eq!(unique.len(), tokens.len());
}
