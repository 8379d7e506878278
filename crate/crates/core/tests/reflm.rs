use knnlab::corpus::{context_window, BOS_ID};
use knnlab::reflm::{loss_and_gradients, perplexity, train, TrainConfig};
use knnlab::rng::seeded;
use knnlab::{ModelParams, ModelShape, TokenId};
use rand::Rng;

mod common;
use common::scalar_forward;

fn shape(v: usize, n_ctx: usize, d_emb: usize, d_h: usize) -> ModelShape {
    ModelShape {
        vocab_size: v,
        n_ctx,
        d_emb,
        d_h,
    }
}

#[test]
fn forward_matches_scalar_loop() {
    let p = ModelParams::init(shape(50, 4, 6, 10), 11).unwrap();
    let mut rng = seeded(1);
    for _ in 0..20 {
        let w: Vec<TokenId> = (0..4).map(|_| rng.gen_range(0..50)).collect();
        let (cv, dist) = p.forward(&w).unwrap();
        let (h, probs) = scalar_forward(&p, &w);
        for (a, b) in cv.as_slice().iter().zip(&h) {
            assert!((*a as f64 - b).abs() <= 1e-6 * b.abs().max(1e-3));
        }
        for (a, b) in dist.probs().iter().zip(&probs) {
            assert!((a - b).abs() <= 1e-12);
        }
        assert!((dist.probs().iter().sum::<f64>() - 1.0).abs() <= 1e-6);
    }
}

#[test]
fn zero_model_is_uniform() {
    let p = ModelParams::zeros(shape(13, 3, 2, 4)).unwrap();
    let (_, d) = p.forward(&[0, 5, 7]).unwrap();
    assert!(d.probs().iter().all(|&x| (x - 1.0 / 13.0).abs() < 1e-15));
    let (loss, _) = loss_and_gradients(&p, &[0, 5, 7], 3).unwrap();
    assert!((loss - 13f64.ln()).abs() < 1e-12);
    let toks: Vec<TokenId> = (0..40).map(|i| i % 13).collect();
    assert!((perplexity(&p, &toks).unwrap() - 13.0).abs() < 1e-9);
}

fn max_rel_error(p: &ModelParams, window: &[TokenId], target: TokenId, coords: &[(usize, usize)]) -> f64 {
    let (_, grad) = loss_and_gradients(p, window, target).unwrap();
    let eps = 1e-4;
    let mut worst: f64 = 0.0;
    for &(slice, i) in coords {
        let mut plus = p.clone();
        plus.slices_mut()[slice][i] += eps;
        let mut minus = p.clone();
        minus.slices_mut()[slice][i] -= eps;
        let lp = loss_and_gradients(&plus, window, target).unwrap().0;
        let lm = loss_and_gradients(&minus, window, target).unwrap().0;
        let numeric = (lp - lm) / (2.0 * eps);
        let analytic = grad.slices()[slice][i];
        let scale = analytic.abs().max(numeric.abs());
        let rel = if scale < 1e-10 { 0.0 } else { (analytic - numeric).abs() / scale };
        worst = worst.max(rel);
    }
    worst
}

#[test]
fn gradients_match_finite_differences_on_toy_model() {
    // 4·1 + 1·2 + 2 + 2·4 + 4 = 20 parameters
    let p = ModelParams::init(shape(4, 1, 1, 2), 3).unwrap();
    let all: Vec<(usize, usize)> = p
        .slices()
        .iter()
        .enumerate()
        .flat_map(|(s, xs)| (0..xs.len()).map(move |i| (s, i)))
        .collect();
    assert_eq!(all.len(), 20);
    assert!(max_rel_error(&p, &[2], 1, &all) < 1e-4);
}

#[test]
fn gradients_match_finite_differences_on_random_coordinates() {
    let s = shape(30, 3, 5, 8);
    let mut p = ModelParams::init(s, 5).unwrap();
    // larger weights so that every layer carries signal
    for x in p.hidden_w.iter_mut().chain(p.output_w.iter_mut()) {
        *x *= 3.0;
    }
    let window = [4, 17, 4];
    let mut rng = seeded(99);
    let lens: Vec<usize> = p.slices().iter().map(|x| x.len()).collect();
    let mut coords = Vec::new();
    // the window's embedding rows, then random coordinates of the dense layers
    for &tok in &[4usize, 17] {
        for e in 0..s.d_emb {
            coords.push((0, tok * s.d_emb + e));
        }
    }
    while coords.len() < 150 {
        let slice = rng.gen_range(1..5);
        coords.push((slice, rng.gen_range(0..lens[slice])));
    }
    assert!(max_rel_error(&p, &window, 9, &coords) < 1e-4);
}

#[test]
fn perplexity_matches_independent_log_sum() {
    let s = shape(40, 3, 4, 6);
    let p = ModelParams::init(s, 8).unwrap();
    let mut rng = seeded(2);
    let toks: Vec<TokenId> = (0..1000).map(|_| rng.gen_range(0..40)).collect();
    let mut nll = 0.0;
    for t in 0..toks.len() {
        let mut w = Vec::new();
        for j in 0..s.n_ctx {
            let pos = t as isize - s.n_ctx as isize + j as isize;
            w.push(if pos < 0 { BOS_ID } else { toks[pos as usize] });
        }
        nll -= scalar_forward(&p, &w).1[toks[t] as usize].ln();
    }
    let expected = (nll / toks.len() as f64).exp();
    let got = perplexity(&p, &toks).unwrap();
    assert!(((got - expected) / expected).abs() < 1e-9);
}

#[test]
fn repeated_pattern_is_learned() {
    let pattern: [TokenId; 5] = [2, 3, 4, 5, 6];
    let corpus: Vec<TokenId> = pattern.iter().copied().cycle().take(500).collect();
    let held_out: Vec<TokenId> = pattern.iter().copied().cycle().skip(2).take(100).collect();
    let cfg = TrainConfig {
        epochs: 10,
        ..TrainConfig::default()
    };
    let out = train(&corpus, Some(&held_out), shape(8, 4, 8, 16), &cfg, 1).unwrap();
    let ppl = perplexity(&out.params, &held_out).unwrap();
    assert!(ppl <= 2.0, "held-out perplexity {ppl}");
    assert_eq!(out.log.len(), 10);
}

#[test]
fn constant_stream_perplexity_approaches_one() {
    let corpus: Vec<TokenId> = vec![2; 400];
    let cfg = TrainConfig {
        epochs: 20,
        ..TrainConfig::default()
    };
    let out = train(&corpus, None, shape(4, 2, 4, 8), &cfg, 3).unwrap();
    let ppl = perplexity(&out.params, &corpus[..100]).unwrap();
    assert!(ppl < 1.1, "perplexity {ppl}");
}

#[test]
fn save_load_round_trip_after_training() {
    let corpus: Vec<TokenId> = (0..300).map(|i| (i * 7 % 11) as TokenId).collect();
    let cfg = TrainConfig {
        epochs: 2,
        ..TrainConfig::default()
    };
    let out = train(&corpus, None, shape(11, 3, 4, 6), &cfg, 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.bin");
    out.params.save(&path).unwrap();
    let loaded = ModelParams::load(&path).unwrap();
    assert_eq!(loaded, out.params);
    let w = context_window(&corpus, 50, 3);
    assert_eq!(loaded.forward(&w).unwrap(), out.params.forward(&w).unwrap());
    let s = out.params.shape();
    let expected = 4 + 4 + 16 + 4 * s.param_count() as u64;
    assert_eq!(std::fs::metadata(&path).unwrap().len(), expected);
}
