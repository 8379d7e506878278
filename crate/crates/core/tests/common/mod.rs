#![allow(dead_code)]

use knnlab::reflm::{train, TrainConfig};
use knnlab::synth::{synth_splits, SynthConfig};
use knnlab::{build_vocab, encode, Datastore, ModelParams, ModelShape, TokenId, Vocab};

/// Straight-line forward pass written independently of the library:
/// returns (hidden, probabilities).
pub fn scalar_forward(p: &ModelParams, window: &[TokenId]) -> (Vec<f64>, Vec<f64>) {
    let s = p.shape();
    let mut x = Vec::new();
    for &tok in window {
        for e in 0..s.d_emb {
            x.push(p.embedding[tok as usize * s.d_emb + e]);
        }
    }
    let mut h = vec![0.0; s.d_h];
    for j in 0..s.d_h {
        let mut a = p.hidden_b[j];
        for i in 0..s.input_dim() {
            a += x[i] * p.hidden_w[i * s.d_h + j];
        }
        h[j] = a.tanh();
    }
    let mut logits = vec![0.0; s.vocab_size];
    for w in 0..s.vocab_size {
        let mut a = p.output_b[w];
        for j in 0..s.d_h {
            a += h[j] * p.output_w[j * s.vocab_size + w];
        }
        logits[w] = a;
    }
    let m = logits.iter().cloned().fold(f64::MIN, f64::max);
    let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
    (h, logits.iter().map(|l| (l - m).exp() / z).collect())
}

pub struct Setup {
    pub vocab: Vocab,
    pub train: Vec<TokenId>,
    pub test: Vec<TokenId>,
    pub params: ModelParams,
    pub store: Datastore,
}

/// A small trained model with its training-set datastore.
pub fn small_setup() -> Setup {
    let cfg = SynthConfig {
        n_tokens: 30_000,
        n_words: 300,
        n_classes: 12,
        n_names: 40,
        n_phrases: 60,
        ..SynthConfig::default()
    };
    let splits = synth_splits(&cfg).unwrap();
    let vocab = build_vocab(&splits.train, 2).unwrap();
    let train_ids = encode(&splits.train, &vocab);
    let test = encode(&splits.test, &vocab);
    let shape = ModelShape {
        vocab_size: vocab.len(),
        n_ctx: 4,
        d_emb: 16,
        d_h: 32,
    };
    let cfg = TrainConfig {
        epochs: 2,
        ..TrainConfig::default()
    };
    let params = train(&train_ids, None, shape, &cfg, 1).unwrap().params;
    let store = Datastore::build(&params, &train_ids).unwrap();
    Setup {
        vocab,
        train: train_ids,
        test,
        params,
        store,
    }
}

pub fn shared() -> &'static Setup {
    static SETUP: std::sync::OnceLock<Setup> = std::sync::OnceLock::new();
    SETUP.get_or_init(small_setup)
}
