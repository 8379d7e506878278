//! Reference base language model.
//!
//! A fixed-window feed-forward LM: the embeddings of the previous `n_ctx`
//! tokens are concatenated, passed through one `tanh` hidden layer, and
//! projected to vocabulary logits. The hidden activation doubles as the
//! context vector used for datastore keys and queries.

mod io;
mod train;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::context_window;
use crate::error::{Error, Result};
use crate::rng::seeded;
use crate::TokenId;

pub use train::{loss_and_gradients, train, EpochLog, TrainConfig, TrainOutcome};

/// Probabilities must sum to one within this tolerance.
pub const NORMALIZATION_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub vocab_size: usize,
    pub n_ctx: usize,
    pub d_emb: usize,
    pub d_h: usize,
}

impl ModelShape {
    pub fn input_dim(&self) -> usize {
        self.n_ctx * self.d_emb
    }

    pub fn param_count(&self) -> usize {
        self.vocab_size * self.d_emb
            + self.input_dim() * self.d_h
            + self.d_h
            + self.d_h * self.vocab_size
            + self.vocab_size
    }

    fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.n_ctx == 0 || self.d_emb == 0 || self.d_h == 0 {
            return Err(Error::InvalidArgument(format!(
                "model dimensions must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Model parameters, all row-major. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    shape: ModelShape,
    /// `vocab_size × d_emb`
    pub embedding: Vec<f64>,
    /// `(n_ctx · d_emb) × d_h`
    pub hidden_w: Vec<f64>,
    pub hidden_b: Vec<f64>,
    /// `d_h × vocab_size`
    pub output_w: Vec<f64>,
    pub output_b: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(shape: ModelShape) -> Result<Self> {
        shape.validate()?;
        Ok(Self {
            shape,
            embedding: vec![0.0; shape.vocab_size * shape.d_emb],
            hidden_w: vec![0.0; shape.input_dim() * shape.d_h],
            hidden_b: vec![0.0; shape.d_h],
            output_w: vec![0.0; shape.d_h * shape.vocab_size],
            output_b: vec![0.0; shape.vocab_size],
        })
    }

    /// Uniform initialization. Every value is representable in `f32`, so a
    /// freshly initialized model survives a save/load round trip unchanged.
    pub fn init(shape: ModelShape, seed: u64) -> Result<Self> {
        use rand::Rng;
        let mut p = Self::zeros(shape)?;
        let mut rng = seeded(seed);
        let mut fill = |xs: &mut [f64], scale: f64| {
            for x in xs {
                *x = (rng.gen_range(-scale..scale) as f32) as f64;
            }
        };
        fill(&mut p.embedding, 0.1);
        fill(&mut p.hidden_w, 1.0 / (shape.input_dim() as f64).sqrt());
        fill(&mut p.output_w, 1.0 / (shape.d_h as f64).sqrt());
        Ok(p)
    }

    pub fn shape(&self) -> ModelShape {
        self.shape
    }

    pub fn slices(&self) -> [&[f64]; 5] {
        [
            &self.embedding,
            &self.hidden_w,
            &self.hidden_b,
            &self.output_w,
            &self.output_b,
        ]
    }

    pub fn slices_mut(&mut self) -> [&mut [f64]; 5] {
        [
            &mut self.embedding,
            &mut self.hidden_w,
            &mut self.hidden_b,
            &mut self.output_w,
            &mut self.output_b,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|x| x.is_finite()))
    }

    /// Rounds every parameter to the nearest `f32`, the on-disk precision.
    pub fn round_to_f32(&mut self) {
        for s in self.slices_mut() {
            for x in s {
                *x = (*x as f32) as f64;
            }
        }
    }

    pub(crate) fn check_window(&self, window: &[TokenId]) -> Result<()> {
        if window.len() != self.shape.n_ctx {
            return Err(Error::DimensionMismatch {
                expected: self.shape.n_ctx,
                actual: window.len(),
            });
        }
        self.check_ids(window)
    }

    pub(crate) fn check_ids(&self, ids: &[TokenId]) -> Result<()> {
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= self.shape.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                vocab_size: self.shape.vocab_size,
            });
        }
        Ok(())
    }

    /// Hidden-layer activation for a window (ids already validated).
    fn hidden(&self, window: &[TokenId]) -> Vec<f64> {
        let ModelShape { d_emb, d_h, .. } = self.shape;
        let mut h = self.hidden_b.clone();
        for (j, &tok) in window.iter().enumerate() {
            let emb = &self.embedding[tok as usize * d_emb..(tok as usize + 1) * d_emb];
            for (e, &x) in emb.iter().enumerate() {
                let row = &self.hidden_w[(j * d_emb + e) * d_h..(j * d_emb + e + 1) * d_h];
                for (acc, &w) in h.iter_mut().zip(row) {
                    *acc += x * w;
                }
            }
        }
        for v in &mut h {
            *v = v.tanh();
        }
        h
    }

    fn output_distribution(&self, h: &[f64]) -> NextTokenDistribution {
        let v = self.shape.vocab_size;
        let mut logits = self.output_b.clone();
        for (i, &hi) in h.iter().enumerate() {
            let row = &self.output_w[i * v..(i + 1) * v];
            for (acc, &w) in logits.iter_mut().zip(row) {
                *acc += hi * w;
            }
        }
        softmax_in_place(&mut logits);
        NextTokenDistribution(logits)
    }

    /// Context vector only, skipping the output layer.
    pub fn context_vector(&self, window: &[TokenId]) -> Result<ContextVector> {
        self.check_window(window)?;
        Ok(ContextVector::from_hidden(&self.hidden(window)))
    }

    pub fn forward(&self, window: &[TokenId]) -> Result<(ContextVector, NextTokenDistribution)> {
        self.check_window(window)?;
        let h = self.hidden(window);
        let dist = self.output_distribution(&h);
        Ok((ContextVector::from_hidden(&h), dist))
    }

    /// `ln P_LM(tokens[t] | window(t))` for every position, bos-padded.
    pub fn gold_log_probs(&self, tokens: &[TokenId]) -> Result<Vec<f64>> {
        self.check_ids(tokens)?;
        let n_ctx = self.shape.n_ctx;
        Ok((0..tokens.len())
            .into_par_iter()
            .map(|t| {
                let h = self.hidden(&context_window(tokens, t, n_ctx));
                self.output_distribution(&h).prob(tokens[t]).ln()
            })
            .collect())
    }
}

/// `exp` of the mean negative log-likelihood over every position of
/// `tokens`, with the left edge padded by the bos token.
pub fn perplexity(params: &ModelParams, tokens: &[TokenId]) -> Result<f64> {
    if tokens.is_empty() {
        return Err(Error::InvalidArgument("perplexity of an empty sequence".into()));
    }
    let lp = params.gold_log_probs(tokens)?;
    let nll: f64 = lp.iter().map(|x| -x).sum();
    Ok((nll / tokens.len() as f64).exp())
}

/// Max-shifted softmax.
pub(crate) fn softmax_in_place(x: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

/// A model's hidden representation of a left context, stored at `f32`
/// precision (the datastore key precision).
#[derive(Debug, Clone, PartialEq)]
pub struct ContextVector(Vec<f32>);

impl ContextVector {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invariant("context vector has non-finite entries".into()));
        }
        Ok(Self(values))
    }

    fn from_hidden(h: &[f64]) -> Self {
        Self(h.iter().map(|&x| x as f32).collect())
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// A probability vector over the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct NextTokenDistribution(Vec<f64>);

impl NextTokenDistribution {
    /// Validates non-negativity and normalization.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidDistribution("empty".into()));
        }
        if let Some(p) = probs.iter().find(|p| !(p.is_finite() && **p >= 0.0)) {
            return Err(Error::InvalidDistribution(format!("bad entry {p}")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > NORMALIZATION_TOL {
            return Err(Error::InvalidDistribution(format!("sums to {sum}")));
        }
        Ok(Self(probs))
    }

    pub(crate) fn from_vec_unchecked(probs: Vec<f64>) -> Self {
        Self(probs)
    }

    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn prob(&self, id: TokenId) -> f64 {
        self.0[id as usize]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// Highest-probability id; ties go to the smaller id.
    pub fn argmax(&self) -> TokenId {
        let mut best = 0;
        for (i, &p) in self.0.iter().enumerate() {
            if p > self.0[best] {
                best = i;
            }
        }
        best as TokenId
    }
}
