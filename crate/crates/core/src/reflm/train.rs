//! Minibatch SGD training with exact backpropagation.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{perplexity, softmax_in_place, ModelParams, ModelShape};
use crate::corpus::context_window;
use crate::error::{Error, Result};
use crate::linalg::gemm;
use crate::rng::seeded;
use crate::TokenId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Global gradient-norm clip.
    pub clip_norm: f64,
    /// Halve the learning rate when validation perplexity fails to improve.
    pub halve_on_plateau: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 32,
            learning_rate: 0.1,
            clip_norm: 5.0,
            halve_on_plateau: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_ppl: Option<f64>,
    pub learning_rate: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: Vec<EpochLog>,
}

/// Scratch buffers for one minibatch.
struct Workspace {
    shape: ModelShape,
    rows: usize,
    x: Vec<f64>,
    h: Vec<f64>,
    probs: Vec<f64>,
    dh: Vec<f64>,
    dx: Vec<f64>,
    grad: ModelParams,
    /// Embedding rows with non-zero gradient in the current batch.
    touched: Vec<usize>,
    mark: Vec<bool>,
}

impl Workspace {
    fn new(shape: ModelShape, capacity: usize) -> Result<Self> {
        Ok(Self {
            shape,
            rows: 0,
            x: vec![0.0; capacity * shape.input_dim()],
            h: vec![0.0; capacity * shape.d_h],
            probs: vec![0.0; capacity * shape.vocab_size],
            dh: vec![0.0; capacity * shape.d_h],
            dx: vec![0.0; capacity * shape.input_dim()],
            grad: ModelParams::zeros(shape)?,
            touched: Vec::new(),
            mark: vec![false; shape.vocab_size],
        })
    }

    fn clear_embedding_grad(&mut self) {
        let d_emb = self.shape.d_emb;
        for &r in &self.touched {
            self.grad.embedding[r * d_emb..(r + 1) * d_emb].fill(0.0);
            self.mark[r] = false;
        }
        self.touched.clear();
    }

    fn grad_norm(&self) -> f64 {
        let d_emb = self.shape.d_emb;
        let mut sq = 0.0;
        for &r in &self.touched {
            sq += self.grad.embedding[r * d_emb..(r + 1) * d_emb]
                .iter()
                .map(|g| g * g)
                .sum::<f64>();
        }
        for s in &self.grad.slices()[1..] {
            sq += s.iter().map(|g| g * g).sum::<f64>();
        }
        sq.sqrt()
    }
}

/// Mean cross-entropy over the batch and its exact gradient, left in
/// `ws.grad` (embedding rows listed in `ws.touched`).
fn batch_backward(
    params: &ModelParams,
    windows: &[&[TokenId]],
    targets: &[TokenId],
    ws: &mut Workspace,
) -> f64 {
    let ModelShape {
        vocab_size: v,
        d_emb,
        d_h,
        ..
    } = params.shape();
    let input = params.shape().input_dim();
    let b = windows.len();
    ws.rows = b;
    ws.clear_embedding_grad();

    let x = &mut ws.x[..b * input];
    for (r, w) in windows.iter().enumerate() {
        for (j, &tok) in w.iter().enumerate() {
            let t = tok as usize;
            x[r * input + j * d_emb..r * input + (j + 1) * d_emb]
                .copy_from_slice(&params.embedding[t * d_emb..(t + 1) * d_emb]);
        }
    }

    let h = &mut ws.h[..b * d_h];
    for row in h.chunks_mut(d_h) {
        row.copy_from_slice(&params.hidden_b);
    }
    gemm(b, input, d_h, x, false, &params.hidden_w, false, 1.0, h);
    for a in h.iter_mut() {
        *a = a.tanh();
    }

    let probs = &mut ws.probs[..b * v];
    for row in probs.chunks_mut(v) {
        row.copy_from_slice(&params.output_b);
    }
    gemm(b, d_h, v, h, false, &params.output_w, false, 1.0, probs);

    let scale = 1.0 / b as f64;
    let mut loss = 0.0;
    for (r, row) in probs.chunks_mut(v).enumerate() {
        softmax_in_place(row);
        let t = targets[r] as usize;
        loss -= row[t].ln();
        row[t] -= 1.0;
        for g in row.iter_mut() {
            *g *= scale;
        }
    }
    let dlogits = &*probs;

    let grad = &mut ws.grad;
    gemm(d_h, b, v, h, true, dlogits, false, 0.0, &mut grad.output_w);
    grad.output_b.fill(0.0);
    for row in dlogits.chunks(v) {
        for (g, &d) in grad.output_b.iter_mut().zip(row) {
            *g += d;
        }
    }

    let dh = &mut ws.dh[..b * d_h];
    gemm(b, v, d_h, dlogits, false, &params.output_w, true, 0.0, dh);
    for (d, &a) in dh.iter_mut().zip(h.iter()) {
        *d *= 1.0 - a * a;
    }

    gemm(input, b, d_h, x, true, dh, false, 0.0, &mut grad.hidden_w);
    grad.hidden_b.fill(0.0);
    for row in dh.chunks(d_h) {
        for (g, &d) in grad.hidden_b.iter_mut().zip(row) {
            *g += d;
        }
    }

    let dx = &mut ws.dx[..b * input];
    gemm(b, d_h, input, dh, false, &params.hidden_w, true, 0.0, dx);
    for (r, w) in windows.iter().enumerate() {
        for (j, &tok) in w.iter().enumerate() {
            let t = tok as usize;
            if !ws.mark[t] {
                ws.mark[t] = true;
                ws.touched.push(t);
            }
            let src = &dx[r * input + j * d_emb..r * input + (j + 1) * d_emb];
            for (g, &d) in grad.embedding[t * d_emb..(t + 1) * d_emb]
                .iter_mut()
                .zip(src)
            {
                *g += d;
            }
        }
    }

    loss * scale
}

/// `−ln P_LM(target | window)` and its gradient with respect to every
/// parameter. Runs the same code path as training.
pub fn loss_and_gradients(
    params: &ModelParams,
    window: &[TokenId],
    target: TokenId,
) -> Result<(f64, ModelParams)> {
    params.check_window(window)?;
    params.check_ids(&[target])?;
    let mut ws = Workspace::new(params.shape(), 1)?;
    let loss = batch_backward(params, &[window], &[target], &mut ws);
    Ok((loss, ws.grad))
}

fn sgd_step(params: &mut ModelParams, ws: &Workspace, lr: f64, clip: f64) {
    let norm = ws.grad_norm();
    let scale = if norm > clip { clip / norm } else { 1.0 };
    let step = lr * scale;
    let d_emb = params.shape().d_emb;
    for &r in &ws.touched {
        for (p, g) in params.embedding[r * d_emb..(r + 1) * d_emb]
            .iter_mut()
            .zip(&ws.grad.embedding[r * d_emb..(r + 1) * d_emb])
        {
            *p -= step * g;
        }
    }
    let grads = ws.grad.slices();
    for (ps, gs) in params.slices_mut().into_iter().zip(grads).skip(1) {
        for (p, g) in ps.iter_mut().zip(gs) {
            *p -= step * g;
        }
    }
}

/// Trains from a seeded initialization with a seeded shuffle per epoch.
///
/// Every corpus position is one training example (bos-padded on the left).
/// The returned parameters are rounded to `f32`, the persisted precision.
pub fn train(
    corpus: &[TokenId],
    valid: Option<&[TokenId]>,
    shape: ModelShape,
    config: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    if corpus.len() <= shape.n_ctx {
        return Err(Error::InvalidArgument(format!(
            "corpus of {} tokens is not longer than the context window {}",
            corpus.len(),
            shape.n_ctx
        )));
    }
    if config.batch_size == 0 || !(config.learning_rate > 0.0) || !(config.clip_norm > 0.0) {
        return Err(Error::InvalidArgument(format!("bad training config {config:?}")));
    }
    let mut params = ModelParams::init(shape, seed)?;
    params.check_ids(corpus)?;
    if let Some(v) = valid {
        params.check_ids(v)?;
    }

    let n_ctx = shape.n_ctx;
    let windows: Vec<TokenId> = (0..corpus.len())
        .flat_map(|t| context_window(corpus, t, n_ctx))
        .collect();
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut rng = seeded(seed ^ 0x5EED_0F_0DE5);
    let mut ws = Workspace::new(shape, config.batch_size)?;
    let mut lr = config.learning_rate;
    let mut best_valid = f64::INFINITY;
    let mut log = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (step, batch) in order.chunks(config.batch_size).enumerate() {
            let wins: Vec<&[TokenId]> = batch
                .iter()
                .map(|&t| &windows[t * n_ctx..(t + 1) * n_ctx])
                .collect();
            let targets: Vec<TokenId> = batch.iter().map(|&t| corpus[t]).collect();
            let loss = batch_backward(&params, &wins, &targets, &mut ws);
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step,
                    learning_rate: lr,
                });
            }
            total += loss * batch.len() as f64;
            sgd_step(&mut params, &ws, lr, config.clip_norm);
        }
        let train_loss = total / corpus.len() as f64;
        let epoch_lr = lr;
        let valid_ppl = match valid {
            Some(v) if !v.is_empty() => {
                let ppl = perplexity(&params, v)?;
                if config.halve_on_plateau && ppl >= best_valid {
                    lr *= 0.5;
                }
                best_valid = best_valid.min(ppl);
                Some(ppl)
            }
            _ => None,
        };
        log::info!(
            "epoch {epoch}: train loss {train_loss:.4}, valid ppl {}, lr {epoch_lr}",
            valid_ppl.map_or("-".to_string(), |p| format!("{p:.3}"))
        );
        log.push(EpochLog {
            epoch,
            train_loss,
            valid_ppl,
            learning_rate: epoch_lr,
        });
    }

    if !params.is_finite() {
        return Err(Error::Invariant("training produced non-finite parameters".into()));
    }
    params.round_to_f32();
    Ok(TrainOutcome { params, log })
}
