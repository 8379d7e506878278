//! Autoregressive generation with and without retrieval.
//!
//! At each step the model's context vector for the current history is used
//! as the retrieval query, so queries include previously generated tokens.

mod beam;
mod record;
mod sampling;

use serde::{Deserialize, Serialize};

use crate::corpus::context_window;
use crate::datastore::Retriever;
use crate::diagnostics::{entropy, js_divergence};
use crate::error::{Error, Result};
use crate::interp::{interpolate, knn_distribution, InterpConfig};
use crate::reflm::{ContextVector, ModelParams, NextTokenDistribution};
use crate::rng::seeded;
use crate::TokenId;

pub use beam::generate_beam;
pub use record::{GenerationLine, Mode, PerStepArrays};
pub use sampling::{nucleus_candidates, select_next, top_k_candidates};

pub const DEFAULT_NUCLEUS_P: f64 = 0.8;
pub const DEFAULT_TOP_K: usize = 40;
pub const DEFAULT_BEAM_SIZE: usize = 5;

/// Slack allowed on entropy and divergence bounds before a step is rejected.
const BOUND_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DecodingStrategy {
    Greedy,
    Ancestral,
    TopK { k: usize },
    Nucleus { p: f64 },
    Beam { beam_size: usize },
}

impl DecodingStrategy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            DecodingStrategy::TopK { k } if k < 1 => {
                Err(Error::InvalidArgument("top-k requires k >= 1".into()))
            }
            DecodingStrategy::Nucleus { p } if !(p > 0.0 && p <= 1.0) => Err(
                Error::InvalidArgument(format!("nucleus p must be in (0, 1], got {p}")),
            ),
            DecodingStrategy::Beam { beam_size } if beam_size < 1 => {
                Err(Error::InvalidArgument("beam size must be >= 1".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DecodingStrategy::Greedy => "greedy",
            DecodingStrategy::Ancestral => "ancestral",
            DecodingStrategy::TopK { .. } => "top_k",
            DecodingStrategy::Nucleus { .. } => "nucleus",
            DecodingStrategy::Beam { .. } => "beam",
        }
    }
}

/// Anything that maps a fixed-length window to a context vector and a
/// next-token distribution.
pub trait NextTokenModel {
    fn vocab_size(&self) -> usize;
    fn context_len(&self) -> usize;
    fn predict(&self, window: &[TokenId]) -> Result<(ContextVector, NextTokenDistribution)>;
}

impl NextTokenModel for ModelParams {
    fn vocab_size(&self) -> usize {
        self.shape().vocab_size
    }

    fn context_len(&self) -> usize {
        self.shape().n_ctx
    }

    fn predict(&self, window: &[TokenId]) -> Result<(ContextVector, NextTokenDistribution)> {
        self.forward(window)
    }
}

/// A datastore backend paired with its interpolation settings.
#[derive(Debug, Clone, Copy)]
pub struct Retrieval<'a> {
    pub retriever: Retriever<'a>,
    pub interp: InterpConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub h_lm: f64,
    pub h_knn: Option<f64>,
    pub jsd: Option<f64>,
    pub chosen: TokenId,
    pub p_chosen_final: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRecord {
    pub prefix: Vec<TokenId>,
    pub continuation: Vec<TokenId>,
    pub per_step: Vec<StepStats>,
    pub strategy: DecodingStrategy,
    pub interp: Option<InterpConfig>,
}

/// Distributions computed for one history.
pub(crate) struct StepDistributions {
    pub p_final: NextTokenDistribution,
    h_lm: f64,
    h_knn: Option<f64>,
    jsd: Option<f64>,
}

impl StepDistributions {
    pub(crate) fn stats_for(&self, chosen: TokenId) -> StepStats {
        StepStats {
            h_lm: self.h_lm,
            h_knn: self.h_knn,
            jsd: self.jsd,
            chosen,
            p_chosen_final: self.p_final.prob(chosen),
        }
    }
}

pub(crate) fn step_distributions<M: NextTokenModel + ?Sized>(
    model: &M,
    retrieval: Option<&Retrieval<'_>>,
    history: &[TokenId],
) -> Result<StepDistributions> {
    let n_ctx = model.context_len();
    let v = model.vocab_size();
    let (query, p_lm) = model.predict(&context_window(history, history.len(), n_ctx))?;
    let h_lm = entropy(&p_lm);
    let max_h = (v as f64).ln() + BOUND_SLACK;
    let check = |what: &str, x: f64, hi: f64| {
        if x.is_finite() && (-BOUND_SLACK..=hi).contains(&x) {
            Ok(())
        } else {
            Err(Error::Invariant(format!("{what} = {x} outside [0, {hi}]")))
        }
    };
    check("H(P_LM)", h_lm, max_h)?;

    let Some(r) = retrieval else {
        return Ok(StepDistributions {
            p_final: p_lm,
            h_lm,
            h_knn: None,
            jsd: None,
        });
    };
    let neighbors = r
        .retriever
        .search(query.as_slice(), r.interp.k, r.interp.distance)?;
    let p_knn = knn_distribution(&neighbors, r.interp.tau, v)?;
    let p_final = interpolate(&p_knn, &p_lm, r.interp.lambda)?;
    let h_knn = entropy(&p_knn);
    let jsd = js_divergence(&p_knn, &p_lm)?;
    check("H(P_kNN)", h_knn, max_h)?;
    check("JSD", jsd, std::f64::consts::LN_2 + BOUND_SLACK)?;
    Ok(StepDistributions {
        p_final,
        h_lm,
        h_knn: Some(h_knn),
        jsd: Some(jsd),
    })
}

fn check_request<M: NextTokenModel + ?Sized>(
    model: &M,
    retrieval: Option<&Retrieval<'_>>,
    prefix: &[TokenId],
    length: usize,
) -> Result<()> {
    if length < 1 {
        return Err(Error::InvalidArgument("generation length must be >= 1".into()));
    }
    if let Some(&id) = prefix.iter().find(|&&id| id as usize >= model.vocab_size()) {
        return Err(Error::TokenOutOfRange {
            id,
            vocab_size: model.vocab_size(),
        });
    }
    if let Some(r) = retrieval {
        r.interp.validate()?;
    }
    Ok(())
}

/// Generates `length` tokens after `prefix`. Beam strategies are delegated
/// to [`generate_beam`]; everything else samples one token per step with a
/// generator seeded from `seed`.
pub fn generate<M: NextTokenModel + ?Sized>(
    model: &M,
    retrieval: Option<&Retrieval<'_>>,
    prefix: &[TokenId],
    length: usize,
    strategy: &DecodingStrategy,
    seed: u64,
) -> Result<GenerationRecord> {
    strategy.validate()?;
    if let DecodingStrategy::Beam { beam_size } = *strategy {
        return generate_beam(model, retrieval, prefix, length, beam_size);
    }
    check_request(model, retrieval, prefix, length)?;
    let mut rng = seeded(seed);
    let mut history = prefix.to_vec();
    history.reserve(length);
    let mut per_step = Vec::with_capacity(length);
    for _ in 0..length {
        let dists = step_distributions(model, retrieval, &history)?;
        let chosen = select_next(&dists.p_final, strategy, &mut rng)?;
        per_step.push(dists.stats_for(chosen));
        history.push(chosen);
    }
    Ok(GenerationRecord {
        prefix: prefix.to_vec(),
        continuation: history.split_off(prefix.len()),
        per_step,
        strategy: *strategy,
        interp: retrieval.map(|r| r.interp),
    })
}

/// `Σ ln P′(continuation[t] | prefix + continuation[..t])` under the same
/// distributions generation uses.
pub fn sequence_log_prob<M: NextTokenModel + ?Sized>(
    model: &M,
    retrieval: Option<&Retrieval<'_>>,
    prefix: &[TokenId],
    continuation: &[TokenId],
) -> Result<f64> {
    let mut history = prefix.to_vec();
    let mut total = 0.0;
    for &tok in continuation {
        let d = step_distributions(model, retrieval, &history)?;
        total += d.p_final.prob(tok).ln();
        history.push(tok);
    }
    Ok(total)
}
