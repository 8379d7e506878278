use rand::Rng;

use super::DecodingStrategy;
use crate::error::{Error, Result};
use crate::reflm::NextTokenDistribution;
use crate::rng::SampleRng;
use crate::TokenId;

/// Slack on the nucleus mass threshold so that float rounding in the running
/// sum cannot push the crossing token out of the set.
const NUCLEUS_SLACK: f64 = 1e-12;

fn by_prob_desc(probs: &[f64]) -> Vec<TokenId> {
    let mut ids: Vec<TokenId> = (0..probs.len() as TokenId).collect();
    ids.sort_by(|&a, &b| {
        probs[b as usize]
            .total_cmp(&probs[a as usize])
            .then(a.cmp(&b))
    });
    ids
}

fn renormalized(mut ids: Vec<TokenId>, probs: &[f64]) -> Vec<(TokenId, f64)> {
    ids.sort_unstable();
    let total: f64 = ids.iter().map(|&i| probs[i as usize]).sum();
    ids.into_iter()
        .map(|i| (i, probs[i as usize] / total))
        .collect()
}

/// The `k` most probable tokens (ties to smaller ids), in id order,
/// renormalized.
pub fn top_k_candidates(dist: &NextTokenDistribution, k: usize) -> Vec<(TokenId, f64)> {
    let probs = dist.probs();
    let mut ids = by_prob_desc(probs);
    ids.truncate(k.clamp(1, probs.len()));
    renormalized(ids, probs)
}

/// The smallest probability-sorted prefix of the vocabulary whose mass
/// reaches `p`, in id order, renormalized.
pub fn nucleus_candidates(dist: &NextTokenDistribution, p: f64) -> Vec<(TokenId, f64)> {
    let probs = dist.probs();
    let ids = by_prob_desc(probs);
    let mut cum = 0.0;
    let mut cut = ids.len();
    for (n, &i) in ids.iter().enumerate() {
        cum += probs[i as usize];
        if cum + NUCLEUS_SLACK >= p {
            cut = n + 1;
            break;
        }
    }
    renormalized(ids[..cut].to_vec(), probs)
}

/// Inverse-CDF draw over an id-ordered candidate list using one uniform.
fn inverse_cdf(candidates: impl Iterator<Item = (TokenId, f64)>, u: f64) -> TokenId {
    let cands: Vec<(TokenId, f64)> = candidates.collect();
    let total: f64 = cands.iter().map(|c| c.1).sum();
    let target = u * total;
    let mut cum = 0.0;
    for &(id, p) in &cands {
        cum += p;
        if cum > target {
            return id;
        }
    }
    // rounding left the target at or above the final sum
    cands
        .iter()
        .rev()
        .find(|c| c.1 > 0.0)
        .or(cands.last())
        .map(|c| c.0)
        .expect("candidate set is never empty")
}

/// Chooses the next token. Greedy decoding consumes no randomness; every
/// sampling strategy consumes exactly one uniform draw.
pub fn select_next(
    dist: &NextTokenDistribution,
    strategy: &DecodingStrategy,
    rng: &mut SampleRng,
) -> Result<TokenId> {
    match *strategy {
        DecodingStrategy::Greedy => Ok(dist.argmax()),
        DecodingStrategy::Ancestral => {
            let u = rng.gen::<f64>();
            Ok(inverse_cdf(
                dist.probs().iter().enumerate().map(|(i, &p)| (i as TokenId, p)),
                u,
            ))
        }
        DecodingStrategy::TopK { k } => {
            let u = rng.gen::<f64>();
            Ok(inverse_cdf(top_k_candidates(dist, k).into_iter(), u))
        }
        DecodingStrategy::Nucleus { p } => {
            let u = rng.gen::<f64>();
            Ok(inverse_cdf(nucleus_candidates(dist, p).into_iter(), u))
        }
        DecodingStrategy::Beam { .. } => Err(Error::InvalidArgument(
            "beam search is not a per-step selection rule".into(),
        )),
    }
}
