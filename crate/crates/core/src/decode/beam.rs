use std::cmp::Ordering;

use super::{
    check_request, step_distributions, DecodingStrategy, GenerationRecord, NextTokenModel,
    Retrieval, StepStats,
};
use crate::error::{Error, Result};
use crate::TokenId;

#[derive(Clone)]
struct Beam {
    tokens: Vec<TokenId>,
    score: f64,
    stats: Vec<StepStats>,
}

/// Higher score first; equal scores fall back to lexicographic token order.
fn rank(a_score: f64, a_tokens: &[TokenId], b_score: f64, b_tokens: &[TokenId]) -> Ordering {
    b_score
        .total_cmp(&a_score)
        .then_with(|| a_tokens.cmp(b_tokens))
}

/// Beam search over cumulative `ln P′` with no length normalization. All
/// beams have the same length, so the best surviving beam is returned.
pub fn generate_beam<M: NextTokenModel + ?Sized>(
    model: &M,
    retrieval: Option<&Retrieval<'_>>,
    prefix: &[TokenId],
    length: usize,
    beam_size: usize,
) -> Result<GenerationRecord> {
    if beam_size < 1 {
        return Err(Error::InvalidArgument("beam size must be >= 1".into()));
    }
    check_request(model, retrieval, prefix, length)?;

    let mut beams = vec![Beam {
        tokens: Vec::with_capacity(length),
        score: 0.0,
        stats: Vec::with_capacity(length),
    }];
    let mut history = prefix.to_vec();

    for _ in 0..length {
        // (parent, token, score, stats)
        let mut candidates: Vec<(usize, TokenId, f64, StepStats)> = Vec::new();
        for (b, beam) in beams.iter().enumerate() {
            history.truncate(prefix.len());
            history.extend_from_slice(&beam.tokens);
            let dists = step_distributions(model, retrieval, &history)?;
            let probs = dists.p_final.probs();
            // only the best `beam_size` extensions of a parent can survive
            let mut ids: Vec<TokenId> = (0..probs.len() as TokenId)
                .filter(|&i| probs[i as usize] > 0.0)
                .collect();
            ids.sort_by(|&x, &y| {
                probs[y as usize]
                    .total_cmp(&probs[x as usize])
                    .then(x.cmp(&y))
            });
            ids.truncate(beam_size);
            for id in ids {
                candidates.push((
                    b,
                    id,
                    beam.score + probs[id as usize].ln(),
                    dists.stats_for(id),
                ));
            }
        }
        if candidates.is_empty() {
            return Err(Error::Invariant("beam search found no extension".into()));
        }
        candidates.sort_by(|a, b| {
            let ta = &beams[a.0].tokens;
            let tb = &beams[b.0].tokens;
            b.2.total_cmp(&a.2)
                .then_with(|| ta.cmp(tb))
                .then(a.1.cmp(&b.1))
        });
        candidates.truncate(beam_size);
        beams = candidates
            .into_iter()
            .map(|(parent, id, score, st)| {
                let p = &beams[parent];
                let mut tokens = p.tokens.clone();
                tokens.push(id);
                let mut stats = p.stats.clone();
                stats.push(st);
                Beam {
                    tokens,
                    score,
                    stats,
                }
            })
            .collect();
        beams.sort_by(|a, b| rank(a.score, &a.tokens, b.score, &b.tokens));
    }

    let best = beams.swap_remove(0);
    Ok(GenerationRecord {
        prefix: prefix.to_vec(),
        continuation: best.tokens,
        per_step: best.stats,
        strategy: DecodingStrategy::Beam { beam_size },
        interp: retrieval.map(|r| r.interp),
    })
}
