//! Text-level generation metrics: unigram repetition and a heuristic
//! capitalized-span entity F1.

use std::collections::{BTreeSet, HashSet};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::TokenId;

/// `1 − |unique tokens| / |tokens|`.
pub fn seq_rep_1(tokens: &[TokenId]) -> Result<f64> {
    if tokens.is_empty() {
        return Err(Error::InvalidArgument("seq-rep-1 of an empty sequence".into()));
    }
    let unique: HashSet<TokenId> = tokens.iter().copied().collect();
    Ok(1.0 - unique.len() as f64 / tokens.len() as f64)
}

pub type EntitySet = BTreeSet<String>;

fn is_capitalized(tok: &str) -> bool {
    tok.chars().next().is_some_and(char::is_uppercase)
}

/// Maximal runs of whitespace-separated tokens that start with an uppercase
/// letter, joined by single spaces.
pub fn extract_entities(text: &str) -> EntitySet {
    let mut out = EntitySet::new();
    let mut run: Vec<&str> = Vec::new();
    for tok in text.split_whitespace() {
        if is_capitalized(tok) {
            run.push(tok);
        } else if !run.is_empty() {
            out.insert(run.join(" "));
            run.clear();
        }
    }
    if !run.is_empty() {
        out.insert(run.join(" "));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EntityScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Both sets were empty; the score is defined as 1.
    pub vacuous: bool,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Set-based entity precision, recall and F1 of `generated` against
/// `reference`.
pub fn entity_f1(generated: &EntitySet, reference: &EntitySet) -> EntityScore {
    if generated.is_empty() && reference.is_empty() {
        return EntityScore {
            precision: 1.0,
            recall: 1.0,
            f1: 1.0,
            vacuous: true,
        };
    }
    let hits = generated.intersection(reference).count();
    let precision = ratio(hits, generated.len());
    let recall = ratio(hits, reference.len());
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    EntityScore {
        precision,
        recall,
        f1,
        vacuous: false,
    }
}

/// Macro and micro averages of entity F1 over example pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EntitySummary {
    pub n: usize,
    pub n_vacuous: usize,
    /// Mean of per-example F1 (vacuous pairs count as 1).
    pub macro_f1: f64,
    /// F1 from pooled true positives and set sizes.
    pub micro_f1: f64,
}

pub fn summarize_entities<'a>(
    pairs: impl IntoIterator<Item = (&'a EntitySet, &'a EntitySet)>,
) -> Result<EntitySummary> {
    let (mut n, mut n_vacuous, mut f1_sum) = (0usize, 0usize, 0.0);
    let (mut hits, mut n_gen, mut n_ref) = (0usize, 0usize, 0usize);
    for (g, r) in pairs {
        let s = entity_f1(g, r);
        n += 1;
        n_vacuous += usize::from(s.vacuous);
        f1_sum += s.f1;
        hits += g.intersection(r).count();
        n_gen += g.len();
        n_ref += r.len();
    }
    if n == 0 {
        return Err(Error::InvalidArgument("no examples to summarize".into()));
    }
    let micro_f1 = if n_gen + n_ref == 0 {
        1.0
    } else {
        2.0 * hits as f64 / (n_gen + n_ref) as f64
    };
    Ok(EntitySummary {
        n,
        n_vacuous,
        macro_f1: f1_sum / n as f64,
        micro_f1,
    })
}
