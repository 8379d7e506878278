//! JSONL schema for generation records.

use serde::{Deserialize, Serialize};

use super::{DecodingStrategy, GenerationRecord, StepStats};
use crate::corpus::{decode as detokenize, Vocab};
use crate::datastore::DistanceMode;
use crate::error::{Error, Result};
use crate::interp::InterpConfig;
use crate::TokenId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Baseline,
    Retrieval,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::Retrieval => "retrieval",
        }
    }
}

/// Per-step statistics as parallel arrays; the retrieval arrays are `null`
/// for baseline records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerStepArrays {
    pub h_lm: Vec<f64>,
    pub h_knn: Option<Vec<f64>>,
    pub jsd: Option<Vec<f64>>,
    pub p_chosen_final: Vec<f64>,
}

/// One line of `generations.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationLine {
    pub example_id: usize,
    pub mode: Mode,
    pub seed: u64,
    pub source_offset: usize,
    pub strategy: DecodingStrategy,
    pub lambda: Option<f64>,
    pub tau: Option<f64>,
    pub k: Option<usize>,
    pub distance: Option<DistanceMode>,
    pub prefix_ids: Vec<TokenId>,
    pub continuation_ids: Vec<TokenId>,
    pub gold_suffix_ids: Vec<TokenId>,
    pub per_step: PerStepArrays,
    pub prefix_text: String,
    pub continuation_text: String,
    pub gold_suffix_text: String,
}

impl GenerationLine {
    #[allow(clippy::too_many_arguments)]
    pub fn from_record(
        record: &GenerationRecord,
        example_id: usize,
        seed: u64,
        source_offset: usize,
        gold_suffix: &[TokenId],
        vocab: &Vocab,
    ) -> Self {
        let retrieval = record.interp.is_some();
        let col = |f: fn(&StepStats) -> Option<f64>| -> Option<Vec<f64>> {
            retrieval.then(|| record.per_step.iter().map(|s| f(s).unwrap_or(f64::NAN)).collect())
        };
        Self {
            example_id,
            mode: if retrieval { Mode::Retrieval } else { Mode::Baseline },
            seed,
            source_offset,
            strategy: record.strategy,
            lambda: record.interp.map(|i| i.lambda),
            tau: record.interp.map(|i| i.tau),
            k: record.interp.map(|i| i.k),
            distance: record.interp.map(|i| i.distance),
            prefix_ids: record.prefix.clone(),
            continuation_ids: record.continuation.clone(),
            gold_suffix_ids: gold_suffix.to_vec(),
            per_step: PerStepArrays {
                h_lm: record.per_step.iter().map(|s| s.h_lm).collect(),
                h_knn: col(|s| s.h_knn),
                jsd: col(|s| s.jsd),
                p_chosen_final: record.per_step.iter().map(|s| s.p_chosen_final).collect(),
            },
            prefix_text: detokenize(&record.prefix, vocab),
            continuation_text: detokenize(&record.continuation, vocab),
            gold_suffix_text: detokenize(gold_suffix, vocab),
        }
    }

    pub fn interp(&self) -> Option<InterpConfig> {
        match (self.lambda, self.tau, self.k) {
            (Some(lambda), Some(tau), Some(k)) => Some(InterpConfig {
                lambda,
                tau,
                k,
                distance: self.distance.unwrap_or_default(),
            }),
            _ => None,
        }
    }

    pub fn to_record(&self) -> Result<GenerationRecord> {
        let n = self.continuation_ids.len();
        let ps = &self.per_step;
        let lens_ok = ps.h_lm.len() == n
            && ps.p_chosen_final.len() == n
            && ps.h_knn.as_ref().is_none_or(|v| v.len() == n)
            && ps.jsd.as_ref().is_none_or(|v| v.len() == n);
        if !lens_ok {
            return Err(Error::Format(format!(
                "per_step arrays do not match continuation length {n}"
            )));
        }
        let per_step = (0..n)
            .map(|t| StepStats {
                h_lm: ps.h_lm[t],
                h_knn: ps.h_knn.as_ref().map(|v| v[t]),
                jsd: ps.jsd.as_ref().map(|v| v[t]),
                chosen: self.continuation_ids[t],
                p_chosen_final: ps.p_chosen_final[t],
            })
            .collect();
        Ok(GenerationRecord {
            prefix: self.prefix_ids.clone(),
            continuation: self.continuation_ids.clone(),
            per_step,
            strategy: self.strategy,
            interp: self.interp(),
        })
    }
}
