//! Per-token win rates, bucketed benefit rates, and entropy / divergence
//! trajectories over generation position.
//!
//! All logarithms are natural. The aggregate perplexity change decomposes
//! exactly into per-token log-probability deltas:
//! `Σ_t (ln P′_t − ln P_LM_t) = n · (ln ppl_base − ln ppl_interp)`.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::Serialize;

use crate::corpus::{context_window, Vocab, BOS_ID, UNK_ID};
use crate::datastore::Retriever;
use crate::decode::GenerationRecord;
use crate::error::{Error, Result};
use crate::interp::{knn_distribution, mix, InterpConfig};
use crate::reflm::{ModelParams, NextTokenDistribution};
use crate::TokenId;

fn entropy_of(p: &[f64]) -> f64 {
    let h: f64 = p
        .iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| -x * x.ln())
        .sum();
    h.max(0.0)
}

/// Shannon entropy in nats, with `0 · ln 0 = 0`.
pub fn entropy(p: &NextTokenDistribution) -> f64 {
    entropy_of(p.probs())
}

/// `Σ p_i ln(p_i / m_i)` over `p_i > 0`.
fn kl_to_mixture(p: &[f64], m: &[f64]) -> f64 {
    p.iter()
        .zip(m)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &mi)| pi * (pi / mi).ln())
        .sum()
}

/// Jensen-Shannon divergence `½ KL(p‖m) + ½ KL(q‖m)` with `m = ½(p + q)`,
/// clamped to `[0, ln 2]` against rounding.
pub fn js_divergence(p: &NextTokenDistribution, q: &NextTokenDistribution) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch {
            expected: p.len(),
            actual: q.len(),
        });
    }
    let m: Vec<f64> = p
        .probs()
        .iter()
        .zip(q.probs())
        .map(|(a, b)| 0.5 * (a + b))
        .collect();
    let js = 0.5 * (kl_to_mixture(p.probs(), &m) + kl_to_mixture(q.probs(), &m));
    Ok(js.clamp(0.0, std::f64::consts::LN_2))
}

/// Gold-token probabilities from one teacher-forced pass. `P_kNN` does not
/// depend on λ, so one trace serves a whole λ grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GoldTrace {
    pub gold: Vec<TokenId>,
    pub p_lm: Vec<f64>,
    pub p_knn: Vec<f64>,
}

/// Teacher-forced pass: position `t` is predicted from the gold history
/// (bos-padded) and its context vector queries the datastore.
pub fn teacher_forced_trace(
    params: &ModelParams,
    retriever: &Retriever<'_>,
    tokens: &[TokenId],
    interp: &InterpConfig,
) -> Result<GoldTrace> {
    teacher_forced_trace_from(params, retriever, tokens, 0, interp)
}

/// Teacher-forced pass over positions `start..` of `tokens`, with everything
/// before `start` serving as context only.
pub fn teacher_forced_trace_from(
    params: &ModelParams,
    retriever: &Retriever<'_>,
    tokens: &[TokenId],
    start: usize,
    interp: &InterpConfig,
) -> Result<GoldTrace> {
    if start >= tokens.len() {
        return Err(Error::InvalidArgument("no tokens to evaluate".into()));
    }
    interp.validate()?;
    params.check_ids(tokens)?;
    let n_ctx = params.shape().n_ctx;
    let v = params.shape().vocab_size;
    let pairs: Vec<(f64, f64)> = (start..tokens.len())
        .into_par_iter()
        .map(|t| {
            let (q, p_lm) = params.forward(&context_window(tokens, t, n_ctx))?;
            let nbrs = retriever.search(q.as_slice(), interp.k, interp.distance)?;
            let p_knn = knn_distribution(&nbrs, interp.tau, v)?;
            Ok((p_lm.prob(tokens[t]), p_knn.prob(tokens[t])))
        })
        .collect::<Result<_>>()?;
    let (p_lm, p_knn) = pairs.into_iter().unzip();
    Ok(GoldTrace {
        gold: tokens[start..].to_vec(),
        p_lm,
        p_knn,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WinRateReport {
    pub lambda: f64,
    pub n_tokens: usize,
    pub n_wins: usize,
    pub win_rate: f64,
    pub agg_ppl_base: f64,
    pub agg_ppl_interp: f64,
    /// `ln P′(gold) − ln P_LM(gold)` per position.
    pub per_token_deltas: Vec<f64>,
    /// `P′(gold) > P_LM(gold)` per position; ties are not wins.
    pub wins: Vec<bool>,
}

impl WinRateReport {
    /// `(|Σ deltas − n·(ln ppl_base − ln ppl_interp)|, relative error)`.
    pub fn decomposition_error(&self) -> (f64, f64) {
        let lhs: f64 = self.per_token_deltas.iter().sum();
        let rhs = self.n_tokens as f64 * (self.agg_ppl_base.ln() - self.agg_ppl_interp.ln());
        let abs = (lhs - rhs).abs();
        let rel = if abs == 0.0 {
            0.0
        } else {
            abs / lhs.abs().max(rhs.abs())
        };
        (abs, rel)
    }
}

impl GoldTrace {
    pub fn len(&self) -> usize {
        self.gold.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gold.is_empty()
    }

    pub fn win_rate(&self, lambda: f64) -> WinRateReport {
        let n = self.len();
        let mut deltas = Vec::with_capacity(n);
        let mut wins = Vec::with_capacity(n);
        let mut sum_lm = 0.0;
        let mut sum_interp = 0.0;
        for (&lm, &knn) in self.p_lm.iter().zip(&self.p_knn) {
            let p = mix(knn, lm, lambda);
            let (ln_p, ln_lm) = (p.ln(), lm.ln());
            sum_lm += ln_lm;
            sum_interp += ln_p;
            deltas.push(ln_p - ln_lm);
            wins.push(p > lm);
        }
        let n_wins = wins.iter().filter(|&&w| w).count();
        WinRateReport {
            lambda,
            n_tokens: n,
            n_wins,
            win_rate: n_wins as f64 / n as f64,
            agg_ppl_base: (-sum_lm / n as f64).exp(),
            agg_ppl_interp: (-sum_interp / n as f64).exp(),
            per_token_deltas: deltas,
            wins,
        }
    }
}

pub fn token_win_rate(
    params: &ModelParams,
    retriever: &Retriever<'_>,
    eval_tokens: &[TokenId],
    interp: &InterpConfig,
) -> Result<WinRateReport> {
    Ok(teacher_forced_trace(params, retriever, eval_tokens, interp)?.win_rate(interp.lambda))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BucketingMode {
    Frequency,
    ExternalAnnotation,
}

/// How evaluated positions are assigned to buckets.
#[derive(Debug, Clone, Copy)]
pub enum Bucketing<'a> {
    /// Quartiles of the vocabulary count distribution, applied to the gold
    /// token's count. Gold tokens that are `<unk>` or `<bos>` get their own
    /// bucket.
    Frequency(&'a Vocab),
    /// One label per evaluated position.
    Annotations(&'a [String]),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BucketStats {
    pub n_tokens: usize,
    pub n_wins: usize,
    pub win_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BucketReport {
    pub mode: BucketingMode,
    pub buckets: BTreeMap<String, BucketStats>,
}

/// Type-7 (linear interpolation) sample quantile of sorted data.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// 25th, 50th and 75th percentiles of the counts of non-reserved tokens.
pub fn frequency_quartiles(vocab: &Vocab) -> Result<[f64; 3]> {
    let mut counts: Vec<f64> = vocab.counts()[2..].iter().map(|&c| c as f64).collect();
    if counts.is_empty() {
        return Err(Error::InvalidArgument("vocabulary has no ordinary tokens".into()));
    }
    counts.sort_by(f64::total_cmp);
    Ok([0.25, 0.5, 0.75].map(|q| quantile_sorted(&counts, q)))
}

fn frequency_label(id: TokenId, vocab: &Vocab, quartiles: &[f64; 3]) -> &'static str {
    match id {
        UNK_ID => "unk",
        BOS_ID => "bos",
        _ => {
            let c = vocab.count(id) as f64;
            if c <= quartiles[0] {
                "q1"
            } else if c <= quartiles[1] {
                "q2"
            } else if c <= quartiles[2] {
                "q3"
            } else {
                "q4"
            }
        }
    }
}

pub fn bucketed_win_rate(
    report: &WinRateReport,
    gold: &[TokenId],
    bucketing: Bucketing<'_>,
) -> Result<BucketReport> {
    if gold.len() != report.n_tokens {
        return Err(Error::DimensionMismatch {
            expected: report.n_tokens,
            actual: gold.len(),
        });
    }
    let mut buckets: BTreeMap<String, BucketStats> = BTreeMap::new();
    let mut add = |label: &str, win: bool| {
        let b = buckets.entry(label.to_string()).or_insert(BucketStats {
            n_tokens: 0,
            n_wins: 0,
            win_rate: 0.0,
        });
        b.n_tokens += 1;
        b.n_wins += usize::from(win);
    };
    let mode = match bucketing {
        Bucketing::Frequency(vocab) => {
            let q = frequency_quartiles(vocab)?;
            for (&g, &w) in gold.iter().zip(&report.wins) {
                add(frequency_label(g, vocab, &q), w);
            }
            BucketingMode::Frequency
        }
        Bucketing::Annotations(labels) => {
            if labels.len() != report.n_tokens {
                return Err(Error::DimensionMismatch {
                    expected: report.n_tokens,
                    actual: labels.len(),
                });
            }
            for (label, &w) in labels.iter().zip(&report.wins) {
                add(label, w);
            }
            BucketingMode::ExternalAnnotation
        }
    };
    for b in buckets.values_mut() {
        b.win_rate = b.n_wins as f64 / b.n_tokens as f64;
    }
    Ok(BucketReport { mode, buckets })
}

/// Parses `position<TAB>label` lines. Every position in `0..n_positions`
/// must be labelled exactly once.
pub fn parse_annotations(text: &str, n_positions: usize) -> Result<Vec<String>> {
    let mut labels: Vec<Option<String>> = vec![None; n_positions];
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: &str| Error::Format(format!("annotation line {}: {msg}", lineno + 1));
        let (pos, label) = line.split_once('\t').ok_or_else(|| bad("missing tab"))?;
        let pos: usize = pos.trim().parse().map_err(|_| bad("bad position"))?;
        if pos >= n_positions {
            return Err(bad("position out of range"));
        }
        if labels[pos].replace(label.to_string()).is_some() {
            return Err(bad("duplicate position"));
        }
    }
    labels
        .into_iter()
        .enumerate()
        .map(|(i, l)| l.ok_or_else(|| Error::Format(format!("position {i} has no annotation"))))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectoryPoint {
    /// Mean of `H(P_kNN) / H(P_LM)` over records with `H(P_LM) > 0`.
    pub mean_entropy_ratio: Option<f64>,
    pub mean_jsd: Option<f64>,
    /// Records reaching this position.
    pub n_samples: usize,
    /// Records excluded from the ratio because `H(P_LM) = 0`.
    pub n_zero_h_lm: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectoryReport {
    pub points: Vec<TrajectoryPoint>,
}

/// Mean of per-step entropy ratios (not ratio of means) and mean JSD at each
/// generation position, summed in record order.
pub fn trajectories(records: &[GenerationRecord]) -> Result<TrajectoryReport> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("no generation records".into()));
    }
    let len = records.iter().map(|r| r.per_step.len()).max().unwrap_or(0);
    let mut ratio_sum = vec![0.0; len];
    let mut ratio_n = vec![0usize; len];
    let mut jsd_sum = vec![0.0; len];
    let mut n = vec![0usize; len];
    let mut zero = vec![0usize; len];
    for (r_idx, rec) in records.iter().enumerate() {
        for (t, s) in rec.per_step.iter().enumerate() {
            let (Some(h_knn), Some(jsd)) = (s.h_knn, s.jsd) else {
                return Err(Error::InvalidArgument(format!(
                    "record {r_idx} has no retrieval statistics"
                )));
            };
            n[t] += 1;
            jsd_sum[t] += jsd;
            if s.h_lm > 0.0 {
                ratio_sum[t] += h_knn / s.h_lm;
                ratio_n[t] += 1;
            } else {
                zero[t] += 1;
            }
        }
    }
    let points = (0..len)
        .map(|t| TrajectoryPoint {
            mean_entropy_ratio: (ratio_n[t] > 0).then(|| ratio_sum[t] / ratio_n[t] as f64),
            mean_jsd: (n[t] > 0).then(|| jsd_sum[t] / n[t] as f64),
            n_samples: n[t],
            n_zero_h_lm: zero[t],
        })
        .collect();
    Ok(TrajectoryReport { points })
}

fn ols_slope(pts: impl Iterator<Item = (f64, f64)>) -> Option<f64> {
    let pts: Vec<(f64, f64)> = pts.collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

impl TrajectoryReport {
    /// Least-squares slope of the mean entropy ratio against position.
    pub fn entropy_ratio_slope(&self) -> Option<f64> {
        ols_slope(
            self.points
                .iter()
                .enumerate()
                .filter_map(|(t, p)| p.mean_entropy_ratio.map(|r| (t as f64, r))),
        )
    }

    pub fn jsd_slope(&self) -> Option<f64> {
        ols_slope(
            self.points
                .iter()
                .enumerate()
                .filter_map(|(t, p)| p.mean_jsd.map(|r| (t as f64, r))),
        )
    }
}
