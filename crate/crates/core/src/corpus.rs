//! Word-level tokenization, vocabularies, and evaluation-set construction.
//!
//! Tokens are whitespace-delimited strings. Ids `0` and `1` are reserved for
//! the unknown token and the left-padding token; every other id is assigned by
//! descending corpus count, ties broken by first occurrence.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::seeded;
use crate::TokenId;

pub const UNK_ID: TokenId = 0;
pub const BOS_ID: TokenId = 1;
pub const UNK_TOKEN: &str = "<unk>";
pub const BOS_TOKEN: &str = "<bos>";

pub const DEFAULT_PREFIX_LEN: usize = 100;
pub const DEFAULT_CONT_LEN: usize = 150;

#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    counts: Vec<u64>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    fn from_parts(tokens: Vec<String>, counts: Vec<u64>) -> Result<Self> {
        if tokens.len() < 2 || tokens[0] != UNK_TOKEN || tokens[1] != BOS_TOKEN {
            return Err(Error::Format(format!(
                "vocabulary must start with {UNK_TOKEN} and {BOS_TOKEN}"
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return Err(Error::Format(format!("invalid token {tok:?} at id {id}")));
            }
            if index.insert(tok.clone(), id as TokenId).is_some() {
                return Err(Error::Format(format!("duplicate token {tok:?}")));
            }
        }
        Ok(Self {
            tokens,
            counts,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn unk_id(&self) -> TokenId {
        UNK_ID
    }

    pub fn bos_id(&self) -> TokenId {
        BOS_ID
    }

    pub fn id(&self, token: &str) -> TokenId {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn get(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn count(&self, id: TokenId) -> u64 {
        self.counts.get(id as usize).copied().unwrap_or(0)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    /// Writes one `<token>\t<count>` line per id, in id order.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        for (tok, count) in self.tokens.iter().zip(&self.counts) {
            writeln!(w, "{tok}\t{count}")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let reader = BufReader::new(fs::File::open(path)?);
        let mut tokens = Vec::new();
        let mut counts = Vec::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            let (tok, count) = line
                .split_once('\t')
                .ok_or_else(|| Error::Format(format!("vocab line {}: missing tab", lineno + 1)))?;
            let count = count.parse::<u64>().map_err(|e| {
                Error::Format(format!("vocab line {}: bad count: {e}", lineno + 1))
            })?;
            tokens.push(tok.to_string());
            counts.push(count);
        }
        Self::from_parts(tokens, counts)
    }
}

pub fn build_vocab(corpus_text: &str, min_count: u64) -> Result<Vocab> {
    if min_count < 1 {
        return Err(Error::InvalidArgument("min_count must be >= 1".into()));
    }
    // token -> (count, first occurrence)
    let mut stats: HashMap<&str, (u64, usize)> = HashMap::new();
    let mut total = 0usize;
    for (pos, tok) in corpus_text.split_whitespace().enumerate() {
        stats.entry(tok).or_insert((0, pos)).0 += 1;
        total += 1;
    }
    if total == 0 {
        return Err(Error::EmptyCorpus);
    }

    let mut unk_count = stats.remove(UNK_TOKEN).map_or(0, |s| s.0);
    let bos_count = stats.remove(BOS_TOKEN).map_or(0, |s| s.0);

    let mut kept: Vec<(&str, u64, usize)> = Vec::with_capacity(stats.len());
    for (tok, (count, first)) in stats {
        if count >= min_count {
            kept.push((tok, count, first));
        } else {
            unk_count += count;
        }
    }
    kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));

    let mut tokens = Vec::with_capacity(kept.len() + 2);
    let mut counts = Vec::with_capacity(kept.len() + 2);
    tokens.push(UNK_TOKEN.to_string());
    counts.push(unk_count);
    tokens.push(BOS_TOKEN.to_string());
    counts.push(bos_count);
    for (tok, count, _) in kept {
        tokens.push(tok.to_string());
        counts.push(count);
    }
    Vocab::from_parts(tokens, counts)
}

pub fn encode(text: &str, vocab: &Vocab) -> Vec<TokenId> {
    text.split_whitespace().map(|t| vocab.id(t)).collect()
}

/// Joins token strings with single spaces. Unknown ids render as `<unk>`.
pub fn decode(ids: &[TokenId], vocab: &Vocab) -> String {
    let mut out = String::new();
    for (i, &id) in ids.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(vocab.token(id).unwrap_or(UNK_TOKEN));
    }
    out
}

/// The `n_ctx` tokens preceding position `t` of `tokens`, left-padded with
/// the bos token.
pub fn context_window(tokens: &[TokenId], t: usize, n_ctx: usize) -> Vec<TokenId> {
    let mut window = Vec::with_capacity(n_ctx);
    let start = t.saturating_sub(n_ctx);
    window.resize(n_ctx - (t - start), BOS_ID);
    window.extend_from_slice(&tokens[start..t]);
    window
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalExample {
    pub prefix: Vec<TokenId>,
    pub gold_suffix: Vec<TokenId>,
    pub source_offset: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OverlapPolicy {
    /// Fail when the split cannot hold `n_examples` disjoint windows.
    #[default]
    Forbid,
    /// Fall back to distinct, possibly overlapping offsets (logged as a warning).
    Allow,
}

/// Samples `n_examples` prefix/suffix windows from `split`.
///
/// Disjoint windows are placed uniformly at random: `n` gap sizes are drawn
/// from `0..=slack` and sorted, and window `i` starts at `gap[i] + i * window`.
pub fn build_eval_set(
    split: &[TokenId],
    n_examples: usize,
    prefix_len: usize,
    cont_len: usize,
    seed: u64,
    overlap: OverlapPolicy,
) -> Result<Vec<EvalExample>> {
    if n_examples == 0 {
        return Err(Error::InvalidArgument("n_examples must be >= 1".into()));
    }
    let window = prefix_len + cont_len;
    if window == 0 {
        return Err(Error::InvalidArgument("window length must be >= 1".into()));
    }
    if split.len() < window {
        return Err(Error::SplitTooShort {
            len: split.len(),
            window,
        });
    }
    let capacity = split.len() / window;
    let mut rng = seeded(seed);

    let offsets: Vec<usize> = if n_examples <= capacity {
        let slack = split.len() - n_examples * window;
        let mut gaps: Vec<usize> = (0..n_examples).map(|_| rng.gen_range(0..=slack)).collect();
        gaps.sort_unstable();
        gaps.iter().enumerate().map(|(i, g)| g + i * window).collect()
    } else {
        let positions = split.len() - window + 1;
        match overlap {
            OverlapPolicy::Forbid => {
                return Err(Error::NotEnoughWindows {
                    requested: n_examples,
                    available: capacity,
                })
            }
            OverlapPolicy::Allow if n_examples > positions => {
                return Err(Error::NotEnoughWindows {
                    requested: n_examples,
                    available: positions,
                })
            }
            OverlapPolicy::Allow => {
                log::warn!(
                    "only {capacity} disjoint windows fit; sampling {n_examples} overlapping windows"
                );
                let mut offs = rand::seq::index::sample(&mut rng, positions, n_examples).into_vec();
                offs.sort_unstable();
                offs
            }
        }
    };

    Ok(offsets
        .into_iter()
        .map(|off| EvalExample {
            prefix: split[off..off + prefix_len].to_vec(),
            gold_suffix: split[off + prefix_len..off + window].to_vec(),
            source_offset: off,
        })
        .collect())
}
