//! Deterministic synthetic corpus with English-like statistics: Zipfian word
//! frequencies, class-level Markov structure, recurring capitalized names
//! within documents, and a stock of fixed multi-word phrases.
//!
//! Used when no natural-language corpus is available locally.

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::seeded;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    /// Approximate total token count over all splits.
    pub n_tokens: usize,
    pub n_words: usize,
    pub n_classes: usize,
    pub n_names: usize,
    pub n_phrases: usize,
    /// Fractions of documents assigned to validation and test.
    pub valid_frac: f64,
    pub test_frac: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_tokens: 1_100_000,
            n_words: 6000,
            n_classes: 40,
            n_names: 800,
            n_phrases: 1500,
            valid_frac: 0.04,
            test_frac: 0.05,
            seed: 17,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthSplits {
    pub train: String,
    pub valid: String,
    pub test: String,
}

const ONSETS: &[&str] = &[
    "b", "c", "d", "f", "g", "h", "k", "l", "m", "n", "p", "r", "s", "t", "v", "w", "br", "ch",
    "cl", "dr", "gr", "pl", "sh", "st", "th", "tr",
];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ai", "ea", "ou"];
const CODAS: &[&str] = &["", "", "", "n", "r", "s", "l", "t", "nd", "st"];

fn syllable<R: Rng>(rng: &mut R) -> String {
    format!(
        "{}{}{}",
        ONSETS[rng.gen_range(0..ONSETS.len())],
        VOWELS[rng.gen_range(0..VOWELS.len())],
        CODAS[rng.gen_range(0..CODAS.len())]
    )
}

fn capitalize(w: &str) -> String {
    let mut c = w.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

fn zipf_weights(n: usize, s: f64) -> Vec<f64> {
    (0..n).map(|r| 1.0 / (r as f64 + 2.7).powf(s)).collect()
}

struct Grammar {
    words: Vec<String>,
    /// Word ids and samplers per class.
    class_words: Vec<(Vec<usize>, WeightedIndex<f64>)>,
    transitions: Vec<WeightedIndex<f64>>,
    start: WeightedIndex<f64>,
}

impl Grammar {
    fn new<R: Rng>(cfg: &SynthConfig, rng: &mut R) -> Self {
        let mut words = Vec::with_capacity(cfg.n_words);
        let mut seen = std::collections::HashSet::new();
        while words.len() < cfg.n_words {
            let n_syl = 1 + usize::from(words.len() > 60) + usize::from(rng.gen_bool(0.4));
            let w: String = (0..n_syl).map(|_| syllable(rng)).collect();
            if seen.insert(w.clone()) {
                words.push(w);
            }
        }
        let global = zipf_weights(cfg.n_words, 1.05);
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); cfg.n_classes];
        for w in 0..cfg.n_words {
            members[rng.gen_range(0..cfg.n_classes)].push(w);
        }
        let class_words = members
            .into_iter()
            .map(|ids| {
                let ids = if ids.is_empty() { vec![0] } else { ids };
                let wi = WeightedIndex::new(ids.iter().map(|&i| global[i])).expect("positive weights");
                (ids, wi)
            })
            .collect();
        let transitions = (0..cfg.n_classes)
            .map(|_| {
                let mut w = vec![0.02; cfg.n_classes];
                for _ in 0..4 {
                    w[rng.gen_range(0..cfg.n_classes)] += rng.gen_range(0.5..3.0);
                }
                WeightedIndex::new(w).expect("positive weights")
            })
            .collect();
        let start = WeightedIndex::new(zipf_weights(cfg.n_classes, 1.0)).expect("positive weights");
        Self {
            words,
            class_words,
            transitions,
            start,
        }
    }

    fn clause<R: Rng>(&self, rng: &mut R, len: usize, out: &mut Vec<String>) {
        let mut class = self.start.sample(rng);
        for _ in 0..len {
            let (ids, wi) = &self.class_words[class];
            out.push(self.words[ids[wi.sample(rng)]].clone());
            class = self.transitions[class].sample(rng);
        }
    }
}

fn generate_docs(cfg: &SynthConfig) -> Vec<String> {
    let mut rng = seeded(cfg.seed);
    let g = Grammar::new(cfg, &mut rng);

    let names: Vec<String> = (0..cfg.n_names)
        .map(|_| {
            let parts = 1 + usize::from(rng.gen_bool(0.6)) + usize::from(rng.gen_bool(0.15));
            (0..parts)
                .map(|_| capitalize(&(0..rng.gen_range(1..=2)).map(|_| syllable(&mut rng)).collect::<String>()))
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect();
    let name_pick = WeightedIndex::new(zipf_weights(cfg.n_names, 0.8)).expect("positive weights");

    let phrases: Vec<Vec<String>> = (0..cfg.n_phrases)
        .map(|_| {
            let mut p = Vec::new();
            let len = rng.gen_range(4..=10);
            g.clause(&mut rng, len, &mut p);
            p
        })
        .collect();
    let phrase_pick = WeightedIndex::new(zipf_weights(cfg.n_phrases, 0.7)).expect("positive weights");

    let mut docs = Vec::new();
    let mut total = 0usize;
    while total < cfg.n_tokens {
        let cast: Vec<&str> = (0..rng.gen_range(2..=5))
            .map(|_| names[name_pick.sample(&mut rng)].as_str())
            .collect();
        let target = rng.gen_range(200..800);
        let mut toks: Vec<String> = Vec::with_capacity(target + 32);
        while toks.len() < target {
            if rng.gen_bool(0.35) {
                let name = cast[rng.gen_range(0..cast.len())];
                toks.extend(name.split(' ').map(String::from));
            }
            if rng.gen_bool(0.3) {
                toks.extend(phrases[phrase_pick.sample(&mut rng)].iter().cloned());
            } else {
                let len = rng.gen_range(4..14);
                g.clause(&mut rng, len, &mut toks);
            }
            if rng.gen_bool(0.25) {
                toks.push(",".into());
                let len = rng.gen_range(3..8);
                g.clause(&mut rng, len, &mut toks);
            }
            toks.push(".".into());
        }
        total += toks.len();
        docs.push(toks.join(" "));
    }
    docs
}

/// Generates the corpus and splits it by document: the last documents go to
/// test, the ones before them to validation.
pub fn synth_splits(cfg: &SynthConfig) -> Result<SynthSplits> {
    if cfg.n_tokens == 0 || cfg.n_words == 0 || cfg.n_classes == 0 || cfg.n_names == 0 || cfg.n_phrases == 0 {
        return Err(Error::InvalidArgument("synthetic corpus sizes must be positive".into()));
    }
    if !(0.0..1.0).contains(&(cfg.valid_frac + cfg.test_frac)) || cfg.valid_frac < 0.0 || cfg.test_frac < 0.0 {
        return Err(Error::InvalidArgument("split fractions must be non-negative and sum below 1".into()));
    }
    let docs = generate_docs(cfg);
    let n = docs.len();
    let n_test = ((n as f64 * cfg.test_frac).round() as usize).min(n);
    let n_valid = ((n as f64 * cfg.valid_frac).round() as usize).min(n - n_test);
    let n_train = n - n_test - n_valid;
    let join = |d: &[String]| {
        let mut s = d.join("\n");
        s.push('\n');
        s
    };
    Ok(SynthSplits {
        train: join(&docs[..n_train]),
        valid: join(&docs[n_train..n_train + n_valid]),
        test: join(&docs[n_train + n_valid..]),
    })
}

/// Isotropic Gaussian blobs: `n` points of dimension `dim` drawn around
/// `n_blobs` centers uniform in `[-1, 1]^dim` with per-coordinate standard
/// deviation `spread`. Returns row-major points and each point's blob label.
pub fn gaussian_blobs(
    n: usize,
    dim: usize,
    n_blobs: usize,
    spread: f64,
    seed: u64,
) -> Result<(Vec<f32>, Vec<usize>)> {
    if n_blobs == 0 || dim == 0 || !(spread >= 0.0) {
        return Err(Error::InvalidArgument("blobs need n_blobs, dim >= 1 and spread >= 0".into()));
    }
    let mut rng = seeded(seed);
    let normal = rand_distr::Normal::new(0.0, spread)
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let centers: Vec<f64> = (0..n_blobs * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut points = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let b = i % n_blobs;
        labels.push(b);
        for j in 0..dim {
            points.push((centers[b * dim + j] + normal.sample(&mut rng)) as f32);
        }
    }
    Ok((points, labels))
}
