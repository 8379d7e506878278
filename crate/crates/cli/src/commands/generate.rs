use anyhow::{Context, Result};
use knnlab::corpus::{build_eval_set, OverlapPolicy};
use knnlab::decode::{GenerationLine, Mode};
use knnlab::rng::derive_seed;
use knnlab::{generate as run_generation, Retrieval};
use rayon::prelude::*;

use super::{load_model, read_split, require, write_resolved, Stores};
use crate::config::ExperimentConfig;
use crate::output::{write_atomic, DirLock};

/// Index reserved for the eval-set sampling stream; examples use `0..n`.
const EVAL_SET_STREAM: u64 = u64::MAX;

pub fn generate(cfg: &ExperimentConfig) -> Result<()> {
    let test_path = require(&cfg.paths.test, "paths.test")?;
    let _lock = DirLock::acquire(&cfg.paths.out_dir)?;
    let (vocab, params) = load_model(cfg)?;
    let modes = cfg.mode.modes();
    let stores = if modes.contains(&Mode::Retrieval) {
        Some(Stores::load(cfg, &params)?)
    } else {
        None
    };
    let retrieval = stores.as_ref().map(|s| Retrieval {
        retriever: s.retriever(),
        interp: cfg.interp,
    });

    let test = read_split(test_path, &vocab)?;
    let policy = if cfg.eval.allow_overlap {
        OverlapPolicy::Allow
    } else {
        OverlapPolicy::Forbid
    };
    let examples = build_eval_set(
        &test,
        cfg.eval.n_examples,
        cfg.eval.prefix_len,
        cfg.eval.cont_len,
        derive_seed(cfg.seed, EVAL_SET_STREAM),
        policy,
    )?;
    log::info!(
        "generating {} examples x {} mode(s) with {}",
        examples.len(),
        modes.len(),
        cfg.strategy.name()
    );

    let per_example: Vec<Vec<GenerationLine>> = examples
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let seed = derive_seed(cfg.seed, i as u64);
            modes
                .iter()
                .map(|mode| {
                    let r = match mode {
                        Mode::Baseline => None,
                        Mode::Retrieval => retrieval.as_ref(),
                    };
                    let rec = run_generation(&params, r, &ex.prefix, cfg.eval.cont_len, &cfg.strategy, seed)
                        .with_context(|| format!("example {i} ({})", mode.as_str()))?;
                    Ok(GenerationLine::from_record(
                        &rec,
                        i,
                        seed,
                        ex.source_offset,
                        &ex.gold_suffix,
                        &vocab,
                    ))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let mut out = String::new();
    for line in per_example.iter().flatten() {
        out.push_str(&serde_json::to_string(line)?);
        out.push('\n');
    }
    write_atomic(&cfg.paths.generations, out.as_bytes())?;
    write_resolved(cfg)
}
