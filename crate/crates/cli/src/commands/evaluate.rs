use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use knnlab::decode::{GenerationLine, Mode};
use knnlab::diagnostics::teacher_forced_trace_from;
use knnlab::textmetrics::{entity_f1, extract_entities, seq_rep_1, summarize_entities, EntitySet};
use knnlab::ModelParams;
use serde::{Deserialize, Serialize};

use super::{load_model, read_generations, read_text, require, write_resolved, Stores};
use crate::config::ExperimentConfig;
use crate::output::{csv_bytes, write_atomic, DirLock};

#[derive(Serialize)]
struct MetricsRow {
    example_id: usize,
    mode: &'static str,
    seed: u64,
    n_tokens: usize,
    seq_rep_1: f64,
    entity_precision: f64,
    entity_recall: f64,
    entity_f1: f64,
    entity_vacuous: bool,
    lambda: f64,
    ppl_base: f64,
    ppl_interp: f64,
}

#[derive(Serialize)]
struct SummaryRow {
    mode: &'static str,
    n: usize,
    mean_seq_rep_1: f64,
    entity_macro_f1: f64,
    entity_micro_f1: f64,
    entity_n_vacuous: usize,
    pooled_ppl_base: f64,
    pooled_ppl_interp: f64,
}

/// One line of an externally produced entity file. `mode` is absent for the
/// gold suffix.
#[derive(Deserialize)]
struct EntityLine {
    example_id: usize,
    #[serde(default)]
    mode: Option<Mode>,
    entities: Vec<String>,
}

type EntityKey = (usize, Option<Mode>);

fn read_entity_overrides(path: &Path) -> Result<BTreeMap<EntityKey, EntitySet>> {
    let mut out = BTreeMap::new();
    for (i, line) in read_text(path)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let e: EntityLine = serde_json::from_str(line)
            .with_context(|| format!("{}: malformed line {}", path.display(), i + 1))?;
        out.insert((e.example_id, e.mode), e.entities.into_iter().collect());
    }
    Ok(out)
}

struct Scored {
    row: MetricsRow,
    generated: EntitySet,
    reference: EntitySet,
    nll_base: f64,
    nll_interp: f64,
}

fn score(
    line: &GenerationLine,
    params: &ModelParams,
    stores: &Stores,
    cfg: &ExperimentConfig,
    overrides: &BTreeMap<EntityKey, EntitySet>,
) -> Result<Scored> {
    let cont = &line.continuation_ids;
    let interp = line.interp().unwrap_or(cfg.interp);
    let mut tokens = line.prefix_ids.clone();
    tokens.extend_from_slice(cont);
    let trace = teacher_forced_trace_from(params, &stores.retriever(), &tokens, line.prefix_ids.len(), &interp)?;
    let report = trace.win_rate(interp.lambda);
    let n = cont.len() as f64;

    let generated = overrides
        .get(&(line.example_id, Some(line.mode)))
        .cloned()
        .unwrap_or_else(|| extract_entities(&line.continuation_text));
    let reference = overrides
        .get(&(line.example_id, None))
        .cloned()
        .unwrap_or_else(|| extract_entities(&line.gold_suffix_text));
    let ent = entity_f1(&generated, &reference);
    Ok(Scored {
        row: MetricsRow {
            example_id: line.example_id,
            mode: line.mode.as_str(),
            seed: line.seed,
            n_tokens: cont.len(),
            seq_rep_1: seq_rep_1(cont)?,
            entity_precision: ent.precision,
            entity_recall: ent.recall,
            entity_f1: ent.f1,
            entity_vacuous: ent.vacuous,
            lambda: interp.lambda,
            ppl_base: report.agg_ppl_base,
            ppl_interp: report.agg_ppl_interp,
        },
        generated,
        reference,
        nll_base: n * report.agg_ppl_base.ln(),
        nll_interp: n * report.agg_ppl_interp.ln(),
    })
}

pub fn evaluate(cfg: &ExperimentConfig) -> Result<()> {
    let gen_path = require_generations(cfg)?;
    let _lock = DirLock::acquire(&cfg.paths.out_dir)?;
    let lines = read_generations(gen_path)?;
    let (_, params) = load_model(cfg)?;
    let stores = Stores::load(cfg, &params)?;
    let overrides = match &cfg.paths.entities {
        Some(_) => read_entity_overrides(require(&cfg.paths.entities, "paths.entities")?)?,
        None => BTreeMap::new(),
    };

    let mut scored = Vec::with_capacity(lines.len());
    for line in &lines {
        let s = score(line, &params, &stores, cfg, &overrides).with_context(|| {
            format!("example {} ({})", line.example_id, line.mode.as_str())
        })?;
        scored.push((line.mode, s));
    }

    let mut summary = Vec::new();
    for mode in [Mode::Baseline, Mode::Retrieval] {
        let group: Vec<&Scored> = scored.iter().filter(|(m, _)| *m == mode).map(|(_, s)| s).collect();
        if group.is_empty() {
            continue;
        }
        let ents = summarize_entities(group.iter().map(|s| (&s.generated, &s.reference)))?;
        let tokens: usize = group.iter().map(|s| s.row.n_tokens).sum();
        let pooled = |f: fn(&Scored) -> f64| (group.iter().map(|s| f(s)).sum::<f64>() / tokens as f64).exp();
        summary.push(SummaryRow {
            mode: mode.as_str(),
            n: group.len(),
            mean_seq_rep_1: group.iter().map(|s| s.row.seq_rep_1).sum::<f64>() / group.len() as f64,
            entity_macro_f1: ents.macro_f1,
            entity_micro_f1: ents.micro_f1,
            entity_n_vacuous: ents.n_vacuous,
            pooled_ppl_base: pooled(|s| s.nll_base),
            pooled_ppl_interp: pooled(|s| s.nll_interp),
        });
    }
    if summary.is_empty() {
        bail!("no rows to summarize");
    }

    let metrics = csv_bytes(scored.iter().map(|(_, s)| &s.row))?;
    let summary = csv_bytes(&summary)?;
    write_atomic(&cfg.paths.out_dir.join("metrics.csv"), &metrics)?;
    write_atomic(&cfg.paths.out_dir.join("metrics_summary.csv"), &summary)?;
    write_resolved(cfg)
}

fn require_generations(cfg: &ExperimentConfig) -> Result<&Path> {
    super::require_file(&cfg.paths.generations, "paths.generations")
}
