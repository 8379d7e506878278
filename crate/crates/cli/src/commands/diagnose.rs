use anyhow::{bail, Context, Result};
use knnlab::decode::Mode;
use knnlab::diagnostics::{
    bucketed_win_rate, parse_annotations, teacher_forced_trace, trajectories, Bucketing,
};
use serde::Serialize;

use super::{
    load_model, read_generations, read_split, read_text, require, require_file, write_resolved,
    Stores,
};
use crate::config::{BucketSel, ExperimentConfig};
use crate::output::{csv_bytes, write_atomic, DirLock};

#[derive(Serialize)]
struct WinRateRow {
    lambda: f64,
    n_tokens: usize,
    n_wins: usize,
    win_rate: f64,
    ppl_base: f64,
    ppl_interp: f64,
    sum_deltas: f64,
    n_delta_ln_ppl: f64,
    identity_abs_err: f64,
    identity_rel_err: f64,
}

#[derive(Serialize)]
struct BucketRow<'a> {
    bucket: &'a str,
    count: usize,
    wins: usize,
    win_rate: f64,
}

#[derive(Serialize)]
struct TrajectoryRow {
    position: usize,
    mean_entropy_ratio: Option<f64>,
    mean_jsd: Option<f64>,
    n: usize,
    n_zero_h_lm: usize,
}

#[derive(Serialize)]
struct TrajectorySummaryRow {
    n_records: usize,
    n_positions: usize,
    entropy_ratio_slope: Option<f64>,
    jsd_slope: Option<f64>,
}

pub fn diagnose(cfg: &ExperimentConfig) -> Result<()> {
    let test_path = require(&cfg.paths.test, "paths.test")?;
    let gen_path = require_file(&cfg.paths.generations, "paths.generations")?;
    let annotations_path = match cfg.diagnose.bucketing {
        BucketSel::Annotations => Some(require(&cfg.paths.annotations, "paths.annotations")?),
        BucketSel::Frequency => None,
    };
    let _lock = DirLock::acquire(&cfg.paths.out_dir)?;
    let (vocab, params) = load_model(cfg)?;
    let stores = Stores::load(cfg, &params)?;

    let mut test = read_split(test_path, &vocab)?;
    if cfg.diagnose.max_tokens > 0 {
        test.truncate(cfg.diagnose.max_tokens);
    }
    log::info!("teacher-forced pass over {} test tokens", test.len());
    // the retrieval distribution does not depend on λ, so one pass serves the grid
    let trace = teacher_forced_trace(&params, &stores.retriever(), &test, &cfg.interp)?;

    let mut rows = Vec::new();
    for &lambda in &cfg.diagnose.lambda_grid {
        let r = trace.win_rate(lambda);
        let (abs, rel) = r.decomposition_error();
        let n_delta = r.n_tokens as f64 * (r.agg_ppl_base.ln() - r.agg_ppl_interp.ln());
        log::info!(
            "lambda {lambda}: win rate {:.4}, ppl {:.3} -> {:.3}",
            r.win_rate,
            r.agg_ppl_base,
            r.agg_ppl_interp
        );
        rows.push(WinRateRow {
            lambda,
            n_tokens: r.n_tokens,
            n_wins: r.n_wins,
            win_rate: r.win_rate,
            ppl_base: r.agg_ppl_base,
            ppl_interp: r.agg_ppl_interp,
            sum_deltas: r.per_token_deltas.iter().sum(),
            n_delta_ln_ppl: n_delta,
            identity_abs_err: abs,
            identity_rel_err: rel,
        });
    }

    let at_lambda = trace.win_rate(cfg.interp.lambda);
    let labels;
    let bucketing = match annotations_path {
        Some(p) => {
            labels = parse_annotations(&read_text(p)?, test.len())
                .with_context(|| format!("reading {}", p.display()))?;
            Bucketing::Annotations(&labels)
        }
        None => Bucketing::Frequency(&vocab),
    };
    let buckets = bucketed_win_rate(&at_lambda, &test, bucketing)?;
    let bucket_rows = buckets.buckets.iter().map(|(name, b)| BucketRow {
        bucket: name,
        count: b.n_tokens,
        wins: b.n_wins,
        win_rate: b.win_rate,
    });
    let bucket_bytes = csv_bytes(bucket_rows)?;

    let records = read_generations(gen_path)?
        .into_iter()
        .filter(|l| l.mode == Mode::Retrieval)
        .map(|l| l.to_record())
        .collect::<knnlab::Result<Vec<_>>>()?;
    if records.is_empty() {
        bail!("{} has no retrieval-mode records", gen_path.display());
    }
    let traj = trajectories(&records)?;
    let traj_rows = traj.points.iter().enumerate().map(|(t, p)| TrajectoryRow {
        position: t + 1,
        mean_entropy_ratio: p.mean_entropy_ratio,
        mean_jsd: p.mean_jsd,
        n: p.n_samples,
        n_zero_h_lm: p.n_zero_h_lm,
    });
    let traj_bytes = csv_bytes(traj_rows)?;
    let summary = TrajectorySummaryRow {
        n_records: records.len(),
        n_positions: traj.points.len(),
        entropy_ratio_slope: traj.entropy_ratio_slope(),
        jsd_slope: traj.jsd_slope(),
    };
    log::info!(
        "trajectory slopes: entropy ratio {:?}, jsd {:?}",
        summary.entropy_ratio_slope,
        summary.jsd_slope
    );

    let out = &cfg.paths.out_dir;
    write_atomic(&out.join("winrate.csv"), &csv_bytes(&rows)?)?;
    write_atomic(&out.join("buckets.csv"), &bucket_bytes)?;
    write_atomic(&out.join("trajectory.csv"), &traj_bytes)?;
    write_atomic(&out.join("trajectory_summary.csv"), &csv_bytes([summary])?)?;
    write_resolved(cfg)
}
