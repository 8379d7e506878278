use anyhow::{bail, Result};
use knnlab::reflm::train as train_model;
use knnlab::{build_vocab, encode, Datastore, IvfIndex, ModelParams};
use serde::Serialize;

use super::{load_model, read_split, read_text, require, write_resolved};
use crate::config::ExperimentConfig;
use crate::output::{csv_bytes, save_atomic, write_atomic, DirLock};

#[derive(Serialize)]
struct LogRow {
    epoch: usize,
    train_loss: f64,
    valid_ppl: Option<f64>,
    learning_rate: f64,
}

pub fn train(cfg: &ExperimentConfig) -> Result<()> {
    let train_path = require(&cfg.paths.train, "paths.train")?;
    let valid_path = match &cfg.paths.valid {
        Some(_) => Some(require(&cfg.paths.valid, "paths.valid")?),
        None => None,
    };
    let _lock = DirLock::acquire(&cfg.paths.out_dir)?;

    let text = read_text(train_path)?;
    let vocab = build_vocab(&text, cfg.min_count)?;
    let ids = encode(&text, &vocab);
    drop(text);
    let valid = valid_path.map(|p| read_split(p, &vocab)).transpose()?;
    log::info!("training on {} tokens, vocabulary {}", ids.len(), vocab.len());

    let outcome = train_model(&ids, valid.as_deref(), cfg.shape(vocab.len()), &cfg.train, cfg.seed)?;
    save_atomic(&cfg.paths.vocab, |p| vocab.save(p))?;
    save_atomic(&cfg.paths.model, |p| outcome.params.save(p))?;
    if ModelParams::load(&cfg.paths.model)? != outcome.params {
        bail!("{} does not reload to the trained parameters", cfg.paths.model.display());
    }
    let rows = outcome.log.iter().map(|e| LogRow {
        epoch: e.epoch,
        train_loss: e.train_loss,
        valid_ppl: e.valid_ppl,
        learning_rate: e.learning_rate,
    });
    write_atomic(&cfg.paths.out_dir.join("train_log.csv"), &csv_bytes(rows)?)?;
    write_resolved(cfg)
}

pub fn build_datastore(cfg: &ExperimentConfig) -> Result<()> {
    let train_path = require(&cfg.paths.train, "paths.train")?;
    let _lock = DirLock::acquire(&cfg.paths.out_dir)?;
    let (vocab, params) = load_model(cfg)?;
    let ids = read_split(train_path, &vocab)?;

    let store = Datastore::build(&params, &ids)?;
    log::info!("datastore: {} entries of dimension {}", store.len(), store.dim());
    save_atomic(&cfg.paths.datastore, |p| store.save(p))?;

    if cfg.index.enabled {
        let index = IvfIndex::build(&store, cfg.index.n_clusters, cfg.seed, cfg.index.kmeans)?;
        log::info!("index: {} clusters", index.n_clusters());
        save_atomic(&cfg.paths.index, |p| index.save(p))?;
    }
    write_resolved(cfg)
}
