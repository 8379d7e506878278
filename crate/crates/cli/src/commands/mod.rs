mod diagnose;
mod evaluate;
mod generate;
mod train;

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use knnlab::corpus::Vocab;
use knnlab::decode::GenerationLine;
use knnlab::synth::{synth_splits, SynthConfig};
use knnlab::{encode, Datastore, IvfIndex, ModelParams, Retriever, TokenId};

use crate::config::{ConfigError, ExperimentConfig};
use crate::output::write_atomic;

pub use diagnose::diagnose;
pub use evaluate::evaluate;
pub use generate::generate;
pub use train::{build_datastore, train};

/// An input path that must be configured and present.
fn require<'a>(path: &'a Option<PathBuf>, field: &str) -> Result<&'a Path> {
    match path {
        None => Err(ConfigError(format!("{field} is required but not set")).into()),
        Some(p) => require_file(p, field),
    }
}

fn require_file<'a>(path: &'a Path, field: &str) -> Result<&'a Path> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(ConfigError(format!("{field}: {} does not exist", path.display())).into())
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn read_split(path: &Path, vocab: &Vocab) -> Result<Vec<TokenId>> {
    let ids = encode(&read_text(path)?, vocab);
    if ids.is_empty() {
        bail!("{} contains no tokens", path.display());
    }
    Ok(ids)
}

fn write_resolved(cfg: &ExperimentConfig) -> Result<()> {
    write_atomic(
        &cfg.paths.out_dir.join("run_config.resolved"),
        cfg.render().as_bytes(),
    )
}

/// Vocabulary and model, checked against each other.
fn load_model(cfg: &ExperimentConfig) -> Result<(Vocab, ModelParams)> {
    let vocab_path = require_file(&cfg.paths.vocab, "paths.vocab")?;
    let model_path = require_file(&cfg.paths.model, "paths.model")?;
    let vocab = Vocab::load(vocab_path).with_context(|| format!("loading {}", vocab_path.display()))?;
    let params =
        ModelParams::load(model_path).with_context(|| format!("loading {}", model_path.display()))?;
    if params.shape().vocab_size != vocab.len() {
        bail!(
            "model vocabulary size {} differs from vocabulary file size {}",
            params.shape().vocab_size,
            vocab.len()
        );
    }
    Ok((vocab, params))
}

/// A loaded datastore plus its index when approximate search is enabled.
struct Stores {
    store: Datastore,
    index: Option<IvfIndex>,
    n_probe: usize,
}

impl Stores {
    fn load(cfg: &ExperimentConfig, params: &ModelParams) -> Result<Self> {
        let path = require_file(&cfg.paths.datastore, "paths.datastore")?;
        let store = Datastore::load(path).with_context(|| format!("loading {}", path.display()))?;
        if store.dim() != params.shape().d_h {
            bail!(
                "datastore key dimension {} differs from model hidden size {}",
                store.dim(),
                params.shape().d_h
            );
        }
        if let Some(&bad) = store.values().iter().find(|&&v| v as usize >= params.shape().vocab_size) {
            bail!("datastore value {bad} is outside the model vocabulary");
        }
        let index = if cfg.index.enabled {
            let ipath = require_file(&cfg.paths.index, "paths.index")?;
            let mut index =
                IvfIndex::load(ipath).with_context(|| format!("loading {}", ipath.display()))?;
            if index.pack(&store).is_err() {
                bail!("index {} does not belong to datastore {}", ipath.display(), path.display());
            }
            if cfg.index.n_probe > index.n_clusters() {
                return Err(ConfigError(format!(
                    "index.n_probe {} exceeds the index's {} clusters",
                    cfg.index.n_probe,
                    index.n_clusters()
                ))
                .into());
            }
            Some(index)
        } else {
            None
        };
        Ok(Self {
            store,
            index,
            n_probe: cfg.index.n_probe,
        })
    }

    fn retriever(&self) -> Retriever<'_> {
        match &self.index {
            None => Retriever::Exact(&self.store),
            Some(index) => Retriever::Approx {
                store: &self.store,
                index,
                n_probe: self.n_probe,
            },
        }
    }
}

/// Parses a generations file; errors name the 1-based line number.
fn read_generations(path: &Path) -> Result<Vec<GenerationLine>> {
    let text = read_text(path)?;
    let mut lines = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: GenerationLine = serde_json::from_str(line)
            .with_context(|| format!("{}: malformed line {}", path.display(), i + 1))?;
        lines.push((i + 1, parsed));
    }
    if lines.is_empty() {
        bail!("{} contains no generation records", path.display());
    }
    for (n, line) in &lines {
        line.to_record()
            .with_context(|| format!("{}: inconsistent line {n}", path.display()))?;
    }
    Ok(lines.into_iter().map(|(_, l)| l).collect())
}

pub fn synth_corpus(out: &Path, n_tokens: usize, seed: u64) -> Result<()> {
    let cfg = SynthConfig {
        n_tokens,
        seed,
        ..SynthConfig::default()
    };
    let splits = synth_splits(&cfg)?;
    for (name, text) in [("train", &splits.train), ("valid", &splits.valid), ("test", &splits.test)] {
        write_atomic(&out.join(format!("{name}.txt")), text.as_bytes())?;
    }
    log::info!("wrote synthetic corpus to {}", out.display());
    Ok(())
}
