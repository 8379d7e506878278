//! `key = value` experiment configuration with `[section]` headers.
//!
//! Keys are addressed as `section.key`. Relative paths resolve against the
//! directory holding the config file. Command-line flags override file values.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use knnlab::corpus::{DEFAULT_CONT_LEN, DEFAULT_PREFIX_LEN};
use knnlab::datastore::{DistanceMode, KMeansOptions};
use knnlab::decode::{Mode, DEFAULT_BEAM_SIZE, DEFAULT_NUCLEUS_P, DEFAULT_TOP_K};
use knnlab::reflm::TrainConfig;
use knnlab::{DecodingStrategy, InterpConfig, ModelShape};

/// A configuration problem; reported with exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "configuration error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

type CResult<T> = Result<T, ConfigError>;

fn err<T>(msg: impl Into<String>) -> CResult<T> {
    Err(ConfigError(msg.into()))
}

/// Raw `section.key → value` pairs in file order of first appearance.
pub fn parse_kv(text: &str) -> CResult<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let mut section = String::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let Some(name) = rest.strip_suffix(']') else {
                return err(format!("line {}: unterminated section header", i + 1));
            };
            section = name.trim().to_string();
            if section.is_empty() {
                return err(format!("line {}: empty section name", i + 1));
            }
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return err(format!("line {}: expected `key = value`", i + 1));
        };
        let key = k.trim();
        if key.is_empty() {
            return err(format!("line {}: empty key", i + 1));
        }
        let full = if section.is_empty() {
            key.to_string()
        } else {
            format!("{section}.{key}")
        };
        if out.insert(full.clone(), v.trim().to_string()).is_some() {
            return err(format!("line {}: duplicate key {full}", i + 1));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Paths {
    pub train: Option<PathBuf>,
    pub valid: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub model: PathBuf,
    pub vocab: PathBuf,
    pub datastore: PathBuf,
    pub index: PathBuf,
    pub generations: PathBuf,
    pub annotations: Option<PathBuf>,
    pub entities: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexSettings {
    pub enabled: bool,
    pub n_clusters: usize,
    pub n_probe: usize,
    pub kmeans: KMeansOptions,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModeSel {
    Baseline,
    Retrieval,
    Both,
}

impl ModeSel {
    pub fn modes(self) -> &'static [Mode] {
        match self {
            ModeSel::Baseline => &[Mode::Baseline],
            ModeSel::Retrieval => &[Mode::Retrieval],
            ModeSel::Both => &[Mode::Baseline, Mode::Retrieval],
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            ModeSel::Baseline => "baseline",
            ModeSel::Retrieval => "retrieval",
            ModeSel::Both => "both",
        }
    }
}

impl FromStr for ModeSel {
    type Err = ConfigError;

    fn from_str(s: &str) -> CResult<Self> {
        match s {
            "baseline" => Ok(Self::Baseline),
            "retrieval" => Ok(Self::Retrieval),
            "both" => Ok(Self::Both),
            _ => err(format!("mode must be baseline, retrieval or both, got {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BucketSel {
    Frequency,
    Annotations,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSettings {
    pub n_examples: usize,
    pub prefix_len: usize,
    pub cont_len: usize,
    pub allow_overlap: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagnoseSettings {
    pub lambda_grid: Vec<f64>,
    /// Evaluate at most this many test tokens (0 = all).
    pub max_tokens: usize,
    pub bucketing: BucketSel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub paths: Paths,
    pub min_count: u64,
    pub n_ctx: usize,
    pub d_emb: usize,
    pub d_h: usize,
    pub train: TrainConfig,
    pub interp: InterpConfig,
    pub index: IndexSettings,
    pub strategy: DecodingStrategy,
    pub mode: ModeSel,
    pub eval: EvalSettings,
    pub diagnose: DiagnoseSettings,
    pub seed: u64,
    pub threads: usize,
}

/// Values supplied on the command line; `None` keeps the file value.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub threads: Option<usize>,
    pub seed: Option<u64>,
    pub lambda: Option<f64>,
    pub tau: Option<f64>,
    pub k: Option<usize>,
    pub strategy: Option<String>,
    pub p: Option<f64>,
    pub topk: Option<usize>,
    pub beam: Option<usize>,
    pub index: Option<bool>,
    pub mode: Option<String>,
}

/// Pulls typed values out of the raw map, tracking which keys were used.
struct Reader {
    kv: BTreeMap<String, String>,
    base: PathBuf,
}

impl Reader {
    fn take(&mut self, key: &str) -> Option<String> {
        self.kv.remove(key)
    }

    fn parse<T: FromStr>(&mut self, key: &str, default: T) -> CResult<T>
    where
        T::Err: fmt::Display,
    {
        match self.take(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|e| ConfigError(format!("{key}: cannot parse {v:?}: {e}"))),
        }
    }

    /// Parses the file value (so it is still validated), then lets the
    /// override win.
    fn parse_or<T: FromStr>(&mut self, key: &str, over: Option<T>, default: T) -> CResult<T>
    where
        T::Err: fmt::Display,
    {
        let file = self.parse(key, default)?;
        Ok(over.unwrap_or(file))
    }

    fn path(&mut self, key: &str) -> Option<PathBuf> {
        self.take(key).filter(|v| !v.is_empty()).map(|v| self.base.join(v))
    }

    fn finish(self) -> CResult<()> {
        match self.kv.keys().next() {
            Some(k) => err(format!("unknown key {k}")),
            None => Ok(()),
        }
    }
}

fn parse_grid(s: &str) -> CResult<Vec<f64>> {
    s.split(',')
        .map(|x| {
            x.trim()
                .parse::<f64>()
                .map_err(|e| ConfigError(format!("diagnose.lambda_grid: {x:?}: {e}")))
        })
        .collect()
}

fn strategy_from(name: &str, p: f64, top_k: usize, beam: usize) -> CResult<DecodingStrategy> {
    let s = match name {
        "greedy" => DecodingStrategy::Greedy,
        "ancestral" => DecodingStrategy::Ancestral,
        "top_k" | "topk" => DecodingStrategy::TopK { k: top_k },
        "nucleus" => DecodingStrategy::Nucleus { p },
        "beam" => DecodingStrategy::Beam { beam_size: beam },
        other => return err(format!("decode.strategy: unknown strategy {other:?}")),
    };
    s.validate().map_err(|e| ConfigError(format!("decode: {e}")))?;
    Ok(s)
}

impl ExperimentConfig {
    /// Reads `path` (or starts from defaults when absent) and applies
    /// overrides.
    pub fn load(path: Option<&Path>, ov: &Overrides) -> CResult<Self> {
        let (kv, base) = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| ConfigError(format!("config {}: {e}", p.display())))?;
                let base = p.parent().map(Path::to_path_buf).unwrap_or_default();
                (parse_kv(&text)?, base)
            }
            None => (BTreeMap::new(), PathBuf::new()),
        };
        Self::from_map(kv, base, ov)
    }

    pub fn from_map(kv: BTreeMap<String, String>, base: PathBuf, ov: &Overrides) -> CResult<Self> {
        let mut r = Reader { kv, base };
        let out_dir = r.path("paths.out_dir").unwrap_or_else(|| r.base.join("out"));
        let in_out = |name: &str| out_dir.join(name);
        let paths = Paths {
            train: r.path("paths.train"),
            valid: r.path("paths.valid"),
            test: r.path("paths.test"),
            model: r.path("paths.model").unwrap_or_else(|| in_out("model.bin")),
            vocab: r.path("paths.vocab").unwrap_or_else(|| in_out("vocab.txt")),
            datastore: r.path("paths.datastore").unwrap_or_else(|| in_out("datastore.bin")),
            index: r.path("paths.index").unwrap_or_else(|| in_out("index.bin")),
            generations: r
                .path("paths.generations")
                .unwrap_or_else(|| in_out("generations.jsonl")),
            annotations: r.path("paths.annotations"),
            entities: r.path("paths.entities"),
            out_dir,
        };

        let defaults = TrainConfig::default();
        let train = TrainConfig {
            epochs: r.parse("train.epochs", defaults.epochs)?,
            batch_size: r.parse("train.batch_size", defaults.batch_size)?,
            learning_rate: r.parse("train.learning_rate", defaults.learning_rate)?,
            clip_norm: r.parse("train.clip_norm", defaults.clip_norm)?,
            halve_on_plateau: r.parse("train.halve_on_plateau", defaults.halve_on_plateau)?,
        };
        if train.batch_size == 0 || !(train.learning_rate > 0.0) || !(train.clip_norm > 0.0) {
            return err("train: batch_size, learning_rate and clip_norm must be positive");
        }

        let di = InterpConfig::default();
        let interp = InterpConfig {
            lambda: r.parse_or("interp.lambda", ov.lambda, di.lambda)?,
            tau: r.parse_or("interp.tau", ov.tau, di.tau)?,
            k: r.parse_or("interp.k", ov.k, di.k)?,
            distance: r.parse::<DistanceMode>("interp.distance", di.distance)?,
        };
        interp
            .validate()
            .map_err(|e| ConfigError(format!("interp: {e}")))?;

        let dk = KMeansOptions::default();
        let index = IndexSettings {
            enabled: r.parse_or("index.enabled", ov.index, false)?,
            n_clusters: r.parse("index.n_clusters", 256)?,
            n_probe: r.parse("index.n_probe", 8)?,
            kmeans: KMeansOptions {
                max_iter: r.parse("index.max_iter", dk.max_iter)?,
                train_sample: match r.parse("index.train_sample", 0usize)? {
                    0 => None,
                    m => Some(m),
                },
            },
        };
        if index.n_clusters < 1 || index.n_probe < 1 || index.n_probe > index.n_clusters {
            return err("index: need 1 <= n_probe <= n_clusters");
        }

        let file_strategy: String = r.parse("decode.strategy", "nucleus".to_string())?;
        let p = r.parse_or("decode.p", ov.p, DEFAULT_NUCLEUS_P)?;
        let top_k = r.parse_or("decode.top_k", ov.topk, DEFAULT_TOP_K)?;
        let beam = r.parse_or("decode.beam_size", ov.beam, DEFAULT_BEAM_SIZE)?;
        let strategy = strategy_from(ov.strategy.as_deref().unwrap_or(&file_strategy), p, top_k, beam)?;
        let file_mode: String = r.parse("decode.mode", "both".to_string())?;
        let mode: ModeSel = ov.mode.as_deref().unwrap_or(&file_mode).parse()?;

        let eval = EvalSettings {
            n_examples: r.parse("eval.n_examples", 200)?,
            prefix_len: r.parse("eval.prefix_len", DEFAULT_PREFIX_LEN)?,
            cont_len: r.parse("eval.cont_len", DEFAULT_CONT_LEN)?,
            allow_overlap: r.parse("eval.allow_overlap", false)?,
        };
        if eval.n_examples == 0 || eval.cont_len == 0 {
            return err("eval: n_examples and cont_len must be >= 1");
        }

        let lambda_grid = match r.take("diagnose.lambda_grid") {
            Some(s) => parse_grid(&s)?,
            None => vec![interp.lambda],
        };
        if lambda_grid.is_empty() || lambda_grid.iter().any(|l| !(0.0..=1.0).contains(l)) {
            return err("diagnose.lambda_grid: values must lie in [0, 1]");
        }
        let bucketing = match r.parse("diagnose.bucketing", "frequency".to_string())?.as_str() {
            "frequency" => BucketSel::Frequency,
            "annotations" => BucketSel::Annotations,
            other => return err(format!("diagnose.bucketing: unknown mode {other:?}")),
        };
        let diagnose = DiagnoseSettings {
            lambda_grid,
            max_tokens: r.parse("diagnose.max_tokens", 0)?,
            bucketing,
        };

        let n_ctx = r.parse("model.n_ctx", 8)?;
        let d_emb = r.parse("model.d_emb", 64)?;
        let d_h = r.parse("model.d_h", 128)?;
        let min_count = r.parse("model.min_count", 1)?;
        if n_ctx == 0 || d_emb == 0 || d_h == 0 || min_count == 0 {
            return err("model: n_ctx, d_emb, d_h and min_count must be >= 1");
        }
        let seed = r.parse_or("run.seed", ov.seed, 0)?;
        let threads = r.parse_or("run.threads", ov.threads, 0)?;
        r.finish()?;

        Ok(Self {
            paths,
            min_count,
            n_ctx,
            d_emb,
            d_h,
            train,
            interp,
            index,
            strategy,
            mode,
            eval,
            diagnose,
            seed,
            threads,
        })
    }

    pub fn shape(&self, vocab_size: usize) -> ModelShape {
        ModelShape {
            vocab_size,
            n_ctx: self.n_ctx,
            d_emb: self.d_emb,
            d_h: self.d_h,
        }
    }

    /// The fully resolved configuration in the same format it is read from.
    pub fn render(&self) -> String {
        let opt = |p: &Option<PathBuf>| p.as_ref().map_or(String::new(), |p| p.display().to_string());
        let (strategy, p, top_k, beam) = match self.strategy {
            DecodingStrategy::Greedy => ("greedy", None, None, None),
            DecodingStrategy::Ancestral => ("ancestral", None, None, None),
            DecodingStrategy::TopK { k } => ("top_k", None, Some(k), None),
            DecodingStrategy::Nucleus { p } => ("nucleus", Some(p), None, None),
            DecodingStrategy::Beam { beam_size } => ("beam", None, None, Some(beam_size)),
        };
        let mut s = String::new();
        let mut section = |name: &str, rows: Vec<(&str, String)>| {
            s.push_str(&format!("[{name}]\n"));
            for (k, v) in rows {
                s.push_str(&format!("{k} = {v}\n"));
            }
            s.push('\n');
        };
        let pa = &self.paths;
        section(
            "paths",
            vec![
                ("train", opt(&pa.train)),
                ("valid", opt(&pa.valid)),
                ("test", opt(&pa.test)),
                ("out_dir", pa.out_dir.display().to_string()),
                ("model", pa.model.display().to_string()),
                ("vocab", pa.vocab.display().to_string()),
                ("datastore", pa.datastore.display().to_string()),
                ("index", pa.index.display().to_string()),
                ("generations", pa.generations.display().to_string()),
                ("annotations", opt(&pa.annotations)),
                ("entities", opt(&pa.entities)),
            ],
        );
        section(
            "model",
            vec![
                ("n_ctx", self.n_ctx.to_string()),
                ("d_emb", self.d_emb.to_string()),
                ("d_h", self.d_h.to_string()),
                ("min_count", self.min_count.to_string()),
            ],
        );
        let t = &self.train;
        section(
            "train",
            vec![
                ("epochs", t.epochs.to_string()),
                ("batch_size", t.batch_size.to_string()),
                ("learning_rate", t.learning_rate.to_string()),
                ("clip_norm", t.clip_norm.to_string()),
                ("halve_on_plateau", t.halve_on_plateau.to_string()),
            ],
        );
        let i = &self.interp;
        section(
            "interp",
            vec![
                ("lambda", i.lambda.to_string()),
                ("tau", i.tau.to_string()),
                ("k", i.k.to_string()),
                (
                    "distance",
                    match i.distance {
                        DistanceMode::Squared => "squared",
                        DistanceMode::Plain => "plain",
                    }
                    .to_string(),
                ),
            ],
        );
        let x = &self.index;
        section(
            "index",
            vec![
                ("enabled", x.enabled.to_string()),
                ("n_clusters", x.n_clusters.to_string()),
                ("n_probe", x.n_probe.to_string()),
                ("max_iter", x.kmeans.max_iter.to_string()),
                ("train_sample", x.kmeans.train_sample.unwrap_or(0).to_string()),
            ],
        );
        let mut dec = vec![("strategy", strategy.to_string())];
        if let Some(p) = p {
            dec.push(("p", p.to_string()));
        }
        if let Some(k) = top_k {
            dec.push(("top_k", k.to_string()));
        }
        if let Some(b) = beam {
            dec.push(("beam_size", b.to_string()));
        }
        dec.push(("mode", self.mode.as_str().to_string()));
        section("decode", dec);
        let e = &self.eval;
        section(
            "eval",
            vec![
                ("n_examples", e.n_examples.to_string()),
                ("prefix_len", e.prefix_len.to_string()),
                ("cont_len", e.cont_len.to_string()),
                ("allow_overlap", e.allow_overlap.to_string()),
            ],
        );
        let d = &self.diagnose;
        section(
            "diagnose",
            vec![
                (
                    "lambda_grid",
                    d.lambda_grid.iter().map(f64::to_string).collect::<Vec<_>>().join(", "),
                ),
                ("max_tokens", d.max_tokens.to_string()),
                (
                    "bucketing",
                    match d.bucketing {
                        BucketSel::Frequency => "frequency",
                        BucketSel::Annotations => "annotations",
                    }
                    .to_string(),
                ),
            ],
        );
        section(
            "run",
            vec![("seed", self.seed.to_string()), ("threads", self.threads.to_string())],
        );
        s
    }
}
