use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use knnlab::corpus::Vocab;
use knnlab::decode::GenerationLine;
use knnlab::diagnostics::js_divergence;
use knnlab::interp::knn_distribution;
use knnlab::textmetrics::seq_rep_1;
use knnlab::{encode, Datastore, InterpConfig, IvfIndex, ModelParams};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_knnlab"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn knnlab")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "knnlab failed: {}", stderr(&o));
    o
}

/// Corpus, trained model and datastore shared by the tests that only read
/// them. Each test writes into its own output directory.
struct Base {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Base {
    fn data(&self, name: &str) -> PathBuf {
        self.root.join("data").join(name)
    }
    fn art(&self, name: &str) -> PathBuf {
        self.root.join("art").join(name)
    }
}

const MODEL: &str = "[model]\nn_ctx = 3\nd_emb = 8\nd_h = 16\nmin_count = 2\n[train]\nepochs = 1\n";

fn base() -> &'static Base {
    static BASE: OnceLock<Base> = OnceLock::new();
    BASE.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let data = root.join("data");
        ok(run(&["synth-corpus", "--out", data.to_str().unwrap(), "--tokens", "30000", "--seed", "4"]));
        let b = Base { _dir: dir, root };
        let cfg = write_config(&b, &b.root.join("art"), "[index]\nn_clusters = 16\nn_probe = 4\n");
        ok(run(&["--config", cfg.to_str().unwrap(), "--threads", "1", "train"]));
        ok(run(&["--config", cfg.to_str().unwrap(), "--threads", "1", "--index", "build-datastore"]));
        b
    })
}

/// Config whose inputs are the shared corpus and artifacts and whose
/// outputs go to `out`.
fn write_config(b: &Base, out: &Path, extra: &str) -> PathBuf {
    fs::create_dir_all(out).unwrap();
    let art = b.root.join("art");
    let text = format!(
        "[paths]\ntrain = {}\nvalid = {}\ntest = {}\nout_dir = {}\nmodel = {}\nvocab = {}\ndatastore = {}\nindex = {}\n{MODEL}[eval]\nn_examples = 3\nprefix_len = 12\ncont_len = 20\n[interp]\nk = 64\n{extra}",
        b.data("train.txt").display(),
        b.data("valid.txt").display(),
        b.data("test.txt").display(),
        out.display(),
        art.join("model.bin").display(),
        art.join("vocab.txt").display(),
        art.join("datastore.bin").display(),
        art.join("index.bin").display(),
    );
    // later sections may repeat earlier ones; merge by writing extra keys last
    let path = out.join("exp.conf");
    fs::write(&path, merge_sections(&text)).unwrap();
    path
}

/// Folds repeated `[section]` blocks together so that `extra` can add keys
/// to sections already present.
fn merge_sections(text: &str) -> String {
    let mut order: Vec<String> = Vec::new();
    let mut body: std::collections::HashMap<String, Vec<String>> = Default::default();
    let mut cur = String::new();
    for line in text.lines() {
        if line.starts_with('[') {
            cur = line.to_string();
            if !order.contains(&cur) {
                order.push(cur.clone());
            }
        } else if !line.trim().is_empty() {
            body.entry(cur.clone()).or_default().push(line.to_string());
        }
    }
    let mut out = String::new();
    for s in order {
        out.push_str(&s);
        out.push('\n');
        for l in &body[&s] {
            out.push_str(l);
            out.push('\n');
        }
    }
    out
}

fn tempdir() -> tempfile::TempDir {
    tempfile::tempdir().unwrap()
}

fn csv_rows(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap().split(',').map(String::from).collect();
    let rows = lines.map(|l| l.split(',').map(String::from).collect()).collect();
    (header, rows)
}

fn column<'a>(header: &[String], row: &'a [String], name: &str) -> &'a str {
    let i = header.iter().position(|h| h == name).unwrap_or_else(|| panic!("no column {name}"));
    &row[i]
}

#[test]
fn missing_corpus_path_is_a_config_error_naming_the_field() {
    let d = tempdir();
    let cfg = d.path().join("c.conf");
    fs::write(&cfg, format!("[paths]\nout_dir = {}\n", d.path().display())).unwrap();
    let o = run(&["--config", cfg.to_str().unwrap(), "train"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("paths.train"), "{}", stderr(&o));

    fs::write(&cfg, "[paths]\ntrain = nowhere.txt\n").unwrap();
    let o = run(&["--config", cfg.to_str().unwrap(), "train"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("paths.train"));
}

#[test]
fn bad_configuration_values_exit_with_two() {
    let d = tempdir();
    let cfg = d.path().join("c.conf");
    fs::write(&cfg, "[interp]\nlamda = 0.3\n").unwrap();
    assert_eq!(run(&["--config", cfg.to_str().unwrap(), "train"]).status.code(), Some(2));
    fs::write(&cfg, "").unwrap();
    for args in [
        vec!["--lambda", "1.5"],
        vec!["--tau", "0"],
        vec!["--strategy", "sideways"],
        vec!["--mode", "all"],
        vec!["--p", "0"],
    ] {
        let mut full = vec!["--config", cfg.to_str().unwrap()];
        full.extend(args.iter().copied());
        full.push("generate");
        assert_eq!(run(&full).status.code(), Some(2), "{args:?}");
    }
    // unparsable flag values are rejected by the argument parser, also with 2
    assert_eq!(run(&["--k", "many", "train"]).status.code(), Some(2));
}

#[test]
fn train_is_byte_identical_and_model_round_trips() {
    let b = base();
    let (d1, d2) = (tempdir(), tempdir());
    for d in [&d1, &d2] {
        let mut cfg = write_config(b, d.path(), "");
        // outputs land in the test's own directory
        let text = fs::read_to_string(&cfg).unwrap();
        let own: String = text
            .lines()
            .filter(|l| !l.starts_with("model =") && !l.starts_with("vocab ="))
            .map(|l| format!("{l}\n"))
            .collect();
        cfg = d.path().join("own.conf");
        fs::write(&cfg, own).unwrap();
        ok(run(&["--config", cfg.to_str().unwrap(), "--threads", "1", "--seed", "9", "train"]));
    }
    for f in ["model.bin", "vocab.txt", "train_log.csv", "run_config.resolved"] {
        let a = fs::read(d1.path().join(f)).unwrap();
        let c = fs::read(d2.path().join(f)).unwrap();
        if f == "run_config.resolved" {
            // identical apart from the output directory
            let a = String::from_utf8(a).unwrap().replace(&d1.path().display().to_string(), "OUT");
            let c = String::from_utf8(c).unwrap().replace(&d2.path().display().to_string(), "OUT");
            assert_eq!(a, c);
        } else {
            assert_eq!(a, c, "{f} differs between runs");
        }
    }
    let p = ModelParams::load(d1.path().join("model.bin")).unwrap();
    let v = Vocab::load(d1.path().join("vocab.txt")).unwrap();
    assert_eq!(p.shape().vocab_size, v.len());
    assert_eq!((p.shape().n_ctx, p.shape().d_emb, p.shape().d_h), (3, 8, 16));
    let log = fs::read_to_string(d1.path().join("train_log.csv")).unwrap();
    assert!(log.starts_with("epoch,train_loss,valid_ppl,learning_rate\n"));
    assert_eq!(log.lines().count(), 2);
}

#[test]
fn datastore_has_one_entry_per_token_and_rebuilds_bitwise() {
    let b = base();
    let vocab = Vocab::load(b.art("vocab.txt")).unwrap();
    let train = encode(&fs::read_to_string(b.data("train.txt")).unwrap(), &vocab);
    let store = Datastore::load(b.art("datastore.bin")).unwrap();
    assert_eq!(store.len(), train.len());
    let index = IvfIndex::load(b.art("index.bin")).unwrap();
    assert_eq!(index.n_clusters(), 16);
    assert_eq!(index.entry_count(), store.len());

    let d = tempdir();
    let cfg = write_config(b, d.path(), "[index]\nn_clusters = 16\nn_probe = 4\n");
    let text = fs::read_to_string(&cfg).unwrap();
    let text = text
        .replace(&b.art("datastore.bin").display().to_string(), &d.path().join("ds.bin").display().to_string())
        .replace(&b.art("index.bin").display().to_string(), &d.path().join("ix.bin").display().to_string());
    fs::write(&cfg, text).unwrap();
    ok(run(&["--config", cfg.to_str().unwrap(), "--threads", "1", "--index", "build-datastore"]));
    assert_eq!(fs::read(d.path().join("ds.bin")).unwrap(), fs::read(b.art("datastore.bin")).unwrap());
    assert_eq!(fs::read(d.path().join("ix.bin")).unwrap(), fs::read(b.art("index.bin")).unwrap());
}

#[test]
fn datastore_rejects_vocabulary_mismatch() {
    let b = base();
    let d = tempdir();
    let cfg = write_config(b, d.path(), "");
    // a vocabulary with one token fewer than the model expects
    let vocab = fs::read_to_string(b.art("vocab.txt")).unwrap();
    let short: String = vocab.lines().take(vocab.lines().count() - 1).map(|l| format!("{l}\n")).collect();
    let vpath = d.path().join("short_vocab.txt");
    fs::write(&vpath, short).unwrap();
    let text = fs::read_to_string(&cfg)
        .unwrap()
        .replace(&b.art("vocab.txt").display().to_string(), &vpath.display().to_string())
        .replace(&b.art("datastore.bin").display().to_string(), &d.path().join("ds.bin").display().to_string());
    fs::write(&cfg, text).unwrap();
    let o = run(&["--config", cfg.to_str().unwrap(), "build-datastore"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("vocabulary"), "{}", stderr(&o));
    assert!(!d.path().join("ds.bin").exists());
}

fn read_lines(path: &Path) -> Vec<GenerationLine> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn generate_line_counts_and_lambda_zero_identity() {
    let b = base();
    let d = tempdir();
    let cfg = write_config(b, d.path(), "");
    let c = cfg.to_str().unwrap();
    let gens = d.path().join("generations.jsonl");

    ok(run(&["--config", c, "--threads", "1", "--mode", "baseline", "generate"]));
    assert_eq!(fs::read_to_string(&gens).unwrap().lines().count(), 3);

    ok(run(&["--config", c, "--threads", "1", "--lambda", "0", "--mode", "both", "generate"]));
    let lines = read_lines(&gens);
    assert_eq!(lines.len(), 6);
    for pair in lines.chunks(2) {
        assert_eq!(pair[0].example_id, pair[1].example_id);
        assert_eq!(pair[0].seed, pair[1].seed);
        assert_eq!(pair[0].continuation_ids, pair[1].continuation_ids);
        assert_eq!(pair[0].continuation_ids.len(), 20);
        assert_eq!(pair[0].prefix_ids.len(), 12);
        assert_eq!(pair[0].gold_suffix_ids.len(), 20);
    }
    assert!(lines[0].per_step.h_knn.is_none());
    assert_eq!(lines[1].lambda, Some(0.0));
}

#[test]
fn generate_is_byte_identical_across_runs_and_thread_counts() {
    let b = base();
    let d = tempdir();
    let cfg = write_config(b, d.path(), "[index]\nn_clusters = 16\nn_probe = 4\n");
    let c = cfg.to_str().unwrap();
    let gens = d.path().join("generations.jsonl");
    let mut outputs = Vec::new();
    for threads in ["1", "1", "3"] {
        ok(run(&["--config", c, "--threads", threads, "--index", "generate"]));
        outputs.push(fs::read(&gens).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
    assert_eq!(outputs[0], outputs[2]);
    for strategy in ["greedy", "top_k", "beam", "ancestral"] {
        ok(run(&["--config", c, "--threads", "1", "--strategy", strategy, "--beam", "2", "generate"]));
        let a = fs::read(&gens).unwrap();
        ok(run(&["--config", c, "--threads", "1", "--strategy", strategy, "--beam", "2", "generate"]));
        assert_eq!(a, fs::read(&gens).unwrap(), "{strategy}");
    }
}

#[test]
fn evaluate_schema_and_repetition_column() {
    let b = base();
    let d = tempdir();
    let cfg = write_config(b, d.path(), "");
    let c = cfg.to_str().unwrap();
    ok(run(&["--config", c, "--threads", "1", "generate"]));
    ok(run(&["--config", c, "--threads", "1", "evaluate"]));
    let (header, rows) = csv_rows(&d.path().join("metrics.csv"));
    for col in ["example_id", "mode", "seq_rep_1", "entity_f1", "ppl_base", "ppl_interp"] {
        assert!(header.iter().any(|h| h == col), "missing {col}");
    }
    let lines = read_lines(&d.path().join("generations.jsonl"));
    assert_eq!(rows.len(), lines.len());
    for (row, line) in rows.iter().zip(&lines) {
        let got: f64 = column(&header, row, "seq_rep_1").parse().unwrap();
        assert_eq!(got, seq_rep_1(&line.continuation_ids).unwrap());
        assert_eq!(column(&header, row, "mode"), line.mode.as_str());
        let ppl: f64 = column(&header, row, "ppl_interp").parse().unwrap();
        assert!(ppl.is_finite() && ppl >= 1.0);
    }
    let (sh, srows) = csv_rows(&d.path().join("metrics_summary.csv"));
    assert_eq!(srows.len(), 2);
    assert!(sh.iter().any(|h| h == "entity_micro_f1"));
}

#[test]
fn evaluate_rejects_empty_and_malformed_input_without_partial_output() {
    let b = base();
    let d = tempdir();
    let cfg = write_config(b, d.path(), "");
    let c = cfg.to_str().unwrap();
    let gens = d.path().join("generations.jsonl");

    fs::write(&gens, "").unwrap();
    let o = run(&["--config", c, "evaluate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!d.path().join("metrics.csv").exists());

    ok(run(&["--config", c, "--threads", "1", "generate"]));
    let mut text = fs::read_to_string(&gens).unwrap();
    text.push_str("{\"example_id\": oops}\n");
    fs::write(&gens, text).unwrap();
    let o = run(&["--config", c, "evaluate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("line 7"), "{}", stderr(&o));
    assert!(!d.path().join("metrics.csv").exists());
}

#[test]
fn diagnose_reports_and_independent_identity_check() {
    let b = base();
    let d = tempdir();
    let cfg = write_config(
        b,
        d.path(),
        "[diagnose]\nlambda_grid = 0, 0.1, 0.25, 0.5\nmax_tokens = 600\n",
    );
    let c = cfg.to_str().unwrap();
    ok(run(&["--config", c, "--threads", "1", "generate"]));
    ok(run(&["--config", c, "--threads", "1", "diagnose"]));

    let (th, trows) = csv_rows(&d.path().join("trajectory.csv"));
    assert_eq!(th, ["position", "mean_entropy_ratio", "mean_jsd", "n", "n_zero_h_lm"]);
    assert_eq!(trows.len(), 20);

    // gold probabilities recomputed here, from the library primitives
    let vocab = Vocab::load(b.art("vocab.txt")).unwrap();
    let params = ModelParams::load(b.art("model.bin")).unwrap();
    let store = Datastore::load(b.art("datastore.bin")).unwrap();
    let test = encode(&fs::read_to_string(b.data("test.txt")).unwrap(), &vocab);
    let test = &test[..600];
    let interp = InterpConfig {
        k: 64,
        ..InterpConfig::default()
    };
    let mut gold = Vec::new();
    for t in 0..test.len() {
        let w = knnlab::corpus::context_window(test, t, 3);
        let (q, p_lm) = params.forward(&w).unwrap();
        let nbrs = store.query_exact(q.as_slice(), 64, interp.distance).unwrap();
        let p_knn = knn_distribution(&nbrs, interp.tau, vocab.len()).unwrap();
        assert!(js_divergence(&p_knn, &p_lm).unwrap() <= std::f64::consts::LN_2);
        gold.push((p_lm.prob(test[t]), p_knn.prob(test[t])));
    }

    let (wh, wrows) = csv_rows(&d.path().join("winrate.csv"));
    assert_eq!(wrows.len(), 4);
    for row in &wrows {
        let lambda: f64 = column(&wh, row, "lambda").parse().unwrap();
        let (mut sum, mut nll_b, mut nll_i, mut wins) = (0.0, 0.0, 0.0, 0usize);
        for &(lm, knn) in &gold {
            let mixed = lambda * knn + (1.0 - lambda) * lm;
            sum += mixed.ln() - lm.ln();
            nll_b -= lm.ln();
            nll_i -= mixed.ln();
            wins += usize::from(mixed > lm);
        }
        let n = gold.len() as f64;
        let rhs = n * ((nll_b / n).exp().ln() - (nll_i / n).exp().ln());
        if sum != 0.0 {
            assert!(((sum - rhs) / sum).abs() < 1e-6);
        }
        let got: f64 = column(&wh, row, "sum_deltas").parse().unwrap();
        assert!((got - sum).abs() <= 1e-9 * n);
        let rel: f64 = column(&wh, row, "identity_rel_err").parse().unwrap();
        assert!(rel < 1e-6);
        assert_eq!(column(&wh, row, "n_wins").parse::<usize>().unwrap(), wins);
        if lambda == 0.0 {
            assert_eq!(column(&wh, row, "win_rate"), "0.0");
        }
    }

    let (bh, brows) = csv_rows(&d.path().join("buckets.csv"));
    assert_eq!(bh, ["bucket", "count", "wins", "win_rate"]);
    let total: usize = brows.iter().map(|r| r[1].parse::<usize>().unwrap()).sum();
    assert_eq!(total, 600);
    assert!(d.path().join("trajectory_summary.csv").exists());
}

#[test]
fn diagnose_with_external_annotations() {
    let b = base();
    let d = tempdir();
    let ann = d.path().join("ann.txt");
    let labels: String = (0..300)
        .map(|i| format!("{i}\t{}\n", if i % 3 == 0 { "noun" } else { "other" }))
        .collect();
    fs::write(&ann, labels).unwrap();
    let cfg = write_config(
        b,
        d.path(),
        &format!("[paths]\nannotations = {}\n[diagnose]\nmax_tokens = 300\nbucketing = annotations\n", ann.display()),
    );
    let c = cfg.to_str().unwrap();
    ok(run(&["--config", c, "--threads", "1", "generate"]));
    ok(run(&["--config", c, "--threads", "1", "diagnose"]));
    let (_, rows) = csv_rows(&d.path().join("buckets.csv"));
    let names: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(names, ["noun", "other"]);
    assert_eq!(rows[0][1], "100");

    // wrong number of labels is reported
    fs::write(&ann, "0\tnoun\n").unwrap();
    assert_eq!(run(&["--config", c, "diagnose"]).status.code(), Some(1));
}

#[test]
fn locked_output_directory_is_refused() {
    let b = base();
    let d = tempdir();
    let cfg = write_config(b, d.path(), "");
    fs::write(d.path().join(".lock"), "123\n").unwrap();
    let o = run(&["--config", cfg.to_str().unwrap(), "generate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("locked"));
    assert!(!d.path().join("generations.jsonl").exists());
}
