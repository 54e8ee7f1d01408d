mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gwq::io::{encode_gwq, read_container, read_gwq, ModelBundle};
use gwq::quant::{quantize_model, QuantConfig, QuantOptions};
use gwq::refmodel::{calibration_gradients, LossKind, TinyTransformer};
use gwq::sensitivity::{aggregate_gradients, select_outliers, Scope};
use tempfile::TempDir;

fn gwq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gwq"))
        .args(args)
        .env_remove("GWQ_THREADS")
        .output()
        .expect("spawn gwq")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A short slice of the validation text, enough for a few windows.
fn small_corpus(dir: &TempDir) -> PathBuf {
    let text = std::fs::read(common::corpus_path("alice_valid")).unwrap();
    let path = dir.path().join("valid.txt");
    std::fs::write(&path, &text[..1500]).unwrap();
    path
}

fn tokens(path: &Path) -> Vec<u32> {
    std::fs::read(path).unwrap().into_iter().map(u32::from).collect()
}

fn field<'a>(line: &'a str, key: &str) -> &'a str {
    line.split_whitespace()
        .find_map(|kv| kv.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
        .unwrap_or_else(|| panic!("no `{key}` in `{line}`"))
}

fn quantize_cli(dir: &TempDir, calib: &Path, name: &str, extra: &[&str]) -> (Output, PathBuf) {
    let out = dir.path().join(name);
    let model = common::bundled_model_path();
    let mut args = vec!["quantize", "--weights", s(&model), "--calib", s(calib), "--out", s(&out)];
    args.extend_from_slice(extra);
    (gwq(&args), out)
}

#[test]
fn quantize_matches_the_library_pipeline() {
    let dir = TempDir::new().unwrap();
    let calib = small_corpus(&dir);
    let (o, out) = quantize_cli(&dir, &calib, "m.gwq", &["--bits", "3", "--fraction", "0.01"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let line = stdout(&o);
    assert_eq!(field(&line, "method"), "gradient");

    let weights = common::bundled_model();
    let model = TinyTransformer::<f32>::from_bundle(&weights).unwrap();
    let grads = calibration_gradients(&model, &tokens(&calib), 1, LossKind::default()).unwrap();
    let opts = QuantOptions::default();
    let scores = aggregate_gradients(&grads)
        .unwrap()
        .restrict(|n| weights.get(n).is_some_and(|t| opts.quantize_set.contains(t)));
    let mask = select_outliers(&scores, 0.01, Scope::PerLayer).unwrap();
    let cfg = QuantConfig::new(3, 16, 0.01).unwrap();
    let mut expected = quantize_model(&weights, Some(&mask), &cfg, &opts).unwrap();
    expected.metadata.insert("gwq.method".into(), "gradient".into());

    let written = std::fs::read(&out).unwrap();
    assert_eq!(written, encode_gwq(&expected).unwrap().0);
    assert_eq!(field(&line, "outliers"), mask.total_selected().to_string());
    assert_eq!(field(&line, "file_bytes"), written.len().to_string());
}

#[test]
fn unsupported_bits_exit_one_without_output() {
    let dir = TempDir::new().unwrap();
    let calib = small_corpus(&dir);
    let (o, out) = quantize_cli(&dir, &calib, "m.gwq", &["--bits", "7"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error: usage: "), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn missing_gradient_source_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("m.gwq");
    let model = common::bundled_model_path();
    let o = gwq(&["quantize", "--weights", s(&model), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!out.exists());
}

#[test]
fn eval_prints_library_perplexity() {
    let dir = TempDir::new().unwrap();
    let corpus = small_corpus(&dir);
    let model = common::bundled_model_path();
    let o = gwq(&["eval", "--model", s(&model), "--corpus", s(&corpus)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let line = text.lines().find(|l| l.starts_with("corpus=")).unwrap();
    let stats = TinyTransformer::<f32>::from_bundle(&common::bundled_model())
        .unwrap()
        .evaluate(&tokens(&corpus))
        .unwrap();
    assert_eq!(field(line, "corpus"), "valid");
    assert_eq!(field(line, "predictions").parse::<usize>().unwrap(), stats.predictions);
    assert_eq!(field(line, "ppl").parse::<f64>().unwrap(), stats.perplexity());
    assert_eq!(field(line, "acc").parse::<f64>().unwrap(), stats.accuracy());
}

#[test]
fn dequantized_model_evaluates_like_the_gwq_file() {
    let dir = TempDir::new().unwrap();
    let corpus = small_corpus(&dir);
    let (o, packed) = quantize_cli(&dir, &corpus, "m.gwq", &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let dense = dir.path().join("m.safetensors");
    let o = gwq(&["dequantize", "--model", s(&packed), "--out", s(&dense)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(read_container(&dense).unwrap(), read_gwq(&packed).unwrap().to_bundle());

    let ppl = |model: &Path| {
        let o = gwq(&["eval", "--model", s(model), "--corpus", s(&corpus)]);
        assert!(o.status.success(), "{}", stderr(&o));
        let text = stdout(&o);
        field(text.lines().nth(1).unwrap(), "ppl").to_string()
    };
    assert_eq!(ppl(&packed), ppl(&dense));

    let o = gwq(&["inspect", "--model", s(&packed), "--weights", s(&common::bundled_model_path())]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("format=GWQ1 bits=4 group=16"), "{}", stdout(&o));
}

#[test]
fn corrupt_files_exit_two() {
    let dir = TempDir::new().unwrap();
    let corpus = small_corpus(&dir);
    let (o, packed) = quantize_cli(&dir, &corpus, "m.gwq", &[]);
    assert!(o.status.success());
    let mut bytes = std::fs::read(&packed).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    std::fs::write(&packed, &bytes).unwrap();
    for args in [
        vec!["inspect", "--model", s(&packed)],
        vec!["eval", "--model", s(&packed), "--corpus", s(&corpus)],
    ] {
        let o = gwq(&args);
        assert_eq!(o.status.code(), Some(2), "{args:?}");
        assert!(stderr(&o).starts_with("error: data: "), "{}", stderr(&o));
        assert!(o.stdout.is_empty());
    }
}

#[test]
fn thread_count_comes_from_the_environment() {
    let bench = ["bench", "--rows", "16", "--cols", "16", "--reps", "3", "--inner", "1"];
    let o = Command::new(env!("CARGO_BIN_EXE_gwq"))
        .args(bench)
        .env("GWQ_THREADS", "3")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).lines().any(|l| l == "threads=3"), "{}", stdout(&o));

    let mut args = bench.to_vec();
    args.extend(["--threads", "0"]);
    assert_eq!(gwq(&args).status.code(), Some(1));
}

#[test]
fn seeded_commands_are_reproducible() {
    let dir = TempDir::new().unwrap();
    let corpus = small_corpus(&dir);
    let random = ["--method", "random", "--seed", "5"];
    let (a, pa) = quantize_cli(&dir, &corpus, "a.gwq", &random);
    let (b, pb) = quantize_cli(&dir, &corpus, "b.gwq", &random);
    let (c, pc) = quantize_cli(&dir, &corpus, "c.gwq", &["--method", "random", "--seed", "6"]);
    assert!(a.status.success() && b.status.success() && c.status.success());
    assert_eq!(std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap());
    assert_ne!(std::fs::read(&pa).unwrap(), std::fs::read(&pc).unwrap());

    let train = |name: &str| -> ModelBundle {
        let out = dir.path().join(name);
        let o = gwq(&[
            "train-ref", "--corpus", s(&corpus), "--out", s(&out), "--steps", "3", "--d-model", "16",
            "--heads", "2", "--layers", "1", "--seq-len", "16", "--batch", "2",
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        read_container(&out).unwrap()
    };
    assert_eq!(train("t1.safetensors"), train("t2.safetensors"));
}

#[test]
fn experiment_csv_has_a_row_per_cell() {
    let dir = TempDir::new().unwrap();
    let corpus = small_corpus(&dir);
    let csv_path = dir.path().join("report.csv");
    let model = common::bundled_model_path();
    let o = gwq(&[
        "eval", "--model", s(&model), "--corpus", s(&corpus), "--calib", s(&corpus),
        "--cell", "rtn:0:4:16", "--cell", "gradient:0.01:3:0", "--cell", "random:0.01:3:16:2",
        "--format", "csv", "--out", s(&csv_path),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read(&csv_path).unwrap(), o.stdout);
    let mut reader = csv::Reader::from_reader(&o.stdout[..]);
    let headers = reader.headers().unwrap().clone();
    let rows: Vec<csv::StringRecord> = reader.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 4);
    let col = |name: &str| headers.iter().position(|h| h == name).unwrap();
    let methods: Vec<&str> = rows.iter().map(|r| &r[col("method")]).collect();
    assert_eq!(methods, ["fp16", "rtn", "gradient", "random"]);
    for r in &rows {
        let ppl: f64 = r[col("ppl_valid")].parse().unwrap();
        assert!(ppl.is_finite() && ppl > 1.0);
    }
}
