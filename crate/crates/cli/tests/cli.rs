use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use propspan::corpus::emit_tc_predictions;
use propspan::synth::REFERENCE_SUPPORT;
use propspan::{Span, TcLabel, Technique};

/// Tiny encoder and short schedules so each run takes well under a second
/// of training.
const FAST: &[&str] = &[
    "--set", "encoder.hidden_dim=16",
    "--set", "encoder.layers=1",
    "--set", "encoder.heads=2",
    "--set", "pretrain.total_steps=20",
    "--set", "pretrain.batch_size=2",
    "--set", "si.epochs=1",
    "--set", "tc.epochs=1",
    "--set", "tc.oversample=false",
];

fn propspan(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_propspan"))
        .current_dir(dir)
        .args(args)
        .env_remove("PROPSPAN_WORKSPACE")
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = propspan(dir, args);
    assert!(
        out.status.success(),
        "propspan {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(dir: &Path, args: &[&str]) -> String {
    let out = propspan(dir, args);
    assert_eq!(out.status.code(), Some(1), "propspan {args:?} should fail");
    String::from_utf8(out.stderr).unwrap()
}

/// A synthetic corpus of `n` articles; returns its directory.
fn corpus(root: &Path, n: usize) -> PathBuf {
    let dir = root.join("corpus");
    let n = format!("synth.articles={n}");
    ok(root, &["--set", &n, "synth", "--out", "corpus"]);
    dir
}

fn with_config<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec!["--config", "propspan.toml"];
    v.extend_from_slice(FAST);
    v.extend_from_slice(args);
    v
}

fn manifest_outputs(stage: &Path) -> serde_json::Value {
    let text = fs::read_to_string(stage.join("manifest.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["outputs"].clone()
}

#[test]
fn synth_writes_a_runnable_corpus() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = corpus(tmp.path(), 12);
    assert_eq!(fs::read_dir(dir.join("articles")).unwrap().count(), 12);
    assert!(fs::read_to_string(dir.join("propspan.toml")).unwrap().contains("[synth]"));
    let err = fails(tmp.path(), &["synth", "--out", "corpus"]);
    assert!(err.contains("--force"), "{err}");
    ok(tmp.path(), &["--set", "synth.articles=3", "synth", "--out", "corpus", "--force"]);
    assert_eq!(fs::read_dir(dir.join("articles")).unwrap().count(), 3);
}

#[test]
fn prepare_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = corpus(tmp.path(), 20);
    ok(&dir, &with_config(&["prepare"]));
    let first = manifest_outputs(&dir.join("work/prepare"));
    ok(&dir, &with_config(&["prepare"]));
    assert_eq!(manifest_outputs(&dir.join("work/prepare")), first);
    for file in ["split.tsv", "vocab.txt", "segments-paragraph.jsonl", "segments-sentence.jsonl", "samples-train.jsonl", "dev-gold-si.tsv", "dev-gold-tc.tsv"] {
        assert!(first.get(file).is_some(), "{file} missing");
    }
}

#[test]
fn exact_span_needs_tc_labels_and_leaves_nothing_behind() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = corpus(tmp.path(), 5);
    let cfg = fs::read_to_string(dir.join("propspan.toml"))
        .unwrap()
        .replace("tc_labels = \"train-labels-tc.tsv\"\n", "");
    fs::write(dir.join("si-only.toml"), cfg).unwrap();
    let err = fails(&dir, &["--config", "si-only.toml", "--set", "prepare.strategies=[\"exact_span\"]", "prepare"]);
    assert!(err.contains("needs TC labels"), "{err}");
    let leftovers: Vec<_> = fs::read_dir(dir.join("work"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert!(leftovers.is_empty(), "{leftovers:?}");
}

#[test]
fn corpus_of_371_articles_splits_297_74() {
    let tmp = tempfile::tempdir().unwrap();
    let articles = tmp.path().join("articles");
    fs::create_dir(&articles).unwrap();
    for id in 1..=371 {
        fs::write(articles.join(format!("article{id}.txt")), format!("Article number {id}.\n")).unwrap();
    }
    fs::write(tmp.path().join("c.toml"), "[paths]\narticles = \"articles\"\n").unwrap();
    let out = ok(tmp.path(), &["--config", "c.toml", "prepare"]);
    assert!(out.contains("297 train, 74 dev"), "{out}");
    let split = fs::read_to_string(tmp.path().join("work/prepare/split.tsv")).unwrap();
    assert_eq!(split.lines().filter(|l| l.ends_with("\ttrain")).count(), 297);
    assert_eq!(split.lines().filter(|l| l.ends_with("\tdev")).count(), 74);
}

#[test]
fn missing_and_stale_prerequisites_name_the_command() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = corpus(tmp.path(), 10);
    let err = fails(&dir, &with_config(&["train-si"]));
    assert!(err.contains("run `propspan prepare` first"), "{err}");
    ok(&dir, &with_config(&["prepare"]));
    let err = fails(&dir, &with_config(&["train-si"]));
    assert!(err.contains("run `propspan pretrain` first"), "{err}");
    let err = fails(&dir, &with_config(&["predict", "--subtask", "si"]));
    assert!(err.contains("propspan train-si"), "{err}");
    let err = fails(&dir, &with_config(&["train-tc", "--ensemble"]));
    assert!(err.contains("propspan pretrain"), "{err}");

    fs::write(dir.join("work/prepare/vocab.txt"), "tampered\n").unwrap();
    let err = fails(&dir, &with_config(&["--set", "si.init=\"fresh\"", "train-si"]));
    assert!(err.contains("vocab.txt was modified") && err.contains("rerun `propspan prepare`"), "{err}");
}

#[test]
fn score_on_identical_files_is_100() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = corpus(tmp.path(), 8);
    let out = ok(
        &dir,
        &["score", "--subtask", "SI", "--pred", "train-labels-si.tsv", "--gold", "train-labels-si.tsv"],
    );
    assert_eq!(out, "precision=100.000\nrecall=100.000\nf1=100.000\n");
    let out = ok(
        &dir,
        &["score", "--subtask", "tc", "--pred", "train-labels-tc.tsv", "--gold", "train-labels-tc.tsv"],
    );
    assert!(out.starts_with("micro_f1=100.000\n"), "{out}");
    assert!(dir.join("work/score-tc/table.txt").is_file());
}

fn label(id: u32, t: Technique, s: usize) -> TcLabel {
    TcLabel {
        article_id: id,
        technique: t,
        span: Span::new(s, s + 3).unwrap(),
    }
}

fn table_rows(table: &str) -> Vec<(String, usize, String)> {
    table
        .lines()
        .skip(2)
        .take(Technique::COUNT)
        .map(|l| {
            let mut cols: Vec<&str> = l.split_whitespace().collect();
            let f1 = cols.pop().unwrap().to_string();
            let support = cols.pop().unwrap().parse().unwrap();
            (cols.join(" "), support, f1)
        })
        .collect()
}

#[test]
fn report_rows_follow_the_canonical_order_with_supports() {
    let tmp = tempfile::tempdir().unwrap();
    let mut gold = Vec::new();
    for (t, &n) in Technique::ALL.iter().zip(&REFERENCE_SUPPORT) {
        gold.extend((0..n).map(|i| label(1 + t.index() as u32, *t, i * 4)));
    }
    fs::write(tmp.path().join("gold.tsv"), emit_tc_predictions(&gold)).unwrap();
    fs::write(tmp.path().join("empty.tsv"), "").unwrap();
    let out = ok(tmp.path(), &["report", "--gold", "gold.tsv", "--pred", "empty.tsv"]);
    let rows = table_rows(&out);
    assert_eq!(rows.len(), 14);
    for ((row, t), &n) in rows.iter().zip(Technique::ALL).zip(&REFERENCE_SUPPORT) {
        assert_eq!(row.0, t.name());
        assert_eq!(row.1, n);
        assert_eq!(row.2, "0.000");
    }
    let saved = fs::read_to_string(tmp.path().join("work/report/report.txt")).unwrap();
    assert!(out.starts_with(&saved));
}

#[test]
fn report_reads_the_last_tc_score() {
    let tmp = tempfile::tempdir().unwrap();
    let err = fails(tmp.path(), &["report"]);
    assert!(err.contains("propspan score --subtask tc"), "{err}");
    let gold = vec![
        label(1, Technique::Doubt, 0),
        label(1, Technique::Slogans, 10),
        label(2, Technique::Doubt, 0),
        label(2, Technique::Repetition, 10),
    ];
    let mut pred = gold.clone();
    pred[3].technique = Technique::Doubt;
    fs::write(tmp.path().join("gold.tsv"), emit_tc_predictions(&gold)).unwrap();
    fs::write(tmp.path().join("pred.tsv"), emit_tc_predictions(&pred)).unwrap();
    let out = ok(tmp.path(), &["score", "--subtask", "tc", "--pred", "pred.tsv", "--gold", "gold.tsv"]);
    assert!(out.starts_with("micro_f1=75.000\n"), "{out}");
    let out = ok(tmp.path(), &["report"]);
    let rows = table_rows(&out);
    assert_eq!(rows[Technique::Repetition.index()], ("Repetition".into(), 1, "0.000".into()));
    assert_eq!(rows[Technique::Slogans.index()], ("Slogans".into(), 1, "100.000".into()));
    assert_eq!(rows[Technique::Doubt.index()], ("Doubt".into(), 2, "80.000".into()));

    fs::write(tmp.path().join("short.tsv"), emit_tc_predictions(&pred[..2])).unwrap();
    let err = fails(tmp.path(), &["score", "--subtask", "tc", "--pred", "short.tsv", "--gold", "gold.tsv"]);
    assert!(err.contains("differ"), "{err}");
}

#[test]
fn usage_and_config_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let out = propspan(tmp.path(), &["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    fs::write(tmp.path().join("bad.toml"), "[si]\nepoch = 3\n").unwrap();
    let err = fails(tmp.path(), &["--config", "bad.toml", "prepare"]);
    assert!(err.contains("schema"), "{err}");
    let err = fails(tmp.path(), &["--config", "missing.toml", "prepare"]);
    assert!(err.contains("missing.toml"), "{err}");
    let err = fails(tmp.path(), &["prepare"]);
    assert!(err.contains("articles directory"), "{err}");
}

#[test]
fn workspace_variable_and_lock() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = corpus(tmp.path(), 6);
    let elsewhere = tmp.path().join("elsewhere");
    let out = Command::new(env!("CARGO_BIN_EXE_propspan"))
        .current_dir(&dir)
        .args(["--config", "propspan.toml", "prepare"])
        .env("PROPSPAN_WORKSPACE", &elsewhere)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(elsewhere.join("prepare/manifest.json").is_file());
    assert!(!dir.join("work").exists());

    fs::create_dir_all(dir.join("work")).unwrap();
    fs::write(dir.join("work/.lock"), "1\n").unwrap();
    let err = fails(&dir, &with_config(&["prepare"]));
    assert!(err.contains("locked"), "{err}");
}

#[test]
fn small_pipeline_is_deterministic_and_keeps_span_sets() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = corpus(tmp.path(), 30);
    for cmd in [&["prepare"][..], &["pretrain"], &["train-si"], &["predict", "--subtask", "si"]] {
        ok(&dir, &with_config(cmd));
    }
    let first = fs::read(dir.join("work/predict-si/predictions.tsv")).unwrap();
    ok(&dir, &with_config(&["train-si"]));
    ok(&dir, &with_config(&["predict", "--subtask", "si"]));
    assert_eq!(fs::read(dir.join("work/predict-si/predictions.tsv")).unwrap(), first);
    let out = ok(&dir, &with_config(&["score", "--subtask", "si"]));
    assert!(out.contains("f1="), "{out}");

    let steps = fs::read_to_string(dir.join("work/pretrain/checkpoints.tsv")).unwrap();
    assert_eq!(steps.lines().count(), 6, "{steps}");
    ok(&dir, &with_config(&["train-tc", "--ensemble"]));
    ok(&dir, &with_config(&["predict", "--subtask", "tc", "--ensemble"]));
    let pred = fs::read_to_string(dir.join("work/predict-tc/predictions.tsv")).unwrap();
    let gold = fs::read_to_string(dir.join("work/prepare/dev-gold-tc.tsv")).unwrap();
    let keys = |t: &str| {
        let mut k: Vec<(String, String, String)> = t
            .lines()
            .map(|l| {
                let f: Vec<&str> = l.split('\t').collect();
                (f[0].into(), f[2].into(), f[3].into())
            })
            .collect();
        k.sort();
        k
    };
    assert_eq!(keys(&pred), keys(&gold));
    let detail = fs::read_to_string(dir.join("work/predict-tc/predictions.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(detail.lines().next().unwrap()).unwrap();
    assert_eq!(first["member_probs"].as_array().unwrap().len(), 5);
    let out = ok(&dir, &with_config(&["score", "--subtask", "tc"]));
    assert!(out.contains("micro_f1="), "{out}");
    ok(&dir, &with_config(&["report"]));

    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("work/tc-ensemble/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seeds"]["tc"], 19);
    assert_eq!(manifest["inputs"].as_object().unwrap().len(), 5);
}
