use std::path::Path;
use std::process::{Command, Output};

fn embedmap(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_embedmap")).current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = embedmap(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn small_pipeline(dir: &Path, extra: &[&str]) {
    let with = |args: &[&'static str]| -> Vec<&str> { extra.iter().chain(args).copied().collect() };
    ok(dir, &with(&["synth", "--n", "120", "--d-in", "6", "--d-out", "10", "--seed", "4"]));
    ok(dir, &with(&["split", "--pairs", "pairs.v2vp", "--seed", "5"]));
    ok(
        dir,
        &with(&[
            "train",
            "--pairs",
            "pairs.v2vp",
            "--split",
            "split.txt",
            "--epochs",
            "3",
            "--arch",
            "16,16",
            "--seed",
            "6",
        ]),
    );
    ok(
        dir,
        &with(&[
            "eval",
            "--model",
            "model.v2vm",
            "--pairs",
            "pairs.v2vp",
            "--split",
            "split.txt",
            "--report",
            "eval.json",
        ]),
    );
}

#[test]
fn synth_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["synth", "--n", "100", "--d-in", "8", "--d-out", "16", "--seed", "7"]);
    let first = std::fs::read(dir.path().join("pairs.v2vp")).unwrap();
    ok(dir.path(), &["synth", "--n", "100", "--d-in", "8", "--d-out", "16", "--seed", "7"]);
    assert_eq!(first, std::fs::read(dir.path().join("pairs.v2vp")).unwrap());
}

#[test]
fn every_run_prints_the_seed() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["synth", "--n", "10", "--d-in", "2", "--d-out", "3", "--seed", "99"]);
    assert!(out.starts_with("seed: 99\n"), "{out}");
}

#[test]
fn zero_epochs_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = embedmap(dir.path(), &["train", "--pairs", "p", "--split", "s", "--epochs", "0", "--seed", "1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn unknown_flags_and_missing_seeds_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let bogus = embedmap(dir.path(), &["synth", "--n", "5", "--seed", "1", "--bogus"]);
    assert_eq!(bogus.status.code(), Some(1));
    let seedless = embedmap(dir.path(), &["synth", "--n", "5"]);
    assert_eq!(seedless.status.code(), Some(1));
    let bad_frac = embedmap(dir.path(), &["synth", "--n", "20", "--d-in", "2", "--d-out", "2", "--seed", "1"]);
    assert!(bad_frac.status.success());
    let split = embedmap(dir.path(), &["split", "--pairs", "pairs.v2vp", "--test-frac", "1.5", "--seed", "1"]);
    assert_eq!(split.status.code(), Some(1));
}

#[test]
fn help_documents_every_flag() {
    let dir = tempfile::tempdir().unwrap();
    let flags: &[(&str, &[&str])] = &[
        ("synth", &["--n", "--d-in", "--d-out", "--seed", "--noise", "--map", "--out"]),
        ("ingest", &["--csv", "--max-tokens", "--sample", "--seed"]),
        ("split", &["--pairs", "--test-frac", "--val-frac", "--seed", "--out"]),
        (
            "train",
            &[
                "--pairs",
                "--split",
                "--epochs",
                "--batch",
                "--lr",
                "--dropout",
                "--arch",
                "--seed",
                "--out",
                "--report",
            ],
        ),
        ("eval", &["--model", "--pairs", "--split", "--report"]),
        ("predict", &["--model", "--in", "--out"]),
        ("search", &["--store", "--query-vector", "--k"]),
        ("compare", &["--store", "--query-translated", "--query-true", "--k"]),
        ("inspect", &["--model"]),
    ];
    for (cmd, expected) in flags {
        let out = embedmap(dir.path(), &[cmd, "--help"]);
        assert_eq!(out.status.code(), Some(0), "{cmd} --help");
        let text = String::from_utf8_lossy(&out.stdout);
        for flag in *expected {
            assert!(text.contains(flag), "{cmd} --help does not mention {flag}");
        }
    }
}

#[test]
fn corrupt_inputs_exit_with_data_error() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["synth", "--n", "20", "--d-in", "3", "--d-out", "4", "--seed", "1"]);
    let path = dir.path().join("pairs.v2vp");
    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    std::fs::write(&path, &bytes).unwrap();
    let out = embedmap(dir.path(), &["split", "--pairs", "pairs.v2vp", "--seed", "1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("checksum"));
    let missing = embedmap(dir.path(), &["inspect", "--model", "absent.v2vm"]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn diverging_training_exits_3_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["synth", "--n", "60", "--d-in", "4", "--d-out", "5", "--seed", "2"]);
    ok(dir.path(), &["split", "--pairs", "pairs.v2vp", "--seed", "2"]);
    let out = embedmap(
        dir.path(),
        &["train", "--pairs", "pairs.v2vp", "--split", "split.txt", "--epochs", "5", "--lr", "1e300", "--seed", "1"],
    );
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!dir.path().join("model.v2vm").exists());
    assert!(!dir.path().join("report.json").exists());
}

#[test]
fn pipeline_is_reproducible_and_strategy_independent() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    small_pipeline(a.path(), &[]);
    small_pipeline(b.path(), &["--sequential"]);
    for f in ["pairs.v2vp", "split.txt", "model.v2vm", "report.json", "report.csv", "eval.json"] {
        let (x, y) = (std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap());
        if f == "report.csv" {
            // wall-clock seconds are the one intentionally volatile column
            let strip = |s: &[u8]| -> Vec<String> {
                String::from_utf8_lossy(s).lines().map(|l| l.rsplit_once(',').unwrap().0.to_string()).collect()
            };
            assert_eq!(strip(&x), strip(&y));
        } else {
            assert_eq!(x, y, "{f} differs");
        }
    }
}

#[test]
fn predict_search_compare_and_inspect() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_pipeline(d, &[]);
    ok(d, &["predict", "--model", "model.v2vm", "--in", "pairs.v2vp", "--out", "pred.v2vp"]);
    let search = ok(
        d,
        &[
            "search",
            "--store",
            "pairs.v2vp",
            "--query-vector",
            "pairs.v2vp",
            "--query-id",
            "3",
            "--k",
            "1",
            "--out",
            "hits.json",
        ],
    );
    // a true query finds itself first
    assert!(search.contains("1. id 3 "), "{search}");
    let hits: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("hits.json")).unwrap()).unwrap();
    assert_eq!(hits[0]["query"], 3);
    assert_eq!(hits[0]["hits"][0]["id"], 3);

    let cmp = ok(
        d,
        &[
            "compare",
            "--store",
            "pairs.v2vp",
            "--split",
            "split.txt",
            "--section",
            "train",
            "--query-translated",
            "pairs.v2vp",
            "--query-true",
            "pairs.v2vp",
            "--k",
            "5",
        ],
    );
    assert!(cmp.contains("mean overlap@5 over 120 queries: 1.0000"), "{cmp}");
    ok(
        d,
        &[
            "compare",
            "--store",
            "pairs.v2vp",
            "--query-translated",
            "pred.v2vp",
            "--query-true",
            "pairs.v2vp",
            "--report",
            "cmp.json",
        ],
    );
    assert!(d.join("cmp.json").exists());

    let inspect = ok(d, &["inspect", "--model", "model.v2vm"]);
    let size = std::fs::metadata(d.join("model.v2vm")).unwrap().len();
    assert!(inspect.contains(&format!("size bytes: {size}")), "{inspect}");
    assert!(inspect.contains("parameters: 554"), "{inspect}");
}

#[test]
fn ingest_filters_and_samples() {
    let dir = tempfile::tempdir().unwrap();
    let mut csv = String::from(
        "Id,ProductId,UserId,ProfileName,HelpfulnessNumerator,HelpfulnessDenominator,Score,Time,Summary,Text\n",
    );
    for i in 1..=30 {
        let body = if i == 7 { "word ".repeat(7000) } else { format!("review number {i}") };
        csv.push_str(&format!("{i},P{i},U{i},name,0,0,5,0,Title {i},{body}\n"));
    }
    csv.push_str("oops,short\n");
    std::fs::write(dir.path().join("reviews.csv"), csv).unwrap();
    let out = ok(
        dir.path(),
        &["ingest", "--csv", "reviews.csv", "--max-tokens", "8000", "--sample", "10", "--seed", "3", "--out", "s.csv"],
    );
    assert!(out.contains("parsed 30 reviews, skipped 1 malformed rows"), "{out}");
    assert!(out.contains("29 reviews within 8000 tokens (1 dropped)"), "{out}");
    assert!(out.contains("sampled 10 reviews"), "{out}");
    let again = ok(dir.path(), &["ingest", "--csv", "reviews.csv", "--sample", "10", "--seed", "3", "--out", "t.csv"]);
    assert_eq!(out.replace("s.csv", "t.csv"), again);
    assert_eq!(std::fs::read(dir.path().join("s.csv")).unwrap(), std::fs::read(dir.path().join("t.csv")).unwrap());
    let too_many = embedmap(dir.path(), &["ingest", "--csv", "reviews.csv", "--sample", "100", "--seed", "3"]);
    assert_eq!(too_many.status.code(), Some(2));
}
