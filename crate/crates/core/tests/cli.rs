use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use latent_align::alignment::PoolingMode;
use latent_align::checkpoint::{load_checkpoint, save_checkpoint};
use latent_align::data::load_dataset;
use latent_align::model::{Model, ModelSettings};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_latent-align"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL: [&str; 10] = [
    "--set",
    "model.embed_dim=6",
    "--set",
    "model.hidden_dim=6",
    "--set",
    "model.question_hidden_dim=4",
    "--set",
    "sgd.epochs=3",
    "--set",
    "synth.num_examples=12",
];

/// Writes small train and test files and returns their paths.
fn datasets(dir: &Path) -> (PathBuf, PathBuf) {
    let train = dir.join("train.json");
    let test = dir.join("test.json");
    for (path, seed, split) in [(&train, "1", "train"), (&test, "2", "test")] {
        let mut args = vec!["gen-synth", "--out", p(path), "--set"];
        let seed = format!("seed={seed}");
        let split = format!("synth.split={split}");
        args.extend([seed.as_str(), "--set", split.as_str()]);
        args.extend(SMALL);
        let o = run(&args);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    (train, test)
}

fn train(dir: &Path, out: &Path, extra: &[&str]) -> Output {
    let (tr, te) = (dir.join("train.json"), dir.join("test.json"));
    let train_set = format!("train_data={}", p(&tr));
    let test_set = format!("test_data={}", p(&te));
    let mut args = vec!["train", "--out", p(out), "--set", &train_set, "--set", &test_set];
    args.extend(SMALL);
    args.extend(extra);
    run(&args)
}

#[test]
fn gen_synth_writes_a_valid_deterministic_file() {
    let dir = tempfile::tempdir().unwrap();
    let (a, _) = datasets(dir.path());
    let again = dir.path().join("again.json");
    let o = run(&[
        "gen-synth",
        "--out",
        p(&again),
        "--set",
        "seed=1",
        "--set",
        "synth.split=train",
        "--set",
        "synth.num_examples=12",
    ]);
    assert!(o.status.success());
    assert_eq!(fs::read(&a).unwrap(), fs::read(&again).unwrap());
    assert_eq!(load_dataset(&a).unwrap().len(), 12);

    let default = dir.path().join("default.json");
    assert!(run(&["gen-synth", "--out", p(&default)]).status.success());
    assert!(load_dataset(&default).unwrap().validate().is_ok());
}

#[test]
fn gen_synth_rejects_too_few_steps() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&[
        "gen-synth",
        "--out",
        p(&dir.path().join("x.json")),
        "--set",
        "synth.min_steps=3",
    ]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("min_steps"), "{}", stderr(&o));
}

#[test]
fn train_writes_its_outputs_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    datasets(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = train(dir.path(), out, &[]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(stdout(&o).contains("test accuracy="));
    }
    for file in ["history.csv", "final.ckpt", "config.echo.json"] {
        assert!(a.join(file).exists(), "{file}");
    }
    let history = fs::read_to_string(a.join("history.csv")).unwrap();
    assert!(history.starts_with("epoch,mean_loss,lr\n"));
    assert_eq!(history.lines().count(), 4);
    assert_eq!(history, fs::read_to_string(b.join("history.csv")).unwrap());
    assert_eq!(
        fs::read(a.join("final.ckpt")).unwrap(),
        fs::read(b.join("final.ckpt")).unwrap()
    );

    // the echo is a complete configuration that reproduces the run
    let c = dir.path().join("c");
    let o = run(&["train", "--config", p(&a.join("config.echo.json")), "--out", p(&c)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(history, fs::read_to_string(c.join("history.csv")).unwrap());
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    datasets(dir.path());
    let full = dir.path().join("full");
    assert!(train(dir.path(), &full, &[]).status.success());
    let part = dir.path().join("part");
    assert!(train(dir.path(), &part, &["--max-epochs", "1"]).status.success());
    assert_eq!(fs::read_to_string(part.join("history.csv")).unwrap().lines().count(), 2);
    let rest = dir.path().join("rest");
    let ckpt = part.join("final.ckpt");
    let o = train(dir.path(), &rest, &["--resume", p(&ckpt)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        fs::read_to_string(full.join("history.csv")).unwrap(),
        fs::read_to_string(rest.join("history.csv")).unwrap()
    );
    assert_eq!(
        fs::read(full.join("final.ckpt")).unwrap(),
        fs::read(rest.join("final.ckpt")).unwrap()
    );
}

#[test]
fn train_names_a_missing_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&[
        "train",
        "--out",
        p(&dir.path().join("o")),
        "--set",
        "train_data=/nonexistent/train.json",
    ]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("/nonexistent/train.json"), "{}", stderr(&o));
}

#[test]
fn eval_reports_model_and_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let (_, test) = datasets(dir.path());
    let out = dir.path().join("run");
    assert!(train(dir.path(), &out, &[]).status.success());
    let ckpt = out.join("final.ckpt");

    let o = run(&["eval", "--checkpoint", p(&ckpt), "--data", p(&test), "--per-example"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let mut lines = text.lines();
    let summary = lines.next().unwrap();
    assert!(
        summary.starts_with("accuracy=") && summary.contains(" p@2="),
        "{summary}"
    );
    let records: Vec<serde_json::Value> = lines.map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 12);
    assert!(records.iter().all(|r| r["assignments"].is_array()));

    let hasty = run(&["eval", "--baseline", "hasty", "--data", p(&test), "--per-example"]);
    assert!(hasty.status.success());
    let text = stdout(&hasty);
    assert!(text.lines().skip(1).all(|l| l.contains("\"assignments\":null")));
}

#[test]
fn eval_prints_a_perfect_score_for_a_toy_checkpoint() {
    // A model trained to memorize eight examples, evaluated on them.
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("toy.json");
    let o = run(&[
        "gen-synth",
        "--out",
        p(&data),
        "--set",
        "synth.num_examples=8",
        "--set",
        "seed=3",
    ]);
    assert!(o.status.success());
    let out = dir.path().join("toy");
    let train_set = format!("train_data={}", p(&data));
    let o = run(&["train", "--out", p(&out), "--set", &train_set, "--set", "seed=3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = run(&["eval", "--checkpoint", p(&out.join("final.ckpt")), "--data", p(&data)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).trim(), "accuracy=1.0000 p@2=1.0000");
}

#[test]
fn hasty_baseline_finds_candidates_that_copy_the_question() {
    let dir = tempfile::tempdir().unwrap();
    let (_, test) = datasets(dir.path());
    let mut planted = load_dataset(&test).unwrap();
    for ex in &mut planted.examples {
        ex.candidates[ex.answer] = ex.question_items[0].tokens.clone();
    }
    let path = dir.path().join("planted.json");
    planted.save(&path).unwrap();
    let o = run(&["eval", "--baseline", "hasty", "--data", p(&path)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).trim(), "accuracy=1.0000 p@2=1.0000");
}

#[test]
fn eval_rejects_mismatched_dimensions() {
    let dir = tempfile::tempdir().unwrap();
    let (train, _) = datasets(dir.path());
    let data = load_dataset(&train).unwrap();
    let model = Model::for_dataset(ModelSettings::default(), &data, 0).unwrap();
    let ckpt = dir.path().join("m.ckpt");
    save_checkpoint(&ckpt, &model, None, None).unwrap();
    let bigger = dir.path().join("bigger.json");
    let o = run(&["gen-synth", "--out", p(&bigger), "--set", "synth.vocab_size=90"]);
    assert!(o.status.success());
    let o = run(&["eval", "--checkpoint", p(&ckpt), "--data", p(&bigger)]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("vocab"), "{}", stderr(&o));
    assert!(load_checkpoint(&ckpt).is_ok());
}

#[test]
fn align_prints_a_consistent_alignment() {
    let dir = tempfile::tempdir().unwrap();
    let (_, test) = datasets(dir.path());
    let out = dir.path().join("run");
    assert!(train(dir.path(), &out, &[]).status.success());
    let ckpt = out.join("final.ckpt");
    let id = load_dataset(&test).unwrap().examples[3].id.clone();

    for pooling in [PoolingMode::Constrained, PoolingMode::RowMax] {
        let mode = pooling.to_string();
        let o = run(&[
            "align",
            "--checkpoint",
            p(&ckpt),
            "--data",
            p(&test),
            "--example",
            &id,
            "--pooling",
            &mode,
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        let text = stdout(&o);
        let field = |name: &str| -> Vec<String> {
            let line = text.lines().find(|l| l.starts_with(&format!("{name}:"))).unwrap();
            line.split_whitespace().skip(1).map(str::to_string).collect()
        };
        let rows: Vec<Vec<String>> = text
            .lines()
            .filter(|l| l.starts_with("cand"))
            .map(|l| l.split_whitespace().skip(1).map(str::to_string).collect())
            .collect();
        assert_eq!(rows.len(), 4);
        let assignments: Vec<usize> = field("assignments").iter().map(|s| s.parse().unwrap()).collect();
        let m = field("m");
        for c in 0..4 {
            assert_eq!(m[c], rows[c][assignments[c]], "candidate {c}");
            assert_eq!(m[c].split('.').nth(1).unwrap().len(), 4);
        }
        if pooling == PoolingMode::Constrained {
            let mut distinct = assignments.clone();
            distinct.sort_unstable();
            distinct.dedup();
            assert_eq!(distinct.len(), 4);
        }
        assert!(text.contains("pick_order:") && text.contains("predicted:") && text.contains("gold:"));
    }

    let o = run(&[
        "align",
        "--checkpoint",
        p(&ckpt),
        "--data",
        p(&test),
        "--example",
        "nope",
    ]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("nope"));
}

#[test]
fn gradcheck_passes_by_default_and_catches_a_broken_gradient() {
    let o = run(&["gradcheck"]);
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    let text = stdout(&o);
    let err = text
        .split("max relative error ")
        .nth(1)
        .unwrap()
        .split_whitespace()
        .next()
        .unwrap();
    // two significant digits: d.de-XX
    assert!(
        err.len() >= 5 && err.as_bytes()[1] == b'.' && err.contains('e'),
        "{err}"
    );
    assert!(err.parse::<f64>().unwrap() < 1e-4);

    let o = run(&["gradcheck", "--inject-fault"]);
    assert_eq!(o.status.code(), Some(1), "{}", stdout(&o));
    assert!(stdout(&o).contains("FAIL"));
}

#[test]
fn help_lists_defaults_and_unknown_input_is_an_error() {
    let o = run(&["train", "--help"]);
    assert!(o.status.success());
    let text = stdout(&o);
    for needle in [
        "--config",
        "--set",
        "--out",
        "\"lr_first_half\": 0.4",
        "\"momentum\": 0.9",
        "\"epochs\": 30",
    ] {
        assert!(text.contains(needle), "{needle}");
    }
    for args in [
        &["train", "--out", "x", "--bogus"][..],
        &["eval", "--data", "x.json"][..],
        &["frobnicate"][..],
        &["gen-synth", "--out", "x.json", "--set", "synth.colour=blue"][..],
    ] {
        let o = run(args);
        assert!(!o.status.success(), "{args:?}");
        assert!(!stderr(&o).is_empty(), "{args:?}");
    }
}
