mod common;

use std::path::Path;
use std::process::{Command, Output};

fn geostream(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_geostream"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn make_synth_is_reproducible() {
    let cities = common::fixture("cities.csv");
    let args = ["make-synth", "--cities", path(&cities), "--per-city", "50", "--seed", "7"];
    let a = geostream(&args);
    let b = geostream(&args);
    assert!(a.status.success(), "{}", stderr(&a));
    assert_eq!(a.stdout, b.stdout);
    assert_eq!(stdout(&a).lines().count(), 150);
}

#[test]
fn eval_of_matching_pairs_prints_full_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let pairs = dir.path().join("pairs.csv");
    std::fs::write(&pairs, "gold,pred\n0,0\n1,1\n2,2\n1,1\n").unwrap();
    let o = geostream(&["eval", "--pairs", path(&pairs)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).lines().any(|l| l == "accuracy=1.0000"), "{}", stdout(&o));
}

#[test]
fn train_eval_serve_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cities = common::fixture("cities.csv");
    let train = dir.path().join("train.ndjson");
    let stream = dir.path().join("stream.ndjson");
    let ckpt = dir.path().join("model.ckpt");
    let out = dir.path().join("out.ndjson");

    let o = geostream(&[
        "make-synth", "--cities", path(&cities), "--per-city", "20", "--seed", "1",
        "--sink", path(&train),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = geostream(&[
        "make-synth", "--cities", path(&cities), "--per-city", "10", "--seed", "2",
        "--strip-geotag", "--sink", path(&stream),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));

    // Settings come from a config file; flags still win over it.
    let conf = dir.path().join("geostream.conf");
    std::fs::write(
        &conf,
        format!(
            "# training run\ngazetteer = {}\nbatch-size = 8\nlearning_rate = 0.01\nepochs = 99\n",
            path(&cities)
        ),
    )
    .unwrap();
    let o = geostream(&[
        "--config", path(&conf), "train", "--data", path(&train), "--checkpoint", path(&ckpt),
        "--epochs", "3", "--small",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(ckpt.exists());

    let o = geostream(&[
        "eval", "--gazetteer", path(&cities), "--checkpoint", path(&ckpt), "--data", path(&train),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("accuracy="));

    let o = geostream(&[
        "serve", "--gazetteer", path(&cities), "--checkpoint", path(&ckpt), "--batch-size", "512",
        "--flush-interval", "60", "--source", path(&stream), "--sink", path(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let err = stderr(&o);
    assert!(err.contains("lines_in=30"), "{err}");
    assert!(err.contains("predictions_out=30"), "{err}");
    assert_eq!(std::fs::read_to_string(&out).unwrap().lines().count(), 30);

    let o = geostream(&[
        "predict", "--gazetteer", path(&cities), "--checkpoint", path(&ckpt), "--source",
        path(&stream),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().count(), 30);
}

#[test]
fn grad_check_subcommand_passes() {
    let cities = common::fixture("cities.csv");
    let o = geostream(&["grad-check", "--cities", path(&cities), "--examples", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("PASS"));
}

#[test]
fn failures_exit_nonzero_with_one_line() {
    let o = geostream(&["frobnicate"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("Usage"));

    let o = geostream(&["serve", "--gazetteer", "/nonexistent/cities.csv", "--checkpoint", "/nonexistent/m.ckpt"]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error: "));

    let o = geostream(&["make-synth"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--gazetteer"));
}
