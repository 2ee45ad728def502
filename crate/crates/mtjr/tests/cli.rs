use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mtjr::core::data::{generate_corpus, Split, SyntheticCorpusSpec};
use mtjr::dataset;
use serde_json::json;

fn mtjr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mtjr")).args(args).env("MTJR_THREADS", "2").output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = mtjr(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SPEC: &str = r#"{"feature_dim": 6, "train_size": 48, "dev_size": 16, "test_size": 16, "seed": 3}"#;

fn model() -> serde_json::Value {
    json!({"d_model": 8, "heads": 2, "enc_layers": 2, "dec_layers": 1, "ffn_dim": 16, "feature_dim": 6})
}

fn gen(dir: &Path) -> PathBuf {
    let spec = dir.join("spec.json");
    fs::write(&spec, SPEC).unwrap();
    let data = dir.join("data");
    ok(&["gen-data", "--spec", s(&spec), "--out", s(&data)]);
    data
}

fn run_config(dir: &Path, name: &str, extra: serde_json::Value) -> PathBuf {
    let mut cfg = json!({
        "model": model(),
        "epochs": 2,
        "batch_size": 8,
        "augment": {"spec_augment": null, "speed_factors": [1.0]},
        "decode": {"beam": 2},
        "train_data": "data/train",
        "dev_data": "data/dev",
        "test_data": "data/test",
        "out_dir": format!("runs/{name}"),
    });
    for (k, v) in extra.as_object().unwrap() {
        cfg[k] = v.clone();
    }
    let path = dir.join(format!("{name}.json"));
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn gen_data_is_deterministic_and_summaries_match_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    fs::write(&spec, SPEC).unwrap();
    let a = ok(&["gen-data", "--spec", s(&spec), "--out", s(&dir.path().join("a"))]);
    let b = ok(&["gen-data", "--spec", s(&spec), "--out", s(&dir.path().join("b"))]);
    assert_eq!(a, b);
    for split in ["train", "dev", "test"] {
        let line = a.lines().find(|l| l.starts_with(split)).unwrap();
        let count: usize = line.split_whitespace().nth(1).unwrap().parse().unwrap();
        let manifest = fs::read_to_string(dir.path().join("a").join(split).join(dataset::MANIFEST)).unwrap();
        assert_eq!(count, manifest.lines().count() - 1, "{split}");
        let per_accent: Vec<usize> =
            line.split_whitespace().skip(6).step_by(2).take(8).map(|n| n.parse().unwrap()).collect();
        assert_eq!(per_accent.iter().sum::<usize>(), count);
        assert!(per_accent.iter().all(|&n| n > 0), "{split}: {line}");
        for f in [dataset::MANIFEST, dataset::FEATURES] {
            let (x, y) = (dir.path().join("a").join(split).join(f), dir.path().join("b").join(split).join(f));
            assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap());
        }
    }
}

#[test]
fn train_eval_and_finetune_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path());
    let first = run_config(dir.path(), "a", json!({}));
    let second = run_config(dir.path(), "b", json!({}));
    ok(&["train", "--config", s(&first)]);
    ok(&["train", "--config", s(&second)]);
    let runs = dir.path().join("runs");
    for f in ["checkpoint.mtjc", "metrics.csv"] {
        assert_eq!(fs::read(runs.join("a").join(f)).unwrap(), fs::read(runs.join("b").join(f)).unwrap(), "{f}");
    }
    let metrics = fs::read_to_string(runs.join("a/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next().unwrap(), "epoch,ctc,att,asr,accent,total,dev_wer,dev_acc,lr");
    assert_eq!(metrics.lines().count(), 3);

    let ckpt = runs.join("a/checkpoint.mtjc");
    let test = dir.path().join("data/test");
    let csv_a = dir.path().join("ra.csv");
    let csv_b = dir.path().join("rb.csv");
    ok(&["eval", "--checkpoint", s(&ckpt), "--data", s(&test), "--out", s(&csv_a), "--config", s(&first)]);
    ok(&["eval", "--checkpoint", s(&ckpt), "--data", s(&test), "--out", s(&csv_b), "--config", s(&first)]);
    assert_eq!(fs::read(&csv_a).unwrap(), fs::read(&csv_b).unwrap());
    let results = fs::read_to_string(&csv_a).unwrap();
    let lines: Vec<&str> = results.lines().collect();
    assert_eq!(lines[0], "system,split,wer,acc,acc_US,acc_UK,acc_CHN,acc_IND,acc_JPN,acc_KR,acc_PT,acc_RU");
    let cells: Vec<&str> = lines[1].split(',').collect();
    assert_eq!(&cells[..2], ["checkpoint", "test"]);
    assert!(cells[2..].iter().all(|c| !c.is_empty()), "{}", lines[1]);

    // Fine-tune the trained model in another mode from the command line.
    let ft = run_config(dir.path(), "ft", json!({"mode": "stjr", "epochs": 1}));
    ok(&["train", "--config", s(&ft), "--init-from", s(&ckpt)]);
    let ft2 =
        run_config(dir.path(), "ft2", json!({"mode": "stjr", "epochs": 1, "init_from": "runs/a/checkpoint.mtjc"}));
    ok(&["train", "--config", s(&ft2)]);
    assert_eq!(fs::read(runs.join("ft/checkpoint.mtjc")).unwrap(), fs::read(runs.join("ft2/checkpoint.mtjc")).unwrap());
}

#[test]
fn mono_ar_results_leave_wer_empty() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path());
    let cfg = run_config(dir.path(), "ar", json!({"mode": "mono_ar", "epochs": 1}));
    ok(&["train", "--config", s(&cfg)]);
    let csv = dir.path().join("r.csv");
    let ckpt = dir.path().join("runs/ar/checkpoint.mtjc");
    ok(&[
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&dir.path().join("data/test")),
        "--out",
        s(&csv),
        "--system",
        "S1",
    ]);
    let results = fs::read_to_string(&csv).unwrap();
    let row: Vec<&str> = results.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[0], "S1");
    assert!(row[2].is_empty());
    assert!(!row[3].is_empty());
}

#[test]
fn lambda_sweep_writes_a_row_per_value_and_zero_matches_mono_asr() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path());
    let cfg = run_config(dir.path(), "sw", json!({}));
    ok(&["sweep", "--config", s(&cfg), "--param", "lambda", "--values", "0,0.1,2"]);
    let root = dir.path().join("runs/sw/sweep-lambda");
    let sweep = fs::read_to_string(root.join("sweep.csv")).unwrap();
    let values: Vec<&str> = sweep.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(values, ["0", "0.1", "2"]);
    let curves = fs::read_to_string(root.join("curves.csv")).unwrap();
    assert_eq!(curves.lines().count(), 1 + 3 * 2);

    let asr = run_config(dir.path(), "asr", json!({"mode": "mono_asr"}));
    ok(&["train", "--config", s(&asr)]);
    let asr_metrics = fs::read_to_string(dir.path().join("runs/asr/metrics.csv")).unwrap();
    let zero_metrics = fs::read_to_string(root.join("00-0/metrics.csv")).unwrap();
    let columns = |text: &str| -> Vec<Vec<String>> {
        // epoch, ctc, att, asr, total
        text.lines()
            .skip(1)
            .map(|l| {
                let c: Vec<&str> = l.split(',').collect();
                [0, 1, 2, 3, 5].iter().map(|&i| c[i].to_string()).collect()
            })
            .collect()
    };
    assert_eq!(columns(&asr_metrics), columns(&zero_metrics));
}

#[test]
fn tap_layer_sweep_rejects_fractional_layers() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path());
    let cfg = run_config(dir.path(), "tap", json!({}));
    let out = mtjr(&["sweep", "--config", s(&cfg), "--param", "tap_layer", "--values", "1.5"]);
    assert_eq!(out.status.code(), Some(2));
    ok(&["sweep", "--config", s(&cfg), "--param", "tap_layer", "--values", "1,2"]);
    let sweep = fs::read_to_string(dir.path().join("runs/tap/sweep-tap_layer/sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 3);
}

#[test]
fn exit_codes_classify_failures() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path());

    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"train_data": "data/train", "out_dir": "o", "lamda": 1}"#).unwrap();
    assert_eq!(mtjr(&["train", "--config", s(&bad)]).status.code(), Some(2));
    let spec = dir.path().join("bad_spec.json");
    fs::write(&spec, r#"{"accent_count": 0}"#).unwrap();
    assert_eq!(mtjr(&["gen-data", "--spec", s(&spec), "--out", s(&dir.path().join("x"))]).status.code(), Some(2));

    let missing = run_config(dir.path(), "missing", json!({"train_data": "nowhere"}));
    assert_eq!(mtjr(&["train", "--config", s(&missing)]).status.code(), Some(4));
    fs::write(dir.path().join("data/dev/features.bin"), b"MTJR").unwrap();
    let corrupt = run_config(dir.path(), "corrupt", json!({}));
    assert_eq!(mtjr(&["train", "--config", s(&corrupt)]).status.code(), Some(4));

    let spec = SyntheticCorpusSpec { feature_dim: 6, train_size: 8, ..Default::default() };
    let mut poisoned = generate_corpus(&spec, Split::Train).unwrap();
    poisoned[3].features.data[5] = f32::NAN;
    dataset::save(&dir.path().join("nan"), &poisoned).unwrap();
    let nan = run_config(dir.path(), "nan", json!({"train_data": "nan", "dev_data": null}));
    let out = mtjr(&["train", "--config", s(&nan)]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("batch"));
}
