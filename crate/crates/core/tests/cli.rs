use std::path::{Path, PathBuf};

use sflow::cli::run_cli;

fn run(args: &[&str]) -> i32 {
    run_cli(std::iter::once("sflow").chain(args.iter().copied()))
}

fn only_run_dir(root: &Path) -> PathBuf {
    let dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .unwrap()
        .flatten()
        .map(|e| e.path())
        .collect();
    assert_eq!(
        dirs.len(),
        1,
        "expected one run directory under {}",
        root.display()
    );
    dirs.into_iter().next().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn toy_data_train_generate_eval_roundtrip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert_eq!(
        run(&[
            "make-toy-data",
            "--out",
            s(&data),
            "--seed",
            "7",
            "--n",
            "2"
        ]),
        0
    );
    assert!(data.join("train/manifest.json").exists());

    let train_root = tmp.path().join("train");
    let code = run(&[
        "train",
        "--data",
        s(&data),
        "--epochs",
        "2",
        "--run-root",
        s(&train_root),
    ]);
    assert_eq!(code, 0);
    let run_dir = only_run_dir(&train_root);
    let ckpt = run_dir.join("checkpoints/latest");
    assert!(ckpt.join("manifest.json").exists());
    assert!(ckpt.join("generator.safetensors").exists());
    assert!(run_dir.join("config/train.toml").exists());
    let csv = std::fs::read_to_string(run_dir.join("logs/loss.csv")).unwrap();
    assert!(csv.starts_with("step,loss_D,loss_G_adv,fm,percep,dned,total"));
    assert_eq!(csv.lines().count(), 1 + 2 * 2);

    let mut outputs = Vec::new();
    for k in 0..2 {
        let root = tmp.path().join(format!("gen{k}"));
        let args = [
            "generate",
            "--checkpoint",
            s(&ckpt),
            "--data",
            s(&data),
            "--split",
            "train",
            "--run-root",
            s(&root),
        ];
        assert_eq!(run(&args), 0);
        let samples = only_run_dir(&root).join("samples");
        outputs.push(std::fs::read(samples.join("000000.png")).unwrap());
    }
    assert_eq!(outputs[0], outputs[1], "generate is not deterministic");

    let images = data.join("train/images");
    let report = tmp.path().join("metrics.json");
    let code = run(&[
        "eval",
        "--real",
        s(&images),
        "--fake",
        s(&images),
        "--out",
        s(&report),
        "--run-root",
        s(&tmp.path().join("eval")),
    ]);
    assert_eq!(code, 0);
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert!(json["fid"].as_f64().unwrap().abs() <= 1e-6, "{json}");
}

#[test]
fn missing_checkpoint_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert_eq!(run(&["make-toy-data", "--out", s(&data), "--n", "1"]), 0);
    let code = run(&[
        "generate",
        "--checkpoint",
        s(&tmp.path().join("nope")),
        "--data",
        s(&data),
        "--split",
        "train",
        "--run-root",
        s(&tmp.path().join("runs")),
    ]);
    assert_eq!(code, 3);
}

#[test]
fn unknown_config_key_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert_eq!(run(&["make-toy-data", "--out", s(&data), "--n", "1"]), 0);
    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "epochs = 2\nlearning_rate = 1.0\n").unwrap();
    let code = run(&[
        "train",
        "--data",
        s(&data),
        "--config",
        s(&cfg),
        "--run-root",
        s(&tmp.path().join("runs")),
    ]);
    assert_eq!(code, 3);
}
