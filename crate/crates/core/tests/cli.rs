use std::path::Path;
use std::process::Command;

use mlde::cli::{run, EXIT_CONFIG, EXIT_DATA};

fn mlde(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_mlde")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn synth_train_evaluate_report() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = dir.path().join("out");
    assert_eq!(
        run(["mlde", "synth", "--out-dir", s(&data), "--n", "14", "--seed", "2"]),
        0
    );
    assert!(data.join("train.csv").exists() && data.join("synth_meta.json").exists());

    let config = dir.path().join("run.toml");
    std::fs::write(
        &config,
        format!(
            "train_manifest = {:?}\neval_manifest = {:?}\nepochs_per_stage = [1, 1, 1, 1]\nroc_svg = {:?}\n",
            s(&data.join("train.csv")),
            s(&data.join("test.csv")),
            s(&out.join("roc.svg")),
        ),
    )
    .unwrap();
    let common = ["--config", s(&config), "--out-dir", s(&out), "--deterministic"];
    for cmd in ["train", "evaluate", "report"] {
        let args: Vec<&str> = ["mlde", cmd].into_iter().chain(common).collect();
        assert_eq!(run(args), 0, "{cmd}");
    }
    for class in ["MEL", "NV", "BCC", "AKIEC", "BKL", "DF", "VASC"] {
        assert!(
            out.join("checkpoints").join(format!("{class}.mlde")).exists(),
            "{class}"
        );
    }
    let predictions = std::fs::read_to_string(out.join("predictions.csv")).unwrap();
    assert_eq!(
        predictions.lines().next().unwrap(),
        "image,MEL,NV,BCC,AKIEC,BKL,DF,VASC"
    );
    assert_eq!(predictions.lines().count(), 1 + 7);
    let eval: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("evaluation.json")).unwrap()).unwrap();
    let mean = eval["mean_auc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&mean));
    let meta: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("run_metadata.json")).unwrap()).unwrap();
    for cmd in ["train", "evaluate"] {
        assert!(meta[cmd]["config_hash"].is_string(), "{cmd}");
    }
    assert!(std::fs::read_to_string(out.join("report.txt"))
        .unwrap()
        .contains("Average AUC"));
    assert!(std::fs::read_to_string(out.join("roc.svg"))
        .unwrap()
        .starts_with("<svg"));
}

#[test]
fn config_errors_are_collected_as_json() {
    let output = mlde(&[
        "train",
        "--set",
        "learning_rate=-1",
        "--set",
        "bogus=1",
        "--set",
        "batch_size=0",
    ]);
    assert_eq!(output.status.code(), Some(EXIT_CONFIG));
    let stderr = String::from_utf8(output.stderr).unwrap();
    let line: serde_json::Value = serde_json::from_str(stderr.lines().last().unwrap()).unwrap();
    let details = line["error"]["details"].as_array().unwrap();
    assert!(
        details.iter().any(|d| d.as_str().unwrap().contains("bogus")),
        "{stderr}"
    );
}

#[test]
fn invalid_values_list_every_violation() {
    let output = mlde(&["train", "--set", "learning_rate=-1", "--set", "batch_size=0"]);
    assert_eq!(output.status.code(), Some(EXIT_CONFIG));
    let stderr = String::from_utf8(output.stderr).unwrap();
    let line: serde_json::Value = serde_json::from_str(stderr.lines().last().unwrap()).unwrap();
    let details: Vec<&str> = line["error"]["details"]
        .as_array()
        .unwrap()
        .iter()
        .filter_map(|d| d.as_str())
        .collect();
    for key in ["learning_rate", "batch_size", "train_manifest"] {
        assert!(details.iter().any(|d| d.contains(key)), "{key}: {details:?}");
    }
}

#[test]
fn missing_checkpoint_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(run(["mlde", "synth", "--out-dir", s(&data), "--n", "14"]), 0);
    let eval = format!("eval_manifest={:?}", s(&data.join("test.csv")));
    let output = mlde(&["predict", "--set", &eval, "--out-dir", s(&dir.path().join("empty"))]);
    assert_eq!(output.status.code(), Some(EXIT_DATA));
    let stderr = String::from_utf8(output.stderr).unwrap();
    assert!(stderr.contains("MEL"), "{stderr}");
}

#[test]
fn schema_lists_keys() {
    let output = mlde(&["config-schema"]);
    assert!(output.status.success());
    let text = String::from_utf8(output.stdout).unwrap();
    for key in ["learning_rate", "epochs_per_stage", "deterministic", "scales"] {
        assert!(text.contains(key), "{key}");
    }
}

#[test]
fn too_small_synth_request_fails() {
    let dir = tempfile::tempdir().unwrap();
    let output = mlde(&["synth", "--out-dir", s(dir.path()), "--n", "5"]);
    assert_eq!(output.status.code(), Some(EXIT_DATA));
}
