//! End-to-end runs of the command-line stages on a small synthetic config.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cat_aif::pipeline::PipelineConfig;

fn cat_aif(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cat-aif")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = cat_aif(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

fn workspace() -> Workspace {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let mut cfg = PipelineConfig { seed: 3, ..PipelineConfig::default() };
    cfg.data.n_items = 40;
    cfg.data.roles.unbiased_train = 20;
    cfg.data.roles.unbiased_val = 6;
    cfg.data.roles.biased = 30;
    cfg.data.roles.test = 30;
    cfg.data.n_users = cfg.data.roles.total();
    cfg.cat.steps = 10;
    cfg.eval.steps = vec![5];
    cfg.eval.n_repeats = 2;
    let config = root.join("config.toml");
    std::fs::write(&config, cfg.to_toml().unwrap()).unwrap();
    Workspace { _dir: dir, root, config }
}

fn params(path: &Path) -> (serde_json::Value, serde_json::Value) {
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    (v["item_params"].clone(), v["user_abilities"].clone())
}

#[test]
fn stages_round_trip() {
    let ws = workspace();
    let cfg = s(&ws.config);
    let data_dir = ws.root.join("data");
    ok(&["--config", cfg, "--out", s(&data_dir), "synth"]);
    let dataset = data_dir.join("dataset.csv");
    let truth = data_dir.join("truth.json");
    let csv = std::fs::read_to_string(&dataset).unwrap();
    assert!(csv.starts_with("# config_hash="), "dataset preamble: {}", csv.lines().next().unwrap());

    let fit_dir = ws.root.join("fit");
    let stdout = ok(&["--config", cfg, "--out", s(&fit_dir), "fit", "--input", s(&dataset), "--truth", s(&truth)]);
    assert!(stdout.contains("rank_corr="), "{stdout}");
    let model = fit_dir.join("model.json");

    // zero further epochs from a warm start keeps every parameter
    let refit_dir = ws.root.join("refit");
    let stdout = ok(&[
        "--config", cfg, "--out", s(&refit_dir), "fit", "--input", s(&dataset), "--init", s(&model), "--max-epochs", "0",
    ]);
    assert!(stdout.contains("epochs_run=0"), "{stdout}");
    assert_eq!(params(&model), params(&refit_dir.join("model.json")));

    let bias_dir = ws.root.join("bias");
    ok(&["--config", cfg, "--out", s(&bias_dir), "bias", "--input", s(&dataset), "--model", s(&model)]);
    let sessions = bias_dir.join("sessions.csv");
    let parsed = cat_aif::cat::read_sessions_csv(std::fs::File::open(&sessions).unwrap()).unwrap();
    assert_eq!(parsed.len(), 30);
    for session in &parsed {
        session.check_invariants().unwrap();
        assert_eq!(session.len(), 10);
    }

    for method in ["user-aif", "if4urec", "greedy-aif", "ips-nb", "union"] {
        let dir = ws.root.join(format!("debias-{method}"));
        ok(&[
            "--config", cfg, "--out", s(&dir), "debias", "--input", s(&dataset), "--model", s(&model), "--sessions",
            s(&sessions), "--method", method,
        ]);
        assert!(dir.join("retrained.json").exists(), "{method}");
        if method != "union" {
            let users = std::fs::read_to_string(dir.join("influence_users.csv")).unwrap();
            assert!(users.lines().any(|l| l.starts_with("user_id,aif,selected")), "{method}: {users}");
        }
    }

    let eval_dir = ws.root.join("eval");
    let retrained = ws.root.join("debias-user-aif").join("retrained.json");
    let stdout = ok(&[
        "--config", cfg, "--out", s(&eval_dir), "eval", "--input", s(&dataset), "--model", s(&retrained), "--truth",
        s(&truth),
    ]);
    assert!(stdout.contains("rank_corr"), "{stdout}");
    let metrics = std::fs::read_to_string(eval_dir.join("metrics.csv")).unwrap();
    assert!(metrics.contains("metric,step,value,std,n_repeats"), "{metrics}");
    assert!(metrics.lines().any(|l| l.starts_with("auc_eval,5,")), "{metrics}");
}

#[test]
fn unknown_method_is_a_usage_error() {
    let ws = workspace();
    let out = cat_aif(&["--config", s(&ws.config), "--out", s(&ws.root), "pipeline", "--methods", "user-aif,bogus"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("bogus") && err.contains("user-aif"), "{err}");
}

#[test]
fn missing_input_is_a_usage_error() {
    let ws = workspace();
    let out = cat_aif(&["--config", s(&ws.config), "--out", s(&ws.root), "fit"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--input"));
}

#[test]
fn unreadable_config_fails_cleanly() {
    let ws = workspace();
    let bad = ws.root.join("bad.toml");
    std::fs::write(&bad, "[fit]\nno_such_key = 1\n").unwrap();
    let out = cat_aif(&["--config", s(&bad), "synth"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_key"));
}
