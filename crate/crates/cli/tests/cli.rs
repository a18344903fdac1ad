use hpdt_core::data::{save_dataset, TaskBundle, Trajectory};
use hpdt_core::envs::{EnvSpec, Task};
use hpdt_core::experiments::ExperimentConfig;
use std::path::Path;
use std::process::{Command, Output};

fn hpdt(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hpdt"))
        .args(args)
        .arg("--out")
        .arg(dir)
        .env_remove("HPDT_DATA_DIR")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// A config small enough to train and evaluate in a second or two.
fn tiny_config(dir: &Path) -> String {
    let mut exp = ExperimentConfig::default();
    exp.data.n_train_tasks = 2;
    exp.data.n_test_tasks = 2;
    exp.data.episodes_per_task = 3;
    exp.data.demos_per_task = 2;
    exp.data.horizon = 16;
    exp.model.embed_dim = 8;
    exp.model.n_layers = 1;
    exp.model.n_heads = 2;
    exp.model.context_len = 4;
    exp.model.demo_len = 4;
    exp.model.k = 2;
    exp.model.max_timestep = 16;
    exp.train.epochs = 2;
    exp.train.updates_per_epoch = 3;
    exp.train.batch_per_task = 2;
    exp.eval.episodes_per_task = 2;
    let path = dir.join("config.json");
    exp.save(&path).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn generate_train_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let o = hpdt(dir.path(), &["generate-data", "--config", &cfg, "--seed", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["train.jsonl", "test.jsonl", "manifest.json"] {
        assert!(dir.path().join("data/pointdir").join(f).exists(), "{f}");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("data/pointdir/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["train_tasks"], 2);
    assert_eq!(manifest["master_seed"], 3);

    let o = hpdt(dir.path(), &["train", "--config", &cfg, "--mode", "full"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let run = dir.path().join("train-pointdir-full");
    let ckpt = run.join("final.ckpt");
    assert!(ckpt.exists() && run.join("metrics.csv").exists() && run.join("run_manifest.json").exists());
    assert_eq!(std::fs::read_to_string(run.join("metrics.csv")).unwrap().lines().count(), 7);

    let ckpt_arg = ckpt.to_string_lossy().into_owned();
    let args = ["eval", "--config", &cfg, "--checkpoint", &ckpt_arg, "--k", "1", "--k", "3", "--m-prime", "5", "--project-tokens"];
    let o = hpdt(dir.path(), &args);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = std::fs::read_to_string(dir.path().join("eval/eval_report.csv")).unwrap();
    assert!(report.starts_with("task_id,mode,k,m_prime,"));
    // Two cells, each with two tasks and an aggregate row.
    assert_eq!(report.lines().count(), 7);
    assert!(report.contains("aggregate,full,1,5,") && report.contains("aggregate,full,3,5,"));
    assert!(dir.path().join("eval/global_token_projection.csv").exists());
    assert!(stdout(&o).contains("silhouette"));

    // Same command again must not overwrite.
    let o = hpdt(dir.path(), &args);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("refusing to overwrite"), "{}", stderr(&o));
    let mut forced = args.to_vec();
    forced.push("--force");
    assert!(hpdt(dir.path(), &forced).status.success());
}

#[test]
fn dry_run_prints_parameter_counts() {
    let dir = tempfile::tempdir().unwrap();
    let o = hpdt(dir.path(), &["train", "--dry-run", "--mode", "wo-t"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("config ok (mode wo_t)"), "{text}");
    assert!(text.contains("params[wo_t]") && text.contains(" *"));
    let line = text.lines().find(|l| l.starts_with("params[wo_t] - params[full]")).unwrap();
    // Default model: h = 128, T_max = 64.
    assert!(line.contains(&format!("= {}", 128 * 65 - 256)), "{line}");
    assert!(!dir.path().join("train-pointdir-wo_t").exists());
}

#[test]
fn regenerating_data_requires_force() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    assert!(hpdt(dir.path(), &["generate-data", "--config", &cfg]).status.success());
    let before = std::fs::read(dir.path().join("data/pointdir/train.jsonl")).unwrap();
    let o = hpdt(dir.path(), &["generate-data", "--config", &cfg]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("--force"), "{}", stderr(&o));
    assert!(hpdt(dir.path(), &["generate-data", "--config", &cfg, "--force"]).status.success());
    assert_eq!(before, std::fs::read(dir.path().join("data/pointdir/train.jsonl")).unwrap());
}

#[test]
fn dimension_mismatch_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    assert!(hpdt(dir.path(), &["generate-data", "--config", &cfg]).status.success());
    assert!(hpdt(dir.path(), &["train", "--config", &cfg]).status.success());
    // Hand-built held-out split with five state dimensions.
    let traj = Trajectory::new("odd", 5, 2, vec![0.1; 40], vec![0.0; 16], vec![1.0; 8]).unwrap();
    let bundle = TaskBundle::new("odd", EnvSpec::new(Task::Dir { angle: 0.0 }), vec![], vec![traj]).unwrap();
    save_dataset(&[bundle], &dir.path().join("odd/pointdir/test.jsonl"), serde_json::Value::Null).unwrap();
    let ckpt = dir.path().join("train-pointdir-full/final.ckpt");
    let data_dir = dir.path().join("odd");
    let o = hpdt(
        dir.path(),
        &["eval", "--config", &cfg, "--checkpoint", ckpt.to_str().unwrap(), "--data-dir", data_dir.to_str().unwrap()],
    );
    assert!(!o.status.success());
    let err = stderr(&o);
    assert!(err.contains("|S|=5") && err.contains("|S|=4"), "{err}");
}

#[test]
fn invalid_inputs_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{ "model": { "embed_dim": 8, "n_heads": 3 } }"#).unwrap();
    let o = hpdt(dir.path(), &["train", "--dry-run", "--config", bad.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).starts_with("error: "), "{}", stderr(&o));

    std::fs::write(&bad, r#"{ "modle": {} }"#).unwrap();
    let o = hpdt(dir.path(), &["train", "--dry-run", "--config", bad.to_str().unwrap()]);
    assert!(stderr(&o).contains("modle"), "{}", stderr(&o));

    let o = hpdt(dir.path(), &["train"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("generate-data"), "{}", stderr(&o));

    let o = hpdt(dir.path(), &["train", "--dry-run", "--paper-scale", "--desk-scale"]);
    assert!(!o.status.success());
}
