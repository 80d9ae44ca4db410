//! End-to-end runs of the `socialdrive` binary on tiny configurations.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = r#"{
  "experiment": {"dataset_episodes": 6, "seeds": 1, "eval_episodes": 2},
  "ppo": {"total_steps": 240, "buffer_cap": 60, "forward_steps": 30, "minibatch": 30, "update_epochs": 1},
  "dpl": {"epochs": 2}
}"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_socialdrive"));
    c.env_remove("SOCIALDRIVE_OUT");
    c
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let o = run(dir, args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn tiny_dir() -> tempfile::TempDir {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("tiny.json"), TINY).unwrap();
    d
}

fn error_line(o: &Output) -> Value {
    let err = String::from_utf8_lossy(&o.stderr);
    let last = err.lines().last().expect("an error line");
    serde_json::from_str(last).expect("machine-readable error")
}

#[test]
fn gen_data_twice_gives_identical_files() {
    let d = tiny_dir();
    for out in ["a", "b"] {
        ok(d.path(), &["--config", "tiny.json", "--seed", "7", "--out", out, "gen-data"]);
    }
    for f in ["dataset.jsonl", "dataset.jsonl.manifest.json", "config.json", "manifest.json"] {
        let a = fs::read(d.path().join("a").join(f)).unwrap();
        let b = fs::read(d.path().join("b").join(f)).unwrap();
        assert!(!a.is_empty());
        assert_eq!(a, b, "{f}");
    }
}

#[test]
fn invalid_config_exits_two_with_field_path() {
    let d = tiny_dir();
    fs::write(d.path().join("bad.json"), r#"{"ppo": {"clipp": 0.1}}"#).unwrap();
    let o = run(d.path(), &["--config", "bad.json", "--seed", "1", "gen-data"]);
    assert_eq!(o.status.code(), Some(2));
    let e = error_line(&o);
    assert_eq!(e["error"], "config");
    assert!(e["path"].as_str().unwrap().starts_with("ppo"), "{e}");

    let o = run(d.path(), &["--set", "ppo.clip=-1", "--seed", "1", "gen-data"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_line(&o)["path"], "ppo.clip");

    let o = run(d.path(), &["--set", "nosuch.key=1", "--seed", "1", "gen-data"]);
    assert_eq!(o.status.code(), Some(2));
    // nothing written for a rejected config
    assert!(!d.path().join("runs").exists());
}

#[test]
fn stochastic_commands_require_a_seed() {
    let d = tiny_dir();
    let o = run(d.path(), &["--config", "tiny.json", "gen-data"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_line(&o)["path"], "--seed");
}

#[test]
fn sweep_with_two_phis_gives_two_rows() {
    let d = tiny_dir();
    ok(
        d.path(),
        &["--config", "tiny.json", "--seed", "0", "--out", "sw", "sweep-ct", "--set", "experiment.phis=[0,0.2618]"],
    );
    let text = fs::read_to_string(d.path().join("sw/sweep.csv")).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 2, "{text}");
    assert!(rows[0].starts_with("0.0,") && rows[1].starts_with("0.2618,"), "{text}");
    let snap: Value = serde_json::from_str(&fs::read_to_string(d.path().join("sw/config.json")).unwrap()).unwrap();
    assert_eq!(snap["experiment"]["phis"], serde_json::json!([0.0, 0.2618]));
}

#[test]
fn replay_of_empty_log_prints_nothing() {
    let d = tiny_dir();
    fs::write(d.path().join("empty.jsonl"), "").unwrap();
    let out = ok(d.path(), &["replay", "empty.jsonl"]);
    assert!(out.is_empty());
}

#[test]
fn replay_of_corrupt_log_names_the_line() {
    let d = tiny_dir();
    fs::write(d.path().join("bad.jsonl"), "\n{not json\n").unwrap();
    let o = run(d.path(), &["replay", "bad.jsonl"]);
    assert_eq!(o.status.code(), Some(1));
    let msg = error_line(&o)["message"].as_str().unwrap().to_string();
    assert!(msg.contains("bad.jsonl:2:"), "{msg}");
}

#[test]
fn grad_check_passes_without_artifacts() {
    let d = tiny_dir();
    let out = ok(d.path(), &["--out", "gc", "grad-check"]);
    for name in ["linear", "gru", "attention", "dpl_encoder", "policy_encoder", "vae_chain", "policy_stack"] {
        let line = out.lines().find(|l| l.starts_with(name)).unwrap_or_else(|| panic!("{name} missing: {out}"));
        assert!(line.ends_with("ok"), "{line}");
    }
    assert!(d.path().join("gc/grad_check.json").exists());
}

#[test]
fn pipeline_record_replay_and_rerun_from_snapshot() {
    let d = tiny_dir();
    let p = d.path();
    ok(p, &["--config", "tiny.json", "--seed", "3", "--out", "data", "gen-data"]);
    ok(p, &["--config", "tiny.json", "--seed", "4", "--out", "dpl", "train-dpl", "--data", "data/dataset.jsonl"]);
    assert!(p.join("dpl/dpl_loss.csv").exists());
    let probe = ok(
        p,
        &["--config", "tiny.json", "--seed", "4", "--out", "dpl", "probe-latents", "--data", "data/dataset.jsonl", "--dpl", "dpl/checkpoints/dpl.ckpt"],
    );
    let acc = serde_json::from_str::<Value>(&probe).unwrap()["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));

    let train = ["--seed", "5", "train-policy", "--dpl", "dpl/checkpoints/dpl.ckpt"];
    ok(p, &[&["--config", "tiny.json", "--out", "pol"][..], &train].concat());
    // re-run from the snapshot alone
    ok(p, &[&["--config", "pol/config.json", "--out", "pol2"][..], &train].concat());
    for f in ["metrics.csv", "checkpoints/policy.ckpt", "eval.json", "config.json"] {
        assert_eq!(fs::read(p.join("pol").join(f)).unwrap(), fs::read(p.join("pol2").join(f)).unwrap(), "{f}");
    }

    ok(
        p,
        &["--config", "tiny.json", "--seed", "9", "--out", "ev", "eval", "--policy", "pol/checkpoints/policy.ckpt", "--dpl", "dpl/checkpoints/dpl.ckpt", "--episodes", "2", "--record"],
    );
    let eval: Value = serde_json::from_str(&fs::read_to_string(p.join("ev/eval.json")).unwrap()).unwrap();
    assert_eq!(eval["episodes"], 2);
    let lines = ok(p, &["replay", "ev/episodes/episode_0001.jsonl"]);
    assert!(!lines.is_empty());
    for l in lines.lines() {
        let v: Value = serde_json::from_str(l).unwrap();
        for key in ["r_c", "r_e", "r_a", "r_ego", "r_coord", "r_global"] {
            let a = v["reward"][key].as_f64().unwrap();
            let b = v["logged_reward"][key].as_f64().unwrap();
            assert!((a - b).abs() <= 1e-9, "{key}: {a} vs {b}");
        }
    }

    let manifest: Value = serde_json::from_str(&fs::read_to_string(p.join("ev/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "eval");
    assert_eq!(manifest["seed"], 9);
    assert!(manifest["inputs"]["policy"]["sha256"].is_string());
    assert!(manifest["outputs"].as_array().unwrap().iter().any(|o| o["path"] == "episodes/episode_0000.jsonl"));
}

#[test]
fn report_renders_into_the_run_directory() {
    let d = tiny_dir();
    let p = d.path();
    ok(p, &["--config", "tiny.json", "--seed", "2", "--out", "pol", "train-policy"]);
    let before = fs::read(p.join("pol/manifest.json")).unwrap();
    ok(p, &["--out", "pol", "report"]);
    assert!(p.join("pol/report/reward.svg").exists());
    assert!(p.join("pol/report/manifest.json").exists());
    assert_eq!(fs::read(p.join("pol/manifest.json")).unwrap(), before);

    let o = run(p, &["--out", "missing", "report"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn output_root_defaults_from_the_environment() {
    let d = tiny_dir();
    let target = d.path().join("from_env");
    let o = bin()
        .current_dir(d.path())
        .env("SOCIALDRIVE_OUT", &target)
        .args(["--config", "tiny.json", "--seed", "1", "gen-data"])
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(target.join("dataset.jsonl").exists());
}
