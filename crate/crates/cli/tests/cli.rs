use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn lab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_npd-lab")).args(args).env_remove("NPD_LAB_JOBS").output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = lab(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn put(path: &Path, v: &Value) -> String {
    fs::write(path, serde_json::to_string_pretty(v).unwrap()).unwrap();
    path.to_str().unwrap().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn run_config(tmp: &Path) -> String {
    put(
        &tmp.join("run.json"),
        &json!({
            "instance": {"generator": "random", "num_states": 3, "num_actions": 2, "horizon": 3, "seed": 11},
            "n_offline": 3000,
            "run": {"k_ucb": 64, "phi": {"fixed": 40}, "seed": 5},
            "rewards": [{"kind": "random", "name": "base", "seed": 2}]
        }),
    )
}

#[test]
fn stage_commands_reproduce_an_end_to_end_run() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let run_dir = t.join("run");
    ok(&["run", "--config", &run_config(t), "--out", s(&run_dir)]);

    let instance = put(&t.join("instance.json"), &json!({"generator": "random", "num_states": 3, "num_actions": 2, "horizon": 3, "seed": 11}));
    let st = t.join("stages");
    let mdp = st.join("mdp.json");
    ok(&["gen-mdp", "--config", &instance, "--out", s(&mdp)]);
    ok(&["gen-offline", "--mdp", s(&mdp), "--n", "3000", "--seed", "5", "--out", s(&st)]);
    let emp = st.join("model_empirical.json");
    ok(&["sparsify", "--counts", s(&st.join("counts_offline.json")), "--phi", "40", "--out", s(&emp)]);
    ok(&["design", "--model", s(&emp), "--k", "64", "--horizon", "3", "--seed", "5", "--out", s(&st)]);
    ok(&["deploy", "--mdp", s(&mdp), "--mixture", s(&st.join("pi_ex.json")), "--episodes", "64", "--seed", "5", "--out", s(&st)]);
    let fine = st.join("model_fine.json");
    ok(&["sparsify", "--kind", "fine", "--counts", s(&st.join("counts_online.json")), "--edges", s(&emp), "--out", s(&fine)]);

    for name in ["offline.triples", "counts_offline.json", "model_empirical.json", "pi_ex.json", "design_trace.csv", "online.triples", "model_fine.json"] {
        assert_eq!(fs::read(st.join(name)).unwrap(), fs::read(run_dir.join(name)).unwrap(), "{name} differs");
    }
}

#[test]
fn two_plans_share_one_model_hash() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let run_dir = t.join("run");
    ok(&["run", "--config", &run_config(t), "--out", s(&run_dir)]);
    let before = manifest(&run_dir)["stages"]["model_fine.json"].clone();
    let r1 = put(&t.join("r1.json"), &json!({"r": [[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]]}));
    let r2 = put(&t.join("r2.json"), &json!({"r": [[0.0, 1.0], [1.0, 0.0], [0.2, 0.9]]}));
    ok(&["plan", "--run", s(&run_dir), "--reward", &r1, "--name", "first"]);
    ok(&["plan", "--run", s(&run_dir), "--reward", &r2, "--name", "second"]);
    assert!(run_dir.join("pi_final.first.json").exists());
    assert!(run_dir.join("pi_final.second.json").exists());
    let stages = &manifest(&run_dir)["stages"];
    assert_eq!(stages["model_fine.json"], before);
    assert!(stages["pi_final.first.json"].is_string() && stages["pi_final.second.json"].is_string());
    ok(&["evaluate", "--run", s(&run_dir), "--reward", &r1, "--name", "first"]);
    assert!(fs::read_to_string(run_dir.join("eval.first.csv")).unwrap().starts_with("reward,v_dagger_opt"));
}

#[test]
fn planning_after_tampering_fails_validation() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let run_dir = t.join("run");
    ok(&["run", "--config", &run_config(t), "--out", s(&run_dir)]);
    let path = run_dir.join("model_fine.json");
    let mut text = fs::read_to_string(&path).unwrap();
    text.push(' ');
    fs::write(&path, text).unwrap();
    let r = put(&t.join("r.json"), &json!({"r": [[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]]}));
    let out = lab(&["plan", "--run", s(&run_dir), "--reward", &r]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("hash mismatch"));
}

#[test]
fn empty_dataset_gap_is_the_one_step_regret() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let rewards = [[0.2, 0.9, 0.4], [0.7, 0.1, 0.3]];
    for seed in 0..5u64 {
        let dir = t.join(format!("run{seed}"));
        let cfg = put(
            &t.join(format!("cfg{seed}.json")),
            &json!({
                "instance": {"generator": "random", "num_states": 2, "num_actions": 3, "horizon": 1, "seed": 3},
                "n_offline": 0,
                "run": {"k_ucb": 5, "seed": seed},
                "rewards": [{"kind": "table", "name": "r", "r": rewards}]
            }),
        );
        ok(&["run", "--config", &cfg, "--out", s(&dir)]);
        let pi: Value = serde_json::from_str(&fs::read_to_string(dir.join("pi_final.r.json")).unwrap()).unwrap();
        let chosen = pi[0][0].as_u64().unwrap() as usize;
        let eval = fs::read_to_string(dir.join("eval.r.csv")).unwrap();
        let (header, row) = eval.split_once('\n').unwrap();
        let gap_col = header.split(',').position(|c| c == "gap").unwrap();
        let gap: f64 = row.trim().split(',').nth(gap_col).unwrap().parse().unwrap();
        assert!((gap - (0.9 - rewards[0][chosen])).abs() < 1e-12, "seed {seed}: gap {gap}, chosen {chosen}");
    }
}

fn sweep_config(t: &Path) -> String {
    put(
        &t.join("sweep.json"),
        &json!({
            "instance": {"generator": "gridworld", "width": 2, "height": 2, "slip": 0.1, "horizon": 2, "seed": 0},
            "n_offline": [400],
            "k": [4, 16],
            "phi": {"fixed": 10},
            "rewards": [{"kind": "random", "name": "r", "seed": 7}],
            "replicates": 3,
            "master_seed": 1
        }),
    )
}

#[test]
fn experiment_writes_one_row_per_budget_and_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let out = t.join("sweep");
    ok(&["experiment", "--config", &sweep_config(t), "--out", s(&out), "--jobs", "2"]);
    let csv = fs::read_to_string(out.join("results.csv")).unwrap();
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let (k, seed) = (header.iter().position(|c| *c == "k").unwrap(), header.iter().position(|c| *c == "seed").unwrap());
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 6);
    let mut keys: Vec<(&str, &str)> = rows.iter().map(|r| (r[k], r[seed])).collect();
    keys.sort();
    keys.dedup();
    assert_eq!(keys.len(), 6);

    let again = Command::new(env!("CARGO_BIN_EXE_npd-lab"))
        .args(["experiment", "--config", &sweep_config(t), "--out", s(&out), "--resume"])
        .env("NPD_LAB_JOBS", "1")
        .output()
        .unwrap();
    assert!(again.status.success());
    assert!(String::from_utf8_lossy(&again.stdout).contains("6 skipped"));
    assert_eq!(fs::read_to_string(out.join("results.csv")).unwrap(), csv);
}

#[test]
fn diagnose_writes_one_csv_per_check() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let run_dir = t.join("run");
    ok(&["run", "--config", &run_config(t), "--out", s(&run_dir)]);
    ok(&["diagnose", "--run", s(&run_dir), "--policies", "5"]);
    for check in ["multiplicative-accuracy", "visitation-ratio", "kl-event", "offline-event"] {
        let text = fs::read_to_string(run_dir.join(format!("diagnostics.{check}.csv"))).unwrap();
        assert!(text.starts_with("replicate,statistic,bound,pass\n"), "{check}");
        assert_eq!(text.lines().count(), 2);
    }
}

#[test]
fn exit_codes_separate_validation_from_runtime() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let bad_delta = put(
        &t.join("bad.json"),
        &json!({
            "instance": {"generator": "random", "num_states": 2, "num_actions": 2, "horizon": 2, "seed": 1},
            "n_offline": 10,
            "run": {"k_ucb": 4, "delta": 1.5}
        }),
    );
    assert_eq!(lab(&["run", "--config", &bad_delta, "--out", s(&t.join("x"))]).status.code(), Some(1));
    assert_eq!(lab(&["run", "--config", s(&t.join("missing.json")), "--out", s(&t.join("y"))]).status.code(), Some(2));
    assert_eq!(lab(&["design", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(lab(&["gen-offline", "--mdp", "m.json", "--n", "1", "--allocation", "sorted"]).status.code(), Some(2));
    assert_eq!(lab(&["--help"]).status.code(), Some(0));
}
