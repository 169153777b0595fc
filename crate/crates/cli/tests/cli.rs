use std::path::Path;
use std::process::{Command, Output};

fn tcav(args: &[&str], root: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_tcav"));
    cmd.args(args).env_remove("TCAV_OUTPUT_ROOT");
    if let Some(r) = root {
        cmd.env("TCAV_OUTPUT_ROOT", r);
    }
    cmd.output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

#[test]
fn smoke_run_writes_reports() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().join("run");
    let o = tcav(&["run", "--profile", "smoke", "--output", out.to_str().unwrap()], None);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["cav_table.csv", "tca_trajectories.csv", "cs_trajectories.csv", "feature_ranking.csv", "summary.json"] {
        assert!(out.join("reports").join(f).is_file(), "{f}");
    }
    assert!(out.join("manifest.json").is_file());

    std::fs::remove_dir_all(out.join("reports")).unwrap();
    let o = tcav(&["report", "--profile", "smoke", "--output", out.to_str().unwrap()], None);
    assert_eq!(code(&o), 0);
    assert!(out.join("reports/cav_table.csv").is_file());
}

#[test]
fn output_root_variable_wins_over_flag() {
    let d = tempfile::tempdir().unwrap();
    let flag = d.path().join("flag");
    let env = d.path().join("env");
    let o = tcav(&["generate", "--profile", "smoke", "--output", flag.to_str().unwrap()], Some(&env));
    assert_eq!(code(&o), 0);
    assert!(env.join("dataset/meta.json").is_file());
    assert!(env.join("dataset/data.bin").is_file());
    assert!(!flag.exists());
}

#[test]
fn seed_and_overrides_reach_the_config() {
    let o = tcav(&["config", "--profile", "smoke", "--seed", "42", "--set", "training.steps=7"], None);
    assert_eq!(code(&o), 0);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["seed"], 42);
    assert_eq!(v["training"]["steps"], 7);
}

#[test]
fn validation_errors_exit_with_one() {
    for args in [
        vec!["run", "--profile", "huge"],
        vec!["config", "--set", "training.stepz=3"],
        vec!["config", "--set", "cav.layers=[9]"],
        vec!["frobnicate"],
    ] {
        let o = tcav(&args, None);
        assert_eq!(code(&o), 1, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
}

#[test]
fn runtime_failures_exit_with_two() {
    let d = tempfile::tempdir().unwrap();
    let o = tcav(&["report", "--profile", "smoke"], Some(d.path()));
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing"));
    let o = tcav(&["run", "--config", d.path().join("nope.json").to_str().unwrap()], None);
    assert_eq!(code(&o), 2);
}

#[test]
fn match_writes_a_report() {
    let d = tempfile::tempdir().unwrap();
    let concept = d.path().join("concept.csv");
    let candidates = d.path().join("candidates.csv");
    let out = d.path().join("match.json");
    std::fs::write(&concept, "age,score\n1,10\n5,50\n").unwrap();
    std::fs::write(&candidates, "age,score\n9,90\n5,50\n0,0\n1,10\n").unwrap();
    let o = tcav(
        &[
            "match",
            "--concept",
            concept.to_str().unwrap(),
            "--candidates",
            candidates.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ],
        None,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(v["pairs"], serde_json::json!([[0, 3], [1, 1]]));
    assert_eq!(v["total_cost"], 0.0);
    assert!(v["stats_hash"].is_string());

    std::fs::write(&candidates, "1,2,3\n").unwrap();
    let o = tcav(
        &[
            "match",
            "--concept",
            concept.to_str().unwrap(),
            "--candidates",
            candidates.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ],
        None,
    );
    assert_eq!(code(&o), 1);
}
