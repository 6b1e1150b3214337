use std::path::Path;
use std::process::{Command, Output};

use ems_core::grid::bundled;

fn ems(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ems"))
        .args(args)
        .env_remove("EMS_THREADS")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn validate_exit_codes() {
    for case in ["mvdc12", "ieee30", "toy3"] {
        assert_eq!(code(&ems(&["--case", case, "validate"])), 0, "{case}");
    }
    let dir = tempfile::tempdir().unwrap();
    let broken = dir.path().join("broken.case");
    let text = bundled::TOY3.replace("ESS1, 3, 2, 0.2, 1.0, 1, 1, 1.0, 1.2", "ESS1, 3, 2, 0.2, 1.0, 1, 1, 1.0, 0.1");
    assert_ne!(text, bundled::TOY3);
    std::fs::write(&broken, text).unwrap();
    let out = ems(&["--case", p(&broken), "validate"]);
    assert_eq!(code(&out), 1);
    assert!(stdout(&out).contains("e_init"), "{}", stdout(&out));
    assert_eq!(code(&ems(&["--case", p(&dir.path().join("missing.case")), "validate"])), 2);
}

#[test]
fn powerflow_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("pf");
    let inj = dir.path().join("zero.csv");
    std::fs::write(&inj, "bus,p_mw\n1,0\n2,0\n3,0\n").unwrap();
    let out = ems(&["--case", "toy3", "--out", p(&out_dir), "powerflow", "--injections", p(&inj)]);
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).starts_with("converged=true iters="));
    let lines = std::fs::read_to_string(out_dir.join("pf_lines.csv")).unwrap();
    for row in lines.lines().skip(1) {
        for v in row.split(',').skip(3) {
            assert_eq!(v.parse::<f64>().unwrap(), 0.0, "{row}");
        }
    }
    let out = ems(&["--case", "ieee30", "--out", p(&out_dir), "powerflow"]);
    assert_eq!(code(&out), 0, "{}", stdout(&out));

    // a bus with no line to the rest of the network
    let islanded = dir.path().join("islanded.case");
    std::fs::write(&islanded, bundled::TOY3.replace("2, 3, 100, 20\n1, 3, 100, 20\n", "")).unwrap();
    assert_eq!(code(&ems(&["--case", p(&islanded), "--out", p(&out_dir), "powerflow"])), 1);
}

#[test]
fn scenario_audit_extremes() {
    let dir = tempfile::tempdir().unwrap();
    let out = ems(&["--case", "mvdc12", "--out", p(dir.path()), "--threshold", "0", "scenarios"]);
    assert_eq!(code(&out), 0);
    let s = stdout(&out);
    assert!(s.contains("retained=16384"), "{s}");
    let out = ems(&["--case", "mvdc12", "--out", p(dir.path()), "--threshold", "1", "scenarios"]);
    let s = stdout(&out);
    assert!(s.contains("retained=0") && s.contains("dropped_mass=1\n"), "{s}");
}

fn write_config(dir: &Path) -> String {
    let cfg = dir.join("run.toml");
    std::fs::write(
        &cfg,
        "case = \"toy3\"\nseed = 3\n\n[ppo]\nepisodes_per_update = 4\nminibatch_size = 32\nepochs = 2\ncheckpoint_every = 1\nhidden = [16, 16]\n",
    )
    .unwrap();
    cfg.to_str().unwrap().to_string()
}

#[test]
fn train_resume_matches_uninterrupted() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let straight = dir.path().join("straight");
    let split = dir.path().join("split");
    assert_eq!(code(&ems(&["--config", &cfg, "--out", p(&straight), "train", "--episodes", "24"])), 0);
    assert_eq!(code(&ems(&["--config", &cfg, "--out", p(&split), "train", "--episodes", "12"])), 0);
    let out = ems(&["--config", &cfg, "--out", p(&split), "train", "--episodes", "24", "--resume"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["policy.ckpt", "training_log.csv", "checkpoints/update_000006.ckpt"] {
        let a = std::fs::read(straight.join(f)).unwrap();
        let b = std::fs::read(split.join(f)).unwrap();
        assert!(a == b, "{f} differs");
    }
    let log = std::fs::read_to_string(straight.join("training_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 6);
}

#[test]
fn zero_episodes_writes_initial_checkpoint_only() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out_dir = dir.path().join("zero");
    assert_eq!(code(&ems(&["--config", &cfg, "--out", p(&out_dir), "train", "--episodes", "0"])), 0);
    let ckpts: Vec<_> = std::fs::read_dir(out_dir.join("checkpoints")).unwrap().collect();
    assert_eq!(ckpts.len(), 1);
    assert!(out_dir.join("policy.ckpt").exists());
    let log = std::fs::read_to_string(out_dir.join("training_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1);
}

#[test]
fn evaluate_untrained_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out_dir = dir.path().join("eval");
    assert_eq!(code(&ems(&["--config", &cfg, "--out", p(&out_dir), "train", "--episodes", "0"])), 0);
    let out = ems(&["--config", &cfg, "--out", p(&out_dir), "evaluate"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let risk: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out_dir.join("risk.json")).unwrap()).unwrap();
    assert!(risk["cvar"].is_number());
    let class = std::fs::read_to_string(out_dir.join("class_served.csv")).unwrap();
    assert!(class.starts_with("method,scenario,hour,class,demand_mw,served_mw\n"));

    let out = ems(&["--config", &cfg, "--out", p(&out_dir), "benchmark"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let timing = std::fs::read_to_string(out_dir.join("timing.csv")).unwrap();
    assert!(timing.contains("mvdc12,opt,solve,7.12,paper-reference"));
    assert!(timing.contains("ieee30,rl,rollout,1.91,paper-reference"));
    let summary = std::fs::read_to_string(out_dir.join("benchmark_summary.csv")).unwrap();
    let methods: Vec<&str> = summary.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(methods, ["base", "opt", "rl"]);

    assert_eq!(code(&ems(&["report", p(&out_dir)])), 0);
    let first = std::fs::read(out_dir.join("report.md")).unwrap();
    assert_eq!(code(&ems(&["report", p(&out_dir)])), 0);
    assert_eq!(first, std::fs::read(out_dir.join("report.md")).unwrap());
    let text = String::from_utf8(first).unwrap();
    for section in ["## Method comparison", "## Served load by class", "## Storage state of charge", "## Converter output shares", "paper-reference"] {
        assert!(text.contains(section), "missing {section}");
    }

    let empty = dir.path().join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    assert_eq!(code(&ems(&["report", p(&empty)])), 1);
}

#[test]
fn benchmark_without_policy_reports_failure() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("bench");
    let out = ems(&["--case", "toy3", "--out", p(&out_dir), "benchmark"]);
    assert_eq!(code(&out), 1);
    let failures = std::fs::read_to_string(out_dir.join("benchmark_failures.csv")).unwrap();
    assert!(failures.lines().nth(1).unwrap().starts_with("rl,"));
    let summary = std::fs::read_to_string(out_dir.join("benchmark_summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);
}

#[test]
fn bad_flags_exit_nonzero() {
    assert_ne!(code(&ems(&["--case", "toy3", "--alpha", "1.5", "scenarios"])), 0);
    assert_ne!(code(&ems(&["--case", "nope", "scenarios"])), 0);
}
