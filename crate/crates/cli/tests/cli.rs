use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hibcg::config::{RunConfig, HIBCG_DEFAULT};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hibcg"))
}

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

fn run(cmd: &mut Command) -> (i32, String, String) {
    let Output { status, stdout, stderr } = cmd.output().unwrap();
    (status.code().unwrap(), String::from_utf8(stdout).unwrap(), String::from_utf8(stderr).unwrap())
}

fn tiny_config(dir: &Path, name: &str, lr: f64) -> PathBuf {
    let mut c = RunConfig::parse(HIBCG_DEFAULT).unwrap();
    c.name = name.into();
    c.seeds = vec![0, 1];
    c.training.steps = 80;
    c.training.warm_episodes = 2;
    c.training.batch_size = 4;
    c.training.eval_interval = 40;
    c.training.eval_episodes = 2;
    c.training.lr = lr;
    c.training.grad_clip = 1e300;
    let path = dir.join(format!("{name}.toml"));
    std::fs::write(&path, c.to_toml()).unwrap();
    path
}

#[test]
fn allocate_matches_golden_csv() {
    let (code, out, _) = run(bin().arg("allocate").arg(data("reciprocal4.chan")).arg("3"));
    assert_eq!(code, 0);
    assert_eq!(out, std::fs::read_to_string(data("reciprocal4_b3.csv")).unwrap());
    // closed form: two active channels at water level 6/5
    let rates: Vec<f64> = out.lines().skip(1).take(4).map(|l| l.split(',').nth(2).unwrap().parse().unwrap()).collect();
    for (got, want) in rates.iter().zip([4.0 / 1.2 - 1.0, 2.0 / 1.2 - 1.0, 0.0, 0.0]) {
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }
}

#[test]
fn malformed_inputs_exit_two() {
    assert_eq!(run(bin().arg("allocate").arg(data("bad.chan")).arg("1")).0, 2);
    assert_eq!(run(bin().arg("allocate").arg(data("missing.chan")).arg("1")).0, 2);
    assert_eq!(run(bin().arg("allocate").arg(data("reciprocal4.chan")).arg("-1")).0, 2);
    assert_eq!(run(bin().args(["props", "prop9"])).0, 2);
    assert_eq!(run(bin().args(["train", "no_such_config"])).0, 2);
    assert_eq!(run(bin().arg("frobnicate")).0, 2);
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "name = 3\n").unwrap();
    assert_eq!(run(bin().arg("train").arg(&bad)).0, 2);
    let cfg = tiny_config(tmp.path(), "tiny", 0.01);
    assert_eq!(run(bin().arg("sweep-sigma").arg(&cfg).arg("1,-3")).0, 2);
}

#[test]
fn verify_reports_mismatches_and_corruption() {
    let (code, out, err) = run(bin().args(["verify", "appendix-e"]));
    // several quoted two-decimal figures disagree with exact arithmetic
    assert_eq!(code, 1);
    assert!(out.contains("F.total_edges") && out.contains("MISMATCH"));
    assert!(err.contains("I.flat.total"));
    assert!(!err.contains("F.intra1"));
    let (code, _, err) = run(bin().args(["verify", "appendix-e", "--corrupt", "F.intra1"]));
    assert_eq!(code, 1);
    assert!(err.contains("F.intra1"));
    assert_eq!(run(bin().args(["verify", "appendix-e", "--corrupt", "nothing"])).0, 2);
}

#[test]
fn props_suite_runs_and_writes_json() {
    let tmp = tempfile::tempdir().unwrap();
    let json = tmp.path().join("p.json");
    let (code, out, _) = run(bin().args(["props", "prop2", "--trials", "40", "--seed", "3", "--json"]).arg(&json));
    assert_eq!(code, 0);
    assert!(out.contains("no_regret"));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(v[0]["suite"], "prop2");
    assert_eq!(v[0]["passed"], true);
}

#[test]
fn train_writes_per_seed_outputs_under_override_root() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), "tiny", 0.01);
    let out_root = tmp.path().join("out");
    let (code, out, _) = run(bin().arg("train").arg(&cfg).env("HIBCG_OUT", &out_root));
    assert_eq!(code, 0, "{out}");
    for seed in [0, 1] {
        let d = out_root.join("tiny").join(format!("seed_{seed}"));
        for f in ["log.csv", "kl_blocks.csv", "eval.csv", "summary.json", "checkpoint.bin"] {
            assert!(d.join(f).is_file(), "{}", d.join(f).display());
        }
    }
    assert!(out_root.join("tiny/summary.json").is_file());
    assert!(out_root.join("tiny/config.toml").is_file());
}

#[test]
fn diverging_seed_exits_one_but_siblings_finish() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), "blowup", 1e200);
    let out_root = tmp.path().join("out");
    let (code, out, _) = run(bin().arg("train").arg(&cfg).args(["--workers", "2"]).env("HIBCG_OUT", &out_root));
    assert_eq!(code, 1);
    assert!(out.contains("FAILED"));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_root.join("blowup/summary.json")).unwrap()).unwrap();
    assert_eq!(summary.as_object().unwrap().len(), 2);
}

#[test]
fn sweep_writes_combined_table() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), "sw", 0.01);
    let out_root = tmp.path().join("out");
    let (code, out, _) = run(bin().arg("sweep-sigma").arg(&cfg).arg("0.5,2").env("HIBCG_OUT", &out_root));
    assert_eq!(code, 0);
    assert!(out.starts_with("ratio,sigma_intra"));
    assert_eq!(out.lines().count(), 5);
    assert_eq!(std::fs::read_to_string(out_root.join("sw_sweep/sweep.csv")).unwrap(), out);
    assert!(out_root.join("sw_ratio0.5/seed_0/log.csv").is_file());
}
