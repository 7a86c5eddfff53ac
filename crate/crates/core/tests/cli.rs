use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn kbpt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kbpt")).args(args).output().unwrap()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Writes a run config over the CHF-EURO fixture with very short training.
fn quick_config(dir: &Path, extra: &str) -> PathBuf {
    let p = dir.join("run.toml");
    let body = format!(
        "data = {:?}\nin_sample_len = 2000\nseed = 1\nepochs1 = 2\nepochs2 = 1\n{extra}\n",
        path_str(&fixtures().join("chf_eur.csv"))
    );
    std::fs::write(&p, body).unwrap();
    p
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn fixture_backtest_writes_three_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = kbpt(&[
        "backtest",
        "--config",
        path_str(&fixtures().join("chf_eur.toml")),
        "--pipelines",
        "B1",
        "--out",
        path_str(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["pnl.csv", "ledger.csv", "stats.json"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let pnl = std::fs::read_to_string(out.join("pnl.csv")).unwrap();
    let mut lines = pnl.lines();
    let head = lines.next().unwrap();
    assert!(head.starts_with("# config_hash=") && head.ends_with("seed=0"), "{head}");
    assert_eq!(lines.next().unwrap(), "day,date,B1");
    assert_eq!(lines.count(), 944);

    let ledger = std::fs::read_to_string(out.join("ledger.csv")).unwrap();
    assert!(ledger.starts_with(head));
    let stats = read_json(&out.join("stats.json"));
    assert_eq!(stats["seed"], 0);
    assert_eq!(stats["forced_close_at_horizon"], true);
    assert_eq!(format!("# config_hash={}, seed=0", stats["config_hash"].as_str().unwrap()), head);
}

#[test]
fn missing_csv_exits_2_and_names_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "data = \"nowhere/prices.csv\"\npipelines = [\"B1\"]\nout = \"o\"\n").unwrap();
    let o = kbpt(&["backtest", "--config", path_str(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8(o.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    let v: Value = serde_json::from_str(err.trim()).unwrap();
    assert_eq!(v["error"], "io");
    assert!(v["path"].as_str().unwrap().ends_with("nowhere/prices.csv"));
    assert!(!dir.path().join("o").exists());
}

#[test]
fn missing_config_and_bad_pipeline_exit_2() {
    let o = kbpt(&["backtest", "--config", "/no/such/config.toml"]);
    assert_eq!(o.status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_config(dir.path(), "");
    let o = kbpt(&["backtest", "--config", path_str(&cfg), "--pipelines", "B9", "--out", "x"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn four_pipelines_give_four_stats_entries() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_config(dir.path(), "");
    let out = dir.path().join("out");
    let o = kbpt(&[
        "backtest",
        "--config",
        path_str(&cfg),
        "--pipelines",
        "B1,B2,B3,KBPT",
        "--out",
        path_str(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stats = read_json(&out.join("stats.json"));
    let names: Vec<&str> = stats["pipelines"]
        .as_array()
        .unwrap()
        .iter()
        .map(|p| p["name"].as_str().unwrap())
        .collect();
    assert_eq!(names, ["B1", "B2", "B3", "KBPT"]);
    let pnl = std::fs::read_to_string(out.join("pnl.csv")).unwrap();
    assert_eq!(pnl.lines().nth(1).unwrap(), "day,date,B1,B2,B3,KBPT");

    // The stats command recomputes the same numbers from the ledger alone.
    let o = kbpt(&["stats", "--ledger", path_str(&out.join("ledger.csv")), "--out", path_str(&dir.path().join("re"))]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let re = read_json(&dir.path().join("re/stats.json"));
    assert_eq!(re["horizon_days"], 944);
    assert_eq!(re["config_hash"], stats["config_hash"]);
    // Pipelines without trades have no ledger rows, so match by name.
    let re_rows = re["pipelines"].as_array().unwrap();
    let mut matched = 0;
    for a in stats["pipelines"].as_array().unwrap() {
        match re_rows.iter().find(|b| b["name"] == a["name"]) {
            Some(b) => {
                assert_eq!(a["stats"], b["stats"], "{}", a["name"]);
                matched += 1;
            }
            None => assert_eq!(a["stats"]["n_trades"], 0),
        }
    }
    assert!(matched >= 2);
}

#[test]
fn train_then_backtest_from_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_config(dir.path(), "pipelines = [\"KBPT\"]");
    let ck = dir.path().join("ck");
    let o = kbpt(&["train", "--config", path_str(&cfg), "--out", path_str(&ck)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["kbpt_stage1.ckpt", "kbpt_stage2.ckpt", "train_report.json"] {
        assert!(ck.join(f).is_file(), "{f} missing");
    }

    let cfg2 = quick_config(
        dir.path(),
        &format!("pipelines = [\"KBPT\"]\ncheckpoint_kbpt = {:?}", path_str(&ck.join("kbpt_stage2.ckpt"))),
    );
    let out = dir.path().join("out");
    let o = kbpt(&["backtest", "--config", path_str(&cfg2), "--out", path_str(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stats = read_json(&out.join("stats.json"));
    assert!(stats["pipelines"][0]["train_report"].is_null());
}

#[test]
fn synth_is_seeded_and_loadable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixtures().join("chf_eur.synth.toml");
    let (a, b, c) = (dir.path().join("a.csv"), dir.path().join("b.csv"), dir.path().join("c.csv"));
    for (p, seed) in [(&a, "11"), (&b, "11"), (&c, "12")] {
        let o = kbpt(&["synth", "--config", path_str(&cfg), "--out", path_str(p), "--seed", seed]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let (ta, tb, tc) = (
        std::fs::read(&a).unwrap(),
        std::fs::read(&b).unwrap(),
        std::fs::read(&c).unwrap(),
    );
    assert_eq!(ta, tb);
    assert_ne!(ta, tc);
    // The committed fixture is exactly what its config generates.
    assert_eq!(ta, std::fs::read(fixtures().join("chf_eur.csv")).unwrap());
    let load = kbpt::data::load_csv(&a).unwrap();
    assert_eq!(load.series.len(), 2944);
}

#[test]
fn policy_mode_flag_changes_results() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_config(dir.path(), "pipelines = [\"B1\"]");
    let mut bodies = Vec::new();
    for mode in ["cumulative", "instantaneous"] {
        let out = dir.path().join(mode);
        let o = kbpt(&["backtest", "--config", path_str(&cfg), "--policy-mode", mode, "--out", path_str(&out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let text = std::fs::read_to_string(out.join("pnl.csv")).unwrap();
        bodies.push(text.lines().skip(1).collect::<Vec<_>>().join("\n"));
    }
    assert_ne!(bodies[0], bodies[1]);
}
