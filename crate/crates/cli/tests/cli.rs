use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn colosla(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_colosla")).args(args).current_dir(cwd).output().expect("spawn colosla")
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

#[test]
fn simulate_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["simulate", "--seed", "3", "--racks", "1", "--days", "0.5", "--out", "a.csv"];
    let a = stdout(&colosla(&args, dir.path()));
    let b = stdout(&colosla(&args, dir.path()));
    assert_eq!(a, b);
    assert!(a.contains("sha256="));
    let other = stdout(&colosla(&["simulate", "--seed", "4", "--racks", "1", "--days", "0.5"], dir.path()));
    assert_ne!(a, other);
}

#[test]
fn usage_error_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(colosla(&["simulate", "--racks", "many"], dir.path()).status.code(), Some(2));
    assert_eq!(colosla(&["no-such-command"], dir.path()).status.code(), Some(2));
}

#[test]
fn ingest_then_extract_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let contract = fixture("sla_customer_a.md");
    let pii = fixture("pii_customer_a.toml");
    let out = stdout(&colosla(
        &["ingest", contract.to_str().unwrap(), "--pii", pii.to_str().unwrap(), "--out-dir", "docs"],
        dir.path(),
    ));
    assert!(out.contains("customer=Customer_A"), "{out}");
    let doc = out.split_whitespace().next().unwrap();
    let rules = stdout(&colosla(&["extract", doc, "--out", "rules.jsonl", "--trace", "trace.jsonl"], dir.path()));
    assert!(rules.is_empty());
    let got = std::fs::read_to_string(dir.path().join("rules.jsonl")).unwrap();
    let ids: Vec<String> = got
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["rule_id"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(ids.len(), 3);
    for id in ["CUST_A_PWR_01", "CUST_A_TEMP_01", "CUST_A_HUM_01"] {
        assert!(ids.iter().any(|i| i == id), "{ids:?}");
    }
    assert!(dir.path().join("trace.jsonl").metadata().unwrap().len() > 0);
}

#[test]
fn extract_without_humidity_is_incomplete() {
    let dir = tempfile::tempdir().unwrap();
    let contract = fixture("sla_customer_a_no_humidity.md");
    let pii = fixture("pii_customer_a.toml");
    let out = stdout(&colosla(
        &["ingest", contract.to_str().unwrap(), "--pii", pii.to_str().unwrap(), "--out-dir", "docs"],
        dir.path(),
    ));
    let doc = out.split_whitespace().next().unwrap();
    let o = colosla(&["extract", doc], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("humidity"));
}

#[test]
fn label_infer_and_verify_chain() {
    let dir = tempfile::tempdir().unwrap();
    stdout(&colosla(&["simulate", "--seed", "9", "--racks", "1", "--days", "1", "--slot-hours", "6", "--out", "t.csv"], dir.path()));
    let labeled = stdout(&colosla(&["label", "t.csv", "--out", "ds.jsonl"], dir.path()));
    assert!(labeled.starts_with("windows="), "{labeled}");

    let inferred = stdout(&colosla(&["infer", "t.csv", "--contract", "Customer_A=100000", "--out-dir", "run"], dir.path()));
    assert!(inferred.starts_with("events="), "{inferred}");
    let audit = dir.path().join("run/audit.jsonl");
    let ok = stdout(&colosla(&["verify-chain", audit.to_str().unwrap()], dir.path()));
    assert!(ok.starts_with("ok records="), "{ok}");

    let text = std::fs::read_to_string(&audit).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    assert!(lines.len() > 2);
    lines.swap(0, 1);
    std::fs::write(&audit, lines.join("\n") + "\n").unwrap();
    let bad = colosla(&["verify-chain", audit.to_str().unwrap()], dir.path());
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("broken at record 0"), "{}", String::from_utf8_lossy(&bad.stderr));
}

#[test]
fn train_small_config_and_report() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("small.toml"),
        "[simulation]\nseed = 5\nracks = 1\ndays = 1.0\nslot_hours = 6.0\n\n[train]\nepochs = 2\n",
    )
    .unwrap();
    let out = stdout(&colosla(&["train", "--config", "small.toml", "--out", "m.ckpt", "--report", "r.json"], dir.path()));
    assert!(out.contains("param_count=99756"), "{out}");
    assert!(out.contains("epochs=2"), "{out}");
    assert!(dir.path().join("m.ckpt").exists());
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("r.json")).unwrap()).unwrap();
    assert_eq!(report["rules"].as_array().unwrap().len(), 3);

    stdout(&colosla(&["simulate", "--seed", "6", "--racks", "1", "--days", "0.5", "--out", "t.csv"], dir.path()));
    let inferred = stdout(&colosla(&["infer", "t.csv", "--model", "m.ckpt", "--out-dir", "run"], dir.path()));
    assert!(inferred.starts_with("events="), "{inferred}");
}
