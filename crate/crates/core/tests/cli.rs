use std::process::Command;

fn podec(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_podec")).args(args).output().expect("binary runs")
}

#[test]
fn unknown_system_fails_with_message() {
    let dir = tempfile::tempdir().unwrap();
    let out = podec(&["pipeline", "--system", "nope", "--out", dir.path().to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));
}

#[test]
fn malformed_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "samples = \"many\"\n").unwrap();
    let out = podec(&["table1", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert!(!out.status.success());
}

#[test]
fn json_rows_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let out = podec(&["enumerate", "--m", "2", "--n", "3", "--format", "json", "--out", dir.path().to_str().unwrap()]);
    assert!(out.status.success());
    let rows: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("rows.json")).unwrap()).unwrap();
    assert!(rows.as_array().is_some_and(|r| !r.is_empty()));
    for f in ["record.json", "summary.md"] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
}
