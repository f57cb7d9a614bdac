use std::fs;
use std::process::Command;

use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_sdde-bem"));
    c.env_remove("SDDE_BEM_THREADS").env("RUST_LOG", "error");
    c
}

#[test]
fn process_exit_codes() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"rate":{"deltas":[0.5,0.25,0.125],"delta_ref":0.0078125,"horizon":1.0}}"#).unwrap();
    let out = bin().arg("rate").arg("--config").arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("at least 4"));
    let out = bin().arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    for cmd in ["simulate", "strong-error", "rate", "invariant", "ergodicity", "check"] {
        assert!(String::from_utf8_lossy(&out.stdout).contains(cmd));
    }
}

#[test]
fn threads_from_environment() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"paths":3,"simulate":{"delta":0.1,"horizon":1.0}}"#).unwrap();
    let mut outputs = Vec::new();
    for threads in ["1", "2"] {
        let out_dir = dir.path().join(format!("out{threads}"));
        let out = bin()
            .env("SDDE_BEM_THREADS", threads)
            .args(["simulate", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(&out_dir)
            .output()
            .unwrap();
        assert!(out.status.success());
        assert!(String::from_utf8_lossy(&out.stdout).contains("3 paths"));
        let mut files: Vec<_> = fs::read_dir(&out_dir).unwrap().map(|e| fs::read(e.unwrap().path()).unwrap()).collect();
        files.sort();
        outputs.push(files);
    }
    assert_eq!(outputs[0], outputs[1]);
    let out = bin().env("SDDE_BEM_THREADS", "lots").arg("simulate").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}
