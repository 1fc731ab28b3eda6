use std::fs;
use std::process::{Command, Output};

fn moco(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_moco")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();

    assert_eq!(code(&moco(&["--help"])), 0);
    assert_eq!(code(&moco(&["frobnicate"])), 1);
    assert_eq!(code(&moco(&["weights", "--out", d, "--kappa", "2"])), 1);
    assert_eq!(code(&moco(&["gen", "--out", d, "--problem", "MOTSP", "--n", "5", "--kappa", "2", "--count", "x"])), 1);

    let w = moco(&["weights", "--out", d, "--kappa", "2", "--h", "1"]);
    assert_eq!(code(&w), 0, "{}", String::from_utf8_lossy(&w.stderr));
    assert_eq!(fs::read_to_string(dir.path().join("weights.csv")).unwrap().lines().count(), 2);

    let g = moco(&["gen", "--out", d, "--problem", "MOTSP", "--n", "5", "--kappa", "2", "--count", "2", "--seed", "3"]);
    assert_eq!(code(&g), 0);
    // Rerun from the resolved config.
    let cfg = dir.path().join("config.json");
    let again = dir.path().join("again");
    let g2 = moco(&["gen", "--config", cfg.to_str().unwrap(), "--out", again.to_str().unwrap()]);
    assert_eq!(code(&g2), 0);
    assert_eq!(fs::read(dir.path().join("instances.jsonl")).unwrap(), fs::read(again.join("instances.jsonl")).unwrap());

    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{\"kappa\": 2, \"h\": 3, \"extra\": true}").unwrap();
    assert_eq!(code(&moco(&["weights", "--config", bad.to_str().unwrap(), "--out", d])), 2);
    let missing = dir.path().join("missing.json");
    assert_eq!(code(&moco(&["train", "--config", missing.to_str().unwrap(), "--out", d])), 2);

    let ok = moco(&["gradcheck"]);
    assert_eq!(code(&ok), 0, "{}", String::from_utf8_lossy(&ok.stdout));
    let fault = moco(&["gradcheck", "--inject-fault"]);
    assert_eq!(code(&fault), 3);
    assert!(String::from_utf8_lossy(&fault.stdout).contains("FAIL"));
}
