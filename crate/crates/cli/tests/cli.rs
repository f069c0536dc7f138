use std::path::Path;
use std::process::{Command, Output};

fn sessrecon(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sessrecon")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = sessrecon(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn full_pipeline_from_the_command_line() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus.pcap");
    let stdout = ok(&["synth", "--sessions", "24", "--seed", "4", "--out", s(&corpus)]);
    assert!(stdout.contains("in 24 sessions"), "{stdout}");

    let stdout = ok(&["ingest", s(&corpus), "--out", s(&dir.path().join("ingest"))]);
    assert!(stdout.contains("24 sessions"), "{stdout}");

    let config = dir.path().join("run.toml");
    std::fs::write(&config, "max_epochs = 50\n[model]\narch = \"gru\"\nhidden_dim = 8\nlatent_dim = 4\n").unwrap();
    let run = dir.path().join("run");
    let stdout = ok(&["train", "-c", s(&config), "--input", s(&corpus), "--out", s(&run), "--max-epochs", "2"]);
    assert!(stdout.contains("gru: best validation loss"), "{stdout}");
    assert!(stdout.contains("of 2"), "flag should override the file: {stdout}");
    assert!(run.join("manifest.json").exists());

    let checkpoint = run.join("checkpoint.json");
    let stdout = ok(&["evaluate", "--checkpoint", s(&checkpoint), "--input", s(&corpus), "--out", s(&dir.path().join("eval"))]);
    assert!(stdout.contains("tcp_seq"), "{stdout}");

    let rebuilt = dir.path().join("rebuilt.pcap");
    let violations = dir.path().join("violations.csv");
    let stdout = ok(&[
        "reconstruct",
        "--checkpoint",
        s(&checkpoint),
        "--input",
        s(&corpus),
        "--output",
        s(&rebuilt),
        "--violations",
        s(&violations),
        "--disable",
        "R9",
    ]);
    assert!(stdout.contains("0 remain"), "{stdout}");
    assert!(rebuilt.exists() && violations.exists());
}

#[test]
fn bad_input_fails_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    std::fs::write(&config, "epochs = 3\n").unwrap();
    let out = sessrecon(&["train", "-c", s(&config)]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error: loading"), "{err}");

    let out = sessrecon(&["train", "--arch", "cnn"]);
    assert_eq!(out.status.code(), Some(2));

    let missing = dir.path().join("nope.pcap");
    let out = sessrecon(&["ingest", s(&missing), "--out", s(&dir.path().join("o"))]);
    assert!(!out.status.success());
    assert!(!dir.path().join("o").exists());
}
