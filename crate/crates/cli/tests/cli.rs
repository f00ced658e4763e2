use std::process::{Command, Stdio};

mod common;

use common::*;

#[test]
fn every_offline_stage_is_reproducible_from_its_seed() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    let ma = pipeline(&a, "5");
    let mb = pipeline(&b, "5");
    for (x, y) in ma.iter().zip(&mb) {
        assert_eq!(x.command, y.command);
        assert_eq!(x.config_hash, y.config_hash);
        assert_eq!(stable(&x.outputs, &a), stable(&y.outputs, &b), "{} outputs differ between runs", x.command);
        assert_eq!(stable(&x.inputs, &a), stable(&y.inputs, &b));
    }
    let bench = ma.iter().find(|m| m.command == "bench").unwrap();
    assert!(bench.outputs.iter().all(|r| r.timing));
    let ablate = ma.iter().find(|m| m.command == "ablate").unwrap();
    assert_eq!(ablate.outputs.len(), 5);

    let mc = pipeline(&c, "6");
    assert_ne!(stable(&ma[0].outputs, &a), stable(&mc[0].outputs, &c), "seed must matter");
}

#[test]
fn bad_settings_fail_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let ini = dir.path().join("bad.ini");
    std::fs::write(&ini, "[teacher]\nlearning_rate = 3\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_causvid"))
        .args(["gen-data", "--config", ini.to_str().unwrap()])
        .env("CAUSVID_HOME", dir.path())
        .stderr(Stdio::piped())
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("teacher.learning_rate"));
    assert!(!dir.path().join("data.cvds").exists());
}

#[test]
fn serve_streams_are_reproducible_across_server_runs() {
    let dir = tempfile::tempdir().unwrap();
    let home = dir.path();
    let ini = home.join("tiny.ini");
    std::fs::write(&ini, TINY_INI).unwrap();
    let ini = ini.to_str().unwrap();
    let data = home.join("data.cvds");
    causvid(home, &["gen-data", "--config", ini]);
    causvid(home, &["train-teacher", "--config", ini, "--data", data.to_str().unwrap()]);
    let weights = home.join("teacher.cvwt");
    let run = || {
        let port = free_port();
        let mut child = Command::new(env!("CARGO_BIN_EXE_causvid"))
            .args(["serve", "--config", ini, "--weights", weights.to_str().unwrap(), "--bind", &format!("127.0.0.1:{port}")])
            .env("RUST_LOG", "warn")
            .spawn()
            .unwrap();
        let out = (stream_once(port, 4), stream_once(port, 5));
        child.kill().unwrap();
        child.wait().unwrap();
        out
    };
    let (a4, a5) = run();
    let (b4, b5) = run();
    assert_eq!(a4.len(), 3);
    assert_eq!(a4, b4);
    assert_eq!(a5, b5);
    assert_ne!(a4, a5);
}
