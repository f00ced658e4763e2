//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::Command;

use cvd_service::manifest::{FileRecord, Manifest};
use cvd_service::protocol::{ClientMessage, ServerMessage};
use rand::Rng;

pub const TINY_INI: &str = "\
seed = 5
chunk = 2
[data]
videos = 100
frames = 4
height = 8
width = 8
[model]
patch = 4
dim = 16
depth = 1
heads = 2
[teacher]
iterations = 4
batch_size = 2
[causal]
iterations = 3
batch_size = 2
[ode]
pairs = 4
solver_steps = 4
[regression]
iterations = 3
batch_size = 2
[dmd]
iterations = 2
batch_size = 1
[eval]
samples_per_cond = 25
teacher_steps = 4
long_multiple = 2
degradation_streams = 50
";

pub fn causvid(home: &Path, args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_causvid")).args(args).env("CAUSVID_HOME", home).env("RUST_LOG", "warn").output().unwrap();
    assert!(out.status.success(), "causvid {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

/// Run every offline stage into `home`; returns the manifests by stage.
pub fn pipeline(home: &Path, seed: &str) -> Vec<Manifest> {
    let ini = home.join("tiny.ini");
    std::fs::create_dir_all(home).unwrap();
    std::fs::write(&ini, TINY_INI).unwrap();
    let ini = ini.to_str().unwrap();
    let p = |name: &str| home.join(name).to_str().unwrap().to_string();
    let c = ["--seed", seed, "--config", ini];
    let run = |extra: &[&str]| {
        let args: Vec<&str> = extra.iter().copied().chain(c.iter().copied()).collect();
        causvid(home, &args);
    };
    run(&["gen-data"]);
    run(&["train-teacher", "--data", &p("data.cvds"), "--eval"]);
    run(&["finetune-causal", "--teacher", &p("teacher.cvwt"), "--data", &p("data.cvds")]);
    run(&["gen-ode-pairs", "--teacher", &p("teacher.cvwt")]);
    run(&["init-student", "--teacher", &p("teacher.cvwt"), "--pairs", &p("pairs.cvop")]);
    run(&["distill", "--student", &p("student_init.cvwt"), "--teacher", &p("teacher.cvwt"), "--data", &p("data.cvds")]);
    run(&["generate", "--weights", &p("student.cvwt"), "--chunks", "3", "--switch", "1:2"]);
    run(&["eval", "--weights", &p("student.cvwt"), "--data", &p("data.cvds")]);
    run(&["bench", "--weights", &p("student.cvwt"), "--teacher", &p("teacher.cvwt"), "--chunks", "2", "--runs", "1"]);
    run(&["ablate", "--teacher", &p("teacher.cvwt"), "--causal", &p("causal.cvwt"), "--pairs", &p("pairs.cvop"), "--data", &p("data.cvds")]);
    [
        "data.cvds",
        "teacher.cvwt",
        "causal.cvwt",
        "pairs.cvop",
        "student_init.cvwt",
        "student.cvwt",
        "stream.cvds",
        "report.txt",
        "bench.txt",
        "ablation/ablation.csv",
    ]
    .iter()
    .map(|f| Manifest::read(&Manifest::path_for(&home.join(f))).unwrap())
    .collect()
}

pub fn stable(records: &[FileRecord], home: &Path) -> Vec<(PathBuf, String)> {
    records.iter().filter(|r| !r.timing).map(|r| (r.path.strip_prefix(home).unwrap().to_path_buf(), r.sha256.clone())).collect()
}

pub fn free_port() -> u16 {
    std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

/// Chunk payloads of one `num_chunks` session against a running server.
pub fn stream_once(port: u16, seed: u64) -> Vec<String> {
    use tokio_tungstenite::tungstenite::{connect, Message};
    let url = format!("ws://127.0.0.1:{port}/ws");
    let mut ws = loop {
        match connect(url.as_str()) {
            Ok((ws, _)) => break ws,
            Err(_) => std::thread::sleep(std::time::Duration::from_millis(100)),
        }
    };
    let start = format!(r#"{{"seq":1,"type":"start","condition_id":2,"num_chunks":3,"seed":{seed},"steps":4}}"#);
    ws.send(Message::Text(start)).unwrap();
    let mut frames = Vec::new();
    loop {
        let Message::Text(t) = ws.read().unwrap() else { continue };
        let v: serde_json::Value = serde_json::from_str(&t).unwrap();
        match v["type"].as_str().unwrap() {
            "chunk" => frames.push(v["frames"].as_str().unwrap().to_string()),
            "end" => break,
            _ => {}
        }
    }
    frames
}

pub fn random_client<R: Rng>(rng: &mut R) -> ClientMessage {
    match rng.gen_range(0..4) {
        0 => ClientMessage::Start {
            condition_id: rng.gen(),
            num_chunks: if rng.gen() { Some(rng.gen()) } else { None },
            seed: rng.gen(),
            steps: rng.gen_range(0..8),
        },
        1 => ClientMessage::SetCondition { condition_id: rng.gen() },
        2 => ClientMessage::InjectImage { frame: (0..rng.gen_range(0..300)).map(|_| rng.gen()).collect() },
        _ => ClientMessage::Stop,
    }
}

pub fn random_server<R: Rng>(rng: &mut R) -> ServerMessage {
    let word = |rng: &mut R| (0..rng.gen_range(0..12)).map(|_| rng.gen_range(' '..='~')).collect::<String>() + "é\"\\\n";
    match rng.gen_range(0..5) {
        0 => ServerMessage::SessionInfo {
            height: rng.gen(),
            width: rng.gen(),
            chunk_frames: rng.gen(),
            condition_count: rng.gen(),
            fps_estimate: rng.gen::<f64>() * 1e4,
        },
        1 => ServerMessage::Chunk {
            index: rng.gen(),
            condition_id: rng.gen(),
            wall_ms: rng.gen::<f64>() * 1e3,
            frames: (0..rng.gen_range(0..1100)).map(|_| rng.gen()).collect(),
        },
        2 => ServerMessage::Ack { condition_id: rng.gen(), effective_chunk: rng.gen() },
        3 => ServerMessage::Error { code: word(rng), detail: word(rng) },
        _ => ServerMessage::End { chunks: rng.gen(), frames: rng.gen(), reason: word(rng) },
    }
}

/// Byte-level damage of a valid message: truncation, flips, splices.
pub fn corrupt<R: Rng>(rng: &mut R, text: &str) -> String {
    let mut b = text.as_bytes().to_vec();
    match rng.gen_range(0..5) {
        0 => b.truncate(rng.gen_range(0..b.len())),
        1 => {
            for _ in 0..rng.gen_range(1..4) {
                let i = rng.gen_range(0..b.len());
                b[i] = rng.gen();
            }
        }
        2 => {
            let i = rng.gen_range(0..b.len());
            b.insert(i, *b"{}[]\",:0-e\\".get(rng.gen_range(0..11)).unwrap());
        }
        3 => return text.replacen("\"seq\":", "\"seq\":-", 1).replacen("\"type\":\"", "\"type\":\"x", rng.gen_range(0..2)),
        _ => return (0..rng.gen_range(0..40)).map(|_| rng.gen::<char>()).collect(),
    }
    String::from_utf8_lossy(&b).into_owned()
}
