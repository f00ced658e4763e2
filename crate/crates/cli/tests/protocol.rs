use std::sync::Arc;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use cvd_core::model::{ModelConfig, ModelWeights};
use cvd_core::Tensor;
use cvd_service::protocol::*;
use cvd_service::session::{SessionDriver, SessionLimits};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

mod common;

use common::{corrupt, random_client, random_server};

const MESSAGES: usize = 10_000;

fn vectors() -> Value {
    serde_json::from_str(include_str!("../testdata/frame_vectors.json")).unwrap()
}

#[test]
fn frame_vectors_match_the_encoder() {
    let v = vectors();
    for case in v["vectors"].as_array().unwrap() {
        let name = case["name"].as_str().unwrap();
        let dims = ["frames", "height", "width"].map(|k| case[k].as_u64().unwrap() as usize);
        let pixels: Vec<f32> = case["pixels"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap() as f32).collect();
        let bytes: Vec<u8> = case["bytes"].as_array().unwrap().iter().map(|x| x.as_u64().unwrap() as u8).collect();
        let frames = Tensor::new(vec![dims[0], dims[1], dims[2], 1], pixels).unwrap();
        assert_eq!(frames_to_bytes(&frames), bytes, "{name}");
        assert_eq!(STANDARD.encode(&bytes), case["base64"].as_str().unwrap(), "{name}");
        let back = bytes_to_frames(&bytes, dims[1], dims[2]).unwrap();
        assert_eq!(back.shape(), &[dims[0], dims[1], dims[2], 1]);
        assert_eq!(frames_to_bytes(&back), bytes, "{name}");
    }
    let text = v["chunk_message"].as_str().unwrap();
    let msg = decode::<ServerMessage>(text).unwrap();
    assert_eq!(msg.seq, 7);
    let ServerMessage::Chunk { index: 3, condition_id: 1, frames, .. } = &msg.body else { panic!("{msg:?}") };
    assert_eq!(frames, &[0, 64, 191, 255, 159, 96, 223, 32]);
    assert_eq!(encode(&msg), text);
}

#[test]
fn random_messages_round_trip_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for i in 0..MESSAGES {
        let c = Envelope { seq: rng.gen(), body: random_client(&mut rng) };
        assert_eq!(decode::<ClientMessage>(&encode(&c)).unwrap(), c, "client message {i}");
        let s = Envelope { seq: rng.gen(), body: random_server(&mut rng) };
        let text = encode(&s);
        assert_eq!(decode::<ServerMessage>(&text).unwrap(), s, "server message {i}");
        assert_eq!(encode(&decode::<ServerMessage>(&text).unwrap()), text);
    }
}

fn driver() -> SessionDriver {
    let cfg = ModelConfig { frame_h: 8, frame_w: 8, patch: 4, dim: 16, depth: 1, heads: 2, ..Default::default() };
    let w = ModelWeights::init_dense(cfg, &mut ChaCha8Rng::seed_from_u64(3), 0.4).unwrap();
    SessionDriver::new(Arc::new(w), SessionLimits { chunk: 2, window_chunks: 3, frame_budget: 64, fps_estimate: 1.0 }).unwrap()
}

#[test]
fn corrupted_messages_are_rejected_without_panicking() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (mut rejected, mut accepted) = (0, 0);
    for _ in 0..MESSAGES {
        let valid = encode(&Envelope { seq: rng.gen_range(1..100), body: random_client(&mut rng) });
        let text = corrupt(&mut rng, &valid);
        match decode::<ClientMessage>(&text) {
            Err(_) => {
                rejected += 1;
                // A fresh session answers with exactly one malformed error and ends.
                let mut d = driver();
                let out = d.on_text(&text);
                assert!(matches!(&out[..], [Envelope { seq: 1, body: ServerMessage::Error { code, .. } }] if code == "malformed"), "{text:?} -> {out:?}");
                assert!(d.is_finished());
                assert!(d.on_text(r#"{"seq":200,"type":"stop"}"#).is_empty());
            }
            Ok(m) => {
                accepted += 1;
                assert_eq!(decode::<ClientMessage>(&encode(&m)).unwrap(), m);
            }
        }
    }
    assert!(rejected > MESSAGES / 2, "only {rejected} rejected, {accepted} accepted");
}

#[test]
fn random_valid_sequences_keep_the_session_consistent() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..40 {
        let mut d = driver();
        let mut seq = 0;
        let mut last_out = 0;
        for _ in 0..30 {
            seq += rng.gen_range(1..3);
            let mut m = random_client(&mut rng);
            if let ClientMessage::Start { condition_id, steps, .. } = &mut m {
                *condition_id %= 5;
                *steps %= 6;
            }
            let mut out = d.on_text(&encode(&Envelope { seq, body: m }));
            if d.is_running() && rng.gen_bool(0.5) {
                out.extend(d.step());
            }
            for e in &out {
                assert_eq!(e.seq, last_out + 1);
                last_out = e.seq;
                if let ServerMessage::Chunk { frames, .. } = &e.body {
                    assert!(!frames.is_empty() && frames.len() % 64 == 0);
                }
            }
            if d.is_finished() {
                assert!(matches!(out.last().map(|e| &e.body), Some(ServerMessage::End { .. } | ServerMessage::Error { .. })));
                break;
            }
        }
    }
}
