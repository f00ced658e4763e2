//! Wire protocol between the streaming server and its clients.
//!
//! Every message is one UTF-8 JSON text object with a `seq` number and a
//! `type` tag. Frame payloads are base64 (standard alphabet, padded) of
//! row-major 8-bit grayscale pixels. See `PROTOCOL.md` for the byte layout.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use cvd_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Result, ServiceError};

/// A message with its per-direction sequence number.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Envelope<M> {
    pub seq: u64,
    #[serde(flatten)]
    pub body: M,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientMessage {
    /// `num_chunks: null` streams until stopped or the budget runs out.
    Start {
        condition_id: u32,
        num_chunks: Option<u64>,
        seed: u64,
        steps: u32,
    },
    SetCondition {
        condition_id: u32,
    },
    /// One frame (`height * width` pixels) used as the next chunk.
    InjectImage {
        #[serde(with = "b64")]
        frame: Vec<u8>,
    },
    Stop,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    SessionInfo {
        height: u32,
        width: u32,
        chunk_frames: u32,
        condition_count: u32,
        fps_estimate: f64,
    },
    Chunk {
        index: u64,
        condition_id: u32,
        wall_ms: f64,
        #[serde(with = "b64")]
        frames: Vec<u8>,
    },
    /// A condition switch and the first chunk it applies to.
    Ack {
        condition_id: u32,
        effective_chunk: u64,
    },
    Error {
        code: String,
        detail: String,
    },
    End {
        chunks: u64,
        frames: u64,
        reason: String,
    },
}

mod b64 {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&STANDARD.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<u8>, D::Error> {
        let text = String::deserialize(d)?;
        STANDARD.decode(text.as_bytes()).map_err(serde::de::Error::custom)
    }
}

pub fn encode<M: Serialize>(msg: &Envelope<M>) -> String {
    serde_json::to_string(msg).expect("protocol messages always serialize")
}

pub fn decode<M: for<'de> Deserialize<'de>>(text: &str) -> Result<Envelope<M>> {
    serde_json::from_str(text).map_err(|e| ServiceError::Malformed(e.to_string()))
}

/// `round((x + 1) * 127.5)` clamped to `0..=255`.
pub fn quantize(x: f32) -> u8 {
    ((x + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

pub fn dequantize(p: u8) -> f32 {
    p as f32 / 127.5 - 1.0
}

/// Frames `(n, h, w, 1)` as row-major bytes.
pub fn frames_to_bytes(frames: &Tensor<f32>) -> Vec<u8> {
    frames.data().iter().map(|&v| quantize(v)).collect()
}

pub fn bytes_to_frames(bytes: &[u8], height: usize, width: usize) -> Result<Tensor<f32>> {
    let frame = height * width;
    if frame == 0 || bytes.is_empty() || bytes.len() % frame != 0 {
        return Err(ServiceError::Malformed(format!("{} bytes is not a whole number of {height}x{width} frames", bytes.len())));
    }
    Tensor::new(vec![bytes.len() / frame, height, width, 1], bytes.iter().map(|&p| dequantize(p)).collect()).map_err(Into::into)
}

/// Assigns strictly increasing sequence numbers to outgoing messages.
#[derive(Debug, Default)]
pub struct Sequencer {
    next: u64,
}

impl Sequencer {
    pub fn wrap<M>(&mut self, body: M) -> Envelope<M> {
        self.next += 1;
        Envelope { seq: self.next, body }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantization_endpoints() {
        assert_eq!(quantize(-1.0), 0);
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(0.0), 128);
        assert_eq!(quantize(-7.0), 0);
        assert_eq!(quantize(f32::NAN), 0);
        for p in 0..=255u8 {
            assert_eq!(quantize(dequantize(p)), p);
        }
    }

    #[test]
    fn wire_shape() {
        let m = Envelope { seq: 3, body: ClientMessage::Start { condition_id: 1, num_chunks: None, seed: 9, steps: 4 } };
        assert_eq!(encode(&m), r#"{"seq":3,"type":"start","condition_id":1,"num_chunks":null,"seed":9,"steps":4}"#);
        let c = Envelope { seq: 1, body: ServerMessage::Chunk { index: 0, condition_id: 2, wall_ms: 1.5, frames: vec![0, 255, 128] } };
        assert_eq!(encode(&c), r#"{"seq":1,"type":"chunk","index":0,"condition_id":2,"wall_ms":1.5,"frames":"AP+A"}"#);
        assert_eq!(decode::<ClientMessage>(r#"{"seq":4,"type":"stop"}"#).unwrap().body, ClientMessage::Stop);
    }

    #[test]
    fn malformed_inputs_are_errors() {
        for bad in [
            "",
            "{",
            r#"{"type":"stop"}"#,
            r#"{"seq":1,"type":"launch"}"#,
            r#"{"seq":1,"type":"start","condition_id":-1,"num_chunks":1,"seed":0,"steps":4}"#,
            r#"{"seq":1,"type":"inject_image","frame":"***"}"#,
            r#"{"seq":"1","type":"stop"}"#,
        ] {
            assert!(decode::<ClientMessage>(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn all_zero_payload_is_black() {
        let f = bytes_to_frames(&[0; 8], 2, 2).unwrap();
        assert!(f.data().iter().all(|&v| v == -1.0));
        assert_eq!(f.shape(), &[2, 2, 2, 1]);
        assert!(bytes_to_frames(&[0; 7], 2, 2).is_err());
    }
}
