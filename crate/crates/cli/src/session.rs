//! Transport-independent protocol state machine for one connection.

use std::sync::Arc;
use std::time::Instant;

use cvd_core::model::ModelWeights;
use cvd_core::schedule::NoiseSchedule;
use cvd_core::stream::{Chunk, GenerationSession, SessionConfig};
use cvd_core::student::STUDENT_TIMESTEPS;

use crate::error::{Result, ServiceError};
use crate::protocol::{bytes_to_frames, decode, frames_to_bytes, ClientMessage, Envelope, Sequencer, ServerMessage};

/// Settings shared by every session of a server.
#[derive(Clone, Debug, PartialEq)]
pub struct SessionLimits {
    pub chunk: usize,
    /// Chunks in the cache before the sliding window rebases.
    pub window_chunks: usize,
    /// Frames one session may emit before it is ended.
    pub frame_budget: u64,
    pub fps_estimate: f64,
}

impl Default for SessionLimits {
    fn default() -> Self {
        Self { chunk: 4, window_chunks: 5, frame_budget: 20_000, fps_estimate: 0.0 }
    }
}

/// The first `steps` student timesteps spread evenly over the four.
pub fn timesteps_for(steps: u32) -> Option<Vec<usize>> {
    let n = STUDENT_TIMESTEPS.len();
    match steps as usize {
        0 => None,
        1 => Some(vec![STUDENT_TIMESTEPS[0]]),
        s if s <= n => Some((0..s).map(|i| STUDENT_TIMESTEPS[(i * (n - 1) + (s - 1) / 2) / (s - 1)]).collect()),
        _ => None,
    }
}

enum State {
    Idle,
    Running { session: GenerationSession<f32>, remaining: Option<u64> },
    Finished,
}

pub struct SessionDriver {
    weights: Arc<ModelWeights<f32>>,
    schedule: NoiseSchedule,
    limits: SessionLimits,
    state: State,
    out: Sequencer,
    last_client_seq: Option<u64>,
    chunks_sent: u64,
    frames_sent: u64,
}

fn error(code: &str, detail: impl Into<String>) -> ServerMessage {
    ServerMessage::Error { code: code.into(), detail: detail.into() }
}

impl SessionDriver {
    pub fn new(weights: Arc<ModelWeights<f32>>, limits: SessionLimits) -> Result<Self> {
        if limits.chunk == 0 || limits.frame_budget == 0 {
            return Err(ServiceError::Config("chunk and frame budget must be positive".into()));
        }
        let schedule = NoiseSchedule::cosine(weights.config().max_t)?;
        Ok(Self { weights, schedule, limits, state: State::Idle, out: Sequencer::default(), last_client_seq: None, chunks_sent: 0, frames_sent: 0 })
    }

    pub fn is_running(&self) -> bool {
        matches!(self.state, State::Running { .. })
    }

    pub fn is_finished(&self) -> bool {
        matches!(self.state, State::Finished)
    }

    fn classes(&self) -> u32 {
        self.weights.config().null_cond() as u32
    }

    /// Handle one incoming text. Malformed input yields an error and ends
    /// the session.
    pub fn on_text(&mut self, text: &str) -> Vec<Envelope<ServerMessage>> {
        if self.is_finished() {
            return Vec::new();
        }
        let msg = match decode::<ClientMessage>(text) {
            Ok(m) => m,
            Err(e) => return self.fail("malformed", e.to_string()),
        };
        if self.last_client_seq.is_some_and(|s| msg.seq <= s) {
            return self.fail("bad_seq", format!("sequence number {} does not increase", msg.seq));
        }
        self.last_client_seq = Some(msg.seq);
        let replies = self.on_message(msg.body);
        self.wrap(replies)
    }

    /// Report a transport-level protocol violation and end the session.
    pub fn fail(&mut self, code: &str, detail: String) -> Vec<Envelope<ServerMessage>> {
        self.state = State::Finished;
        self.wrap(vec![error(code, detail)])
    }

    fn wrap(&mut self, msgs: Vec<ServerMessage>) -> Vec<Envelope<ServerMessage>> {
        msgs.into_iter().map(|m| self.out.wrap(m)).collect()
    }

    fn end(&mut self, reason: &str) -> ServerMessage {
        self.state = State::Finished;
        ServerMessage::End { chunks: self.chunks_sent, frames: self.frames_sent, reason: reason.into() }
    }

    fn on_message(&mut self, msg: ClientMessage) -> Vec<ServerMessage> {
        match msg {
            ClientMessage::Start { condition_id, num_chunks, seed, steps } => {
                if self.is_running() {
                    return vec![error("already_started", "session is already streaming")];
                }
                if condition_id >= self.classes() {
                    return vec![error("bad_condition", format!("condition {condition_id} not in 0..{}", self.classes()))];
                }
                let Some(timesteps) = timesteps_for(steps) else {
                    return vec![error("bad_steps", format!("steps must be in 1..={}", STUDENT_TIMESTEPS.len()))];
                };
                let cfg = SessionConfig {
                    chunk: self.limits.chunk,
                    timesteps,
                    seed,
                    window_chunks: self.limits.window_chunks,
                    initial_cond: condition_id as usize,
                    ..Default::default()
                };
                match GenerationSession::new(self.weights.clone(), self.schedule.clone(), cfg) {
                    Ok(session) => {
                        self.state = State::Running { session, remaining: num_chunks };
                        let m = self.weights.config();
                        let info = ServerMessage::SessionInfo {
                            height: m.frame_h as u32,
                            width: m.frame_w as u32,
                            chunk_frames: self.limits.chunk as u32,
                            condition_count: self.classes(),
                            fps_estimate: self.limits.fps_estimate,
                        };
                        if num_chunks == Some(0) {
                            return vec![info, self.end("complete")];
                        }
                        vec![info]
                    }
                    Err(e) => vec![error("bad_start", e.to_string())],
                }
            }
            ClientMessage::SetCondition { condition_id } => {
                let classes = self.classes();
                let State::Running { session, .. } = &mut self.state else {
                    return vec![error("not_started", "set_condition before start")];
                };
                if condition_id >= classes {
                    return vec![error("bad_condition", format!("condition {condition_id} not in 0..{classes}"))];
                }
                match session.set_condition(condition_id as usize) {
                    Ok(at) => vec![ServerMessage::Ack { condition_id, effective_chunk: at as u64 }],
                    Err(e) => vec![error("bad_condition", e.to_string())],
                }
            }
            ClientMessage::InjectImage { frame } => {
                let m = *self.weights.config();
                if !self.is_running() {
                    return vec![error("not_started", "inject_image before start")];
                }
                if frame.len() != m.frame_h * m.frame_w {
                    return vec![error("bad_image", format!("{} bytes for a {}x{} frame", frame.len(), m.frame_h, m.frame_w))];
                }
                let image = match bytes_to_frames(&frame, m.frame_h, m.frame_w) {
                    Ok(f) => f,
                    Err(e) => return vec![error("bad_image", e.to_string())],
                };
                let start = Instant::now();
                let State::Running { session, .. } = &mut self.state else { unreachable!() };
                match session.inject_image(&image) {
                    Ok(chunk) => self.emit(chunk, start),
                    Err(e) => vec![error("generation_failed", e.to_string())],
                }
            }
            ClientMessage::Stop => vec![self.end("stopped")],
        }
    }

    fn emit(&mut self, chunk: Chunk<f32>, start: Instant) -> Vec<ServerMessage> {
        let frames = chunk.frames.rows() as u64;
        self.chunks_sent += 1;
        self.frames_sent += frames;
        let mut out = vec![ServerMessage::Chunk {
            index: chunk.index as u64,
            condition_id: chunk.cond as u32,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
            frames: frames_to_bytes(&chunk.frames),
        }];
        if let State::Running { remaining: Some(r), .. } = &mut self.state {
            *r = r.saturating_sub(1);
            if *r == 0 {
                out.push(self.end("complete"));
            }
        }
        out
    }

    /// Generate the next chunk of a running session.
    pub fn step(&mut self) -> Vec<Envelope<ServerMessage>> {
        let k = self.limits.chunk as u64;
        let State::Running { session, .. } = &mut self.state else {
            return Vec::new();
        };
        if self.frames_sent + k > self.limits.frame_budget {
            let end = self.end("budget");
            return self.wrap(vec![end]);
        }
        let start = Instant::now();
        let msgs = match session.generate_chunk() {
            Ok(chunk) => self.emit(chunk, start),
            Err(e) => {
                let err = error("generation_failed", e.to_string());
                vec![err, self.end("error")]
            }
        };
        self.wrap(msgs)
    }
}
