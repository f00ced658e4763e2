//! Websocket front end: one [`SessionDriver`] per connection, generation on
//! a blocking worker, control messages through an ordered queue.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::mpsc as std_mpsc;
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::IntoResponse;
use axum::routing::get;
use axum::Router;
use cvd_core::model::ModelWeights;
use cvd_core::schedule::NoiseSchedule;
use cvd_core::stream::{GenerationSession, SessionConfig};
use futures_util::{SinkExt, StreamExt};
use tokio::net::TcpListener;
use tokio::sync::{mpsc, Semaphore};

use crate::error::{Result, ServiceError};
use crate::protocol::{encode, Envelope, Sequencer, ServerMessage};
use crate::session::{SessionDriver, SessionLimits};

#[derive(Clone, Debug, PartialEq)]
pub struct ServerConfig {
    pub bind: SocketAddr,
    pub weights: PathBuf,
    pub max_sessions: usize,
    pub frame_budget: u64,
    pub heartbeat: Duration,
    pub chunk: usize,
    pub window_chunks: usize,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            bind: SocketAddr::from(([127, 0, 0, 1], 8765)),
            weights: PathBuf::from("student.cvwt"),
            max_sessions: 4,
            frame_budget: 20_000,
            heartbeat: Duration::from_secs(15),
            chunk: 4,
            window_chunks: 5,
        }
    }
}

impl ServerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frame_budget == 0 {
            return Err(ServiceError::Config("frame budget must be positive".into()));
        }
        if self.max_sessions == 0 {
            return Err(ServiceError::Config("at least one session must be allowed".into()));
        }
        if self.chunk == 0 || self.window_chunks < 2 || self.heartbeat.is_zero() {
            return Err(ServiceError::Config("chunk, window and heartbeat must be positive (window >= 2)".into()));
        }
        Ok(())
    }
}

pub struct Shared {
    weights: Arc<ModelWeights<f32>>,
    limits: SessionLimits,
    heartbeat: Duration,
    sessions: Arc<Semaphore>,
}

impl Shared {
    pub fn new(weights: ModelWeights<f32>, cfg: &ServerConfig) -> Result<Arc<Self>> {
        cfg.validate()?;
        let weights = Arc::new(weights);
        let fps_estimate = measure_fps(&weights, cfg.chunk, cfg.window_chunks)?;
        let limits = SessionLimits { chunk: cfg.chunk, window_chunks: cfg.window_chunks, frame_budget: cfg.frame_budget, fps_estimate };
        Ok(Arc::new(Self { weights, limits, heartbeat: cfg.heartbeat, sessions: Arc::new(Semaphore::new(cfg.max_sessions)) }))
    }

    pub fn limits(&self) -> &SessionLimits {
        &self.limits
    }
}

/// Frames per second of one warm chunk.
fn measure_fps(weights: &Arc<ModelWeights<f32>>, chunk: usize, window_chunks: usize) -> Result<f64> {
    let cfg = SessionConfig { chunk, window_chunks, ..Default::default() };
    let mut s = GenerationSession::new(weights.clone(), NoiseSchedule::cosine(weights.config().max_t)?, cfg)?;
    s.generate_chunk()?;
    let start = Instant::now();
    s.generate_chunk()?;
    Ok(chunk as f64 / start.elapsed().as_secs_f64().max(1e-9))
}

pub fn router(shared: Arc<Shared>) -> Router {
    Router::new().route("/ws", get(upgrade)).with_state(shared)
}

pub async fn serve(listener: TcpListener, shared: Arc<Shared>) -> std::io::Result<()> {
    axum::serve(listener, router(shared)).await
}

async fn upgrade(ws: WebSocketUpgrade, State(shared): State<Arc<Shared>>) -> impl IntoResponse {
    ws.on_upgrade(move |socket| connection(socket, shared))
}

enum Control {
    Text(String),
    Binary,
}

async fn connection(socket: WebSocket, shared: Arc<Shared>) {
    let (mut tx, mut rx) = socket.split();
    let Ok(_permit) = shared.sessions.clone().try_acquire_owned() else {
        let busy = Sequencer::default().wrap(ServerMessage::Error { code: "busy".into(), detail: "session limit reached".into() });
        let _ = tx.send(Message::Text(encode(&busy))).await;
        let _ = tx.send(Message::Close(None)).await;
        return;
    };
    let driver = match SessionDriver::new(shared.weights.clone(), shared.limits.clone()) {
        Ok(d) => d,
        Err(e) => {
            tracing::error!("session setup failed: {e}");
            return;
        }
    };

    let (ctl_tx, ctl_rx) = std_mpsc::channel::<Control>();
    let (out_tx, mut out_rx) = mpsc::unbounded_channel::<Envelope<ServerMessage>>();
    let worker = tokio::task::spawn_blocking(move || run_worker(driver, ctl_rx, out_tx));

    let heartbeat = shared.heartbeat;
    let writer = tokio::spawn(async move {
        let mut ticker = tokio::time::interval(heartbeat);
        ticker.tick().await;
        loop {
            tokio::select! {
                msg = out_rx.recv() => match msg {
                    Some(m) => if tx.send(Message::Text(encode(&m))).await.is_err() { return },
                    None => {
                        let _ = tx.send(Message::Close(None)).await;
                        return;
                    }
                },
                _ = ticker.tick() => if tx.send(Message::Ping(Vec::new())).await.is_err() { return },
            }
        }
    });

    while let Some(Ok(msg)) = rx.next().await {
        let ctl = match msg {
            Message::Text(t) => Control::Text(t),
            Message::Binary(_) => Control::Binary,
            Message::Close(_) => break,
            Message::Ping(_) | Message::Pong(_) => continue,
        };
        if ctl_tx.send(ctl).is_err() {
            break;
        }
    }
    drop(ctl_tx);
    let _ = worker.await;
    let _ = writer.await;
}

/// Drains queued control messages before every chunk; blocks on the queue
/// while idle.
fn run_worker(mut driver: SessionDriver, ctl: std_mpsc::Receiver<Control>, out: mpsc::UnboundedSender<Envelope<ServerMessage>>) {
    let handle = |driver: &mut SessionDriver, c: Control| match c {
        Control::Text(t) => driver.on_text(&t),
        Control::Binary => driver.fail("malformed", "binary frames are not part of the protocol".into()),
    };
    loop {
        loop {
            match ctl.try_recv() {
                Ok(c) => {
                    for m in handle(&mut driver, c) {
                        if out.send(m).is_err() {
                            return;
                        }
                    }
                }
                Err(std_mpsc::TryRecvError::Empty) => break,
                Err(std_mpsc::TryRecvError::Disconnected) => return,
            }
        }
        if driver.is_finished() {
            return;
        }
        let msgs = if driver.is_running() {
            driver.step()
        } else {
            match ctl.recv() {
                Ok(c) => handle(&mut driver, c),
                Err(_) => return,
            }
        };
        for m in msgs {
            if out.send(m).is_err() {
                return;
            }
        }
    }
}
