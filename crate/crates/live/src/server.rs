use std::net::SocketAddr;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::Response;
use axum::routing::get;
use axum::Router;
use futures_util::{SinkExt, StreamExt};
use tokio::net::TcpListener;
use tokio::sync::mpsc::error::TryRecvError;
use tokio::sync::{mpsc, oneshot, watch};

use crate::protocol::{ClientCommand, ServerFrame};
use crate::session::Session;

/// Frames are never published faster than this.
pub const MAX_FRAME_RATE: f64 = 30.0;
pub const COMMAND_QUEUE: usize = 64;

#[derive(Debug, Clone, Copy)]
pub struct LoopConfig {
    /// Published frames per second, capped at [`MAX_FRAME_RATE`].
    pub frame_rate: f64,
    /// GBP iterations per second; 0 runs unthrottled.
    pub step_rate: f64,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            frame_rate: MAX_FRAME_RATE,
            step_rate: 120.0,
        }
    }
}

impl LoopConfig {
    fn frame_interval(&self) -> Duration {
        let rate = if self.frame_rate > 0.0 {
            self.frame_rate.min(MAX_FRAME_RATE)
        } else {
            MAX_FRAME_RATE
        };
        Duration::from_secs_f64(1.0 / rate)
    }

    fn step_interval(&self) -> Duration {
        if self.step_rate > 0.0 {
            Duration::from_secs_f64(1.0 / self.step_rate)
        } else {
            Duration::ZERO
        }
    }
}

/// A serialized frame, its iteration stamp, and how many commands the
/// session had applied when it was captured.
#[derive(Debug, Clone)]
pub struct PublishedFrame {
    pub iteration: u64,
    pub commands_applied: u64,
    pub json: Arc<str>,
}

struct Envelope {
    cmd: ClientCommand,
    reply: oneshot::Sender<(ServerFrame, u64)>,
}

#[derive(Clone)]
struct AppState {
    commands: mpsc::Sender<Envelope>,
    frames: watch::Receiver<PublishedFrame>,
}

fn publish(session: &mut Session, applied: u64, tx: &watch::Sender<PublishedFrame>) {
    match session.frame() {
        Ok(frame) => {
            tx.send_replace(PublishedFrame {
                iteration: session.iteration(),
                commands_applied: applied,
                json: frame.to_json().into(),
            });
        }
        Err(e) => eprintln!("frame capture failed: {e}"),
    }
}

/// Owns the session on its own thread: drains queued commands in arrival
/// order, steps, and publishes the newest frame. Exits once every command
/// sender is gone.
fn owner_loop(
    mut session: Session,
    config: LoopConfig,
    mut commands: mpsc::Receiver<Envelope>,
    frames: watch::Sender<PublishedFrame>,
) {
    let frame_every = config.frame_interval();
    let step_every = config.step_interval();
    let mut next_step = Instant::now();
    let mut next_frame = Instant::now() + frame_every;
    let mut dirty = false;
    let mut applied = 0u64;
    loop {
        loop {
            match commands.try_recv() {
                Ok(env) => {
                    let ack = session.apply_command(&env.cmd);
                    applied += 1;
                    let _ = env.reply.send((ack, applied));
                    dirty = true;
                }
                Err(TryRecvError::Empty) => break,
                Err(TryRecvError::Disconnected) => return,
            }
        }
        let now = Instant::now();
        if !session.paused() && now >= next_step {
            match session.step() {
                Ok(_) => dirty = true,
                Err(e) => {
                    eprintln!("step failed, pausing: {e}");
                    session.apply_command(&ClientCommand::Pause {});
                }
            }
            next_step = now + step_every;
        }
        if dirty && now >= next_frame {
            publish(&mut session, applied, &frames);
            dirty = false;
            next_frame = now + frame_every;
        }
        let mut wake = now + Duration::from_millis(2);
        if !session.paused() {
            wake = wake.min(next_step);
        }
        if dirty {
            wake = wake.min(next_frame);
        }
        let now = Instant::now();
        if wake > now {
            thread::sleep(wake - now);
        }
    }
}

/// Starts the owner thread and returns the router serving `/ws` and
/// `/healthz` for it.
pub fn app(mut session: Session, config: LoopConfig) -> Router {
    let first = match session.frame() {
        Ok(f) => f.to_json(),
        Err(e) => ServerFrame::Error {
            detail: e.to_string(),
        }
        .to_json(),
    };
    let (frame_tx, frame_rx) = watch::channel(PublishedFrame {
        iteration: session.iteration(),
        commands_applied: 0,
        json: first.into(),
    });
    let (cmd_tx, cmd_rx) = mpsc::channel(COMMAND_QUEUE);
    thread::Builder::new()
        .name("gbp-owner".into())
        .spawn(move || owner_loop(session, config, cmd_rx, frame_tx))
        .expect("owner thread starts");
    Router::new()
        .route("/healthz", get(|| async { "ok" }))
        .route("/ws", get(ws_handler))
        .with_state(AppState {
            commands: cmd_tx,
            frames: frame_rx,
        })
}

async fn ws_handler(ws: WebSocketUpgrade, State(state): State<AppState>) -> Response {
    ws.on_upgrade(move |socket| connection(socket, state))
}

async fn connection(socket: WebSocket, mut state: AppState) {
    let (mut sink, mut stream) = socket.split();
    let current = state.frames.borrow_and_update().json.clone();
    if sink
        .send(Message::Text(current.as_ref().into()))
        .await
        .is_err()
    {
        return;
    }
    loop {
        tokio::select! {
            changed = state.frames.changed() => {
                if changed.is_err() {
                    break;
                }
                let json = state.frames.borrow_and_update().json.clone();
                if sink.send(Message::Text(json.as_ref().into())).await.is_err() {
                    break;
                }
            }
            incoming = stream.next() => {
                let text = match incoming {
                    Some(Ok(Message::Text(t))) => t,
                    Some(Ok(Message::Close(_))) | None | Some(Err(_)) => break,
                    Some(Ok(_)) => continue,
                };
                let (reply, seq) = match ClientCommand::parse(text.as_str()) {
                    Ok(cmd) => submit(&state.commands, cmd).await,
                    Err(detail) => (ServerFrame::Error { detail }, None),
                };
                if sink.send(Message::Text(reply.to_json().into())).await.is_err() {
                    break;
                }
                // Drop any frame captured before this command landed.
                if let Some(seq) = seq {
                    let current = state.frames.borrow_and_update().clone();
                    if current.commands_applied >= seq
                        && sink.send(Message::Text(current.json.as_ref().into())).await.is_err()
                    {
                        break;
                    }
                }
            }
        }
    }
}

async fn submit(
    commands: &mpsc::Sender<Envelope>,
    cmd: ClientCommand,
) -> (ServerFrame, Option<u64>) {
    let (reply, rx) = oneshot::channel();
    if commands.try_send(Envelope { cmd, reply }).is_err() {
        let detail = "command queue full, try again".into();
        return (ServerFrame::Error { detail }, None);
    }
    match rx.await {
        Ok((frame, seq)) => (frame, Some(seq)),
        Err(_) => (
            ServerFrame::Error {
                detail: "session stopped".into(),
            },
            None,
        ),
    }
}

/// Binds `addr` and serves until the process stops.
pub async fn serve(addr: SocketAddr, session: Session, config: LoopConfig) -> std::io::Result<()> {
    let listener = TcpListener::bind(addr).await?;
    axum::serve(listener, app(session, config)).await
}
