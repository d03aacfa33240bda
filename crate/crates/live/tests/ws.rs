use std::net::SocketAddr;
use std::time::Duration;

use futures_util::{SinkExt, StreamExt};
use gbp_core::scenarios::slam::WorldConfig;
use gbp_core::snapshot::Snapshot;
use gbp_live::{app, ClientCommand, Dir, LoopConfig, ServerFrame, Session};
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream};
use tokio::time::timeout;
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::{connect_async, MaybeTlsStream, WebSocketStream};

type Client = WebSocketStream<MaybeTlsStream<TcpStream>>;

const WAIT: Duration = Duration::from_secs(20);

async fn start(seed: u64, step_rate: f64) -> SocketAddr {
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let session = Session::new(seed, WorldConfig::default()).unwrap();
    let router = app(
        session,
        LoopConfig {
            frame_rate: 30.0,
            step_rate,
        },
    );
    tokio::spawn(async move { axum::serve(listener, router).await.unwrap() });
    addr
}

async fn connect(addr: SocketAddr) -> Client {
    connect_async(format!("ws://{addr}/ws")).await.unwrap().0
}

async fn next_frame(ws: &mut Client) -> ServerFrame {
    loop {
        let msg = timeout(WAIT, ws.next())
            .await
            .expect("frame in time")
            .unwrap()
            .unwrap();
        if let Message::Text(t) = msg {
            return serde_json::from_str(t.as_str()).unwrap();
        }
    }
}

async fn next_snapshot(ws: &mut Client) -> Snapshot {
    loop {
        if let ServerFrame::Snapshot(s) = next_frame(ws).await {
            s.validate().unwrap();
            return s;
        }
    }
}

async fn send(ws: &mut Client, cmd: &ClientCommand) {
    ws.send(Message::Text(serde_json::to_string(cmd).unwrap().into()))
        .await
        .unwrap();
}

/// Sends `cmd`, skips snapshots until its ack, and returns the ack.
async fn command(ws: &mut Client, cmd: ClientCommand) -> ServerFrame {
    send(ws, &cmd).await;
    loop {
        match next_frame(ws).await {
            ServerFrame::Snapshot(_) => continue,
            other => return other,
        }
    }
}

fn poses(s: &Snapshot) -> usize {
    s.variables
        .iter()
        .filter(|v| v.label.starts_with("pose"))
        .count()
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn healthz_says_ok() {
    let addr = start(1, 60.0).await;
    let mut tcp = TcpStream::connect(addr).await.unwrap();
    tcp.write_all(b"GET /healthz HTTP/1.1\r\nHost: x\r\nConnection: close\r\n\r\n")
        .await
        .unwrap();
    let mut body = String::new();
    tcp.read_to_string(&mut body).await.unwrap();
    assert!(body.starts_with("HTTP/1.1 200"), "{body}");
    assert!(body.ends_with("\r\n\r\nok"), "{body}");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn frames_stream_with_growing_iterations() {
    let addr = start(2, 200.0).await;
    let mut ws = connect(addr).await;
    let first = next_snapshot(&mut ws).await;
    assert_eq!(first.schema_version, 1);
    assert_eq!(poses(&first), 1);
    let mut last = first.iteration;
    for _ in 0..10 {
        let s = next_snapshot(&mut ws).await;
        assert!(s.iteration > last, "{} after {last}", s.iteration);
        last = s.iteration;
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn move_shows_up_in_the_next_frame() {
    let addr = start(3, 200.0).await;
    let mut ws = connect(addr).await;
    let before = next_snapshot(&mut ws).await;
    let ack = command(&mut ws, ClientCommand::Move { dir: Dir::W }).await;
    let ServerFrame::Ack { cmd, iteration } = ack else {
        panic!("expected ack, got {ack:?}");
    };
    assert_eq!(cmd, ClientCommand::Move { dir: Dir::W });
    assert!(iteration >= before.iteration);
    let after = next_snapshot(&mut ws).await;
    assert_eq!(poses(&after), poses(&before) + 1);
    assert!(after.factors.len() > before.factors.len());
    assert!(after.iteration >= iteration);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn malformed_commands_get_error_frames() {
    let addr = start(4, 60.0).await;
    let mut ws = connect(addr).await;
    for bad in [
        r#"{"type":"teleport"}"#,
        "{",
        r#"{"type":"move","dir":"x"}"#,
    ] {
        ws.send(Message::Text(bad.into())).await.unwrap();
        let reply = loop {
            match next_frame(&mut ws).await {
                ServerFrame::Snapshot(_) => continue,
                other => break other,
            }
        };
        assert!(matches!(reply, ServerFrame::Error { .. }), "{reply:?}");
    }
    let reply = command(&mut ws, ClientCommand::ScalePrecision { multiplier: 0.0 }).await;
    assert!(matches!(reply, ServerFrame::Error { .. }));
    let ack = command(&mut ws, ClientCommand::Pause {}).await;
    assert!(matches!(ack, ServerFrame::Ack { .. }));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn pause_and_resume() {
    let addr = start(5, 200.0).await;
    let mut ws = connect(addr).await;
    next_snapshot(&mut ws).await;
    let ServerFrame::Ack {
        iteration: paused_at,
        ..
    } = command(&mut ws, ClientCommand::Pause {}).await
    else {
        panic!("pause not acknowledged");
    };
    // A state change while paused still publishes, at the same stamp.
    command(&mut ws, ClientCommand::Move { dir: Dir::D }).await;
    let s = next_snapshot(&mut ws).await;
    assert_eq!(s.iteration, paused_at);
    assert_eq!(poses(&s), 2);
    tokio::time::sleep(Duration::from_millis(200)).await;
    let ServerFrame::Ack { iteration, .. } = command(&mut ws, ClientCommand::Resume {}).await
    else {
        panic!("resume not acknowledged");
    };
    assert_eq!(iteration, paused_at);
    let mut s = next_snapshot(&mut ws).await;
    while s.iteration == paused_at {
        s = next_snapshot(&mut ws).await;
    }
    assert!(s.iteration > paused_at);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn batch_overlay_on_request() {
    let addr = start(6, 200.0).await;
    let mut ws = connect(addr).await;
    command(&mut ws, ClientCommand::Move { dir: Dir::D }).await;
    let plain = next_snapshot(&mut ws).await;
    assert!(plain.batch.is_none());
    command(&mut ws, ClientCommand::RequestBatchOverlay {}).await;
    let s = next_snapshot(&mut ws).await;
    let block = s.batch.as_ref().expect("overlay in the next frame");
    assert_eq!(block.variables.len(), s.variables.len());
    assert!(s.metrics.cov_ratio_census.is_some());
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn scripted_session_round_trip() {
    let addr = start(7, 0.0).await;
    let mut ws = connect(addr).await;
    command(&mut ws, ClientCommand::SetRobust { on: true }).await;
    let mut moves = 0;
    for key in "wwddssaawd".chars() {
        let dir = serde_json::from_value(serde_json::Value::String(key.to_string())).unwrap();
        let before = next_snapshot(&mut ws).await;
        let ack = command(&mut ws, ClientCommand::Move { dir }).await;
        assert!(matches!(ack, ServerFrame::Ack { .. }));
        moves += 1;
        let after = next_snapshot(&mut ws).await;
        assert_eq!(poses(&after), 1 + moves);
        assert!(after.factors.len() > before.factors.len());
        assert!(after.factors.iter().all(|f| f.robust_class.is_some()));
    }
    command(&mut ws, ClientCommand::ScalePrecision { multiplier: 100.0 }).await;
    let s = next_snapshot(&mut ws).await;
    assert_eq!(poses(&s), 1 + moves);
    assert!(s.variables.iter().all(|v| v.gt.is_some()));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn idle_client_does_not_stall_others() {
    let addr = start(8, 200.0).await;
    let mut idle = connect(addr).await;
    let mut busy = connect(addr).await;
    let start_it = next_snapshot(&mut busy).await.iteration;
    let mut last = start_it;
    for _ in 0..15 {
        last = next_snapshot(&mut busy).await.iteration;
    }
    assert!(last > start_it + 15);
    // The idle client catches up to recent state rather than a backlog.
    let mut s = next_snapshot(&mut idle).await;
    for _ in 0..5 {
        s = next_snapshot(&mut idle).await;
    }
    assert!(s.iteration > start_it);
    command(&mut idle, ClientCommand::Pause {}).await;
}
