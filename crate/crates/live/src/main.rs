use std::net::SocketAddr;

use clap::Parser;
use gbp_core::scenarios::slam::WorldConfig;
use gbp_live::{serve, LoopConfig, Session};

#[derive(Debug, Parser)]
#[command(
    name = "gbp-live",
    version,
    about = "Interactive GBP SLAM over WebSocket"
)]
struct Args {
    #[arg(long, default_value = "127.0.0.1:8080")]
    bind: SocketAddr,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Frames per second pushed to clients (at most 30).
    #[arg(long, default_value_t = 30.0)]
    frame_rate: f64,
    /// GBP iterations per second; 0 runs as fast as possible.
    #[arg(long, default_value_t = 120.0)]
    step_rate: f64,
    /// Start with robust mode and outlier injection on.
    #[arg(long)]
    robust: bool,
}

#[tokio::main]
async fn main() -> std::io::Result<()> {
    let args = Args::parse();
    let config = if args.robust {
        WorldConfig::robust()
    } else {
        WorldConfig::default()
    };
    let session = Session::new(args.seed, config).map_err(std::io::Error::other)?;
    let loop_config = LoopConfig {
        frame_rate: args.frame_rate,
        step_rate: args.step_rate,
    };
    eprintln!("listening on ws://{}/ws", args.bind);
    serve(args.bind, session, loop_config).await
}
