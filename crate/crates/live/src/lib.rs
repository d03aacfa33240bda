//! Live GBP SLAM over WebSocket.
//!
//! A single [`Session`] is owned by one thread that applies client commands,
//! runs GBP iterations and publishes the newest snapshot frame. Connections
//! read frames newest-wins, so a slow client only ever misses frames.

pub mod protocol;
pub mod server;
pub mod session;

pub use protocol::{ClientCommand, Dir, ScheduleName, ServerFrame};
pub use server::{app, serve, LoopConfig};
pub use session::Session;
