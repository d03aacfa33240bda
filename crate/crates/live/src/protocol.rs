//! Wire format: one JSON object per WebSocket text frame.

use gbp_core::scenarios::slam::Command;
use gbp_core::snapshot::Snapshot;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dir {
    #[serde(rename = "w")]
    W,
    #[serde(rename = "a")]
    A,
    #[serde(rename = "s")]
    S,
    #[serde(rename = "d")]
    D,
}

impl Dir {
    pub fn command(self) -> Command {
        match self {
            Dir::W => Command::Up,
            Dir::A => Command::Left,
            Dir::S => Command::Down,
            Dir::D => Command::Right,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleName {
    #[serde(alias = "synchronous")]
    Sync,
    Random,
    Floodfill,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClientCommand {
    Move { dir: Dir },
    SetRobust { on: bool },
    ScalePrecision { multiplier: f64 },
    SetSchedule { kind: ScheduleName },
    Pause {},
    Resume {},
    RequestBatchOverlay {},
}

impl ClientCommand {
    pub fn parse(text: &str) -> Result<Self, String> {
        serde_json::from_str(text).map_err(|e| format!("invalid command: {e}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerFrame {
    Snapshot(Snapshot),
    Ack { cmd: ClientCommand, iteration: u64 },
    Error { detail: String },
}

impl ServerFrame {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("frames are always serializable")
    }

    pub fn iteration(&self) -> Option<u64> {
        match self {
            ServerFrame::Snapshot(s) => Some(s.iteration),
            ServerFrame::Ack { iteration, .. } => Some(*iteration),
            ServerFrame::Error { .. } => None,
        }
    }
}
