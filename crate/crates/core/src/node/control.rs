//! Line-oriented control protocol spoken between the controller and nodes.
//!
//! Requests are single lines. Replies are single lines too, except `FETCH`
//! which answers with a byte-count line followed by that many raw bytes.
//!
//! ```text
//! LOAD <json>      -> OK <config digest>
//! START            -> OK
//! STOP             -> OK
//! STATUS           -> {"node":1,"phase":"running",...}
//! FETCH [OBS|LOSS] -> <n>\n<n bytes of CSV>
//! any failure      -> ERR <Kind> <message>
//! ```

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::topology::NodeId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FetchKind {
    Obs,
    Loss,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Command {
    Load(String),
    Start,
    Stop,
    Status,
    Fetch(FetchKind),
}

impl Command {
    pub fn to_line(&self) -> String {
        match self {
            Command::Load(json) => format!("LOAD {json}\n"),
            Command::Start => "START\n".into(),
            Command::Stop => "STOP\n".into(),
            Command::Status => "STATUS\n".into(),
            Command::Fetch(FetchKind::Obs) => "FETCH\n".into(),
            Command::Fetch(FetchKind::Loss) => "FETCH LOSS\n".into(),
        }
    }
}

impl FromStr for Command {
    type Err = ControlError;

    fn from_str(line: &str) -> Result<Self, Self::Err> {
        let line = line.trim_end_matches(['\r', '\n']);
        let (verb, rest) = match line.split_once(' ') {
            Some((v, r)) => (v, r.trim()),
            None => (line, ""),
        };
        let no_args = |cmd: Command| {
            if rest.is_empty() {
                Ok(cmd)
            } else {
                Err(ControlError::bad(format!("{verb} takes no arguments")))
            }
        };
        match verb.to_ascii_uppercase().as_str() {
            "LOAD" if !rest.is_empty() => Ok(Command::Load(rest.to_string())),
            "LOAD" => Err(ControlError::bad("LOAD needs a JSON config")),
            "START" => no_args(Command::Start),
            "STOP" => no_args(Command::Stop),
            "STATUS" => no_args(Command::Status),
            "FETCH" => match rest.to_ascii_uppercase().as_str() {
                "" | "OBS" => Ok(Command::Fetch(FetchKind::Obs)),
                "LOSS" => Ok(Command::Fetch(FetchKind::Loss)),
                other => Err(ControlError::bad(format!("unknown FETCH target `{other}`"))),
            },
            "" => Err(ControlError::bad("empty command")),
            other => Err(ControlError::bad(format!("unknown command `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    BadCommand,
    IllegalState,
    PeersNotReady,
    InvalidConfig,
    Io,
}

impl ErrorKind {
    fn as_str(self) -> &'static str {
        match self {
            ErrorKind::BadCommand => "BadCommand",
            ErrorKind::IllegalState => "IllegalState",
            ErrorKind::PeersNotReady => "PeersNotReady",
            ErrorKind::InvalidConfig => "InvalidConfig",
            ErrorKind::Io => "Io",
        }
    }

    fn parse(s: &str) -> Self {
        match s {
            "BadCommand" => ErrorKind::BadCommand,
            "IllegalState" => ErrorKind::IllegalState,
            "PeersNotReady" => ErrorKind::PeersNotReady,
            "InvalidConfig" => ErrorKind::InvalidConfig,
            _ => ErrorKind::Io,
        }
    }
}

/// An error as carried over the control channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ControlError {
    pub kind: ErrorKind,
    pub message: String,
}

impl ControlError {
    pub fn new(kind: ErrorKind, message: impl Into<String>) -> Self {
        Self {
            kind,
            message: message.into(),
        }
    }

    pub fn bad(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::BadCommand, message)
    }

    pub fn illegal(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::IllegalState, message)
    }

    pub fn to_line(&self) -> String {
        format!("ERR {} {}\n", self.kind.as_str(), self.message.replace('\n', " "))
    }

    /// Parses an `ERR` line; `None` if the line is not an error.
    pub fn from_line(line: &str) -> Option<Self> {
        let rest = line.trim_end().strip_prefix("ERR ")?;
        let (kind, msg) = rest.split_once(' ').unwrap_or((rest, ""));
        Some(Self::new(ErrorKind::parse(kind), msg))
    }
}

impl fmt::Display for ControlError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind.as_str(), self.message)
    }
}

impl std::error::Error for ControlError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Idle,
    Loaded,
    Running,
    Draining,
    Stopped,
}

/// Counters reported by `STATUS`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeStatus {
    pub node: NodeId,
    pub phase: Phase,
    pub config_digest: Option<String>,
    pub peers_ready: bool,
    pub missing_peers: Vec<NodeId>,
    pub rounds_sent: u64,
    pub probes_sent: u64,
    pub observations: u64,
    /// Expired probes that never got an echo.
    pub losses: u64,
    /// Every expiry, including probes whose echo showed up later. Equals the
    /// row count of the loss file once stopped.
    pub expired: u64,
    pub late_echoes: u64,
    pub unmatched_echoes: u64,
    pub pending: u64,
    pub buffer_depth: u64,
    pub flushed: u64,
    pub sink_failures: u64,
    pub write_failures: u64,
    pub max_record_us: f64,
}

impl NodeStatus {
    pub fn idle(node: NodeId) -> Self {
        Self {
            node,
            phase: Phase::Idle,
            config_digest: None,
            peers_ready: false,
            missing_peers: Vec::new(),
            rounds_sent: 0,
            probes_sent: 0,
            observations: 0,
            losses: 0,
            expired: 0,
            late_echoes: 0,
            unmatched_echoes: 0,
            pending: 0,
            buffer_depth: 0,
            flushed: 0,
            sink_failures: 0,
            write_failures: 0,
            max_record_us: 0.0,
        }
    }

    /// `probes_sent - (observations + losses + late_echoes + pending)`.
    pub fn conservation_gap(&self) -> i64 {
        self.probes_sent as i64
            - (self.observations + self.losses + self.late_echoes + self.pending) as i64
    }
}
