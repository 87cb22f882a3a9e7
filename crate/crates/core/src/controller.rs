//! Operator side of the control plane: push a config to every node, start
//! and stop the experiment cluster-wide, and collect the result files.

use std::collections::BTreeMap;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::node::control::{Command, ControlError, ErrorKind, FetchKind, NodeStatus, Phase};
use crate::node::{loss_file_name, obs_file_name};
use crate::topology::{ClusterConfig, NodeId};

const CONNECT_TIMEOUT: Duration = Duration::from_secs(3);

#[derive(Debug, Error)]
pub enum ControllerError {
    #[error("node {0} unreachable: {1}")]
    NodeUnreachable(NodeId, String),
    #[error("node {id} acknowledged digest {got}, expected {want}")]
    DigestMismatch { id: NodeId, got: String, want: String },
    #[error("node {0}: {1}")]
    Node(NodeId, ControlError),
    #[error("node {id}: short read, expected {expected} bytes, got {got}")]
    ShortRead { id: NodeId, expected: usize, got: usize },
    #[error("node {id}: protocol error: {msg}")]
    Protocol { id: NodeId, msg: String },
    #[error("node {id}: {file} has {rows} rows but STATUS reports {status}")]
    CountMismatch { id: NodeId, file: String, rows: u64, status: u64 },
    #[error("peers not ready after {0:?}: {1}")]
    NotReady(Duration, String),
    #[error("{} of {} nodes failed: {}", .0.len(), .1, summarize_failures(.0))]
    Partial(Vec<(NodeId, String)>, usize),
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn summarize_failures(f: &[(NodeId, String)]) -> String {
    f.iter().map(|(id, e)| format!("[{id}] {e}")).collect::<Vec<_>>().join("; ")
}

impl ControllerError {
    fn node_id(&self) -> Option<NodeId> {
        match self {
            ControllerError::NodeUnreachable(id, _)
            | ControllerError::DigestMismatch { id, .. }
            | ControllerError::Node(id, _)
            | ControllerError::ShortRead { id, .. }
            | ControllerError::Protocol { id, .. }
            | ControllerError::CountMismatch { id, .. } => Some(*id),
            _ => None,
        }
    }
}

/// Per-node outcome of a cluster-wide command.
pub type NodeResults<T> = BTreeMap<NodeId, Result<T, ControllerError>>;

/// Collapses per-node results into one error listing every failure.
pub fn all_ok<T>(results: NodeResults<T>) -> Result<BTreeMap<NodeId, T>, ControllerError> {
    let total = results.len();
    let mut ok = BTreeMap::new();
    let mut failed = Vec::new();
    for (id, r) in results {
        match r {
            Ok(v) => {
                ok.insert(id, v);
            }
            Err(e) => failed.push((e.node_id().unwrap_or(id), e.to_string())),
        }
    }
    if failed.is_empty() {
        Ok(ok)
    } else {
        Err(ControllerError::Partial(failed, total))
    }
}

enum RawReply {
    Line(String),
    Data(Vec<u8>),
}

/// Addresses of every node's control endpoint.
pub struct ClusterHandle {
    config: ClusterConfig,
    /// Maximum wait for a single reply. STOP blocks for the drain, which can
    /// take up to the expiry window.
    pub reply_timeout: Duration,
    pub last_status: BTreeMap<NodeId, NodeStatus>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub node: NodeId,
    pub kind: FetchKind,
    pub rows: u64,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_digest: String,
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl ClusterHandle {
    pub fn new(config: ClusterConfig) -> Self {
        let reply_timeout = Duration::from_secs_f64(config.pending_expiry_s + 30.0);
        Self {
            config,
            reply_timeout,
            last_status: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &ClusterConfig {
        &self.config
    }

    fn request(&self, id: NodeId, cmd: &Command) -> Result<RawReply, ControllerError> {
        let spec = self.config.node(id).expect("node from config");
        let unreachable = |e: io::Error| ControllerError::NodeUnreachable(id, e.to_string());
        let addr = spec
            .control_address
            .to_socket_addrs()
            .map_err(unreachable)?
            .next()
            .ok_or_else(|| ControllerError::NodeUnreachable(id, "address did not resolve".into()))?;
        let mut stream = TcpStream::connect_timeout(&addr, CONNECT_TIMEOUT).map_err(unreachable)?;
        stream.set_read_timeout(Some(self.reply_timeout))?;
        stream.write_all(cmd.to_line().as_bytes()).map_err(unreachable)?;
        let mut reader = BufReader::new(stream);
        let mut line = String::new();
        if reader.read_line(&mut line).map_err(unreachable)? == 0 {
            return Err(ControllerError::Protocol { id, msg: "connection closed without reply".into() });
        }
        if let Some(err) = ControlError::from_line(&line) {
            return Err(ControllerError::Node(id, err));
        }
        let line = line.trim_end().to_string();
        if let Command::Fetch(_) = cmd {
            let expected: usize = line.parse().map_err(|_| ControllerError::Protocol {
                id,
                msg: format!("bad FETCH size line `{line}`"),
            })?;
            let mut data = Vec::with_capacity(expected);
            reader.take(expected as u64).read_to_end(&mut data)?;
            if data.len() != expected {
                return Err(ControllerError::ShortRead { id, expected, got: data.len() });
            }
            return Ok(RawReply::Data(data));
        }
        Ok(RawReply::Line(line))
    }

    fn expect_ok(&self, id: NodeId, cmd: &Command) -> Result<Option<String>, ControllerError> {
        match self.request(id, cmd)? {
            RawReply::Line(l) if l == "OK" => Ok(None),
            RawReply::Line(l) => match l.strip_prefix("OK ") {
                Some(rest) => Ok(Some(rest.to_string())),
                None => Err(ControllerError::Protocol { id, msg: format!("unexpected reply `{l}`") }),
            },
            RawReply::Data(_) => Err(ControllerError::Protocol { id, msg: "unexpected data".into() }),
        }
    }

    pub fn status(&self, id: NodeId) -> Result<NodeStatus, ControllerError> {
        match self.request(id, &Command::Status)? {
            RawReply::Line(l) => serde_json::from_str(&l)
                .map_err(|e| ControllerError::Protocol { id, msg: format!("bad STATUS json: {e}") }),
            RawReply::Data(_) => Err(ControllerError::Protocol { id, msg: "unexpected data".into() }),
        }
    }

    /// Runs `f` against every node concurrently.
    fn each<T: Send>(&self, f: impl Fn(NodeId) -> Result<T, ControllerError> + Sync) -> NodeResults<T> {
        let ids = self.config.node_ids();
        thread::scope(|scope| {
            let f = &f;
            let handles: Vec<_> = ids.iter().map(|&id| (id, scope.spawn(move || f(id)))).collect();
            handles
                .into_iter()
                .map(|(id, h)| (id, h.join().expect("controller worker panicked")))
                .collect()
        })
    }

    /// Sends LOAD everywhere and checks each node echoes our digest.
    pub fn push_config(&self) -> NodeResults<String> {
        let json = self.config.to_json();
        let want = self.config.digest();
        let cmd = Command::Load(json);
        self.each(|id| {
            let got = self.expect_ok(id, &cmd)?.unwrap_or_default();
            if got != want {
                return Err(ControllerError::DigestMismatch { id, got, want: want.clone() });
            }
            Ok(got)
        })
    }

    pub fn status_all(&mut self) -> NodeResults<NodeStatus> {
        let out = self.each(|id| self.status(id));
        for (id, r) in &out {
            if let Ok(s) = r {
                self.last_status.insert(*id, s.clone());
            }
        }
        out
    }

    /// Polls STATUS until every node reports a full mesh.
    pub fn wait_ready(&mut self, timeout: Duration) -> Result<(), ControllerError> {
        let deadline = Instant::now() + timeout;
        loop {
            let statuses = all_ok(self.status_all())?;
            let not_ready: Vec<String> = statuses
                .values()
                .filter(|s| !s.peers_ready)
                .map(|s| match s.phase {
                    Phase::Idle => format!("{} has no config", s.node),
                    _ => format!("{} missing {:?}", s.node, s.missing_peers),
                })
                .collect();
            if not_ready.is_empty() {
                return Ok(());
            }
            if Instant::now() >= deadline {
                return Err(ControllerError::NotReady(timeout, not_ready.join(", ")));
            }
            thread::sleep(Duration::from_millis(50));
        }
    }

    /// Issues START to every node and returns their statuses. Callers that
    /// want all-or-nothing semantics run [`ClusterHandle::wait_ready`] first.
    pub fn start_all(&mut self) -> NodeResults<NodeStatus> {
        let out = self.each(|id| {
            self.expect_ok(id, &Command::Start)?;
            self.status(id)
        });
        self.remember(&out);
        out
    }

    /// Waits for the mesh, then starts everyone.
    pub fn start_when_ready(&mut self, timeout: Duration) -> Result<BTreeMap<NodeId, NodeStatus>, ControllerError> {
        self.wait_ready(timeout)?;
        all_ok(self.start_all())
    }

    /// STOP everywhere; each node replies once drained and flushed.
    pub fn stop_all(&mut self) -> NodeResults<NodeStatus> {
        let out = self.each(|id| {
            self.expect_ok(id, &Command::Stop)?;
            self.status(id)
        });
        self.remember(&out);
        out
    }

    fn remember(&mut self, out: &NodeResults<NodeStatus>) {
        for (id, r) in out {
            if let Ok(s) = r {
                self.last_status.insert(*id, s.clone());
            }
        }
    }

    fn fetch_bytes(&self, id: NodeId, kind: FetchKind) -> Result<Vec<u8>, ControllerError> {
        let cmd = Command::Fetch(kind);
        let attempt = || match self.request(id, &cmd)? {
            RawReply::Data(d) => Ok(d),
            RawReply::Line(l) => Err(ControllerError::Protocol { id, msg: format!("unexpected `{l}`") }),
        };
        match attempt() {
            Err(ControllerError::ShortRead { .. }) => attempt(),
            other => other,
        }
    }

    /// Downloads every node's observation and loss files into `dir` and
    /// writes `manifest.json`. Row counts are checked against STATUS.
    pub fn fetch_all(&self, dir: &Path) -> Result<Manifest, ControllerError> {
        std::fs::create_dir_all(dir)?;
        let results = self.each(|id| {
            let status = self.status(id)?;
            if matches!(status.phase, Phase::Running | Phase::Draining) {
                return Err(ControllerError::Node(
                    id,
                    ControlError::new(ErrorKind::IllegalState, "node is still running"),
                ));
            }
            let mut entries = Vec::new();
            for (kind, name, expected) in [
                (FetchKind::Obs, obs_file_name(id), status.observations),
                (FetchKind::Loss, loss_file_name(id), status.expired),
            ] {
                let data = self.fetch_bytes(id, kind)?;
                let rows = count_rows(&data);
                if rows != expected {
                    return Err(ControllerError::CountMismatch { id, file: name, rows, status: expected });
                }
                write_file(&dir.join(&name), &data)?;
                entries.push(ManifestEntry {
                    file: name,
                    node: id,
                    kind,
                    rows,
                    bytes: data.len() as u64,
                });
            }
            Ok(entries)
        });
        let entries = all_ok(results)?.into_values().flatten().collect();
        let manifest = Manifest {
            config_digest: self.config.digest(),
            entries,
        };
        write_file(
            &dir.join(MANIFEST_FILE),
            serde_json::to_string_pretty(&manifest).expect("manifest serializes").as_bytes(),
        )?;
        Ok(manifest)
    }
}

fn write_file(path: &PathBuf, data: &[u8]) -> io::Result<()> {
    let tmp = path.with_extension("part");
    std::fs::write(&tmp, data)?;
    std::fs::rename(tmp, path)
}

/// Data rows in a CSV byte buffer (header excluded).
pub fn count_rows(data: &[u8]) -> u64 {
    let lines = data.split(|&b| b == b'\n').filter(|l| !l.is_empty()).count() as u64;
    lines.saturating_sub(1)
}
