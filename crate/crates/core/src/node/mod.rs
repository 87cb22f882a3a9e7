//! The per-node daemon.
//!
//! A node listens on a data address (echo service) and a control address
//! (line protocol, see [`control`]). After `LOAD` it dials one persistent
//! connection to every node in the config, itself included; `START` runs the
//! round schedule for the configured duration. Three activities run
//! independently: the sender schedule, per-connection receive/echo threads,
//! and the flusher.

pub mod control;
pub mod probe;
pub mod recorder;

use std::collections::HashMap;
use std::io::{self, BufRead, BufReader, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use log::{debug, info, warn};
use thiserror::Error;

use crate::topology::{parse_config, ClusterConfig, NodeId, NodeSpec};
use crate::wire::{self, Message, TAG_ECHO};
use control::{Command, ControlError, ErrorKind, FetchKind, NodeStatus, Phase};
use probe::{wall_now_us, EchoOutcome, PendingEntry, ProbeCore};
use recorder::{CsvFileSink, LossRecord, Observation, RecorderBuffer, Sink};

/// How often the sender checks for expired probes.
const EXPIRY_SCAN: Duration = Duration::from_millis(100);
const DIAL_TIMEOUT: Duration = Duration::from_secs(2);
const WRITE_TIMEOUT: Duration = Duration::from_secs(2);

#[derive(Debug, Error)]
pub enum NodeError {
    #[error("node {0} is not in the config")]
    UnknownNode(NodeId),
    #[error("cannot bind {addr}: {source}")]
    BindFailure { addr: String, source: io::Error },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Opens data-plane connections. The harness swaps this to route traffic
/// through its delay proxies.
pub trait Dialer: Send + Sync {
    fn dial(&self, from: NodeId, to: &NodeSpec) -> io::Result<TcpStream>;
}

pub struct TcpDialer;

impl Dialer for TcpDialer {
    fn dial(&self, _from: NodeId, to: &NodeSpec) -> io::Result<TcpStream> {
        let mut last = io::Error::new(io::ErrorKind::NotFound, "address did not resolve");
        for addr in to.data_address.to_socket_addrs()? {
            match TcpStream::connect_timeout(&addr, DIAL_TIMEOUT) {
                Ok(s) => return Ok(s),
                Err(e) => last = e,
            }
        }
        Err(last)
    }
}

/// Creates the storage sinks for a run.
pub trait SinkFactory: Send + Sync {
    fn observations(&self, path: &Path) -> io::Result<Box<dyn Sink<Observation>>>;
    fn losses(&self, path: &Path) -> io::Result<Box<dyn Sink<LossRecord>>>;
}

pub struct CsvSinkFactory;

impl SinkFactory for CsvSinkFactory {
    fn observations(&self, path: &Path) -> io::Result<Box<dyn Sink<Observation>>> {
        Ok(Box::new(CsvFileSink::create::<Observation>(path)?))
    }

    fn losses(&self, path: &Path) -> io::Result<Box<dyn Sink<LossRecord>>> {
        Ok(Box::new(CsvFileSink::create::<LossRecord>(path)?))
    }
}

pub fn obs_file_name(id: NodeId) -> String {
    format!("node_{id}_obs.csv")
}

pub fn loss_file_name(id: NodeId) -> String {
    format!("node_{id}_loss.csv")
}

pub struct NodeOptions {
    pub data_dir: PathBuf,
    pub dialer: Arc<dyn Dialer>,
    pub sinks: Arc<dyn SinkFactory>,
    /// Pre-bound listeners; when absent the node binds the config addresses.
    pub data_listener: Option<TcpListener>,
    pub control_listener: Option<TcpListener>,
}

impl NodeOptions {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        Self {
            data_dir: data_dir.into(),
            dialer: Arc::new(TcpDialer),
            sinks: Arc::new(CsvSinkFactory),
            data_listener: None,
            control_listener: None,
        }
    }
}

/// Successful reply to a control command.
#[derive(Debug, Clone, PartialEq)]
pub enum Reply {
    Ok(Option<String>),
    Status(Box<NodeStatus>),
    Data(Vec<u8>),
}

type Sinks = (Box<dyn Sink<Observation>>, Box<dyn Sink<LossRecord>>);

/// State for one loaded config: connections, probe core, and buffers.
struct Session {
    self_id: NodeId,
    cfg: ClusterConfig,
    digest: String,
    core: ProbeCore,
    obs: RecorderBuffer<Observation>,
    losses: RecorderBuffer<LossRecord>,
    conns: Mutex<HashMap<NodeId, TcpStream>>,
    sinks: Mutex<Option<Sinks>>,
    sink_failures: AtomicU64,
    stop: AtomicBool,
    closing: AtomicBool,
    readers: Mutex<Vec<TcpStream>>,
}

impl Session {
    fn missing_peers(&self) -> Vec<NodeId> {
        let conns = self.conns.lock().unwrap();
        self.cfg
            .node_ids()
            .into_iter()
            .filter(|id| !conns.contains_key(id))
            .collect()
    }

    fn close(&self) {
        self.closing.store(true, Ordering::Release);
        self.stop.store(true, Ordering::Release);
        for (_, s) in self.conns.lock().unwrap().drain() {
            let _ = s.shutdown(Shutdown::Both);
        }
        for s in self.readers.lock().unwrap().drain(..) {
            let _ = s.shutdown(Shutdown::Both);
        }
    }

    /// Moves buffered rows to storage. Holding the sink lock for the whole
    /// write keeps row order when the periodic and final flush overlap.
    fn flush(&self) -> bool {
        let mut guard = self.sinks.lock().unwrap();
        let Some((obs_sink, loss_sink)) = guard.as_mut() else {
            return true;
        };
        let mut ok = true;
        if let Err(e) = self.obs.flush(obs_sink.as_mut()) {
            warn!("node {}: observation flush failed: {e}", self.self_id);
            self.sink_failures.fetch_add(1, Ordering::Relaxed);
            ok = false;
        }
        if let Err(e) = self.losses.flush(loss_sink.as_mut()) {
            warn!("node {}: loss flush failed: {e}", self.self_id);
            self.sink_failures.fetch_add(1, Ordering::Relaxed);
            ok = false;
        }
        ok
    }

    fn record_losses(&self, lost: Vec<LossRecord>) {
        for l in lost {
            let _ = self.losses.record(l);
        }
    }
}

struct ControlState {
    phase: Phase,
    session: Option<Arc<Session>>,
    runner: Option<JoinHandle<()>>,
}

struct Shared {
    self_id: NodeId,
    data_dir: PathBuf,
    dialer: Arc<dyn Dialer>,
    sinks: Arc<dyn SinkFactory>,
    state: Mutex<ControlState>,
    phase_changed: Condvar,
    shutdown: AtomicBool,
    inbound: Mutex<Vec<TcpStream>>,
    echoes_sent: AtomicU64,
}

/// A running node. Dropping the handle does not stop it; call
/// [`NodeHandle::shutdown`].
pub struct NodeHandle {
    shared: Arc<Shared>,
    data_addr: SocketAddr,
    control_addr: SocketAddr,
    threads: Vec<JoinHandle<()>>,
}

fn bind(addr: &str) -> Result<TcpListener, NodeError> {
    TcpListener::bind(addr).map_err(|source| NodeError::BindFailure {
        addr: addr.to_string(),
        source,
    })
}

impl NodeHandle {
    /// Binds both listeners and starts serving. The node is idle until it
    /// receives `LOAD`.
    pub fn spawn(cfg: &ClusterConfig, self_id: NodeId, opts: NodeOptions) -> Result<Self, NodeError> {
        let me = cfg.node(self_id).ok_or(NodeError::UnknownNode(self_id))?;
        let data = match opts.data_listener {
            Some(l) => l,
            None => bind(&me.data_address)?,
        };
        let ctl = match opts.control_listener {
            Some(l) => l,
            None => bind(&me.control_address)?,
        };
        let data_addr = data.local_addr()?;
        let control_addr = ctl.local_addr()?;
        let shared = Arc::new(Shared {
            self_id,
            data_dir: opts.data_dir,
            dialer: opts.dialer,
            sinks: opts.sinks,
            state: Mutex::new(ControlState {
                phase: Phase::Idle,
                session: None,
                runner: None,
            }),
            phase_changed: Condvar::new(),
            shutdown: AtomicBool::new(false),
            inbound: Mutex::new(Vec::new()),
            echoes_sent: AtomicU64::new(0),
        });
        let mut threads = Vec::new();
        let s = shared.clone();
        threads.push(
            thread::Builder::new()
                .name(format!("n{self_id}-data"))
                .spawn(move || accept_data(s, data))?,
        );
        let s = shared.clone();
        threads.push(
            thread::Builder::new()
                .name(format!("n{self_id}-ctl"))
                .spawn(move || accept_control(s, ctl))?,
        );
        info!("node {self_id}: data on {data_addr}, control on {control_addr}");
        Ok(Self {
            shared,
            data_addr,
            control_addr,
            threads,
        })
    }

    pub fn id(&self) -> NodeId {
        self.shared.self_id
    }

    pub fn data_addr(&self) -> SocketAddr {
        self.data_addr
    }

    pub fn control_addr(&self) -> SocketAddr {
        self.control_addr
    }

    /// Runs a control command in-process.
    pub fn execute(&self, cmd: Command) -> Result<Reply, ControlError> {
        execute(&self.shared, cmd)
    }

    pub fn status(&self) -> NodeStatus {
        status(&self.shared, &self.shared.state.lock().unwrap())
    }

    /// Blocks until [`NodeHandle::shutdown`] is called from elsewhere.
    pub fn wait(&self) {
        while !self.shared.shutdown.load(Ordering::Acquire) {
            thread::sleep(Duration::from_millis(200));
        }
    }

    /// Stops everything and joins the listener threads.
    pub fn shutdown(mut self) {
        let shared = &self.shared;
        shared.shutdown.store(true, Ordering::Release);
        let runner = {
            let mut st = shared.state.lock().unwrap();
            if let Some(s) = &st.session {
                s.stop.store(true, Ordering::Release);
            }
            st.runner.take()
        };
        if let Some(r) = runner {
            let _ = r.join();
        }
        if let Some(s) = shared.state.lock().unwrap().session.take() {
            s.close();
        }
        for s in shared.inbound.lock().unwrap().drain(..) {
            let _ = s.shutdown(Shutdown::Both);
        }
        // Wake the blocking accept calls.
        let _ = TcpStream::connect_timeout(&self.data_addr, Duration::from_millis(200));
        let _ = TcpStream::connect_timeout(&self.control_addr, Duration::from_millis(200));
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

/// Binds, serves, and blocks for the life of the process.
pub fn run_node(cfg: &ClusterConfig, self_id: NodeId, opts: NodeOptions) -> Result<(), NodeError> {
    let node = NodeHandle::spawn(cfg, self_id, opts)?;
    node.wait();
    node.shutdown();
    Ok(())
}

fn accept_data(shared: Arc<Shared>, listener: TcpListener) {
    for stream in listener.incoming() {
        if shared.shutdown.load(Ordering::Acquire) {
            break;
        }
        let stream = match stream {
            Ok(s) => s,
            Err(e) => {
                warn!("node {}: data accept failed: {e}", shared.self_id);
                continue;
            }
        };
        let _ = stream.set_nodelay(true);
        if let Ok(c) = stream.try_clone() {
            shared.inbound.lock().unwrap().push(c);
        }
        let s = shared.clone();
        let _ = thread::Builder::new()
            .name(format!("n{}-echo", shared.self_id))
            .spawn(move || serve_probes(s, stream));
    }
}

/// Echo service for one inbound connection: every probe is answered on the
/// connection it arrived on.
fn serve_probes(shared: Arc<Shared>, stream: TcpStream) {
    let mut reader = BufReader::with_capacity(64 * 1024, match stream.try_clone() {
        Ok(s) => s,
        Err(_) => return,
    });
    let mut writer = stream;
    let _ = writer.set_write_timeout(Some(WRITE_TIMEOUT));
    let mut body = Vec::new();
    loop {
        match wire::read_frame(&mut reader, &mut body) {
            Ok(Some(())) => {}
            Ok(None) => break,
            Err(e) => {
                debug!("node {}: inbound read ended: {e}", shared.self_id);
                break;
            }
        }
        match wire::decode_body(&body) {
            Ok(Message::Probe(p)) => {
                let echo = wire::make_echo(&p, shared.self_id);
                let frame = wire::encode_echo(&echo).expect("echo fits: probe did");
                if writer.write_all(&frame).is_err() {
                    break;
                }
                shared.echoes_sent.fetch_add(1, Ordering::Relaxed);
            }
            Ok(Message::Echo(_)) => warn!("node {}: echo on an inbound connection", shared.self_id),
            Err(e) => {
                warn!("node {}: bad inbound frame: {e}", shared.self_id);
                break;
            }
        }
    }
}

/// Receives echoes on one of our outbound connections.
fn read_echoes(session: Arc<Session>, stream: TcpStream) {
    let mut reader = BufReader::with_capacity(64 * 1024, stream);
    let mut body = Vec::new();
    loop {
        match wire::read_frame(&mut reader, &mut body) {
            Ok(Some(())) => {}
            Ok(None) | Err(_) => break,
        }
        let now = Instant::now();
        let h = match wire::parse_header(&body) {
            Ok(h) if h.tag == TAG_ECHO => h,
            Ok(h) => {
                warn!("node {}: unexpected tag {} on outbound connection", session.self_id, h.tag);
                continue;
            }
            Err(e) => {
                warn!("node {}: bad echo frame: {e}", session.self_id);
                break;
            }
        };
        match session.core.match_echo(h.origin, h.sender, h.round, now) {
            Ok(EchoOutcome::Matched(obs)) => {
                let _ = session.obs.record(obs);
            }
            Ok(_) => {}
            Err(e) => warn!("{e}"),
        }
    }
}

/// Dials every peer until all are connected or the session closes.
fn connect_mesh(shared: Arc<Shared>, session: Arc<Session>) {
    let mut backoff = Duration::from_millis(20);
    loop {
        if session.closing.load(Ordering::Acquire) || shared.shutdown.load(Ordering::Acquire) {
            return;
        }
        let missing = session.missing_peers();
        if missing.is_empty() {
            info!("node {}: connected to all {} peers", session.self_id, session.cfg.nodes.len());
            return;
        }
        for id in missing {
            let spec = session.cfg.node(id).expect("peer from config");
            match shared.dialer.dial(session.self_id, spec) {
                Ok(stream) => {
                    let _ = stream.set_nodelay(true);
                    let _ = stream.set_write_timeout(Some(WRITE_TIMEOUT));
                    let (Ok(read_half), Ok(kill)) = (stream.try_clone(), stream.try_clone()) else {
                        continue;
                    };
                    session.readers.lock().unwrap().push(kill);
                    session.conns.lock().unwrap().insert(id, stream);
                    let s = session.clone();
                    let _ = thread::Builder::new()
                        .name(format!("n{}-rx{}", session.self_id, id))
                        .spawn(move || read_echoes(s, read_half));
                }
                Err(e) => debug!("node {}: peer {id} unreachable: {e}", session.self_id),
            }
        }
        thread::sleep(backoff);
        backoff = (backoff * 2).min(Duration::from_secs(1));
    }
}

/// Sleeps until `deadline`, waking early if `stop` is raised.
fn sleep_until(deadline: Instant, stop: &AtomicBool) {
    loop {
        let now = Instant::now();
        if now >= deadline || stop.load(Ordering::Acquire) {
            return;
        }
        thread::sleep((deadline - now).min(Duration::from_millis(100)));
    }
}

/// Number of rounds a run of `duration_s` at `rate_hz` fires: one at every
/// multiple of the interval strictly before the end.
pub fn scheduled_rounds(rate_hz: f64, duration_s: f64) -> u64 {
    (duration_s * rate_hz).ceil() as u64
}

fn run_schedule(session: &Session) {
    let cfg = &session.cfg;
    let interval = cfg.round_interval();
    let expiry = Duration::from_secs_f64(cfg.pending_expiry_s);
    let total = scheduled_rounds(cfg.round_rate_hz, cfg.duration_s);
    let peers = session.core.peers().to_vec();
    let start = Instant::now();
    let mut last_scan = start;

    for round in 0..total {
        let deadline = start + interval.mul_f64(round as f64);
        sleep_until(deadline, &session.stop);
        if session.stop.load(Ordering::Acquire) {
            break;
        }
        let frame = wire::encode_probe(&wire::ProbeMessage {
            sender: session.self_id,
            round,
            payload: session.core.payload().to_vec(),
        })
        .expect("payload validated with the config");
        let now = Instant::now();
        let wall = wall_now_us();
        session.core.begin_round(round);
        session.core.register(peers.iter().map(|&receiver| PendingEntry {
            receiver,
            round,
            send_mono: now,
            send_wall_ts_us: wall,
        }));
        {
            let mut conns = session.conns.lock().unwrap();
            let mut broken = Vec::new();
            for id in &peers {
                match conns.get_mut(id) {
                    Some(s) => {
                        if let Err(e) = s.write_all(&frame) {
                            warn!("node {}: write to {id} failed: {e}", session.self_id);
                            broken.push(*id);
                        }
                    }
                    None => {
                        session.core.counters.write_failures.fetch_add(1, Ordering::Relaxed);
                    }
                }
            }
            for id in broken {
                session.core.counters.write_failures.fetch_add(1, Ordering::Relaxed);
                if let Some(s) = conns.remove(&id) {
                    let _ = s.shutdown(Shutdown::Both);
                }
            }
        }
        if now.duration_since(last_scan) >= EXPIRY_SCAN {
            last_scan = now;
            session.record_losses(session.core.expire_pending(now, expiry));
        }
    }
}

fn drain(session: &Session) {
    let expiry = Duration::from_secs_f64(session.cfg.pending_expiry_s);
    let until = Instant::now() + expiry;
    while session.core.pending_len() > 0 && Instant::now() < until {
        session.record_losses(session.core.expire_pending(Instant::now(), expiry));
        thread::sleep(Duration::from_millis(10));
    }
    session.record_losses(session.core.expire_all());
}

fn run_experiment(shared: Arc<Shared>, session: Arc<Session>) {
    let flusher = (session.cfg.flush_interval_s > 0.0).then(|| {
        let s = session.clone();
        let done = Arc::new(AtomicBool::new(false));
        let d = done.clone();
        let every = Duration::from_secs_f64(s.cfg.flush_interval_s);
        let handle = thread::Builder::new()
            .name(format!("n{}-flush", s.self_id))
            .spawn(move || {
                let mut next = Instant::now() + every;
                while !d.load(Ordering::Acquire) {
                    sleep_until(next, &d);
                    if d.load(Ordering::Acquire) {
                        break;
                    }
                    s.flush();
                    next += every;
                }
            })
            .expect("spawn flusher");
        (done, handle)
    });

    run_schedule(&session);
    set_phase(&shared, Phase::Draining);
    drain(&session);

    if let Some((done, handle)) = flusher {
        done.store(true, Ordering::Release);
        let _ = handle.join();
    }
    let mut tries = 0;
    while !session.flush() && tries < 3 {
        tries += 1;
        thread::sleep(Duration::from_millis(100));
    }
    session.obs.close();
    session.losses.close();
    for (_, s) in session.conns.lock().unwrap().drain() {
        let _ = s.shutdown(Shutdown::Both);
    }
    info!(
        "node {}: run finished, {} observations, {} expired",
        session.self_id,
        session.obs.recorded_count(),
        session.core.counters.expired.load(Ordering::Relaxed)
    );
    set_phase(&shared, Phase::Stopped);
}

fn set_phase(shared: &Shared, phase: Phase) {
    shared.state.lock().unwrap().phase = phase;
    shared.phase_changed.notify_all();
}

fn status(shared: &Shared, st: &ControlState) -> NodeStatus {
    let mut s = NodeStatus::idle(shared.self_id);
    s.phase = st.phase;
    let Some(session) = &st.session else {
        return s;
    };
    let c = &session.core.counters;
    s.config_digest = Some(session.digest.clone());
    s.missing_peers = session.missing_peers();
    s.peers_ready = s.missing_peers.is_empty();
    s.rounds_sent = c.rounds_sent.load(Ordering::Acquire);
    s.probes_sent = c.probes_sent.load(Ordering::Acquire);
    // Read the pending table after the counters it feeds: a probe is only
    // ever moved out of pending, so this order never undercounts.
    s.observations = c.observations.load(Ordering::Acquire);
    s.expired = c.expired.load(Ordering::Acquire);
    s.late_echoes = c.late_echoes.load(Ordering::Acquire);
    s.losses = s.expired - s.late_echoes;
    s.unmatched_echoes = c.unmatched_echoes.load(Ordering::Acquire);
    s.pending = session.core.pending_len() as u64;
    s.buffer_depth = session.obs.in_buffer_count() as u64;
    s.flushed = session.obs.flushed_count();
    s.sink_failures = session.sink_failures.load(Ordering::Relaxed);
    s.write_failures = c.write_failures.load(Ordering::Relaxed);
    s.max_record_us = session.obs.max_record_ns() as f64 / 1000.0;
    s
}

fn execute(shared: &Arc<Shared>, cmd: Command) -> Result<Reply, ControlError> {
    let mut st = shared.state.lock().unwrap();
    match cmd {
        Command::Status => Ok(Reply::Status(Box::new(status(shared, &st)))),
        Command::Load(json) => load(shared, &mut st, &json),
        Command::Start => start(shared, &mut st),
        Command::Stop => stop(shared, st),
        Command::Fetch(kind) => fetch(shared, &st, kind),
    }
}

fn load(shared: &Arc<Shared>, st: &mut ControlState, json: &str) -> Result<Reply, ControlError> {
    if matches!(st.phase, Phase::Running | Phase::Draining) {
        return Err(ControlError::illegal("cannot LOAD while an experiment is running"));
    }
    let cfg = parse_config(json).map_err(|e| ControlError::new(ErrorKind::InvalidConfig, e.to_string()))?;
    if cfg.node(shared.self_id).is_none() {
        return Err(ControlError::new(
            ErrorKind::InvalidConfig,
            format!("config does not contain node {}", shared.self_id),
        ));
    }
    let digest = cfg.digest();
    if st.phase == Phase::Loaded {
        if let Some(s) = &st.session {
            if s.digest == digest {
                return Ok(Reply::Ok(Some(digest)));
            }
        }
    }
    if let Some(old) = st.session.take() {
        old.close();
    }
    let core = ProbeCore::new(shared.self_id, cfg.node_ids(), cfg.payload_bytes as usize);
    let session = Arc::new(Session {
        self_id: shared.self_id,
        cfg,
        digest: digest.clone(),
        core,
        obs: RecorderBuffer::new(),
        losses: RecorderBuffer::new(),
        conns: Mutex::new(HashMap::new()),
        sinks: Mutex::new(None),
        sink_failures: AtomicU64::new(0),
        stop: AtomicBool::new(false),
        closing: AtomicBool::new(false),
        readers: Mutex::new(Vec::new()),
    });
    let (s, sess) = (shared.clone(), session.clone());
    thread::Builder::new()
        .name(format!("n{}-dial", shared.self_id))
        .spawn(move || connect_mesh(s, sess))
        .map_err(|e| ControlError::new(ErrorKind::Io, e.to_string()))?;
    st.session = Some(session);
    st.phase = Phase::Loaded;
    Ok(Reply::Ok(Some(digest)))
}

fn start(shared: &Arc<Shared>, st: &mut ControlState) -> Result<Reply, ControlError> {
    match st.phase {
        Phase::Loaded => {}
        Phase::Idle => return Err(ControlError::illegal("START before LOAD")),
        Phase::Running | Phase::Draining => return Err(ControlError::illegal("already running")),
        Phase::Stopped => return Err(ControlError::illegal("experiment finished; LOAD again first")),
    }
    let session = st.session.clone().expect("loaded phase has a session");
    let missing = session.missing_peers();
    if !missing.is_empty() {
        return Err(ControlError::new(
            ErrorKind::PeersNotReady,
            format!("missing peers {missing:?}"),
        ));
    }
    let io_err = |e: io::Error| ControlError::new(ErrorKind::Io, e.to_string());
    std::fs::create_dir_all(&shared.data_dir).map_err(io_err)?;
    let obs_sink = shared
        .sinks
        .observations(&shared.data_dir.join(obs_file_name(shared.self_id)))
        .map_err(io_err)?;
    let loss_sink = shared
        .sinks
        .losses(&shared.data_dir.join(loss_file_name(shared.self_id)))
        .map_err(io_err)?;
    *session.sinks.lock().unwrap() = Some((obs_sink, loss_sink));
    let s = shared.clone();
    let runner = thread::Builder::new()
        .name(format!("n{}-send", shared.self_id))
        .spawn(move || run_experiment(s, session))
        .map_err(io_err)?;
    st.runner = Some(runner);
    st.phase = Phase::Running;
    Ok(Reply::Ok(None))
}

fn stop(shared: &Arc<Shared>, mut st: MutexGuard<'_, ControlState>) -> Result<Reply, ControlError> {
    match st.phase {
        Phase::Idle | Phase::Loaded => return Err(ControlError::illegal("not running")),
        Phase::Stopped => return Ok(Reply::Ok(None)),
        Phase::Running | Phase::Draining => {}
    }
    if let Some(s) = &st.session {
        s.stop.store(true, Ordering::Release);
    }
    while st.phase != Phase::Stopped {
        st = shared.phase_changed.wait(st).unwrap();
    }
    if let Some(r) = st.runner.take() {
        drop(st);
        let _ = r.join();
    }
    Ok(Reply::Ok(None))
}

fn fetch(shared: &Shared, st: &ControlState, kind: FetchKind) -> Result<Reply, ControlError> {
    if matches!(st.phase, Phase::Running | Phase::Draining) {
        return Err(ControlError::illegal("FETCH while running"));
    }
    let (name, header) = match kind {
        FetchKind::Obs => (obs_file_name(shared.self_id), <Observation as recorder::CsvRow>::HEADER),
        FetchKind::Loss => (loss_file_name(shared.self_id), <LossRecord as recorder::CsvRow>::HEADER),
    };
    match std::fs::read(shared.data_dir.join(name)) {
        Ok(bytes) => Ok(Reply::Data(bytes)),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(Reply::Data(format!("{header}\n").into_bytes())),
        Err(e) => Err(ControlError::new(ErrorKind::Io, e.to_string())),
    }
}

fn accept_control(shared: Arc<Shared>, listener: TcpListener) {
    for stream in listener.incoming() {
        if shared.shutdown.load(Ordering::Acquire) {
            break;
        }
        let Ok(stream) = stream else { continue };
        let s = shared.clone();
        let _ = thread::Builder::new()
            .name(format!("n{}-ctl-conn", shared.self_id))
            .spawn(move || {
                if let Err(e) = serve_control(s, stream) {
                    debug!("control connection ended: {e}");
                }
            });
    }
}

fn serve_control(shared: Arc<Shared>, stream: TcpStream) -> io::Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = stream;
    let mut line = String::new();
    loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            return Ok(());
        }
        if shared.shutdown.load(Ordering::Acquire) {
            return Ok(());
        }
        let reply = line.parse::<Command>().and_then(|cmd| execute(&shared, cmd));
        match reply {
            Ok(Reply::Ok(None)) => writer.write_all(b"OK\n")?,
            Ok(Reply::Ok(Some(msg))) => writer.write_all(format!("OK {msg}\n").as_bytes())?,
            Ok(Reply::Status(s)) => {
                let mut json = serde_json::to_string(&s).expect("status serializes");
                json.push('\n');
                writer.write_all(json.as_bytes())?
            }
            Ok(Reply::Data(bytes)) => {
                writer.write_all(format!("{}\n", bytes.len()).as_bytes())?;
                writer.write_all(&bytes)?;
            }
            Err(e) => writer.write_all(e.to_line().as_bytes())?,
        }
        writer.flush()?;
    }
}
