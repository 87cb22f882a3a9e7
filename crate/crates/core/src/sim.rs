//! Virtual cluster: real nodes on loopback with injected per-link delays.
//!
//! Every data-plane connection from node A to node B goes through a proxy
//! owned by the harness. The proxy reads whole frames and hands each one to a
//! single timer queue that delivers it at `arrival + sample_delay(link,
//! round)`. Delivery is per message, so a frame held back for minutes does not
//! block the frames behind it.

use std::cmp::Ordering as CmpOrdering;
use std::collections::{BTreeMap, BinaryHeap, HashMap};
use std::io::{self, BufReader, Write};
use std::net::{IpAddr, Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{load_dir, AnalysisError, Dataset};
use crate::controller::{all_ok, ClusterHandle, ControllerError, Manifest};
use crate::node::control::{NodeStatus, Phase};
use crate::node::{CsvSinkFactory, Dialer, NodeError, NodeHandle, NodeOptions, SinkFactory};
use crate::topology::{parse_config, ClusterConfig, ConfigError, NodeId, NodeSpec};
use crate::wire;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("no delay defined for link {from} -> {to}")]
    UnknownLink { from: NodeId, to: NodeId },
    #[error("invalid link model: {0}")]
    BadModel(String),
    #[error("node {0} address `{1}` is not a loopback address")]
    NotLoopback(NodeId, String),
    #[error("run did not finish within {0:?}")]
    Timeout(Duration),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Node(#[from] NodeError),
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Jitter {
    #[default]
    None,
    /// Extra delay drawn uniformly from `[min_us, max_us]`.
    Uniform { min_us: u64, max_us: u64 },
    /// Adds `magnitude_us` while `t mod period_s < width_s`, where `t` is
    /// the sequence index divided by the model's `index_hz`.
    Spike { period_s: f64, magnitude_us: u64, width_s: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkSpec {
    pub base_delay_us: u64,
    #[serde(default)]
    pub jitter: Jitter,
}

/// Delay for messages travelling from `from` to `to`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkEntry {
    pub from: NodeId,
    pub to: NodeId,
    #[serde(flatten)]
    pub spec: LinkSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkModel {
    #[serde(default)]
    pub seed: u64,
    /// Sequence indices per second, used to place spikes in time. The
    /// harness sets it to the round rate when absent.
    #[serde(default)]
    pub index_hz: Option<f64>,
    #[serde(default)]
    pub default: Option<LinkSpec>,
    #[serde(default)]
    pub links: Vec<LinkEntry>,
}

impl LinkModel {
    /// Same spec on every link, self-loops included.
    pub fn uniform(spec: LinkSpec) -> Self {
        Self {
            seed: 0,
            index_hz: None,
            default: Some(spec),
            links: Vec::new(),
        }
    }

    pub fn zero() -> Self {
        Self::uniform(LinkSpec {
            base_delay_us: 0,
            jitter: Jitter::None,
        })
    }

    /// Sets both directions of a link.
    pub fn with_symmetric(mut self, a: NodeId, b: NodeId, spec: LinkSpec) -> Self {
        self.set(a, b, spec);
        if a != b {
            self.set(b, a, spec);
        }
        self
    }

    pub fn set(&mut self, from: NodeId, to: NodeId, spec: LinkSpec) {
        self.links.retain(|l| !(l.from == from && l.to == to));
        self.links.push(LinkEntry { from, to, spec });
    }

    pub fn from_json(text: &str) -> Result<Self, SimError> {
        let m: LinkModel = serde_json::from_str(text).map_err(|e| SimError::BadModel(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if let Some(hz) = self.index_hz {
            if !(hz.is_finite() && hz > 0.0) {
                return Err(SimError::BadModel("index_hz must be positive".into()));
            }
        }
        for spec in self.default.iter().chain(self.links.iter().map(|l| &l.spec)) {
            match spec.jitter {
                Jitter::Uniform { min_us, max_us } if min_us > max_us => {
                    return Err(SimError::BadModel(format!("uniform jitter {min_us} > {max_us}")));
                }
                Jitter::Spike { period_s, width_s, .. }
                    if !(period_s.is_finite() && period_s > 0.0 && width_s.is_finite() && width_s >= 0.0) =>
                {
                    return Err(SimError::BadModel("spike needs period_s > 0 and width_s >= 0".into()));
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn spec(&self, from: NodeId, to: NodeId) -> Option<&LinkSpec> {
        self.links
            .iter()
            .rev()
            .find(|l| l.from == from && l.to == to)
            .map(|l| &l.spec)
            .or(self.default.as_ref())
    }
}

fn link_stream(from: NodeId, to: NodeId) -> u64 {
    ((from.0 as u64) << 32) | to.0 as u64
}

/// Injected one-way delay for the `index`-th message on `from -> to`. A pure
/// function of the model, the link and the index.
pub fn sample_delay(model: &LinkModel, from: NodeId, to: NodeId, index: u64) -> Result<u64, SimError> {
    let spec = model.spec(from, to).ok_or(SimError::UnknownLink { from, to })?;
    let extra = match spec.jitter {
        Jitter::None => 0,
        Jitter::Uniform { min_us, max_us } => {
            let mut rng = ChaCha8Rng::seed_from_u64(model.seed);
            rng.set_stream(link_stream(from, to));
            // 16 words per index leaves room for rejection sampling.
            rng.set_word_pos(index as u128 * 16);
            rng.random_range(min_us..=max_us)
        }
        Jitter::Spike { period_s, magnitude_us, width_s } => {
            let t = index as f64 / model.index_hz.unwrap_or(1.0);
            if t.rem_euclid(period_s) < width_s {
                magnitude_us
            } else {
                0
            }
        }
    };
    Ok(spec.base_delay_us + extra)
}

/// Injected round-trip delay of a probe/echo exchange for `round`.
pub fn injected_rtt(model: &LinkModel, a: NodeId, b: NodeId, round: u64) -> Result<u64, SimError> {
    Ok(sample_delay(model, a, b, round)? + sample_delay(model, b, a, round)?)
}

struct Delivery {
    due: Instant,
    seq: u64,
    frame: Vec<u8>,
    dest: Arc<TcpStream>,
}

impl PartialEq for Delivery {
    fn eq(&self, other: &Self) -> bool {
        (self.due, self.seq) == (other.due, other.seq)
    }
}

impl Eq for Delivery {}

impl PartialOrd for Delivery {
    fn partial_cmp(&self, other: &Self) -> Option<CmpOrdering> {
        Some(self.cmp(other))
    }
}

impl Ord for Delivery {
    // Reversed: BinaryHeap is a max-heap and we want the earliest first.
    fn cmp(&self, other: &Self) -> CmpOrdering {
        (other.due, other.seq).cmp(&(self.due, self.seq))
    }
}

#[derive(Default)]
struct Queue {
    heap: BinaryHeap<Delivery>,
    seq: u64,
    stopped: bool,
}

/// Deliveries due this soon are polled for instead of slept on. A timer
/// wake-up from an idle vCPU can overshoot by milliseconds, far more than
/// the loopback overhead being measured.
const SPIN_HORIZON: Duration = Duration::from_millis(20);

/// The single ordered timer queue all proxies feed.
#[derive(Default)]
struct Scheduler {
    queue: Mutex<Queue>,
    wake: Condvar,
}

impl Scheduler {
    fn push(&self, due: Instant, frame: Vec<u8>, dest: Arc<TcpStream>) {
        let mut q = self.queue.lock().unwrap();
        let seq = q.seq;
        q.seq += 1;
        let earliest = q.heap.peek().is_none_or(|d| due < d.due);
        q.heap.push(Delivery { due, seq, frame, dest });
        drop(q);
        if earliest {
            self.wake.notify_one();
        }
    }

    fn stop(&self) {
        self.queue.lock().unwrap().stopped = true;
        self.wake.notify_all();
    }

    fn run(&self) {
        let mut q = self.queue.lock().unwrap();
        loop {
            if q.stopped {
                return;
            }
            let now = Instant::now();
            match q.heap.peek() {
                None => q = self.wake.wait(q).unwrap(),
                Some(d) if d.due > now + SPIN_HORIZON => {
                    let wait = d.due - now - SPIN_HORIZON;
                    q = self.wake.wait_timeout(q, wait).unwrap().0;
                }
                Some(d) if d.due > now => {
                    drop(q);
                    thread::yield_now();
                    q = self.queue.lock().unwrap();
                }
                Some(_) => {
                    let d = q.heap.pop().expect("peeked");
                    drop(q);
                    if let Err(e) = (&*d.dest).write_all(&d.frame) {
                        debug!("sim: delivery dropped: {e}");
                    }
                    q = self.queue.lock().unwrap();
                }
            }
        }
    }
}

/// Forwards frames read from `src` to `dest` through the scheduler, delaying
/// each by the model's delay for `from -> to` at the frame's round.
fn pump(src: TcpStream, dest: Arc<TcpStream>, from: NodeId, to: NodeId, model: Arc<LinkModel>, sched: Arc<Scheduler>) {
    let mut reader = BufReader::with_capacity(64 * 1024, src);
    let mut body = Vec::new();
    loop {
        match wire::read_frame(&mut reader, &mut body) {
            Ok(Some(())) => {}
            Ok(None) | Err(_) => break,
        }
        let arrived = Instant::now();
        let round = match wire::parse_header(&body) {
            Ok(h) => h.round,
            Err(e) => {
                debug!("sim: malformed frame on {from} -> {to}: {e}");
                break;
            }
        };
        // Links were checked before the run started.
        let delay = sample_delay(&model, from, to, round).unwrap_or(0);
        let mut frame = Vec::with_capacity(wire::PREFIX_LEN + body.len());
        frame.extend_from_slice(&(body.len() as u32).to_be_bytes());
        frame.extend_from_slice(&body);
        sched.push(arrived + Duration::from_micros(delay), frame, dest.clone());
    }
}

struct ProxyShared {
    model: Arc<LinkModel>,
    sched: Arc<Scheduler>,
    stop: AtomicBool,
    streams: Mutex<Vec<TcpStream>>,
}

impl ProxyShared {
    fn track(&self, s: &TcpStream) {
        if let Ok(c) = s.try_clone() {
            self.streams.lock().unwrap().push(c);
        }
    }
}

/// Proxy for the ordered pair `(from, to)`: connections accepted here are
/// connections node `from` opened to node `to`.
fn serve_proxy(shared: Arc<ProxyShared>, listener: TcpListener, from: NodeId, to: NodeId, target: SocketAddr) {
    for conn in listener.incoming() {
        if shared.stop.load(Ordering::Acquire) {
            break;
        }
        let Ok(client) = conn else { continue };
        let upstream = match TcpStream::connect(target) {
            Ok(s) => s,
            Err(e) => {
                debug!("sim: proxy {from} -> {to} cannot reach {target}: {e}");
                continue;
            }
        };
        for s in [&client, &upstream] {
            let _ = s.set_nodelay(true);
            let _ = s.set_write_timeout(Some(Duration::from_secs(2)));
            shared.track(s);
        }
        let (Ok(client_rx), Ok(upstream_rx)) = (client.try_clone(), upstream.try_clone()) else {
            continue;
        };
        let (client, upstream) = (Arc::new(client), Arc::new(upstream));
        let (m, s) = (shared.model.clone(), shared.sched.clone());
        let _ = thread::Builder::new()
            .name(format!("sim-{from}-{to}"))
            .spawn(move || pump(client_rx, upstream, from, to, m, s));
        let (m, s) = (shared.model.clone(), shared.sched.clone());
        let _ = thread::Builder::new()
            .name(format!("sim-{to}-{from}"))
            .spawn(move || pump(upstream_rx, client, to, from, m, s));
    }
}

/// Routes every dial through the proxy for that ordered pair.
struct ProxyDialer {
    proxies: HashMap<(NodeId, NodeId), SocketAddr>,
}

impl Dialer for ProxyDialer {
    fn dial(&self, from: NodeId, to: &NodeSpec) -> io::Result<TcpStream> {
        let addr = self
            .proxies
            .get(&(from, to.id))
            .ok_or_else(|| io::Error::new(io::ErrorKind::NotFound, format!("no proxy for {from} -> {}", to.id)))?;
        TcpStream::connect_timeout(addr, Duration::from_secs(2))
    }
}

pub struct SimOptions {
    /// Fetched files and the manifest land here; node working files go to
    /// `out_dir/nodes/<id>`.
    pub out_dir: PathBuf,
    /// Storage sinks for every node; CSV files when absent.
    pub sinks: Option<Arc<dyn SinkFactory>>,
    pub ready_timeout: Duration,
}

impl SimOptions {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        Self {
            out_dir: out_dir.into(),
            sinks: None,
            ready_timeout: Duration::from_secs(30),
        }
    }
}

/// Everything a virtual run produced.
#[derive(Debug)]
pub struct SimRun {
    /// The config the nodes actually ran, with the bound loopback ports.
    pub config: ClusterConfig,
    pub model: LinkModel,
    pub dataset: Dataset,
    pub statuses: BTreeMap<NodeId, NodeStatus>,
    pub manifest: Manifest,
    pub elapsed: Duration,
}

impl SimRun {
    pub fn rounds_sent(&self) -> u64 {
        self.statuses.values().map(|s| s.rounds_sent).sum()
    }
}

fn is_loopback(addr: &str) -> bool {
    let host = addr.rsplit_once(':').map_or(addr, |(h, _)| h);
    let host = host.trim_start_matches('[').trim_end_matches(']');
    if host == "localhost" {
        return true;
    }
    host.parse::<IpAddr>().is_ok_and(|ip| ip.is_loopback())
}

/// `n` nodes in one subnet with placeholder loopback addresses; the harness
/// rebinds them to free ports.
pub fn loopback_config(n: u32, round_rate_hz: f64, duration_s: f64) -> ClusterConfig {
    let nodes: Vec<String> = (1..=n)
        .map(|i| {
            format!(
                r#"{{"id": {i}, "data_address": "127.0.0.1:{}", "control_address": "127.0.0.1:{}",
                   "cloud": "sim", "region": "local", "az": "az1", "subnet": "lo"}}"#,
                20000 + 2 * i,
                20001 + 2 * i
            )
        })
        .collect();
    let expiry = (20.0 / round_rate_hz).max(5.0);
    parse_config(&format!(
        r#"{{"nodes": [{}], "round_rate_hz": {round_rate_hz}, "payload_bytes": 0,
            "flush_interval_s": 30, "pending_expiry_s": {expiry}, "duration_s": {duration_s}}}"#,
        nodes.join(",")
    ))
    .expect("generated config is valid")
}

struct Harness {
    nodes: Vec<NodeHandle>,
    proxy: Arc<ProxyShared>,
    proxy_addrs: Vec<SocketAddr>,
    threads: Vec<JoinHandle<()>>,
}

impl Harness {
    fn shutdown(mut self) {
        for n in self.nodes.drain(..) {
            n.shutdown();
        }
        self.proxy.stop.store(true, Ordering::Release);
        self.proxy.sched.stop();
        for s in self.proxy.streams.lock().unwrap().drain(..) {
            let _ = s.shutdown(Shutdown::Both);
        }
        for a in &self.proxy_addrs {
            let _ = TcpStream::connect_timeout(a, Duration::from_millis(200));
        }
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

fn bind_local() -> io::Result<TcpListener> {
    TcpListener::bind("127.0.0.1:0")
}

/// Runs `cfg` for `duration_s` with every data-plane message delayed by
/// `model`, then STOPs, FETCHes and loads the resulting dataset.
pub fn run_virtual_cluster(
    cfg: &ClusterConfig,
    model: &LinkModel,
    duration_s: f64,
    opts: SimOptions,
) -> Result<SimRun, SimError> {
    for n in &cfg.nodes {
        for addr in [&n.data_address, &n.control_address] {
            if !is_loopback(addr) {
                return Err(SimError::NotLoopback(n.id, addr.clone()));
            }
        }
    }
    model.validate()?;
    let mut model = model.clone();
    model.index_hz.get_or_insert(cfg.round_rate_hz);
    for a in cfg.node_ids() {
        for b in cfg.node_ids() {
            sample_delay(&model, a, b, 0)?;
        }
    }

    let mut listeners = Vec::new();
    let mut cfg = cfg.clone();
    cfg.duration_s = duration_s;
    for n in &mut cfg.nodes {
        let (data, ctl) = (bind_local()?, bind_local()?);
        n.data_address = data.local_addr()?.to_string();
        n.control_address = ctl.local_addr()?.to_string();
        listeners.push((data, ctl));
    }
    cfg.validate()?;

    let model = Arc::new(model);
    let sched = Arc::new(Scheduler::default());
    let proxy = Arc::new(ProxyShared {
        model: model.clone(),
        sched: sched.clone(),
        stop: AtomicBool::new(false),
        streams: Mutex::new(Vec::new()),
    });
    let mut threads = Vec::new();
    let s = sched.clone();
    threads.push(thread::Builder::new().name("sim-sched".into()).spawn(move || s.run())?);
    let mut proxies = HashMap::new();
    let mut proxy_addrs = Vec::new();
    for from in &cfg.nodes {
        for to in &cfg.nodes {
            let l = bind_local()?;
            let addr = l.local_addr()?;
            proxies.insert((from.id, to.id), addr);
            proxy_addrs.push(addr);
            let target: SocketAddr = to
                .data_address
                .to_socket_addrs()?
                .next()
                .expect("bound address resolves");
            let p = proxy.clone();
            let (f, t) = (from.id, to.id);
            threads.push(
                thread::Builder::new()
                    .name(format!("sim-proxy-{f}-{t}"))
                    .spawn(move || serve_proxy(p, l, f, t, target))?,
            );
        }
    }

    let dialer: Arc<dyn Dialer> = Arc::new(ProxyDialer { proxies });
    let sinks = opts.sinks.clone().unwrap_or_else(|| Arc::new(CsvSinkFactory));
    let mut harness = Harness {
        nodes: Vec::new(),
        proxy,
        proxy_addrs,
        threads,
    };
    for (n, (data, ctl)) in cfg.nodes.iter().zip(listeners) {
        let node_opts = NodeOptions {
            data_dir: opts.out_dir.join("nodes").join(n.id.to_string()),
            dialer: dialer.clone(),
            sinks: sinks.clone(),
            data_listener: Some(data),
            control_listener: Some(ctl),
        };
        match NodeHandle::spawn(&cfg, n.id, node_opts) {
            Ok(h) => harness.nodes.push(h),
            Err(e) => {
                harness.shutdown();
                return Err(e.into());
            }
        }
    }

    let result = drive(&cfg, &opts);
    harness.shutdown();
    let (statuses, manifest, elapsed) = result?;
    let dataset = load_dir(&opts.out_dir, &cfg)?;
    let model = Arc::try_unwrap(model).unwrap_or_else(|m| (*m).clone());
    Ok(SimRun {
        config: cfg,
        model,
        dataset,
        statuses,
        manifest,
        elapsed,
    })
}

type Driven = (BTreeMap<NodeId, NodeStatus>, Manifest, Duration);

/// The controller side of a run: LOAD, START, wait out the schedule, STOP,
/// FETCH.
fn drive(cfg: &ClusterConfig, opts: &SimOptions) -> Result<Driven, SimError> {
    let mut ctl = ClusterHandle::new(cfg.clone());
    all_ok(ctl.push_config())?;
    ctl.start_when_ready(opts.ready_timeout)?;
    let started = Instant::now();
    info!("sim: {} nodes running for {} s", cfg.nodes.len(), cfg.duration_s);
    let limit = Duration::from_secs_f64(cfg.duration_s + cfg.pending_expiry_s + 60.0);
    let poll = Duration::from_millis(250).min(Duration::from_secs_f64(cfg.duration_s / 4.0));
    loop {
        thread::sleep(poll);
        let statuses = all_ok(ctl.status_all())?;
        if statuses.values().all(|s| s.phase == Phase::Stopped) {
            break;
        }
        if started.elapsed() > limit {
            return Err(SimError::Timeout(limit));
        }
    }
    let elapsed = started.elapsed();
    let statuses = all_ok(ctl.stop_all())?;
    let manifest = ctl.fetch_all(&opts.out_dir)?;
    Ok((statuses, manifest, elapsed))
}

/// Loads a model file.
pub fn load_model(path: &Path) -> Result<LinkModel, SimError> {
    LinkModel::from_json(&std::fs::read_to_string(path)?)
}
