//! Acceptance gate. Every criterion prints one `criterion N ... PASS|FAIL`
//! line to stderr (bypassing the test harness capture) and fails its test on
//! FAIL. All criteria share one lock: the virtual-cluster runs are timing
//! sensitive and must not compete for the CPU.

use std::collections::{BTreeMap, HashSet};
use std::io::{self, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use latmesh_core::analysis::quorum::quorum_series_from;
use latmesh_core::analysis::stats::{mean, percentile, summarize, two_sample_t};
use latmesh_core::analysis::{quorum_series, rounds, window_series, Dataset, PairFilter, RoundRecord};
use latmesh_core::node::recorder::{CsvFileSink, LossRecord, Observation, RecorderBuffer, Sink};
use latmesh_core::node::SinkFactory;
use latmesh_core::sim::{injected_rtt, loopback_config, run_virtual_cluster, Jitter, LinkModel, LinkSpec, SimOptions, SimRun};
use latmesh_core::topology::{estimate_traffic, ClusterConfig, NodeId};

static GATE: Mutex<()> = Mutex::new(());

fn gate() -> MutexGuard<'static, ()> {
    GATE.lock().unwrap_or_else(|e| e.into_inner())
}

type Outcome = Result<String, String>;

fn line(n: u32, name: &str, outcome: &Outcome) {
    let (verdict, detail) = match outcome {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    let _ = writeln!(io::stderr(), "criterion {n:>2} {name:<28} {verdict}  {detail}");
}

fn gate_check(n: u32, name: &str, outcome: Outcome) {
    line(n, name, &outcome);
    if let Err(e) = outcome {
        panic!("criterion {n} failed: {e}");
    }
}

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn rel_err(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

#[test]
fn criterion_01_traffic_arithmetic() {
    let _g = gate();
    let outcome = (|| {
        let mut cfg = loopback_config(8, 100.0, 1.0);
        cfg.payload_bytes = 1024;
        let bps = estimate_traffic(&cfg);
        ensure!(bps == 1_638_400.0, "estimate_traffic = {bps}, want 1638400");
        let mb = (bps / 1e6 * 10.0).round() / 10.0;
        let mbps = (bps * 8.0 / 1e6).round();
        ensure!(mb == 1.6 && mbps == 13.0, "{mb} MB/s, {mbps} Mbps");
        Ok(format!("{bps} B/s per direction = {mb} MB/s = {mbps} Mbps"))
    })();
    gate_check(1, "traffic arithmetic", outcome);
}

fn rss_bytes() -> usize {
    let status = std::fs::read_to_string("/proc/self/status").unwrap_or_default();
    status
        .lines()
        .find_map(|l| l.strip_prefix("VmRSS:"))
        .and_then(|v| v.trim().trim_end_matches("kB").trim().parse::<usize>().ok())
        .map_or(0, |kb| kb * 1024)
}

#[test]
fn criterion_02_memory_budget() {
    let _g = gate();
    const N: u64 = 20_000_000;
    const BUDGET: usize = 1_000_000_000;
    let outcome = (|| {
        let started = Instant::now();
        let before = rss_bytes();
        let buf = RecorderBuffer::<Observation>::new();
        for i in 0..N {
            buf.record(Observation {
                sender: NodeId((i % 8) as u32),
                receiver: NodeId((i / 8 % 8) as u32),
                round: i / 64,
                send_wall_ts_us: 1_700_000_000_000_000 + (i as i64) * 10,
                rtt_us: 100 + (i % 977) as i64,
            })
            .map_err(|e| e.to_string())?;
        }
        let held = buf.memory_bytes();
        let growth = rss_bytes().saturating_sub(before);
        ensure!(buf.in_buffer_count() as u64 == N, "buffer holds {}", buf.in_buffer_count());
        ensure!(held <= BUDGET, "buffer accounts {held} bytes");
        ensure!(before == 0 || growth <= BUDGET, "resident set grew {growth} bytes");
        Ok(format!(
            "{N} observations: {:.1} MB buffered, RSS +{:.1} MB, {:.1} s",
            held as f64 / 1e6,
            growth as f64 / 1e6,
            started.elapsed().as_secs_f64()
        ))
    })();
    gate_check(2, "memory budget", outcome);
}

fn synthetic_dataset(rng: &mut ChaCha8Rng, rounds_n: u64) -> Dataset {
    let cfg = loopback_config(3, 100.0, 1.0);
    let mut rows = Vec::new();
    for round in 0..rounds_n {
        for receiver in 1..=3u32 {
            // Remote replies sometimes go missing so that short rounds
            // occur; the self-loop reply keeps every round visible.
            if receiver != 1 && rng.random_bool(0.15) {
                continue;
            }
            let rtt = match rng.random_range(0..4) {
                0 => rng.random_range(0..50),
                _ => rng.random_range(0..1_000_000),
            };
            rows.push(Observation {
                sender: NodeId(1),
                receiver: NodeId(receiver),
                round,
                send_wall_ts_us: 1_700_000_000_000_000 + round as i64 * 10_000,
                rtt_us: rtt,
            });
        }
    }
    Dataset::new(rows, cfg).unwrap()
}

#[test]
fn criterion_04_quorum_oracle() {
    let _g = gate();
    let outcome = (|| {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ds = synthetic_dataset(&mut rng, 10_000);
        let members = [NodeId(1), NodeId(2), NodeId(3)];
        // Oracle: group by hand, sort every round fully.
        let mut by_round: BTreeMap<u64, Vec<i64>> = BTreeMap::new();
        for o in &ds.observations {
            by_round.entry(o.round).or_default().push(o.rtt_us);
        }
        let mut checked = 0;
        for k in 1..=3usize {
            let q = quorum_series(&ds, NodeId(1), &members, k);
            let mut want_rounds = Vec::new();
            let mut want = Vec::new();
            let mut short = 0;
            for (r, v) in &by_round {
                let mut v = v.clone();
                v.sort();
                if v.len() >= k {
                    want_rounds.push(*r);
                    want.push(v[k - 1]);
                } else {
                    short += 1;
                }
            }
            ensure!(q.rounds == want_rounds, "k={k}: round sets differ");
            ensure!(q.samples == want, "k={k}: samples differ from oracle");
            ensure!(q.insufficient == short, "k={k}: {} short rounds, oracle {short}", q.insufficient);
            checked += q.samples.len();
        }
        let rr: Vec<RoundRecord> = rounds(&ds, NodeId(1), &members);
        let full: Vec<RoundRecord> = rr.into_iter().filter(|r| r.replies.len() == 3).collect();
        let q2 = quorum_series_from(&full, 2);
        let q3 = quorum_series_from(&full, 3);
        let violations = q2.samples.iter().zip(&q3.samples).filter(|(a, b)| a > b).count();
        ensure!(violations == 0, "{violations} rounds with Q-2/3 > Q-3/3");
        Ok(format!(
            "{} rounds, {checked} quorum samples match the full-sort oracle, 0 of {} Q-2/3 > Q-3/3",
            by_round.len(),
            q2.samples.len()
        ))
    })();
    gate_check(4, "quorum oracle", outcome);
}

/// Nearest rank with exact rational percentiles `p_milli / 1000`.
fn oracle_pick(sorted: &[i64], p_milli: u64) -> i64 {
    let n = sorted.len() as u64;
    let rank = (p_milli * n).div_ceil(100_000).max(1);
    sorted[rank as usize - 1]
}

#[test]
fn criterion_06_percentile_oracle() {
    let _g = gate();
    let outcome = (|| {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let fixed = [5_000u64, 25_000, 50_000, 90_000, 95_000, 99_000, 99_900, 99_990, 99_999, 100_000];
        let mut total = 0usize;
        for set in 0..1000 {
            let size = 10f64.powf(rng.random_range(0.0..=5.0)).round().clamp(1.0, 100_000.0) as usize;
            let spread: i64 = [10, 1_000, 1_000_000, i32::MAX as i64][rng.random_range(0..4)];
            let samples: Vec<i64> = (0..size).map(|_| rng.random_range(-spread / 10..spread)).collect();
            total += size;
            let mut sorted = samples.clone();
            sorted.sort();
            let mut ps: Vec<u64> = fixed.to_vec();
            ps.extend((0..5).map(|_| rng.random_range(1..=100_000u64)));
            for p in ps {
                let got = percentile(&samples, p as f64 / 1000.0).map_err(|e| e.to_string())?;
                let want = oracle_pick(&sorted, p);
                ensure!(got == want, "set {set} (n={size}) p={}: {got} != {want}", p as f64 / 1000.0);
            }
            let s = summarize(&samples).map_err(|e| e.to_string())?;
            let sum: i128 = sorted.iter().fold(0i128, |acc, &x| acc + x as i128);
            let want = [
                oracle_pick(&sorted, 50_000),
                oracle_pick(&sorted, 5_000),
                oracle_pick(&sorted, 25_000),
                oracle_pick(&sorted, 90_000),
                oracle_pick(&sorted, 95_000),
                oracle_pick(&sorted, 99_000),
                oracle_pick(&sorted, 99_900),
                oracle_pick(&sorted, 99_990),
                oracle_pick(&sorted, 99_999),
                sorted[size - 1],
            ];
            let got = [s.median, s.p5, s.p25, s.p90, s.p95, s.p99, s.p999, s.p9999, s.p99999, s.max];
            ensure!(got == want, "set {set} (n={size}): summary {got:?} != {want:?}");
            ensure!(s.count == size, "set {set}: count {}", s.count);
            ensure!(s.mean == sum as f64 / size as f64, "set {set}: mean {}", s.mean);
        }
        Ok(format!("1000 multisets, {total} samples, every field exact"))
    })();
    gate_check(6, "percentile/summary oracle", outcome);
}

/// Textbook pooled-variance t from raw sums.
fn oracle_t(a: &[f64], b: &[f64]) -> f64 {
    let stats = |v: &[f64]| {
        let n = v.len() as f64;
        let s: f64 = v.iter().sum();
        let s2: f64 = v.iter().map(|x| x * x).sum();
        (n, s / n, (s2 - s * s / n) / (n - 1.0))
    };
    let (na, ma, va) = stats(a);
    let (nb, mb, vb) = stats(b);
    let sp2 = ((na - 1.0) * va + (nb - 1.0) * vb) / (na + nb - 2.0);
    (ma - mb) / (sp2 * (1.0 / na + 1.0 / nb)).sqrt()
}

#[test]
fn criterion_07_t_test_oracle() {
    let _g = gate();
    let outcome = (|| {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut worst = 0.0f64;
        for pair in 0..50 {
            let (na, nb) = (rng.random_range(2..300), rng.random_range(2..300));
            let (ca, cb) = (rng.random_range(100.0..1000.0), rng.random_range(100.0..1000.0));
            let a: Vec<f64> = (0..na).map(|_| ca + rng.random_range(-50.0..50.0)).collect();
            let b: Vec<f64> = (0..nb).map(|_| cb + rng.random_range(-50.0..50.0)).collect();
            let got = two_sample_t(&a, &b).map_err(|e| e.to_string())?;
            let want = oracle_t(&a, &b);
            let err = rel_err(got.t_statistic, want);
            ensure!(err <= 1e-9, "pair {pair}: t {} vs {want} (rel {err:e})", got.t_statistic);
            ensure!(got.df == (na + nb - 2) as f64, "pair {pair}: df {}", got.df);
            worst = worst.max(err);
        }
        let a: Vec<f64> = (0..40).map(|_| rng.random_range(0.0..1000.0)).collect();
        let same = two_sample_t(&a, &a).map_err(|e| e.to_string())?;
        ensure!(same.t_statistic == 0.0, "identical samples gave t = {}", same.t_statistic);
        Ok(format!("50 pairs, worst relative error {worst:.1e}; identical samples t = 0, p = {}", same.p_value))
    })();
    gate_check(7, "t-test oracle", outcome);
}

// ---- virtual cluster criteria ----

fn fixed(us: u64) -> LinkSpec {
    LinkSpec {
        base_delay_us: us,
        jitter: Jitter::None,
    }
}

/// Zero-delay self-loops plus the given symmetric one-way delays.
fn symmetric_model(default_us: u64, pairs: &[(u32, u32, u64)]) -> LinkModel {
    let mut m = LinkModel::uniform(fixed(default_us));
    for id in 1..=3 {
        m.set(NodeId(id), NodeId(id), fixed(0));
    }
    for &(a, b, us) in pairs {
        m = m.with_symmetric(NodeId(a), NodeId(b), fixed(us));
    }
    m
}

fn run(cfg: &ClusterConfig, model: &LinkModel, duration_s: f64, sinks: Option<Arc<dyn SinkFactory>>) -> Result<(SimRun, tempfile::TempDir), String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut opts = SimOptions::new(dir.path());
    opts.sinks = sinks;
    let run = run_virtual_cluster(cfg, model, duration_s, opts).map_err(|e| e.to_string())?;
    Ok((run, dir))
}

fn overheads(run: &SimRun) -> Vec<i64> {
    run.dataset
        .observations
        .iter()
        .map(|o| o.rtt_us - injected_rtt(&run.model, o.sender, o.receiver, o.round).unwrap() as i64)
        .collect()
}

fn unordered(a: NodeId, b: NodeId) -> (NodeId, NodeId) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

/// Conservation, at-most-once and the injected-delay floor.
fn check_run(label: &str, run: &SimRun) -> Outcome {
    let n = run.config.nodes.len() as u64;
    for s in run.statuses.values() {
        ensure!(s.pending == 0, "{label}: node {} left {} pending", s.node, s.pending);
        ensure!(s.probes_sent == s.rounds_sent * n, "{label}: node {} probes {} != rounds x n", s.node, s.probes_sent);
        ensure!(
            s.rounds_sent * n == s.observations + s.losses + s.late_echoes,
            "{label}: node {}: {} x {n} != {} + {} + {}",
            s.node,
            s.rounds_sent,
            s.observations,
            s.losses,
            s.late_echoes
        );
    }
    let mut seen = HashSet::new();
    for o in &run.dataset.observations {
        ensure!(seen.insert((o.sender, o.receiver, o.round)), "{label}: duplicate {:?}", (o.sender, o.receiver, o.round));
    }
    let recorded: u64 = run.statuses.values().map(|s| s.observations).sum();
    ensure!(recorded == run.dataset.len() as u64, "{label}: {recorded} counted, {} fetched", run.dataset.len());
    let below = overheads(run).into_iter().filter(|&d| d < 0).count();
    ensure!(below == 0, "{label}: {below} RTTs below the injected delay");
    Ok(format!(
        "{label}: {} rounds, {} obs, {} losses, {} late",
        run.rounds_sent(),
        recorded,
        run.statuses.values().map(|s| s.losses).sum::<u64>(),
        run.statuses.values().map(|s| s.late_echoes).sum::<u64>()
    ))
}

fn check_windows(label: &str, run: &SimRun) -> Result<f64, String> {
    let all: Vec<i64> = run.dataset.observations.iter().map(|o| o.rtt_us).collect();
    ensure!(!all.is_empty(), "{label}: empty dataset");
    let s = window_series(&run.dataset, 30.0, &PairFilter::default());
    let got = s.weighted_mean().ok_or(format!("{label}: no windows"))?;
    let err = rel_err(got, mean(&all));
    ensure!(err <= 1e-9, "{label}: weighted window mean {got} vs {} (rel {err:e})", mean(&all));
    Ok(err)
}

/// Observation sink that blocks once, on its `stall_on`-th append.
struct StallingSink {
    inner: CsvFileSink,
    appends: u32,
    stall_on: u32,
    stall: Duration,
    stalls: Arc<AtomicU32>,
}

impl Sink<Observation> for StallingSink {
    fn append(&mut self, chunks: &[Vec<Observation>]) -> io::Result<()> {
        self.appends += 1;
        if self.appends == self.stall_on {
            self.stalls.fetch_add(1, Ordering::Relaxed);
            std::thread::sleep(self.stall);
        }
        self.inner.append(chunks)
    }
}

struct StallingFactory {
    stalls: Arc<AtomicU32>,
}

impl SinkFactory for StallingFactory {
    fn observations(&self, path: &Path) -> io::Result<Box<dyn Sink<Observation>>> {
        Ok(Box::new(StallingSink {
            inner: CsvFileSink::create::<Observation>(path)?,
            appends: 0,
            stall_on: 2,
            stall: Duration::from_secs(5),
            stalls: self.stalls.clone(),
        }))
    }

    fn losses(&self, path: &Path) -> io::Result<Box<dyn Sink<LossRecord>>> {
        Ok(Box::new(CsvFileSink::create::<LossRecord>(path)?))
    }
}

fn fidelity(cfg: &ClusterConfig, budget: i64) -> Result<(String, SimRun), String> {
    let model = symmetric_model(0, &[(1, 2, 2500), (1, 3, 5000), (2, 3, 10_000)]);
    let (run, _dir) = run(cfg, &model, 60.0, None)?;
    let mut per_pair: BTreeMap<(NodeId, NodeId), Vec<i64>> = BTreeMap::new();
    for o in &run.dataset.observations {
        per_pair.entry(unordered(o.sender, o.receiver)).or_default().push(o.rtt_us);
    }
    ensure!(per_pair.len() == 6, "only {} pairs observed", per_pair.len());
    let mut parts = Vec::new();
    for ((a, b), v) in &per_pair {
        let inj = injected_rtt(&run.model, *a, *b, 0).unwrap() as f64;
        let m = mean(v);
        let p99 = percentile(v, 99.0).unwrap() as f64;
        ensure!(
            m >= inj && m <= inj + budget as f64,
            "pair {a}-{b}: mean {m:.1} outside [{inj}, {}]",
            inj + budget as f64
        );
        ensure!(p99 <= inj + 2.0 * budget as f64, "pair {a}-{b}: p99 {p99} > {}", inj + 2.0 * budget as f64);
        if a != b {
            parts.push(format!("{a}-{b} {inj:.0}+{:.0}", m - inj));
        }
    }
    Ok((format!("budget {budget} us; mean RTT = injected + overhead: {}", parts.join(", ")), run))
}

fn masking(cfg: &ClusterConfig) -> Result<(String, SimRun), String> {
    // Node 3 adds 100 ms to every round trip it takes part in.
    let model = symmetric_model(1000, &[(1, 3, 51_000), (2, 3, 51_000)]);
    let (run, _dir) = run(cfg, &model, 120.0, None)?;
    let ds = &run.dataset;
    let group = [NodeId(1), NodeId(2), NodeId(3)];
    let mut q2 = Vec::new();
    for sender in [NodeId(1), NodeId(2)] {
        q2.extend(quorum_series(ds, sender, &group, 2).samples);
    }
    let fast: Vec<i64> = ds.samples(&PairFilter {
        pair: Some((NodeId(1), NodeId(2))),
        ..Default::default()
    });
    let raw: Vec<i64> = ds.observations.iter().filter(|o| o.sender != o.receiver).map(|o| o.rtt_us).collect();
    ensure!(!q2.is_empty() && !fast.is_empty(), "no quorum or fast-pair samples");
    let (q, f, r) = (
        percentile(&q2, 99.999).unwrap(),
        percentile(&fast, 99.999).unwrap(),
        percentile(&raw, 99.999).unwrap(),
    );
    ensure!(q < 2 * f, "Q-2/3 p99999 {q} us not below 2 x fast-pair p99999 {f} us");
    ensure!(r > 100_000, "raw p99999 {r} us does not exceed 100 ms");
    Ok((
        format!("Q-2/3 p99999 {q} us < 2 x {f} us (fast pair); raw node-to-node p99999 {r} us ({} quorum rounds)", q2.len()),
        run,
    ))
}

fn lossy(cfg: &ClusterConfig) -> Result<(String, SimRun), String> {
    let mut cfg = cfg.clone();
    cfg.pending_expiry_s = 1.0;
    let mut model = symmetric_model(500, &[]);
    // Half of every 2 s period on 1 -> 2 is held for 200 s: those probes
    // and echoes expire.
    model.set(
        NodeId(1),
        NodeId(2),
        LinkSpec {
            base_delay_us: 500,
            jitter: Jitter::Spike { period_s: 2.0, magnitude_us: 200_000_000, width_s: 1.0 },
        },
    );
    // Echoes from 3 to 1 are sometimes held past the expiry but still arrive.
    model.set(
        NodeId(3),
        NodeId(1),
        LinkSpec {
            base_delay_us: 500,
            jitter: Jitter::Spike { period_s: 5.0, magnitude_us: 1_500_000, width_s: 0.5 },
        },
    );
    let (run, _dir) = run(&cfg, &model, 20.0, None)?;
    let sent_12 = run.statuses[&NodeId(1)].rounds_sent;
    let got_12 = run
        .dataset
        .observations
        .iter()
        .filter(|o| o.sender == NodeId(1) && o.receiver == NodeId(2))
        .count() as f64;
    let loss = 1.0 - got_12 / sent_12 as f64;
    ensure!((0.45..=0.55).contains(&loss), "1 -> 2 loss rate {loss:.3}, expected about 0.5");
    let late = run.statuses[&NodeId(1)].late_echoes;
    ensure!(late > 0, "no late echoes reached node 1");
    Ok((format!("1->2 loss {:.1}%, {late} late echoes at node 1", loss * 100.0), run))
}

fn flush_stall(cfg: &ClusterConfig) -> Result<(String, SimRun), String> {
    let mut cfg = cfg.clone();
    cfg.flush_interval_s = 2.0;
    let stalls = Arc::new(AtomicU32::new(0));
    let factory: Arc<dyn SinkFactory> = Arc::new(StallingFactory { stalls: stalls.clone() });
    let model = symmetric_model(500, &[]);
    let (run, _dir) = run(&cfg, &model, 20.0, Some(factory))?;
    let n = cfg.nodes.len() as u32;
    ensure!(stalls.load(Ordering::Relaxed) == n, "{} of {n} sinks stalled", stalls.load(Ordering::Relaxed));
    let worst = run.statuses.values().map(|s| s.max_record_us).fold(0.0, f64::max);
    ensure!(worst <= 1000.0, "slowest record call {worst:.1} us");
    for s in run.statuses.values() {
        ensure!(s.flushed == s.observations, "node {}: flushed {} of {}", s.node, s.flushed, s.observations);
        ensure!(s.losses == 0, "node {}: {} losses", s.node, s.losses);
    }
    Ok((format!("5 s sink stall on every node; slowest record {worst:.1} us; all rows stored"), run))
}

fn schedule(cfg: &ClusterConfig) -> Result<(String, SimRun), String> {
    let model = symmetric_model(500, &[]);
    let (run, _dir) = run(cfg, &model, 600.0, None)?;
    let mut counts = Vec::new();
    for s in run.statuses.values() {
        ensure!(s.rounds_sent.abs_diff(60_000) <= 600, "node {} fired {} rounds", s.node, s.rounds_sent);
        counts.push(s.rounds_sent.to_string());
    }
    Ok((format!("rounds per node {} in {:.1} s", counts.join("/"), run.elapsed.as_secs_f64()), run))
}

#[test]
fn virtual_cluster_criteria() {
    let _g = gate();
    let cfg = loopback_config(3, 100.0, 1.0);
    let mut failed = Vec::new();
    let mut runs: Vec<(&str, SimRun)> = Vec::new();
    let mut record = |n: u32, name: &str, label: &'static str, r: Result<(String, SimRun), String>, runs: &mut Vec<(&str, SimRun)>| {
        let outcome = r.map(|(msg, run)| {
            runs.push((label, run));
            msg
        });
        line(n, name, &outcome);
        if outcome.is_err() {
            failed.push(n);
        }
    };

    // Machine baseline: RTTs with nothing injected.
    let null = run(&cfg, &LinkModel::zero(), 30.0, None).map(|(r, _)| r);
    let budget = match &null {
        Ok(r) => {
            let oh = overheads(r);
            let p99 = percentile(&oh, 99.0).unwrap_or(2000);
            let _ = writeln!(
                io::stderr(),
                "calibration: null run p50 {} us, p99 {p99} us over {} RTTs",
                percentile(&oh, 50.0).unwrap_or(0),
                oh.len()
            );
            p99
        }
        Err(e) => {
            let _ = writeln!(io::stderr(), "calibration run failed: {e}");
            2000
        }
    };
    if let Ok(r) = null {
        runs.push(("null", r));
    }

    record(3, "injected-delay fidelity", "fidelity", fidelity(&cfg, budget), &mut runs);
    record(5, "quorum masking", "masking", masking(&cfg), &mut runs);
    let loss_run = lossy(&cfg);
    let loss_ok = loss_run.is_ok();
    let loss_detail = loss_run.as_ref().map(|(m, _)| m.clone()).unwrap_or_else(|e| e.clone());
    if let Ok((_, r)) = loss_run {
        runs.push(("loss", r));
    }
    record(9, "flush isolation", "flush-stall", flush_stall(&cfg), &mut runs);
    record(10, "schedule stability", "10-minute", schedule(&cfg), &mut runs);

    let mut c8 = if loss_ok { Ok(loss_detail) } else { Err(loss_detail) };
    let mut parts = Vec::new();
    for (label, r) in &runs {
        match check_run(label, r) {
            Ok(m) => parts.push(m),
            Err(e) => c8 = Err(e),
        }
    }
    let c8 = c8.map(|m| format!("{m}; {}", parts.join("; ")));
    line(8, "conservation, at-most-once", &c8);
    if c8.is_err() {
        failed.push(8);
    }

    let mut worst = 0.0f64;
    let mut c11 = Ok(());
    for (label, r) in &runs {
        match check_windows(label, r) {
            Ok(e) => worst = worst.max(e),
            Err(e) => c11 = Err(e),
        }
    }
    let c11 = c11.map(|()| format!("{} datasets, worst relative error {worst:.1e}", runs.len()));
    line(11, "windowed-series identity", &c11);
    if c11.is_err() {
        failed.push(11);
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
