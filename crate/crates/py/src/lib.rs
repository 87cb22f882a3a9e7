//! Python bindings: configs, wire frames, statistics, datasets and the
//! virtual cluster.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

use latmesh_core::analysis::{self, quorum, stats, AnalysisError, PairFilter};
use latmesh_core::node::recorder::Observation;
use latmesh_core::sim::{self, LinkModel, SimOptions};
use latmesh_core::topology::{self, ClusterConfig, NodeId, PairClass};
use latmesh_core::wire::{self, EchoMessage, Message, ProbeMessage};

create_exception!(latmesh, LatmeshError, PyException);

fn value_err(e: impl ToString) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl ToString) -> PyErr {
    LatmeshError::new_err(e.to_string())
}

fn analysis_err(e: AnalysisError) -> PyErr {
    match e {
        AnalysisError::Io(_) | AnalysisError::ParseError { .. } => runtime_err(e),
        _ => value_err(e),
    }
}

fn parse_class(name: Option<&str>) -> PyResult<Option<PairClass>> {
    name.map(|n| n.parse::<PairClass>().map_err(value_err)).transpose()
}

/// A validated cluster config.
#[pyclass(name = "Config", module = "latmesh", frozen)]
struct PyConfig {
    inner: ClusterConfig,
}

#[pymethods]
impl PyConfig {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        topology::parse_config(text)
            .map(|inner| Self { inner })
            .map_err(value_err)
    }

    /// `n` nodes in one subnet on loopback, for the virtual cluster.
    #[staticmethod]
    #[pyo3(signature = (n, round_rate_hz=100.0, duration_s=10.0))]
    fn loopback(n: u32, round_rate_hz: f64, duration_s: f64) -> PyResult<Self> {
        if n == 0 || !(round_rate_hz > 0.0) || !(duration_s > 0.0) {
            return Err(value_err("need n >= 1 and positive rate and duration"));
        }
        Ok(Self {
            inner: sim::loopback_config(n, round_rate_hz, duration_s),
        })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    fn digest(&self) -> String {
        self.inner.digest()
    }

    #[getter]
    fn node_ids(&self) -> Vec<u32> {
        self.inner.node_ids().into_iter().map(|n| n.0).collect()
    }

    #[getter]
    fn round_rate_hz(&self) -> f64 {
        self.inner.round_rate_hz
    }

    #[getter]
    fn payload_bytes(&self) -> u32 {
        self.inner.payload_bytes
    }

    #[getter]
    fn duration_s(&self) -> f64 {
        self.inner.duration_s
    }

    /// Pair class slug of two node ids.
    fn classify(&self, a: u32, b: u32) -> PyResult<String> {
        self.inner
            .classify(NodeId(a), NodeId(b))
            .map(|c| c.slug().to_string())
            .ok_or_else(|| value_err(format!("node {a} or {b} not in config")))
    }

    /// Bytes per second each node sends (and receives).
    fn estimate_traffic(&self) -> f64 {
        topology::estimate_traffic(&self.inner)
    }

    fn quorum_groups(&self) -> Vec<(String, Vec<u32>)> {
        topology::quorum_groups(&self.inner)
            .into_iter()
            .map(|g| (g.label, g.nodes.into_iter().map(|n| n.0).collect()))
            .collect()
    }

    fn __len__(&self) -> usize {
        self.inner.nodes.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Config(nodes={}, round_rate_hz={}, duration_s={})",
            self.inner.nodes.len(),
            self.inner.round_rate_hz,
            self.inner.duration_s
        )
    }
}

/// Observations plus their topology.
#[pyclass(name = "Dataset", module = "latmesh", frozen)]
struct PyDataset {
    inner: analysis::Dataset,
}

impl PyDataset {
    fn filter(&self, class: Option<&str>, pair: Option<(u32, u32)>) -> PyResult<PairFilter> {
        Ok(PairFilter {
            class: parse_class(class)?,
            pair: pair.map(|(a, b)| (NodeId(a), NodeId(b))),
            sender: None,
        })
    }
}

#[pymethods]
impl PyDataset {
    /// Loads every `node_*_obs.csv` in `dir`.
    #[staticmethod]
    fn load_dir(py: Python<'_>, dir: PathBuf, config: &PyConfig) -> PyResult<Self> {
        let cfg = config.inner.clone();
        py.detach(|| analysis::load_dir(&dir, &cfg))
            .map(|inner| Self { inner })
            .map_err(analysis_err)
    }

    /// Rows are `(sender, receiver, round, send_wall_ts_us, rtt_us)`.
    #[staticmethod]
    fn from_rows(rows: Vec<(u32, u32, u64, i64, i64)>, config: &PyConfig) -> PyResult<Self> {
        let obs = rows
            .into_iter()
            .map(|(s, r, round, ts, rtt)| Observation {
                sender: NodeId(s),
                receiver: NodeId(r),
                round,
                send_wall_ts_us: ts,
                rtt_us: rtt,
            })
            .collect();
        analysis::Dataset::new(obs, config.inner.clone())
            .map(|inner| Self { inner })
            .map_err(analysis_err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn rows(&self) -> Vec<(u32, u32, u64, i64, i64)> {
        self.inner
            .observations
            .iter()
            .map(|o| (o.sender.0, o.receiver.0, o.round, o.send_wall_ts_us, o.rtt_us))
            .collect()
    }

    /// RTTs, optionally restricted to a pair class and/or an unordered pair.
    #[pyo3(signature = (class_=None, pair=None))]
    fn samples(&self, class_: Option<&str>, pair: Option<(u32, u32)>) -> PyResult<Vec<i64>> {
        Ok(self.inner.samples(&self.filter(class_, pair)?))
    }

    /// Sample count per pair class slug.
    fn class_counts(&self) -> Vec<(String, usize)> {
        analysis::group_by_class(&self.inner)
            .into_iter()
            .map(|(c, v)| (c.slug().to_string(), v.len()))
            .collect()
    }

    fn report_csv(&self) -> PyResult<String> {
        analysis::report(&self.inner).map(|r| r.to_csv()).map_err(analysis_err)
    }

    fn report_text(&self) -> PyResult<String> {
        analysis::report(&self.inner).map(|r| r.to_text()).map_err(analysis_err)
    }

    /// `(window_start_wall_us, mean_rtt_us, count)` per non-empty window.
    #[pyo3(signature = (window_s=30.0, class_=None, pair=None))]
    fn window_series(&self, window_s: f64, class_: Option<&str>, pair: Option<(u32, u32)>) -> PyResult<Vec<(i64, f64, u64)>> {
        if !(window_s > 0.0) {
            return Err(value_err("window_s must be positive"));
        }
        let s = analysis::window_series(&self.inner, window_s, &self.filter(class_, pair)?);
        Ok(s.points.iter().map(|p| (p.window_start_wall_us, p.mean_rtt_us, p.count)).collect())
    }

    /// Q-k/n latencies of `sender`'s rounds over `nodes`; returns
    /// `(samples, rounds, insufficient)`.
    fn quorum_series(&self, sender: u32, nodes: Vec<u32>, k: usize) -> PyResult<(Vec<i64>, Vec<u64>, usize)> {
        if k == 0 {
            return Err(value_err("k must be at least 1"));
        }
        let set: Vec<NodeId> = nodes.into_iter().map(NodeId).collect();
        let q = analysis::quorum_series(&self.inner, NodeId(sender), &set, k);
        Ok((q.samples, q.rounds, q.insufficient))
    }
}

/// Equal-weight merge: every run contributes the same count per class.
#[pyfunction]
fn merge_runs(runs: Vec<PyRef<'_, PyDataset>>) -> PyResult<PyDataset> {
    let owned: Vec<analysis::Dataset> = runs.iter().map(|r| r.inner.clone()).collect();
    analysis::merge_runs(&owned)
        .map(|inner| PyDataset { inner })
        .map_err(analysis_err)
}

fn check_p(p: f64) -> PyResult<()> {
    if p > 0.0 && p <= 100.0 {
        Ok(())
    } else {
        Err(value_err(format!("percentile {p} outside (0, 100]")))
    }
}

/// Nearest-rank percentile.
#[pyfunction]
fn percentile(samples: Vec<i64>, p: f64) -> PyResult<i64> {
    check_p(p)?;
    stats::percentile(&samples, p).map_err(analysis_err)
}

#[pyfunction]
fn summarize<'py>(py: Python<'py>, samples: Vec<i64>) -> PyResult<Bound<'py, PyDict>> {
    let s = stats::summarize(&samples).map_err(analysis_err)?;
    let d = PyDict::new(py);
    d.set_item("count", s.count)?;
    for (name, v) in stats::StatsSummary::COLUMNS.iter().zip(s.values()) {
        if *name == "mean" {
            d.set_item(*name, v)?;
        } else {
            d.set_item(*name, v as i64)?;
        }
    }
    Ok(d)
}

/// `(t, p, df)` of Student's pooled-variance two-sample t-test.
#[pyfunction]
fn two_sample_t(a: Vec<f64>, b: Vec<f64>) -> PyResult<(f64, f64, f64)> {
    let t = stats::two_sample_t(&a, &b).map_err(analysis_err)?;
    Ok((t.t_statistic, t.p_value, t.df))
}

/// `(lower_edge_us, count)` per non-empty bin; width 0 picks one.
#[pyfunction]
#[pyo3(signature = (samples, bin_width_us=0))]
fn histogram(samples: Vec<i64>, bin_width_us: i64) -> PyResult<(i64, Vec<(i64, u64)>)> {
    if bin_width_us < 0 {
        return Err(value_err("bin_width_us must be >= 0"));
    }
    let h = stats::histogram(&samples, bin_width_us).map_err(analysis_err)?;
    Ok((h.bin_width_us, h.bins.into_iter().collect()))
}

#[pyfunction]
fn cdf(samples: Vec<i64>) -> PyResult<Vec<(i64, f64)>> {
    stats::cdf(&samples).map(|c| c.points).map_err(analysis_err)
}

/// k-th smallest reply latency, or None with fewer than k replies.
#[pyfunction]
fn quorum_latency(replies: Vec<i64>, k: usize) -> PyResult<Option<i64>> {
    if k == 0 {
        return Err(value_err("k must be at least 1"));
    }
    let rr = quorum::RoundRecord {
        sender: NodeId(0),
        round: 0,
        replies: replies.into_iter().enumerate().map(|(i, v)| (NodeId(i as u32), v)).collect(),
    };
    Ok(quorum::quorum_latency(&rr, k).ok())
}

#[pyfunction]
#[pyo3(signature = (sender, round, payload=Vec::new()))]
fn encode_probe<'py>(py: Python<'py>, sender: u32, round: u64, payload: Vec<u8>) -> PyResult<Bound<'py, PyBytes>> {
    let frame = wire::encode_probe(&ProbeMessage {
        sender: NodeId(sender),
        round,
        payload,
    })
    .map_err(value_err)?;
    Ok(PyBytes::new(py, &frame))
}

#[pyfunction]
#[pyo3(signature = (responder, origin_sender, round, payload=Vec::new()))]
fn encode_echo<'py>(
    py: Python<'py>,
    responder: u32,
    origin_sender: u32,
    round: u64,
    payload: Vec<u8>,
) -> PyResult<Bound<'py, PyBytes>> {
    let frame = wire::encode_echo(&EchoMessage {
        responder: NodeId(responder),
        origin_sender: NodeId(origin_sender),
        round,
        payload,
    })
    .map_err(value_err)?;
    Ok(PyBytes::new(py, &frame))
}

/// Decodes one complete frame into a dict with a `kind` key.
#[pyfunction]
fn decode_frame<'py>(py: Python<'py>, frame: &[u8]) -> PyResult<Bound<'py, PyDict>> {
    let body = wire::frame_body(frame).map_err(value_err)?;
    let d = PyDict::new(py);
    match wire::decode_body(body).map_err(value_err)? {
        Message::Probe(p) => {
            d.set_item("kind", "probe")?;
            d.set_item("sender", p.sender.0)?;
            d.set_item("round", p.round)?;
            d.set_item("payload", PyBytes::new(py, &p.payload))?;
        }
        Message::Echo(e) => {
            d.set_item("kind", "echo")?;
            d.set_item("responder", e.responder.0)?;
            d.set_item("origin_sender", e.origin_sender.0)?;
            d.set_item("round", e.round)?;
            d.set_item("payload", PyBytes::new(py, &e.payload))?;
        }
    }
    Ok(d)
}

/// Injected one-way delay in microseconds for message `index` on `src -> dst`.
#[pyfunction]
fn sample_delay(model_json: &str, src: u32, dst: u32, index: u64) -> PyResult<u64> {
    let model = LinkModel::from_json(model_json).map_err(value_err)?;
    sim::sample_delay(&model, NodeId(src), NodeId(dst), index).map_err(value_err)
}

/// Runs a loopback cluster with injected delays. Returns the dataset and
/// the final STATUS of every node as dicts.
#[pyfunction]
#[pyo3(signature = (config, duration_s, out_dir, model_json=None))]
fn run_virtual_cluster<'py>(
    py: Python<'py>,
    config: &PyConfig,
    duration_s: f64,
    out_dir: PathBuf,
    model_json: Option<&str>,
) -> PyResult<(PyDataset, Bound<'py, PyAny>)> {
    let model = match model_json {
        Some(text) => LinkModel::from_json(text).map_err(value_err)?,
        None => LinkModel::zero(),
    };
    if !(duration_s > 0.0) {
        return Err(value_err("duration_s must be positive"));
    }
    let cfg = config.inner.clone();
    let run = py
        .detach(|| sim::run_virtual_cluster(&cfg, &model, duration_s, SimOptions::new(out_dir)))
        .map_err(runtime_err)?;
    let statuses: Vec<_> = run.statuses.values().collect();
    let json = serde_json::to_string(&statuses).map_err(runtime_err)?;
    let parsed = py.import("json")?.call_method1("loads", (json,))?;
    Ok((PyDataset { inner: run.dataset }, parsed))
}

#[pymodule]
fn latmesh(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("LatmeshError", m.py().get_type::<LatmeshError>())?;
    m.add("HEADER_LEN", wire::HEADER_LEN)?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyDataset>()?;
    m.add_function(wrap_pyfunction!(merge_runs, m)?)?;
    m.add_function(wrap_pyfunction!(percentile, m)?)?;
    m.add_function(wrap_pyfunction!(summarize, m)?)?;
    m.add_function(wrap_pyfunction!(two_sample_t, m)?)?;
    m.add_function(wrap_pyfunction!(histogram, m)?)?;
    m.add_function(wrap_pyfunction!(cdf, m)?)?;
    m.add_function(wrap_pyfunction!(quorum_latency, m)?)?;
    m.add_function(wrap_pyfunction!(encode_probe, m)?)?;
    m.add_function(wrap_pyfunction!(encode_echo, m)?)?;
    m.add_function(wrap_pyfunction!(decode_frame, m)?)?;
    m.add_function(wrap_pyfunction!(sample_delay, m)?)?;
    m.add_function(wrap_pyfunction!(run_virtual_cluster, m)?)?;
    Ok(())
}
