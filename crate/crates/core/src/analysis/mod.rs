//! Offline analysis of fetched observation files.

pub mod quorum;
pub mod series;
pub mod stats;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::node::recorder::Observation;
use crate::topology::{ClusterConfig, NodeId, PairClass};

pub use quorum::{quorum_latency, quorum_series, rounds, InsufficientReplies, QuorumSeries, RoundRecord};
pub use series::{window_series, WindowPoint, WindowSeries};
pub use stats::{cdf, histogram, percentile, summarize, two_sample_t, CdfPoints, Histogram, StatsSummary, TResult};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("no samples")]
    EmptySamples,
    #[error("{file}:{line}: {msg}")]
    ParseError { file: PathBuf, line: u64, msg: String },
    #[error("node {0} is not in the topology")]
    UnknownNode(NodeId),
    #[error("need at least {need} samples per side, have {have}")]
    InsufficientSamples { need: usize, have: usize },
    #[error("both samples are constant and equal; t is undefined")]
    ZeroVariance,
    #[error("runs were recorded on different topologies")]
    TopologyMismatch,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Observations sorted by `(send_wall_ts_us, sender, round)` plus the
/// topology that labels them.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub observations: Vec<Observation>,
    pub topology: ClusterConfig,
}

fn sort_key(o: &Observation) -> (i64, NodeId, u64, NodeId) {
    (o.send_wall_ts_us, o.sender, o.round, o.receiver)
}

impl Dataset {
    /// Validates node ids and sorts.
    pub fn new(mut observations: Vec<Observation>, topology: ClusterConfig) -> Result<Self, AnalysisError> {
        for o in &observations {
            for id in [o.sender, o.receiver] {
                if topology.node(id).is_none() {
                    return Err(AnalysisError::UnknownNode(id));
                }
            }
        }
        observations.sort_by_key(sort_key);
        Ok(Self { observations, topology })
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn class_of(&self, o: &Observation) -> PairClass {
        self.topology
            .classify(o.sender, o.receiver)
            .expect("ids validated on construction")
    }

    pub fn samples(&self, filter: &PairFilter) -> Vec<i64> {
        self.observations
            .iter()
            .filter(|o| filter.matches(self, o))
            .map(|o| o.rtt_us)
            .collect()
    }
}

/// Which observations an analysis looks at. Empty filter selects all.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PairFilter {
    pub class: Option<PairClass>,
    /// Unordered node pair: both directions match.
    pub pair: Option<(NodeId, NodeId)>,
    pub sender: Option<NodeId>,
}

impl PairFilter {
    pub fn matches(&self, ds: &Dataset, o: &Observation) -> bool {
        if let Some(c) = self.class {
            if ds.class_of(o) != c {
                return false;
            }
        }
        if let Some((a, b)) = self.pair {
            if !((o.sender == a && o.receiver == b) || (o.sender == b && o.receiver == a)) {
                return false;
            }
        }
        self.sender.is_none_or(|s| o.sender == s)
    }
}

fn parse_obs_file(path: &Path, out: &mut Vec<Observation>) -> Result<(), AnalysisError> {
    use crate::node::recorder::CsvRow;
    let perr = |line: u64, msg: String| AnalysisError::ParseError {
        file: path.to_path_buf(),
        line,
        msg,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| perr(0, e.to_string()))?;
    let header = rdr.headers().map_err(|e| perr(1, e.to_string()))?;
    let want: Vec<&str> = Observation::HEADER.split(',').collect();
    if header.iter().collect::<Vec<_>>() != want {
        return Err(perr(1, format!("expected header `{}`", Observation::HEADER)));
    }
    for rec in rdr.records() {
        let rec = rec.map_err(|e| perr(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        let field = |i: usize| -> Result<&str, AnalysisError> {
            rec.get(i).ok_or_else(|| perr(line, format!("missing column {}", want[i])))
        };
        let num = |i: usize| -> Result<i64, AnalysisError> {
            field(i)?
                .trim()
                .parse::<i64>()
                .map_err(|e| perr(line, format!("{}: {e}", want[i])))
        };
        let id = |i: usize| -> Result<NodeId, AnalysisError> {
            u32::try_from(num(i)?)
                .map(NodeId)
                .map_err(|_| perr(line, format!("{} out of range", want[i])))
        };
        let round = u64::try_from(num(2)?).map_err(|_| perr(line, "negative round".into()))?;
        let rtt = num(4)?;
        if rtt < 0 {
            return Err(perr(line, "negative rtt_us".into()));
        }
        out.push(Observation {
            sender: id(0)?,
            receiver: id(1)?,
            round,
            send_wall_ts_us: num(3)?,
            rtt_us: rtt,
        });
    }
    Ok(())
}

/// Reads node observation CSVs into one sorted dataset.
pub fn load_observations<P: AsRef<Path>>(files: &[P], topology: &ClusterConfig) -> Result<Dataset, AnalysisError> {
    let mut rows = Vec::new();
    for f in files {
        parse_obs_file(f.as_ref(), &mut rows)?;
    }
    Dataset::new(rows, topology.clone())
}

/// All `node_*_obs.csv` files in `dir`, sorted by name.
pub fn observation_files(dir: &Path) -> Result<Vec<PathBuf>, AnalysisError> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("node_") && n.ends_with("_obs.csv"))
        })
        .collect();
    files.sort();
    Ok(files)
}

pub fn load_dir(dir: &Path, topology: &ClusterConfig) -> Result<Dataset, AnalysisError> {
    load_observations(&observation_files(dir)?, topology)
}

/// Samples per pair class. Every observation lands in exactly one class.
pub fn group_by_class(ds: &Dataset) -> BTreeMap<PairClass, Vec<i64>> {
    let mut out: BTreeMap<PairClass, Vec<i64>> = BTreeMap::new();
    for o in &ds.observations {
        out.entry(ds.class_of(o)).or_default().push(o.rtt_us);
    }
    out
}

fn same_topology(a: &ClusterConfig, b: &ClusterConfig) -> bool {
    a.nodes.len() == b.nodes.len()
        && a.nodes.iter().zip(&b.nodes).all(|(x, y)| x.id == y.id && x.label == y.label)
}

/// Equal-weight aggregation of several runs: per pair class, every run
/// contributes its earliest `m` observations, where `m` is the smallest
/// per-run count for that class.
pub fn merge_runs(runs: &[Dataset]) -> Result<Dataset, AnalysisError> {
    let first = runs.first().ok_or(AnalysisError::EmptySamples)?;
    if runs.iter().any(|r| !same_topology(&r.topology, &first.topology)) {
        return Err(AnalysisError::TopologyMismatch);
    }
    let per_run: Vec<BTreeMap<PairClass, Vec<&Observation>>> = runs
        .iter()
        .map(|ds| {
            let mut m: BTreeMap<PairClass, Vec<&Observation>> = BTreeMap::new();
            for o in &ds.observations {
                m.entry(ds.class_of(o)).or_default().push(o);
            }
            m
        })
        .collect();
    let mut merged = Vec::new();
    for class in PairClass::ALL {
        let quota = per_run
            .iter()
            .map(|m| m.get(&class).map_or(0, Vec::len))
            .min()
            .unwrap_or(0);
        for m in &per_run {
            if let Some(v) = m.get(&class) {
                merged.extend(v.iter().take(quota).map(|o| **o));
            }
        }
    }
    Dataset::new(merged, first.topology.clone())
}

/// The latency statistics table: one row per pair class present.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub rows: Vec<(PairClass, StatsSummary)>,
    pub notes: Vec<String>,
}

pub fn report(ds: &Dataset) -> Result<Report, AnalysisError> {
    if ds.is_empty() {
        return Err(AnalysisError::EmptySamples);
    }
    let groups = group_by_class(ds);
    let mut rows = Vec::new();
    let mut notes = Vec::new();
    for class in PairClass::ALL {
        match groups.get(&class).map(|s| summarize(s)) {
            Some(Ok(s)) => rows.push((class, s)),
            _ => notes.push(format!("{}: no samples", class.title())),
        }
    }
    Ok(Report { rows, notes })
}

impl Report {
    pub fn to_csv(&self) -> String {
        let mut out = format!("class,count,{}\n", StatsSummary::COLUMNS.join(","));
        for (class, s) in &self.rows {
            let vals: Vec<String> = s.values().iter().map(|v| format_value(*v)).collect();
            out.push_str(&format!("{},{},{}\n", class.slug(), s.count, vals.join(",")));
        }
        out
    }

    /// Aligned plain-text rendering with notes for omitted classes.
    pub fn to_text(&self) -> String {
        let mut header = vec!["class".to_string(), "count".to_string()];
        header.extend(StatsSummary::COLUMNS.iter().map(|c| format!("{c} (us)")));
        let mut table = vec![header];
        for (class, s) in &self.rows {
            let mut row = vec![class.title().to_string(), s.count.to_string()];
            row.extend(s.values().iter().map(|v| format_value(*v)));
            table.push(row);
        }
        let widths: Vec<usize> = (0..table[0].len())
            .map(|c| table.iter().map(|r| r[c].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for row in &table {
            let cells: Vec<String> = row
                .iter()
                .enumerate()
                .map(|(i, cell)| {
                    if i == 0 {
                        format!("{cell:<w$}", w = widths[i])
                    } else {
                        format!("{cell:>w$}", w = widths[i])
                    }
                })
                .collect();
            out.push_str(cells.join("  ").trim_end());
            out.push('\n');
        }
        for n in &self.notes {
            out.push_str(&format!("note: {n}\n"));
        }
        out
    }
}

fn format_value(v: f64) -> String {
    if v.fract() == 0.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.3}")
    }
}
