use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use latmesh_core::analysis::{
    cdf, histogram, load_dir, merge_runs, quorum_series, report, two_sample_t, window_series, Dataset,
    PairFilter,
};
use latmesh_core::controller::{all_ok, ClusterHandle, NodeResults};
use latmesh_core::node::recorder::{CsvRow, Observation};
use latmesh_core::node::{run_node, NodeOptions};
use latmesh_core::sim::{load_model, loopback_config, run_virtual_cluster, LinkModel, SimOptions};
use latmesh_core::topology::{parse_config, quorum_groups, ClusterConfig, NodeId, PairClass};

type Error = Box<dyn std::error::Error>;

#[derive(Parser)]
#[command(name = "latmesh", version, about = "Full-mesh round-trip latency measurement")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a probe node daemon.
    Node {
        #[arg(long)]
        config: PathBuf,
        /// Node id or alias.
        #[arg(long)]
        id: String,
        #[arg(long, default_value = "data")]
        data_dir: PathBuf,
    },
    /// Drive a running cluster.
    Ctl(CtlArgs),
    /// Offline analysis of fetched files.
    Analyze {
        #[command(subcommand)]
        cmd: AnalyzeCmd,
    },
    /// Run a virtual cluster on loopback with injected delays.
    Sim {
        /// Size of a generated single-subnet cluster (ignored with --topology).
        #[arg(long, default_value_t = 3)]
        nodes: u32,
        #[arg(long)]
        topology: Option<PathBuf>,
        /// Link model JSON; zero delay when absent.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        duration: f64,
        /// Round rate of a generated cluster.
        #[arg(long, default_value_t = 100.0)]
        rate: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct CtlArgs {
    /// Cluster config; defaults to the one saved by `ctl load`.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value = ".latmesh-cluster.json")]
    state: PathBuf,
    /// Seconds to wait for every node's mesh before START.
    #[arg(long, global = true, default_value_t = 30.0)]
    ready_timeout: f64,
    #[command(subcommand)]
    cmd: CtlCmd,
}

#[derive(Subcommand)]
enum CtlCmd {
    /// Send the config to every node and remember it for later verbs.
    Load {
        #[arg(value_name = "CONFIG")]
        file: PathBuf,
    },
    Start,
    Stop,
    Status,
    Fetch { dir: PathBuf },
}

#[derive(Args, Clone)]
struct Input {
    /// Directory of fetched node_*_obs.csv files.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    topology: PathBuf,
    /// Pair class: same-subnet, cross-subnet, cross-az, cross-region, self.
    #[arg(long)]
    class: Option<PairClass>,
    /// Unordered node pair `A,B` (ids or aliases).
    #[arg(long)]
    pair: Option<String>,
    /// Write CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum AnalyzeCmd {
    /// Statistics table per pair class.
    Report {
        #[command(flatten)]
        input: Input,
        /// Aligned text instead of CSV.
        #[arg(long)]
        text: bool,
    },
    Hist {
        #[command(flatten)]
        input: Input,
        /// Bin width in microseconds; 0 picks one automatically.
        #[arg(long, default_value_t = 0)]
        bin_us: i64,
    },
    Cdf {
        #[command(flatten)]
        input: Input,
        /// Only emit points at or above this cumulative fraction.
        #[arg(long, default_value_t = 0.0)]
        from: f64,
    },
    Window {
        #[command(flatten)]
        input: Input,
        #[arg(long, default_value_t = 30.0)]
        window_s: f64,
    },
    Quorum {
        #[command(flatten)]
        input: Input,
        /// Quorum size over group size, e.g. 2/3.
        #[arg(long)]
        quorum: String,
        /// Group members; defaults to the first group of that size from the topology.
        #[arg(long, value_delimiter = ',')]
        nodes: Vec<String>,
        /// Sending node; defaults to the first group member.
        #[arg(long)]
        sender: Option<String>,
    },
    /// Two-sample t-test between --input and --against.
    Ttest {
        #[command(flatten)]
        input: Input,
        #[arg(long)]
        against: Option<PathBuf>,
        #[arg(long)]
        against_class: Option<PairClass>,
    },
    /// Equal-weight merge of several runs, written as one observation CSV.
    Merge {
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
        #[arg(long)]
        topology: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn read_config(path: &Path) -> Result<ClusterConfig, Error> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(parse_config(&text)?)
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), Error> {
    match out {
        Some(p) => fs::write(p, text)?,
        None => io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn resolve(cfg: &ClusterConfig, name: &str) -> Result<NodeId, Error> {
    cfg.resolve(name.trim()).ok_or_else(|| format!("unknown node `{name}`").into())
}

fn filter_for(cfg: &ClusterConfig, input: &Input) -> Result<PairFilter, Error> {
    let pair = match &input.pair {
        Some(p) => {
            let (a, b) = p.split_once(',').ok_or("--pair expects A,B")?;
            Some((resolve(cfg, a)?, resolve(cfg, b)?))
        }
        None => None,
    };
    Ok(PairFilter {
        class: input.class,
        pair,
        sender: None,
    })
}

fn load(input: &Input) -> Result<(Dataset, PairFilter), Error> {
    let cfg = read_config(&input.topology)?;
    let filter = filter_for(&cfg, input)?;
    Ok((load_dir(&input.input, &cfg)?, filter))
}

/// Reports per-node failures and turns them into an error.
fn check<T>(results: NodeResults<T>, show: impl Fn(NodeId, &T)) -> Result<(), Error> {
    for (id, r) in &results {
        match r {
            Ok(v) => show(*id, v),
            Err(e) => eprintln!("node {id}: {e}"),
        }
    }
    all_ok(results)?;
    Ok(())
}

fn ctl(args: CtlArgs) -> Result<(), Error> {
    if let CtlCmd::Load { file } = &args.cmd {
        let cfg = read_config(file)?;
        let ctl = ClusterHandle::new(cfg.clone());
        check(ctl.push_config(), |id, d| println!("node {id}: loaded {d}"))?;
        fs::write(&args.state, cfg.to_json_pretty())?;
        return Ok(());
    }
    let path = args.config.as_ref().unwrap_or(&args.state);
    let cfg = read_config(path).map_err(|e| format!("no cluster config (run `ctl load` first): {e}"))?;
    let mut ctl = ClusterHandle::new(cfg);
    match args.cmd {
        CtlCmd::Load { .. } => unreachable!(),
        CtlCmd::Start => {
            ctl.wait_ready(Duration::from_secs_f64(args.ready_timeout))?;
            check(ctl.start_all(), |id, s| println!("node {id}: {:?}", s.phase))
        }
        CtlCmd::Stop => check(ctl.stop_all(), |id, s| {
            println!(
                "node {id}: {:?}, rounds {}, observations {}, losses {}, late {}",
                s.phase, s.rounds_sent, s.observations, s.losses, s.late_echoes
            )
        }),
        CtlCmd::Status => check(ctl.status_all(), |_, s| {
            println!("{}", serde_json::to_string(s).expect("status serializes"))
        }),
        CtlCmd::Fetch { dir } => {
            let m = ctl.fetch_all(&dir)?;
            for e in &m.entries {
                println!("{} {} rows", e.file, e.rows);
            }
            Ok(())
        }
    }
}

fn parse_quorum(s: &str) -> Result<(usize, usize), Error> {
    let (k, n) = s.split_once('/').ok_or("--quorum expects k/n")?;
    let (k, n): (usize, usize) = (k.trim().parse()?, n.trim().parse()?);
    if k == 0 || k > n {
        return Err("--quorum needs 1 <= k <= n".into());
    }
    Ok((k, n))
}

fn analyze(cmd: AnalyzeCmd) -> Result<(), Error> {
    match cmd {
        AnalyzeCmd::Report { input, text } => {
            let (ds, filter) = load(&input)?;
            let ds = Dataset::new(
                ds.observations.iter().filter(|o| filter.matches(&ds, o)).copied().collect(),
                ds.topology.clone(),
            )?;
            let r = report(&ds)?;
            if text {
                return emit(input.out.as_deref(), &r.to_text());
            }
            for n in &r.notes {
                eprintln!("note: {n}");
            }
            emit(input.out.as_deref(), &r.to_csv())
        }
        AnalyzeCmd::Hist { input, bin_us } => {
            let (ds, filter) = load(&input)?;
            emit(input.out.as_deref(), &histogram(&ds.samples(&filter), bin_us)?.to_csv())
        }
        AnalyzeCmd::Cdf { input, from } => {
            let (ds, filter) = load(&input)?;
            let c = cdf(&ds.samples(&filter))?;
            let c = if from > 0.0 { c.zoom(from) } else { c };
            emit(input.out.as_deref(), &c.to_csv())
        }
        AnalyzeCmd::Window { input, window_s } => {
            if !(window_s > 0.0) {
                return Err("--window-s must be positive".into());
            }
            let (ds, filter) = load(&input)?;
            emit(input.out.as_deref(), &window_series(&ds, window_s, &filter).to_csv())
        }
        AnalyzeCmd::Quorum { input, quorum, nodes, sender } => {
            let (k, n) = parse_quorum(&quorum)?;
            let (ds, _) = load(&input)?;
            let cfg = &ds.topology;
            let members: Vec<NodeId> = if nodes.is_empty() {
                quorum_groups(cfg)
                    .into_iter()
                    .find(|g| g.nodes.len() == n)
                    .ok_or_else(|| format!("topology has no {n}-node group; pass --nodes"))?
                    .nodes
            } else {
                nodes.iter().map(|s| resolve(cfg, s)).collect::<Result<_, _>>()?
            };
            if members.len() != n {
                return Err(format!("--quorum {quorum} needs {n} nodes, got {}", members.len()).into());
            }
            let sender = match sender {
                Some(s) => resolve(cfg, &s)?,
                None => members[0],
            };
            let q = quorum_series(&ds, sender, &members, k);
            if q.insufficient > 0 {
                eprintln!("note: {} rounds had fewer than {k} replies", q.insufficient);
            }
            emit(input.out.as_deref(), &q.to_csv())
        }
        AnalyzeCmd::Ttest { input, against, against_class } => {
            let (a_ds, a_filter) = load(&input)?;
            let b_ds = match &against {
                Some(dir) => load_dir(dir, &a_ds.topology)?,
                None => a_ds.clone(),
            };
            let b_filter = PairFilter {
                class: against_class.or(a_filter.class),
                ..a_filter.clone()
            };
            let as_f64 = |v: Vec<i64>| v.into_iter().map(|x| x as f64).collect::<Vec<_>>();
            let t = two_sample_t(&as_f64(a_ds.samples(&a_filter)), &as_f64(b_ds.samples(&b_filter)))?;
            emit(
                input.out.as_deref(),
                &format!("t_statistic,p_value,df\n{},{},{}\n", t.t_statistic, t.p_value, t.df),
            )
        }
        AnalyzeCmd::Merge { input, topology, out } => {
            let cfg = read_config(&topology)?;
            let runs = input.iter().map(|d| load_dir(d, &cfg)).collect::<Result<Vec<_>, _>>()?;
            let merged = merge_runs(&runs)?;
            let mut buf = Vec::new();
            writeln!(buf, "{}", Observation::HEADER)?;
            for o in &merged.observations {
                o.write_row(&mut buf)?;
            }
            emit(out.as_deref(), &String::from_utf8(buf)?)
        }
    }
}

fn sim(
    nodes: u32,
    topology: Option<PathBuf>,
    model: Option<PathBuf>,
    duration: f64,
    rate: f64,
    out: PathBuf,
) -> Result<(), Error> {
    let cfg = match topology {
        Some(p) => read_config(&p)?,
        None => {
            if nodes == 0 {
                return Err("--nodes must be at least 1".into());
            }
            loopback_config(nodes, rate, duration)
        }
    };
    let model = match model {
        Some(p) => load_model(&p)?,
        None => LinkModel::zero(),
    };
    let run = run_virtual_cluster(&cfg, &model, duration, SimOptions::new(&out))?;
    fs::write(out.join("config.json"), run.config.to_json_pretty())?;
    fs::write(out.join("model.json"), run.model.to_json_pretty())?;
    for s in run.statuses.values() {
        println!(
            "node {}: rounds {}, observations {}, losses {}, late {}",
            s.node, s.rounds_sent, s.observations, s.losses, s.late_echoes
        );
    }
    if !run.dataset.is_empty() {
        print!("{}", report(&run.dataset)?.to_text());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.cmd {
        Cmd::Node { config, id, data_dir } => {
            let cfg = read_config(&config)?;
            let id = resolve(&cfg, &id)?;
            run_node(&cfg, id, NodeOptions::new(data_dir))?;
            Ok(())
        }
        Cmd::Ctl(args) => ctl(args),
        Cmd::Analyze { cmd } => analyze(cmd),
        Cmd::Sim { nodes, topology, model, duration, rate, out } => sim(nodes, topology, model, duration, rate, out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
