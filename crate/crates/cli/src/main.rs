use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use pigpaxos::bench::{self, MetricsReport, SweepGrid, WorkloadSpec};
use pigpaxos::config::partition_followers;
use pigpaxos::model::{self, LoadModelRow};
use pigpaxos::scenario::{first_violation, summary_csv, Scenario};
use pigpaxos::sim::SimConfig;
use pigpaxos::{net, ClusterConfig, NodeId, Rational64, RelayGroupConfig, Routing};

/// Multi-Paxos with relay-based fan-out: replica, simulator, benchmark and
/// load model. Log verbosity follows RUST_LOG.
#[derive(Parser)]
#[command(name = "pigpaxos", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one replica over TCP until interrupted.
    Node {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        id: u32,
    },
    /// Run a simulation scenario; exits nonzero on a safety violation.
    Sim {
        scenario: PathBuf,
        /// Directory for the summary and per-variant metrics CSVs,
        /// overriding the scenario's own output paths.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Closed-loop benchmark, simulated by default or against a live
    /// cluster with --config.
    Bench(BenchArgs),
    /// Print or check the analytical load model.
    Model(ModelArgs),
}

#[derive(Args)]
struct BenchArgs {
    /// Cluster config of a running cluster to benchmark over TCP.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Simulated cluster size.
    #[arg(long, default_value_t = 25)]
    nodes: usize,
    /// Relay group counts to sweep (simulation only).
    #[arg(long, value_delimiter = ',', default_value = "3")]
    relay_groups: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "1")]
    clients: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "8")]
    payload: Vec<usize>,
    /// Measured duration in milliseconds.
    #[arg(long, default_value_t = 10_000)]
    duration: u64,
    #[arg(long, default_value_t = 1000)]
    keys: u64,
    #[arg(long, default_value_t = 0.5)]
    read_frac: f64,
    #[arg(long, default_value = "pig")]
    routing: String,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ModelArgs {
    /// Print both load tables (the default when nothing else is asked).
    #[arg(long)]
    tables: bool,
    #[arg(long)]
    n: Option<u64>,
    #[arg(long)]
    r: Option<u64>,
    /// Check the partial-response constraint for --n with --groups or --r.
    #[arg(long)]
    validate_prc: bool,
    #[arg(long, default_value_t = 0)]
    prc: usize,
    /// Explicit relay group sizes, e.g. 8,8,8.
    #[arg(long, value_delimiter = ',')]
    groups: Vec<usize>,
    /// Compare a metrics CSV from a fault-free run against the model.
    #[arg(long)]
    cross_validate: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let default_level = if matches!(cli.command, Cmd::Node { .. }) { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(default_level)).init();
    let result = match cli.command {
        Cmd::Node { config, id } => node(&config, id),
        Cmd::Sim { scenario, out_dir } => sim(&scenario, out_dir.as_deref()),
        Cmd::Bench(args) => bench_cmd(args),
        Cmd::Model(args) => model_cmd(args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn node(config: &Path, id: u32) -> Result<ExitCode> {
    let cfg = ClusterConfig::load(config).with_context(|| format!("loading {}", config.display()))?;
    if id as usize >= cfg.n {
        bail!("--id {id} is not a member of a cluster of {} nodes", cfg.n);
    }
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let handle = net::spawn_node(Arc::new(cfg), NodeId(id)).await?;
        info!("node {id} serving on {}", handle.addr);
        tokio::signal::ctrl_c().await?;
        info!("node {id} shutting down");
        handle.shutdown().await;
        Ok(ExitCode::SUCCESS)
    })
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn sim(path: &Path, out_dir: Option<&Path>) -> Result<ExitCode> {
    let scenario = Scenario::load(path).with_context(|| format!("scenario {}", path.display()))?;
    let results = scenario.execute()?;
    let summary = summary_csv(&results);
    print!("{summary}");

    let (summary_path, metrics_dir) = match out_dir {
        Some(d) => (Some(d.join(format!("{}_summary.csv", scenario.name))), Some(d.to_path_buf())),
        None => (scenario.outputs.summary.clone(), scenario.outputs.metrics_dir.clone()),
    };
    if let Some(p) = summary_path {
        write(&p, &summary)?;
    }
    if let Some(dir) = metrics_dir {
        for r in &results {
            write(&dir.join(format!("{}_{}.csv", scenario.name, r.name)), &r.report.metrics.to_csv())?;
        }
    }
    if let Some((variant, v)) = first_violation(&results) {
        eprintln!("safety violation in {variant}: {} at t={}us: {}", v.invariant, v.at.as_micros(), v.detail);
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}

fn parse_routing(s: &str) -> Result<Routing> {
    match s {
        "pig" => Ok(Routing::Pig),
        "direct" => Ok(Routing::Direct),
        other => bail!("--routing: expected pig or direct, got {other:?}"),
    }
}

fn bench_cmd(a: BenchArgs) -> Result<ExitCode> {
    let workload = WorkloadSpec {
        key_space: a.keys,
        read_fraction: a.read_frac,
        payload_bytes: a.payload[0],
        clients: a.clients[0],
        duration_ms: a.duration,
        ..WorkloadSpec::default()
    };
    workload.validate()?;
    let csv = match &a.config {
        Some(path) => {
            if a.clients.len() > 1 || a.payload.len() > 1 {
                bail!("a live benchmark takes a single --clients and --payload value");
            }
            let cfg = ClusterConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(net::run_bench(&cfg, &workload, a.seed))?.to_csv()
        }
        None => {
            let mut cluster = ClusterConfig::new(a.nodes, a.relay_groups[0]);
            cluster.routing = parse_routing(&a.routing)?;
            cluster.validate()?;
            let mut base = SimConfig::new(cluster);
            base.seed = a.seed;
            base.workload = workload;
            let grid = SweepGrid { clients: a.clients, relay_groups: a.relay_groups, payload_bytes: a.payload };
            bench::sweep_csv(&bench::sweep(&base, &grid)?)
        }
    };
    match &a.out {
        Some(p) => write(p, &csv)?,
        None => print!("{csv}"),
    }
    Ok(ExitCode::SUCCESS)
}

fn contiguous_groups(sizes: &[usize]) -> RelayGroupConfig {
    let mut next = 1u32;
    let groups = sizes
        .iter()
        .map(|&s| {
            let g: Vec<NodeId> = (next..next + s as u32).map(NodeId).collect();
            next += s as u32;
            g
        })
        .collect();
    RelayGroupConfig { leader: NodeId(0), groups }
}

fn model_cmd(a: ModelArgs) -> Result<ExitCode> {
    let mut did = false;
    let mut ok = true;
    if a.validate_prc {
        did = true;
        let Some(n) = a.n else { bail!("--validate-prc needs --n") };
        let groups = match (a.groups.is_empty(), a.r) {
            (false, _) => contiguous_groups(&a.groups),
            (true, Some(r)) => partition_followers(n as usize, r as usize, NodeId(0))?,
            (true, None) => bail!("--validate-prc needs --groups or --r"),
        };
        let sizes = groups.group_sizes();
        match model::validate_prc(&groups, a.prc, n as usize) {
            Ok(c) => println!("PRC={} accepted for N={n}, groups {sizes:?}: {} >= {}", a.prc, c.sum, c.required),
            Err(v) => {
                println!("PRC={} rejected for N={n}, groups {sizes:?}: {v}", a.prc);
                ok = false;
            }
        }
    }
    if let Some(path) = &a.cross_validate {
        did = true;
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let report = MetricsReport::from_csv(&text)?;
        let Some(counters) = report.load_counters() else { bail!("{}: run has no leader", path.display()) };
        let cv = model::cross_validate(&counters)?;
        println!("{cv}");
        let sends = report.command_path_sends();
        let per = sends as f64 / report.ops.max(1) as f64;
        println!("cluster sends/command: {per:.4} (model {})", model::total_messages(report.n as u64)?);
        ok &= cv.is_ok();
    }
    if let (Some(n), Some(r), false) = (a.n, a.r, a.validate_prc) {
        did = true;
        let exact = LoadModelRow::<Rational64>::new(n, r)?;
        let float = LoadModelRow::<f64>::new(n, r)?;
        println!("N={n} R={r}");
        println!("  leader   {} ({:.4})", exact.leader, float.leader);
        println!("  follower {} ({:.4})", exact.follower, float.follower);
        println!("  ratio    {} ({:.4})", exact.ratio, float.ratio);
        println!("  total    {}", model::total_messages(n)?);
    }
    if a.tables || !did {
        print!("{}", model::render_tables());
    }
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}
