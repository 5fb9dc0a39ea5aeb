//! Closed-loop workload definition, metrics reports and parameter sweeps.

use std::fmt::Write as _;
use std::time::Duration;

use bytes::{BufMut, Bytes, BytesMut};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::Routing;
use crate::model::LoadCounters;
use crate::msg::Category;
use crate::sim::metrics::{Accounting, NodeCounters, COMMAND_PATH};
use crate::sim::{SimConfig, SimError, Simulation};
use crate::types::{Command, NodeId};

pub const PAYLOAD_MIN: usize = 8;
pub const PAYLOAD_MAX: usize = 1280;

#[derive(Debug, Error, PartialEq)]
pub enum WorkloadError {
    #[error("key_space must be at least 1")]
    KeySpace,
    #[error("read_fraction {0} outside [0, 1]")]
    ReadFraction(f64),
    #[error("payload_bytes {0} outside {PAYLOAD_MIN}..={PAYLOAD_MAX}")]
    Payload(usize),
    #[error("target_rate must be positive, got {0}")]
    Rate(f64),
}

/// Closed-loop client workload: uniform keys, a read/write mix and fixed
/// value size. Each client keeps at most one request outstanding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorkloadSpec {
    pub key_space: u64,
    pub read_fraction: f64,
    pub payload_bytes: usize,
    pub clients: usize,
    pub duration_ms: u64,
    /// Time before clients start, leaving room for the first election.
    pub warmup_ms: u64,
    /// Aggregate request rate cap in operations per second.
    pub target_rate: Option<f64>,
    /// Stop issuing once this many operations have completed.
    pub max_ops: Option<u64>,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec {
            key_space: 1000,
            read_fraction: 0.5,
            payload_bytes: PAYLOAD_MIN,
            clients: 1,
            duration_ms: 10_000,
            warmup_ms: 500,
            target_rate: None,
            max_ops: None,
        }
    }
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        if self.key_space == 0 {
            return Err(WorkloadError::KeySpace);
        }
        if !(0.0..=1.0).contains(&self.read_fraction) {
            return Err(WorkloadError::ReadFraction(self.read_fraction));
        }
        if !(PAYLOAD_MIN..=PAYLOAD_MAX).contains(&self.payload_bytes) {
            return Err(WorkloadError::Payload(self.payload_bytes));
        }
        if let Some(r) = self.target_rate {
            if r.is_nan() || r <= 0.0 {
                return Err(WorkloadError::Rate(r));
            }
        }
        Ok(())
    }

    pub fn duration(&self) -> Duration {
        Duration::from_millis(self.duration_ms)
    }

    pub fn warmup(&self) -> Duration {
        Duration::from_millis(self.warmup_ms)
    }

    /// Pause between a reply and the next request that keeps the aggregate
    /// rate at the cap.
    pub fn think_time(&self) -> Duration {
        match self.target_rate {
            Some(rate) => Duration::from_secs_f64(self.clients.max(1) as f64 / rate),
            None => Duration::ZERO,
        }
    }

    /// Draws the next command for a client. Put values are unique per
    /// `(client_id, request_seq)`.
    pub fn next_command<R: Rng + ?Sized>(&self, client_id: u64, request_seq: u64, rng: &mut R) -> Command {
        let key = format!("k{}", rng.random_range(0..self.key_space));
        if rng.random_bool(self.read_fraction) {
            Command::get(client_id, request_seq, key)
        } else {
            Command::put(client_id, request_seq, key, unique_value(client_id, request_seq, self.payload_bytes))
        }
    }
}

/// `len` bytes starting with the big-endian client id and sequence number.
pub fn unique_value(client_id: u64, request_seq: u64, len: usize) -> Bytes {
    let mut b = BytesMut::with_capacity(len.max(8));
    b.put_u32(client_id as u32);
    b.put_u32(request_seq as u32);
    b.resize(len.max(8), b'.');
    b.freeze()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencySummary {
    pub p25_ms: f64,
    pub median_ms: f64,
    pub p75_ms: f64,
    pub p99_ms: f64,
    pub mean_ms: f64,
}

impl LatencySummary {
    /// Nearest-rank percentiles over latencies in microseconds.
    pub fn from_micros(samples: &[u64]) -> Self {
        if samples.is_empty() {
            return Self::default();
        }
        let mut s = samples.to_vec();
        s.sort_unstable();
        let rank = |p: f64| {
            let idx = ((p * s.len() as f64).ceil() as usize).clamp(1, s.len()) - 1;
            s[idx] as f64 / 1000.0
        };
        let mean = s.iter().sum::<u64>() as f64 / s.len() as f64 / 1000.0;
        LatencySummary { p25_ms: rank(0.25), median_ms: rank(0.5), p75_ms: rank(0.75), p99_ms: rank(0.99), mean_ms: mean }
    }
}

#[derive(Debug, Error)]
pub enum ReportParseError {
    #[error("line {line}: {msg}")]
    Line { line: usize, msg: String },
    #[error("missing field {0}")]
    Missing(&'static str),
}

/// Outcome of one benchmark run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub n: usize,
    pub relay_groups: usize,
    pub routing: Routing,
    pub seed: u64,
    pub leader: Option<NodeId>,
    /// Completed operations, one per client request.
    pub ops: u64,
    pub duration_s: f64,
    /// Completions per one-second window from workload start.
    pub windows: Vec<u64>,
    pub latency: LatencySummary,
    /// Per-node counters over the measured window.
    pub nodes: Vec<NodeCounters>,
    pub retries: u64,
    pub relay_timeouts: u64,
    pub elections: u64,
    pub alarms: u64,
    pub accounting: Accounting,
}

impl MetricsReport {
    pub fn throughput(&self) -> f64 {
        if self.duration_s > 0.0 {
            self.ops as f64 / self.duration_s
        } else {
            0.0
        }
    }

    /// Mean over full windows, skipping the first (ramp-up) and last
    /// (drain) windows when there are enough of them.
    pub fn steady_throughput(&self) -> f64 {
        let w = &self.windows;
        let inner = if w.len() > 2 { &w[1..w.len() - 1] } else { &w[..] };
        if inner.is_empty() {
            0.0
        } else {
            inner.iter().sum::<u64>() as f64 / inner.len() as f64
        }
    }

    /// Per-node command-path counters for model cross-validation.
    pub fn load_counters(&self) -> Option<LoadCounters> {
        let leader = self.leader?;
        Some(LoadCounters {
            n: self.n as u64,
            r: self.relay_groups as u64,
            leader: leader.index(),
            commands: self.ops,
            handled: self.nodes.iter().map(|c| c.handled_in(&COMMAND_PATH)).collect(),
        })
    }

    /// Cluster-wide command-path sends.
    pub fn command_path_sends(&self) -> u64 {
        self.nodes.iter().map(|c| c.sent_in(&COMMAND_PATH)).sum()
    }

    /// Long-format CSV with a `kind,key,value` header.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("kind,key,value\n");
        let mut row = |kind: &str, key: &str, value: String| {
            let _ = writeln!(s, "{kind},{key},{value}");
        };
        row("run", "n", self.n.to_string());
        row("run", "relay_groups", self.relay_groups.to_string());
        row("run", "routing", routing_name(self.routing).into());
        row("run", "seed", self.seed.to_string());
        row("run", "leader", self.leader.map_or_else(|| "none".into(), |l| l.0.to_string()));
        row("run", "ops", self.ops.to_string());
        row("run", "duration_s", format!("{:.6}", self.duration_s));
        row("run", "throughput", format!("{:.3}", self.throughput()));
        row("latency_ms", "p25", format!("{:.3}", self.latency.p25_ms));
        row("latency_ms", "median", format!("{:.3}", self.latency.median_ms));
        row("latency_ms", "p75", format!("{:.3}", self.latency.p75_ms));
        row("latency_ms", "p99", format!("{:.3}", self.latency.p99_ms));
        row("latency_ms", "mean", format!("{:.3}", self.latency.mean_ms));
        for (i, w) in self.windows.iter().enumerate() {
            row("window", &i.to_string(), w.to_string());
        }
        for (i, c) in self.nodes.iter().enumerate() {
            for cat in Category::ALL {
                row("node_sent", &format!("{i}:{}", cat.name()), c.sent[cat.index()].to_string());
                row("node_received", &format!("{i}:{}", cat.name()), c.received[cat.index()].to_string());
            }
        }
        row("counter", "retries", self.retries.to_string());
        row("counter", "relay_timeouts", self.relay_timeouts.to_string());
        row("counter", "elections", self.elections.to_string());
        row("counter", "alarms", self.alarms.to_string());
        let a = &self.accounting;
        row("accounting", "sent", a.sent.to_string());
        row("accounting", "duplicated", a.duplicated.to_string());
        row("accounting", "received", a.received.to_string());
        row("accounting", "dropped", a.dropped.to_string());
        row("accounting", "in_flight", a.in_flight.to_string());
        s
    }

    /// Parses the output of [`Self::to_csv`]. Latency and throughput rows
    /// are recomputed or re-read as printed.
    pub fn from_csv(text: &str) -> Result<Self, ReportParseError> {
        let mut r = MetricsReport::default();
        let mut seen_n = false;
        for (i, line) in text.lines().enumerate().skip(1) {
            let line_no = i + 1;
            let err = |msg: String| ReportParseError::Line { line: line_no, msg };
            let mut parts = line.splitn(3, ',');
            let (Some(kind), Some(key), Some(value)) = (parts.next(), parts.next(), parts.next()) else {
                return Err(err("expected three fields".into()));
            };
            let int = || value.parse::<u64>().map_err(|e| err(format!("{key}: {e}")));
            let float = || value.parse::<f64>().map_err(|e| err(format!("{key}: {e}")));
            match (kind, key) {
                ("run", "n") => {
                    r.n = int()? as usize;
                    r.nodes = vec![NodeCounters::default(); r.n];
                    seen_n = true;
                }
                ("run", "relay_groups") => r.relay_groups = int()? as usize,
                ("run", "routing") => {
                    r.routing = match value {
                        "pig" => Routing::Pig,
                        "direct" => Routing::Direct,
                        other => return Err(err(format!("unknown routing {other}"))),
                    }
                }
                ("run", "seed") => r.seed = int()?,
                ("run", "leader") => r.leader = if value == "none" { None } else { Some(NodeId(int()? as u32)) },
                ("run", "ops") => r.ops = int()?,
                ("run", "duration_s") => r.duration_s = float()?,
                ("run", "throughput") => {}
                ("latency_ms", "p25") => r.latency.p25_ms = float()?,
                ("latency_ms", "median") => r.latency.median_ms = float()?,
                ("latency_ms", "p75") => r.latency.p75_ms = float()?,
                ("latency_ms", "p99") => r.latency.p99_ms = float()?,
                ("latency_ms", "mean") => r.latency.mean_ms = float()?,
                ("window", _) => r.windows.push(int()?),
                ("node_sent" | "node_received", _) => {
                    if !seen_n {
                        return Err(err("node counters before run,n".into()));
                    }
                    let (node, cat) = key.split_once(':').ok_or_else(|| err("expected node:category".into()))?;
                    let node: usize = node.parse().map_err(|_| err(format!("bad node {node}")))?;
                    let cat = Category::ALL
                        .into_iter()
                        .find(|c| c.name() == cat)
                        .ok_or_else(|| err(format!("unknown category {cat}")))?;
                    let c = r.nodes.get_mut(node).ok_or_else(|| err(format!("node {node} out of range")))?;
                    if kind == "node_sent" {
                        c.sent[cat.index()] = int()?;
                    } else {
                        c.received[cat.index()] = int()?;
                    }
                }
                ("counter", "retries") => r.retries = int()?,
                ("counter", "relay_timeouts") => r.relay_timeouts = int()?,
                ("counter", "elections") => r.elections = int()?,
                ("counter", "alarms") => r.alarms = int()?,
                ("accounting", "sent") => r.accounting.sent = int()?,
                ("accounting", "duplicated") => r.accounting.duplicated = int()?,
                ("accounting", "received") => r.accounting.received = int()?,
                ("accounting", "dropped") => r.accounting.dropped = int()?,
                ("accounting", "in_flight") => r.accounting.in_flight = int()?,
                _ => return Err(err(format!("unknown row {kind},{key}"))),
            }
        }
        if !seen_n {
            return Err(ReportParseError::Missing("run,n"));
        }
        Ok(r)
    }
}

pub fn routing_name(r: Routing) -> &'static str {
    match r {
        Routing::Pig => "pig",
        Routing::Direct => "direct",
    }
}

/// Grid for [`sweep`]. An empty axis yields no rows.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepGrid {
    pub clients: Vec<usize>,
    /// Relay group counts; empty means the base configuration's.
    pub relay_groups: Vec<usize>,
    /// Payload sizes; empty means the base workload's.
    pub payload_bytes: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub relay_groups: usize,
    pub payload_bytes: usize,
    pub clients: usize,
    pub throughput: f64,
    pub latency: LatencySummary,
}

pub const SWEEP_HEADER: &str = "relay_groups,payload_bytes,clients,throughput,median_ms,p25_ms,p75_ms";

/// Runs one simulation per grid point, in grid order.
pub fn sweep(base: &SimConfig, grid: &SweepGrid) -> Result<Vec<SweepRow>, SimError> {
    let rs = if grid.relay_groups.is_empty() { vec![base.cluster.relay_groups] } else { grid.relay_groups.clone() };
    let payloads =
        if grid.payload_bytes.is_empty() { vec![base.workload.payload_bytes] } else { grid.payload_bytes.clone() };
    let mut rows = Vec::new();
    for &r in &rs {
        for &payload in &payloads {
            for &clients in &grid.clients {
                let mut cfg = base.clone();
                cfg.cluster.relay_groups = r;
                cfg.workload.payload_bytes = payload;
                cfg.workload.clients = clients;
                let report = Simulation::new(cfg)?.run();
                rows.push(SweepRow {
                    relay_groups: r,
                    payload_bytes: payload,
                    clients,
                    throughput: report.metrics.steady_throughput(),
                    latency: report.metrics.latency.clone(),
                });
            }
        }
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = format!("{SWEEP_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{:.3},{:.3},{:.3},{:.3}",
            r.relay_groups, r.payload_bytes, r.clients, r.throughput, r.latency.median_ms, r.latency.p25_ms, r.latency.p75_ms
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn defaults_validate() {
        assert!(WorkloadSpec::default().validate().is_ok());
        let w = WorkloadSpec { payload_bytes: 4, ..Default::default() };
        assert_eq!(w.validate(), Err(WorkloadError::Payload(4)));
        let w = WorkloadSpec { read_fraction: 1.5, ..Default::default() };
        assert!(w.validate().is_err());
    }

    #[test]
    fn values_are_unique_and_sized() {
        let a = unique_value(1, 2, 8);
        let b = unique_value(2, 1, 8);
        assert_ne!(a, b);
        assert_eq!(unique_value(1, 2, 1280).len(), 1280);
    }

    #[test]
    fn commands_respect_mix_and_key_space() {
        let w = WorkloadSpec { read_fraction: 0.25, key_space: 10, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cmds: Vec<Command> = (0..4000).map(|i| w.next_command(1, i, &mut rng)).collect();
        let reads = cmds.iter().filter(|c| c.op == crate::types::Op::Get).count() as f64 / 4000.0;
        assert!((reads - 0.25).abs() < 0.03, "{reads}");
        assert!(cmds.iter().all(|c| c.key.len() <= 2));
    }

    #[test]
    fn percentiles_nearest_rank() {
        let l = LatencySummary::from_micros(&[4000, 1000, 3000, 2000]);
        assert_eq!(l.p25_ms, 1.0);
        assert_eq!(l.median_ms, 2.0);
        assert_eq!(l.p75_ms, 3.0);
        assert_eq!(l.p99_ms, 4.0);
        assert_eq!(l.mean_ms, 2.5);
        assert_eq!(LatencySummary::from_micros(&[]), LatencySummary::default());
    }

    #[test]
    fn csv_round_trip() {
        let mut r = MetricsReport {
            n: 3,
            relay_groups: 1,
            seed: 9,
            leader: Some(NodeId(0)),
            ops: 10,
            duration_s: 1.0,
            windows: vec![6, 4],
            nodes: vec![NodeCounters::default(); 3],
            retries: 2,
            ..Default::default()
        };
        r.nodes[1].sent[1] = 5;
        r.latency.median_ms = 1.25;
        let back = MetricsReport::from_csv(&r.to_csv()).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.to_csv(), r.to_csv());
    }

    #[test]
    fn empty_grid_is_header_only() {
        assert_eq!(sweep_csv(&[]), format!("{SWEEP_HEADER}\n"));
        let rows = sweep(&SimConfig::new(crate::config::ClusterConfig::new(3, 1)), &SweepGrid::default()).unwrap();
        assert!(rows.is_empty());
    }
}
