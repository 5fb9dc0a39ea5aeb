//! Deterministic discrete-event simulation of a cluster and its clients.
//!
//! Virtual time is in microseconds. Each node owns a FIFO inbox and a
//! single CPU: deserializing a message, and serializing each message it
//! emits, occupies the CPU for the cost given by the [`NetworkProfile`].
//! Timers are delivered through the same inbox at no cost.

pub mod checker;
pub mod faults;
pub mod metrics;
pub mod profile;

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap, VecDeque};
use std::sync::Arc;
use std::time::Duration;

use bytes::Bytes;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::bench::{LatencySummary, MetricsReport, WorkloadError, WorkloadSpec};
use crate::config::{ClusterConfig, ConfigError};
use crate::msg::{Message, ReplyOutcome};
use crate::replica::{Dest, Outgoing, Replica, Source};
use crate::types::{NodeId, Op, SharedCommand, Time};
use crate::wire;

pub use checker::{SafetyChecker, Violation};
pub use faults::{FaultAction, FaultEvent, FaultScript};
pub use metrics::{Accounting, NodeCounters};
pub use profile::{CpuCost, NetworkProfile};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("profile: {0}")]
    Profile(String),
    #[error("workload: {0}")]
    Workload(#[from] WorkloadError),
    #[error("faults: {0}")]
    Faults(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    pub cluster: ClusterConfig,
    pub profile: NetworkProfile,
    pub workload: WorkloadSpec,
    pub faults: FaultScript,
    pub seed: u64,
    pub check_invariants: bool,
    pub trace_relays: bool,
    /// Extra time simulated after clients stop issuing.
    pub drain: Duration,
}

impl SimConfig {
    pub fn new(cluster: ClusterConfig) -> Self {
        SimConfig {
            seed: cluster.rng_seed,
            cluster,
            profile: NetworkProfile::default(),
            workload: WorkloadSpec::default(),
            faults: Vec::new(),
            check_invariants: true,
            trace_relays: false,
            drain: Duration::from_secs(1),
        }
    }
}

/// One client operation, from first send to final reply.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HistoryOp {
    pub client: u64,
    pub seq: u64,
    pub op: Op,
    pub key: Bytes,
    pub value: Bytes,
    pub invoked: Time,
    pub completed: Option<(Time, ReplyOutcome)>,
}

#[derive(Clone, Debug)]
pub struct SimReport {
    pub metrics: MetricsReport,
    pub violations: Vec<Violation>,
    pub history: Vec<HistoryOp>,
    pub final_time: Time,
    /// Relay picks as `(time, initiator, relay)`, when tracing.
    pub relay_trace: Vec<(Time, NodeId, NodeId)>,
}

impl SimReport {
    pub fn completed(&self) -> impl Iterator<Item = &HistoryOp> {
        self.history.iter().filter(|h| h.completed.is_some())
    }

    /// Latencies in microseconds of operations completed in `[from, to)`.
    pub fn latencies_between(&self, from: Time, to: Time) -> Vec<u64> {
        self.completed()
            .filter_map(|h| h.completed.as_ref().map(|(t, _)| (h.invoked, *t)))
            .filter(|&(_, t)| t >= from && t < to)
            .map(|(i, t)| t.as_micros() - i.as_micros())
            .collect()
    }
}

#[derive(Debug)]
enum Event {
    Arrive { to: Dest, from: Source, msg: Message },
    Process(usize),
    Tick(usize),
    ClientWake(usize),
    ClientResend { client: usize, seq: u64, attempt: u32 },
    ClientTimeout { client: usize, seq: u64, attempt: u32 },
    Fault(FaultEvent),
}

struct Scheduled {
    time: Time,
    sender: u64,
    seq: u64,
    event: Event,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Scheduled {}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Scheduled {
    // reversed: BinaryHeap is a max-heap
    fn cmp(&self, other: &Self) -> Ordering {
        (other.time, other.sender, other.seq).cmp(&(self.time, self.sender, self.seq))
    }
}

enum InboxItem {
    Msg { from: Source, msg: Message },
    Tick,
}

struct NodeState {
    replica: Replica,
    inbox: VecDeque<InboxItem>,
    busy_until: Time,
    processing: bool,
    tick_at: Option<Time>,
    crashed: bool,
}

struct Outstanding {
    cmd: SharedCommand,
    history: usize,
    attempt: u32,
}

struct Client {
    id: u64,
    target: NodeId,
    next_seq: u64,
    rng: ChaCha8Rng,
    current: Option<Outstanding>,
}

const SYSTEM: u64 = u64::MAX;
const NOT_LEADER_BACKOFF: Duration = Duration::from_millis(20);

pub struct Simulation {
    cfg: SimConfig,
    now: Time,
    seq: u64,
    queue: BinaryHeap<Scheduled>,
    nodes: Vec<NodeState>,
    clients: Vec<Client>,
    rng: ChaCha8Rng,
    latency_us: (u64, u64),
    partitions: Vec<BTreeSet<NodeId>>,
    crash_next_relay: bool,
    checker: Option<SafetyChecker>,
    history: Vec<HistoryOp>,
    counters: Vec<NodeCounters>,
    accounting: Accounting,
    workload_start: Time,
    workload_end: Time,
    end: Time,
    completed: u64,
    relay_trace: Vec<(Time, NodeId, NodeId)>,
}

impl Simulation {
    pub fn new(mut cfg: SimConfig) -> Result<Self, SimError> {
        cfg.cluster.rng_seed = cfg.seed;
        cfg.cluster.validate()?;
        cfg.profile.validate().map_err(SimError::Profile)?;
        cfg.workload.validate()?;
        faults::validate_script(&cfg.faults, cfg.cluster.n).map_err(SimError::Faults)?;
        let cluster = Arc::new(cfg.cluster.clone());
        let mut nodes = Vec::with_capacity(cluster.n);
        for id in cluster.node_ids() {
            let mut replica = Replica::new(id, cluster.clone())?;
            replica.set_observe(cfg.check_invariants);
            replica.set_trace_relays(cfg.trace_relays);
            nodes.push(NodeState {
                replica,
                inbox: VecDeque::new(),
                busy_until: Time::ZERO,
                processing: false,
                tick_at: None,
                crashed: false,
            });
        }
        let clients = (0..cfg.workload.clients)
            .map(|i| Client {
                id: i as u64 + 1,
                target: NodeId(0),
                next_seq: 1,
                rng: ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5EED_0000_0000 + i as u64)),
                current: None,
            })
            .collect();
        let workload_start = Time::ZERO + cfg.workload.warmup();
        let workload_end = workload_start + cfg.workload.duration();
        let mut sim = Simulation {
            now: Time::ZERO,
            seq: 0,
            queue: BinaryHeap::new(),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            latency_us: cfg.profile.latency_range_us(),
            partitions: Vec::new(),
            crash_next_relay: false,
            checker: cfg.check_invariants.then(|| SafetyChecker::new(cluster.n)),
            history: Vec::new(),
            counters: vec![NodeCounters::default(); cluster.n],
            accounting: Accounting::default(),
            workload_start,
            workload_end,
            end: workload_end + cfg.drain,
            completed: 0,
            relay_trace: Vec::new(),
            nodes,
            clients,
            cfg,
        };
        for i in 0..sim.nodes.len() {
            sim.reschedule_tick(i);
        }
        for ev in sim.cfg.faults.clone() {
            let at = Time::from_millis(ev.at_ms);
            sim.schedule(at, SYSTEM, Event::Fault(ev));
        }
        for c in 0..sim.clients.len() {
            sim.schedule(workload_start, client_key(sim.nodes.len(), c), Event::ClientWake(c));
        }
        Ok(sim)
    }

    pub fn now(&self) -> Time {
        self.now
    }

    pub fn replicas(&self) -> impl Iterator<Item = &Replica> {
        self.nodes.iter().map(|n| &n.replica)
    }

    pub fn replica(&self, id: NodeId) -> &Replica {
        &self.nodes[id.index()].replica
    }

    pub fn leader(&self) -> Option<NodeId> {
        self.nodes
            .iter()
            .filter(|n| !n.crashed && n.replica.is_leader())
            .max_by_key(|n| n.replica.engine().ballot())
            .map(|n| n.replica.id())
    }

    pub fn checker(&self) -> Option<&SafetyChecker> {
        self.checker.as_ref()
    }

    /// Executed commands of a replica, in slot order.
    pub fn executed_log(&self, id: NodeId) -> Vec<SharedCommand> {
        let e = self.replica(id).engine();
        (0..e.executed_prefix().0).map(|s| e.entry(crate::types::Slot(s)).expect("executed").command.clone()).collect()
    }

    /// Final voter sets recorded by a replica, per executed slot.
    pub fn vote_tally(&self, id: NodeId) -> Vec<(u64, Vec<NodeId>)> {
        let e = self.replica(id).engine();
        (0..e.executed_prefix().0)
            .map(|s| (s, e.entry(crate::types::Slot(s)).expect("executed").voters.iter().copied().collect()))
            .collect()
    }

    fn schedule(&mut self, time: Time, sender: u64, event: Event) {
        self.seq += 1;
        self.queue.push(Scheduled { time, sender, seq: self.seq, event });
    }

    /// Runs to the configured end and reports.
    pub fn run(mut self) -> SimReport {
        self.run_until(Time(u64::MAX));
        self.finish()
    }

    /// Processes events up to `limit` or the run's end, whichever is first.
    pub fn run_until(&mut self, limit: Time) {
        while let Some(top) = self.queue.peek() {
            if top.time > self.end || top.time > limit {
                break;
            }
            let Scheduled { time, event, .. } = self.queue.pop().expect("peeked");
            debug_assert!(time >= self.now);
            self.now = time;
            self.dispatch(event);
        }
        if self.queue.peek().is_none_or(|t| t.time > self.end) {
            self.now = self.now.max(self.end.min(limit));
        }
    }

    fn dispatch(&mut self, event: Event) {
        match event {
            Event::Arrive { to: Dest::Node(id), from, msg } => {
                let node = &mut self.nodes[id.index()];
                if node.crashed {
                    self.accounting.dropped += 1;
                    return;
                }
                node.inbox.push_back(InboxItem::Msg { from, msg });
                self.wake_cpu(id.index());
            }
            Event::Arrive { to: Dest::Client(cid), from: _, msg } => {
                self.accounting.received += 1;
                if let Message::ClientReply(reply) = msg {
                    self.on_client_reply((cid - 1) as usize, reply);
                }
            }
            Event::Process(i) => self.process(i),
            Event::Tick(i) => {
                let node = &mut self.nodes[i];
                if node.crashed || node.tick_at != Some(self.now) {
                    return;
                }
                node.tick_at = None;
                node.inbox.push_back(InboxItem::Tick);
                self.wake_cpu(i);
            }
            Event::ClientWake(c) => self.client_issue(c),
            Event::ClientResend { client, seq, attempt } | Event::ClientTimeout { client, seq, attempt } => {
                let timeout = matches!(event, Event::ClientTimeout { .. });
                self.client_retry(client, seq, attempt, timeout);
            }
            Event::Fault(ev) => self.apply_fault(ev),
        }
    }

    fn wake_cpu(&mut self, i: usize) {
        let node = &mut self.nodes[i];
        if !node.processing {
            node.processing = true;
            let at = node.busy_until.max(self.now);
            self.schedule(at, i as u64, Event::Process(i));
        }
    }

    fn process(&mut self, i: usize) {
        let measuring = self.now >= self.workload_start;
        let node = &mut self.nodes[i];
        if node.crashed {
            node.processing = false;
            return;
        }
        let Some(item) = node.inbox.pop_front() else {
            node.processing = false;
            return;
        };
        let (handled_at, outs) = match item {
            InboxItem::Msg { from, msg } => {
                let cost = self.cfg.profile.cpu.cost_us(msg.msg_type(), wire::encoded_len(&msg));
                let at = self.now + Duration::from_micros(cost);
                self.accounting.received += 1;
                if measuring {
                    self.counters[i].record_received(msg.category());
                }
                (at, node.replica.handle(at, from, msg))
            }
            InboxItem::Tick => (self.now, node.replica.tick(self.now)),
        };
        self.observe(i, handled_at);
        let mut t = handled_at;
        for out in outs {
            let cost = self.cfg.profile.cpu.cost_us(out.msg.msg_type(), wire::encoded_len(&out.msg));
            t = t + Duration::from_micros(cost);
            self.transmit(Source::Node(NodeId(i as u32)), out, t);
        }
        let node = &mut self.nodes[i];
        node.busy_until = t;
        if node.inbox.is_empty() {
            node.processing = false;
        } else {
            self.schedule(t, i as u64, Event::Process(i));
        }
        self.reschedule_tick(i);
        if self.cfg.trace_relays {
            let id = NodeId(i as u32);
            for (when, relay) in self.nodes[i].replica.take_relay_trace() {
                self.relay_trace.push((when, id, relay));
            }
        }
    }

    fn observe(&mut self, i: usize, at: Time) {
        if let Some(checker) = self.checker.as_mut() {
            let id = NodeId(i as u32);
            for ev in self.nodes[i].replica.take_events() {
                checker.observe(at, id, &ev);
            }
        }
    }

    fn reschedule_tick(&mut self, i: usize) {
        let node = &mut self.nodes[i];
        if node.crashed {
            return;
        }
        let Some(t) = node.replica.next_timer() else { return };
        let t = t.max(self.now + Duration::from_micros(1));
        if node.tick_at.is_none_or(|cur| t < cur) {
            node.tick_at = Some(t);
            self.schedule(t, i as u64, Event::Tick(i));
        }
    }

    fn blocked(&self, a: NodeId, b: NodeId) -> bool {
        self.partitions.iter().any(|p| p.contains(&a) != p.contains(&b))
    }

    fn transmit(&mut self, from: Source, out: Outgoing, depart: Time) {
        self.accounting.sent += 1;
        if let Source::Node(id) = from {
            if depart >= self.workload_start {
                self.counters[id.index()].record_sent(out.msg.category());
            }
            if let (true, Dest::Node(to), Message::Envelope(env)) = (self.crash_next_relay, out.to, &out.msg) {
                if !env.group_members.is_empty() && self.nodes[id.index()].replica.is_leader() {
                    self.crash_next_relay = false;
                    log::info!("crashing relay {to} at {}", self.now);
                    self.crash(to);
                }
            }
            if let Dest::Node(to) = out.to {
                if self.blocked(id, to) {
                    self.accounting.dropped += 1;
                    return;
                }
            }
        }
        let p = &self.cfg.profile;
        if p.drop_probability > 0.0 && self.rng.random_bool(p.drop_probability) {
            self.accounting.dropped += 1;
            return;
        }
        let copies = if p.duplicate_probability > 0.0 && self.rng.random_bool(p.duplicate_probability) {
            self.accounting.duplicated += 1;
            2
        } else {
            1
        };
        let sender = match from {
            Source::Node(id) => id.0 as u64,
            Source::Client(c) => client_key(self.nodes.len(), (c - 1) as usize),
        };
        for _ in 0..copies {
            let (lo, hi) = self.latency_us;
            let latency = self.rng.random_range(lo..=hi);
            let arrive = Event::Arrive { to: out.to, from, msg: out.msg.clone() };
            self.schedule(depart + Duration::from_micros(latency), sender, arrive);
        }
    }

    fn crash(&mut self, id: NodeId) {
        let node = &mut self.nodes[id.index()];
        if node.crashed {
            return;
        }
        node.crashed = true;
        node.tick_at = None;
        let lost = node.inbox.iter().filter(|m| matches!(m, InboxItem::Msg { .. })).count();
        node.inbox.clear();
        self.accounting.dropped += lost as u64;
    }

    fn apply_fault(&mut self, ev: FaultEvent) {
        log::info!("t={}: {:?} {:?}", self.now, ev.action, ev.nodes);
        match ev.action {
            FaultAction::Crash => {
                for id in ev.nodes {
                    self.crash(id);
                }
            }
            FaultAction::Recover => {
                for id in ev.nodes {
                    let now = self.now;
                    let node = &mut self.nodes[id.index()];
                    if node.crashed {
                        node.crashed = false;
                        node.processing = false;
                        node.busy_until = now;
                        node.replica.on_recover(now);
                        self.reschedule_tick(id.index());
                    }
                }
            }
            FaultAction::Partition => self.partitions.push(ev.nodes.into_iter().collect()),
            FaultAction::Heal => self.partitions.clear(),
            FaultAction::CrashNextRelay => self.crash_next_relay = true,
        }
    }

    fn issuing(&self) -> bool {
        self.now < self.workload_end && self.cfg.workload.max_ops.is_none_or(|m| self.completed < m)
    }

    fn client_issue(&mut self, c: usize) {
        if !self.issuing() || self.clients[c].current.is_some() {
            return;
        }
        let client = &mut self.clients[c];
        let seq = client.next_seq;
        client.next_seq += 1;
        let cmd = Arc::new(self.cfg.workload.next_command(client.id, seq, &mut client.rng));
        self.history.push(HistoryOp {
            client: client.id,
            seq,
            op: cmd.op,
            key: cmd.key.clone(),
            value: cmd.value.clone(),
            invoked: self.now,
            completed: None,
        });
        client.current = Some(Outstanding { cmd, history: self.history.len() - 1, attempt: 0 });
        self.client_send(c);
    }

    fn client_send(&mut self, c: usize) {
        let client = &self.clients[c];
        let Some(cur) = client.current.as_ref() else { return };
        let (id, target, seq, attempt) = (client.id, client.target, cur.cmd.request_seq, cur.attempt);
        let msg = Message::ClientRequest(cur.cmd.clone());
        let now = self.now;
        self.transmit(Source::Client(id), Outgoing { to: Dest::Node(target), msg }, now);
        let timeout = self.cfg.cluster.leader_timeout * 2;
        self.schedule(now + timeout, client_key(self.nodes.len(), c), Event::ClientTimeout { client: c, seq, attempt });
    }

    fn client_retry(&mut self, c: usize, seq: u64, attempt: u32, timeout: bool) {
        let n = self.nodes.len() as u32;
        let client = &mut self.clients[c];
        let Some(cur) = client.current.as_mut() else { return };
        if cur.cmd.request_seq != seq || cur.attempt != attempt {
            return;
        }
        cur.attempt += 1;
        if timeout {
            client.target = NodeId((client.target.0 + 1) % n);
        }
        self.client_send(c);
    }

    fn on_client_reply(&mut self, c: usize, reply: crate::msg::ClientReply) {
        let n = self.nodes.len() as u32;
        let key = client_key(self.nodes.len(), c);
        let client = &mut self.clients[c];
        let Some(cur) = client.current.as_mut() else { return };
        if cur.cmd.request_seq != reply.request_seq {
            return;
        }
        match reply.outcome {
            ReplyOutcome::NotLeader { hint } => {
                cur.attempt += 1;
                let (seq, attempt) = (cur.cmd.request_seq, cur.attempt);
                match hint {
                    Some(h) if h != client.target => {
                        client.target = h;
                        self.client_send(c);
                    }
                    _ => {
                        client.target = NodeId((client.target.0 + 1) % n);
                        let at = self.now + NOT_LEADER_BACKOFF;
                        self.schedule(at, key, Event::ClientResend { client: c, seq, attempt });
                    }
                }
            }
            outcome => {
                let cur = client.current.take().expect("outstanding");
                self.history[cur.history].completed = Some((self.now, outcome));
                self.completed += 1;
                if !self.issuing() {
                    self.end = self.end.min(self.now + self.cfg.drain);
                }
                let at = self.now + self.cfg.workload.think_time();
                self.schedule(at, key, Event::ClientWake(c));
            }
        }
    }

    fn finish(mut self) -> SimReport {
        let final_time = self.now;
        let mut in_flight = 0u64;
        for s in &self.queue {
            if matches!(s.event, Event::Arrive { .. }) {
                in_flight += 1;
            }
        }
        for node in &self.nodes {
            in_flight += node.inbox.iter().filter(|m| matches!(m, InboxItem::Msg { .. })).count() as u64;
        }
        self.accounting.in_flight = in_flight;

        if let Some(checker) = self.checker.as_mut() {
            for node in &self.nodes {
                let e = node.replica.engine();
                let id = node.replica.id();
                let log: Vec<(u64, SharedCommand)> = (0..e.executed_prefix().0)
                    .map(|s| (s, e.entry(crate::types::Slot(s)).expect("executed").command.clone()))
                    .collect();
                checker.check_executed(final_time, id, log.iter().map(|(s, c)| (*s, c)));
            }
        }

        let mut latencies = Vec::new();
        let mut windows: Vec<u64> = Vec::new();
        let mut last_finish = self.workload_start;
        for h in &self.history {
            if let Some((t, _)) = &h.completed {
                latencies.push(t.as_micros() - h.invoked.as_micros());
                let w = (t.since(self.workload_start).as_micros() / 1_000_000) as usize;
                if windows.len() <= w {
                    windows.resize(w + 1, 0);
                }
                windows[w] += 1;
                last_finish = last_finish.max(*t);
            }
        }
        let issue_end = if self.cfg.workload.max_ops.is_some() {
            last_finish.min(self.workload_end)
        } else {
            self.workload_end
        };
        let duration_s = issue_end.since(self.workload_start).as_secs_f64();
        let stats = self.nodes.iter().fold(crate::replica::ReplicaStats::default(), |mut acc, n| {
            let s = &n.replica.stats;
            acc.leader_retries += s.leader_retries;
            acc.relay_timeouts += s.relay_timeouts;
            acc.elections += s.elections;
            acc.alarms += s.alarms;
            acc
        });
        let leader = self.leader();
        let metrics = MetricsReport {
            n: self.cfg.cluster.n,
            relay_groups: self.cfg.cluster.relay_groups,
            routing: self.cfg.cluster.routing,
            seed: self.cfg.seed,
            leader,
            ops: self.completed,
            duration_s,
            windows,
            latency: LatencySummary::from_micros(&latencies),
            nodes: self.counters.clone(),
            retries: stats.leader_retries,
            relay_timeouts: stats.relay_timeouts,
            elections: stats.elections,
            alarms: stats.alarms,
            accounting: self.accounting.clone(),
        };
        SimReport {
            metrics,
            violations: self.checker.as_ref().map(|c| c.violations().to_vec()).unwrap_or_default(),
            history: std::mem::take(&mut self.history),
            final_time,
            relay_trace: std::mem::take(&mut self.relay_trace),
        }
    }
}

fn client_key(n: usize, c: usize) -> u64 {
    (n + c) as u64
}
