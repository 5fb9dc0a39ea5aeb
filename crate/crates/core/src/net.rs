//! Stream-socket transport: one persistent outbound connection per peer,
//! a node-id preface on every connection, and a single task that owns the
//! replica and serializes all of its input.

use std::collections::HashMap;
use std::future::Future;
use std::net::SocketAddr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use bytes::BytesMut;
use log::{debug, info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::tcp::OwnedReadHalf;
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{mpsc, oneshot, watch};
use tokio::task::JoinHandle;

use crate::bench::{LatencySummary, WorkloadSpec};
use crate::config::{ClusterConfig, ConfigError};
use crate::msg::{Message, ReplyOutcome};
use crate::replica::{Dest, Outgoing, Replica, Source};
use crate::types::{Command, NodeId, SharedCommand, Time};
use crate::wire::{self, WireError};

/// Preface sent by client connections in place of a node id.
pub const CLIENT_PREFACE: u32 = u32::MAX;

/// Frames buffered per peer before new ones are dropped.
pub const PEER_QUEUE: usize = 4096;

const BACKOFF_MIN: Duration = Duration::from_millis(20);
const BACKOFF_MAX: Duration = Duration::from_secs(1);
const IDLE_TICK: Duration = Duration::from_millis(10);

#[derive(Debug, Error)]
pub enum NetError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("no address configured for node {0}")]
    MissingAddress(NodeId),
    #[error("address {addr} for node {node}: {source}")]
    Address { node: NodeId, addr: String, source: std::net::AddrParseError },
    #[error("cannot listen on {addr}: {source}")]
    Bind { addr: SocketAddr, source: std::io::Error },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("wire: {0}")]
    Wire(#[from] WireError),
    #[error("request timed out")]
    Timeout,
}

/// Something that happened to a connection; surfaced, never fatal.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TransportEvent {
    Connected(NodeId),
    ConnectFailed { peer: NodeId, error: String },
    Disconnected(NodeId),
    Overflow(NodeId),
}

/// Snapshot published by a running node.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct NodeStatus {
    pub is_leader: bool,
    pub committed: u64,
    pub executed: u64,
}

enum Input {
    Peer(NodeId, Message),
    Client { cmd: SharedCommand, reply: mpsc::Sender<Message> },
    Transport(TransportEvent),
    Log(oneshot::Sender<Vec<SharedCommand>>),
}

pub fn peer_addr(cfg: &ClusterConfig, node: NodeId) -> Result<SocketAddr, NetError> {
    let addr = cfg.peers.get(&node).ok_or(NetError::MissingAddress(node))?;
    addr.parse().map_err(|source| NetError::Address { node, addr: addr.clone(), source })
}

/// A running replica. Dropping the handle leaves it running; call
/// [`NodeHandle::shutdown`] to stop it.
pub struct NodeHandle {
    pub id: NodeId,
    pub addr: SocketAddr,
    status: watch::Receiver<NodeStatus>,
    input: mpsc::Sender<Input>,
    stop: Option<oneshot::Sender<()>>,
    task: JoinHandle<()>,
}

impl NodeHandle {
    pub fn status(&self) -> NodeStatus {
        self.status.borrow().clone()
    }

    /// The executed prefix of the replica's log.
    pub async fn executed_log(&self) -> Vec<SharedCommand> {
        let (tx, rx) = oneshot::channel();
        if self.input.send(Input::Log(tx)).await.is_err() {
            return Vec::new();
        }
        rx.await.unwrap_or_default()
    }

    pub async fn shutdown(mut self) {
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(());
        }
        let _ = self.task.await;
    }
}

/// Binds the node's listener and starts it. Binding happens before
/// returning, so a port conflict (or a duplicate node id) is reported here.
pub async fn spawn_node(cfg: Arc<ClusterConfig>, id: NodeId) -> Result<NodeHandle, NetError> {
    cfg.validate()?;
    let addr = peer_addr(&cfg, id)?;
    let listener = TcpListener::bind(addr).await.map_err(|source| NetError::Bind { addr, source })?;
    let addr = listener.local_addr()?;
    let mut peers = HashMap::new();
    for peer in cfg.node_ids().filter(|p| *p != id) {
        peers.insert(peer, peer_addr(&cfg, peer)?);
    }
    let replica = Replica::new(id, cfg.clone())?;

    let (input_tx, input_rx) = mpsc::channel(PEER_QUEUE);
    let (status_tx, status_rx) = watch::channel(NodeStatus::default());
    let (stop_tx, stop_rx) = oneshot::channel();

    let mut outbound = HashMap::new();
    let mut tasks = Vec::new();
    for (peer, peer_addr) in peers {
        let (tx, rx) = mpsc::channel(PEER_QUEUE);
        outbound.insert(peer, tx);
        tasks.push(tokio::spawn(dial(id, peer, peer_addr, rx, input_tx.clone(), cfg.rng_seed)));
    }
    tasks.push(tokio::spawn(accept(listener, cfg.n, input_tx.clone())));

    let task = tokio::spawn(async move {
        drive(replica, input_rx, outbound, status_tx, stop_rx).await;
        for t in tasks {
            t.abort();
        }
    });
    info!("node {id} listening on {addr}");
    Ok(NodeHandle { id, addr, status: status_rx, input: input_tx, stop: Some(stop_tx), task })
}

/// Runs a node until `shutdown` resolves.
pub async fn run_node(
    cfg: Arc<ClusterConfig>,
    id: NodeId,
    shutdown: impl Future<Output = ()>,
) -> Result<(), NetError> {
    let handle = spawn_node(cfg, id).await?;
    shutdown.await;
    handle.shutdown().await;
    Ok(())
}

async fn drive(
    mut replica: Replica,
    mut input: mpsc::Receiver<Input>,
    outbound: HashMap<NodeId, mpsc::Sender<Message>>,
    status: watch::Sender<NodeStatus>,
    mut stop: oneshot::Receiver<()>,
) {
    let start = Instant::now();
    let now = || Time::from_micros(start.elapsed().as_micros() as u64);
    let mut clients: HashMap<u64, mpsc::Sender<Message>> = HashMap::new();
    let mut was_leader = false;
    loop {
        let wait = replica
            .next_timer()
            .map(|t| Duration::from_micros(t.as_micros().saturating_sub(now().as_micros())))
            .unwrap_or(IDLE_TICK)
            .min(IDLE_TICK);
        let out = tokio::select! {
            _ = &mut stop => break,
            msg = input.recv() => match msg {
                None => break,
                Some(Input::Peer(peer, msg)) => replica.handle(now(), Source::Node(peer), msg),
                Some(Input::Client { cmd, reply }) => {
                    clients.insert(cmd.client_id, reply);
                    let cid = cmd.client_id;
                    replica.handle(now(), Source::Client(cid), Message::ClientRequest(cmd))
                }
                Some(Input::Transport(ev)) => {
                    debug!("node {}: {ev:?}", replica.id());
                    Vec::new()
                }
                Some(Input::Log(tx)) => {
                    let e = replica.engine();
                    let log = (0..e.executed_prefix().0)
                        .filter_map(|s| e.entry(crate::types::Slot(s)).map(|en| en.command.clone()))
                        .collect();
                    let _ = tx.send(log);
                    Vec::new()
                }
            },
            _ = tokio::time::sleep(wait) => replica.tick(now()),
        };
        route(replica.id(), out, &outbound, &mut clients);
        let leader = replica.is_leader();
        if leader != was_leader {
            info!("node {}: {} at ballot {:?}", replica.id(), if leader { "leading" } else { "following" }, replica.engine().ballot());
            was_leader = leader;
        }
        let e = replica.engine();
        let next = NodeStatus { is_leader: leader, committed: e.committed_prefix().0, executed: e.executed_prefix().0 };
        status.send_if_modified(|s| {
            let changed = *s != next;
            *s = next;
            changed
        });
    }
}

fn route(
    me: NodeId,
    out: Vec<Outgoing>,
    peers: &HashMap<NodeId, mpsc::Sender<Message>>,
    clients: &mut HashMap<u64, mpsc::Sender<Message>>,
) {
    for Outgoing { to, msg } in out {
        match to {
            Dest::Node(p) => match peers.get(&p) {
                Some(tx) => {
                    if tx.try_send(msg).is_err() {
                        debug!("node {me}: queue to {p} full, dropping");
                    }
                }
                None => warn!("node {me}: no route to {p}"),
            },
            Dest::Client(c) => {
                if let Some(tx) = clients.get(&c) {
                    if tx.try_send(msg).is_err() {
                        clients.remove(&c);
                    }
                }
            }
        }
    }
}

/// Keeps one connection to `peer` alive and writes queued frames to it.
/// A frame whose write fails is lost; the queue itself survives reconnects.
async fn dial(
    me: NodeId,
    peer: NodeId,
    addr: SocketAddr,
    mut queue: mpsc::Receiver<Message>,
    events: mpsc::Sender<Input>,
    seed: u64,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (u64::from(me.0) << 32 | u64::from(peer.0)));
    let mut backoff = BACKOFF_MIN;
    let mut buf = BytesMut::new();
    loop {
        let mut stream = match TcpStream::connect(addr).await {
            Ok(s) => s,
            Err(e) => {
                let _ = events.try_send(Input::Transport(TransportEvent::ConnectFailed { peer, error: e.to_string() }));
                // shed what piled up while the peer was unreachable
                while queue.len() >= PEER_QUEUE / 2 && queue.try_recv().is_ok() {}
                let jitter = rng.random_range(0.5..1.0);
                tokio::time::sleep(backoff.mul_f64(jitter)).await;
                backoff = (backoff * 2).min(BACKOFF_MAX);
                continue;
            }
        };
        let _ = stream.set_nodelay(true);
        if stream.write_all(&me.0.to_be_bytes()).await.is_err() {
            continue;
        }
        backoff = BACKOFF_MIN;
        let _ = events.try_send(Input::Transport(TransportEvent::Connected(peer)));
        loop {
            let Some(msg) = queue.recv().await else { return };
            buf.clear();
            wire::encode_into(&msg, &mut buf);
            // batch whatever else is already queued
            while buf.len() < 64 * 1024 {
                match queue.try_recv() {
                    Ok(m) => wire::encode_into(&m, &mut buf),
                    Err(_) => break,
                }
            }
            if stream.write_all(&buf).await.is_err() {
                let _ = events.try_send(Input::Transport(TransportEvent::Disconnected(peer)));
                break;
            }
        }
    }
}

async fn accept(listener: TcpListener, n: usize, input: mpsc::Sender<Input>) {
    loop {
        let (stream, remote) = match listener.accept().await {
            Ok(s) => s,
            Err(e) => {
                warn!("accept: {e}");
                continue;
            }
        };
        let _ = stream.set_nodelay(true);
        let input = input.clone();
        tokio::spawn(async move {
            if let Err(e) = serve(stream, n, input).await {
                debug!("connection from {remote} closed: {e}");
            }
        });
    }
}

async fn serve(stream: TcpStream, n: usize, input: mpsc::Sender<Input>) -> Result<(), NetError> {
    let (mut rd, mut wr) = stream.into_split();
    let preface = rd.read_u32().await?;
    let mut frames = FrameReader::new(rd);
    if preface == CLIENT_PREFACE {
        let (tx, mut rx) = mpsc::channel::<Message>(256);
        let writer = tokio::spawn(async move {
            while let Some(msg) = rx.recv().await {
                if wr.write_all(&wire::encode(&msg)).await.is_err() {
                    break;
                }
            }
        });
        while let Some(msg) = frames.next().await? {
            if let Message::ClientRequest(cmd) = msg {
                if input.send(Input::Client { cmd, reply: tx.clone() }).await.is_err() {
                    break;
                }
            }
        }
        writer.abort();
        return Ok(());
    }
    if preface as usize >= n {
        warn!("rejecting connection claiming unknown node id {preface}");
        return Ok(());
    }
    let peer = NodeId(preface);
    while let Some(msg) = frames.next().await? {
        if input.send(Input::Peer(peer, msg)).await.is_err() {
            break;
        }
    }
    Ok(())
}

struct FrameReader {
    rd: OwnedReadHalf,
    buf: BytesMut,
}

impl FrameReader {
    fn new(rd: OwnedReadHalf) -> Self {
        FrameReader { rd, buf: BytesMut::with_capacity(64 * 1024) }
    }

    /// `Ok(None)` on a clean end of stream.
    async fn next(&mut self) -> Result<Option<Message>, NetError> {
        loop {
            if let Some(msg) = wire::split_frame(&mut self.buf)? {
                return Ok(Some(msg));
            }
            if self.rd.read_buf(&mut self.buf).await? == 0 {
                return Ok(None);
            }
        }
    }
}

/// One client connection to one node.
pub struct ClientConn {
    wr: tokio::net::tcp::OwnedWriteHalf,
    frames: FrameReader,
}

impl ClientConn {
    pub async fn connect(addr: SocketAddr) -> Result<Self, NetError> {
        let stream = TcpStream::connect(addr).await?;
        stream.set_nodelay(true)?;
        let (rd, mut wr) = stream.into_split();
        wr.write_all(&CLIENT_PREFACE.to_be_bytes()).await?;
        Ok(ClientConn { wr, frames: FrameReader::new(rd) })
    }

    /// Sends `cmd` and waits for the reply carrying its sequence number.
    pub async fn request(&mut self, cmd: &Command, timeout: Duration) -> Result<ReplyOutcome, NetError> {
        self.wr.write_all(&wire::encode(&Message::ClientRequest(Arc::new(cmd.clone())))).await?;
        let wait = async {
            loop {
                match self.frames.next().await? {
                    Some(Message::ClientReply(r)) if r.request_seq == cmd.request_seq => return Ok(r.outcome),
                    Some(_) => continue,
                    None => return Err(NetError::Io(std::io::ErrorKind::UnexpectedEof.into())),
                }
            }
        };
        tokio::time::timeout(timeout, wait).await.map_err(|_| NetError::Timeout)?
    }
}

/// A client that follows leader redirects across the cluster.
pub struct ClusterClient {
    id: u64,
    addrs: Vec<SocketAddr>,
    conns: HashMap<usize, ClientConn>,
    target: usize,
    timeout: Duration,
    pub redirects: u64,
    pub timeouts: u64,
}

impl ClusterClient {
    pub fn new(id: u64, cfg: &ClusterConfig) -> Result<Self, NetError> {
        let addrs = cfg.node_ids().map(|n| peer_addr(cfg, n)).collect::<Result<Vec<_>, _>>()?;
        Ok(ClusterClient {
            id,
            addrs,
            conns: HashMap::new(),
            target: 0,
            timeout: cfg.leader_timeout * 2,
            redirects: 0,
            timeouts: 0,
        })
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    /// Retries until a node answers with a result, or `deadline` passes.
    pub async fn execute(&mut self, cmd: &Command, deadline: Instant) -> Result<ReplyOutcome, NetError> {
        while Instant::now() < deadline {
            let target = self.target;
            let conn = match self.conns.get_mut(&target) {
                Some(c) => c,
                None => match ClientConn::connect(self.addrs[target]).await {
                    Ok(c) => self.conns.entry(target).or_insert(c),
                    Err(_) => {
                        self.advance(None);
                        tokio::time::sleep(BACKOFF_MIN).await;
                        continue;
                    }
                },
            };
            match conn.request(cmd, self.timeout).await {
                Ok(ReplyOutcome::NotLeader { hint }) => {
                    self.redirects += 1;
                    if hint.is_none() {
                        tokio::time::sleep(BACKOFF_MIN).await;
                    }
                    self.advance(hint);
                }
                Ok(outcome) => return Ok(outcome),
                Err(e) => {
                    if matches!(e, NetError::Timeout) {
                        self.timeouts += 1;
                    }
                    self.conns.remove(&target);
                    self.advance(None);
                }
            }
        }
        Err(NetError::Timeout)
    }

    fn advance(&mut self, hint: Option<NodeId>) {
        self.target = match hint {
            Some(h) if h.index() < self.addrs.len() => h.index(),
            _ => (self.target + 1) % self.addrs.len(),
        };
    }
}

/// Outcome of a closed-loop run against a live cluster.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SocketBenchReport {
    pub clients: usize,
    pub ops: u64,
    pub failed: u64,
    pub duration_s: f64,
    pub latency: LatencySummary,
    pub redirects: u64,
    pub timeouts: u64,
}

impl SocketBenchReport {
    pub const CSV_HEADER: &'static str =
        "clients,ops,failed,duration_s,throughput,p25_ms,median_ms,p75_ms,p99_ms,mean_ms,redirects,timeouts";

    pub fn throughput(&self) -> f64 {
        if self.duration_s > 0.0 {
            self.ops as f64 / self.duration_s
        } else {
            0.0
        }
    }

    pub fn to_csv(&self) -> String {
        let l = &self.latency;
        format!(
            "{}\n{},{},{},{:.3},{:.1},{:.3},{:.3},{:.3},{:.3},{:.3},{},{}\n",
            Self::CSV_HEADER,
            self.clients,
            self.ops,
            self.failed,
            self.duration_s,
            self.throughput(),
            l.p25_ms,
            l.median_ms,
            l.p75_ms,
            l.p99_ms,
            l.mean_ms,
            self.redirects,
            self.timeouts
        )
    }
}

/// Drives `workload.clients` closed-loop clients against the cluster for
/// the workload's duration. Warmup requests are not measured.
pub async fn run_bench(cfg: &ClusterConfig, workload: &WorkloadSpec, seed: u64) -> Result<SocketBenchReport, NetError> {
    let start = Instant::now();
    let measure_from = start + workload.warmup();
    let end = measure_from + workload.duration();
    let mut tasks = Vec::new();
    for cid in 1..=workload.clients as u64 {
        let mut client = ClusterClient::new(cid, cfg)?;
        let workload = workload.clone();
        tasks.push(tokio::spawn(async move {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ cid.wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let mut samples = Vec::new();
            let mut failed = 0u64;
            let mut seq = 0u64;
            while Instant::now() < end {
                seq += 1;
                if workload.max_ops.is_some_and(|m| samples.len() as u64 >= m) {
                    break;
                }
                let cmd = workload.next_command(cid, seq, &mut rng);
                let invoked = Instant::now();
                match client.execute(&cmd, end).await {
                    Ok(_) if invoked >= measure_from => samples.push(invoked.elapsed().as_micros() as u64),
                    Ok(_) => {}
                    Err(_) => failed += 1,
                }
                let think = workload.think_time();
                if !think.is_zero() {
                    tokio::time::sleep(think).await;
                }
            }
            (samples, failed, client.redirects, client.timeouts)
        }));
    }
    let mut report = SocketBenchReport { clients: workload.clients, ..Default::default() };
    let mut all = Vec::new();
    for t in tasks {
        let (samples, failed, redirects, timeouts) = t.await.expect("client task panicked");
        all.extend(samples);
        report.failed += failed;
        report.redirects += redirects;
        report.timeouts += timeouts;
    }
    report.ops = all.len() as u64;
    report.duration_s = Instant::now().saturating_duration_since(measure_from).as_secs_f64();
    report.latency = LatencySummary::from_micros(&all);
    Ok(report)
}
