//! A complete replica: consensus engine, key-value store, relay duties and
//! timers. Transport-agnostic: callers feed messages and clock ticks and
//! deliver the returned sends.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::sync::Arc;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{partition_followers, ClusterConfig, ConfigError, RelayGroupConfig, Routing};
use crate::engine::{ElectionOutcome, EngineEvent, PaxosEngine, ProposeOutcome};
use crate::kvstore::KvState;
use crate::msg::{AggregatedReply, ClientReply, Message, P2a, P3, Phase, PigEnvelope, PigMsgId, ReplyOutcome};
use crate::pig::{select_relays, GrayList, GrayListEvent, PendingAggregation, RelayTable};
use crate::types::{majority, NodeId, SharedCommand, Slot, Time};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub enum Source {
    Node(NodeId),
    Client(u64),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Dest {
    Node(NodeId),
    Client(u64),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Outgoing {
    pub to: Dest,
    pub msg: Message,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ReplicaStats {
    /// Leader-side round timeouts that triggered a re-broadcast.
    pub leader_retries: u64,
    /// Relay aggregations flushed by their deadline.
    pub relay_timeouts: u64,
    /// Rounds that exceeded the retry budget.
    pub alarms: u64,
    pub elections: u64,
    /// Member replies arriving after their aggregation closed.
    pub late_replies: u64,
    /// Aggregated replies that did not match the sender's group.
    pub bad_aggregates: u64,
    pub duplicate_envelopes: u64,
}

#[derive(Clone, Debug)]
struct Round {
    deadline: Time,
    attempts: u32,
    relays: Vec<NodeId>,
    responded: BTreeSet<NodeId>,
}

impl Round {
    fn new(deadline: Time, relays: Vec<NodeId>) -> Self {
        Round { deadline, attempts: 0, relays, responded: BTreeSet::new() }
    }
}

/// Open leader rounds keyed by slot, indexed by deadline.
#[derive(Debug, Default)]
struct RoundTable {
    by_slot: HashMap<u64, Round>,
    by_deadline: BTreeSet<(Time, u64)>,
}

impl RoundTable {
    fn insert(&mut self, slot: u64, round: Round) {
        if let Some(old) = self.by_slot.insert(slot, round.clone()) {
            self.by_deadline.remove(&(old.deadline, slot));
        }
        self.by_deadline.insert((round.deadline, slot));
    }

    fn remove(&mut self, slot: u64) -> Option<Round> {
        let r = self.by_slot.remove(&slot)?;
        self.by_deadline.remove(&(r.deadline, slot));
        Some(r)
    }

    fn due(&self, now: Time) -> Vec<u64> {
        self.by_deadline.iter().take_while(|(t, _)| *t <= now).map(|&(_, s)| s).collect()
    }

    fn next_deadline(&self) -> Option<Time> {
        self.by_deadline.first().map(|&(t, _)| t)
    }

    fn responded(&mut self, slot: u64, relay: NodeId) {
        if let Some(r) = self.by_slot.get_mut(&slot) {
            r.responded.insert(relay);
        }
    }

    fn clear(&mut self) {
        self.by_slot.clear();
        self.by_deadline.clear();
    }

    fn len(&self) -> usize {
        self.by_slot.len()
    }
}

pub struct Replica {
    id: NodeId,
    cfg: Arc<ClusterConfig>,
    groups: RelayGroupConfig,
    rng: ChaCha8Rng,
    engine: PaxosEngine,
    kv: KvState,
    relay: RelayTable,
    graylist: Option<GrayList>,
    pig_seq: u64,
    rounds: RoundTable,
    election: Option<Round>,
    waiting: HashSet<(u64, u64)>,
    /// Slots below this have had their commit disseminated.
    announced: u64,
    last_p2a: Time,
    last_broadcast: Time,
    last_contact: Time,
    fd_timeout: Duration,
    relay_trace: Option<Vec<(Time, NodeId)>>,
    pub stats: ReplicaStats,
}

impl std::fmt::Debug for Replica {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Replica")
            .field("id", &self.id)
            .field("ballot", &self.engine.ballot())
            .field("leader", &self.engine.is_leader())
            .field("committed", &self.engine.committed_prefix())
            .finish_non_exhaustive()
    }
}

impl Replica {
    /// Node 0 campaigns immediately; the others wait out a failure-detector
    /// window first.
    pub fn new(id: NodeId, cfg: Arc<ClusterConfig>) -> Result<Self, ConfigError> {
        cfg.validate()?;
        if id.index() >= cfg.n {
            return Err(ConfigError::UnknownLeader { leader: id, n: cfg.n });
        }
        let groups = partition_followers(cfg.n, cfg.relay_groups, id)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed ^ (u64::from(id.0) + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let fd_timeout = if id.0 == 0 { Duration::ZERO } else { jittered(cfg.election_timeout(), &mut rng) };
        let graylist = cfg
            .graylist
            .enabled
            .then(|| GrayList::new(cfg.graylist.duration, cfg.graylist.probe_probability));
        Ok(Replica {
            id,
            engine: PaxosEngine::new(id, cfg.n),
            cfg,
            groups,
            rng,
            kv: KvState::new(),
            relay: RelayTable::new(),
            graylist,
            pig_seq: 0,
            rounds: RoundTable::default(),
            election: None,
            waiting: HashSet::new(),
            announced: 0,
            last_p2a: Time::ZERO,
            last_broadcast: Time::ZERO,
            last_contact: Time::ZERO,
            fd_timeout,
            relay_trace: None,
            stats: ReplicaStats::default(),
        })
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn config(&self) -> &ClusterConfig {
        &self.cfg
    }

    pub fn engine(&self) -> &PaxosEngine {
        &self.engine
    }

    pub fn kv(&self) -> &KvState {
        &self.kv
    }

    pub fn is_leader(&self) -> bool {
        self.engine.is_leader()
    }

    pub fn graylist(&self) -> Option<&GrayList> {
        self.graylist.as_ref()
    }

    /// Open leader rounds (uncommitted proposals being tracked).
    pub fn open_rounds(&self) -> usize {
        self.rounds.len()
    }

    pub fn set_observe(&mut self, on: bool) {
        self.engine.set_observe(on);
    }

    pub fn take_events(&mut self) -> Vec<EngineEvent> {
        self.engine.take_events()
    }

    /// Record every relay this node selects as an initiator.
    pub fn set_trace_relays(&mut self, on: bool) {
        self.relay_trace = on.then(Vec::new);
    }

    pub fn take_relay_trace(&mut self) -> Vec<(Time, NodeId)> {
        self.relay_trace.as_mut().map(std::mem::take).unwrap_or_default()
    }

    /// Resets the failure detector after a pause so a recovering node does
    /// not campaign before hearing from the current leader.
    pub fn on_recover(&mut self, now: Time) {
        self.last_contact = now;
        self.fd_timeout = jittered(self.cfg.election_timeout(), &mut self.rng);
    }

    pub fn handle(&mut self, now: Time, from: Source, msg: Message) -> Vec<Outgoing> {
        let mut out = Vec::new();
        let was_leader = self.engine.is_leader();
        match (from, msg) {
            (_, Message::ClientRequest(cmd)) => self.on_client_request(now, cmd, &mut out),
            (Source::Node(peer), Message::Envelope(env)) => self.on_envelope(now, peer, env, &mut out),
            (Source::Node(peer), Message::Aggregated(agg)) => self.on_aggregated(now, peer, agg, &mut out),
            (Source::Node(peer), msg @ (Message::P1a(_) | Message::P2a(_) | Message::P3(_))) => {
                if let Some(reply) = self.process_request(now, &msg) {
                    out.push(Outgoing { to: Dest::Node(peer), msg: reply });
                }
            }
            (Source::Node(_), Message::P1b(p1b)) => {
                if let Some(r) = self.election.as_mut() {
                    r.responded.insert(p1b.voter);
                }
                if let ElectionOutcome::Elected(p2as) = self.engine.on_p1b_quorum(&[p1b]) {
                    self.start_leading(now, p2as, &mut out);
                }
            }
            (Source::Node(_), Message::P2b(p2b)) => {
                if let Some(b) = p2b.reject_ballot {
                    self.engine.observe_ballot(b);
                } else {
                    self.rounds.responded(p2b.slot.0, p2b.voter);
                    if let Some(s) = self.engine.on_vote(p2b.slot, p2b.voter, p2b.ballot) {
                        self.rounds.remove(s.0);
                    }
                }
            }
            _ => {}
        }
        self.settle(now, was_leader, &mut out);
        out
    }

    /// Fires every timer due at `now`.
    pub fn tick(&mut self, now: Time) -> Vec<Outgoing> {
        let mut out = Vec::new();
        let was_leader = self.engine.is_leader();
        for agg in self.relay.expire(now) {
            self.stats.relay_timeouts += 1;
            let to = Dest::Node(agg.initiator);
            out.push(Outgoing { to, msg: Message::Aggregated(agg.flush(self.id)) });
        }
        if let Some(gl) = self.graylist.as_mut() {
            gl.purge_expired(now);
        }
        if self.engine.is_leader() {
            for slot in self.rounds.due(now) {
                self.retry_slot(now, slot, &mut out);
            }
            let prefix = self.engine.committed_prefix().0;
            if prefix > self.announced && now >= self.last_p2a + self.cfg.relay_timeout {
                for p3 in self.engine.commit_notices(Slot(self.announced)) {
                    self.broadcast(now, Message::P3(p3), &mut out);
                }
                self.announced = prefix;
            }
            if now >= self.last_broadcast + self.cfg.leader_timeout {
                if let Some(last) = prefix.checked_sub(1) {
                    let command = self.engine.entry(Slot(last)).expect("committed slot").command.clone();
                    self.broadcast(now, Message::P3(P3 { slot: Slot(last), command }), &mut out);
                }
                self.last_broadcast = now;
            }
        } else {
            if self.engine.is_candidate() && self.election.as_ref().is_some_and(|r| r.deadline <= now) {
                self.retry_election(now, &mut out);
            }
            if now >= self.last_contact + self.fd_timeout {
                self.campaign(now, &mut out);
            }
        }
        self.settle(now, was_leader, &mut out);
        out
    }

    /// Earliest time at which [`Self::tick`] has work to do.
    pub fn next_timer(&self) -> Option<Time> {
        let mut next = self.relay.next_deadline();
        let mut consider = |t: Time| next = Some(next.map_or(t, |n: Time| n.min(t)));
        if self.engine.is_leader() {
            if let Some(t) = self.rounds.next_deadline() {
                consider(t);
            }
            if self.engine.committed_prefix().0 > self.announced {
                consider(self.last_p2a + self.cfg.relay_timeout);
            }
            consider(self.last_broadcast + self.cfg.leader_timeout);
        } else {
            if let Some(r) = self.election.as_ref().filter(|_| self.engine.is_candidate()) {
                consider(r.deadline);
            }
            consider(self.last_contact + self.fd_timeout);
        }
        next
    }

    fn leader_alive(&self, now: Time) -> bool {
        now < self.last_contact + self.fd_timeout
    }

    fn on_client_request(&mut self, now: Time, cmd: SharedCommand, out: &mut Vec<Outgoing>) {
        let (cid, seq) = cmd.request_id();
        let reply_to = Dest::Client(cid);
        if let Some(outcome) = self.kv.cached_reply(cid, seq) {
            let msg = Message::ClientReply(ClientReply { client_id: cid, request_seq: seq, outcome: outcome.clone() });
            out.push(Outgoing { to: reply_to, msg });
            return;
        }
        if self.kv.already_applied(cid, seq) {
            return;
        }
        match self.engine.propose(cmd) {
            ProposeOutcome::Proposed(p2a) => {
                self.waiting.insert((cid, seq));
                self.send_p2a(now, p2a, out);
            }
            ProposeOutcome::InFlight(_) => {
                self.waiting.insert((cid, seq));
            }
            ProposeOutcome::NotLeader { hint } => {
                let alive = self.leader_alive(now);
                let hint = hint.filter(|_| alive);
                let msg = Message::ClientReply(ClientReply {
                    client_id: cid,
                    request_seq: seq,
                    outcome: ReplyOutcome::NotLeader { hint },
                });
                out.push(Outgoing { to: reply_to, msg });
                if hint.is_none() && !self.engine.is_candidate() && !alive {
                    self.campaign(now, out);
                }
            }
        }
    }

    /// Runs a relayed or direct request through the engine; returns the
    /// vote, if the request asks for one.
    fn process_request(&mut self, now: Time, msg: &Message) -> Option<Message> {
        match msg {
            Message::P1a(m) => {
                let r = self.engine.on_p1a(m);
                if r.ballot == m.ballot {
                    self.last_contact = now;
                }
                Some(Message::P1b(r))
            }
            Message::P2a(m) => {
                let r = self.engine.on_p2a(m);
                if r.is_ack() {
                    self.last_contact = now;
                }
                Some(Message::P2b(r))
            }
            Message::P3(m) => {
                self.engine.on_p3(m);
                if !self.engine.is_leader() {
                    self.last_contact = now;
                }
                None
            }
            _ => None,
        }
    }

    fn on_envelope(&mut self, now: Time, peer: NodeId, env: PigEnvelope, out: &mut Vec<Outgoing>) {
        let PigEnvelope { pig_id, group_members, payload } = env;
        if matches!(*payload, Message::P1b(_) | Message::P2b(_)) {
            self.on_member_reply(pig_id, peer, &payload, out);
            return;
        }
        if !self.relay.first_sight(pig_id, now) {
            self.stats.duplicate_envelopes += 1;
            return;
        }
        let reply = self.process_request(now, &payload);
        if group_members.is_empty() {
            if let Some(reply) = reply {
                let msg = Message::Envelope(PigEnvelope { pig_id, group_members: Vec::new(), payload: Box::new(reply) });
                out.push(Outgoing { to: Dest::Node(peer), msg });
            }
            return;
        }
        for &m in group_members.iter().filter(|&&m| m != self.id) {
            let msg = Message::Envelope(PigEnvelope { pig_id, group_members: Vec::new(), payload: payload.clone() });
            out.push(Outgoing { to: Dest::Node(m), msg });
        }
        let Some(reply) = reply else { return };
        let (phase, ballot, slot) = match &*payload {
            Message::P1a(m) => (Phase::One, m.ballot, m.from_slot),
            Message::P2a(m) => (Phase::Two, m.ballot, m.slot),
            _ => return,
        };
        let expected: BTreeSet<NodeId> = group_members.iter().copied().filter(|&m| m != self.id).collect();
        let threshold = group_members.len().saturating_sub(self.cfg.prc).max(1);
        let shortcut = self.cfg.shortcut_active().then(|| majority(self.cfg.n));
        let mut agg = PendingAggregation::new(
            pig_id,
            pig_id.initiator,
            phase,
            ballot,
            slot,
            expected,
            now + self.cfg.relay_timeout,
            threshold,
            shortcut,
        );
        agg.record_own(self.id, &reply);
        if agg.ready() {
            let msg = Message::Aggregated(agg.flush(self.id));
            out.push(Outgoing { to: Dest::Node(pig_id.initiator), msg });
        } else {
            self.relay.open(agg);
        }
    }

    fn on_member_reply(&mut self, pig_id: PigMsgId, peer: NodeId, reply: &Message, out: &mut Vec<Outgoing>) {
        let Some(agg) = self.relay.get_mut(&pig_id) else {
            self.stats.late_replies += 1;
            return;
        };
        agg.record(peer, reply);
        if let Some(agg) = self.relay.take_if_ready(&pig_id) {
            let to = Dest::Node(agg.initiator);
            out.push(Outgoing { to, msg: Message::Aggregated(agg.flush(self.id)) });
        }
    }

    fn on_aggregated(&mut self, now: Time, peer: NodeId, agg: AggregatedReply, out: &mut Vec<Outgoing>) {
        if let Some(gl) = self.graylist.as_mut() {
            gl.update(peer, GrayListEvent::Responded, now);
        }
        let Some(gi) = self.groups.group_of(peer) else {
            self.stats.bad_aggregates += 1;
            return;
        };
        let members = &self.groups.groups[gi];
        if agg.ack_count as usize + agg.missing_voters.len() != members.len() {
            self.stats.bad_aggregates += 1;
            return;
        }
        if let Some(b) = agg.reject_ballot {
            self.engine.observe_ballot(b);
            return;
        }
        let voters: Vec<NodeId> =
            members.iter().copied().filter(|m| agg.missing_voters.binary_search(m).is_err()).collect();
        match agg.phase {
            Phase::Two => {
                self.rounds.responded(agg.slot.0, peer);
                for v in voters {
                    if let Some(s) = self.engine.on_vote(agg.slot, v, agg.ballot) {
                        self.rounds.remove(s.0);
                    }
                }
            }
            Phase::One => {
                if let Some(r) = self.election.as_mut() {
                    r.responded.insert(peer);
                }
                if let Some(p2as) = self.engine.on_promises(agg.ballot, voters, &agg.accepted) {
                    self.start_leading(now, p2as, out);
                }
            }
        }
    }

    fn campaign(&mut self, now: Time, out: &mut Vec<Outgoing>) {
        self.stats.elections += 1;
        let p1a = self.engine.start_election();
        log::debug!("node {} campaigns with ballot {:?}", self.id, p1a.ballot);
        self.last_contact = now;
        self.fd_timeout = jittered(self.cfg.election_timeout(), &mut self.rng);
        self.rounds.clear();
        let relays = self.broadcast(now, Message::P1a(p1a), out);
        self.election = Some(Round::new(now + self.cfg.leader_timeout, relays));
    }

    fn retry_election(&mut self, now: Time, out: &mut Vec<Outgoing>) {
        let Some(p1a) = self.engine.current_p1a() else { return };
        let mut round = self.election.take().expect("candidate has an election round");
        self.graylist_silent(now, &round);
        round.attempts += 1;
        round.relays = self.broadcast(now, Message::P1a(p1a), out);
        round.responded.clear();
        round.deadline = now + self.cfg.leader_timeout;
        self.election = Some(round);
    }

    fn start_leading(&mut self, now: Time, p2as: Vec<P2a>, out: &mut Vec<Outgoing>) {
        log::info!("node {} leads with ballot {:?}", self.id, self.engine.ballot());
        self.election = None;
        self.rounds.clear();
        self.announced = self.announced.min(self.engine.committed_prefix().0);
        for p2a in p2as {
            self.send_p2a(now, p2a, out);
        }
    }

    fn send_p2a(&mut self, now: Time, p2a: P2a, out: &mut Vec<Outgoing>) {
        let slot = p2a.slot.0;
        if let Some(c) = p2a.commit_up_to {
            self.announced = self.announced.max(c.0 + 1);
        }
        self.last_p2a = now;
        let relays = self.broadcast(now, Message::P2a(p2a), out);
        self.rounds.insert(slot, Round::new(now + self.cfg.leader_timeout, relays));
    }

    fn retry_slot(&mut self, now: Time, slot: u64, out: &mut Vec<Outgoing>) {
        let Some(mut round) = self.rounds.remove(slot) else { return };
        let Some(p2a) = self.engine.p2a_for(Slot(slot)) else { return };
        self.stats.leader_retries += 1;
        self.graylist_silent(now, &round);
        round.attempts += 1;
        if round.attempts == self.cfg.max_retries + 1 {
            self.stats.alarms += 1;
            log::warn!("node {}: slot {slot} still uncommitted after {} retries", self.id, self.cfg.max_retries);
        }
        if let Some(c) = p2a.commit_up_to {
            self.announced = self.announced.max(c.0 + 1);
        }
        self.last_p2a = now;
        round.relays = self.broadcast(now, Message::P2a(p2a), out);
        round.responded.clear();
        round.deadline = now + self.cfg.leader_timeout;
        self.rounds.insert(slot, round);
    }

    fn graylist_silent(&mut self, now: Time, round: &Round) {
        if self.cfg.routing != Routing::Pig {
            return;
        }
        if let Some(gl) = self.graylist.as_mut() {
            for &r in round.relays.iter().filter(|r| !round.responded.contains(r)) {
                gl.update(r, GrayListEvent::RelayTimeout, now);
            }
        }
    }

    /// Sends `payload` to every other node, through one relay per group in
    /// Pig mode. Returns the nodes contacted directly.
    fn broadcast(&mut self, now: Time, payload: Message, out: &mut Vec<Outgoing>) -> Vec<NodeId> {
        self.last_broadcast = now;
        match self.cfg.routing {
            Routing::Direct => {
                let peers: Vec<NodeId> = self.cfg.node_ids().filter(|&n| n != self.id).collect();
                for &p in &peers {
                    out.push(Outgoing { to: Dest::Node(p), msg: payload.clone() });
                }
                peers
            }
            Routing::Pig => {
                let relays = select_relays(&self.groups, self.graylist.as_ref(), now, &mut self.rng);
                for (gi, &relay) in relays.iter().enumerate() {
                    self.pig_seq += 1;
                    let pig_id = PigMsgId { initiator: self.id, sequence: self.pig_seq };
                    let msg = Message::Envelope(PigEnvelope {
                        pig_id,
                        group_members: self.groups.groups[gi].clone(),
                        payload: Box::new(payload.clone()),
                    });
                    out.push(Outgoing { to: Dest::Node(relay), msg });
                    if let Some(trace) = self.relay_trace.as_mut() {
                        trace.push((now, relay));
                    }
                }
                relays
            }
        }
    }

    /// Handles role changes and executes newly committed entries.
    fn settle(&mut self, now: Time, was_leader: bool, out: &mut Vec<Outgoing>) {
        if was_leader && !self.engine.is_leader() {
            log::info!("node {} steps down at ballot {:?}", self.id, self.engine.ballot());
            self.rounds.clear();
            self.last_contact = now;
            let hint = self.engine.leader_hint();
            let mut waiting: Vec<_> = self.waiting.drain().collect();
            waiting.sort_unstable();
            for (cid, seq) in waiting {
                let msg = Message::ClientReply(ClientReply {
                    client_id: cid,
                    request_seq: seq,
                    outcome: ReplyOutcome::NotLeader { hint },
                });
                out.push(Outgoing { to: Dest::Client(cid), msg });
            }
        }
        for entry in self.engine.drain_ready() {
            let applied = self.kv.apply(&entry);
            if entry.command.is_noop() {
                continue;
            }
            let rid = entry.command.request_id();
            if self.waiting.remove(&rid) {
                self.rounds.remove(entry.slot.0);
                let msg = Message::ClientReply(ClientReply {
                    client_id: rid.0,
                    request_seq: rid.1,
                    outcome: applied.outcome,
                });
                out.push(Outgoing { to: Dest::Client(rid.0), msg });
            }
        }
    }
}

/// `base` scaled uniformly into [0.8, 1.2].
fn jittered<R: Rng>(base: Duration, rng: &mut R) -> Duration {
    base.mul_f64(rng.random_range(0.8..1.2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Command;

    fn cluster(n: usize, r: usize) -> Vec<Replica> {
        let cfg = Arc::new(ClusterConfig::new(n, r));
        (0..n as u32).map(|i| Replica::new(NodeId(i), cfg.clone()).unwrap()).collect()
    }

    /// Delivers messages instantly until quiescent; returns client replies.
    fn pump(nodes: &mut [Replica], now: Time, mut queue: Vec<(NodeId, Outgoing)>) -> Vec<ClientReply> {
        let mut replies = Vec::new();
        while !queue.is_empty() {
            let mut next = Vec::new();
            for (from, o) in queue {
                match o.to {
                    Dest::Node(to) => {
                        for x in nodes[to.index()].handle(now, Source::Node(from), o.msg) {
                            next.push((to, x));
                        }
                    }
                    Dest::Client(_) => {
                        if let Message::ClientReply(r) = o.msg {
                            replies.push(r);
                        }
                    }
                }
            }
            queue = next;
        }
        replies
    }

    fn elect(nodes: &mut [Replica]) {
        let out: Vec<_> = nodes[0].tick(Time::ZERO).into_iter().map(|o| (NodeId(0), o)).collect();
        pump(nodes, Time::ZERO, out);
        assert!(nodes[0].is_leader());
    }

    #[test]
    fn node_zero_elects_itself_through_relays() {
        let mut nodes = cluster(9, 2);
        elect(&mut nodes);
        assert!(nodes.iter().skip(1).all(|n| !n.is_leader()));
    }

    #[test]
    fn put_commits_and_replies_once() {
        for r in [1, 2, 4] {
            let mut nodes = cluster(5, r);
            elect(&mut nodes);
            let cmd = Arc::new(Command::put(7, 1, "k", "v"));
            let out = nodes[0].handle(Time::from_millis(1), Source::Client(7), Message::ClientRequest(cmd));
            let replies = pump(&mut nodes, Time::from_millis(1), out.into_iter().map(|o| (NodeId(0), o)).collect());
            assert_eq!(replies.len(), 1, "R={r}");
            assert_eq!(replies[0].outcome, ReplyOutcome::Stored);
            assert_eq!(nodes[0].kv().get(b"k").unwrap().as_ref(), b"v");
        }
    }

    #[test]
    fn follower_redirects_client() {
        let mut nodes = cluster(3, 1);
        elect(&mut nodes);
        let cmd = Arc::new(Command::get(3, 1, "k"));
        let out = nodes[2].handle(Time::from_millis(1), Source::Client(3), Message::ClientRequest(cmd));
        assert_eq!(out.len(), 1);
        let Message::ClientReply(r) = &out[0].msg else { panic!() };
        assert_eq!(r.outcome, ReplyOutcome::NotLeader { hint: Some(NodeId(0)) });
    }

    #[test]
    fn retry_after_commit_gets_cached_reply() {
        let mut nodes = cluster(5, 2);
        elect(&mut nodes);
        let cmd = Arc::new(Command::put(1, 1, "a", "b"));
        let out = nodes[0].handle(Time::from_millis(1), Source::Client(1), Message::ClientRequest(cmd.clone()));
        pump(&mut nodes, Time::from_millis(1), out.into_iter().map(|o| (NodeId(0), o)).collect());
        let slots = nodes[0].engine().next_slot();
        let again = nodes[0].handle(Time::from_millis(2), Source::Client(1), Message::ClientRequest(cmd));
        assert_eq!(again.len(), 1);
        assert_eq!(nodes[0].engine().next_slot(), slots);
    }

    #[test]
    fn idle_follower_campaigns_after_timeout() {
        let mut nodes = cluster(3, 1);
        let t = nodes[1].next_timer().unwrap();
        assert!(t >= Time::from_millis(480) && t <= Time::from_millis(720));
        let out = nodes[1].tick(t);
        assert!(nodes[1].engine().is_candidate());
        assert_eq!(out.len(), 1);
    }
}
