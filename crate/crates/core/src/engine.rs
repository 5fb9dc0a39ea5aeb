//! Pure Multi-Paxos replica state machine.
//!
//! The engine consumes protocol messages and returns protocol messages; it
//! owns no sockets and no clocks. Which nodes a broadcast reaches (directly
//! or through relays) is the caller's business.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use crate::msg::{AcceptedEntry, P1a, P1b, P2a, P2b, P3};
use crate::types::{majority, Ballot, Command, EntryState, LogEntry, NodeId, SharedCommand, Slot};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Role {
    Follower,
    Candidate(Candidacy),
    Leader,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Candidacy {
    pub ballot: Ballot,
    pub from_slot: Slot,
    pub promises: BTreeSet<NodeId>,
    /// Highest-ballot entry reported per slot.
    recovered: BTreeMap<u64, (Ballot, SharedCommand)>,
}

/// Observable transitions, consumed by invariant checkers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum EngineEvent {
    Promised(Ballot),
    Accepted { slot: Slot, ballot: Ballot },
    Committed { slot: Slot, command: SharedCommand },
    LeaderCommit { slot: Slot, ballot: Ballot, voters: BTreeSet<NodeId> },
    BecameLeader(Ballot),
    SteppedDown(Ballot),
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EngineStats {
    /// Votes for unknown slots or stale ballots.
    pub dropped_votes: u64,
    /// Duplicate votes absorbed by the voter set.
    pub duplicate_votes: u64,
    /// A commit notice disagreed with an already committed value.
    pub conflicting_commits: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ProposeOutcome {
    Proposed(P2a),
    /// The same request already occupies a slot in this leader's log.
    InFlight(Slot),
    NotLeader { hint: Option<NodeId> },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ElectionOutcome {
    /// Quorum reached; these accept requests re-propose recovered slots.
    Elected(Vec<P2a>),
    Pending,
    Aborted(Ballot),
}

#[derive(Debug)]
pub struct PaxosEngine {
    id: NodeId,
    n: usize,
    promised: Ballot,
    role: Role,
    log: Vec<Option<LogEntry>>,
    committed_prefix: u64,
    executed: u64,
    next_slot: u64,
    /// Commit watermark announced by the leader of a ballot, and how far it
    /// has been scanned.
    watermark: Option<(Ballot, u64, u64)>,
    in_flight: HashMap<(u64, u64), Slot>,
    observe: bool,
    events: Vec<EngineEvent>,
    pub stats: EngineStats,
}

impl PaxosEngine {
    pub fn new(id: NodeId, n: usize) -> Self {
        PaxosEngine {
            id,
            n,
            promised: Ballot::ZERO,
            role: Role::Follower,
            log: Vec::new(),
            committed_prefix: 0,
            executed: 0,
            next_slot: 0,
            watermark: None,
            in_flight: HashMap::new(),
            observe: false,
            events: Vec::new(),
            stats: EngineStats::default(),
        }
    }

    /// Record [`EngineEvent`]s for [`Self::take_events`].
    pub fn set_observe(&mut self, on: bool) {
        self.observe = on;
    }

    pub fn take_events(&mut self) -> Vec<EngineEvent> {
        std::mem::take(&mut self.events)
    }

    fn emit(&mut self, ev: EngineEvent) {
        if self.observe {
            self.events.push(ev);
        }
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn cluster_size(&self) -> usize {
        self.n
    }

    /// Highest ballot seen.
    pub fn ballot(&self) -> Ballot {
        self.promised
    }

    pub fn role(&self) -> &Role {
        &self.role
    }

    pub fn is_leader(&self) -> bool {
        self.role == Role::Leader
    }

    pub fn is_candidate(&self) -> bool {
        matches!(self.role, Role::Candidate(_))
    }

    pub fn leader_hint(&self) -> Option<NodeId> {
        match self.role {
            Role::Leader => Some(self.id),
            _ if self.promised.round > 0 && self.promised.proposer != self.id => Some(self.promised.proposer),
            _ => None,
        }
    }

    /// Every slot below this one is committed.
    pub fn committed_prefix(&self) -> Slot {
        Slot(self.committed_prefix)
    }

    /// Every slot below this one has been handed out for execution.
    pub fn executed_prefix(&self) -> Slot {
        Slot(self.executed)
    }

    pub fn next_slot(&self) -> Slot {
        Slot(self.next_slot)
    }

    pub fn entry(&self, slot: Slot) -> Option<&LogEntry> {
        self.log.get(slot.0 as usize).and_then(Option::as_ref)
    }

    pub fn log_len(&self) -> usize {
        self.log.len()
    }

    fn entry_mut(&mut self, slot: Slot) -> &mut Option<LogEntry> {
        let idx = slot.0 as usize;
        if idx >= self.log.len() {
            self.log.resize_with(idx + 1, || None);
        }
        &mut self.log[idx]
    }

    fn commit_up_to_for(&self, slot: Slot) -> Option<Slot> {
        let top = self.committed_prefix.min(slot.0);
        top.checked_sub(1).map(Slot)
    }

    /// Adopts a higher ballot, stepping down if leading or campaigning.
    /// Returns true when this changed the role.
    pub fn observe_ballot(&mut self, ballot: Ballot) -> bool {
        if ballot <= self.promised {
            return false;
        }
        self.promised = ballot;
        self.emit(EngineEvent::Promised(ballot));
        if self.role != Role::Follower {
            self.role = Role::Follower;
            self.in_flight.clear();
            self.emit(EngineEvent::SteppedDown(ballot));
            return true;
        }
        false
    }

    /// Begins phase 1 with a ballot one round above anything seen.
    pub fn start_election(&mut self) -> P1a {
        let ballot = Ballot { round: self.promised.round + 1, proposer: self.id };
        self.promised = ballot;
        self.emit(EngineEvent::Promised(ballot));
        let from_slot = Slot(self.committed_prefix);
        let recovered = self
            .log
            .iter()
            .skip(from_slot.0 as usize)
            .flatten()
            .map(|e| (e.slot.0, (e.ballot, e.command.clone())))
            .collect();
        self.in_flight.clear();
        self.role = Role::Candidate(Candidacy {
            ballot,
            from_slot,
            promises: BTreeSet::from([self.id]),
            recovered,
        });
        P1a { ballot, from_slot }
    }

    /// Current candidacy ballot, if campaigning.
    pub fn candidate_ballot(&self) -> Option<Ballot> {
        match &self.role {
            Role::Candidate(c) => Some(c.ballot),
            _ => None,
        }
    }

    /// Phase-1 request for a retry of the current candidacy.
    pub fn current_p1a(&self) -> Option<P1a> {
        match &self.role {
            Role::Candidate(c) => Some(P1a { ballot: c.ballot, from_slot: c.from_slot }),
            _ => None,
        }
    }

    pub fn on_p1a(&mut self, msg: &P1a) -> P1b {
        if msg.ballot < self.promised {
            return P1b { ballot: self.promised, voter: self.id, accepted: Vec::new() };
        }
        self.observe_ballot(msg.ballot);
        let accepted = self
            .log
            .iter()
            .skip(msg.from_slot.0 as usize)
            .flatten()
            .map(|e| AcceptedEntry { slot: e.slot, ballot: e.ballot, command: e.command.clone() })
            .collect();
        P1b { ballot: msg.ballot, voter: self.id, accepted }
    }

    /// Feeds promises for `ballot`. Returns re-proposals when this completes
    /// a majority.
    pub fn on_promises(
        &mut self,
        ballot: Ballot,
        voters: impl IntoIterator<Item = NodeId>,
        accepted: &[AcceptedEntry],
    ) -> Option<Vec<P2a>> {
        let quorum = majority(self.n);
        let Role::Candidate(c) = &mut self.role else {
            return None;
        };
        if c.ballot != ballot {
            return None;
        }
        c.promises.extend(voters);
        for e in accepted {
            if e.slot < c.from_slot {
                continue;
            }
            let better = c.recovered.get(&e.slot.0).is_none_or(|(b, _)| e.ballot > *b);
            if better {
                c.recovered.insert(e.slot.0, (e.ballot, e.command.clone()));
            }
        }
        if c.promises.len() >= quorum {
            Some(self.become_leader())
        } else {
            None
        }
    }

    /// Evaluates a set of phase-1 replies for the current candidacy.
    pub fn on_p1b_quorum(&mut self, replies: &[P1b]) -> ElectionOutcome {
        let Some(ballot) = self.candidate_ballot() else {
            return ElectionOutcome::Pending;
        };
        if let Some(higher) = replies.iter().map(|r| r.ballot).filter(|b| *b > ballot).max() {
            self.observe_ballot(higher);
            return ElectionOutcome::Aborted(higher);
        }
        let mut outcome = ElectionOutcome::Pending;
        for r in replies.iter().filter(|r| r.ballot == ballot) {
            if let Some(p2as) = self.on_promises(ballot, [r.voter], &r.accepted) {
                outcome = ElectionOutcome::Elected(p2as);
            }
        }
        outcome
    }

    fn become_leader(&mut self) -> Vec<P2a> {
        let Role::Candidate(c) = std::mem::replace(&mut self.role, Role::Leader) else {
            unreachable!("only candidates become leaders");
        };
        let ballot = c.ballot;
        self.emit(EngineEvent::BecameLeader(ballot));
        let end = c
            .recovered
            .keys()
            .next_back()
            .map_or(c.from_slot.0, |s| s + 1)
            .max(self.log.len() as u64)
            .max(c.from_slot.0);
        let mut out = Vec::new();
        for s in c.from_slot.0..end {
            let slot = Slot(s);
            if self.entry(slot).is_some_and(LogEntry::is_committed) {
                continue;
            }
            let command = c.recovered.get(&s).map_or_else(|| Arc::new(Command::noop()), |(_, cmd)| cmd.clone());
            if !command.is_noop() {
                self.in_flight.insert(command.request_id(), slot);
            }
            out.push(self.accept_own(slot, ballot, command));
        }
        self.next_slot = end;
        if out.is_empty() {
            let slot = Slot(self.next_slot);
            self.next_slot += 1;
            out.push(self.accept_own(slot, ballot, Arc::new(Command::noop())));
        }
        out
    }

    fn accept_own(&mut self, slot: Slot, ballot: Ballot, command: SharedCommand) -> P2a {
        let mut entry = LogEntry::accepted(slot, ballot, command.clone());
        entry.voters.insert(self.id);
        *self.entry_mut(slot) = Some(entry);
        self.emit(EngineEvent::Accepted { slot, ballot });
        P2a { ballot, slot, command, commit_up_to: self.commit_up_to_for(slot) }
    }

    /// Assigns the next slot to a client command when leading.
    pub fn propose(&mut self, command: SharedCommand) -> ProposeOutcome {
        if !self.is_leader() {
            return ProposeOutcome::NotLeader { hint: self.leader_hint() };
        }
        let rid = command.request_id();
        if !command.is_noop() {
            if let Some(&slot) = self.in_flight.get(&rid) {
                return ProposeOutcome::InFlight(slot);
            }
        }
        let slot = Slot(self.next_slot);
        self.next_slot += 1;
        if !command.is_noop() {
            self.in_flight.insert(rid, slot);
        }
        let ballot = self.promised;
        ProposeOutcome::Proposed(self.accept_own(slot, ballot, command))
    }

    /// Accept request for an uncommitted slot of the current leadership,
    /// used for retries.
    pub fn p2a_for(&self, slot: Slot) -> Option<P2a> {
        if !self.is_leader() {
            return None;
        }
        let e = self.entry(slot)?;
        if e.is_committed() || e.ballot != self.promised {
            return None;
        }
        Some(P2a { ballot: e.ballot, slot, command: e.command.clone(), commit_up_to: self.commit_up_to_for(slot) })
    }

    pub fn on_p2a(&mut self, msg: &P2a) -> P2b {
        let reply = if msg.ballot < self.promised {
            P2b { ballot: msg.ballot, slot: msg.slot, voter: self.id, reject_ballot: Some(self.promised) }
        } else {
            self.observe_ballot(msg.ballot);
            self.accept(msg.slot, msg.ballot, msg.command.clone());
            P2b { ballot: msg.ballot, slot: msg.slot, voter: self.id, reject_ballot: None }
        };
        if let Some(c) = msg.commit_up_to {
            self.apply_watermark(msg.ballot, c);
        }
        reply
    }

    fn accept(&mut self, slot: Slot, ballot: Ballot, command: SharedCommand) {
        let committed_here = match self.entry(slot) {
            Some(e) if e.is_committed() => {
                if e.command != command {
                    self.stats.conflicting_commits += 1;
                }
                true
            }
            _ => false,
        };
        if !committed_here {
            let voters = match self.entry_mut(slot).take() {
                Some(e) if e.ballot == ballot => e.voters,
                _ => BTreeSet::new(),
            };
            let mut entry = LogEntry::accepted(slot, ballot, command);
            entry.voters = voters;
            *self.entry_mut(slot) = Some(entry);
        }
        self.emit(EngineEvent::Accepted { slot, ballot });
        if let Some((b, mark, _)) = self.watermark {
            if b == ballot && slot.0 <= mark {
                self.commit(slot);
            }
        }
    }

    fn apply_watermark(&mut self, ballot: Ballot, commit_up_to: Slot) {
        let start = match self.watermark {
            Some((b, mark, scanned)) if b == ballot => {
                if commit_up_to.0 <= mark {
                    return;
                }
                scanned.max(self.committed_prefix)
            }
            _ => self.committed_prefix,
        };
        let end = commit_up_to.0.min(self.log.len().saturating_sub(1) as u64);
        let mut s = start;
        while s <= end {
            if self.entry(Slot(s)).is_some_and(|e| e.ballot == ballot && !e.is_committed()) {
                self.commit(Slot(s));
            }
            s += 1;
        }
        self.watermark = Some((ballot, commit_up_to.0, end + 1));
    }

    pub fn on_p3(&mut self, msg: &P3) {
        match self.entry_mut(msg.slot) {
            Some(e) if e.is_committed() => {
                if e.command != msg.command {
                    self.stats.conflicting_commits += 1;
                }
            }
            Some(e) => {
                e.command = msg.command.clone();
                self.commit(msg.slot);
            }
            slot @ None => {
                *slot = Some(LogEntry::accepted(msg.slot, Ballot::ZERO, msg.command.clone()));
                self.commit(msg.slot);
            }
        }
    }

    /// Registers a phase-2 vote at the leader. Returns the slot when this
    /// vote completes its majority.
    pub fn on_vote(&mut self, slot: Slot, voter: NodeId, ballot: Ballot) -> Option<Slot> {
        if !self.is_leader() || ballot != self.promised {
            self.stats.dropped_votes += 1;
            return None;
        }
        let quorum = majority(self.n);
        let Some(entry) = self.log.get_mut(slot.0 as usize).and_then(Option::as_mut) else {
            self.stats.dropped_votes += 1;
            return None;
        };
        if entry.ballot != ballot {
            self.stats.dropped_votes += 1;
            return None;
        }
        if !entry.voters.insert(voter) {
            self.stats.duplicate_votes += 1;
            return None;
        }
        if entry.is_committed() || entry.voters.len() < quorum {
            return None;
        }
        let voters = entry.voters.clone();
        self.commit(slot);
        self.emit(EngineEvent::LeaderCommit { slot, ballot, voters });
        Some(slot)
    }

    fn commit(&mut self, slot: Slot) {
        let entry = self.log[slot.0 as usize].as_mut().expect("committing a missing slot");
        if entry.is_committed() {
            return;
        }
        entry.advance(EntryState::Committed);
        let command = entry.command.clone();
        self.emit(EngineEvent::Committed { slot, command });
        while self
            .log
            .get(self.committed_prefix as usize)
            .and_then(Option::as_ref)
            .is_some_and(LogEntry::is_committed)
        {
            self.committed_prefix += 1;
        }
    }

    /// Committed entries not yet executed, in slot order. Marks them
    /// executed.
    pub fn drain_ready(&mut self) -> Vec<LogEntry> {
        let mut out = Vec::new();
        while self.executed < self.committed_prefix {
            let entry = self.log[self.executed as usize].as_mut().expect("committed prefix is dense");
            let ready = entry.clone();
            entry.advance(EntryState::Executed);
            if !ready.command.is_noop() {
                self.in_flight.remove(&ready.command.request_id());
            }
            out.push(ready);
            self.executed += 1;
        }
        out
    }

    /// Commit notices for committed slots in `[from, committed_prefix)`.
    pub fn commit_notices(&self, from: Slot) -> Vec<P3> {
        (from.0..self.committed_prefix)
            .filter_map(|s| self.entry(Slot(s)))
            .map(|e| P3 { slot: e.slot, command: e.command.clone() })
            .collect()
    }

    /// Uncommitted slots proposed under the current leadership.
    pub fn open_slots(&self) -> Vec<Slot> {
        if !self.is_leader() {
            return Vec::new();
        }
        (self.committed_prefix..self.next_slot)
            .map(Slot)
            .filter(|&s| self.entry(s).is_some_and(|e| !e.is_committed() && e.ballot == self.promised))
            .collect()
    }
}
