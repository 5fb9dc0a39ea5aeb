//! Relay layer: random relay selection, relay-side fan-out and aggregation,
//! and the initiator's gray list.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet, VecDeque};
use std::time::Duration;

use rand::Rng;

use crate::config::RelayGroupConfig;
use crate::msg::{AcceptedEntry, AggregatedReply, Message, P1b, P2b, Phase, PigMsgId};
use crate::types::{Ballot, NodeId, SharedCommand, Slot, Time};

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum GrayListEvent {
    /// A relay failed to answer within the initiator's timeout.
    RelayTimeout,
    /// A relay answered.
    Responded,
}

/// Relays recently observed to be slow or dead, avoided during selection.
#[derive(Clone, Debug)]
pub struct GrayList {
    entries: BTreeMap<NodeId, Time>,
    duration: Duration,
    probe_probability: f64,
}

impl GrayList {
    pub fn new(duration: Duration, probe_probability: f64) -> Self {
        GrayList { entries: BTreeMap::new(), duration, probe_probability }
    }

    pub fn probe_probability(&self) -> f64 {
        self.probe_probability
    }

    pub fn is_listed(&self, node: NodeId, now: Time) -> bool {
        self.entries.get(&node).is_some_and(|&until| until > now)
    }

    pub fn update(&mut self, node: NodeId, event: GrayListEvent, now: Time) {
        match event {
            GrayListEvent::RelayTimeout => {
                self.entries.insert(node, now + self.duration);
            }
            GrayListEvent::Responded => {
                self.entries.remove(&node);
            }
        }
    }

    pub fn purge_expired(&mut self, now: Time) {
        self.entries.retain(|_, until| *until > now);
    }

    pub fn listed(&self, now: Time) -> Vec<NodeId> {
        self.entries.iter().filter(|(_, &u)| u > now).map(|(&n, _)| n).collect()
    }
}

/// Picks one relay per group, uniformly among members not on the gray list.
///
/// With probability `probe_probability` a group containing gray-listed
/// members draws from all members instead, so a recovered node can clear
/// itself. A group whose members are all gray-listed draws from all of them.
pub fn select_relays<R: Rng + ?Sized>(
    groups: &RelayGroupConfig,
    graylist: Option<&GrayList>,
    now: Time,
    rng: &mut R,
) -> Vec<NodeId> {
    groups
        .groups
        .iter()
        .map(|group| {
            let Some(gl) = graylist else {
                return group[rng.random_range(0..group.len())];
            };
            let eligible: Vec<NodeId> = group.iter().copied().filter(|&m| !gl.is_listed(m, now)).collect();
            let whole = eligible.is_empty()
                || (eligible.len() < group.len() && rng.random_bool(gl.probe_probability.clamp(0.0, 1.0)));
            if whole {
                group[rng.random_range(0..group.len())]
            } else {
                eligible[rng.random_range(0..eligible.len())]
            }
        })
        .collect()
}

/// A relay's collection state for one round.
#[derive(Clone, Debug)]
pub struct PendingAggregation {
    pub pig_id: PigMsgId,
    pub initiator: NodeId,
    pub phase: Phase,
    pub ballot: Ballot,
    pub slot: Slot,
    /// Peers the relay forwarded to.
    pub expected: BTreeSet<NodeId>,
    /// Nodes whose ack has been counted; includes the relay itself if it acked.
    pub acks: BTreeSet<NodeId>,
    pub reject: Option<Ballot>,
    pub deadline: Time,
    /// Acks from the group (relay included) needed before flushing early.
    pub threshold: usize,
    /// Global majority for the single-group shortcut, if enabled.
    pub shortcut: Option<usize>,
    accepted: BTreeMap<u64, (Ballot, SharedCommand)>,
}

impl PendingAggregation {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        pig_id: PigMsgId,
        initiator: NodeId,
        phase: Phase,
        ballot: Ballot,
        slot: Slot,
        expected: BTreeSet<NodeId>,
        deadline: Time,
        threshold: usize,
        shortcut: Option<usize>,
    ) -> Self {
        PendingAggregation {
            pig_id,
            initiator,
            phase,
            ballot,
            slot,
            expected,
            acks: BTreeSet::new(),
            reject: None,
            deadline,
            threshold,
            shortcut,
            accepted: BTreeMap::new(),
        }
    }

    /// Group size including the relay.
    pub fn group_size(&self) -> usize {
        self.expected.len() + 1
    }

    fn merge_entries(&mut self, entries: &[AcceptedEntry]) {
        for e in entries {
            let better = self.accepted.get(&e.slot.0).is_none_or(|(b, _)| e.ballot > *b);
            if better {
                self.accepted.insert(e.slot.0, (e.ballot, e.command.clone()));
            }
        }
    }

    /// Folds the relay's own reply.
    pub fn record_own(&mut self, relay: NodeId, reply: &Message) {
        self.record_reply(relay, reply);
    }

    /// Folds a member's reply. Replies from outside the group, or for a
    /// different round, are ignored.
    pub fn record(&mut self, from: NodeId, reply: &Message) {
        if self.expected.contains(&from) {
            self.record_reply(from, reply);
        }
    }

    fn record_reply(&mut self, from: NodeId, reply: &Message) {
        match reply {
            Message::P2b(P2b { ballot, slot, reject_ballot, .. }) if self.phase == Phase::Two && *slot == self.slot => {
                match reject_ballot {
                    Some(r) => self.reject = self.reject.max(Some(*r)),
                    None if *ballot == self.ballot => {
                        self.acks.insert(from);
                    }
                    None => {}
                }
            }
            Message::P1b(P1b { ballot, accepted, .. }) if self.phase == Phase::One => {
                if *ballot > self.ballot {
                    self.reject = self.reject.max(Some(*ballot));
                } else if *ballot == self.ballot {
                    self.acks.insert(from);
                    self.merge_entries(accepted);
                }
            }
            _ => {}
        }
    }

    pub fn ready(&self) -> bool {
        self.reject.is_some()
            || self.acks.len() >= self.threshold
            || self.shortcut.is_some_and(|maj| self.acks.len() + 1 >= maj)
    }

    pub fn flush(self, relay: NodeId) -> AggregatedReply {
        let mut members = self.expected.clone();
        members.insert(relay);
        let missing_voters = members.difference(&self.acks).copied().collect();
        AggregatedReply {
            pig_id: self.pig_id,
            phase: self.phase,
            ballot: self.ballot,
            slot: self.slot,
            ack_count: self.acks.len() as u32,
            missing_voters,
            reject_ballot: self.reject,
            accepted: self
                .accepted
                .into_iter()
                .map(|(s, (ballot, command))| AcceptedEntry { slot: Slot(s), ballot, command })
                .collect(),
        }
    }
}

/// Relay-side bookkeeping: open aggregations and duplicate suppression.
#[derive(Debug, Default)]
pub struct RelayTable {
    pending: HashMap<PigMsgId, PendingAggregation>,
    seen: HashSet<PigMsgId>,
    seen_order: VecDeque<(Time, PigMsgId)>,
}

/// How long a round id is remembered for duplicate suppression.
pub const SEEN_RETENTION: Duration = Duration::from_secs(10);

impl RelayTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// True the first time a round id is seen.
    pub fn first_sight(&mut self, id: PigMsgId, now: Time) -> bool {
        while let Some(&(t, old)) = self.seen_order.front() {
            if now.since(t) < SEEN_RETENTION {
                break;
            }
            self.seen_order.pop_front();
            self.seen.remove(&old);
        }
        if self.seen.insert(id) {
            self.seen_order.push_back((now, id));
            true
        } else {
            false
        }
    }

    pub fn open(&mut self, agg: PendingAggregation) {
        self.pending.insert(agg.pig_id, agg);
    }

    pub fn get_mut(&mut self, id: &PigMsgId) -> Option<&mut PendingAggregation> {
        self.pending.get_mut(id)
    }

    pub fn take(&mut self, id: &PigMsgId) -> Option<PendingAggregation> {
        self.pending.remove(id)
    }

    pub fn take_if_ready(&mut self, id: &PigMsgId) -> Option<PendingAggregation> {
        if self.pending.get(id).is_some_and(PendingAggregation::ready) {
            self.pending.remove(id)
        } else {
            None
        }
    }

    /// Removes and returns every aggregation whose deadline has passed.
    pub fn expire(&mut self, now: Time) -> Vec<PendingAggregation> {
        let due: Vec<PigMsgId> = self.pending.values().filter(|p| p.deadline <= now).map(|p| p.pig_id).collect();
        let mut out: Vec<PendingAggregation> = due.iter().filter_map(|id| self.pending.remove(id)).collect();
        out.sort_by_key(|p| p.pig_id);
        out
    }

    pub fn next_deadline(&self) -> Option<Time> {
        self.pending.values().map(|p| p.deadline).min()
    }

    pub fn open_count(&self) -> usize {
        self.pending.len()
    }

    pub fn clear(&mut self) {
        self.pending.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::partition_followers;
    use crate::types::Command;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn id(seq: u64) -> PigMsgId {
        PigMsgId { initiator: NodeId(0), sequence: seq }
    }

    fn agg(threshold: usize, shortcut: Option<usize>) -> PendingAggregation {
        PendingAggregation::new(
            id(1),
            NodeId(0),
            Phase::Two,
            Ballot::new(1, 0),
            Slot(5),
            [2, 3, 4].map(NodeId).into(),
            Time::from_millis(50),
            threshold,
            shortcut,
        )
    }

    fn ack(voter: u32) -> Message {
        Message::P2b(P2b { ballot: Ballot::new(1, 0), slot: Slot(5), voter: NodeId(voter), reject_ballot: None })
    }

    #[test]
    fn aggregation_waits_for_threshold() {
        let mut a = agg(3, None);
        a.record_own(NodeId(1), &ack(1));
        a.record(NodeId(2), &ack(2));
        assert!(!a.ready());
        a.record(NodeId(9), &ack(9));
        assert!(!a.ready());
        a.record(NodeId(3), &ack(3));
        assert!(a.ready());
        let r = a.flush(NodeId(1));
        assert_eq!(r.ack_count, 3);
        assert_eq!(r.missing_voters, vec![NodeId(4)]);
    }

    #[test]
    fn rejection_flushes_immediately() {
        let mut a = agg(4, None);
        a.record(
            NodeId(3),
            &Message::P2b(P2b { ballot: Ballot::new(1, 0), slot: Slot(5), voter: NodeId(3), reject_ballot: Some(Ballot::new(4, 2)) }),
        );
        assert!(a.ready());
        assert_eq!(a.flush(NodeId(1)).reject_ballot, Some(Ballot::new(4, 2)));
    }

    #[test]
    fn shortcut_counts_the_leader() {
        // four followers in one group: relay + one peer + leader is a majority of 5
        let mut a = agg(4, Some(3));
        a.record_own(NodeId(1), &ack(1));
        assert!(!a.ready());
        a.record(NodeId(2), &ack(2));
        assert!(a.ready());
    }

    #[test]
    fn phase_one_merges_highest_ballot() {
        let mut a = PendingAggregation::new(
            id(2),
            NodeId(0),
            Phase::One,
            Ballot::new(5, 0),
            Slot(0),
            [2].map(NodeId).into(),
            Time::ZERO,
            2,
            None,
        );
        let low = Arc::new(Command::put(1, 1, "a", "x"));
        let high = Arc::new(Command::put(1, 2, "a", "y"));
        let p1b = |voter, b, cmd: &SharedCommand| {
            Message::P1b(P1b {
                ballot: Ballot::new(5, 0),
                voter: NodeId(voter),
                accepted: vec![AcceptedEntry { slot: Slot(3), ballot: b, command: cmd.clone() }],
            })
        };
        a.record_own(NodeId(1), &p1b(1, Ballot::new(4, 1), &high));
        a.record(NodeId(2), &p1b(2, Ballot::new(2, 1), &low));
        let r = a.flush(NodeId(1));
        assert_eq!(r.ack_count, 2);
        assert_eq!(r.accepted.len(), 1);
        assert_eq!(r.accepted[0].command, high);
    }

    #[test]
    fn duplicate_round_ids_are_suppressed_then_forgotten() {
        let mut t = RelayTable::new();
        assert!(t.first_sight(id(1), Time::ZERO));
        assert!(!t.first_sight(id(1), Time::from_millis(10)));
        assert!(t.first_sight(id(1), Time::from_millis(20_000)));
    }

    #[test]
    fn expire_returns_due_rounds() {
        let mut t = RelayTable::new();
        t.open(agg(3, None));
        assert!(t.expire(Time::from_millis(49)).is_empty());
        assert_eq!(t.next_deadline(), Some(Time::from_millis(50)));
        assert_eq!(t.expire(Time::from_millis(50)).len(), 1);
        assert_eq!(t.open_count(), 0);
    }

    #[test]
    fn selection_avoids_graylisted() {
        let groups = partition_followers(7, 2, NodeId(0)).unwrap();
        let mut gl = GrayList::new(Duration::from_secs(5), 0.0);
        gl.update(NodeId(1), GrayListEvent::RelayTimeout, Time::ZERO);
        gl.update(NodeId(2), GrayListEvent::RelayTimeout, Time::ZERO);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let relays = select_relays(&groups, Some(&gl), Time::from_millis(1), &mut rng);
            assert_eq!(relays[0], NodeId(3));
        }
        // expired entries no longer count
        assert!(!gl.is_listed(NodeId(1), Time::from_millis(5000)));
    }

    #[test]
    fn fully_graylisted_group_still_gets_a_relay() {
        let groups = partition_followers(4, 3, NodeId(0)).unwrap();
        let mut gl = GrayList::new(Duration::from_secs(5), 0.0);
        gl.update(NodeId(2), GrayListEvent::RelayTimeout, Time::ZERO);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let relays = select_relays(&groups, Some(&gl), Time::ZERO, &mut rng);
        assert_eq!(relays, vec![NodeId(1), NodeId(2), NodeId(3)]);
    }

    #[test]
    fn response_clears_graylist() {
        let mut gl = GrayList::new(Duration::from_secs(5), 0.05);
        gl.update(NodeId(4), GrayListEvent::RelayTimeout, Time::ZERO);
        assert_eq!(gl.listed(Time::ZERO), vec![NodeId(4)]);
        gl.update(NodeId(4), GrayListEvent::Responded, Time::from_millis(1));
        assert!(gl.listed(Time::ZERO).is_empty());
    }
}
