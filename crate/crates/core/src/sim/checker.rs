use std::collections::{BTreeMap, HashMap};
use std::fmt;

use crate::engine::EngineEvent;
use crate::types::{majority, Ballot, NodeId, SharedCommand, Time};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub at: Time,
    pub invariant: &'static str,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} violated at t={}us: {}", self.invariant, self.at.as_micros(), self.detail)
    }
}

/// Online checker fed with every replica's engine events.
#[derive(Debug)]
pub struct SafetyChecker {
    n: usize,
    chosen: BTreeMap<u64, SharedCommand>,
    /// Nodes that accepted a (slot, ballot), as a bitmask.
    accepted: HashMap<(u64, Ballot), u128>,
    promised: Vec<Ballot>,
    violations: Vec<Violation>,
    commits_seen: u64,
}

impl SafetyChecker {
    pub fn new(n: usize) -> Self {
        assert!(n <= 128, "checker tracks at most 128 nodes");
        SafetyChecker {
            n,
            chosen: BTreeMap::new(),
            accepted: HashMap::new(),
            promised: vec![Ballot::ZERO; n],
            violations: Vec::new(),
            commits_seen: 0,
        }
    }

    fn fail(&mut self, at: Time, invariant: &'static str, detail: String) {
        self.violations.push(Violation { at, invariant, detail });
    }

    pub fn observe(&mut self, at: Time, node: NodeId, ev: &EngineEvent) {
        match ev {
            EngineEvent::Promised(b) => {
                let last = &mut self.promised[node.index()];
                if *b < *last {
                    let detail = format!("node {node} promised {b:?} after {last:?}");
                    self.fail(at, "monotone-ballots", detail);
                } else {
                    *last = *b;
                }
            }
            EngineEvent::Accepted { slot, ballot } => {
                *self.accepted.entry((slot.0, *ballot)).or_default() |= 1u128 << node.0;
            }
            EngineEvent::Committed { slot, command } => {
                self.commits_seen += 1;
                match self.chosen.get(&slot.0) {
                    Some(prev) if prev != command => {
                        let detail = format!("slot {slot} committed {command:?} at node {node}, earlier {prev:?}");
                        self.fail(at, "single-value-per-slot", detail);
                    }
                    Some(_) => {}
                    None => {
                        self.chosen.insert(slot.0, command.clone());
                    }
                }
            }
            EngineEvent::LeaderCommit { slot, ballot, voters } => {
                if voters.len() < majority(self.n) {
                    let detail = format!("slot {slot} committed with {} voters", voters.len());
                    self.fail(at, "quorum", detail);
                }
                let mask = self.accepted.get(&(slot.0, *ballot)).copied().unwrap_or(0);
                let phantom: Vec<NodeId> = voters.iter().copied().filter(|v| mask & (1u128 << v.0) == 0).collect();
                if !phantom.is_empty() {
                    let detail = format!("slot {slot} ballot {ballot:?} counted votes from {phantom:?} that never accepted");
                    self.fail(at, "vote-counting", detail);
                }
            }
            EngineEvent::BecameLeader(_) | EngineEvent::SteppedDown(_) => {}
        }
    }

    /// Checks one replica's executed log against the chosen values.
    pub fn check_executed<'a>(
        &mut self,
        at: Time,
        node: NodeId,
        executed: impl IntoIterator<Item = (u64, &'a SharedCommand)>,
    ) {
        for (expected, (slot, cmd)) in (0u64..).zip(executed) {
            if slot != expected {
                self.fail(at, "agreement", format!("node {node} executed slot {slot} before slot {expected}"));
                return;
            }
            if self.chosen.get(&slot).is_some_and(|c| c != cmd) {
                self.fail(at, "agreement", format!("node {node} executed a different command at slot {slot}"));
                return;
            }
        }
    }

    pub fn chosen(&self) -> &BTreeMap<u64, SharedCommand> {
        &self.chosen
    }

    pub fn commits_seen(&self) -> u64 {
        self.commits_seen
    }

    pub fn violations(&self) -> &[Violation] {
        &self.violations
    }

    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{Command, Slot};
    use std::collections::BTreeSet;
    use std::sync::Arc;

    #[test]
    fn detects_conflicting_commits() {
        let mut c = SafetyChecker::new(3);
        let a = Arc::new(Command::put(1, 1, "k", "a"));
        let b = Arc::new(Command::put(1, 2, "k", "b"));
        c.observe(Time::ZERO, NodeId(0), &EngineEvent::Committed { slot: Slot(0), command: a.clone() });
        c.observe(Time::ZERO, NodeId(1), &EngineEvent::Committed { slot: Slot(0), command: a });
        assert!(c.is_clean());
        c.observe(Time::from_millis(1), NodeId(2), &EngineEvent::Committed { slot: Slot(0), command: b });
        assert_eq!(c.violations()[0].invariant, "single-value-per-slot");
    }

    #[test]
    fn detects_phantom_votes() {
        let mut c = SafetyChecker::new(3);
        let b = Ballot::new(1, 0);
        c.observe(Time::ZERO, NodeId(0), &EngineEvent::Accepted { slot: Slot(0), ballot: b });
        c.observe(Time::ZERO, NodeId(1), &EngineEvent::Accepted { slot: Slot(0), ballot: b });
        let ok = EngineEvent::LeaderCommit { slot: Slot(0), ballot: b, voters: BTreeSet::from([NodeId(0), NodeId(1)]) };
        c.observe(Time::ZERO, NodeId(0), &ok);
        assert!(c.is_clean());
        let bad = EngineEvent::LeaderCommit { slot: Slot(0), ballot: b, voters: BTreeSet::from([NodeId(0), NodeId(2)]) };
        c.observe(Time::ZERO, NodeId(0), &bad);
        assert_eq!(c.violations()[0].invariant, "vote-counting");
    }

    #[test]
    fn detects_ballot_regression() {
        let mut c = SafetyChecker::new(3);
        c.observe(Time::ZERO, NodeId(1), &EngineEvent::Promised(Ballot::new(3, 0)));
        c.observe(Time::ZERO, NodeId(1), &EngineEvent::Promised(Ballot::new(2, 2)));
        assert_eq!(c.violations()[0].invariant, "monotone-ballots");
    }
}
