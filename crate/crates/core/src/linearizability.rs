//! Per-key linearizability checking of client histories against a register
//! model, by depth-first search over candidate linearizations with
//! memoization of visited states.

use std::collections::{BTreeMap, HashSet};

use bytes::Bytes;
use thiserror::Error;

use crate::msg::ReplyOutcome;
use crate::sim::HistoryOp;
use crate::types::Op;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Action {
    Write(Bytes),
    /// A read and the value it returned.
    Read(Option<Bytes>),
}

/// One operation on a single key. `response` is `None` while pending.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Operation {
    pub key: Bytes,
    pub action: Action,
    pub invoke: u64,
    pub response: Option<u64>,
}

impl Operation {
    /// Converts a simulator history entry; redirects are not results, so
    /// those entries count as pending.
    pub fn from_history(h: &HistoryOp) -> Option<Self> {
        let (response, action) = match (&h.completed, h.op) {
            (_, Op::Noop) => return None,
            (None, Op::Put) => (None, Action::Write(h.value.clone())),
            (None, Op::Get) => (None, Action::Read(None)),
            (Some((t, out)), Op::Put) => match out {
                ReplyOutcome::Stored => (Some(t.as_micros()), Action::Write(h.value.clone())),
                _ => (None, Action::Write(h.value.clone())),
            },
            (Some((t, out)), Op::Get) => match out {
                ReplyOutcome::Value(v) => (Some(t.as_micros()), Action::Read(Some(v.clone()))),
                ReplyOutcome::Absent => (Some(t.as_micros()), Action::Read(None)),
                _ => (None, Action::Read(None)),
            },
        };
        Some(Operation { key: h.key.clone(), action, invoke: h.invoked.as_micros(), response })
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("history for key {key:?} ({ops} operations) is not linearizable")]
pub struct NonLinearizable {
    pub key: Bytes,
    pub ops: usize,
}

/// Checks every key independently. Pending reads are ignored; pending
/// writes may or may not have taken effect.
pub fn check(ops: impl IntoIterator<Item = Operation>) -> Result<(), NonLinearizable> {
    let mut by_key: BTreeMap<Bytes, Vec<Operation>> = BTreeMap::new();
    for op in ops {
        if op.response.is_none() && matches!(op.action, Action::Read(_)) {
            continue;
        }
        by_key.entry(op.key.clone()).or_default().push(op);
    }
    for (key, ops) in by_key {
        if !check_key(&ops) {
            return Err(NonLinearizable { key, ops: ops.len() });
        }
    }
    Ok(())
}

pub fn check_history(history: &[HistoryOp]) -> Result<(), NonLinearizable> {
    check(history.iter().filter_map(Operation::from_history))
}

fn check_key(ops: &[Operation]) -> bool {
    let mut ops: Vec<&Operation> = ops.iter().collect();
    ops.sort_by_key(|o| (o.invoke, o.response.unwrap_or(u64::MAX)));
    let required = ops.iter().filter(|o| o.response.is_some()).count();
    let mut search = Search { ops: &ops, done: vec![false; ops.len()], seen: HashSet::new() };
    search.run(None, required)
}

struct Search<'a> {
    ops: &'a [&'a Operation],
    done: Vec<bool>,
    seen: HashSet<(Vec<bool>, Option<Bytes>)>,
}

impl Search<'_> {
    fn run(&mut self, state: Option<Bytes>, remaining: usize) -> bool {
        if remaining == 0 {
            return true;
        }
        if !self.seen.insert((self.done.clone(), state.clone())) {
            return false;
        }
        // an operation can go next only if it was invoked before every
        // outstanding operation's response
        let horizon = self
            .ops
            .iter()
            .zip(&self.done)
            .filter(|(_, d)| !**d)
            .filter_map(|(o, _)| o.response)
            .min()
            .unwrap_or(u64::MAX);
        for i in 0..self.ops.len() {
            if self.done[i] || self.ops[i].invoke > horizon {
                continue;
            }
            let op = self.ops[i];
            let next = match &op.action {
                Action::Write(v) => Some(v.clone()),
                Action::Read(r) => {
                    if *r != state {
                        continue;
                    }
                    state.clone()
                }
            };
            self.done[i] = true;
            let counted = usize::from(op.response.is_some());
            if self.run(next, remaining - counted) {
                return true;
            }
            self.done[i] = false;
        }
        false
    }
}
