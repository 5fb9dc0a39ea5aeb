//! Replicated in-memory key-value state machine.

use std::collections::hash_map::DefaultHasher;
use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};

use bytes::Bytes;

use crate::msg::ReplyOutcome;
use crate::types::{Command, LogEntry, Op, Slot};

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
struct Session {
    last_seq: u64,
    reply: ReplyOutcome,
}

/// Result of applying one committed entry.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Applied {
    pub outcome: ReplyOutcome,
    /// The request was already applied in an earlier slot.
    pub duplicate: bool,
}

/// Fold of the committed log prefix. Requests are applied at most once per
/// `(client_id, request_seq)`; re-executions return the cached reply.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KvState {
    data: BTreeMap<Bytes, Bytes>,
    sessions: BTreeMap<u64, Session>,
    applied_up_to: u64,
}

impl KvState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Next slot to apply.
    pub fn applied_up_to(&self) -> Slot {
        Slot(self.applied_up_to)
    }

    pub fn get(&self, key: &[u8]) -> Option<&Bytes> {
        self.data.get(key)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The reply for a request that has already been applied, if any.
    pub fn cached_reply(&self, client_id: u64, request_seq: u64) -> Option<&ReplyOutcome> {
        self.sessions
            .get(&client_id)
            .filter(|s| s.last_seq == request_seq)
            .map(|s| &s.reply)
    }

    /// True when `request_seq` is at or below the client's last applied request.
    pub fn already_applied(&self, client_id: u64, request_seq: u64) -> bool {
        self.sessions.get(&client_id).is_some_and(|s| request_seq <= s.last_seq)
    }

    /// Applies the next committed entry.
    ///
    /// Panics if the entry is not committed or is not the next slot; the
    /// engine guarantees in-order delivery, so either is an internal bug.
    pub fn apply(&mut self, entry: &LogEntry) -> Applied {
        assert!(entry.is_committed(), "applying uncommitted slot {}", entry.slot);
        assert_eq!(
            entry.slot.0, self.applied_up_to,
            "out-of-order apply: expected slot {}, got {}",
            self.applied_up_to, entry.slot.0
        );
        self.applied_up_to += 1;
        self.apply_command(&entry.command)
    }

    fn apply_command(&mut self, cmd: &Command) -> Applied {
        if cmd.op == Op::Noop {
            return Applied { outcome: ReplyOutcome::Stored, duplicate: false };
        }
        if let Some(session) = self.sessions.get(&cmd.client_id) {
            if cmd.request_seq <= session.last_seq {
                let outcome = if cmd.request_seq == session.last_seq {
                    session.reply.clone()
                } else {
                    ReplyOutcome::Stored
                };
                return Applied { outcome, duplicate: true };
            }
        }
        let outcome = match cmd.op {
            Op::Put => {
                self.data.insert(cmd.key.clone(), cmd.value.clone());
                ReplyOutcome::Stored
            }
            Op::Get => match self.data.get(&cmd.key) {
                Some(v) => ReplyOutcome::Value(v.clone()),
                None => ReplyOutcome::Absent,
            },
            Op::Noop => unreachable!(),
        };
        self.sessions.insert(cmd.client_id, Session { last_seq: cmd.request_seq, reply: outcome.clone() });
        Applied { outcome, duplicate: false }
    }

    /// Deterministic digest of the full state, for cross-replica comparison.
    pub fn state_hash(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.data.hash(&mut h);
        self.sessions.hash(&mut h);
        self.applied_up_to.hash(&mut h);
        h.finish()
    }
}
