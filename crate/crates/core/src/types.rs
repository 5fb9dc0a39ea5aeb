//! Domain types shared by every layer: node identity, ballots, slots,
//! client commands, and replicated log entries.

use std::collections::BTreeSet;
use std::fmt;
use std::ops::{Add, Sub};
use std::sync::Arc;
use std::time::Duration;

use bytes::Bytes;
use serde::{Deserialize, Serialize};

/// Identity of a cluster member, `0 <= id < N`.
#[derive(
    Copy, Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

/// Leadership epoch. Ordered by round, ties broken by proposer id.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Ballot {
    pub round: u64,
    pub proposer: NodeId,
}

impl Ballot {
    pub const ZERO: Ballot = Ballot { round: 0, proposer: NodeId(0) };

    pub fn new(round: u64, proposer: u32) -> Self {
        Ballot { round, proposer: NodeId(proposer) }
    }
}

impl fmt::Display for Ballot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.round, self.proposer.0)
    }
}

/// Position in the replicated log.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Slot(pub u64);

impl fmt::Display for Slot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub enum Op {
    Put,
    Get,
    /// Gap filler proposed by a new leader for slots nobody reported.
    Noop,
}

/// A client request as it travels through the log.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Command {
    pub op: Op,
    pub key: Bytes,
    pub value: Bytes,
    pub client_id: u64,
    pub request_seq: u64,
}

impl Command {
    pub fn put(client_id: u64, request_seq: u64, key: impl Into<Bytes>, value: impl Into<Bytes>) -> Self {
        Command { op: Op::Put, key: key.into(), value: value.into(), client_id, request_seq }
    }

    pub fn get(client_id: u64, request_seq: u64, key: impl Into<Bytes>) -> Self {
        Command { op: Op::Get, key: key.into(), value: Bytes::new(), client_id, request_seq }
    }

    pub fn noop() -> Self {
        Command { op: Op::Noop, key: Bytes::new(), value: Bytes::new(), client_id: 0, request_seq: 0 }
    }

    pub fn is_noop(&self) -> bool {
        self.op == Op::Noop
    }

    /// `(client_id, request_seq)` identifies a client request.
    pub fn request_id(&self) -> (u64, u64) {
        (self.client_id, self.request_seq)
    }
}

pub type SharedCommand = Arc<Command>;

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EntryState {
    Accepted,
    Committed,
    Executed,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LogEntry {
    pub slot: Slot,
    pub ballot: Ballot,
    pub command: SharedCommand,
    /// Only populated at the leader that proposed this entry.
    pub voters: BTreeSet<NodeId>,
    pub state: EntryState,
}

impl LogEntry {
    pub fn accepted(slot: Slot, ballot: Ballot, command: SharedCommand) -> Self {
        LogEntry { slot, ballot, command, voters: BTreeSet::new(), state: EntryState::Accepted }
    }

    pub fn is_committed(&self) -> bool {
        self.state >= EntryState::Committed
    }

    /// Moves the state forward; backwards transitions are ignored.
    pub fn advance(&mut self, to: EntryState) {
        if to > self.state {
            self.state = to;
        }
    }
}

/// Majority quorum size, `floor(N/2) + 1`.
pub fn majority(n: usize) -> usize {
    n / 2 + 1
}

/// Virtual or wall-clock instant in microseconds since an arbitrary origin.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Time(pub u64);

impl Time {
    pub const ZERO: Time = Time(0);

    pub fn from_micros(us: u64) -> Self {
        Time(us)
    }

    pub fn from_millis(ms: u64) -> Self {
        Time(ms * 1_000)
    }

    pub fn as_micros(self) -> u64 {
        self.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / 1e6
    }

    pub fn since(self, earlier: Time) -> Duration {
        Duration::from_micros(self.0.saturating_sub(earlier.0))
    }
}

impl Add<Duration> for Time {
    type Output = Time;
    fn add(self, rhs: Duration) -> Time {
        Time(self.0 + rhs.as_micros() as u64)
    }
}

impl Sub<Time> for Time {
    type Output = Duration;
    fn sub(self, rhs: Time) -> Duration {
        self.since(rhs)
    }
}

impl fmt::Display for Time {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.6}s", self.as_secs_f64())
    }
}
