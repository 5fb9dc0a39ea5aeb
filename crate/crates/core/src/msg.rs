//! Protocol messages exchanged between replicas and clients.

use bytes::Bytes;

use crate::types::{Ballot, NodeId, SharedCommand, Slot};

/// Phase-1 leadership proposal.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct P1a {
    pub ballot: Ballot,
    /// First slot the candidate has not committed; voters report every
    /// accepted entry at or above it.
    pub from_slot: Slot,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AcceptedEntry {
    pub slot: Slot,
    pub ballot: Ballot,
    pub command: SharedCommand,
}

/// Phase-1 reply. A ballot above the candidate's is a rejection.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct P1b {
    pub ballot: Ballot,
    pub voter: NodeId,
    pub accepted: Vec<AcceptedEntry>,
}

/// Phase-2 accept request carrying the phase-3 commit watermark.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct P2a {
    pub ballot: Ballot,
    pub slot: Slot,
    pub command: SharedCommand,
    /// Every slot `<= commit_up_to` is committed at the sender.
    pub commit_up_to: Option<Slot>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct P2b {
    pub ballot: Ballot,
    pub slot: Slot,
    pub voter: NodeId,
    /// Present iff the voter has promised a higher ballot.
    pub reject_ballot: Option<Ballot>,
}

impl P2b {
    pub fn is_ack(&self) -> bool {
        self.reject_ballot.is_none()
    }
}

/// Standalone commit notification.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct P3 {
    pub slot: Slot,
    pub command: SharedCommand,
}

/// Identifies one relay round at its initiator.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PigMsgId {
    pub initiator: NodeId,
    pub sequence: u64,
}

/// Relayed broadcast. Sent by the initiator with the relay's group listed;
/// forwarded copies and member replies carry an empty member list.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PigEnvelope {
    pub pig_id: PigMsgId,
    pub group_members: Vec<NodeId>,
    pub payload: Box<Message>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub enum Phase {
    One,
    Two,
}

/// A relay's compressed group response.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AggregatedReply {
    pub pig_id: PigMsgId,
    pub phase: Phase,
    pub ballot: Ballot,
    /// The accepted slot (phase 2) or the candidate's `from_slot` (phase 1).
    pub slot: Slot,
    pub ack_count: u32,
    /// Group members whose ack is absent, sorted.
    pub missing_voters: Vec<NodeId>,
    pub reject_ballot: Option<Ballot>,
    /// Phase 1 only: highest-ballot accepted entry per slot over the group.
    pub accepted: Vec<AcceptedEntry>,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum ReplyOutcome {
    /// A Put was applied.
    Stored,
    /// A Get found a value.
    Value(Bytes),
    /// A Get found nothing.
    Absent,
    NotLeader { hint: Option<NodeId> },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClientReply {
    pub client_id: u64,
    pub request_seq: u64,
    pub outcome: ReplyOutcome,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Message {
    P1a(P1a),
    P1b(P1b),
    P2a(P2a),
    P2b(P2b),
    P3(P3),
    Envelope(PigEnvelope),
    Aggregated(AggregatedReply),
    ClientRequest(SharedCommand),
    ClientReply(ClientReply),
}

/// Wire type tags.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(u8)]
pub enum MsgType {
    P1a = 1,
    P1b = 2,
    P2a = 3,
    P2b = 4,
    P3 = 5,
    PigEnvelope = 6,
    AggregatedReply = 7,
    ClientRequest = 8,
    ClientReply = 9,
}

impl MsgType {
    pub const ALL: [MsgType; 9] = [
        MsgType::P1a,
        MsgType::P1b,
        MsgType::P2a,
        MsgType::P2b,
        MsgType::P3,
        MsgType::PigEnvelope,
        MsgType::AggregatedReply,
        MsgType::ClientRequest,
        MsgType::ClientReply,
    ];

    pub fn from_u8(tag: u8) -> Option<MsgType> {
        Self::ALL.get(tag.wrapping_sub(1) as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            MsgType::P1a => "p1a",
            MsgType::P1b => "p1b",
            MsgType::P2a => "p2a",
            MsgType::P2b => "p2b",
            MsgType::P3 => "p3",
            MsgType::PigEnvelope => "envelope",
            MsgType::AggregatedReply => "aggregated",
            MsgType::ClientRequest => "client_request",
            MsgType::ClientReply => "client_reply",
        }
    }
}

/// Accounting buckets for handled-message counters.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Category {
    Client,
    Election,
    Replication,
    Commit,
}

impl Category {
    pub const ALL: [Category; 4] = [Category::Client, Category::Election, Category::Replication, Category::Commit];

    pub fn name(self) -> &'static str {
        match self {
            Category::Client => "client",
            Category::Election => "election",
            Category::Replication => "replication",
            Category::Commit => "commit",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl Message {
    pub fn msg_type(&self) -> MsgType {
        match self {
            Message::P1a(_) => MsgType::P1a,
            Message::P1b(_) => MsgType::P1b,
            Message::P2a(_) => MsgType::P2a,
            Message::P2b(_) => MsgType::P2b,
            Message::P3(_) => MsgType::P3,
            Message::Envelope(_) => MsgType::PigEnvelope,
            Message::Aggregated(_) => MsgType::AggregatedReply,
            Message::ClientRequest(_) => MsgType::ClientRequest,
            Message::ClientReply(_) => MsgType::ClientReply,
        }
    }

    /// Envelopes are classified by what they carry.
    pub fn category(&self) -> Category {
        match self {
            Message::P1a(_) | Message::P1b(_) => Category::Election,
            Message::P2a(_) | Message::P2b(_) => Category::Replication,
            Message::P3(_) => Category::Commit,
            Message::Envelope(env) => env.payload.category(),
            Message::Aggregated(agg) => match agg.phase {
                Phase::One => Category::Election,
                Phase::Two => Category::Replication,
            },
            Message::ClientRequest(_) | Message::ClientReply(_) => Category::Client,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn type_tags_round_trip() {
        for t in MsgType::ALL {
            assert_eq!(MsgType::from_u8(t as u8), Some(t));
        }
        assert_eq!(MsgType::from_u8(0), None);
        assert_eq!(MsgType::from_u8(10), None);
    }
}
