//! Bit-exact binary encoding.
//!
//! Every frame is a 32-bit big-endian length (counting the bytes that
//! follow it), a one-byte message type, then the type's fields in declared
//! order. Integers are fixed-width big-endian; byte strings carry a 16-bit
//! length; node sets are sorted lists with a 16-bit count; entry lists use a
//! 32-bit count. An envelope's payload is a complete nested frame.
//!
//! | field          | encoding                                     |
//! |----------------|----------------------------------------------|
//! | `NodeId`       | u32                                          |
//! | `Ballot`       | u64 round, u32 proposer                      |
//! | `Slot`         | u64                                          |
//! | optional slot  | u64, `u64::MAX` when absent                  |
//! | optional ballot| u8 flag (0/1), then ballot when 1            |
//! | `Command`      | u8 op (0 put, 1 get, 2 noop), key, value, u64 client, u64 seq |
//! | `Phase`        | u8 (1 or 2)                                  |
//! | reply outcome  | u8 (0 stored, 1 value + bytes, 2 absent, 3 not-leader + optional node) |

use std::sync::Arc;

use bytes::{Buf, BufMut, Bytes, BytesMut};
use thiserror::Error;

use crate::msg::*;
use crate::types::{Ballot, Command, NodeId, Op, Slot};

/// Largest frame accepted from the network.
pub const MAX_FRAME: usize = 16 << 20;

const NO_SLOT: u64 = u64::MAX;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WireError {
    #[error("malformed frame: declared length {declared} but {available} bytes follow")]
    LengthMismatch { declared: usize, available: usize },
    #[error("malformed frame: zero-length frame")]
    Empty,
    #[error("malformed frame: unknown message type {0}")]
    UnknownType(u8),
    #[error("malformed frame: truncated while reading {0}")]
    Truncated(&'static str),
    #[error("malformed frame: invalid {0}")]
    Invalid(&'static str),
    #[error("malformed frame: {0} trailing bytes")]
    Trailing(usize),
    #[error("malformed frame: length {0} exceeds the frame limit")]
    TooLarge(usize),
}

/// Encodes one message as a complete frame.
///
/// Panics if a key or value exceeds 65535 bytes.
pub fn encode(msg: &Message) -> Bytes {
    let mut buf = BytesMut::with_capacity(encoded_len(msg));
    encode_into(msg, &mut buf);
    buf.freeze()
}

pub fn encode_into(msg: &Message, buf: &mut BytesMut) {
    let body = body_len(msg);
    buf.reserve(4 + body);
    buf.put_u32(body as u32);
    buf.put_u8(msg.msg_type() as u8);
    put_body(msg, buf);
}

/// Size of the encoded frame in bytes, without encoding it.
pub fn encoded_len(msg: &Message) -> usize {
    4 + body_len(msg)
}

const BALLOT: usize = 12;
const NODE: usize = 4;
const SLOT: usize = 8;

fn command_len(c: &Command) -> usize {
    1 + 2 + c.key.len() + 2 + c.value.len() + 16
}

fn entries_len(entries: &[AcceptedEntry]) -> usize {
    4 + entries.iter().map(|e| SLOT + BALLOT + command_len(&e.command)).sum::<usize>()
}

fn opt_ballot_len(b: &Option<Ballot>) -> usize {
    1 + if b.is_some() { BALLOT } else { 0 }
}

fn body_len(msg: &Message) -> usize {
    1 + match msg {
        Message::P1a(_) => BALLOT + SLOT,
        Message::P1b(m) => BALLOT + NODE + entries_len(&m.accepted),
        Message::P2a(m) => BALLOT + SLOT + command_len(&m.command) + SLOT,
        Message::P2b(m) => BALLOT + SLOT + NODE + opt_ballot_len(&m.reject_ballot),
        Message::P3(m) => SLOT + command_len(&m.command),
        Message::Envelope(m) => NODE + 8 + 2 + NODE * m.group_members.len() + encoded_len(&m.payload),
        Message::Aggregated(m) => {
            NODE + 8
                + 1
                + BALLOT
                + SLOT
                + 4
                + 2
                + NODE * m.missing_voters.len()
                + opt_ballot_len(&m.reject_ballot)
                + entries_len(&m.accepted)
        }
        Message::ClientRequest(c) => command_len(c),
        Message::ClientReply(r) => {
            16 + 1
                + match &r.outcome {
                    ReplyOutcome::Value(v) => 2 + v.len(),
                    ReplyOutcome::NotLeader { hint } => 1 + if hint.is_some() { NODE } else { 0 },
                    ReplyOutcome::Stored | ReplyOutcome::Absent => 0,
                }
        }
    }
}

fn put_ballot(buf: &mut BytesMut, b: Ballot) {
    buf.put_u64(b.round);
    buf.put_u32(b.proposer.0);
}

fn put_opt_ballot(buf: &mut BytesMut, b: Option<Ballot>) {
    match b {
        Some(b) => {
            buf.put_u8(1);
            put_ballot(buf, b);
        }
        None => buf.put_u8(0),
    }
}

fn put_bytes16(buf: &mut BytesMut, b: &[u8]) {
    let len = u16::try_from(b.len()).expect("byte string longer than 65535 bytes");
    buf.put_u16(len);
    buf.put_slice(b);
}

fn put_command(buf: &mut BytesMut, c: &Command) {
    buf.put_u8(match c.op {
        Op::Put => 0,
        Op::Get => 1,
        Op::Noop => 2,
    });
    put_bytes16(buf, &c.key);
    put_bytes16(buf, &c.value);
    buf.put_u64(c.client_id);
    buf.put_u64(c.request_seq);
}

fn put_nodes(buf: &mut BytesMut, nodes: &[NodeId]) {
    let count = u16::try_from(nodes.len()).expect("node list longer than 65535");
    buf.put_u16(count);
    for n in nodes {
        buf.put_u32(n.0);
    }
}

fn put_entries(buf: &mut BytesMut, entries: &[AcceptedEntry]) {
    buf.put_u32(entries.len() as u32);
    for e in entries {
        buf.put_u64(e.slot.0);
        put_ballot(buf, e.ballot);
        put_command(buf, &e.command);
    }
}

fn put_pig_id(buf: &mut BytesMut, id: PigMsgId) {
    buf.put_u32(id.initiator.0);
    buf.put_u64(id.sequence);
}

fn put_body(msg: &Message, buf: &mut BytesMut) {
    match msg {
        Message::P1a(m) => {
            put_ballot(buf, m.ballot);
            buf.put_u64(m.from_slot.0);
        }
        Message::P1b(m) => {
            put_ballot(buf, m.ballot);
            buf.put_u32(m.voter.0);
            put_entries(buf, &m.accepted);
        }
        Message::P2a(m) => {
            put_ballot(buf, m.ballot);
            buf.put_u64(m.slot.0);
            put_command(buf, &m.command);
            buf.put_u64(m.commit_up_to.map_or(NO_SLOT, |s| s.0));
        }
        Message::P2b(m) => {
            put_ballot(buf, m.ballot);
            buf.put_u64(m.slot.0);
            buf.put_u32(m.voter.0);
            put_opt_ballot(buf, m.reject_ballot);
        }
        Message::P3(m) => {
            buf.put_u64(m.slot.0);
            put_command(buf, &m.command);
        }
        Message::Envelope(m) => {
            put_pig_id(buf, m.pig_id);
            put_nodes(buf, &m.group_members);
            encode_into(&m.payload, buf);
        }
        Message::Aggregated(m) => {
            put_pig_id(buf, m.pig_id);
            buf.put_u8(match m.phase {
                Phase::One => 1,
                Phase::Two => 2,
            });
            put_ballot(buf, m.ballot);
            buf.put_u64(m.slot.0);
            buf.put_u32(m.ack_count);
            put_nodes(buf, &m.missing_voters);
            put_opt_ballot(buf, m.reject_ballot);
            put_entries(buf, &m.accepted);
        }
        Message::ClientRequest(c) => put_command(buf, c),
        Message::ClientReply(r) => {
            buf.put_u64(r.client_id);
            buf.put_u64(r.request_seq);
            match &r.outcome {
                ReplyOutcome::Stored => buf.put_u8(0),
                ReplyOutcome::Value(v) => {
                    buf.put_u8(1);
                    put_bytes16(buf, v);
                }
                ReplyOutcome::Absent => buf.put_u8(2),
                ReplyOutcome::NotLeader { hint } => {
                    buf.put_u8(3);
                    match hint {
                        Some(h) => {
                            buf.put_u8(1);
                            buf.put_u32(h.0);
                        }
                        None => buf.put_u8(0),
                    }
                }
            }
        }
    }
}

/// Decodes exactly one frame occupying all of `frame`.
pub fn decode(frame: &[u8]) -> Result<Message, WireError> {
    let mut cur = frame;
    let msg = decode_one(&mut cur)?;
    if !cur.is_empty() {
        return Err(WireError::Trailing(cur.len()));
    }
    Ok(msg)
}

/// Splits one complete frame off the front of a stream buffer, if present.
pub fn split_frame(buf: &mut BytesMut) -> Result<Option<Message>, WireError> {
    if buf.len() < 4 {
        return Ok(None);
    }
    let declared = u32::from_be_bytes([buf[0], buf[1], buf[2], buf[3]]) as usize;
    if declared > MAX_FRAME {
        return Err(WireError::TooLarge(declared));
    }
    if buf.len() < 4 + declared {
        return Ok(None);
    }
    let frame = buf.split_to(4 + declared);
    decode(&frame).map(Some)
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn need(&self, n: usize, what: &'static str) -> Result<(), WireError> {
        if self.buf.remaining() < n {
            Err(WireError::Truncated(what))
        } else {
            Ok(())
        }
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, WireError> {
        self.need(1, what)?;
        Ok(self.buf.get_u8())
    }

    fn u16(&mut self, what: &'static str) -> Result<u16, WireError> {
        self.need(2, what)?;
        Ok(self.buf.get_u16())
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, WireError> {
        self.need(4, what)?;
        Ok(self.buf.get_u32())
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, WireError> {
        self.need(8, what)?;
        Ok(self.buf.get_u64())
    }

    fn ballot(&mut self) -> Result<Ballot, WireError> {
        Ok(Ballot { round: self.u64("ballot")?, proposer: NodeId(self.u32("ballot")?) })
    }

    fn opt_ballot(&mut self) -> Result<Option<Ballot>, WireError> {
        match self.u8("ballot flag")? {
            0 => Ok(None),
            1 => Ok(Some(self.ballot()?)),
            _ => Err(WireError::Invalid("ballot flag")),
        }
    }

    fn bytes16(&mut self, what: &'static str) -> Result<Bytes, WireError> {
        let len = self.u16(what)? as usize;
        self.need(len, what)?;
        let out = Bytes::copy_from_slice(&self.buf[..len]);
        self.buf.advance(len);
        Ok(out)
    }

    fn command(&mut self) -> Result<Command, WireError> {
        let op = match self.u8("op")? {
            0 => Op::Put,
            1 => Op::Get,
            2 => Op::Noop,
            _ => return Err(WireError::Invalid("op")),
        };
        Ok(Command {
            op,
            key: self.bytes16("key")?,
            value: self.bytes16("value")?,
            client_id: self.u64("client id")?,
            request_seq: self.u64("request seq")?,
        })
    }

    fn nodes(&mut self) -> Result<Vec<NodeId>, WireError> {
        let count = self.u16("node list")? as usize;
        self.need(count * 4, "node list")?;
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let id = NodeId(self.buf.get_u32());
            if out.last().is_some_and(|&prev| prev >= id) {
                return Err(WireError::Invalid("node list order"));
            }
            out.push(id);
        }
        Ok(out)
    }

    fn entries(&mut self) -> Result<Vec<AcceptedEntry>, WireError> {
        let count = self.u32("entry list")? as usize;
        let mut out = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            out.push(AcceptedEntry {
                slot: Slot(self.u64("entry slot")?),
                ballot: self.ballot()?,
                command: Arc::new(self.command()?),
            });
        }
        Ok(out)
    }

    fn pig_id(&mut self) -> Result<PigMsgId, WireError> {
        Ok(PigMsgId { initiator: NodeId(self.u32("pig id")?), sequence: self.u64("pig id")? })
    }
}

fn decode_one(cur: &mut &[u8]) -> Result<Message, WireError> {
    if cur.len() < 4 {
        return Err(WireError::Truncated("frame length"));
    }
    let declared = cur.get_u32() as usize;
    if declared == 0 {
        return Err(WireError::Empty);
    }
    if declared > cur.len() {
        return Err(WireError::LengthMismatch { declared, available: cur.len() });
    }
    let (frame, rest) = cur.split_at(declared);
    *cur = rest;
    let mut r = Reader { buf: frame };
    let tag = r.u8("type")?;
    let kind = MsgType::from_u8(tag).ok_or(WireError::UnknownType(tag))?;
    let msg = match kind {
        MsgType::P1a => Message::P1a(P1a { ballot: r.ballot()?, from_slot: Slot(r.u64("from slot")?) }),
        MsgType::P1b => Message::P1b(P1b {
            ballot: r.ballot()?,
            voter: NodeId(r.u32("voter")?),
            accepted: r.entries()?,
        }),
        MsgType::P2a => {
            let ballot = r.ballot()?;
            let slot = Slot(r.u64("slot")?);
            let command = Arc::new(r.command()?);
            let commit = r.u64("commit watermark")?;
            Message::P2a(P2a {
                ballot,
                slot,
                command,
                commit_up_to: (commit != NO_SLOT).then_some(Slot(commit)),
            })
        }
        MsgType::P2b => Message::P2b(P2b {
            ballot: r.ballot()?,
            slot: Slot(r.u64("slot")?),
            voter: NodeId(r.u32("voter")?),
            reject_ballot: r.opt_ballot()?,
        }),
        MsgType::P3 => Message::P3(P3 { slot: Slot(r.u64("slot")?), command: Arc::new(r.command()?) }),
        MsgType::PigEnvelope => {
            let pig_id = r.pig_id()?;
            let group_members = r.nodes()?;
            let payload = decode_one(&mut r.buf)?;
            Message::Envelope(PigEnvelope { pig_id, group_members, payload: Box::new(payload) })
        }
        MsgType::AggregatedReply => {
            let pig_id = r.pig_id()?;
            let phase = match r.u8("phase")? {
                1 => Phase::One,
                2 => Phase::Two,
                _ => return Err(WireError::Invalid("phase")),
            };
            Message::Aggregated(AggregatedReply {
                pig_id,
                phase,
                ballot: r.ballot()?,
                slot: Slot(r.u64("slot")?),
                ack_count: r.u32("ack count")?,
                missing_voters: r.nodes()?,
                reject_ballot: r.opt_ballot()?,
                accepted: r.entries()?,
            })
        }
        MsgType::ClientRequest => Message::ClientRequest(Arc::new(r.command()?)),
        MsgType::ClientReply => {
            let client_id = r.u64("client id")?;
            let request_seq = r.u64("request seq")?;
            let outcome = match r.u8("reply status")? {
                0 => ReplyOutcome::Stored,
                1 => ReplyOutcome::Value(r.bytes16("value")?),
                2 => ReplyOutcome::Absent,
                3 => ReplyOutcome::NotLeader {
                    hint: match r.u8("hint flag")? {
                        0 => None,
                        1 => Some(NodeId(r.u32("hint")?)),
                        _ => return Err(WireError::Invalid("hint flag")),
                    },
                },
                _ => return Err(WireError::Invalid("reply status")),
            };
            Message::ClientReply(ClientReply { client_id, request_seq, outcome })
        }
    };
    if !r.buf.is_empty() {
        return Err(WireError::Trailing(r.buf.len()));
    }
    Ok(msg)
}
