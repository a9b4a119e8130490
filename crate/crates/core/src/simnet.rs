//! Synchronous round engine.
//!
//! Every message sent in round `r` is delivered at the start of round
//! `r + 1`. Inboxes are ordered by `(src, seq)`. Messages addressed to a
//! crashed server are dropped and counted; crashed servers never send.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::Serialize;

use crate::buckets::{BucketId, HashFamily};
use crate::butterfly::NodeId;
use crate::codec::{DataItem, Piece};

/// Sender or receiver of a butterfly-level message.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Endpoint {
    Node(NodeId),
    Server(usize),
}

/// Value carried by the all-to-all butterfly aggregations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AggValue {
    Count { num0: u64, num1: u64 },
    /// Highest bucket timestamp seen and the columns holding it.
    Timestamp { max: Option<u64>, holders: Arc<Vec<u64>> },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ProbeOutcome {
    Piece(Piece),
    Fail { level: usize },
    NotExists,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Message {
    /// Introduces `rep` as the representative of crashed `server`.
    RepCtrl { server: usize, rep: usize },
    HashBcast {
        to: NodeId,
        bucket: BucketId,
        timestamp: u64,
        hashes: HashFamily,
        dedupe_seed: u64,
    },
    Aggregate { from: NodeId, to: NodeId, value: AggValue },
    BlockTransfer {
        bucket: BucketId,
        to: NodeId,
        from_column: usize,
        timestamp: u64,
        hashes: HashFamily,
        block: Arc<[u8]>,
    },
    PieceTransfer { to_column: usize, pieces: Vec<Piece> },
    PieceBundle { to: NodeId, pieces: Vec<Piece> },
    KeyClaim { key: u64, version: u64, holder: usize },
    DropClaim { key: u64, version: u64, holder: usize },
    Full { to: NodeId, offset: u64 },
    Partly { to: NodeId, count: u64, offset: u64 },
    Reassign { to_column: usize, item: DataItem },
    TsQuery { bucket: BucketId, request: usize },
    TsReply { bucket: BucketId, request: usize, timestamp: Option<u64> },
    SeedsQuery { bucket: BucketId, request: usize },
    SeedsReply { request: usize, hashes: HashFamily },
    Probe {
        to: NodeId,
        from: Endpoint,
        key: u64,
        index: u16,
        t: u64,
        target: usize,
    },
    ProbeAnswer {
        to: Endpoint,
        from_node: NodeId,
        key: u64,
        index: u16,
        t: u64,
        outcome: ProbeOutcome,
    },
    Decode {
        to: NodeId,
        from: Endpoint,
        key: u64,
        index: u16,
        t: u64,
        target: usize,
    },
    DecodeCheck { to: NodeId, from: NodeId, pairs: Arc<Vec<(u64, u16)>> },
    DecodeFail { to: NodeId },
    Cong { to: NodeId },
    DecodeAnswer {
        to: Endpoint,
        from_node: NodeId,
        key: u64,
        index: u16,
        t: u64,
        outcome: ProbeOutcome,
    },
}

const HEADER_BYTES: usize = 16;

impl Message {
    pub fn kind(&self) -> &'static str {
        match self {
            Message::RepCtrl { .. } => "REP_CTRL",
            Message::HashBcast { .. } => "HASH_BCAST",
            Message::Aggregate { value: AggValue::Count { .. }, .. } => "COUNT_TUPLE",
            Message::Aggregate { .. } => "TS_AGG",
            Message::BlockTransfer { .. } => "BLOCK_TRANSFER",
            Message::PieceTransfer { .. } => "PIECE",
            Message::PieceBundle { .. } => "PIECE_BUNDLE",
            Message::KeyClaim { .. } => "KEY_CLAIM",
            Message::DropClaim { .. } => "DROP_CLAIM",
            Message::Full { .. } => "FULL",
            Message::Partly { .. } => "PARTLY",
            Message::Reassign { .. } => "REASSIGN",
            Message::TsQuery { .. } => "TS_QUERY",
            Message::TsReply { .. } => "TS_REPLY",
            Message::SeedsQuery { .. } => "SEEDS_QUERY",
            Message::SeedsReply { .. } => "SEEDS_REPLY",
            Message::Probe { .. } => "PROBE",
            Message::ProbeAnswer { outcome, .. } | Message::DecodeAnswer { outcome, .. } => match outcome {
                ProbeOutcome::Piece(_) => "PIECE",
                ProbeOutcome::Fail { .. } => "FAIL",
                ProbeOutcome::NotExists => "NOT_EXISTS",
            },
            Message::Decode { .. } => "DECODE",
            Message::DecodeCheck { .. } => "DECODE_CHECK",
            Message::DecodeFail { .. } => "FAIL",
            Message::Cong { .. } => "CONG",
        }
    }

    /// Approximate wire size, used for the message-size ledger.
    pub fn wire_len(&self) -> usize {
        let piece_len = |p: &Piece| 18 + p.body.len();
        HEADER_BYTES
            + match self {
                Message::HashBcast { hashes, .. } => 24 + hashes.byte_len(),
                Message::Aggregate { value: AggValue::Timestamp { holders, .. }, .. } => 16 + 8 * holders.len(),
                Message::Aggregate { .. } => 24,
                Message::BlockTransfer { block, hashes, .. } => 16 + block.len() + hashes.byte_len(),
                Message::PieceTransfer { pieces, .. } => 8 + pieces.iter().map(piece_len).sum::<usize>(),
                Message::PieceBundle { pieces, .. } => 8 + pieces.iter().map(piece_len).sum::<usize>(),
                Message::Reassign { item, .. } => 16 + item.payload.len(),
                Message::SeedsReply { hashes, .. } => 8 + hashes.byte_len(),
                Message::ProbeAnswer { outcome: ProbeOutcome::Piece(p), .. }
                | Message::DecodeAnswer { outcome: ProbeOutcome::Piece(p), .. } => 24 + piece_len(p),
                Message::DecodeCheck { pairs, .. } => 8 + 10 * pairs.len(),
                _ => 24,
            }
    }
}

#[derive(Debug, Clone)]
pub struct Envelope {
    pub src: usize,
    pub dst: usize,
    pub seq: u64,
    pub msg: Message,
}

/// Protocol stage a round belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Preprocess,
    WriteSync,
    WriteDecode,
    WriteDedupe,
    WriteCount,
    WriteSelect,
    WriteEncode,
    LookupMetadata,
    Probing,
    Decoding,
}

impl Stage {
    pub fn is_write(self) -> bool {
        matches!(
            self,
            Stage::WriteSync
                | Stage::WriteDecode
                | Stage::WriteDedupe
                | Stage::WriteCount
                | Stage::WriteSelect
                | Stage::WriteEncode
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct RoundStat {
    pub stage: Stage,
    /// Most messages received by one server from other servers.
    pub max_received: u32,
    pub max_sent: u32,
    pub messages: u32,
    pub dropped: u32,
}

/// Per-round metrics of one period.
#[derive(Debug, Clone, Default)]
pub struct RoundLedger {
    pub rounds: Vec<RoundStat>,
    pub max_message_bytes: usize,
    pub dropped_to_crashed: u64,
    pub received_per_server: Vec<u64>,
}

impl RoundLedger {
    pub fn new(n: usize) -> Self {
        Self {
            received_per_server: vec![0; n],
            ..Self::default()
        }
    }

    pub fn rounds_used(&self) -> usize {
        self.rounds.len()
    }

    pub fn max_congestion(&self) -> u32 {
        self.rounds.iter().map(|r| r.max_received).max().unwrap_or(0)
    }

    pub fn max_congestion_in(&self, pred: impl Fn(Stage) -> bool) -> u32 {
        self.rounds
            .iter()
            .filter(|r| pred(r.stage))
            .map(|r| r.max_received)
            .max()
            .unwrap_or(0)
    }

    pub fn rounds_in(&self, pred: impl Fn(Stage) -> bool) -> usize {
        self.rounds.iter().filter(|r| pred(r.stage)).count()
    }
}

/// Message transport for one period.
pub struct Network<'a> {
    crashed: &'a [bool],
    ledger: &'a mut RoundLedger,
    outbox: Vec<Envelope>,
    seq: u64,
    sent: Vec<u32>,
}

/// Messages delivered to each server in one round.
pub type Inboxes = Vec<Vec<Envelope>>;

impl<'a> Network<'a> {
    pub fn new(crashed: &'a [bool], ledger: &'a mut RoundLedger) -> Self {
        let n = crashed.len();
        Self {
            crashed,
            ledger,
            outbox: Vec::new(),
            seq: 0,
            sent: vec![0; n],
        }
    }

    pub fn n(&self) -> usize {
        self.crashed.len()
    }

    pub fn is_crashed(&self, server: usize) -> bool {
        self.crashed[server]
    }

    pub fn send(&mut self, src: usize, dst: usize, msg: Message) {
        if self.crashed[src] {
            return;
        }
        self.ledger.max_message_bytes = self.ledger.max_message_bytes.max(msg.wire_len());
        if src != dst {
            self.sent[src] += 1;
        }
        self.seq += 1;
        self.outbox.push(Envelope {
            src,
            dst,
            seq: self.seq,
            msg,
        });
    }

    /// Rounds completed so far in this period.
    pub fn round(&self) -> usize {
        self.ledger.rounds.len()
    }

    pub fn in_flight(&self) -> usize {
        self.outbox.len()
    }

    /// Ends the current round and returns what every server receives at the
    /// start of the next one.
    pub fn deliver(&mut self, stage: Stage) -> Inboxes {
        let n = self.n();
        let mut inboxes: Inboxes = vec![Vec::new(); n];
        let mut received = vec![0u32; n];
        let mut dropped = 0u32;
        let mut messages = 0u32;
        for env in self.outbox.drain(..) {
            if self.crashed[env.dst] {
                dropped += 1;
                continue;
            }
            if env.src != env.dst {
                received[env.dst] += 1;
                messages += 1;
            }
            inboxes[env.dst].push(env);
        }
        for inbox in &mut inboxes {
            inbox.sort_by_key(|e| (e.src, e.seq));
        }
        for (total, r) in self.ledger.received_per_server.iter_mut().zip(&received) {
            *total += u64::from(*r);
        }
        self.ledger.dropped_to_crashed += u64::from(dropped);
        self.ledger.rounds.push(RoundStat {
            stage,
            max_received: received.iter().copied().max().unwrap_or(0),
            max_sent: self.sent.iter().copied().max().unwrap_or(0),
            messages,
            dropped,
        });
        self.sent.iter_mut().for_each(|s| *s = 0);
        inboxes
    }

    /// Rounds in which the schedule requires waiting but nothing is sent.
    pub fn idle(&mut self, stage: Stage, rounds: usize) {
        for _ in 0..rounds {
            let inboxes = self.deliver(stage);
            debug_assert!(inboxes.iter().all(Vec::is_empty));
        }
    }
}

/// Groups a server's inbox by the butterfly node it is addressed to.
pub fn by_node<'e, F>(inbox: &'e [Envelope], node_of: F) -> BTreeMap<NodeId, Vec<&'e Envelope>>
where
    F: Fn(&Message) -> Option<NodeId>,
{
    let mut out: BTreeMap<NodeId, Vec<&Envelope>> = BTreeMap::new();
    for env in inbox {
        if let Some(node) = node_of(&env.msg) {
            out.entry(node).or_default().push(env);
        }
    }
    out
}
