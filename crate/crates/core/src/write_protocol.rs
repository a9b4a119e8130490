//! The write stage: representatives, then one phase per zone.
//!
//! A phase for bucket `B_z` synchronizes the newest timestamp and fresh
//! hash seeds, decodes the bucket so every item reaches the server that
//! maintains it, drops superseded versions, counts items by key bit `z`,
//! moves `n` items to the next zone on overflow, and re-encodes the rest.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::seq::index;
use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use crate::buckets::{bit, BucketId, HashFamily};
use crate::butterfly::{Direction, NodeId};
use crate::cluster::Ctx;
use crate::codec::{self, CodecError, DataItem, Piece};
use crate::recovery::{self, RecoveryJob};
use crate::rng;
use crate::simnet::{AggValue, Envelope, Message, Stage};
use crate::storage::{self, LayoutError, LevelStack};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum WriteError {
    #[error("{crashed} crashed servers cannot be represented by {intact} intact servers")]
    TooManyCrashes { crashed: usize, intact: usize },
    #[error("bucket {bucket} would hold {count} items, more than 2n")]
    Overfull { bucket: BucketId, count: usize },
    #[error("overflow selection marked {marked} items, expected {expected}")]
    SelectionMismatch { marked: usize, expected: usize },
    #[error("zone {0} overflowed, no deeper zone exists")]
    ZoneExhausted(usize),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error("write stage aborted: {reason}")]
    Aborted {
        report: Box<WriteStageReport>,
        reason: String,
    },
}

/// Who emulates each server's butterfly nodes this period.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RepresentativeMap {
    rep: Vec<usize>,
    load: Vec<u8>,
}

impl RepresentativeMap {
    pub fn identity(n: usize) -> Self {
        Self {
            rep: (0..n).collect(),
            load: vec![0; n],
        }
    }

    pub fn rep(&self, server: usize) -> usize {
        self.rep[server]
    }

    /// Number of crashed servers `server` stands in for.
    pub fn load(&self, server: usize) -> u8 {
        self.load[server]
    }

    pub fn len(&self) -> usize {
        self.rep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rep.is_empty()
    }
}

/// Crashed servers, sorted by id, go round-robin to intact servers sorted by
/// id, so no intact server covers more than two.
pub fn assign_representatives(crashed: &[bool]) -> Result<RepresentativeMap, WriteError> {
    let intact: Vec<usize> = (0..crashed.len()).filter(|&s| !crashed[s]).collect();
    let down: Vec<usize> = (0..crashed.len()).filter(|&s| crashed[s]).collect();
    if intact.is_empty() || down.len() > 2 * intact.len() {
        return Err(WriteError::TooManyCrashes {
            crashed: down.len(),
            intact: intact.len(),
        });
    }
    let mut map = RepresentativeMap::identity(crashed.len());
    for (r, &s) in down.iter().enumerate() {
        let rep = intact[r % intact.len()];
        map.rep[s] = rep;
        map.load[rep] += 1;
    }
    Ok(map)
}

/// Each representative introduces itself to the emulators of every
/// butterfly neighbor of the crashed column it took over.
pub fn disseminate_representatives(ctx: &mut Ctx) {
    let topo = ctx.topo();
    let crashed: Vec<usize> = (0..ctx.n()).filter(|&s| ctx.crashed(s)).collect();
    if crashed.is_empty() {
        return;
    }
    for &x in &crashed {
        let rep = ctx.rep(x);
        let targets: BTreeSet<usize> = (0..topo.d())
            .flat_map(|level| topo.group_columns(x, level))
            .map(|col| ctx.rep(col))
            .filter(|&s| s != rep)
            .collect();
        for t in targets {
            ctx.net.send(rep, t, Message::RepCtrl { server: x, rep });
        }
    }
    ctx.net.deliver(Stage::Preprocess);
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct PhaseReport {
    pub zone: usize,
    pub bucket: String,
    pub rounds: usize,
    pub decoded_items: usize,
    pub lost_keys: Vec<u64>,
    pub dropped_duplicates: usize,
    pub num0: u64,
    pub num1: u64,
    /// Bit of the child that received `n` items on overflow.
    pub overflow_bit: Option<u8>,
    pub encoded_items: usize,
}

/// A bucket encoding produced this period.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedBucket {
    pub bucket: BucketId,
    pub timestamp: u64,
    pub hashes: HashFamily,
    pub keys: Vec<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct WriteStageReport {
    pub phases: Vec<PhaseReport>,
    pub encodings: Vec<EncodedBucket>,
}

impl WriteStageReport {
    pub fn rounds(&self) -> usize {
        self.phases.iter().map(|p| p.rounds).sum()
    }

    pub fn lost_keys(&self) -> Vec<u64> {
        self.phases.iter().flat_map(|p| p.lost_keys.iter().copied()).collect()
    }
}

/// Items held per column (each column's items live at its emulator).
pub type Holdings = Vec<Vec<DataItem>>;

/// Applies one batch of writes, given as `(issuing server, item)`.
pub fn write_stage(ctx: &mut Ctx, writes: Vec<(usize, DataItem)>) -> Result<WriteStageReport, WriteError> {
    let n = ctx.n();
    let mut incoming: Holdings = vec![Vec::new(); n];
    for (server, item) in writes {
        incoming[server].push(item);
    }
    let mut report = WriteStageReport::default();
    let mut bucket = BucketId::ROOT;
    for zone in 0..=ctx.params.address_bits {
        let start = ctx.net.round();
        let outcome = match write_phase(ctx, zone, bucket, incoming) {
            Ok(o) => o,
            Err(e) => {
                return Err(WriteError::Aborted {
                    report: Box::new(report),
                    reason: e.to_string(),
                })
            }
        };
        let mut phase = outcome.report;
        phase.rounds = ctx.net.round() - start;
        report.phases.push(phase);
        report.encodings.push(outcome.encoding);
        match outcome.next {
            Some((child, next)) => {
                bucket = child;
                incoming = next;
            }
            None => return Ok(report),
        }
    }
    Err(WriteError::Aborted {
        reason: WriteError::ZoneExhausted(ctx.params.address_bits).to_string(),
        report: Box::new(report),
    })
}

struct PhaseOutcome {
    report: PhaseReport,
    encoding: EncodedBucket,
    next: Option<(BucketId, Holdings)>,
}

fn write_phase(ctx: &mut Ctx, zone: usize, bucket: BucketId, mut holdings: Holdings) -> Result<PhaseOutcome, WriteError> {
    let n = ctx.n();
    let mut report = PhaseReport {
        zone,
        bucket: bucket.label(),
        ..PhaseReport::default()
    };
    let sync = sync_phase(ctx, bucket);
    if let Some(ts) = sync.timestamp {
        let (maintained, lost) = decode_bucket(ctx, bucket, ts, &sync.current)?;
        for (column, items) in maintained.into_iter().enumerate() {
            report.decoded_items += items.len();
            holdings[column].extend(items);
        }
        report.lost_keys = lost;
    }
    report.dropped_duplicates = drop_superseded(ctx, &mut holdings, sync.dedupe_seed);
    let agg = count_items(ctx, &holdings, zone);
    let (num0, num1) = agg.totals[0];
    report.num0 = num0;
    report.num1 = num1;

    let mut next = None;
    if num0 + num1 > 2 * n as u64 {
        let (b, moved) = select_overflow(ctx, zone, &agg, &mut holdings)?;
        report.overflow_bit = Some(b);
        next = Some((bucket.child(b), moved));
    }
    let kept: usize = holdings.iter().map(Vec::len).sum();
    if kept > 2 * n {
        return Err(WriteError::Overfull { bucket, count: kept });
    }
    report.encoded_items = kept;
    let encoding = encode_bucket(ctx, bucket, &holdings, sync.hashes)?;
    Ok(PhaseOutcome {
        report,
        encoding,
        next,
    })
}

/// Per-node values gathered by an all-to-all aggregation.
#[derive(Debug, Clone)]
pub struct Aggregation<T> {
    /// `children[l][x][b]`: value node `(l, x)` got from its child `b`.
    pub children: Vec<Vec<Vec<T>>>,
    /// Aggregate known at every level-0 node.
    pub totals: Vec<T>,
}

/// Sends level-`d` values up the butterfly; every level-0 node ends up with
/// the aggregate over all columns after `d` rounds. `side` runs after each
/// delivery with the level just reached, for piggybacked traffic.
fn aggregate<T: Clone>(
    ctx: &mut Ctx,
    stage: Stage,
    leaves: Vec<T>,
    wrap: impl Fn(&T) -> AggValue,
    unwrap: impl Fn(&AggValue) -> Option<T>,
    combine: impl Fn(&[T]) -> T,
    mut side: impl FnMut(&mut Ctx, &[Vec<Envelope>], usize),
) -> Aggregation<T> {
    let topo = ctx.topo();
    let (n, k, d) = (topo.n(), topo.k(), topo.d());
    let mut children: Vec<Vec<Vec<T>>> = vec![Vec::new(); d];
    let mut current = leaves;
    for level in (0..d).rev() {
        for (x, value) in current.iter().enumerate() {
            let from = NodeId::new(level + 1, x);
            for to in topo.neighbors(from, Direction::Up).expect("level in range") {
                ctx.send_between(
                    x,
                    to.column,
                    Message::Aggregate {
                        from,
                        to,
                        value: wrap(value),
                    },
                );
            }
        }
        let inboxes = ctx.net.deliver(stage);
        let mut got: Vec<Vec<Option<T>>> = vec![vec![None; k]; n];
        for env in inboxes.iter().flatten() {
            if let Message::Aggregate { from, to, value } = &env.msg {
                if to.level == level {
                    got[to.column][topo.digit_at(from.column, level)] = unwrap(value);
                }
            }
        }
        let got: Vec<Vec<T>> = got
            .into_iter()
            .map(|g| g.into_iter().map(|v| v.expect("every child reports")).collect())
            .collect();
        current = got.iter().map(|g| combine(g)).collect();
        children[level] = got;
        side(ctx, &inboxes, level);
    }
    Aggregation {
        children,
        totals: current,
    }
}

struct SyncResult {
    timestamp: Option<u64>,
    current: Vec<bool>,
    hashes: HashFamily,
    dedupe_seed: u64,
}

fn bitmap_get(words: &[u64], i: usize) -> bool {
    words[i / 64] >> (i % 64) & 1 == 1
}

/// Newest timestamp of `bucket` and who holds it, aggregated up the
/// butterfly, while the lowest-id intact server broadcasts fresh seeds
/// through its upward tree in the same rounds.
fn sync_phase(ctx: &mut Ctx, bucket: BucketId) -> SyncResult {
    let topo = ctx.topo();
    let n = ctx.n();
    let words = n.div_ceil(64);
    let leaves: Vec<(Option<u64>, Arc<Vec<u64>>)> = (0..n)
        .map(|x| match ctx.stack(x, bucket) {
            Some(st) => {
                let mut bits = vec![0u64; words];
                bits[x / 64] |= 1 << (x % 64);
                (Some(st.timestamp), Arc::new(bits))
            }
            None => (None, Arc::new(vec![0u64; words])),
        })
        .collect();

    let leader = (0..n).find(|&s| !ctx.crashed(s)).expect("an intact server exists");
    let mut seed_rng = ctx.rng(&[rng::HASH_SEEDS, bucket.zone as u64, bucket.prefix]);
    let hashes = HashFamily::new((0..ctx.params.c).map(|_| seed_rng.gen()).collect());
    let dedupe_seed: u64 = seed_rng.gen();
    let timestamp = ctx.period;
    let bcast = |to: NodeId| Message::HashBcast {
        to,
        bucket,
        timestamp,
        hashes: hashes.clone(),
        dedupe_seed,
    };
    let start = NodeId::new(topo.d(), leader);
    for to in topo.neighbors(start, Direction::Up).expect("level d") {
        ctx.send_between(leader, to.column, bcast(to));
    }
    let mut learned: Vec<Option<HashFamily>> = vec![None; n];

    let agg = aggregate(
        ctx,
        Stage::WriteSync,
        leaves,
        |(max, holders)| AggValue::Timestamp {
            max: *max,
            holders: holders.clone(),
        },
        |v| match v {
            AggValue::Timestamp { max, holders } => Some((*max, holders.clone())),
            AggValue::Count { .. } => None,
        },
        |vals| {
            let max = vals.iter().filter_map(|v| v.0).max();
            let mut bits = vec![0u64; words];
            for (ts, holders) in vals {
                if ts.is_some() && *ts == max {
                    for (b, h) in bits.iter_mut().zip(holders.iter()) {
                        *b |= h;
                    }
                }
            }
            (max, Arc::new(bits))
        },
        |ctx, inboxes, level| {
            let mut reached = BTreeSet::new();
            for env in inboxes.iter().flatten() {
                if let Message::HashBcast { to, hashes, .. } = &env.msg {
                    if to.level == level && reached.insert(to.column) && level == 0 {
                        learned[to.column] = Some(hashes.clone());
                    }
                }
            }
            if level > 0 {
                for x in reached {
                    let from = NodeId::new(level, x);
                    for to in topo.neighbors(from, Direction::Up).expect("level in range") {
                        ctx.send_between(x, to.column, bcast(to));
                    }
                }
            }
        },
    );
    debug_assert!(learned.iter().all(|h| h.as_ref() == Some(&hashes)));
    let (timestamp, holders) = agg.totals[0].clone();
    SyncResult {
        timestamp,
        current: (0..n).map(|x| timestamp.is_some() && bitmap_get(&holders, x)).collect(),
        hashes,
        dedupe_seed,
    }
}

/// Recovers every level-0 block of the current encoding, then sends each
/// piece to the emulator of the column maintaining its item (`h_1`).
/// Returns items per maintaining column and keys that could not be rebuilt.
pub fn decode_bucket(
    ctx: &mut Ctx,
    bucket: BucketId,
    timestamp: u64,
    current: &[bool],
) -> Result<(Holdings, Vec<u64>), WriteError> {
    let topo = ctx.topo();
    let n = ctx.n();
    let all: Vec<usize> = (0..n).collect();
    let plan = recovery::plan_recovery(&topo, 0..n, topo.d(), &|x| current[x], &all);
    let job = RecoveryJob {
        bucket,
        timestamp,
        plan,
    };
    let recovered = recovery::execute(ctx, Stage::WriteDecode, std::slice::from_ref(&job)).remove(0);

    let mut had_pieces: BTreeSet<u64> = BTreeSet::new();
    for y in 0..n {
        let source = if current[y] {
            ctx.stack(y, bucket)
                .map(|st| (st.level0.clone(), st.hashes.clone()))
        } else {
            recovered.blocks.get(&y).cloned()
        };
        let Some((block, hashes)) = source else {
            continue;
        };
        let mut bundles: BTreeMap<usize, Vec<Piece>> = BTreeMap::new();
        for piece in storage::decode_level0(&block)? {
            had_pieces.insert(piece.item_key);
            let maintainer = hashes.server_for(piece.item_key, 1, n);
            bundles.entry(maintainer).or_default().push(piece);
        }
        for (maintainer, pieces) in bundles {
            ctx.send_between(
                y,
                maintainer,
                Message::PieceTransfer {
                    to_column: maintainer,
                    pieces,
                },
            );
        }
    }
    let inboxes = ctx.net.deliver(Stage::WriteDecode);

    let mut gathered: BTreeMap<(usize, u64), Vec<Piece>> = BTreeMap::new();
    for env in inboxes.into_iter().flatten() {
        if let Message::PieceTransfer { to_column, pieces } = env.msg {
            for piece in pieces {
                gathered.entry((to_column, piece.item_key)).or_default().push(piece);
            }
        }
    }
    let c = ctx.params.c;
    let t = codec::rs_threshold(c);
    let mut maintained: Holdings = vec![Vec::new(); n];
    let mut decoded: BTreeSet<u64> = BTreeSet::new();
    for ((column, key), mut pieces) in gathered {
        if pieces.len() < t {
            continue;
        }
        // a block never mixes versions of one key, but be strict anyway
        let version = pieces.iter().map(|p| p.version).max().unwrap_or(0);
        pieces.retain(|p| p.version == version);
        if let Ok(payload) = codec::rs_decode(&pieces, c, ctx.params.payload_len) {
            decoded.insert(key);
            maintained[column].push(DataItem { key, payload, version });
        }
    }
    let lost = had_pieces.difference(&decoded).copied().collect();
    Ok((maintained, lost))
}

/// Sends a claim per held item to the server a fresh hash picks for its key;
/// that server tells holders of all but the newest version to drop theirs.
fn drop_superseded(ctx: &mut Ctx, holdings: &mut Holdings, seed: u64) -> usize {
    let n = ctx.n();
    let g = HashFamily::new(vec![seed]);
    for (x, items) in holdings.iter().enumerate() {
        for item in items {
            let judge = g.server_for(item.key, 1, n);
            ctx.send_between(
                x,
                judge,
                Message::KeyClaim {
                    key: item.key,
                    version: item.version,
                    holder: x,
                },
            );
        }
    }
    let inboxes = ctx.net.deliver(Stage::WriteDedupe);
    for (server, inbox) in inboxes.iter().enumerate() {
        let mut claims: BTreeMap<u64, Vec<(u64, usize)>> = BTreeMap::new();
        for env in inbox {
            if let Message::KeyClaim { key, version, holder } = env.msg {
                claims.entry(key).or_default().push((version, holder));
            }
        }
        for (key, mut list) in claims {
            // newest version wins, lowest holder breaks ties
            list.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
            for &(version, holder) in &list[1..] {
                let dst = ctx.rep(holder);
                ctx.net.send(server, dst, Message::DropClaim { key, version, holder });
            }
        }
    }
    let inboxes = ctx.net.deliver(Stage::WriteDedupe);
    let mut dropped = 0;
    for env in inboxes.iter().flatten() {
        if let Message::DropClaim { key, version, holder } = env.msg {
            if let Some(pos) = holdings[holder]
                .iter()
                .position(|it| it.key == key && it.version == version)
            {
                holdings[holder].remove(pos);
                dropped += 1;
            }
        }
    }
    dropped
}

/// `(num0, num1)` of held items by key bit `zone`, aggregated so every
/// level-0 node knows the totals.
pub fn count_items(ctx: &mut Ctx, holdings: &Holdings, zone: usize) -> Aggregation<(u64, u64)> {
    let leaves = holdings
        .iter()
        .map(|items| {
            let ones = items.iter().filter(|it| bit(it.key, zone) == 1).count() as u64;
            (items.len() as u64 - ones, ones)
        })
        .collect();
    aggregate(
        ctx,
        Stage::WriteCount,
        leaves,
        |&(num0, num1)| AggValue::Count { num0, num1 },
        |v| match *v {
            AggValue::Count { num0, num1 } => Some((num0, num1)),
            AggValue::Timestamp { .. } => None,
        },
        |vals| vals.iter().fold((0, 0), |acc, v| (acc.0 + v.0, acc.1 + v.1)),
        |_, _, _| {},
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Pick {
    Full { offset: u64 },
    Partly { count: u64, offset: u64 },
}

/// Splits a node's instruction over its children, given their counts.
fn split_pick(pick: Pick, child_counts: &[u64]) -> Vec<(usize, Pick)> {
    let mut out = Vec::new();
    match pick {
        Pick::Full { mut offset } => {
            for (b, &cnt) in child_counts.iter().enumerate() {
                if cnt > 0 {
                    out.push((b, Pick::Full { offset }));
                    offset += cnt;
                }
            }
        }
        Pick::Partly { count, mut offset } => {
            let mut left = count;
            for (b, &cnt) in child_counts.iter().enumerate() {
                if left == 0 {
                    break;
                }
                if cnt == 0 {
                    continue;
                }
                if cnt <= left {
                    out.push((b, Pick::Full { offset }));
                    left -= cnt;
                    offset += cnt;
                } else {
                    out.push((b, Pick::Partly { count: left, offset }));
                    left = 0;
                }
            }
        }
    }
    out
}

/// Marks exactly `n` items sharing key bit `zone` and hands the one of rank
/// `r` to column `r`. Returns the chosen bit and the moved items per column.
pub fn select_overflow(
    ctx: &mut Ctx,
    zone: usize,
    agg: &Aggregation<(u64, u64)>,
    holdings: &mut Holdings,
) -> Result<(u8, Holdings), WriteError> {
    let topo = ctx.topo();
    let (n, d) = (topo.n(), topo.d());
    let (num0, _) = agg.totals[0];
    let b: u8 = if num0 > n as u64 { 0 } else { 1 };
    let count_of = |v: &(u64, u64)| if b == 0 { v.0 } else { v.1 };

    let mut picks: BTreeMap<usize, Pick> = BTreeMap::from([(
        0,
        Pick::Partly {
            count: n as u64,
            offset: 0,
        },
    )]);
    for level in 0..d {
        for (&x, &pick) in &picks {
            let counts: Vec<u64> = agg.children[level][x].iter().map(count_of).collect();
            for (child, sub) in split_pick(pick, &counts) {
                let to = NodeId::new(level + 1, topo.with_digit(x, level, child));
                let msg = match sub {
                    Pick::Full { offset } => Message::Full { to, offset },
                    Pick::Partly { count, offset } => Message::Partly { to, count, offset },
                };
                ctx.send_between(x, to.column, msg);
            }
        }
        let inboxes = ctx.net.deliver(Stage::WriteSelect);
        picks.clear();
        for env in inboxes.iter().flatten() {
            match env.msg {
                Message::Full { to, offset } if to.level == level + 1 => {
                    picks.insert(to.column, Pick::Full { offset });
                }
                Message::Partly { to, count, offset } if to.level == level + 1 => {
                    picks.insert(to.column, Pick::Partly { count, offset });
                }
                _ => {}
            }
        }
    }

    let mut marked = 0usize;
    for (&x, &pick) in &picks {
        let mut matching: Vec<usize> = (0..holdings[x].len())
            .filter(|&i| bit(holdings[x][i].key, zone) == b)
            .collect();
        matching.sort_by_key(|&i| holdings[x][i].key);
        let (chosen, offset) = match pick {
            Pick::Full { offset } => (matching, offset),
            Pick::Partly { count, offset } => {
                let mut rng = ctx.rng(&[rng::PARTLY_PICK, zone as u64, x as u64]);
                let amount = (count as usize).min(matching.len());
                let mut sel: Vec<usize> = index::sample(&mut rng, matching.len(), amount)
                    .into_iter()
                    .map(|j| matching[j])
                    .collect();
                sel.sort_by_key(|&i| holdings[x][i].key);
                (sel, offset)
            }
        };
        let mut remove = chosen.clone();
        remove.sort_unstable_by(|a, b| b.cmp(a));
        let mut moved: Vec<DataItem> = chosen.iter().map(|&i| holdings[x][i].clone()).collect();
        for i in remove {
            holdings[x].remove(i);
        }
        for (j, item) in moved.drain(..).enumerate() {
            let rank = (offset as usize + j) % n;
            marked += 1;
            ctx.send_between(x, rank, Message::Reassign { to_column: rank, item });
        }
    }
    let inboxes = ctx.net.deliver(Stage::WriteSelect);
    let mut next: Holdings = vec![Vec::new(); n];
    let mut arrived = 0;
    for env in inboxes.into_iter().flatten() {
        if let Message::Reassign { to_column, item } = env.msg {
            next[to_column].push(item);
            arrived += 1;
        }
    }
    if marked != n || arrived != n {
        return Err(WriteError::SelectionMismatch {
            marked: arrived.min(marked),
            expected: n,
        });
    }
    Ok((b, next))
}

/// Routes fresh pieces to `h_j` columns, builds level-0 blocks, then the
/// level codewords group by group; intact servers overwrite their stacks.
pub fn encode_bucket(
    ctx: &mut Ctx,
    bucket: BucketId,
    holdings: &Holdings,
    hashes: HashFamily,
) -> Result<EncodedBucket, WriteError> {
    let topo = ctx.topo();
    let (n, k, d) = (topo.n(), topo.k(), topo.d());
    let c = ctx.params.c;
    let timestamp = ctx.period;
    let body_len = ctx.params.body_len();

    let mut at: Vec<Vec<Piece>> = vec![Vec::new(); n];
    let mut keys = Vec::new();
    for (x, items) in holdings.iter().enumerate() {
        for item in items {
            keys.push(item.key);
            at[x].extend(codec::rs_encode(item, c)?);
        }
    }
    keys.sort_unstable();

    for level in (0..d).rev() {
        for (y, pieces) in at.iter_mut().enumerate() {
            let mut bundles: BTreeMap<usize, Vec<Piece>> = BTreeMap::new();
            for piece in pieces.drain(..) {
                let target = hashes.server_for(piece.item_key, piece.index as usize, n);
                let next = topo.with_digit(y, level, topo.digit_at(target, level));
                bundles.entry(next).or_default().push(piece);
            }
            for (next, pieces) in bundles {
                ctx.send_between(
                    y,
                    next,
                    Message::PieceBundle {
                        to: NodeId::new(level, next),
                        pieces,
                    },
                );
            }
        }
        let inboxes = ctx.net.deliver(Stage::WriteEncode);
        for env in inboxes.into_iter().flatten() {
            if let Message::PieceBundle { to, pieces } = env.msg {
                at[to.column].extend(pieces);
            }
        }
    }

    let level0: Vec<Arc<[u8]>> = at
        .iter()
        .map(|pieces| Arc::from(storage::encode_level0(pieces, body_len)))
        .collect();
    let mut blocks: Vec<Arc<[u8]>> = level0.clone();
    let mut parities: Vec<Vec<Vec<u8>>> = vec![Vec::with_capacity(d); n];
    for level in 1..=d {
        for x in 0..n {
            for peer in topo.group_columns(x, level - 1) {
                if peer != x {
                    ctx.send_between(
                        x,
                        peer,
                        Message::BlockTransfer {
                            bucket,
                            to: NodeId::new(level, peer),
                            from_column: x,
                            timestamp,
                            hashes: hashes.clone(),
                            block: blocks[x].clone(),
                        },
                    );
                }
            }
        }
        let inboxes = ctx.net.deliver(Stage::WriteEncode);
        let mut members: Vec<Vec<Option<Arc<[u8]>>>> = vec![vec![None; k]; n];
        for env in inboxes.into_iter().flatten() {
            if let Message::BlockTransfer { to, from_column, block, .. } = env.msg {
                if to.level == level {
                    members[to.column][topo.digit_at(from_column, level - 1)] = Some(block);
                }
            }
        }
        // every member of a group derives the same parities; compute once
        let mut by_group: BTreeMap<usize, Vec<Vec<u8>>> = BTreeMap::new();
        let mut next_blocks = Vec::with_capacity(n);
        for x in 0..n {
            let own = topo.digit_at(x, level - 1);
            members[x][own] = Some(blocks[x].clone());
            let base = topo.with_digit(x, level - 1, 0);
            if !by_group.contains_key(&base) {
                let refs: Vec<&[u8]> = members[x]
                    .iter()
                    .map(|m| m.as_deref().expect("all group members sent"))
                    .collect();
                by_group.insert(base, storage::encode_group_level(&refs)?);
            }
            let parity = by_group[&base][own].clone();
            next_blocks.push(Arc::from(storage::codeword_bytes(&blocks[x], &parity)));
            parities[x].push(parity);
        }
        blocks = next_blocks;
    }

    for (x, (level0, parities)) in level0.into_iter().zip(parities).enumerate() {
        if !ctx.crashed(x) {
            ctx.servers[x].buckets.insert(
                bucket,
                LevelStack {
                    timestamp,
                    hashes: hashes.clone(),
                    level0,
                    parities,
                },
            );
        }
    }
    Ok(EncodedBucket {
        bucket,
        timestamp,
        hashes,
        keys,
    })
}
