//! The lookup stage: zone by zone, metadata, probing, then decoding.
//!
//! Probes for piece `i` of a key travel from a random start node on level
//! `d` to the level-0 node of `h_i(key)`, fixing one digit per hop. Nodes
//! combine probes for the same piece and answer along the reversed path.
//! Requests that collect too few pieces are placed at a level and retried by
//! decoding whole sub-butterflies around the stuck probes.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::seq::index;
use rand::Rng;
use serde::Serialize;

use crate::buckets::{fbucket, BucketId, HashFamily};
use crate::butterfly::{Direction, NodeId, Topology};
use crate::cluster::{Ctx, LookupRequest};
use crate::codec::{self, Piece};
use crate::recovery::{self, RecoveryJob};
use crate::rng;
use crate::simnet::{Endpoint, Envelope, Message, ProbeOutcome, Stage};
use crate::storage;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "result", rename_all = "snake_case")]
pub enum LookupOutcome {
    Answered {
        zone: usize,
        version: u64,
        #[serde(skip)]
        payload: Vec<u8>,
    },
    NotExists,
    Failed {
        zone: usize,
        reason: String,
    },
}

/// Counters behind the lookup lemma checks and the combining measurement.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct LookupStats {
    /// `belongs[z][l]`: distinct keys placed at level `l` after probing zone `z`.
    pub belongs: Vec<Vec<usize>>,
    /// `entered[z][l]`: distinct keys entering decoding sub-phase `l` in zone `z`.
    pub entered: Vec<Vec<usize>>,
    pub answered_by_probing: usize,
    pub answered_by_decoding: usize,
    /// Requests classified while fewer than `2c/3` probes failed at level 0.
    pub mixed_classifications: usize,
    /// Distinct (node, probe) pairs handled during probing.
    pub probe_node_visits: usize,
    /// Node visits without combining: `c * (d + 1)` per probing request.
    pub naive_probe_visits: usize,
    /// Largest number of metadata queries one server answered in a zone.
    pub metadata_max_load: usize,
}

/// One probe launched by a request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProbeRecord {
    pub index: u16,
    pub start: usize,
    pub target: usize,
    pub outcome: Option<ProbeOutcome>,
}

impl ProbeRecord {
    /// Passed level `level` and every level above it.
    pub fn active_at(&self, level: usize) -> bool {
        match &self.outcome {
            Some(ProbeOutcome::Fail { level: stopped }) => *stopped < level,
            Some(_) => true,
            None => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Classification {
    Answer,
    /// The key is not in this zone's bucket.
    Absent,
    /// Belongs to a level; `mixed` when at most `2c/3` probes failed at level 0.
    Level { level: usize, mixed: bool },
}

/// Decision after probing, given the probe outcomes of one request.
pub fn classify(records: &[ProbeRecord], c: usize, d: usize) -> Classification {
    let pieces: BTreeSet<u16> = records
        .iter()
        .filter(|r| matches!(r.outcome, Some(ProbeOutcome::Piece(_))))
        .map(|r| r.index)
        .collect();
    if pieces.len() >= codec::rs_threshold(c) {
        return Classification::Answer;
    }
    if records.iter().any(|r| r.outcome == Some(ProbeOutcome::NotExists)) {
        return Classification::Absent;
    }
    let level0_fails = records
        .iter()
        .filter(|r| r.outcome == Some(ProbeOutcome::Fail { level: 0 }))
        .count();
    let quorum = (5 * c).div_ceil(6);
    let level = (1..=d)
        .find(|&l| records.iter().filter(|r| r.active_at(l)).count() >= quorum)
        .unwrap_or(1);
    Classification::Level {
        level,
        mixed: 3 * level0_fails <= 2 * c,
    }
}

type ProbeId = (u64, u16, u64);

/// Reverse-path bookkeeping with combining: who asked each node for what.
#[derive(Default)]
struct Origins {
    map: BTreeMap<NodeId, BTreeMap<ProbeId, Vec<Endpoint>>>,
}

impl Origins {
    /// Records an origin; true if the node sees this probe for the first time.
    fn add(&mut self, node: NodeId, id: ProbeId, from: Endpoint) -> bool {
        let per = self.map.entry(node).or_default();
        match per.get_mut(&id) {
            Some(list) => {
                if !list.contains(&from) {
                    list.push(from);
                }
                false
            }
            None => {
                per.insert(id, vec![from]);
                true
            }
        }
    }

    fn take(&mut self, node: NodeId, id: ProbeId) -> Vec<Endpoint> {
        self.map
            .get_mut(&node)
            .and_then(|per| per.remove(&id))
            .unwrap_or_default()
    }
}

fn endpoint_server(ctx: &Ctx, e: Endpoint) -> usize {
    match e {
        Endpoint::Node(v) => ctx.rep(v.column),
        Endpoint::Server(s) => s,
    }
}

fn next_hop(topo: &Topology, at: NodeId, target: usize) -> NodeId {
    let level = at.level - 1;
    NodeId::new(level, topo.with_digit(at.column, level, topo.digit_at(target, level)))
}

/// A request still looking for its key.
struct Pending {
    id: usize,
    server: usize,
    key: u64,
    t: u64,
    hashes: HashFamily,
    records: Vec<ProbeRecord>,
    pieces: BTreeMap<u16, Piece>,
    level: usize,
}

enum ZoneResult {
    Done(LookupOutcome),
    NextZone,
}

pub fn lookup_stage(ctx: &mut Ctx, lookups: &[LookupRequest]) -> (Vec<LookupOutcome>, LookupStats) {
    let mut stats = LookupStats::default();
    let mut outcomes: Vec<Option<LookupOutcome>> = vec![None; lookups.len()];
    for zone in 0..=ctx.params.address_bits {
        let open: Vec<usize> = (0..lookups.len()).filter(|&i| outcomes[i].is_none()).collect();
        if open.is_empty() {
            break;
        }
        stats.belongs.push(vec![0; ctx.topo().d() + 1]);
        stats.entered.push(vec![0; ctx.topo().d() + 1]);
        let results = examine_zone(ctx, zone, lookups, &open, &mut stats);
        for (i, r) in open.into_iter().zip(results) {
            if let ZoneResult::Done(o) = r {
                outcomes[i] = Some(o);
            }
        }
    }
    (
        outcomes
            .into_iter()
            .map(|o| o.unwrap_or(LookupOutcome::NotExists))
            .collect(),
        stats,
    )
}

fn examine_zone(
    ctx: &mut Ctx,
    zone: usize,
    lookups: &[LookupRequest],
    open: &[usize],
    stats: &mut LookupStats,
) -> Vec<ZoneResult> {
    let mut results: Vec<Option<ZoneResult>> = (0..open.len()).map(|_| None).collect();
    let metas = acquire_metadata(ctx, zone, lookups, open, stats);
    let mut pending: Vec<Pending> = Vec::new();
    for (slot, (&i, meta)) in open.iter().zip(metas).enumerate() {
        let req = lookups[i];
        match meta {
            None => results[slot] = Some(ZoneResult::NextZone),
            Some((t, hashes)) => pending.push(Pending {
                id: slot,
                server: req.server,
                key: req.key,
                t,
                hashes,
                records: Vec::new(),
                pieces: BTreeMap::new(),
                level: 0,
            }),
        }
    }
    if !pending.is_empty() {
        probing_phase(ctx, zone, &mut pending, stats);
        let c = ctx.params.c;
        let d = ctx.topo().d();
        let mut levels: BTreeMap<usize, BTreeSet<u64>> = BTreeMap::new();
        for p in &mut pending {
            for r in &p.records {
                if let Some(ProbeOutcome::Piece(piece)) = &r.outcome {
                    p.pieces.insert(piece.index, piece.clone());
                }
            }
            match classify(&p.records, c, d) {
                Classification::Answer => {
                    stats.answered_by_probing += 1;
                    results[p.id] = Some(answer(ctx, zone, p));
                }
                Classification::Absent => results[p.id] = Some(ZoneResult::NextZone),
                Classification::Level { level, mixed } => {
                    if mixed {
                        stats.mixed_classifications += 1;
                    }
                    p.level = level;
                    levels.entry(level).or_default().insert(p.key);
                }
            }
        }
        for (level, keys) in levels {
            stats.belongs[zone][level] = keys.len();
        }
        pending.retain(|p| results[p.id].is_none());
        for level in 1..=d {
            if pending.is_empty() {
                break;
            }
            let members: Vec<usize> = (0..pending.len()).filter(|&j| pending[j].level == level).collect();
            let keys: BTreeSet<u64> = members.iter().map(|&j| pending[j].key).collect();
            stats.entered[zone][level] = keys.len();
            if members.is_empty() {
                ctx.net.idle(Stage::Decoding, subphase_rounds(d, level));
                continue;
            }
            let verdicts = decoding_subphase(ctx, zone, level, &mut pending, &members);
            for (j, verdict) in members.into_iter().zip(verdicts) {
                let p = &mut pending[j];
                match verdict {
                    Classification::Answer => {
                        stats.answered_by_decoding += 1;
                        results[p.id] = Some(answer(ctx, zone, p));
                    }
                    Classification::Absent => results[p.id] = Some(ZoneResult::NextZone),
                    Classification::Level { .. } => p.level = level + 1,
                }
            }
            pending.retain(|p| results[p.id].is_none());
        }
        for p in pending {
            results[p.id] = Some(ZoneResult::Done(LookupOutcome::Failed {
                zone,
                reason: format!("no level up to {d} yielded enough pieces"),
            }));
        }
    }
    results
        .into_iter()
        .map(|r| r.expect("every request resolved in its zone"))
        .collect()
}

fn answer(ctx: &Ctx, zone: usize, p: &Pending) -> ZoneResult {
    let pieces: Vec<Piece> = p.pieces.values().cloned().collect();
    match codec::rs_decode(&pieces, ctx.params.c, ctx.params.payload_len) {
        Ok(payload) => ZoneResult::Done(LookupOutcome::Answered {
            zone,
            version: pieces[0].version,
            payload,
        }),
        Err(e) => ZoneResult::Done(LookupOutcome::Failed {
            zone,
            reason: e.to_string(),
        }),
    }
}

/// Samples `kappa` intact servers per request for the bucket's newest
/// timestamp, then fetches the seeds from one holder when the requester's
/// own copy is older. `None` means no sampled server has the bucket.
pub fn acquire_metadata(
    ctx: &mut Ctx,
    zone: usize,
    lookups: &[LookupRequest],
    open: &[usize],
    stats: &mut LookupStats,
) -> Vec<Option<(u64, HashFamily)>> {
    let n = ctx.n();
    let width = ctx.params.address_bits;
    let intact: Vec<usize> = (0..n).filter(|&s| !ctx.crashed(s)).collect();
    let kappa = ctx.params.kappa().min(intact.len());
    for &i in open {
        let req = lookups[i];
        let bucket = fbucket(zone, req.key, width).expect("zone within address width");
        let mut rng = ctx.rng(&[rng::METADATA, zone as u64, req.server as u64]);
        for j in index::sample(&mut rng, intact.len(), kappa) {
            ctx.net.send(req.server, intact[j], Message::TsQuery { bucket, request: i });
        }
    }
    let inboxes = ctx.net.deliver(Stage::LookupMetadata);
    let load = inboxes.iter().map(Vec::len).max().unwrap_or(0);
    stats.metadata_max_load = stats.metadata_max_load.max(load);
    for (server, inbox) in inboxes.iter().enumerate() {
        for env in inbox {
            if let Message::TsQuery { bucket, request } = env.msg {
                let timestamp = ctx.stack(server, bucket).map(|st| st.timestamp);
                ctx.net.send(server, env.src, Message::TsReply { bucket, request, timestamp });
            }
        }
    }
    let inboxes = ctx.net.deliver(Stage::LookupMetadata);
    // request -> (newest timestamp, lowest server reporting it)
    let mut best: BTreeMap<usize, (u64, usize)> = BTreeMap::new();
    for env in inboxes.iter().flatten() {
        if let Message::TsReply {
            request,
            timestamp: Some(ts),
            ..
        } = env.msg
        {
            let e = best.entry(request).or_insert((ts, env.src));
            if ts > e.0 || (ts == e.0 && env.src < e.1) {
                *e = (ts, env.src);
            }
        }
    }
    let mut out: BTreeMap<usize, (u64, HashFamily)> = BTreeMap::new();
    let mut fetch = false;
    for &i in open {
        let req = lookups[i];
        let Some(&(ts, holder)) = best.get(&i) else {
            continue;
        };
        let bucket = fbucket(zone, req.key, width).expect("zone within address width");
        match ctx.stack(req.server, bucket) {
            Some(st) if st.timestamp == ts => {
                out.insert(i, (ts, st.hashes.clone()));
            }
            _ => {
                fetch = true;
                ctx.net.send(req.server, holder, Message::SeedsQuery { bucket, request: i });
            }
        }
    }
    if fetch {
        let inboxes = ctx.net.deliver(Stage::LookupMetadata);
        for (server, inbox) in inboxes.iter().enumerate() {
            for env in inbox {
                if let Message::SeedsQuery { bucket, request } = env.msg {
                    if let Some(st) = ctx.stack(server, bucket) {
                        let hashes = st.hashes.clone();
                        ctx.net.send(server, env.src, Message::SeedsReply { request, hashes });
                    }
                }
            }
        }
        let inboxes = ctx.net.deliver(Stage::LookupMetadata);
        for env in inboxes.into_iter().flatten() {
            if let Message::SeedsReply { request, hashes } = env.msg {
                out.insert(request, (best[&request].0, hashes));
            }
        }
    }
    open.iter().map(|i| out.remove(i)).collect()
}

fn probing_phase(ctx: &mut Ctx, zone: usize, reqs: &mut [Pending], stats: &mut LookupStats) {
    let topo = ctx.topo();
    let (n, d) = (topo.n(), topo.d());
    let c = ctx.params.c;
    let width = ctx.params.address_bits;
    let cap = (ctx.params.alpha * c as f64).floor() as usize;
    let intact: Vec<usize> = (0..n).filter(|&s| !ctx.crashed(s)).collect();

    let mut by_server: BTreeMap<(usize, u64), usize> = BTreeMap::new();
    for (j, p) in reqs.iter_mut().enumerate() {
        by_server.insert((p.server, p.key), j);
        let mut rng = ctx.rng(&[rng::PROBE_START, zone as u64, p.server as u64]);
        for i in 1..=c {
            let start = intact[rng.gen_range(0..intact.len())];
            let target = p.hashes.server_for(p.key, i, n);
            p.records.push(ProbeRecord {
                index: i as u16,
                start,
                target,
                outcome: None,
            });
            ctx.net.send(
                p.server,
                start,
                Message::Probe {
                    to: NodeId::new(d, start),
                    from: Endpoint::Server(p.server),
                    key: p.key,
                    index: i as u16,
                    t: p.t,
                    target,
                },
            );
        }
        stats.naive_probe_visits += c * (d + 1);
    }

    let mut origins = Origins::default();
    while ctx.net.in_flight() > 0 {
        let inboxes = ctx.net.deliver(Stage::Probing);
        // probes first: they decide congestion for the whole round
        let mut arriving: BTreeMap<NodeId, Vec<(ProbeId, usize)>> = BTreeMap::new();
        let mut answers: Vec<&Envelope> = Vec::new();
        for env in inboxes.iter().flatten() {
            match &env.msg {
                Message::Probe {
                    to,
                    from,
                    key,
                    index,
                    t,
                    target,
                } => {
                    let id = (*key, *index, *t);
                    if origins.add(*to, id, *from) {
                        arriving.entry(*to).or_default().push((id, *target));
                    }
                }
                Message::ProbeAnswer { .. } => answers.push(env),
                _ => {}
            }
        }
        for (node, probes) in arriving {
            // every probe reaches a level-l node exactly d - l rounds after
            // launch, so this round's arrivals are all the node will see
            stats.probe_node_visits += probes.len();
            let congested = probes.len() > cap;
            for ((key, index, t), target) in probes {
                let outcome = if congested {
                    Some(ProbeOutcome::Fail { level: node.level })
                } else if node.level > 0 {
                    let next = next_hop(&topo, node, target);
                    ctx.send_between(
                        node.column,
                        next.column,
                        Message::Probe {
                            to: next,
                            from: Endpoint::Node(node),
                            key,
                            index,
                            t,
                            target,
                        },
                    );
                    None
                } else {
                    let bucket = fbucket(zone, key, width).expect("zone within address width");
                    Some(level0_answer(ctx, node.column, bucket, key, index, t))
                };
                if let Some(outcome) = outcome {
                    reply(ctx, &mut origins, node, (key, index, t), outcome, false);
                }
            }
        }
        for env in answers {
            if let Message::ProbeAnswer {
                to,
                key,
                index,
                t,
                outcome,
                ..
            } = &env.msg
            {
                match to {
                    Endpoint::Node(v) => reply(ctx, &mut origins, *v, (*key, *index, *t), outcome.clone(), false),
                    Endpoint::Server(s) => {
                        if let Some(&j) = by_server.get(&(*s, *key)) {
                            if let Some(r) = reqs[j].records.iter_mut().find(|r| r.index == *index) {
                                r.outcome = Some(outcome.clone());
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Sends `outcome` for probe `id` from `node` to each of its origins.
fn reply(ctx: &mut Ctx, origins: &mut Origins, node: NodeId, id: ProbeId, outcome: ProbeOutcome, decoding: bool) {
    for origin in origins.take(node, id) {
        let dst = endpoint_server(ctx, origin);
        let src = ctx.rep(node.column);
        let (key, index, t) = id;
        let msg = if decoding {
            Message::DecodeAnswer {
                to: origin,
                from_node: node,
                key,
                index,
                t,
                outcome: outcome.clone(),
            }
        } else {
            Message::ProbeAnswer {
                to: origin,
                from_node: node,
                key,
                index,
                t,
                outcome: outcome.clone(),
            }
        };
        ctx.net.send(src, dst, msg);
    }
}

/// A level-0 node serves pieces only when it is emulated by its own intact
/// server holding the bucket at timestamp `t`.
fn level0_answer(ctx: &Ctx, column: usize, bucket: BucketId, key: u64, index: u16, t: u64) -> ProbeOutcome {
    match ctx.stack(column, bucket) {
        Some(st) if st.timestamp == t => match storage::find_piece(&st.level0, key, index) {
            Ok(Some(piece)) => ProbeOutcome::Piece(piece),
            Ok(None) => ProbeOutcome::NotExists,
            Err(_) => ProbeOutcome::Fail { level: 0 },
        },
        _ => ProbeOutcome::Fail { level: 0 },
    }
}

/// Rounds one decoding sub-phase occupies in the schedule.
pub fn subphase_rounds(d: usize, level: usize) -> usize {
    // route down, check window, recover, answer to v, route back
    (d - level + 1) + (2 * level + 2) + level + 1 + (d - level + 1)
}

#[derive(Default)]
struct CheckNode {
    pairs: BTreeSet<(u64, u16)>,
    senders: BTreeSet<NodeId>,
    congested: bool,
    failed: bool,
}

fn decoding_subphase(
    ctx: &mut Ctx,
    zone: usize,
    level: usize,
    reqs: &mut [Pending],
    members: &[usize],
) -> Vec<Classification> {
    let topo = ctx.topo();
    let (n, k, d) = (topo.n(), topo.k(), topo.d());
    let c = ctx.params.c;
    let width = ctx.params.address_bits;
    let cap = (ctx.params.beta * (c * k) as f64).floor() as usize;
    let quorum = ctx.params.active_quorum();
    let start_round = ctx.net.round();

    // 1. DECODE from each chosen start node down to level `level`
    let mut by_server: BTreeMap<(usize, u64), usize> = BTreeMap::new();
    let mut t_of: BTreeMap<u64, u64> = BTreeMap::new();
    for &j in members {
        let p = &reqs[j];
        by_server.insert((p.server, p.key), j);
        t_of.insert(p.key, p.t);
        let active: Vec<&ProbeRecord> = p.records.iter().filter(|r| r.active_at(level)).collect();
        let mut rng = ctx.rng(&[rng::DECODE_PICK, zone as u64, level as u64, p.server as u64]);
        let take = quorum.min(active.len());
        for a in index::sample(&mut rng, active.len(), take) {
            let r = active[a];
            ctx.net.send(
                p.server,
                r.start,
                Message::Decode {
                    to: NodeId::new(d, r.start),
                    from: Endpoint::Server(p.server),
                    key: p.key,
                    index: r.index,
                    t: p.t,
                    target: r.target,
                },
            );
        }
    }
    let mut origins = Origins::default();
    // v -> pairs with their targets
    let mut at_v: BTreeMap<NodeId, BTreeMap<ProbeId, usize>> = BTreeMap::new();
    for _ in level..=d {
        let inboxes = ctx.net.deliver(Stage::Decoding);
        for env in inboxes.iter().flatten() {
            if let Message::Decode {
                to,
                from,
                key,
                index,
                t,
                target,
            } = env.msg
            {
                let id = (key, index, t);
                if !origins.add(to, id, from) {
                    continue;
                }
                if to.level > level {
                    let next = next_hop(&topo, to, target);
                    ctx.send_between(
                        to.column,
                        next.column,
                        Message::Decode {
                            to: next,
                            from: Endpoint::Node(to),
                            key,
                            index,
                            t,
                            target,
                        },
                    );
                } else {
                    at_v.entry(to).or_default().insert(id, target);
                }
            }
        }
    }

    // 2. congestion check through UT(v)
    let mut failed_v: BTreeSet<NodeId> = at_v
        .iter()
        .filter(|(_, pairs)| pairs.len() > cap)
        .map(|(v, _)| *v)
        .collect();
    let mut nodes: BTreeMap<NodeId, CheckNode> = BTreeMap::new();
    for (v, pairs) in &at_v {
        if failed_v.contains(v) {
            continue;
        }
        let list: Arc<Vec<(u64, u16)>> = Arc::new(pairs.keys().map(|&(key, i, _)| (key, i)).collect());
        for up in topo.neighbors(*v, Direction::Up).expect("level >= 1") {
            ctx.send_between(
                v.column,
                up.column,
                Message::DecodeCheck {
                    to: up,
                    from: *v,
                    pairs: list.clone(),
                },
            );
        }
    }
    let window = 2 * level + 2;
    for _ in 0..window {
        let inboxes = ctx.net.deliver(Stage::Decoding);
        let mut fresh: BTreeMap<NodeId, BTreeSet<(u64, u16)>> = BTreeMap::new();
        let mut cong: BTreeSet<NodeId> = BTreeSet::new();
        let mut fails: BTreeSet<NodeId> = BTreeSet::new();
        for env in inboxes.iter().flatten() {
            match &env.msg {
                Message::DecodeCheck { to, from, pairs } => {
                    let node = nodes.entry(*to).or_default();
                    node.senders.insert(*from);
                    let before = node.pairs.len();
                    node.pairs.extend(pairs.iter().copied());
                    if node.pairs.len() > before || node.congested {
                        fresh.entry(*to).or_default().extend(pairs.iter().copied());
                    }
                }
                Message::Cong { to } => {
                    cong.insert(*to);
                }
                Message::DecodeFail { to } => {
                    fails.insert(*to);
                }
                _ => {}
            }
        }
        let mut newly_congested: Vec<NodeId> = Vec::new();
        for (u, pairs) in fresh {
            let node = nodes.get_mut(&u).expect("entry created above");
            if node.congested {
                continue;
            }
            if node.pairs.len() > cap {
                node.congested = true;
                newly_congested.push(u);
                // same-level nodes of BF(u) start spreading as well
                for col in topo.sub_butterfly_columns(u) {
                    if col != u.column {
                        ctx.send_between(u.column, col, Message::Cong { to: NodeId::new(u.level, col) });
                    }
                }
            } else if u.level > 0 {
                let list = Arc::new(pairs.into_iter().collect::<Vec<_>>());
                for up in topo.neighbors(u, Direction::Up).expect("level >= 1") {
                    ctx.send_between(
                        u.column,
                        up.column,
                        Message::DecodeCheck {
                            to: up,
                            from: u,
                            pairs: list.clone(),
                        },
                    );
                }
            }
        }
        for u in cong {
            let node = nodes.entry(u).or_default();
            if !node.congested {
                node.congested = true;
                newly_congested.push(u);
            }
        }
        for u in newly_congested {
            if u.level > 0 {
                for up in topo.neighbors(u, Direction::Up).expect("level >= 1") {
                    ctx.send_between(u.column, up.column, Message::Cong { to: up });
                }
            }
            fails.insert(u);
        }
        for u in fails {
            if u.level == level {
                failed_v.insert(u);
                continue;
            }
            let node = nodes.entry(u).or_default();
            if node.failed {
                continue;
            }
            node.failed = true;
            for &s in &node.senders {
                ctx.send_between(u.column, s.column, Message::DecodeFail { to: s });
            }
        }
        // late checks into a failed node are failed right away
        for (u, node) in &nodes {
            if node.failed {
                for &s in &node.senders {
                    if s.level == level && !failed_v.contains(&s) {
                        ctx.send_between(u.column, s.column, Message::DecodeFail { to: s });
                    }
                }
            }
        }
    }
    // anything still travelling belongs to the expired window
    if ctx.net.in_flight() > 0 {
        let late = ctx.net.deliver(Stage::Decoding);
        for env in late.iter().flatten() {
            if let Message::DecodeFail { to } = env.msg {
                if to.level == level {
                    failed_v.insert(to);
                }
            }
        }
    }

    // 3. recover BF(v) for every surviving v, one job per bucket and sub-butterfly
    let mut wanted: BTreeMap<(BucketId, usize), (u64, BTreeSet<usize>)> = BTreeMap::new();
    for (v, pairs) in &at_v {
        if failed_v.contains(v) {
            continue;
        }
        let range = topo.sub_butterfly_columns(*v);
        for (&(key, _, t), &target) in pairs {
            let bucket = fbucket(zone, key, width).expect("zone within address width");
            wanted.entry((bucket, range.start)).or_insert((t, BTreeSet::new())).1.insert(target);
        }
    }
    let jobs: Vec<RecoveryJob> = wanted
        .iter()
        .map(|(&(bucket, base), (t, targets))| {
            let range = base..base + topo.place(level);
            let targets: Vec<usize> = targets.iter().copied().collect();
            let current = |x: usize| ctx.stack(x, bucket).is_some_and(|st| st.timestamp == *t);
            RecoveryJob {
                bucket,
                timestamp: *t,
                plan: recovery::plan_recovery(&topo, range, level, &current, &targets),
            }
        })
        .collect();
    let recovered = recovery::execute(ctx, Stage::Decoding, &jobs);
    let job_index: BTreeMap<(BucketId, usize), usize> = wanted.keys().copied().enumerate().map(|(i, key)| (key, i)).collect();

    // 4. each target reports to v; v answers along the reversed DECODE path
    for (v, pairs) in &at_v {
        if failed_v.contains(v) {
            continue;
        }
        let base = topo.sub_butterfly_columns(*v).start;
        for (&(key, index, t), &y) in pairs {
            let bucket = fbucket(zone, key, width).expect("zone within address width");
            let outcome = match ctx.stack(y, bucket) {
                Some(st) if st.timestamp == t => level0_answer(ctx, y, bucket, key, index, t),
                _ => {
                    let rec = &recovered[job_index[&(bucket, base)]];
                    match rec.blocks.get(&y) {
                        Some((block, _)) => match storage::find_piece(block, key, index) {
                            Ok(Some(piece)) => ProbeOutcome::Piece(piece),
                            Ok(None) => ProbeOutcome::NotExists,
                            Err(_) => ProbeOutcome::Fail { level: 0 },
                        },
                        None => ProbeOutcome::Fail { level },
                    }
                }
            };
            ctx.send_between(
                y,
                v.column,
                Message::DecodeAnswer {
                    to: Endpoint::Node(*v),
                    from_node: NodeId::new(0, y),
                    key,
                    index,
                    t,
                    outcome,
                },
            );
        }
    }
    for (v, pairs) in &at_v {
        if failed_v.contains(v) {
            for &id in pairs.keys() {
                reply(ctx, &mut origins, *v, id, ProbeOutcome::Fail { level }, true);
            }
        }
    }

    let mut got: BTreeMap<usize, Vec<ProbeOutcome>> = BTreeMap::new();
    while ctx.net.in_flight() > 0 {
        let inboxes = ctx.net.deliver(Stage::Decoding);
        for env in inboxes.iter().flatten() {
            if let Message::DecodeAnswer {
                to,
                key,
                index,
                t,
                outcome,
                ..
            } = &env.msg
            {
                match to {
                    Endpoint::Node(u) => reply(ctx, &mut origins, *u, (*key, *index, *t), outcome.clone(), true),
                    Endpoint::Server(s) => {
                        if let Some(&j) = by_server.get(&(*s, *key)) {
                            got.entry(j).or_default().push(outcome.clone());
                        }
                    }
                }
            }
        }
    }
    let used = ctx.net.round() - start_round;
    let planned = subphase_rounds(d, level);
    if used < planned {
        ctx.net.idle(Stage::Decoding, planned - used);
    }
    let _ = n;

    members
        .iter()
        .map(|&j| {
            let p = &mut reqs[j];
            let answers = got.remove(&j).unwrap_or_default();
            for a in &answers {
                if let ProbeOutcome::Piece(piece) = a {
                    p.pieces.insert(piece.index, piece.clone());
                }
            }
            if p.pieces.len() >= codec::rs_threshold(c) {
                Classification::Answer
            } else if answers.iter().any(|a| *a == ProbeOutcome::NotExists) {
                Classification::Absent
            } else {
                Classification::Level {
                    level: level + 1,
                    mixed: false,
                }
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(index: u16, outcome: Option<ProbeOutcome>) -> ProbeRecord {
        ProbeRecord {
            index,
            start: 0,
            target: 0,
            outcome,
        }
    }

    fn piece(index: u16) -> ProbeOutcome {
        ProbeOutcome::Piece(Piece {
            item_key: 1,
            index,
            version: 1,
            body: vec![0],
        })
    }

    #[test]
    fn enough_pieces_answer_even_with_not_exists() {
        let mut r: Vec<ProbeRecord> = (1..=2).map(|i| rec(i, Some(piece(i)))).collect();
        r.push(rec(3, Some(ProbeOutcome::NotExists)));
        r.extend((4..=6).map(|i| rec(i, Some(ProbeOutcome::Fail { level: 0 }))));
        assert_eq!(classify(&r, 6, 3), Classification::Answer);
    }

    #[test]
    fn not_exists_when_short_of_pieces() {
        let mut r = vec![rec(1, Some(piece(1))), rec(2, Some(ProbeOutcome::NotExists))];
        r.extend((3..=6).map(|i| rec(i, Some(ProbeOutcome::Fail { level: 2 }))));
        assert_eq!(classify(&r, 6, 3), Classification::Absent);
    }

    #[test]
    fn level_is_smallest_with_five_sixths_active() {
        // c = 6: quorum 5. Fails at 0,0,0,1,1,3 -> passed level 1: 3, level 2: 5
        let fails = [0usize, 0, 0, 1, 1, 3];
        let r: Vec<ProbeRecord> = fails
            .iter()
            .enumerate()
            .map(|(i, &l)| rec(i as u16 + 1, Some(ProbeOutcome::Fail { level: l })))
            .collect();
        assert_eq!(
            classify(&r, 6, 3),
            Classification::Level {
                level: 2,
                mixed: true
            }
        );
    }

    #[test]
    fn mixed_fails_fall_back_to_level_one() {
        let r: Vec<ProbeRecord> = (1..=6)
            .map(|i| rec(i, Some(ProbeOutcome::Fail { level: 3 })))
            .collect();
        assert_eq!(classify(&r, 6, 3), Classification::Level { level: 1, mixed: true });
    }

    #[test]
    fn subphase_schedule_length() {
        assert_eq!(subphase_rounds(4, 1), 4 + 4 + 1 + 1 + 4);
    }
}
