//! Centralized ground truth kept beside the simulated cluster.
//!
//! The directory records every applied write, so answers can be judged, and
//! mirrors the bucket tree from the encodings each write stage reports.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::buckets::{bucket_size_check, BucketId, HashFamily, SizeViolation};
use crate::butterfly::{NodeId, Topology};
use crate::cluster::{Cluster, LookupRequest};
use crate::codec::DataItem;
use crate::lookup_protocol::{LookupOutcome, LookupStats};
use crate::params::Params;
use crate::storage;
use crate::write_protocol::EncodedBucket;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Correct,
    CorrectNotExists,
    /// The protocol reported failure instead of answering.
    Unanswered,
    /// The key lost its newest version to an unrecoverable write decode, and
    /// the answer is one of its older versions or `NotExists`.
    Degraded,
    StaleVersion,
    WrongValue,
    FalseNotExists,
    PhantomAnswer,
}

impl Verdict {
    /// Answers that contradict the directory.
    pub fn is_violation(self) -> bool {
        matches!(
            self,
            Verdict::StaleVersion | Verdict::WrongValue | Verdict::FalseNotExists | Verdict::PhantomAnswer
        )
    }
}

/// A bucket as last encoded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BucketEntry {
    pub timestamp: u64,
    pub hashes: HashFamily,
    pub keys: Vec<u64>,
}

#[derive(Debug, Clone, Default)]
pub struct GlobalDirectory {
    /// Every version written per key, oldest first.
    history: BTreeMap<u64, Vec<(u64, Vec<u8>)>>,
    /// Keys whose newest version was lost during a write decode.
    lost: BTreeSet<u64>,
    buckets: BTreeMap<BucketId, BucketEntry>,
}

impl GlobalDirectory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record_writes(&mut self, items: &[DataItem]) {
        for item in items {
            let versions = self.history.entry(item.key).or_default();
            versions.push((item.version, item.payload.clone()));
            versions.sort_by_key(|v| v.0);
            self.lost.remove(&item.key);
        }
    }

    /// Marks the current version of each key as lost. Call before recording
    /// the same period's writes, which supersede the loss.
    pub fn record_losses(&mut self, lost: &[u64]) {
        for &key in lost {
            if self.history.contains_key(&key) {
                self.lost.insert(key);
            }
        }
    }

    pub fn record_encodings(&mut self, encodings: &[EncodedBucket]) {
        for e in encodings {
            self.buckets.insert(
                e.bucket,
                BucketEntry {
                    timestamp: e.timestamp,
                    hashes: e.hashes.clone(),
                    keys: e.keys.clone(),
                },
            );
        }
    }

    pub fn latest(&self, key: u64) -> Option<(u64, &[u8])> {
        self.history
            .get(&key)
            .and_then(|v| v.last())
            .map(|(ver, p)| (*ver, p.as_slice()))
    }

    pub fn live_keys(&self) -> impl Iterator<Item = u64> + '_ {
        self.history.keys().copied()
    }

    pub fn live_count(&self) -> usize {
        self.history.len()
    }

    pub fn is_lost(&self, key: u64) -> bool {
        self.lost.contains(&key)
    }

    pub fn buckets(&self) -> &BTreeMap<BucketId, BucketEntry> {
        &self.buckets
    }

    pub fn judge(&self, req: &LookupRequest, outcome: &LookupOutcome) -> Verdict {
        let versions = self.history.get(&req.key);
        let lost = self.lost.contains(&req.key);
        match (outcome, versions) {
            (LookupOutcome::Failed { .. }, _) => Verdict::Unanswered,
            (LookupOutcome::NotExists, None) => Verdict::CorrectNotExists,
            (LookupOutcome::NotExists, Some(_)) if lost => Verdict::Degraded,
            (LookupOutcome::NotExists, Some(_)) => Verdict::FalseNotExists,
            (LookupOutcome::Answered { .. }, None) => Verdict::PhantomAnswer,
            (LookupOutcome::Answered { version, payload, .. }, Some(vs)) => {
                let (newest, newest_payload) = vs.last().expect("history entries are non-empty");
                if version == newest {
                    if payload == newest_payload {
                        Verdict::Correct
                    } else {
                        Verdict::WrongValue
                    }
                } else {
                    match vs.iter().find(|(v, _)| v == version) {
                        Some((_, p)) if p == payload && lost => Verdict::Degraded,
                        Some((_, p)) if p == payload => Verdict::StaleVersion,
                        _ => Verdict::WrongValue,
                    }
                }
            }
        }
    }

    /// Buckets whose last encoding breaks the size rule.
    pub fn size_violations(&self, n: usize) -> Vec<SizeViolation> {
        self.buckets
            .iter()
            .filter_map(|(&id, b)| bucket_size_check(id, b.keys.len(), n).err())
            .collect()
    }

    /// Total payload bytes of the newest version of every key.
    pub fn live_bytes(&self) -> usize {
        self.history.values().map(|v| v.last().map_or(0, |(_, p)| p.len())).sum()
    }
}

/// Stored bytes over live payload bytes; 0 for an empty system.
pub fn measure_redundancy(cluster: &Cluster, directory: &GlobalDirectory) -> f64 {
    let live = directory.live_bytes();
    if live == 0 {
        return 0.0;
    }
    cluster.stored_bytes() as f64 / live as f64
}

/// Expected maximum of `m` independent Poisson(`lambda`) counts.
fn expected_max_poisson(lambda: f64, m: usize) -> f64 {
    if lambda <= 0.0 {
        return 0.0;
    }
    let (mut pmf, mut cdf, mut sum) = ((-lambda).exp(), 0.0, 0.0);
    let mut t = 0.0;
    loop {
        cdf += pmf;
        let tail = 1.0 - cdf.min(1.0).powi(m as i32);
        if tail < 1e-12 && t > lambda {
            return sum;
        }
        sum += tail;
        t += 1.0;
        pmf *= lambda / t;
    }
}

/// Expected bytes one server stores for a bucket of `items` items.
///
/// Each server receives about Poisson(items * c / n) pieces. A group parity
/// is sized by the longest block among the `k^(level + 1)` columns feeding
/// it, so each level uses the expected maximum over that many columns.
pub fn predicted_stack_bytes(params: &Params, items: usize) -> f64 {
    let (n, k, d) = (params.n(), params.k(), params.d());
    let wire = storage::piece_wire_len(params.body_len()) as f64;
    let lambda = items as f64 * params.c as f64 / n as f64;
    let header = storage::BLOCK_HEADER_LEN as f64;
    let frame = storage::FRAME_LEN as f64;
    let mut stored = header + lambda * wire;
    // bytes every block carries above its level-0 part
    let mut above = 0.0;
    for level in 0..d {
        let longest = header + expected_max_poisson(lambda, k.pow(level as u32 + 1)) * wire + above;
        let parity = ((frame + longest) / (k - 1) as f64).ceil();
        stored += frame + parity;
        above += frame + parity;
    }
    stored + storage::TIMESTAMP_LEN as f64 + 8.0 * params.c as f64
}

/// Redundancy predicted from the codec parameters and the bucket sizes.
pub fn predicted_redundancy(params: &Params, directory: &GlobalDirectory) -> f64 {
    let live = directory.live_bytes();
    if live == 0 {
        return 0.0;
    }
    let stored: f64 = directory
        .buckets
        .values()
        .map(|b| params.n() as f64 * predicted_stack_bytes(params, b.keys.len()))
        .sum();
    stored / live as f64
}

/// Columns lying in a blocked sub-butterfly at `level`: one whose `k^level`
/// columns contain at least `ceil(2^(level - 1))` crashed servers.
pub fn blocked_columns(topo: &Topology, crashed: &[bool], level: usize) -> Vec<bool> {
    let need = if level == 0 { 1 } else { 1usize << (level - 1) };
    let width = topo.place(level);
    let mut out = vec![false; topo.n()];
    for base in (0..topo.n()).step_by(width) {
        let range = topo.sub_butterfly_columns(NodeId::new(level, base));
        let hit = range.clone().filter(|&x| crashed[x]).count();
        if hit >= need {
            for x in range {
                out[x] = true;
            }
        }
    }
    out
}

/// Lemma statistics of one period.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct LemmaReport {
    /// Largest number of pieces of one encoded item mapped into blocked
    /// sub-butterflies, maximized over levels.
    pub max_blocked_pieces: usize,
    pub blocked_piece_limit: f64,
    pub placement_ok: bool,
    /// Largest `belongs[z][l] / (gamma * n / k^(l-1))` over zones and levels.
    pub belongs_ratio: f64,
    pub belongs_ok: bool,
    /// Largest `entered[z][l] / (phi * n / k^l)`, `phi = 3 * gamma * k`.
    pub entered_ratio: f64,
    pub entered_ok: bool,
}

pub const LEMMA_GAMMA: f64 = 1.0 / 36.0;

pub fn lemma_report(params: &Params, crashed: &[bool], directory: &GlobalDirectory, stats: &LookupStats) -> LemmaReport {
    let topo = params.topology;
    let (n, k, d, c) = (params.n(), params.k(), params.d(), params.c);
    let mut max_blocked = 0;
    for level in 0..=d {
        let blocked = blocked_columns(&topo, crashed, level);
        if !blocked.iter().any(|&b| b) {
            continue;
        }
        for entry in directory.buckets.values() {
            for &key in &entry.keys {
                let hits = (1..=c).filter(|&j| blocked[entry.hashes.server_for(key, j, n)]).count();
                max_blocked = max_blocked.max(hits);
            }
        }
    }
    let limit = c as f64 / 6.0;

    let mut belongs_ratio: f64 = 0.0;
    let mut entered_ratio: f64 = 0.0;
    let phi = 3.0 * LEMMA_GAMMA * k as f64;
    for zone in 0..stats.belongs.len() {
        for level in 1..=d {
            let b = stats.belongs[zone][level] as f64;
            let bound = LEMMA_GAMMA * n as f64 / (k as f64).powi(level as i32 - 1);
            belongs_ratio = belongs_ratio.max(b / bound);
            let e = stats.entered[zone][level] as f64;
            let bound = phi * n as f64 / (k as f64).powi(level as i32);
            entered_ratio = entered_ratio.max(e / bound);
        }
    }
    LemmaReport {
        max_blocked_pieces: max_blocked,
        blocked_piece_limit: limit,
        placement_ok: max_blocked as f64 <= limit,
        belongs_ratio,
        belongs_ok: belongs_ratio <= 1.0,
        entered_ratio,
        entered_ok: entered_ratio <= 1.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn item(key: u64, version: u64, fill: u8) -> DataItem {
        DataItem {
            key,
            payload: vec![fill; 4],
            version,
        }
    }

    fn req(key: u64) -> LookupRequest {
        LookupRequest { server: 0, key }
    }

    fn answered(version: u64, fill: u8) -> LookupOutcome {
        LookupOutcome::Answered {
            zone: 0,
            version,
            payload: vec![fill; 4],
        }
    }

    #[test]
    fn verdicts_follow_history() {
        let mut dir = GlobalDirectory::new();
        dir.record_writes(&[item(5, 10, 1)]);
        dir.record_writes(&[item(5, 20, 2)]);
        assert_eq!(dir.judge(&req(5), &answered(20, 2)), Verdict::Correct);
        assert_eq!(dir.judge(&req(5), &answered(10, 1)), Verdict::StaleVersion);
        assert_eq!(dir.judge(&req(5), &answered(20, 1)), Verdict::WrongValue);
        assert_eq!(dir.judge(&req(5), &LookupOutcome::NotExists), Verdict::FalseNotExists);
        assert_eq!(dir.judge(&req(6), &LookupOutcome::NotExists), Verdict::CorrectNotExists);
        assert_eq!(dir.judge(&req(6), &answered(1, 1)), Verdict::PhantomAnswer);
        let failed = LookupOutcome::Failed {
            zone: 0,
            reason: String::new(),
        };
        assert_eq!(dir.judge(&req(5), &failed), Verdict::Unanswered);
        assert!(!Verdict::Unanswered.is_violation());
    }

    #[test]
    fn lost_keys_degrade_instead_of_violating() {
        let mut dir = GlobalDirectory::new();
        dir.record_writes(&[item(5, 10, 1)]);
        dir.record_writes(&[item(5, 20, 2)]);
        dir.record_losses(&[5]);
        assert_eq!(dir.judge(&req(5), &answered(10, 1)), Verdict::Degraded);
        assert_eq!(dir.judge(&req(5), &LookupOutcome::NotExists), Verdict::Degraded);
        dir.record_writes(&[item(5, 30, 3)]);
        assert_eq!(dir.judge(&req(5), &LookupOutcome::NotExists), Verdict::FalseNotExists);
    }

    #[test]
    fn blocked_columns_by_level() {
        let t = Topology::new(2, 3).unwrap();
        let mut crashed = vec![false; 8];
        crashed[5] = true;
        assert_eq!(blocked_columns(&t, &crashed, 0), (0..8).map(|x| x == 5).collect::<Vec<_>>());
        assert_eq!(blocked_columns(&t, &crashed, 1), (0..8).map(|x| x == 4 || x == 5).collect::<Vec<_>>());
        // level 2 needs two crashes among four columns
        assert!(blocked_columns(&t, &crashed, 2).iter().all(|&b| !b));
        crashed[6] = true;
        assert_eq!(blocked_columns(&t, &crashed, 2), (0..8).map(|x| x >= 4).collect::<Vec<_>>());
    }
}
