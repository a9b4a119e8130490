//! Crash sets and request batches chosen with full read access to the
//! cluster, at period boundaries only.

use std::collections::BTreeSet;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::buckets::fbucket;
use crate::cluster::{Cluster, LookupRequest, RequestBatch, WriteRequest};
use crate::oracle::GlobalDirectory;
use crate::storage;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "strategy", rename_all = "snake_case", deny_unknown_fields)]
pub enum CrashStrategy {
    #[default]
    None,
    /// `count` servers uniformly at random.
    Random { count: usize },
    /// The first `count` servers of one randomly chosen sub-butterfly of
    /// `k^level` columns.
    Prefix { count: usize, level: usize },
    /// The servers holding most pieces of a victim item. Without an explicit
    /// victim a random live key is attacked.
    PlacementInformed {
        count: usize,
        #[serde(default)]
        victim: Option<u64>,
    },
    Fixed { servers: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "snake_case", deny_unknown_fields)]
pub enum RequestStrategy {
    /// Each intact server writes with probability `write_prob` and looks up
    /// with probability `lookup_prob`. Keys come from `0..key_space`; lookups
    /// prefer live keys except for a fraction `absent_prob`.
    Mixed {
        write_prob: f64,
        lookup_prob: f64,
        key_space: u64,
        #[serde(default)]
        absent_prob: f64,
    },
    /// Every intact server looks up the same key; a live one unless given.
    HotSpot {
        #[serde(default)]
        key: Option<u64>,
    },
    /// Every intact server writes a distinct fresh key from `0..key_space`.
    FillAll { key_space: u64 },
    Explicit {
        #[serde(default)]
        writes: Vec<(usize, u64)>,
        #[serde(default)]
        lookups: Vec<(usize, u64)>,
    },
}

impl Default for RequestStrategy {
    fn default() -> Self {
        RequestStrategy::Explicit {
            writes: Vec::new(),
            lookups: Vec::new(),
        }
    }
}

/// Where the current version of `key` lives: its shallowest bucket whose
/// newest encoding holds a piece of it. Returns the zone and the servers of
/// pieces `1..=c`.
pub fn piece_holders(cluster: &Cluster, key: u64) -> Option<(usize, Vec<usize>)> {
    let p = &cluster.params;
    let n = p.n();
    for zone in 0..=p.address_bits {
        let bucket = fbucket(zone, key, p.address_bits).ok()?;
        let Some((ts, hashes)) = cluster.current_encoding(bucket) else {
            continue;
        };
        let holders: Vec<usize> = (1..=p.c).map(|j| hashes.server_for(key, j, n)).collect();
        let present = holders.iter().zip(1..).any(|(&s, j)| {
            cluster.servers[s]
                .buckets
                .get(&bucket)
                .filter(|st| st.timestamp == ts)
                .is_some_and(|st| matches!(storage::find_piece(&st.level0, key, j), Ok(Some(_))))
        });
        if present {
            return Some((zone, holders));
        }
    }
    None
}

/// The `count` servers holding most pieces, ties broken by lower id.
pub fn top_holders(holders: &[usize], count: usize) -> Vec<usize> {
    let mut tally: std::collections::BTreeMap<usize, usize> = std::collections::BTreeMap::new();
    for &s in holders {
        *tally.entry(s).or_default() += 1;
    }
    let mut ranked: Vec<(usize, usize)> = tally.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut out: Vec<usize> = ranked.into_iter().take(count).map(|(s, _)| s).collect();
    out.sort_unstable();
    out
}

/// A live key picked at random, if any.
fn random_live_key(directory: &GlobalDirectory, rng: &mut ChaCha8Rng) -> Option<u64> {
    let n = directory.live_count();
    (n > 0).then(|| directory.live_keys().nth(rng.gen_range(0..n)).expect("index below count"))
}

/// Chooses the crash set; the result never exceeds `budget`. Returns the
/// victim key for placement-informed attacks.
pub fn choose_crash_set(
    strategy: &CrashStrategy,
    cluster: &Cluster,
    directory: &GlobalDirectory,
    budget: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<usize>, Option<u64>) {
    let n = cluster.n();
    let mut victim = None;
    let mut set = match strategy {
        CrashStrategy::None => Vec::new(),
        CrashStrategy::Random { count } => index::sample(rng, n, (*count).min(budget).min(n - 1)).into_vec(),
        CrashStrategy::Prefix { count, level } => {
            let topo = cluster.params.topology;
            let width = topo.place((*level).min(topo.d()));
            let base = rng.gen_range(0..n / width) * width;
            (base..base + (*count).min(width)).collect()
        }
        CrashStrategy::PlacementInformed { count, victim: v } => {
            victim = v.or_else(|| random_live_key(directory, rng));
            match victim.and_then(|key| piece_holders(cluster, key)) {
                Some((_, holders)) => top_holders(&holders, *count),
                None => Vec::new(),
            }
        }
        CrashStrategy::Fixed { servers } => servers.clone(),
    };
    set.sort_unstable();
    set.dedup();
    set.truncate(budget);
    (set, victim)
}

/// Payload for a write: deterministic in the stream, distinct per call.
pub fn random_payload(len: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
    (0..len).map(|_| rng.gen()).collect()
}

/// Builds the period's batch. `victim` lookups, when given, are issued from
/// the lowest-id intact servers that have no other lookup.
pub fn choose_requests(
    strategy: &RequestStrategy,
    cluster: &Cluster,
    directory: &GlobalDirectory,
    crashed: &[usize],
    victim: Option<(u64, usize)>,
    rng: &mut ChaCha8Rng,
) -> RequestBatch {
    let p = &cluster.params;
    let n = p.n();
    let down: BTreeSet<usize> = crashed.iter().copied().collect();
    let intact: Vec<usize> = (0..n).filter(|s| !down.contains(s)).collect();
    let live: Vec<u64> = directory.live_keys().collect();
    let limit = p.key_limit();
    let mut batch = RequestBatch::default();
    match strategy {
        RequestStrategy::Mixed {
            write_prob,
            lookup_prob,
            key_space,
            absent_prob,
        } => {
            let space = (*key_space).clamp(1, limit);
            for &s in &intact {
                if rng.gen_bool(write_prob.clamp(0.0, 1.0)) {
                    // overwrite a live key half of the time
                    let key = if !live.is_empty() && rng.gen_bool(0.5) {
                        *live.choose(rng).expect("non-empty")
                    } else {
                        rng.gen_range(0..space)
                    };
                    batch.writes.push(WriteRequest {
                        server: s,
                        key,
                        payload: random_payload(p.payload_len, rng),
                    });
                }
                if rng.gen_bool(lookup_prob.clamp(0.0, 1.0)) {
                    let key = if live.is_empty() || rng.gen_bool(absent_prob.clamp(0.0, 1.0)) {
                        rng.gen_range(0..space)
                    } else {
                        *live.choose(rng).expect("non-empty")
                    };
                    batch.lookups.push(LookupRequest { server: s, key });
                }
            }
        }
        RequestStrategy::HotSpot { key } => {
            let key = key.or_else(|| live.choose(rng).copied()).unwrap_or(0);
            batch.lookups = intact.iter().map(|&server| LookupRequest { server, key }).collect();
        }
        RequestStrategy::FillAll { key_space } => {
            let space = (*key_space).clamp(1, limit);
            let mut taken: BTreeSet<u64> = live.iter().copied().collect();
            for &s in &intact {
                if taken.len() as u64 >= space {
                    break;
                }
                let key = loop {
                    let k = rng.gen_range(0..space);
                    if taken.insert(k) {
                        break k;
                    }
                };
                batch.writes.push(WriteRequest {
                    server: s,
                    key,
                    payload: random_payload(p.payload_len, rng),
                });
            }
        }
        RequestStrategy::Explicit { writes, lookups } => {
            for &(server, key) in writes {
                batch.writes.push(WriteRequest {
                    server,
                    key,
                    payload: random_payload(p.payload_len, rng),
                });
            }
            for &(server, key) in lookups {
                batch.lookups.push(LookupRequest { server, key });
            }
        }
    }
    if let Some((key, count)) = victim {
        let busy: BTreeSet<usize> = batch.lookups.iter().map(|l| l.server).collect();
        let free: Vec<usize> = intact.iter().copied().filter(|s| !busy.contains(s)).take(count).collect();
        batch.lookups.extend(free.into_iter().map(|server| LookupRequest { server, key }));
    }
    batch
}
