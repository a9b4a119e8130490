//! Server state and the per-period driver.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::buckets::{BucketId, HashFamily};
use crate::butterfly::Topology;
use crate::codec::{self, DataItem, Piece};
use crate::lookup_protocol::{self, LookupOutcome, LookupStats};
use crate::params::Params;
use crate::rng;
use crate::simnet::{Message, Network, RoundLedger, Stage};
use crate::storage::{self, LayoutError, LevelStack};
use crate::write_protocol::{self, RepresentativeMap, WriteError, WriteStageReport};

#[derive(Debug, Clone, Default)]
pub struct ServerState {
    pub id: usize,
    pub buckets: BTreeMap<BucketId, LevelStack>,
}

impl ServerState {
    pub fn stored_bytes(&self) -> usize {
        self.buckets.values().map(LevelStack::stored_bytes).sum()
    }
}

/// Everything a protocol stage may touch during one period.
pub struct Ctx<'a> {
    pub params: &'a Params,
    pub reps: &'a RepresentativeMap,
    pub servers: &'a mut [ServerState],
    pub net: Network<'a>,
    pub period: u64,
    pub seed: u64,
}

impl Ctx<'_> {
    pub fn topo(&self) -> Topology {
        self.params.topology
    }

    pub fn n(&self) -> usize {
        self.params.n()
    }

    pub fn crashed(&self, server: usize) -> bool {
        self.net.is_crashed(server)
    }

    pub fn rep(&self, column: usize) -> usize {
        self.reps.rep(column)
    }

    pub fn rng(&self, tags: &[u64]) -> ChaCha8Rng {
        let mut all = vec![self.period];
        all.extend_from_slice(tags);
        rng::stream(self.seed, &all)
    }

    /// The stack server `column` holds for `bucket`, if it is intact.
    pub fn stack(&self, column: usize, bucket: BucketId) -> Option<&LevelStack> {
        if self.crashed(column) {
            return None;
        }
        self.servers[column].buckets.get(&bucket)
    }

    /// Sends from the emulator of `from_column` to the emulator of `to_column`.
    pub fn send_between(&mut self, from_column: usize, to_column: usize, msg: Message) {
        let (src, dst) = (self.reps.rep(from_column), self.reps.rep(to_column));
        self.net.send(src, dst, msg);
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WriteRequest {
    pub server: usize,
    pub key: u64,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LookupRequest {
    pub server: usize,
    pub key: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RequestBatch {
    pub writes: Vec<WriteRequest>,
    pub lookups: Vec<LookupRequest>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PeriodError {
    #[error("crash set of {size} exceeds budget {budget}")]
    BudgetExceeded { size: usize, budget: usize },
    #[error("server {server} out of range")]
    UnknownServer { server: usize },
    #[error("server {server} issued more than one {kind} request")]
    TooManyRequests { server: usize, kind: &'static str },
    #[error("key {key} outside the key universe")]
    KeyOutOfRange { key: u64 },
    #[error("payload of key {key} has {len} bytes, expected {expected}")]
    PayloadLength { key: u64, len: usize, expected: usize },
}

/// What happened to requests addressed to crashed servers, and so on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Note {
    pub server: usize,
    pub text: String,
}

#[derive(Debug, Clone)]
pub struct PeriodOutput {
    pub period: u64,
    pub crashed: Vec<usize>,
    pub ledger: RoundLedger,
    pub aborted: Option<String>,
    pub write: Option<WriteStageReport>,
    /// Writes actually applied, with their versions.
    pub applied_writes: Vec<DataItem>,
    pub lookups: Vec<(LookupRequest, LookupOutcome)>,
    pub lookup_stats: LookupStats,
    pub notes: Vec<Note>,
}

/// The simulated cluster across periods.
#[derive(Debug, Clone)]
pub struct Cluster {
    pub params: Params,
    pub servers: Vec<ServerState>,
    pub crashed: Vec<bool>,
    pub period: u64,
    pub seed: u64,
}

/// Version of a write issued by `server` in `period`. Later periods win;
/// within a period the higher server id wins.
pub fn version_for(period: u64, server: usize) -> u64 {
    period << 24 | server as u64
}

impl Cluster {
    pub fn new(params: Params, seed: u64) -> Self {
        let n = params.n();
        Self {
            servers: (0..n)
                .map(|id| ServerState {
                    id,
                    buckets: BTreeMap::new(),
                })
                .collect(),
            crashed: vec![false; n],
            period: 0,
            params,
            seed,
        }
    }

    pub fn n(&self) -> usize {
        self.params.n()
    }

    pub fn is_crashed(&self, server: usize) -> bool {
        self.crashed[server]
    }

    pub fn stored_bytes(&self) -> usize {
        self.servers.iter().map(ServerState::stored_bytes).sum()
    }

    /// Highest timestamp any server holds for `bucket`, with its hashes.
    pub fn current_encoding(&self, bucket: BucketId) -> Option<(u64, HashFamily)> {
        self.servers
            .iter()
            .filter_map(|s| s.buckets.get(&bucket))
            .max_by_key(|st| st.timestamp)
            .map(|st| (st.timestamp, st.hashes.clone()))
    }

    /// Every bucket some server stores.
    pub fn materialized_buckets(&self) -> Vec<BucketId> {
        let mut ids: Vec<BucketId> = self
            .servers
            .iter()
            .flat_map(|s| s.buckets.keys().copied())
            .collect();
        ids.sort();
        ids.dedup();
        ids
    }

    fn validate_period(&self, crash_set: &[usize], batch: &RequestBatch) -> Result<(), PeriodError> {
        let n = self.n();
        let mut crash = crash_set.to_vec();
        crash.sort_unstable();
        crash.dedup();
        if crash.len() > self.params.crash_budget {
            return Err(PeriodError::BudgetExceeded {
                size: crash.len(),
                budget: self.params.crash_budget,
            });
        }
        if let Some(&s) = crash.iter().find(|&&s| s >= n) {
            return Err(PeriodError::UnknownServer { server: s });
        }
        let mut seen_w = vec![false; n];
        for w in &batch.writes {
            if w.server >= n {
                return Err(PeriodError::UnknownServer { server: w.server });
            }
            if std::mem::replace(&mut seen_w[w.server], true) {
                return Err(PeriodError::TooManyRequests {
                    server: w.server,
                    kind: "write",
                });
            }
            if w.key >= self.params.key_limit() {
                return Err(PeriodError::KeyOutOfRange { key: w.key });
            }
            if w.payload.len() != self.params.payload_len {
                return Err(PeriodError::PayloadLength {
                    key: w.key,
                    len: w.payload.len(),
                    expected: self.params.payload_len,
                });
            }
        }
        let mut seen_l = vec![false; n];
        for l in &batch.lookups {
            if l.server >= n {
                return Err(PeriodError::UnknownServer { server: l.server });
            }
            if std::mem::replace(&mut seen_l[l.server], true) {
                return Err(PeriodError::TooManyRequests {
                    server: l.server,
                    kind: "lookup",
                });
            }
            if l.key >= self.params.key_limit() {
                return Err(PeriodError::KeyOutOfRange { key: l.key });
            }
        }
        Ok(())
    }

    /// Runs one period: crash flags, preprocessing, writes, then lookups.
    pub fn run_period(&mut self, crash_set: &[usize], batch: RequestBatch) -> Result<PeriodOutput, PeriodError> {
        self.validate_period(crash_set, &batch)?;
        self.period += 1;
        let n = self.n();
        self.crashed = vec![false; n];
        for &s in crash_set {
            self.crashed[s] = true;
        }
        let mut crashed_list: Vec<usize> = (0..n).filter(|&s| self.crashed[s]).collect();
        crashed_list.sort_unstable();

        let mut notes = Vec::new();
        let mut writes = Vec::new();
        for w in batch.writes {
            if self.crashed[w.server] {
                notes.push(Note {
                    server: w.server,
                    text: format!("write of key {} dropped: server crashed", w.key),
                });
            } else {
                writes.push((
                    w.server,
                    DataItem {
                        key: w.key,
                        payload: w.payload,
                        version: version_for(self.period, w.server),
                    },
                ));
            }
        }
        let mut lookups = Vec::new();
        for l in batch.lookups {
            if self.crashed[l.server] {
                notes.push(Note {
                    server: l.server,
                    text: format!("lookup of key {} dropped: server crashed", l.key),
                });
            } else {
                lookups.push(l);
            }
        }

        let mut out = PeriodOutput {
            period: self.period,
            crashed: crashed_list,
            ledger: RoundLedger::new(n),
            aborted: None,
            write: None,
            applied_writes: Vec::new(),
            lookups: Vec::new(),
            lookup_stats: LookupStats::default(),
            notes,
        };
        if writes.is_empty() && lookups.is_empty() {
            return Ok(out);
        }

        let reps = match write_protocol::assign_representatives(&self.crashed) {
            Ok(r) => r,
            Err(e) => {
                out.aborted = Some(e.to_string());
                out.lookups = lookups
                    .into_iter()
                    .map(|l| (l, LookupOutcome::Failed { zone: 0, reason: e.to_string() }))
                    .collect();
                return Ok(out);
            }
        };
        let mut ledger = RoundLedger::new(n);
        {
            let mut ctx = Ctx {
                params: &self.params,
                reps: &reps,
                servers: &mut self.servers,
                net: Network::new(&self.crashed, &mut ledger),
                period: self.period,
                seed: self.seed,
            };
            write_protocol::disseminate_representatives(&mut ctx);
            if !writes.is_empty() {
                out.applied_writes = writes.iter().map(|(_, item)| item.clone()).collect();
                match write_protocol::write_stage(&mut ctx, writes) {
                    Ok(report) => out.write = Some(report),
                    Err(WriteError::Aborted { report, reason }) => {
                        out.write = Some(*report);
                        out.aborted = Some(reason);
                    }
                    Err(e) => out.aborted = Some(e.to_string()),
                }
            }
            if !lookups.is_empty() {
                let (outcomes, stats) = lookup_protocol::lookup_stage(&mut ctx, &lookups);
                out.lookups = lookups.into_iter().zip(outcomes).collect();
                out.lookup_stats = stats;
            }
        }
        out.ledger = ledger;
        Ok(out)
    }

    /// Encodes `items` into `bucket` on every server without running the
    /// protocol. Used to set up fixtures; replaces any stored encoding.
    pub fn install_bucket(
        &mut self,
        bucket: BucketId,
        items: &[DataItem],
        hashes: HashFamily,
        timestamp: u64,
    ) -> Result<(), LayoutError> {
        let topo = self.params.topology;
        let (n, d) = (topo.n(), topo.d());
        let mut at: Vec<Vec<Piece>> = vec![Vec::new(); n];
        for item in items {
            for piece in codec::rs_encode(item, self.params.c)? {
                at[hashes.server_for(item.key, piece.index as usize, n)].push(piece);
            }
        }
        let body_len = self.params.body_len();
        let level0: Vec<Vec<u8>> = at.iter().map(|p| storage::encode_level0(p, body_len)).collect();
        let mut blocks = level0.clone();
        let mut parities: Vec<Vec<Vec<u8>>> = vec![Vec::with_capacity(d); n];
        for level in 0..d {
            let mut next = blocks.clone();
            for base in (0..n).filter(|&x| topo.digit_at(x, level) == 0) {
                let group = topo.group_columns(base, level);
                let refs: Vec<&[u8]> = group.iter().map(|&x| blocks[x].as_slice()).collect();
                for (&x, parity) in group.iter().zip(storage::encode_group_level(&refs)?) {
                    next[x] = storage::codeword_bytes(&blocks[x], &parity);
                    parities[x].push(parity);
                }
            }
            blocks = next;
        }
        for (x, (level0, parities)) in level0.into_iter().zip(parities).enumerate() {
            self.servers[x].buckets.insert(
                bucket,
                LevelStack {
                    timestamp,
                    hashes: hashes.clone(),
                    level0: level0.into(),
                    parities,
                },
            );
        }
        Ok(())
    }

    /// Round budget helper for callers that only need the stage split.
    pub fn stage_rounds(ledger: &RoundLedger, stage: Stage) -> usize {
        ledger.rounds_in(|s| s == stage)
    }
}
