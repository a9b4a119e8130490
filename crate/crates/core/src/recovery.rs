//! Bottom-up recovery of level blocks inside a sub-butterfly.
//!
//! A column is *current* when its server is intact and stores the bucket
//! with the newest timestamp. The level-`l` block of a column is available
//! if the column is current, or if every other member of its level-`l`
//! group has its level-`l + 1` block available. Recovery runs one round per
//! level, from the top level down to level 0.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;
use std::sync::Arc;

use crate::buckets::{BucketId, HashFamily};
use crate::butterfly::{NodeId, Topology};
use crate::cluster::Ctx;
use crate::simnet::{Message, Stage};
use crate::storage;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecoveryPlan {
    pub top: usize,
    pub columns: Range<usize>,
    /// `recover[l]`: columns whose level-`l` block is rebuilt.
    pub recover: Vec<Vec<usize>>,
    /// Wanted columns whose level-0 block cannot be rebuilt.
    pub unrecoverable: Vec<usize>,
}

pub fn plan_recovery(
    topo: &Topology,
    columns: Range<usize>,
    top: usize,
    current: &dyn Fn(usize) -> bool,
    wanted: &[usize],
) -> RecoveryPlan {
    let base = columns.start;
    let width = columns.len();
    let mut avail = vec![vec![false; width]; top + 1];
    for x in columns.clone() {
        avail[top][x - base] = current(x);
    }
    for level in (0..top).rev() {
        for x in columns.clone() {
            avail[level][x - base] = current(x)
                || topo
                    .group_columns(x, level)
                    .iter()
                    .all(|&g| g == x || avail[level + 1][g - base]);
        }
    }

    let mut need: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); top + 1];
    need[0] = wanted.iter().copied().filter(|&y| !current(y)).collect();
    let mut recover = vec![Vec::new(); top];
    let mut unrecoverable = Vec::new();
    for level in 0..top {
        let here: Vec<usize> = need[level].iter().copied().collect();
        for y in here {
            if !avail[level][y - base] {
                if level == 0 {
                    unrecoverable.push(y);
                }
                continue;
            }
            recover[level].push(y);
            for g in topo.group_columns(y, level) {
                if g != y && !current(g) {
                    need[level + 1].insert(g);
                }
            }
        }
    }
    if top == 0 {
        unrecoverable = need[0].iter().copied().collect();
    }
    RecoveryPlan {
        top,
        columns,
        recover,
        unrecoverable,
    }
}

/// One bucket to recover inside one sub-butterfly.
#[derive(Debug, Clone)]
pub struct RecoveryJob {
    pub bucket: BucketId,
    pub timestamp: u64,
    pub plan: RecoveryPlan,
}

/// Level-0 blocks rebuilt by a job, with the hashes they were encoded under.
#[derive(Debug, Clone, Default)]
pub struct Recovered {
    pub blocks: BTreeMap<usize, (Arc<[u8]>, HashFamily)>,
    /// Columns whose rebuild failed even though the plan allowed it.
    pub failed: Vec<usize>,
}

/// Runs all jobs in lockstep; a job of height `top` uses the last `top`
/// rounds of the schedule.
pub fn execute(ctx: &mut Ctx, stage: Stage, jobs: &[RecoveryJob]) -> Vec<Recovered> {
    let topo = ctx.topo();
    let height = jobs.iter().map(|j| j.plan.top).max().unwrap_or(0);
    // blocks held by emulators of non-current columns: (job, level, column)
    let mut rebuilt: BTreeMap<(usize, usize, usize), (Arc<[u8]>, HashFamily)> = BTreeMap::new();
    let mut failed: Vec<Vec<usize>> = vec![Vec::new(); jobs.len()];

    for level in (0..height).rev() {
        for (jid, job) in jobs.iter().enumerate() {
            if level >= job.plan.top {
                continue;
            }
            for &y in &job.plan.recover[level] {
                for g in topo.group_columns(y, level) {
                    if g == y {
                        continue;
                    }
                    let source = match ctx.stack(g, job.bucket) {
                        Some(st) if st.timestamp == job.timestamp => {
                            Some((Arc::from(st.block_at(level + 1)), st.hashes.clone()))
                        }
                        _ => rebuilt.get(&(jid, level + 1, g)).cloned(),
                    };
                    if let Some((block, hashes)) = source {
                        ctx.send_between(
                            g,
                            y,
                            Message::BlockTransfer {
                                bucket: job.bucket,
                                to: NodeId::new(level, y),
                                from_column: g,
                                timestamp: job.timestamp,
                                hashes,
                                block,
                            },
                        );
                    }
                }
            }
        }
        let inboxes = ctx.net.deliver(stage);
        // (job, target column) -> members by group index
        let mut gathered: BTreeMap<(usize, usize), (Vec<Option<Arc<[u8]>>>, Option<HashFamily>)> = BTreeMap::new();
        for env in inboxes.iter().flatten() {
            let Message::BlockTransfer {
                bucket,
                to,
                from_column,
                timestamp,
                hashes,
                block,
            } = &env.msg
            else {
                continue;
            };
            let Some(jid) = find_job(jobs, *bucket, to.column, level) else {
                continue;
            };
            // filter out anything not carrying the newest timestamp
            if *timestamp != jobs[jid].timestamp || to.level != level {
                continue;
            }
            let entry = gathered
                .entry((jid, to.column))
                .or_insert_with(|| (vec![None; topo.k()], None));
            entry.0[topo.digit_at(*from_column, level)] = Some(block.clone());
            entry.1 = Some(hashes.clone());
        }
        for ((jid, y), (members, hashes)) in gathered {
            let refs: Vec<Option<&[u8]>> = members.iter().map(|m| m.as_deref()).collect();
            match (storage::recover_in_group(&refs), hashes) {
                (Ok(block), Some(h)) => {
                    rebuilt.insert((jid, level, y), (Arc::from(block), h));
                }
                _ => failed[jid].push(y),
            }
        }
        for (jid, job) in jobs.iter().enumerate() {
            if level < job.plan.top {
                for &y in &job.plan.recover[level] {
                    if !rebuilt.contains_key(&(jid, level, y)) && !failed[jid].contains(&y) {
                        failed[jid].push(y);
                    }
                }
            }
        }
    }

    let mut out: Vec<Recovered> = failed
        .into_iter()
        .map(|failed| Recovered {
            blocks: BTreeMap::new(),
            failed,
        })
        .collect();
    for ((jid, level, y), v) in rebuilt {
        if level == 0 {
            out[jid].blocks.insert(y, v);
        }
    }
    out
}

/// The job for `bucket` whose sub-butterfly contains `column`.
fn find_job(jobs: &[RecoveryJob], bucket: BucketId, column: usize, level: usize) -> Option<usize> {
    jobs.iter()
        .position(|j| j.bucket == bucket && level < j.plan.top && j.plan.columns.contains(&column))
}
