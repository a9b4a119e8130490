//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Pass criterion numbers as arguments to run a subset:
//! `cargo test --test acceptance -- 3 8`.

use std::collections::BTreeSet;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::seq::index;
use rand::Rng;

use robust::buckets::bit;
use robust::butterfly::Topology;
use robust::cluster::{Ctx, ServerState};
use robust::codec::{self, DataItem};
use robust::harness::{run_scenario, PeriodReport, RunOptions, RunOutput, Scenario};
use robust::params::Params;
use robust::rng;
use robust::simnet::{Network, RoundLedger};
use robust::storage;
use robust::write_protocol::{self, Holdings, RepresentativeMap};

const SEEDS: u64 = 50;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn run(text: &str, seed: u64) -> RunOutput {
    let scenario = Scenario::from_toml(text).expect("scenario parses");
    run_scenario(
        &scenario,
        &RunOptions {
            seed: Some(seed),
            ..RunOptions::default()
        },
    )
    .expect("scenario runs")
}

fn within(start: Instant, limit: Duration) -> bool {
    start.elapsed() <= limit
}

fn subsets(n: usize, size: usize) -> Vec<Vec<usize>> {
    if size == 0 {
        return vec![Vec::new()];
    }
    (size - 1..n)
        .flat_map(|last| {
            subsets(last, size - 1).into_iter().map(move |mut s| {
                s.push(last);
                s
            })
        })
        .collect()
}

fn codec_subsets() -> Outcome {
    let mut rng = rng::stream(1, &[]);
    let mut checked = 0usize;
    let mut failures = Vec::new();
    for c in [3usize, 6, 9] {
        for len in [1usize, 7, 64, 200] {
            let item = DataItem {
                key: rng.gen(),
                payload: (0..len).map(|_| rng.gen()).collect(),
                version: 9,
            };
            let pieces = codec::rs_encode(&item, c).expect("encode");
            let t = codec::rs_threshold(c);
            for subset in subsets(c, t) {
                let chosen: Vec<_> = subset.iter().map(|&i| pieces[i].clone()).collect();
                checked += 1;
                if codec::rs_decode(&chosen, c, len).ok().as_ref() != Some(&item.payload) {
                    failures.push(format!("c={c} len={len} subset={subset:?}"));
                }
            }
        }
    }
    let mut groups = 0usize;
    for k in 2..=8usize {
        for trial in 0..5 {
            let blocks: Vec<Vec<u8>> = (0..k)
                .map(|i| (0..(trial * 13 + i * 5) % 90).map(|_| rng.gen()).collect())
                .collect();
            let refs: Vec<&[u8]> = blocks.iter().map(Vec::as_slice).collect();
            let parities = storage::encode_group_level(&refs).expect("group encode");
            let codewords: Vec<Vec<u8>> = blocks
                .iter()
                .zip(&parities)
                .map(|(b, p)| storage::codeword_bytes(b, p))
                .collect();
            for missing in 0..k {
                let members: Vec<Option<&[u8]>> = (0..k)
                    .map(|i| (i != missing).then(|| codewords[i].as_slice()))
                    .collect();
                groups += 1;
                if storage::recover_in_group(&members).ok().as_ref() != Some(&blocks[missing]) {
                    failures.push(format!("k={k} trial={trial} missing={missing}"));
                }
            }
        }
    }
    outcome(
        failures.is_empty(),
        format!(
            "{checked} piece subsets, {groups} single-erasure groups, {} failures{}",
            failures.len(),
            failures.first().map(|f| format!(" (first: {f})")).unwrap_or_default()
        ),
    )
}

fn count_and_select() -> Outcome {
    let topo = Topology::new(3, 3).expect("topology");
    let params = Params::new(topo).with_p(2);
    let n = params.n();
    let reps = RepresentativeMap::identity(n);
    let crashed = vec![false; n];
    let mut failures = Vec::new();
    let mut selections = 0;
    for instance in 0..100u64 {
        let mut rng = rng::stream(2, &[instance]);
        let total = rng.gen_range(0..=3 * n);
        let zone = rng.gen_range(0..params.address_bits);
        let keys = index::sample(&mut rng, params.key_limit() as usize, total);
        let mut holdings: Holdings = vec![Vec::new(); n];
        for key in keys {
            holdings[rng.gen_range(0..n)].push(DataItem {
                key: key as u64,
                payload: vec![0; 4],
                version: 1,
            });
        }
        let ones = holdings.iter().flatten().filter(|d| bit(d.key, zone) == 1).count() as u64;
        let expect = (total as u64 - ones, ones);

        let mut servers: Vec<ServerState> = (0..n).map(|id| ServerState { id, ..ServerState::default() }).collect();
        let mut ledger = RoundLedger::new(n);
        let mut ctx = Ctx {
            params: &params,
            reps: &reps,
            servers: &mut servers,
            net: Network::new(&crashed, &mut ledger),
            period: 1,
            seed: instance,
        };
        let agg = write_protocol::count_items(&mut ctx, &holdings, zone);
        if agg.totals.iter().any(|&t| t != expect) {
            failures.push(format!("instance {instance}: count differs from recount {expect:?}"));
            continue;
        }
        if total <= 2 * n {
            continue;
        }
        selections += 1;
        let before: BTreeSet<u64> = holdings.iter().flatten().map(|d| d.key).collect();
        match write_protocol::select_overflow(&mut ctx, zone, &agg, &mut holdings) {
            Ok((b, moved)) => {
                let moved_keys: Vec<u64> = moved.iter().flatten().map(|d| d.key).collect();
                let kept: BTreeSet<u64> = holdings.iter().flatten().map(|d| d.key).collect();
                let count_b = if b == 0 { expect.0 } else { expect.1 };
                let ok = moved_keys.len() == n
                    && moved.iter().all(|col| col.len() == 1)
                    && moved_keys.iter().all(|&k| bit(k, zone) == b)
                    && count_b > n as u64
                    && moved_keys.iter().all(|k| !kept.contains(k))
                    && kept.len() + n == before.len();
                if !ok {
                    failures.push(format!("instance {instance}: selection of bit {b} is not {n} uniform items"));
                }
            }
            Err(e) => failures.push(format!("instance {instance}: {e}")),
        }
    }
    outcome(
        failures.is_empty(),
        format!(
            "100 instances, {selections} overflow selections, {} mismatches{}",
            failures.len(),
            failures.first().map(|f| format!(" (first: {f})")).unwrap_or_default()
        ),
    )
}

const FRESHNESS: &str = r#"
schema_version = 1
[system]
n = 81
k = 3
p = 2
c = 24
crash_budget = 4

[[periods]]
repeat = 20
crash = { strategy = "rotating", counts = [0, 1, 2, 3, 4] }
requests = { strategy = "mixed", write_prob = 0.7, lookup_prob = 0.8, key_space = 800, absent_prob = 0.2 }
"#;

fn freshness_fuzz() -> Outcome {
    let start = Instant::now();
    let (mut lookups, mut bad, mut unanswered, mut degraded) = (0, 0, 0, 0);
    let mut first = None;
    for seed in 1..=SEEDS {
        let out = run(FRESHNESS, seed);
        lookups += out.summary.lookups;
        bad += out.summary.safety_violations;
        unanswered += out.summary.unanswered;
        degraded += out.summary.degraded;
        if first.is_none() {
            first = out.summary.first_violation.map(|v| format!(" (seed {seed}: {})", v.detail));
        }
    }
    let in_time = within(start, Duration::from_secs(600));
    outcome(
        bad == 0 && in_time,
        format!(
            "{SEEDS} seeds, {lookups} lookups, {bad} incorrect, {unanswered} fail-reported, {degraded} degraded, {:.0?}{}",
            start.elapsed(),
            first.unwrap_or_default()
        ),
    )
}

fn attack_scenario(f: usize) -> String {
    format!(
        r#"
schema_version = 1
[system]
n = 81
k = 3
crash_budget = {f}

[[periods]]
requests = {{ strategy = "fill_all", key_space = 128 }}

[[periods]]
repeat = 5
crash = {{ strategy = "placement_informed", count = {f} }}
victim_lookups = 10
requests = {{ strategy = "mixed", write_prob = 0.3, lookup_prob = 0.5, key_space = 128, absent_prob = 0.1 }}
"#
    )
}

fn adaptive_attack() -> Outcome {
    let start = Instant::now();
    let mut parts = Vec::new();
    let mut pass = true;
    for f in [1usize, 2] {
        let text = attack_scenario(f);
        let (mut clean, mut bad, mut victims) = (0, 0, 0);
        for seed in 1..=SEEDS {
            let out = run(&text, seed);
            if out.summary.unanswered == 0 {
                clean += 1;
            }
            bad += out.summary.safety_violations;
            victims += out.reports.iter().filter(|r| r.victim.is_some()).count();
        }
        let rate = clean as f64 / SEEDS as f64;
        pass &= rate >= 0.95 && bad == 0;
        parts.push(format!("f={f}: all answered in {clean}/{SEEDS} seeds, {bad} incorrect, {victims} attacked periods"));
    }
    pass &= within(start, Duration::from_secs(600));
    outcome(pass, format!("{}, {:.0?}", parts.join("; "), start.elapsed()))
}

/// Constants asserted by the bound checks; the scenarios use the defaults.
const C_PHASE: f64 = 8.0;
const C_WS: f64 = 8.0;
const C_ROUNDS: f64 = 1.0;
const C_CONG: f64 = 1.0;

const HOT_SPOT: &str = r#"
schema_version = 1
[system]
n = 256
k = 4
p = 2
c = 48
crash_budget = 3

[[periods]]
repeat = 2
requests = { strategy = "fill_all", key_space = 60000 }

[[periods]]
repeat = 3
crash = { strategy = "random", count = 3 }
requests = { strategy = "hot_spot" }

[[periods]]
repeat = 3
crash = { strategy = "prefix", count = 3, level = 2 }
requests = { strategy = "mixed", write_prob = 0.5, lookup_prob = 0.5, key_space = 60000 }
"#;

fn round_bounds() -> Outcome {
    let start = Instant::now();
    let mut reports: Vec<PeriodReport> = Vec::new();
    for seed in 1..=10 {
        reports.extend(run(FRESHNESS, seed).reports);
        reports.extend(run(&attack_scenario(2), seed).reports);
        reports.extend(run(HOT_SPOT, seed).reports);
    }
    let broken: Vec<String> = reports
        .iter()
        .filter_map(|r| {
            let checks = [
                ("phase", &r.phase_bound),
                ("write stage", &r.write_stage_bound),
                ("period", &r.period_bound),
                ("congestion", &r.congestion_bound),
            ];
            checks
                .iter()
                .find(|(_, b)| !b.ok)
                .map(|(name, b)| format!("period {} {name} {} > {:.0}", r.period, b.measured, b.bound))
        })
        .collect();
    let worst = |f: fn(&PeriodReport) -> f64| reports.iter().map(f).fold(0.0, f64::max);
    outcome(
        broken.is_empty() && within(start, Duration::from_secs(600)),
        format!(
            "{} periods; worst/bound: phase {:.2}, write stage {:.2}, period {:.2}, congestion {:.2} (C_phase={C_PHASE}, C_ws={C_WS}, C_rounds={C_ROUNDS}, C_cong={C_CONG}){}",
            reports.len(),
            worst(|r| r.phase_bound.measured / r.phase_bound.bound),
            worst(|r| r.write_stage_bound.measured / r.write_stage_bound.bound),
            worst(|r| r.period_bound.measured / r.period_bound.bound),
            worst(|r| r.congestion_bound.measured / r.congestion_bound.bound),
            broken.first().map(|b| format!("; first break: {b}")).unwrap_or_default()
        ),
    )
}

const C_RED: f64 = 8.0;
const PREDICTION_TOLERANCE: f64 = 0.10;

fn redundancy_scenario(n: usize, k: usize, mixed: bool) -> String {
    let tail = if mixed {
        r#"
[[periods]]
repeat = 10
crash = { strategy = "random", count = 1 }
requests = { strategy = "mixed", write_prob = 0.6, lookup_prob = 0.2, key_space = 4000 }
"#
    } else {
        ""
    };
    format!(
        r#"
schema_version = 1
[system]
n = {n}
k = {k}
c = 24
payload_len = 512
crash_budget = 1

[[periods]]
repeat = 2
requests = {{ strategy = "fill_all", key_space = 60000 }}
{tail}"#
    )
}

fn redundancy() -> Outcome {
    let start = Instant::now();
    let mut pass = true;
    let mut parts = Vec::new();
    for (n, k) in [(81usize, 3usize), (256, 4)] {
        let log = (n as f64).log2();
        let mut error: f64 = 0.0;
        let mut sample = (0.0, 0.0);
        for seed in 1..=5 {
            let fill = run(&redundancy_scenario(n, k, false), seed);
            let last = fill.reports.last().expect("periods ran");
            let e = last.redundancy / last.predicted_redundancy - 1.0;
            if e.abs() >= error {
                error = e.abs();
                sample = (last.redundancy, last.predicted_redundancy);
            }
        }
        let mut worst: f64 = 0.0;
        for seed in 1..=5 {
            let out = run(&redundancy_scenario(n, k, true), seed);
            worst = out.reports.iter().map(|r| r.redundancy).fold(worst, f64::max);
        }
        pass &= error <= PREDICTION_TOLERANCE && worst <= C_RED * log;
        parts.push(format!(
            "n={n}: no-stale worst {:.1} vs predicted {:.1} ({:+.1}%), mixed worst {:.1} <= {:.1}",
            sample.0,
            sample.1,
            100.0 * (sample.0 / sample.1 - 1.0),
            worst,
            C_RED * log
        ));
    }
    pass &= within(start, Duration::from_secs(300));
    outcome(pass, format!("C_red={C_RED}; {}; {:.0?}", parts.join("; "), start.elapsed()))
}

fn lemma_scenario(budget: usize) -> String {
    format!(
        r#"
schema_version = 1
check_lemmas = true
[system]
n = 4096
k = 4
crash_budget = {budget}

[[periods]]
requests = {{ strategy = "fill_all", key_space = 4096 }}

[[periods]]
crash = {{ strategy = "random", count = {budget} }}
requests = {{ strategy = "mixed", write_prob = 0.0, lookup_prob = 1.0, key_space = 4096 }}
"#
    )
}

fn lemma_stats(budget: usize) -> Outcome {
    let start = Instant::now();
    let (mut placement, mut belongs, mut entered, mut bad) = (0, 0, 0, 0);
    let mut worst_pieces = 0;
    for seed in 1..=SEEDS {
        let out = run(&lemma_scenario(budget), seed);
        bad += out.summary.safety_violations;
        let lemma = out.reports.last().and_then(|r| r.lemma.clone()).expect("lemma stats collected");
        placement += usize::from(lemma.placement_ok);
        belongs += usize::from(lemma.belongs_ok);
        entered += usize::from(lemma.entered_ok);
        worst_pieces = worst_pieces.max(lemma.max_blocked_pieces);
    }
    let need = (0.95 * SEEDS as f64).ceil() as usize;
    outcome(
        placement >= need && belongs >= need && bad == 0 && within(start, Duration::from_secs(1800)),
        format!(
            "budget {budget}: placement within c/6 in {placement}/{SEEDS} (worst {worst_pieces} pieces), belongs-to-level bound in {belongs}/{SEEDS}, decoding-entry bound in {entered}/{SEEDS}, {bad} incorrect, {:.0?}",
            start.elapsed()
        ),
    )
}

fn determinism() -> Outcome {
    let texts = [FRESHNESS.to_string(), attack_scenario(2), HOT_SPOT.to_string()];
    let mut same = 0;
    for text in &texts {
        let a = run(text, 7).to_json_lines();
        let b = run(text, 7).to_json_lines();
        same += usize::from(a == b);
    }
    outcome(same == texts.len(), format!("{same}/{} scenarios byte-identical across two runs", texts.len()))
}

fn main() -> ExitCode {
    let wanted: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: Vec<(&str, &str, fn() -> Outcome)> = vec![
        ("1", "codec subset decode", codec_subsets),
        ("2", "count/select oracle equivalence", count_and_select),
        ("3", "freshness fuzz", freshness_fuzz),
        ("4", "adaptive-attack liveness", adaptive_attack),
        ("5", "round and congestion bounds", round_bounds),
        ("6", "redundancy bound", redundancy),
        ("7", "lemma statistics", || lemma_stats(1)),
        ("7r", "lemma statistics, relaxed budget", || lemma_stats(16)),
        ("8", "determinism", determinism),
    ];
    let mut failed = 0;
    for (id, name, check) in criteria {
        if !wanted.is_empty() && !wanted.iter().any(|w| w == id) {
            continue;
        }
        let result = check();
        println!(
            "criterion {id} ({name}): {} | {}",
            if result.pass { "PASS" } else { "FAIL" },
            result.detail
        );
        failed += usize::from(!result.pass);
    }
    if failed > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

