//! Scenario files, the period loop, oracle checks and JSON-lines reports.
//!
//! A scenario is a TOML document:
//!
//! ```toml
//! schema_version = 1
//! seed = 7
//!
//! [system]
//! n = 81
//! k = 3            # optional; derived from n otherwise
//! c = 24           # optional; 18 * address bits by default
//! crash_budget = 4 # optional
//!
//! [bounds]
//! c_phase = 8.0
//!
//! [[fixtures]]     # buckets encoded before the first period
//! zone = 1
//! prefix = 0
//! items = 81
//!
//! [[periods]]
//! repeat = 20
//! crash = { strategy = "rotating", counts = [0, 1, 2, 3, 4] }
//! requests = { strategy = "mixed", write_prob = 0.5, lookup_prob = 0.5, key_space = 500 }
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adversary::{self, CrashStrategy, RequestStrategy};
use crate::buckets::{BucketId, HashFamily};
use crate::butterfly::Topology;
use crate::cluster::{version_for, Cluster, PeriodError};
use crate::codec::DataItem;
use crate::lookup_protocol::{LookupOutcome, LookupStats};
use crate::oracle::{self, GlobalDirectory, LemmaReport, Verdict};
use crate::params::{ParamError, Params};
use crate::rng;
use crate::simnet::Stage;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("cannot read scenario: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed scenario: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid `{field}`: {reason}")]
    Config { field: String, reason: String },
    #[error(transparent)]
    Params(#[from] ParamError),
    #[error("period {period}: {source}")]
    Period { period: usize, source: PeriodError },
}

fn config(field: &str, reason: impl Into<String>) -> HarnessError {
    HarnessError::Config {
        field: field.to_string(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    pub n: usize,
    pub k: Option<usize>,
    #[serde(default = "one")]
    pub p: usize,
    pub c: Option<usize>,
    #[serde(default = "default_payload_len")]
    pub payload_len: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_c_kappa")]
    pub c_kappa: usize,
    pub crash_budget: Option<usize>,
}

fn one() -> usize {
    1
}
fn default_payload_len() -> usize {
    64
}
fn default_alpha() -> f64 {
    73.0
}
fn default_beta() -> f64 {
    3.0
}
fn default_c_kappa() -> usize {
    4
}

/// Constants of the asserted bounds, all in units of `log2 n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Bounds {
    /// Rounds of one write phase per `log2 n`.
    pub c_phase: f64,
    /// Rounds of the write stage per `log2^2 n`.
    pub c_ws: f64,
    /// Rounds of a period per `log2^4 n`.
    pub c_rounds: f64,
    /// Messages one server receives in a round per `log2^3 n`.
    pub c_cong: f64,
    /// Stored bytes over live bytes per `log2 n`.
    pub c_red: f64,
    /// Hard cap on rounds per period; exceeding it ends the run.
    pub max_rounds: Option<usize>,
}

impl Default for Bounds {
    fn default() -> Self {
        Self {
            c_phase: 8.0,
            c_ws: 8.0,
            c_rounds: 1.0,
            c_cong: 1.0,
            c_red: 8.0,
            max_rounds: None,
        }
    }
}

/// Items encoded straight into one bucket before the first period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Fixture {
    pub zone: usize,
    /// The low `zone` key bits shared by the bucket's keys.
    pub prefix: u64,
    pub items: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct PeriodSpec {
    #[serde(default = "one")]
    pub repeat: usize,
    #[serde(default)]
    pub crash: CrashSpec,
    #[serde(default)]
    pub requests: RequestStrategy,
    /// Extra lookups of the placement-informed victim.
    #[serde(default)]
    pub victim_lookups: usize,
}

/// Crash strategies, plus rotation through random crash counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CrashSpec {
    Rotating(Rotating),
    Plain(CrashStrategy),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rotating {
    pub strategy: RotatingTag,
    /// Period `i` crashes `counts[i % len]` random servers.
    pub counts: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RotatingTag {
    Rotating,
}

impl Default for CrashSpec {
    fn default() -> Self {
        CrashSpec::Plain(CrashStrategy::None)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    pub system: SystemConfig,
    #[serde(default)]
    pub bounds: Bounds,
    #[serde(default)]
    pub check_lemmas: bool,
    #[serde(default)]
    pub fixtures: Vec<Fixture>,
    pub periods: Vec<PeriodSpec>,
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let s: Scenario = toml::from_str(text)?;
        s.params()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Validated system parameters.
    pub fn params(&self) -> Result<Params, HarnessError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(config(
                "schema_version",
                format!("{} unsupported, expected {SCHEMA_VERSION}", self.schema_version),
            ));
        }
        let sys = &self.system;
        let topo = match sys.k {
            Some(k) => {
                let mut d = 0;
                let mut size = 1usize;
                while size < sys.n && k >= 2 {
                    size = size.saturating_mul(k);
                    d += 1;
                }
                if k < 2 || size != sys.n {
                    return Err(config("system.k", format!("no d with {k}^d = {}", sys.n)));
                }
                Topology::new(k, d).map_err(|e| config("system.k", e.to_string()))?
            }
            None => Topology::for_servers(sys.n).map_err(|e| config("system.n", e.to_string()))?,
        };
        let mut params = Params::new(topo).with_p(sys.p).with_payload_len(sys.payload_len);
        let c = sys.c.unwrap_or(crate::params::default_c(params.address_bits));
        params = params.with_c(c);
        if let Some(f) = sys.crash_budget {
            params = params.with_crash_budget(f);
        }
        params.alpha = sys.alpha;
        params.beta = sys.beta;
        params.c_kappa = sys.c_kappa;
        params.validate()?;
        if self.periods.is_empty() {
            return Err(config("periods", "at least one period is required"));
        }
        for (i, f) in self.fixtures.iter().enumerate() {
            if f.zone > params.address_bits || (f.zone < 64 && f.prefix >> f.zone != 0) {
                return Err(config(&format!("fixtures[{i}]"), "prefix wider than its zone"));
            }
            let room = 1u64 << (params.address_bits - f.zone);
            if f.items as u64 > room {
                return Err(config(&format!("fixtures[{i}].items"), "more items than keys in the bucket"));
            }
        }
        Ok(params)
    }
}

/// Ratio of a measured value to its bound; `ok` when within.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundCheck {
    pub measured: f64,
    pub bound: f64,
    pub ok: bool,
}

impl BoundCheck {
    fn new(measured: f64, bound: f64) -> Self {
        Self {
            measured,
            bound,
            ok: measured <= bound,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub invariant: String,
    pub detail: String,
}

/// One JSON line per period.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PeriodReport {
    pub period: u64,
    pub crashed: Vec<usize>,
    pub victim: Option<u64>,
    pub aborted: Option<String>,
    pub writes_applied: usize,
    pub lookups: usize,
    pub verdicts: BTreeMap<Verdict, usize>,
    pub unanswered: Vec<u64>,
    pub rounds: usize,
    pub write_rounds: usize,
    pub lookup_rounds: usize,
    pub max_phase_rounds: usize,
    pub max_congestion: u32,
    /// Largest per-round congestion of each stage that ran.
    pub congestion_by_stage: BTreeMap<Stage, u32>,
    pub max_message_bytes: usize,
    pub messages: u64,
    pub phase_bound: BoundCheck,
    pub write_stage_bound: BoundCheck,
    pub period_bound: BoundCheck,
    pub congestion_bound: BoundCheck,
    pub redundancy: f64,
    pub predicted_redundancy: f64,
    pub redundancy_bound: BoundCheck,
    pub live_keys: usize,
    pub buckets: usize,
    pub lookup_stats: LookupStats,
    pub lemma: Option<LemmaReport>,
    pub notes: usize,
    pub violations: Vec<Violation>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub periods: usize,
    pub max_rounds: usize,
    pub max_phase_rounds: usize,
    pub max_congestion: u32,
    pub final_redundancy: f64,
    pub lookups: usize,
    pub correct: usize,
    pub unanswered: usize,
    pub degraded: usize,
    pub safety_violations: usize,
    pub bounds_ok: bool,
    pub lemma_periods: usize,
    pub lemma_ok: bool,
    pub round_cap_exceeded: bool,
    pub first_violation: Option<Violation>,
}

impl Summary {
    /// Pure function of the reports.
    pub fn of(reports: &[PeriodReport], round_cap_exceeded: bool) -> Self {
        let count = |v: Verdict| reports.iter().map(|r| r.verdicts.get(&v).copied().unwrap_or(0)).sum();
        let lemmas: Vec<&LemmaReport> = reports.iter().filter_map(|r| r.lemma.as_ref()).collect();
        Summary {
            periods: reports.len(),
            max_rounds: reports.iter().map(|r| r.rounds).max().unwrap_or(0),
            max_phase_rounds: reports.iter().map(|r| r.max_phase_rounds).max().unwrap_or(0),
            max_congestion: reports.iter().map(|r| r.max_congestion).max().unwrap_or(0),
            final_redundancy: reports.last().map_or(0.0, |r| r.redundancy),
            lookups: reports.iter().map(|r| r.lookups).sum(),
            correct: count(Verdict::Correct) + count(Verdict::CorrectNotExists),
            unanswered: count(Verdict::Unanswered),
            degraded: count(Verdict::Degraded),
            safety_violations: reports.iter().map(|r| r.violations.len()).sum(),
            bounds_ok: reports.iter().all(|r| {
                r.phase_bound.ok && r.write_stage_bound.ok && r.period_bound.ok && r.congestion_bound.ok && r.redundancy_bound.ok
            }),
            lemma_periods: lemmas.len(),
            lemma_ok: lemmas.iter().all(|l| l.placement_ok && l.belongs_ok),
            round_cap_exceeded,
            first_violation: reports.iter().flat_map(|r| r.violations.first()).next().cloned(),
        }
    }

    /// Process exit status for this run.
    pub fn exit_code(&self) -> i32 {
        if self.safety_violations > 0 {
            2
        } else if self.round_cap_exceeded {
            3
        } else {
            0
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub reports: Vec<PeriodReport>,
    pub summary: Summary,
}

impl RunOutput {
    /// Report lines followed by the summary line.
    pub fn to_json_lines(&self) -> String {
        let mut out = String::new();
        for r in &self.reports {
            out.push_str(&serde_json::to_string(r).expect("reports serialize"));
            out.push('\n');
        }
        out.push_str(&serde_json::json!({ "summary": self.summary }).to_string());
        out.push('\n');
        out
    }
}

/// Options the command line may override.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub check_lemmas: bool,
    pub max_rounds: Option<usize>,
}

/// A scenario in progress: the cluster, the oracle and the reports so far.
pub struct Runner {
    pub params: Params,
    pub bounds: Bounds,
    pub cluster: Cluster,
    pub directory: GlobalDirectory,
    pub seed: u64,
    pub check_lemmas: bool,
    pub reports: Vec<PeriodReport>,
    index: usize,
    pending: Vec<Violation>,
}

impl Runner {
    pub fn new(scenario: &Scenario, options: &RunOptions) -> Result<Self, HarnessError> {
        let params = scenario.params()?;
        let seed = options.seed.unwrap_or(scenario.seed);
        let mut bounds = scenario.bounds.clone();
        if options.max_rounds.is_some() {
            bounds.max_rounds = options.max_rounds;
        }
        let mut runner = Runner {
            cluster: Cluster::new(params.clone(), seed),
            params,
            bounds,
            directory: GlobalDirectory::new(),
            seed,
            check_lemmas: scenario.check_lemmas || options.check_lemmas,
            reports: Vec::new(),
            index: 0,
            pending: Vec::new(),
        };
        for (i, f) in scenario.fixtures.iter().enumerate() {
            runner.install_fixture(i, f)?;
        }
        Ok(runner)
    }

    fn install_fixture(&mut self, i: usize, f: &Fixture) -> Result<(), HarnessError> {
        let p = &self.params;
        let mut rng = rng::stream(self.seed, &[rng::PRELOAD, i as u64]);
        let room = 1u64 << (p.address_bits - f.zone);
        let mut suffixes = BTreeSet::new();
        while suffixes.len() < f.items {
            suffixes.insert(rng.gen_range(0..room));
        }
        let items: Vec<DataItem> = suffixes
            .into_iter()
            .map(|s| DataItem {
                key: f.prefix | s << f.zone,
                payload: adversary::random_payload(p.payload_len, &mut rng),
                version: version_for(0, i),
            })
            .collect();
        let bucket = BucketId {
            zone: f.zone,
            prefix: f.prefix,
        };
        let hashes = HashFamily::new((0..p.c).map(|_| rng.gen()).collect());
        self.cluster
            .install_bucket(bucket, &items, hashes.clone(), 0)
            .map_err(|e| config(&format!("fixtures[{i}]"), e.to_string()))?;
        self.directory.record_writes(&items);
        let mut keys: Vec<u64> = items.iter().map(|d| d.key).collect();
        keys.sort_unstable();
        self.directory.record_encodings(&[crate::write_protocol::EncodedBucket {
            bucket,
            timestamp: 0,
            hashes,
            keys,
        }]);
        // a hostile fixture shows up in the first period's report
        for v in self.directory.size_violations(p.n()) {
            self.pending.push(Violation {
                invariant: "bucket_size".into(),
                detail: v.to_string(),
            });
        }
        Ok(())
    }

    /// Runs one period as described by `spec`.
    pub fn step(&mut self, spec: &PeriodSpec) -> Result<&PeriodReport, HarnessError> {
        let index = self.index;
        self.index += 1;
        let mut rng = rng::stream(self.seed, &[rng::ADVERSARY, index as u64]);
        let budget = self.params.crash_budget;
        let (crashed, victim) = match &spec.crash {
            CrashSpec::Rotating(r) => {
                let count = if r.counts.is_empty() {
                    0
                } else {
                    r.counts[index % r.counts.len()]
                };
                adversary::choose_crash_set(
                    &CrashStrategy::Random { count },
                    &self.cluster,
                    &self.directory,
                    budget,
                    &mut rng,
                )
            }
            CrashSpec::Plain(s) => adversary::choose_crash_set(s, &self.cluster, &self.directory, budget, &mut rng),
        };
        let victim_lookups = victim.filter(|_| spec.victim_lookups > 0).map(|v| (v, spec.victim_lookups));
        let batch = adversary::choose_requests(&spec.requests, &self.cluster, &self.directory, &crashed, victim_lookups, &mut rng);

        let out = self
            .cluster
            .run_period(&crashed, batch)
            .map_err(|source| HarnessError::Period { period: index, source })?;

        let mut violations = std::mem::take(&mut self.pending);
        if let Some(w) = &out.write {
            self.directory.record_losses(&w.lost_keys());
            self.directory.record_encodings(&w.encodings);
        }
        self.directory.record_writes(&out.applied_writes);

        let mut verdicts: BTreeMap<Verdict, usize> = BTreeMap::new();
        let mut unanswered = Vec::new();
        for (req, outcome) in &out.lookups {
            let v = self.directory.judge(req, outcome);
            *verdicts.entry(v).or_default() += 1;
            if v == Verdict::Unanswered {
                unanswered.push(req.key);
            }
            if v.is_violation() {
                violations.push(Violation {
                    invariant: "freshness".into(),
                    detail: format!(
                        "server {} key {}: {:?} judged {:?}",
                        req.server,
                        req.key,
                        summarize(outcome),
                        v
                    ),
                });
            }
        }
        for v in self.directory.size_violations(self.params.n()) {
            violations.push(Violation {
                invariant: "bucket_size".into(),
                detail: v.to_string(),
            });
        }

        let log = self.params.log2_n();
        let ledger = &out.ledger;
        let write_rounds = out.write.as_ref().map_or(0, |w| w.rounds());
        let max_phase = out
            .write
            .as_ref()
            .map_or(0, |w| w.phases.iter().map(|p| p.rounds).max().unwrap_or(0));
        let redundancy = oracle::measure_redundancy(&self.cluster, &self.directory);
        let crashed_flags: Vec<bool> = (0..self.params.n()).map(|s| self.cluster.is_crashed(s)).collect();
        let lemma = (self.check_lemmas && !out.lookups.is_empty())
            .then(|| oracle::lemma_report(&self.params, &crashed_flags, &self.directory, &out.lookup_stats));
        let report = PeriodReport {
            period: out.period,
            crashed: out.crashed.clone(),
            victim,
            aborted: out.aborted.clone(),
            writes_applied: out.applied_writes.len(),
            lookups: out.lookups.len(),
            verdicts,
            unanswered,
            rounds: ledger.rounds_used(),
            write_rounds,
            lookup_rounds: ledger.rounds_in(|s| {
                matches!(s, Stage::LookupMetadata | Stage::Probing | Stage::Decoding)
            }),
            max_phase_rounds: max_phase,
            max_congestion: ledger.max_congestion(),
            congestion_by_stage: ledger.rounds.iter().fold(BTreeMap::new(), |mut m, r| {
                let e = m.entry(r.stage).or_insert(0);
                *e = (*e).max(r.max_received);
                m
            }),
            max_message_bytes: ledger.max_message_bytes,
            messages: ledger.rounds.iter().map(|r| r.messages as u64).sum(),
            phase_bound: BoundCheck::new(max_phase as f64, self.bounds.c_phase * log),
            write_stage_bound: BoundCheck::new(write_rounds as f64, self.bounds.c_ws * log * log),
            period_bound: BoundCheck::new(ledger.rounds_used() as f64, self.bounds.c_rounds * log.powi(4)),
            congestion_bound: BoundCheck::new(ledger.max_congestion() as f64, self.bounds.c_cong * log.powi(3)),
            redundancy,
            predicted_redundancy: oracle::predicted_redundancy(&self.params, &self.directory),
            redundancy_bound: BoundCheck::new(redundancy, self.bounds.c_red * log),
            live_keys: self.directory.live_count(),
            buckets: self.directory.buckets().len(),
            lookup_stats: out.lookup_stats.clone(),
            lemma,
            notes: out.notes.len(),
            violations,
        };
        self.reports.push(report);
        Ok(self.reports.last().expect("just pushed"))
    }

    /// Whether the last period broke the hard round cap.
    pub fn over_cap(&self) -> bool {
        match (self.bounds.max_rounds, self.reports.last()) {
            (Some(cap), Some(r)) => r.rounds > cap,
            _ => false,
        }
    }
}

fn summarize(outcome: &LookupOutcome) -> String {
    match outcome {
        LookupOutcome::Answered { zone, version, .. } => format!("answered v{version} in zone {zone}"),
        LookupOutcome::NotExists => "not_exists".into(),
        LookupOutcome::Failed { zone, reason } => format!("failed in zone {zone}: {reason}"),
    }
}

/// Runs every period of the scenario; stops early at the round cap.
pub fn run_scenario(scenario: &Scenario, options: &RunOptions) -> Result<RunOutput, HarnessError> {
    let mut runner = Runner::new(scenario, options)?;
    let mut capped = false;
    'outer: for spec in &scenario.periods {
        for _ in 0..spec.repeat {
            runner.step(spec)?;
            if runner.over_cap() {
                capped = true;
                break 'outer;
            }
        }
    }
    let summary = Summary::of(&runner.reports, capped);
    Ok(RunOutput {
        reports: runner.reports,
        summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMOKE: &str = r#"
schema_version = 1
seed = 3

[system]
n = 16
k = 4
p = 2
c = 12

[[periods]]
requests = { strategy = "fill_all", key_space = 200 }

[[periods]]
requests = { strategy = "mixed", write_prob = 0.3, lookup_prob = 1.0, key_space = 200 }
"#;

    #[test]
    fn smoke_scenario_answers_everything() {
        let s = Scenario::from_toml(SMOKE).unwrap();
        let out = run_scenario(&s, &RunOptions::default()).unwrap();
        assert_eq!(out.summary.periods, 2);
        assert_eq!(out.summary.safety_violations, 0);
        assert_eq!(out.summary.unanswered, 0);
        assert_eq!(out.summary.correct, out.summary.lookups);
        assert_eq!(out.summary.exit_code(), 0);
    }

    #[test]
    fn mismatched_arity_names_the_field() {
        let text = SMOKE.replace("k = 4", "k = 3");
        match Scenario::from_toml(&text) {
            Err(HarnessError::Config { field, .. }) => assert_eq!(field, "system.k"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rotating_crash_spec_parses() {
        let text = SMOKE.replace(
            "requests = { strategy = \"fill_all\"",
            "crash = { strategy = \"rotating\", counts = [0, 1] }\nrequests = { strategy = \"fill_all\"",
        );
        let s = Scenario::from_toml(&text).unwrap();
        assert!(matches!(s.periods[0].crash, CrashSpec::Rotating(_)));
        let s = Scenario::from_toml(&SMOKE.replace(
            "requests = { strategy = \"fill_all\"",
            "crash = { strategy = \"random\", count = 1 }\nrequests = { strategy = \"fill_all\"",
        ))
        .unwrap();
        assert_eq!(s.periods[0].crash, CrashSpec::Plain(CrashStrategy::Random { count: 1 }));
    }
}
