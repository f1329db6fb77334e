//! Scenario files, the Monte Carlo harness and report generation.
//!
//! A [`Scenario`] is either a full-protocol workload (generation, relay,
//! verification, on-chain rounds, disputes) under one participant strategy,
//! or a committee game: one-dimensional committee votes scored against the
//! closed-form acceptance bounds. Trials run in parallel with per-trial seeds
//! derived from the master seed, and are merged in trial order so reports
//! are byte-identical across runs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bitstats::{self, BitStatsError, Tolerances};
use crate::clustering::{self, AdversaryPolicy, ClusteringError, GameParams};
use crate::commitments::{self, HiddenState};
use crate::contract::{self, Ballot, Contract, ContractConfig, ContractError, DriveError, Economics, Participant, RoundSetup, Verdict, ZkOracle};
use crate::digest::{derive_seed, tag, tagged_hash, Digest};
use crate::identity::{Account, IdentityError, LayerSlice, NodeId, NodeRegistration, Registry, RegistryConfig, SigningKey};
use crate::pipeline::{self, ArithmeticMode, Attack, CostMeter, Model, ModelConfig, NoiseModel, Phase, PipelineError, PrefillInput};
use crate::randomness;
use crate::scheduler::{self, KeyRing, RelayFault, Scheduler, SchedulerError, TaskRequest, TaskTranscript};

/// Registry name of the simulated model.
pub const MODEL_NAME: &str = "synthetic";

/// Default agreement radius for on-chain openings (mean absolute difference).
pub const DEFAULT_DELTA_ONCHAIN: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("scenario schema: {0}")]
    Schema(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Scheduler(#[from] SchedulerError),
    #[error(transparent)]
    Identity(#[from] IdentityError),
    #[error(transparent)]
    Drive(#[from] DriveError),
    #[error(transparent)]
    Contract(#[from] ContractError),
    #[error(transparent)]
    Clustering(#[from] ClusteringError),
    #[error(transparent)]
    BitStats(#[from] BitStatsError),
    #[error(transparent)]
    Commitment(#[from] commitments::CommitmentError),
}

fn schema(msg: impl Into<String>) -> ExperimentError {
    ExperimentError::Schema(msg.into())
}

// ---------------------------------------------------------------------------
// Scenario schema

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub seed: u64,
    pub trials: u64,
    pub setup: Setup,
    #[serde(default)]
    pub assertions: Vec<Assertion>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Setup {
    Protocol(ProtocolSetup),
    CommitteeGame(GameSetup),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GameSetup {
    #[serde(default = "GameParams::baseline")]
    pub params: GameParams,
    #[serde(default = "default_policy")]
    pub policy: AdversaryPolicy,
}

fn default_policy() -> AdversaryPolicy {
    AdversaryPolicy::RandomGuess
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolSetup {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default = "default_rel_scale")]
    pub noise_rel_scale: f64,
    #[serde(default)]
    pub committee: CommitteeSetup,
    #[serde(default)]
    pub economics: EconomicsSetup,
    #[serde(default)]
    pub workload: Workload,
    pub strategy: Strategy,
}

fn default_rel_scale() -> f64 {
    NoiseModel::DEFAULT_REL_SCALE
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CommitteeSetup {
    /// Nodes per layer slice.
    pub group_size: usize,
    pub committee_size: usize,
    pub tau: f64,
    pub delta_onchain: f64,
    pub sample_size: usize,
    /// Committee size requested when an inferencer disputes a rejection.
    pub dispute_committee: usize,
}

impl Default for CommitteeSetup {
    fn default() -> Self {
        CommitteeSetup {
            group_size: 7,
            committee_size: 6,
            tau: 0.7,
            delta_onchain: DEFAULT_DELTA_ONCHAIN,
            sample_size: 16,
            dispute_committee: 12,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EconomicsSetup {
    /// Cost of one verification pass.
    pub verification_cost: u64,
    /// Cost of one honest inference stage.
    pub inference_cost: u64,
    pub stake: u64,
    /// Overrides the defaults derived from the committee size and cost.
    pub rewards: Option<Economics>,
}

impl Default for EconomicsSetup {
    fn default() -> Self {
        EconomicsSetup {
            verification_cost: 1000,
            inference_cost: 2000,
            stake: 100_000,
            rewards: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Workload {
    pub prompt_len: usize,
    pub max_tokens: u32,
}

impl Default for Workload {
    fn default() -> Self {
        Workload {
            prompt_len: 8,
            max_tokens: 12,
        }
    }
}

/// The deviation exercised by a protocol scenario.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Strategy {
    Honest,
    /// The first `count` verifiers of every committee skip recomputation and
    /// commit to their input state as a guess.
    Lazy { count: usize },
    Quantize { bits: u32 },
    EarlyStop { at: usize },
    ForgedOutput { small_dim: usize, seed: u64 },
    /// The first `colluders` verifiers vote False and commit to a common
    /// fabricated state `offset` away from the inferencer's.
    Collusion { colluders: usize, offset: f32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Behaviour {
    Honest,
    Lazy,
    Colluding,
}

impl Strategy {
    pub fn attack(&self) -> Attack {
        match *self {
            Strategy::Quantize { bits } => Attack::Quantize { bits },
            Strategy::EarlyStop { at } => Attack::EarlyStop { at },
            Strategy::ForgedOutput { small_dim, seed } => Attack::ForgedOutput { small_dim, seed },
            _ => Attack::Identity,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Strategy::Honest => "honest",
            Strategy::Lazy { .. } => "lazy",
            Strategy::Quantize { .. } => "quantize",
            Strategy::EarlyStop { .. } => "early_stop",
            Strategy::ForgedOutput { .. } => "forged_output",
            Strategy::Collusion { .. } => "collusion",
        }
    }

    /// Role whose payoff measures this deviation.
    pub fn deviator_role(&self) -> Option<Role> {
        match self {
            Strategy::Honest => None,
            Strategy::Lazy { .. } => Some(Role::LazyVerifier),
            Strategy::Collusion { .. } => Some(Role::ColludingVerifier),
            _ => Some(Role::Inferencer),
        }
    }

    fn behaviour(&self, position: usize) -> Behaviour {
        match *self {
            Strategy::Lazy { count } if position < count => Behaviour::Lazy,
            Strategy::Collusion { colluders, .. } if position < colluders => Behaviour::Colluding,
            _ => Behaviour::Honest,
        }
    }

    /// Whether the stage's inferencer output departs from honest execution.
    fn stage_faulty(&self, stage: u32, stages: u32, applicable: bool) -> bool {
        match self {
            Strategy::Quantize { .. } => true,
            Strategy::EarlyStop { .. } => applicable && stage == stages,
            Strategy::ForgedOutput { .. } => stage == stages,
            _ => false,
        }
    }

    /// Fraction of the honest inference cost the inferencer actually spends.
    fn inference_cost_factor(&self, model: &ModelConfig, max_tokens: u32) -> f64 {
        match *self {
            Strategy::Quantize { bits } => bits as f64 / 32.0,
            Strategy::EarlyStop { at } => (at as f64 / max_tokens as f64).min(1.0),
            Strategy::ForgedOutput { small_dim, .. } => {
                let small = (small_dim * small_dim) as f64;
                let full = (model.hidden_dim * model.hidden_dim) as f64 * model.total_layers() as f64;
                small / full
            }
            _ => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Assertion {
    pub metric: String,
    pub op: Comparison,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Comparison {
    #[serde(rename = ">=")]
    Ge,
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = ">")]
    Gt,
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = "==")]
    Eq,
}

impl Comparison {
    pub fn holds(self, lhs: f64, rhs: f64) -> bool {
        match self {
            Comparison::Ge => lhs >= rhs,
            Comparison::Le => lhs <= rhs,
            Comparison::Gt => lhs > rhs,
            Comparison::Lt => lhs < rhs,
            Comparison::Eq => lhs == rhs,
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Comparison::Ge => ">=",
            Comparison::Le => "<=",
            Comparison::Gt => ">",
            Comparison::Lt => "<",
            Comparison::Eq => "==",
        }
    }
}

pub const PROTOCOL_METRICS: &[&str] = &[
    "trials",
    "errors",
    "applicable_trials",
    "inferencer_accept_rate",
    "detection_rate",
    "lazy_opening_success_rate",
    "oracle_flip_rate",
    "dispute_rate",
    "dispute_overturn_rate",
    "conservation_rate",
    "mean_tokens",
    "payoff_inferencer",
    "payoff_honest_verifier",
    "payoff_lazy_verifier",
    "payoff_colluding_verifier",
    "payoff_reconsideration_verifier",
];

pub const GAME_METRICS: &[&str] = &[
    "trials",
    "honest_accept_rate",
    "dishonest_accept_rate",
    "honest_accept_rate_given_consensus",
    "dishonest_accept_rate_given_consensus",
    "consensus_rate",
    "inferencer_accept_rate",
    "honest_bound",
    "dishonest_bound",
    "dishonest_naive_bound",
    "p_d1",
    "p_d2",
    "p_d3",
];

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, ExperimentError> {
        let s: Scenario = serde_json::from_str(text).map_err(|e| schema(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.trials == 0 {
            return Err(schema("trials must be at least 1"));
        }
        if self.name.is_empty() || !self.name.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) {
            return Err(schema(format!("name {:?} must be non-empty [A-Za-z0-9._-]", self.name)));
        }
        let known = match &self.setup {
            Setup::Protocol(p) => {
                p.validate()?;
                PROTOCOL_METRICS
            }
            Setup::CommitteeGame(a) => {
                a.params.validate()?;
                GAME_METRICS
            }
        };
        for a in &self.assertions {
            if !known.contains(&a.metric.as_str()) {
                return Err(schema(format!("unknown metric {:?}", a.metric)));
            }
        }
        Ok(())
    }
}

impl ProtocolSetup {
    pub fn new(strategy: Strategy) -> Self {
        ProtocolSetup {
            model: ModelConfig::default(),
            noise_rel_scale: NoiseModel::DEFAULT_REL_SCALE,
            committee: CommitteeSetup::default(),
            economics: EconomicsSetup::default(),
            workload: Workload::default(),
            strategy,
        }
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        self.model.validate()?;
        self.strategy.attack().validate()?;
        let c = &self.committee;
        if c.committee_size == 0 || c.group_size < c.committee_size + 1 {
            return Err(schema(format!("group_size {} cannot host a committee of {} plus an inferencer", c.group_size, c.committee_size)));
        }
        if !(0.5..=1.0).contains(&c.tau) {
            return Err(schema(format!("tau {} outside [0.5, 1]", c.tau)));
        }
        if c.delta_onchain.is_nan() || c.delta_onchain <= 0.0 {
            return Err(schema("delta_onchain must be positive"));
        }
        if c.sample_size == 0 || c.sample_size > self.model.hidden_dim {
            return Err(schema(format!("sample_size {} outside 1..={}", c.sample_size, self.model.hidden_dim)));
        }
        if !(0.0..1.0).contains(&self.noise_rel_scale) {
            return Err(schema("noise_rel_scale must be in [0, 1)"));
        }
        if self.workload.prompt_len == 0 || self.workload.max_tokens == 0 {
            return Err(schema("prompt_len and max_tokens must be positive"));
        }
        match self.strategy {
            Strategy::Lazy { count } if count == 0 || count > c.committee_size => Err(schema("lazy count outside 1..=committee_size")),
            Strategy::Collusion { colluders, .. } if colluders == 0 || colluders > c.committee_size => {
                Err(schema("colluders outside 1..=committee_size"))
            }
            Strategy::EarlyStop { at } if at > self.workload.max_tokens as usize => Err(schema("early stop beyond max_tokens")),
            _ => Ok(()),
        }
    }

    fn economics(&self) -> Economics {
        self.economics
            .rewards
            .unwrap_or_else(|| Economics::for_committee(self.committee.committee_size, self.economics.verification_cost))
    }
}

// ---------------------------------------------------------------------------
// Reports

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rate {
    pub successes: u64,
    pub trials: u64,
    pub rate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl Rate {
    pub fn new(successes: u64, trials: u64) -> Self {
        let (ci_low, ci_high) = wilson_interval(successes, trials);
        Rate {
            successes,
            trials,
            rate: if trials == 0 { 0.0 } else { successes as f64 / trials as f64 },
            ci_low,
            ci_high,
        }
    }
}

/// 95% Wilson score interval; `(0, 1)` when there are no trials.
pub fn wilson_interval(successes: u64, trials: u64) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    let z = 1.959_963_984_540_054_f64;
    let n = trials as f64;
    let p = successes as f64 / n;
    let denom = 1.0 + z * z / n;
    let centre = (p + z * z / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z * z / (4.0 * n * n)).sqrt() / denom;
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Inferencer,
    HonestVerifier,
    LazyVerifier,
    ColludingVerifier,
    ReconsiderationVerifier,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Inferencer => "inferencer",
            Role::HonestVerifier => "honest_verifier",
            Role::LazyVerifier => "lazy_verifier",
            Role::ColludingVerifier => "colluding_verifier",
            Role::ReconsiderationVerifier => "reconsideration_verifier",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PayoffRow {
    pub scenario: String,
    pub strategy: String,
    pub role: Role,
    /// Participations (one per stage round).
    pub samples: u64,
    pub mean: f64,
    /// Half-width of a normal 95% interval on the mean.
    pub ci_half_width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssertionResult {
    pub metric: String,
    pub op: Comparison,
    pub expected: f64,
    pub actual: Option<f64>,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub scenario: String,
    pub kind: String,
    pub strategy: String,
    pub seed: u64,
    pub trials: u64,
    pub metrics: BTreeMap<String, f64>,
    pub rates: BTreeMap<String, Rate>,
    pub payoffs: Vec<PayoffRow>,
    pub assertions: Vec<AssertionResult>,
    pub errors: Vec<String>,
    /// Per-trial CSV, written next to the summary.
    #[serde(skip)]
    pub trials_csv: String,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.assertions.iter().all(|a| a.passed)
    }

    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }

    pub fn payoff(&self, role: Role) -> Option<&PayoffRow> {
        self.payoffs.iter().find(|p| p.role == role)
    }

    fn check(&mut self, assertions: &[Assertion]) {
        self.assertions = assertions
            .iter()
            .map(|a| {
                let actual = self.metric(&a.metric);
                AssertionResult {
                    metric: a.metric.clone(),
                    op: a.op,
                    expected: a.value,
                    actual,
                    passed: actual.is_some_and(|v| a.op.holds(v, a.value)),
                }
            })
            .collect();
    }

    pub fn summary_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn payoffs_csv(&self) -> String {
        payoffs_csv(&self.payoffs)
    }

    /// Writes `<name>.summary.json`, `<name>.trials.csv` and
    /// `<name>.payoffs.csv` into `dir`; returns the paths.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>, ExperimentError> {
        fs::create_dir_all(dir)?;
        let files = [
            (format!("{}.summary.json", self.scenario), self.summary_json()),
            (format!("{}.trials.csv", self.scenario), self.trials_csv.clone()),
            (format!("{}.payoffs.csv", self.scenario), self.payoffs_csv()),
        ];
        let mut paths = Vec::new();
        for (name, body) in files {
            let p = dir.join(name);
            fs::write(&p, body)?;
            paths.push(p);
        }
        Ok(paths)
    }

    /// One line per assertion, for terminals and CI logs.
    pub fn assertion_table(&self) -> String {
        let mut out = String::new();
        for a in &self.assertions {
            let actual = a.actual.map_or("missing".to_string(), |v| format!("{v:.6}"));
            let _ = writeln!(
                out,
                "{} {} {} {} {:.6} (actual {actual})",
                if a.passed { "PASS" } else { "FAIL" },
                self.scenario,
                a.metric,
                a.op.symbol(),
                a.expected
            );
        }
        out
    }
}

pub fn payoffs_csv(rows: &[PayoffRow]) -> String {
    let mut out = String::from("scenario,strategy,role,samples,mean,ci_half_width\n");
    for p in rows {
        let _ = writeln!(out, "{},{},{},{},{:.4},{:.4}", p.scenario, p.strategy, p.role.as_str(), p.samples, p.mean, p.ci_half_width);
    }
    out
}

/// Runs `scenario` and evaluates its assertions.
pub fn run_scenario(scenario: &Scenario) -> Result<Report, ExperimentError> {
    scenario.validate()?;
    let mut report = match &scenario.setup {
        Setup::Protocol(p) => run_protocol(scenario, p)?,
        Setup::CommitteeGame(a) => run_game(scenario, a),
    };
    report.check(&scenario.assertions);
    Ok(report)
}

// ---------------------------------------------------------------------------
// Committee game

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GameTally {
    pub rounds: u64,
    pub honest: u64,
    pub honest_accepted: u64,
    pub dishonest: u64,
    pub dishonest_accepted: u64,
    pub consensus: u64,
    pub honest_in_consensus: u64,
    pub honest_accepted_in_consensus: u64,
    pub dishonest_in_consensus: u64,
    pub dishonest_accepted_in_consensus: u64,
    pub inferencer_accepted: u64,
    /// Per-round second moments, for standard errors that respect the
    /// correlation between verifiers of the same round.
    pub honest_moments: Moments,
    pub dishonest_moments: Moments,
}

/// `Σ a²`, `Σ a·h`, `Σ h²` over rounds with `a` accepted out of `h`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Moments {
    pub aa: u64,
    pub ah: u64,
    pub hh: u64,
}

impl Moments {
    fn add(&mut self, a: u64, h: u64) {
        self.aa += a * a;
        self.ah += a * h;
        self.hh += h * h;
    }

    fn merge(self, o: Moments) -> Moments {
        Moments {
            aa: self.aa + o.aa,
            ah: self.ah + o.ah,
            hh: self.hh + o.hh,
        }
    }

    /// Standard error of the pooled ratio `Σa / Σh` around `rate`.
    pub fn std_error(&self, rate: f64, total_h: u64) -> f64 {
        if total_h == 0 {
            return 0.0;
        }
        let ss = self.aa as f64 - 2.0 * rate * self.ah as f64 + rate * rate * self.hh as f64;
        ss.max(0.0).sqrt() / total_h as f64
    }
}

impl GameTally {
    fn add(&mut self, o: &clustering::RoundOutcome) {
        self.rounds += 1;
        let h = o.honest.iter().filter(|&&h| h).count() as u64;
        let ha = o.honest.iter().zip(&o.accepted).filter(|(h, a)| **h && **a).count() as u64;
        let d = o.honest.len() as u64 - h;
        let da = o.honest.iter().zip(&o.accepted).filter(|(h, a)| !**h && **a).count() as u64;
        self.honest += h;
        self.honest_accepted += ha;
        self.dishonest += d;
        self.dishonest_accepted += da;
        self.honest_moments.add(ha, h);
        self.dishonest_moments.add(da, d);
        if o.consensus {
            self.consensus += 1;
            self.honest_in_consensus += h;
            self.honest_accepted_in_consensus += ha;
            self.dishonest_in_consensus += d;
            self.dishonest_accepted_in_consensus += da;
        }
        if o.inferencer_accepted == Some(true) {
            self.inferencer_accepted += 1;
        }
    }

    fn merge(mut self, o: GameTally) -> GameTally {
        self.rounds += o.rounds;
        self.honest += o.honest;
        self.honest_accepted += o.honest_accepted;
        self.dishonest += o.dishonest;
        self.dishonest_accepted += o.dishonest_accepted;
        self.consensus += o.consensus;
        self.honest_in_consensus += o.honest_in_consensus;
        self.honest_accepted_in_consensus += o.honest_accepted_in_consensus;
        self.dishonest_in_consensus += o.dishonest_in_consensus;
        self.dishonest_accepted_in_consensus += o.dishonest_accepted_in_consensus;
        self.inferencer_accepted += o.inferencer_accepted;
        self.honest_moments = self.honest_moments.merge(o.honest_moments);
        self.dishonest_moments = self.dishonest_moments.merge(o.dishonest_moments);
        self
    }

    pub fn honest_rate(&self) -> Rate {
        Rate::new(self.honest_accepted, self.honest)
    }

    pub fn dishonest_rate(&self) -> Rate {
        Rate::new(self.dishonest_accepted, self.dishonest)
    }
}

fn game_rng(seed: u64, trial: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xa99, trial]))
}

/// Pooled Monte Carlo tallies over `trials` committee rounds.
pub fn simulate_game(params: &GameParams, policy: AdversaryPolicy, trials: u64, seed: u64) -> GameTally {
    (0..trials)
        .into_par_iter()
        .fold(GameTally::default, |mut t, i| {
            t.add(&clustering::simulate_round(params, policy, &mut game_rng(seed, i)));
            t
        })
        .reduce(GameTally::default, GameTally::merge)
}

fn run_game(scenario: &Scenario, a: &GameSetup) -> Report {
    let p = &a.params;
    let rounds: Vec<clustering::RoundOutcome> = (0..scenario.trials)
        .into_par_iter()
        .map(|i| clustering::simulate_round(p, a.policy, &mut game_rng(scenario.seed, i)))
        .collect();
    let mut tally = GameTally::default();
    let mut csv = String::from("trial,honest,honest_accepted,dishonest,dishonest_accepted,consensus,inferencer_accepted\n");
    for (i, o) in rounds.iter().enumerate() {
        tally.add(o);
        let h = o.honest.iter().filter(|&&h| h).count();
        let ha = o.honest.iter().zip(&o.accepted).filter(|(h, a)| **h && **a).count();
        let da = o.honest.iter().zip(&o.accepted).filter(|(h, a)| !**h && **a).count();
        let inf = match o.inferencer_accepted {
            Some(true) => "1",
            Some(false) => "0",
            None => "",
        };
        let _ = writeln!(csv, "{i},{h},{ha},{},{da},{},{inf}", o.honest.len() - h, o.consensus as u8);
    }
    let bound = clustering::dishonest_accept_upper_bound(p);
    let mut rates = BTreeMap::new();
    rates.insert("honest_accept".to_string(), tally.honest_rate());
    rates.insert("dishonest_accept".to_string(), tally.dishonest_rate());
    rates.insert(
        "honest_accept_given_consensus".to_string(),
        Rate::new(tally.honest_accepted_in_consensus, tally.honest_in_consensus),
    );
    rates.insert(
        "dishonest_accept_given_consensus".to_string(),
        Rate::new(tally.dishonest_accepted_in_consensus, tally.dishonest_in_consensus),
    );
    rates.insert("consensus".to_string(), Rate::new(tally.consensus, tally.rounds));
    rates.insert("inferencer_accept".to_string(), Rate::new(tally.inferencer_accepted, tally.rounds));
    let mut metrics = BTreeMap::new();
    metrics.insert("trials".to_string(), scenario.trials as f64);
    for (k, r) in &rates {
        metrics.insert(format!("{k}_rate"), r.rate);
    }
    metrics.insert("honest_bound".to_string(), clustering::honest_accept_lower_bound(p));
    metrics.insert("dishonest_bound".to_string(), bound.total);
    metrics.insert("dishonest_naive_bound".to_string(), bound.naive_total);
    metrics.insert("p_d1".to_string(), bound.p_d1);
    metrics.insert("p_d2".to_string(), bound.p_d2);
    metrics.insert("p_d3".to_string(), bound.p_d3);
    Report {
        scenario: scenario.name.clone(),
        kind: "committee_game".into(),
        strategy: match a.policy {
            AdversaryPolicy::RandomGuess => "random_guess".into(),
            AdversaryPolicy::Colluding { .. } => "colluding".into(),
        },
        seed: scenario.seed,
        trials: scenario.trials,
        metrics,
        rates,
        payoffs: Vec::new(),
        assertions: Vec::new(),
        errors: Vec::new(),
        trials_csv: csv,
    }
}

// ---------------------------------------------------------------------------
// Bounds grid

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundsRow {
    pub n: usize,
    pub q: usize,
    pub eps: f64,
    pub r: f64,
    pub honest_mc: f64,
    pub honest_bound: f64,
    pub honest_sigma: f64,
    pub dishonest_mc: f64,
    pub dishonest_bound: f64,
    pub dishonest_sigma: f64,
    pub pass: bool,
}

/// The grid `n ∈ 4..=10`, every `q > n/2`, `ε1 = ε2 ∈ {0, 0.01, 0.05}` and
/// `r ∈ {0.50, 0.55, ..., 0.95}`.
pub fn default_bounds_grid() -> Vec<GameParams> {
    let mut grid = Vec::new();
    for n in 4..=10 {
        for q in n / 2 + 1..=n {
            for eps in [0.0, 0.01, 0.05] {
                for step in 0..10 {
                    grid.push(GameParams {
                        n,
                        q,
                        delta: 1.0,
                        eps1: eps,
                        eps2: eps,
                        r: 0.5 + 0.05 * step as f64,
                        c: 1.0,
                    });
                }
            }
        }
    }
    grid
}

/// Monte Carlo against the analytic bounds at every grid point, with 3σ slack
/// from the per-round standard error evaluated at the bound.
pub fn bounds_check(grid: &[GameParams], trials: u64, seed: u64) -> Vec<BoundsRow> {
    grid.iter()
        .enumerate()
        .map(|(i, p)| {
            let t = simulate_game(p, AdversaryPolicy::RandomGuess, trials, derive_seed(seed, &[i as u64]));
            let hb = clustering::honest_accept_lower_bound(p);
            let db = clustering::dishonest_accept_upper_bound(p).total;
            let (h, d) = (t.honest_rate(), t.dishonest_rate());
            let hs = t.honest_moments.std_error(hb, t.honest);
            let ds = t.dishonest_moments.std_error(db, t.dishonest);
            // Acceptances arrive in whole rounds; allow one round's worth.
            let step = |total: u64| if total == 0 { 0.0 } else { p.n as f64 / total as f64 };
            let pass = (t.honest == 0 || h.rate >= hb - 3.0 * hs - step(t.honest))
                && (t.dishonest == 0 || d.rate <= db + 3.0 * ds + step(t.dishonest));
            BoundsRow {
                n: p.n,
                q: p.q,
                eps: p.eps1,
                r: p.r,
                honest_mc: h.rate,
                honest_bound: hb,
                honest_sigma: hs,
                dishonest_mc: d.rate,
                dishonest_bound: db,
                dishonest_sigma: ds,
                pass,
            }
        })
        .collect()
}

/// Upper-tail probability of a standard normal beyond 3.
const THREE_SIGMA_TAIL: f64 = 0.001_349_898_031_630_094_6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridVerdict {
    pub points: usize,
    pub failures: usize,
    /// Exceedances a correct bound still produces with probability ≥ 0.001
    /// when every point sits exactly on its bound.
    pub allowed: usize,
    pub pass: bool,
}

/// Aggregates per-point results, allowing for chance 3σ exceedances across
/// many simultaneous comparisons.
pub fn grid_verdict(rows: &[BoundsRow]) -> GridVerdict {
    let n = rows.len();
    let failures = rows.iter().filter(|r| !r.pass).count();
    // Smallest k with P(Bin(n, tail) > k) < 0.001.
    let p = THREE_SIGMA_TAIL;
    let mut pmf = (1.0 - p).powi(n as i32);
    let mut cdf = pmf;
    let mut allowed = 0;
    while 1.0 - cdf >= 1e-3 && allowed < n {
        pmf *= (n - allowed) as f64 / (allowed + 1) as f64 * p / (1.0 - p);
        allowed += 1;
        cdf += pmf;
    }
    GridVerdict {
        points: n,
        failures,
        allowed,
        pass: failures <= allowed,
    }
}

pub fn bounds_csv(rows: &[BoundsRow]) -> String {
    let mut out = String::from("n,q,eps,r,honest_mc,honest_bound,honest_sigma,dishonest_mc,dishonest_bound,dishonest_sigma,pass\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{:.2},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
            r.n,
            r.q,
            r.eps,
            r.r,
            r.honest_mc,
            r.honest_bound,
            r.honest_sigma,
            r.dishonest_mc,
            r.dishonest_bound,
            r.dishonest_sigma,
            if r.pass { "PASS" } else { "FAIL" }
        );
    }
    out
}

// ---------------------------------------------------------------------------
// Full-protocol trials

/// Nodes, keys and contract configuration shared by every trial of a
/// protocol scenario.
pub struct ProtocolWorld {
    pub setup: ProtocolSetup,
    pub model: Model,
    pub registry: Registry,
    pub keys: KeyRing,
    pub scheduler: Scheduler,
    pub oracle: ZkOracle,
    pub config: ContractConfig,
}

impl ProtocolWorld {
    pub fn new(setup: &ProtocolSetup, seed: u64) -> Result<Self, ExperimentError> {
        setup.validate()?;
        let cfg = setup.model;
        let c = setup.committee;
        let stake = setup.economics.stake;
        let mut registry = Registry::new(RegistryConfig {
            min_stake: stake / 10,
            withdrawal_delay: 10,
            k_min: c.committee_size,
        });
        registry.declare_model(MODEL_NAME, cfg.total_layers());
        let mut keys = KeyRing::default();
        let mut n = 0u64;
        for stage in 0..cfg.segments {
            let lo = stage * cfg.layers_per_segment + 1;
            let slice = LayerSlice::new(lo, lo + cfg.layers_per_segment - 1)?;
            for _ in 0..c.group_size {
                let key = SigningKey::from_seed(derive_seed(seed, &[0x4e0de, n]));
                let id = registry.register(
                    NodeRegistration {
                        public_key: key.public(),
                        model: MODEL_NAME.into(),
                        slice,
                        endpoint: format!("sim://{n}"),
                    },
                    stake,
                )?;
                keys.insert(id, key);
                n += 1;
            }
        }
        let scheduler = Scheduler::new(derive_seed(seed, &[0x5c4ed]));
        registry.register_scheduler(scheduler.public_key(), stake)?;
        registry.fund_treasury(1_000_000_000);
        let oracle = ZkOracle::new(derive_seed(seed, &[0x0a]));
        let config = ContractConfig {
            model: MODEL_NAME.into(),
            committee_size: c.committee_size,
            tau: c.tau,
            delta_onchain: c.delta_onchain,
            hidden_dim: cfg.hidden_dim,
            sample_size: c.sample_size,
            commit_window: 2,
            reveal_window: 2,
            dispute_window: 4,
            economics: setup.economics(),
            scheduler_vrf: scheduler.vrf_public(),
            oracle_key: oracle.public_key(),
        };
        Ok(ProtocolWorld {
            setup: setup.clone(),
            model: Model::new(cfg, ArithmeticMode::FullPrecision)?,
            registry,
            keys,
            scheduler,
            oracle,
            config,
        })
    }

    fn key(&self, id: NodeId) -> Result<&SigningKey, ExperimentError> {
        Ok(self.keys.get(id)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: u64,
    pub applicable: bool,
    pub faulty: bool,
    pub accepted: bool,
    pub detected: bool,
    pub verdicts: Vec<Verdict>,
    pub tokens: usize,
    pub oracle_flips: u32,
    pub disputes: u32,
    pub overturned: u32,
    pub lazy_attempts: u32,
    pub lazy_successes: u32,
    pub conserved: bool,
    pub payoffs: Vec<(Role, f64)>,
}

/// Everything a single logged trial leaves behind.
pub struct TrialArtifacts {
    pub record: TrialRecord,
    pub transcript: TaskTranscript,
    pub contract: Contract,
}

fn balances(registry: &Registry) -> BTreeMap<Account, i128> {
    let l = registry.ledger();
    let mut out: BTreeMap<Account, i128> = BTreeMap::new();
    for (a, v) in l.free.iter().chain(l.locked.iter()) {
        *out.entry(*a).or_default() += *v as i128;
    }
    out
}

/// Last `rows` rows of `state`.
fn tail_rows(state: &HiddenState, rows: usize) -> HiddenState {
    state.slice_rows(state.token_count() - rows, rows)
}

/// Runs one task through generation, verification and every stage round.
pub fn run_protocol_trial(world: &ProtocolWorld, seed: u64, trial: u64, logged: bool) -> Result<TrialArtifacts, ExperimentError> {
    let setup = &world.setup;
    let cfg = *world.model.config();
    let strategy = setup.strategy;
    let m = setup.committee.committee_size;
    let c = setup.economics.verification_cost as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x7e1a1, trial]));
    let prompt: Vec<u32> = (0..setup.workload.prompt_len).map(|_| rng.gen_range(1..cfg.vocab)).collect();
    let request = TaskRequest {
        model: MODEL_NAME.into(),
        prompt,
        max_tokens: setup.workload.max_tokens,
        nonce: trial,
    };
    let snapshot = world.registry.group_snapshot(MODEL_NAME)?;
    let assignment = world.scheduler.assign_roles(&request, &snapshot, m)?;
    let base_noise = NoiseModel {
        rel_scale: setup.noise_rel_scale,
        exponent_flip_prob: 0.0,
        seed: derive_seed(seed, &[0x401e, trial]),
    };
    let transcript = world.scheduler.run_inference(
        &request,
        &assignment,
        &world.registry,
        &world.keys,
        &world.model,
        base_noise,
        strategy.attack(),
        RelayFault::None,
    )?;
    let applicable = match strategy {
        Strategy::EarlyStop { .. } => transcript.stop_overridden,
        _ => true,
    };
    let task = transcript.task();
    let stages = transcript.stages();
    let p = request.prompt.len();
    let prefill = transcript.prefill_tokens();
    let mut contract = if logged {
        Contract::with_log(world.config.clone(), world.registry.clone())
    } else {
        Contract::new(world.config.clone(), world.registry.clone())
    };
    let before = balances(contract.registry());
    let treasury_before = contract.registry().ledger().treasury as i128;
    let mut spent: BTreeMap<Account, f64> = BTreeMap::new();
    let mut deposits: BTreeMap<Account, i128> = BTreeMap::new();
    let mut roles_of: Vec<(Account, Role)> = Vec::new();
    let mut rec = TrialRecord {
        trial,
        applicable,
        faulty: false,
        accepted: true,
        detected: false,
        verdicts: Vec::new(),
        tokens: transcript.tokens.len(),
        oracle_flips: 0,
        disputes: 0,
        overturned: 0,
        lazy_attempts: 0,
        lazy_successes: 0,
        conserved: true,
        payoffs: Vec::new(),
    };
    let inference_cost = setup.economics.inference_cost as f64 * strategy.inference_cost_factor(&cfg, setup.workload.max_tokens);

    for stage in 1..=stages {
        let roles = assignment.stage(stage).clone();
        let tail = stage == stages;
        let faulty = strategy.stage_faulty(stage, stages, applicable);
        rec.faulty |= faulty;
        let inferencer = Account::Node(roles.inferencer);
        roles_of.push((inferencer, Role::Inferencer));
        *spent.entry(inferencer).or_default() += inference_cost;

        let relayed_in = if stage == 1 { None } else { Some(transcript.stage_inputs(stage)?) };
        let input = match &relayed_in {
            None => PrefillInput::Tokens(&prefill),
            Some(s) => PrefillInput::States(s),
        };
        let claimed = transcript.stage_outputs(stage)?;
        let inf_final = transcript.final_state(stage)?.clone();
        let rows = inf_final.token_count();

        let honest_ballot = |v: NodeId, rng: &mut ChaCha8Rng| -> Result<Ballot, ExperimentError> {
            let mut meter = CostMeter::new(stages as usize);
            let out = pipeline::verify_prefill(&world.model, stage as usize, input, task, scheduler::node_noise(base_noise, v), &mut meter)?;
            let stats = bitstats::compare_traces(std::slice::from_ref(&claimed), std::slice::from_ref(&out), &Tolerances::OFF_CHAIN)?;
            let mut verdict = bitstats::accept(&stats, &Tolerances::OFF_CHAIN);
            let tokens = tail.then(|| world.model.decode_rows(&out, p - 1));
            if let Some(t) = &tokens {
                verdict &= *t == transcript.tokens;
            }
            Ok(Ballot::new(tail_rows(&out, rows).values(), verdict, rng.gen(), tokens)?)
        };

        let mut participants = Vec::with_capacity(m);
        let mut lazy = Vec::new();
        for (j, &v) in roles.verifiers.iter().enumerate() {
            let account = Account::Node(v);
            let ballot = match strategy.behaviour(j) {
                Behaviour::Honest => {
                    roles_of.push((account, Role::HonestVerifier));
                    *spent.entry(account).or_default() += c;
                    honest_ballot(v, &mut rng)?
                }
                Behaviour::Lazy => {
                    roles_of.push((account, Role::LazyVerifier));
                    lazy.push(v);
                    // The cheapest plausible guess: pass the input through.
                    let guess = match &relayed_in {
                        None => world.model.embed(&prefill[prefill.len() - rows..])?,
                        Some(s) => tail_rows(s, rows).values().to_vec(),
                    };
                    Ballot::new(&guess, true, rng.gen(), tail.then(|| transcript.tokens.clone()))?
                }
                Behaviour::Colluding => {
                    roles_of.push((account, Role::ColludingVerifier));
                    let offset = match strategy {
                        Strategy::Collusion { offset, .. } => offset,
                        _ => 0.0,
                    };
                    let fake: Vec<f32> = inf_final.values().iter().map(|x| x + offset).collect();
                    Ballot::new(&fake, false, rng.gen(), tail.then(|| transcript.tokens.clone()))?
                }
            };
            participants.push(Participant {
                verifier: v,
                ballot: Some(ballot),
                reveals: true,
            });
        }

        let key = world.key(roles.inferencer)?.clone();
        let round_setup = RoundSetup {
            task,
            roles: &roles,
            tail,
            reported_tokens: &transcript.tokens,
            inferencer_state: &inf_final,
            inferencer_key: &key,
        };
        let (round, outcome) = contract::drive_round(&mut contract, &world.scheduler, round_setup, &participants)?;

        {
            let r = contract.round(round)?;
            let package = r.package.as_ref().expect("adjudicated round has a package");
            for v in &lazy {
                rec.lazy_attempts += 1;
                let opened = &r.reveals[v].values;
                let pass = bitstats::compare_values(&package.values, opened, &Tolerances::ON_CHAIN)
                    .map(|s| bitstats::accept(&s, &Tolerances::ON_CHAIN))
                    .unwrap_or(false);
                rec.lazy_successes += pass as u32;
            }
        }

        match outcome.verdict {
            Verdict::Ambiguous if faulty => {
                let prover = roles
                    .verifiers
                    .iter()
                    .enumerate()
                    .find(|(j, v)| strategy.behaviour(*j) == Behaviour::Honest && contract.round(round).is_ok_and(|r| r.reveals.get(v).is_some_and(|e| !e.verdict)))
                    .map(|(_, v)| *v);
                if let Some(prover) = prover {
                    let attestation = world.oracle.attest(contract.round(round)?, false);
                    contract.oracle_dispute(round, prover, &attestation)?;
                    rec.oracle_flips += 1;
                }
            }
            Verdict::RejectInferencer if !faulty => {
                let m_prime = setup.committee.dispute_committee;
                let r = contract.round(round)?;
                if Contract::reconsideration_pool(r).len() >= m_prime && m_prime > m {
                    let vrf = world
                        .scheduler
                        .vrf()
                        .eval(&randomness::reconsideration_transcript(&task, stage, r.group.len() as u32, m_prime as u32));
                    let escrow = (m_prime - m) as u64 * contract.config().fee_per_verifier();
                    contract.deposit(inferencer, escrow);
                    *deposits.entry(inferencer).or_default() += escrow as i128;
                    let child = contract.dispute(round, m_prime, &vrf)?;
                    rec.disputes += 1;
                    let committee = contract.round(child)?.committee.clone();
                    let mut ps = Vec::with_capacity(committee.len());
                    for v in committee {
                        let account = Account::Node(v);
                        roles_of.push((account, Role::ReconsiderationVerifier));
                        *spent.entry(account).or_default() += c;
                        ps.push(Participant {
                            verifier: v,
                            ballot: Some(honest_ballot(v, &mut rng)?),
                            reveals: true,
                        });
                    }
                    let o = contract::drive_opened_round(&mut contract, &world.scheduler, &round_setup, child, &ps)?;
                    rec.overturned += (o.verdict != Verdict::RejectInferencer) as u32;
                }
            }
            _ => {}
        }
        let verdict = contract.round(round)?.outcome.as_ref().map_or(Verdict::Ambiguous, |o| o.verdict);
        rec.accepted &= verdict != Verdict::RejectInferencer;
        rec.detected |= verdict == Verdict::RejectInferencer;
        rec.verdicts.push(verdict);
    }

    let after = balances(contract.registry());
    let ledger = contract.registry().ledger();
    let minted: i128 = deposits.values().sum();
    let total_before: i128 = before.values().sum::<i128>() + treasury_before;
    let total_after: i128 = after.values().sum::<i128>() + ledger.treasury as i128;
    rec.conserved = ledger.is_conserved() && total_after - total_before == minted;
    for (account, role) in roles_of {
        let delta = after.get(&account).copied().unwrap_or(0) - before.get(&account).copied().unwrap_or(0) - deposits.get(&account).copied().unwrap_or(0);
        rec.payoffs.push((role, delta as f64 - spent.get(&account).copied().unwrap_or(0.0)));
        // Costs are charged once per account even if it holds several roles.
        spent.remove(&account);
        deposits.remove(&account);
    }
    Ok(TrialArtifacts {
        record: rec,
        transcript,
        contract,
    })
}

fn run_protocol(scenario: &Scenario, setup: &ProtocolSetup) -> Result<Report, ExperimentError> {
    let world = ProtocolWorld::new(setup, scenario.seed)?;
    let results: Vec<Result<TrialRecord, String>> = (0..scenario.trials)
        .into_par_iter()
        .map(|t| run_protocol_trial(&world, scenario.seed, t, false).map(|a| a.record).map_err(|e| e.to_string()))
        .collect();

    let mut csv = String::from("trial,applicable,faulty,accepted,detected,verdicts,tokens,oracle_flips,disputes,overturned,lazy_attempts,lazy_successes,conserved,error\n");
    let mut errors = Vec::new();
    let (mut applicable, mut accepted, mut detected, mut conserved, mut tokens) = (0u64, 0u64, 0u64, 0u64, 0u64);
    let (mut lazy_attempts, mut lazy_successes, mut flips, mut disputes, mut overturned, mut rounds) = (0u64, 0u64, 0u64, 0u64, 0u64, 0u64);
    let mut samples: BTreeMap<Role, Vec<f64>> = BTreeMap::new();
    for (t, r) in results.iter().enumerate() {
        match r {
            Ok(r) => {
                let verdicts: Vec<&str> = r
                    .verdicts
                    .iter()
                    .map(|v| match v {
                        Verdict::AcceptInferencer => "A",
                        Verdict::RejectInferencer => "R",
                        Verdict::Ambiguous => "U",
                    })
                    .collect();
                let _ = writeln!(
                    csv,
                    "{t},{},{},{},{},{},{},{},{},{},{},{},{},",
                    r.applicable as u8,
                    r.faulty as u8,
                    r.accepted as u8,
                    r.detected as u8,
                    verdicts.join(""),
                    r.tokens,
                    r.oracle_flips,
                    r.disputes,
                    r.overturned,
                    r.lazy_attempts,
                    r.lazy_successes,
                    r.conserved as u8
                );
                conserved += r.conserved as u64;
                lazy_attempts += r.lazy_attempts as u64;
                lazy_successes += r.lazy_successes as u64;
                rounds += r.verdicts.len() as u64;
                flips += r.oracle_flips as u64;
                disputes += r.disputes as u64;
                overturned += r.overturned as u64;
                tokens += r.tokens as u64;
                for (role, v) in &r.payoffs {
                    samples.entry(*role).or_default().push(*v);
                }
                if r.applicable {
                    applicable += 1;
                    accepted += r.accepted as u64;
                    detected += r.detected as u64;
                }
            }
            Err(e) => {
                let _ = writeln!(csv, "{t},,,,,,,,,,,,,\"{}\"", e.replace('"', "'"));
                errors.push(format!("trial {t}: {e}"));
            }
        }
    }
    let ok = scenario.trials - errors.len() as u64;
    let mut rates = BTreeMap::new();
    rates.insert("inferencer_accept".to_string(), Rate::new(accepted, applicable));
    rates.insert("detection".to_string(), Rate::new(detected, applicable));
    rates.insert("lazy_opening_success".to_string(), Rate::new(lazy_successes, lazy_attempts));
    rates.insert("oracle_flip".to_string(), Rate::new(flips, rounds));
    rates.insert("dispute".to_string(), Rate::new(disputes, rounds));
    rates.insert("dispute_overturn".to_string(), Rate::new(overturned, disputes));
    rates.insert("conservation".to_string(), Rate::new(conserved, ok));
    let mut metrics = BTreeMap::new();
    metrics.insert("trials".to_string(), scenario.trials as f64);
    metrics.insert("errors".to_string(), errors.len() as f64);
    metrics.insert("applicable_trials".to_string(), applicable as f64);
    metrics.insert("mean_tokens".to_string(), if ok == 0 { 0.0 } else { tokens as f64 / ok as f64 });
    for (k, r) in &rates {
        if r.trials > 0 {
            metrics.insert(format!("{k}_rate"), r.rate);
        }
    }
    let mut payoffs = Vec::new();
    for (role, xs) in &samples {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = if xs.len() > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
        metrics.insert(format!("payoff_{}", role.as_str()), mean);
        payoffs.push(PayoffRow {
            scenario: scenario.name.clone(),
            strategy: setup.strategy.label().into(),
            role: *role,
            samples: xs.len() as u64,
            mean,
            ci_half_width: 1.96 * (var / n).sqrt(),
        });
    }
    Ok(Report {
        scenario: scenario.name.clone(),
        kind: "protocol".into(),
        strategy: setup.strategy.label().into(),
        seed: scenario.seed,
        trials: scenario.trials,
        metrics,
        rates,
        payoffs,
        assertions: Vec::new(),
        errors,
        trials_csv: csv,
    })
}

/// Runs one trial with the contract log enabled and writes the contract log
/// (`contract.jsonl`), the task transcript and the trial record into `dir`.
pub fn write_logged_trial(scenario: &Scenario, trial: u64, dir: &Path) -> Result<TrialRecord, ExperimentError> {
    let Setup::Protocol(setup) = &scenario.setup else {
        return Err(schema("logged trials need a protocol scenario"));
    };
    let world = ProtocolWorld::new(setup, scenario.seed)?;
    let a = run_protocol_trial(&world, scenario.seed, trial, true)?;
    fs::create_dir_all(dir)?;
    fs::write(dir.join("contract.jsonl"), a.contract.log_jsonl().expect("logging enabled"))?;
    scheduler::write_transcript(&dir.join("transcript"), &a.transcript)?;
    fs::write(dir.join("trial.json"), serde_json::to_string_pretty(&a.record).expect("record serializes") + "\n")?;
    Ok(a.record)
}

// ---------------------------------------------------------------------------
// Payoffs and the equilibrium check

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumRow {
    pub deviation: String,
    pub role: Role,
    pub honest_payoff: f64,
    pub deviation_payoff: f64,
    pub margin: f64,
    pub holds: bool,
}

/// Every payoff row across `reports`, in report order.
pub fn payoff_table(reports: &[Report]) -> Vec<PayoffRow> {
    reports.iter().flat_map(|r| r.payoffs.iter().cloned()).collect()
}

/// Compares each deviation's payoff to the honest payoff for the same role,
/// taken from the report whose strategy is `honest`.
pub fn equilibrium_check(reports: &[Report]) -> Result<Vec<EquilibriumRow>, ExperimentError> {
    let honest = reports
        .iter()
        .find(|r| r.kind == "protocol" && r.strategy == "honest")
        .ok_or_else(|| schema("no honest protocol report to compare against"))?;
    let honest_for = |role: Role| -> Result<f64, ExperimentError> {
        let base = match role {
            Role::Inferencer => Role::Inferencer,
            _ => Role::HonestVerifier,
        };
        honest
            .payoff(base)
            .map(|p| p.mean)
            .ok_or_else(|| schema(format!("honest report lacks {} payoffs", base.as_str())))
    };
    let mut rows = Vec::new();
    for r in reports.iter().filter(|r| r.kind == "protocol" && r.strategy != "honest") {
        let role = match r.strategy.as_str() {
            "lazy" => Role::LazyVerifier,
            "collusion" => Role::ColludingVerifier,
            _ => Role::Inferencer,
        };
        let Some(dev) = r.payoff(role) else { continue };
        let h = honest_for(role)?;
        rows.push(EquilibriumRow {
            deviation: r.scenario.clone(),
            role,
            honest_payoff: h,
            deviation_payoff: dev.mean,
            margin: h - dev.mean,
            holds: h > dev.mean,
        });
    }
    Ok(rows)
}

pub fn equilibrium_csv(rows: &[EquilibriumRow]) -> String {
    let mut out = String::from("deviation,role,honest_payoff,deviation_payoff,margin,holds\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{:.4},{:.4},{:.4},{}", r.deviation, r.role.as_str(), r.honest_payoff, r.deviation_payoff, r.margin, r.holds);
    }
    out
}

/// The bundled protocol scenarios, one per strategy, with `trials` each.
pub fn default_scenarios(trials: u64, seed: u64) -> Vec<Scenario> {
    let proto = |name: &str, description: &str, setup: ProtocolSetup, assertions: Vec<Assertion>| Scenario {
        name: name.into(),
        description: description.into(),
        seed,
        trials,
        setup: Setup::Protocol(setup),
        assertions,
    };
    let at = |metric: &str, op: Comparison, value: f64| Assertion {
        metric: metric.into(),
        op,
        value,
    };
    let mut forged = ProtocolSetup::new(Strategy::ForgedOutput { small_dim: 8, seed: 99 });
    forged.workload.max_tokens = 32;
    let mut captured = ProtocolSetup::new(Strategy::Collusion { colluders: 5, offset: 0.5 });
    captured.committee.group_size = 20;
    vec![
        proto(
            "honest",
            "Every participant follows the protocol.",
            ProtocolSetup::new(Strategy::Honest),
            vec![at("inferencer_accept_rate", Comparison::Ge, 0.999), at("payoff_honest_verifier", Comparison::Gt, 0.0)],
        ),
        proto(
            "lazy",
            "One verifier per committee commits to its input state instead of recomputing.",
            ProtocolSetup::new(Strategy::Lazy { count: 1 }),
            vec![at("lazy_opening_success_rate", Comparison::Eq, 0.0), at("payoff_lazy_verifier", Comparison::Lt, 0.0)],
        ),
        proto(
            "quantize",
            "The inferencer runs every segment at 8-bit precision.",
            ProtocolSetup::new(Strategy::Quantize { bits: 8 }),
            vec![at("detection_rate", Comparison::Ge, 0.99)],
        ),
        proto(
            "early-stop",
            "The inferencer stops after 4 tokens and claims EOS.",
            ProtocolSetup::new(Strategy::EarlyStop { at: 4 }),
            vec![at("detection_rate", Comparison::Eq, 1.0)],
        ),
        proto("forged", "The inferencer replaces the model with an 8-wide stand-in over 32 tokens.", forged, vec![at("detection_rate", Comparison::Ge, 0.99)]),
        proto(
            "collusion-2of6",
            "Two verifiers per committee vote False on a shared fabricated state.",
            ProtocolSetup::new(Strategy::Collusion { colluders: 2, offset: 0.5 }),
            vec![at("inferencer_accept_rate", Comparison::Eq, 1.0), at("payoff_colluding_verifier", Comparison::Lt, 0.0)],
        ),
        proto(
            "captured-committee",
            "Five of six verifiers collude; the inferencer disputes with a 12-member committee.",
            captured,
            vec![
                at("dispute_overturn_rate", Comparison::Eq, 1.0),
                at("payoff_colluding_verifier", Comparison::Lt, 0.0),
                at("payoff_honest_verifier", Comparison::Ge, 0.0),
            ],
        ),
    ]
}

/// The committee game at the baseline parameters, asserting both bounds and
/// their Monte Carlo estimates.
pub fn committee_game_scenario(name: &str, trials: u64, seed: u64) -> Scenario {
    let at = |metric: &str, op: Comparison, value: f64| Assertion {
        metric: metric.into(),
        op,
        value,
    };
    Scenario {
        name: name.into(),
        description: "Committee game at n=6, q=4, eps1=eps2=0.01, r=0.8".into(),
        seed,
        trials,
        setup: Setup::CommitteeGame(GameSetup {
            params: GameParams::baseline(),
            policy: AdversaryPolicy::RandomGuess,
        }),
        assertions: vec![
            at("honest_bound", Comparison::Gt, 0.926),
            at("dishonest_bound", Comparison::Lt, 0.125),
            at("honest_accept_rate", Comparison::Ge, 0.916),
            at("dishonest_accept_rate", Comparison::Le, 0.135),
        ],
    }
}

// ---------------------------------------------------------------------------
// Pipeline-level attack detection

/// Probes measured directly against the comparator and tail-token check,
/// without the on-chain rounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Probe {
    Quantize { bits: u32 },
    EarlyStop { at: usize },
    ForgedOutput { small_dim: usize, seed: u64 },
    /// A verifier that reveals its input state instead of recomputing.
    Lazy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub model: ModelConfig,
    pub prompt_len: usize,
    pub max_tokens: usize,
    pub rel_scale: f64,
    pub sample_size: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            model: ModelConfig::default(),
            prompt_len: 8,
            max_tokens: 12,
            rel_scale: NoiseModel::DEFAULT_REL_SCALE,
            sample_size: 16,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub probe: Probe,
    pub trials: u64,
    /// Trials where the attack changed anything.
    pub applicable: u64,
    /// Detections among applicable trials; for [`Probe::Lazy`], successful
    /// openings among attempts.
    pub events: u64,
    pub attempts: u64,
    pub rate: Rate,
}

fn probe_task(seed: u64, trial: u64) -> Digest {
    tagged_hash(tag::TASK, &[b"probe", &seed.to_le_bytes(), &trial.to_le_bytes()])
}

struct ProbeOutcome {
    applicable: bool,
    events: u64,
    attempts: u64,
}

fn probe_trial(model: &Model, probe: Probe, cfg: &ProbeConfig, seed: u64, trial: u64) -> Result<ProbeOutcome, ExperimentError> {
    let mc = model.config();
    let l = mc.segments as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x9b0be, trial]));
    let prompt: Vec<u32> = (0..cfg.prompt_len).map(|_| rng.gen_range(1..mc.vocab)).collect();
    let task = probe_task(seed, trial);
    let noise = |who: u64| -> NoiseModel {
        NoiseModel {
            rel_scale: cfg.rel_scale,
            exponent_flip_prob: 0.0,
            seed: derive_seed(seed, &[trial, who]),
        }
    };
    let inferencer_noise: Vec<NoiseModel> = (0..l as u64).map(noise).collect();
    let attack = match probe {
        Probe::Quantize { bits } => Attack::Quantize { bits },
        Probe::EarlyStop { at } => Attack::EarlyStop { at },
        Probe::ForgedOutput { small_dim, seed } => Attack::ForgedOutput { small_dim, seed },
        Probe::Lazy => Attack::Identity,
    };
    let mut meter = CostMeter::new(l);
    let gen = pipeline::apply_attack(attack, model, &inferencer_noise, task, &prompt, cfg.max_tokens, &mut meter)?;
    let applicable = match probe {
        Probe::EarlyStop { .. } => gen.stop_overridden,
        _ => true,
    };
    let prefill = gen.prefill_tokens();
    let final_rows = gen.outputs.last().map_or(0, |s| s[0].token_count());
    let mut detected = false;
    let mut successes = 0;
    let mut attempts = 0;
    for stage in 1..=l {
        let input_state = (stage > 1).then(|| gen.stage_outputs(stage - 1));
        let claimed = gen.stage_outputs(stage);
        if probe == Probe::Lazy {
            let guess = match &input_state {
                None => model.embed(&prefill[prefill.len() - final_rows..])?,
                Some(s) => tail_rows(s, final_rows).values().to_vec(),
            };
            let truth = tail_rows(&claimed, final_rows);
            let indices = scheduler::sampled_leaves(&rng.gen(), final_rows, mc.hidden_dim, cfg.sample_size)?;
            let want: Vec<f32> = indices.iter().map(|&i| truth.values()[i as usize]).collect();
            let got: Vec<f32> = indices.iter().map(|&i| guess[i as usize]).collect();
            let pass = bitstats::compare_values(&want, &got, &Tolerances::ON_CHAIN).map(|s| bitstats::accept(&s, &Tolerances::ON_CHAIN)).unwrap_or(false);
            attempts += 1;
            successes += pass as u64;
            continue;
        }
        let input = match &input_state {
            None => PrefillInput::Tokens(&prefill),
            Some(s) => PrefillInput::States(s),
        };
        let out = pipeline::verify_prefill(model, stage, input, task, noise(1000 + stage as u64), &mut meter)?;
        let stats = bitstats::compare_traces(std::slice::from_ref(&claimed), std::slice::from_ref(&out), &Tolerances::OFF_CHAIN)?;
        if !bitstats::accept(&stats, &Tolerances::OFF_CHAIN) {
            detected = true;
        }
        if stage == l && model.decode_rows(&out, prompt.len() - 1) != gen.tokens {
            detected = true;
        }
    }
    Ok(match probe {
        Probe::Lazy => ProbeOutcome {
            applicable,
            events: successes,
            attempts,
        },
        _ => ProbeOutcome {
            applicable,
            events: (applicable && detected) as u64,
            attempts: applicable as u64,
        },
    })
}

/// Detection rate of `probe` over `trials` fresh prompts.
pub fn attack_detection(probe: Probe, cfg: &ProbeConfig, trials: u64, seed: u64) -> Result<ProbeReport, ExperimentError> {
    let model = Model::new(cfg.model, ArithmeticMode::FullPrecision)?;
    let outcomes: Result<Vec<ProbeOutcome>, ExperimentError> = (0..trials).into_par_iter().map(|t| probe_trial(&model, probe, cfg, seed, t)).collect();
    let outcomes = outcomes?;
    let applicable = outcomes.iter().filter(|o| o.applicable).count() as u64;
    let events = outcomes.iter().map(|o| o.events).sum();
    let attempts = outcomes.iter().map(|o| o.attempts).sum();
    Ok(ProbeReport {
        probe,
        trials,
        applicable,
        events,
        attempts,
        rate: Rate::new(events, attempts),
    })
}

// ---------------------------------------------------------------------------
// Noise calibration and cost accounting

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub default_rel_scale: f64,
    pub default_pass_rate: f64,
    /// Largest scale on the search grid whose pass rate met the target.
    pub max_rel_scale: f64,
    pub target: f64,
    pub trials: u64,
}

fn honest_pair_pass_rate(model: &Model, rel_scale: f64, seq_len: usize, trials: u64, seed: u64) -> Result<f64, ExperimentError> {
    let mc = *model.config();
    let l = mc.segments as usize;
    let passes: Result<Vec<bool>, ExperimentError> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xca1, t]));
            let tokens: Vec<u32> = (0..seq_len).map(|_| rng.gen_range(1..mc.vocab)).collect();
            let task = probe_task(seed, t);
            let noise = |who: u64, s: u64| NoiseModel {
                rel_scale,
                exponent_flip_prob: 0.0,
                seed: derive_seed(seed, &[t, who, s]),
            };
            let inferencer: Vec<NoiseModel> = (0..l as u64).map(|s| noise(1, s)).collect();
            let claimed = pipeline::full_prefill(model, &tokens, task, &inferencer, &mut CostMeter::new(l))?;
            // Each stage is recomputed from the inferencer's relayed input.
            for stage in 1..=l {
                let input = if stage == 1 { PrefillInput::Tokens(&tokens) } else { PrefillInput::States(&claimed[stage - 2]) };
                let out = pipeline::verify_prefill(model, stage, input, task, noise(2, stage as u64), &mut CostMeter::new(l))?;
                let stats = bitstats::compare_traces(&claimed[stage - 1..stage], std::slice::from_ref(&out), &Tolerances::OFF_CHAIN)?;
                if !bitstats::accept(&stats, &Tolerances::OFF_CHAIN) {
                    return Ok(false);
                }
            }
            Ok(true)
        })
        .collect();
    let passes = passes?;
    Ok(passes.iter().filter(|&&p| p).count() as f64 / trials as f64)
}

/// Pass rate of honest per-stage recomputation against an honest inferencer
/// at the default noise scale, and the largest scale on a log grid (1e-8 to
/// 1e-1, bisected) that still meets `target`.
pub fn calibrate_noise(model_cfg: ModelConfig, trials: u64, seed: u64, target: f64) -> Result<Calibration, ExperimentError> {
    let model = Model::new(model_cfg, ArithmeticMode::FullPrecision)?;
    let seq_len = 16;
    let default_pass_rate = honest_pair_pass_rate(&model, NoiseModel::DEFAULT_REL_SCALE, seq_len, trials, seed)?;
    let (mut lo, mut hi) = (-8.0f64, -1.0f64);
    if honest_pair_pass_rate(&model, 10f64.powf(lo), seq_len, trials, seed)? < target {
        hi = lo;
    }
    for _ in 0..12 {
        if hi <= lo {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if honest_pair_pass_rate(&model, 10f64.powf(mid), seq_len, trials, seed)? >= target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(Calibration {
        default_rel_scale: NoiseModel::DEFAULT_REL_SCALE,
        default_pass_rate,
        max_rel_scale: 10f64.powf(lo),
        target,
        trials,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub segments: u32,
    pub seq_len: usize,
    pub full_prefill_ops: u64,
    pub verify_ops_per_verifier: u64,
    pub ratio: f64,
    pub expected: f64,
    pub relative_error: f64,
    /// Verifier prefill ops over the whole generation's inference ops.
    pub verify_to_inference: f64,
}

/// Op counts for a verifier's single-segment prefill against a full-model
/// prefill, for each segment count.
pub fn cost_ratios(segment_counts: &[u32], prompt_len: usize, max_tokens: usize, seed: u64) -> Result<Vec<CostRow>, ExperimentError> {
    let mut rows = Vec::new();
    for &segments in segment_counts {
        let cfg = ModelConfig {
            segments,
            ..ModelConfig::default()
        };
        let model = Model::new(cfg, ArithmeticMode::FullPrecision)?;
        let l = segments as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[segments as u64]));
        let prompt: Vec<u32> = (0..prompt_len).map(|_| rng.gen_range(1..cfg.vocab)).collect();
        let task = probe_task(seed, segments as u64);
        let silent = vec![NoiseModel::none(); l];
        let mut gen_meter = CostMeter::new(l);
        let gen = pipeline::generate(&model, &silent, task, &prompt, pipeline::GenerateOptions::new(max_tokens), &mut gen_meter)?;
        let seq = gen.prefill_tokens();
        let mut full = CostMeter::new(l);
        pipeline::full_prefill(&model, &seq, task, &silent, &mut full)?;
        let full_ops = full.total(Phase::Prefill);
        let mut per_stage = Vec::with_capacity(l);
        for stage in 1..=l {
            let mut meter = CostMeter::new(l);
            let input_state = (stage > 1).then(|| gen.stage_outputs(stage - 1));
            let input = match &input_state {
                None => PrefillInput::Tokens(&seq),
                Some(s) => PrefillInput::States(s),
            };
            pipeline::verify_prefill(&model, stage, input, task, NoiseModel::none(), &mut meter)?;
            per_stage.push(meter.total(Phase::VerifyPrefill));
        }
        let verify = per_stage.iter().max().copied().unwrap_or(0);
        let ratio = verify as f64 / full_ops as f64;
        let expected = 1.0 / segments as f64;
        let inference = gen_meter.total(Phase::Prefill) + gen_meter.total(Phase::Decode);
        rows.push(CostRow {
            segments,
            seq_len: seq.len(),
            full_prefill_ops: full_ops,
            verify_ops_per_verifier: verify,
            ratio,
            expected,
            relative_error: (ratio - expected).abs() / expected,
            verify_to_inference: verify as f64 / inference as f64,
        });
    }
    Ok(rows)
}

pub fn cost_csv(rows: &[CostRow]) -> String {
    let mut out = String::from("segments,seq_len,full_prefill_ops,verify_ops_per_verifier,ratio,expected,relative_error,verify_to_inference\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{:.6},{:.6},{:.6},{:.6}",
            r.segments, r.seq_len, r.full_prefill_ops, r.verify_ops_per_verifier, r.ratio, r.expected, r.relative_error, r.verify_to_inference
        );
    }
    out
}

// ---------------------------------------------------------------------------
// Comparator fixtures

/// Writes `honest-a.trace`, `honest-b.trace` (two honest runs with
/// independent noise) and `quantized.trace` (an 8-bit run) of one stage's
/// prefill outputs.
pub fn write_compare_fixtures(dir: &Path, seed: u64) -> Result<Vec<PathBuf>, ExperimentError> {
    let cfg = ModelConfig::default();
    let l = cfg.segments as usize;
    let honest = Model::new(cfg, ArithmeticMode::FullPrecision)?;
    let quant = Model::new(cfg, ArithmeticMode::Quantized { bits: 8 })?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xf1c]));
    let tokens: Vec<u32> = (0..24).map(|_| rng.gen_range(1..cfg.vocab)).collect();
    let task = probe_task(seed, 0);
    let noise = |who: u64| -> Vec<NoiseModel> { (0..l as u64).map(|s| NoiseModel::honest(derive_seed(seed, &[who, s]))).collect() };
    let run = |model: &Model, who: u64| -> Result<Vec<HiddenState>, ExperimentError> {
        Ok(pipeline::full_prefill(model, &tokens, task, &noise(who), &mut CostMeter::new(l))?)
    };
    fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    for (name, states) in [("honest-a.trace", run(&honest, 1)?), ("honest-b.trace", run(&honest, 2)?), ("quantized.trace", run(&quant, 3)?)] {
        let p = dir.join(name);
        commitments::write_trace_file(&p, &states)?;
        paths.push(p);
    }
    Ok(paths)
}
