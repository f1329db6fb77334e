//! On-chain verification state machine.
//!
//! A round covers one `(task, stage)` pair: the committee posts hidden-state
//! roots together with hiding verdict commitments, the scheduler publishes a
//! VRF-sampled audit package once those are fixed, verifiers reveal verdicts
//! with Merkle openings, and adjudication applies the three decision rules.
//! Rejected inferencers may escalate to a larger committee; ambiguous rounds
//! may be flipped by an oracle attestation.
//!
//! Every call goes through [`Contract::execute`], which optionally appends a
//! [`LogEntry`] carrying the call, its result and the resulting state root.
//! [`replay`] re-executes such a log from its genesis line.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bitstats::{self, Tolerances};
use crate::clustering;
use crate::commitments::{self, commit_verdict, open_verdict, InclusionProof, MerkleTree, VerdictCommitment};
use crate::digest::{hex32, tag, tagged_hash, Digest};
use crate::identity::{self, Account, IdentityError, NodeId, PublicKey, Registry, Signature, SigningKey};
use crate::randomness::{self, VrfOutput};
use crate::scheduler::{self, relay_message, Delivery, RelayRecord, SamplingPackage, StageRoles};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ContractError {
    #[error("round {0} does not exist")]
    UnknownRound(u64),
    #[error("round {round} is in phase {phase:?}")]
    WrongPhase { round: u64, phase: RoundPhase },
    #[error("node {0} is not on the committee")]
    NotInCommittee(NodeId),
    #[error("node {0} already committed")]
    DoubleCommit(NodeId),
    #[error("node {0} already revealed")]
    AlreadyRevealed(NodeId),
    #[error("commit phase still open")]
    CommitPhaseOpen,
    #[error("reveal phase still open")]
    RevealOpen,
    #[error("VRF check failed: {0}")]
    VrfInvalid(String),
    #[error("signature check failed: {0}")]
    SignatureInvalid(String),
    #[error("Merkle check failed at sample position {position}")]
    MerkleInvalid { position: usize },
    #[error("verdict commitment does not open")]
    CommitMismatch,
    #[error("tail-stage reveal must carry decoded tokens")]
    MissingTailToken,
    #[error("round {0} did not reject the inferencer")]
    NotRejected(u64),
    #[error("reconsideration needs more than {current} verifiers, got {requested}")]
    CommitteeTooSmall { requested: usize, current: usize },
    #[error("only {available} eligible nodes for a committee of {requested}")]
    InsufficientGroup { requested: usize, available: usize },
    #[error("escrow of {needed} exceeds free balance {available}")]
    InsufficientEscrow { needed: u64, available: u64 },
    #[error("invalid evidence: {0}")]
    EvidenceInvalid(String),
    #[error("role assignment rejected: {0}")]
    AssignmentInvalid(String),
    #[error("oracle attestation rejected: {0}")]
    ProofRejected(String),
    #[error(transparent)]
    Funds(#[from] IdentityError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoundPhase {
    Commit,
    Sampled,
    Reveal,
    Adjudicated,
    Disputed,
    Final,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Economics {
    /// Paid to an accepted inferencer per stage round.
    pub inference_reward: u64,
    /// Total verification reward for a committee of `committee_size`.
    pub verification_reward: u64,
    pub verifier_slash: u64,
    pub inferencer_slash: u64,
    pub scheduler_slash: u64,
    /// Share of a scheduler slash paid to the complainant.
    pub complaint_reward: u64,
}

impl Economics {
    /// Defaults for a committee of six with unit verification cost 1000.
    pub fn for_committee(m: usize, cost: u64) -> Self {
        let verification_reward = 3 * m as u64 * cost / 2;
        Economics {
            inference_reward: 8 * cost,
            verification_reward,
            verifier_slash: 2 * verification_reward / m as u64,
            inferencer_slash: 16 * cost,
            scheduler_slash: 20 * cost,
            complaint_reward: 10 * cost,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContractConfig {
    pub model: String,
    pub committee_size: usize,
    pub tau: f64,
    pub delta_onchain: f64,
    pub hidden_dim: usize,
    pub sample_size: usize,
    pub commit_window: u64,
    pub reveal_window: u64,
    pub dispute_window: u64,
    pub economics: Economics,
    #[serde(with = "hex32")]
    pub scheduler_vrf: [u8; 32],
    pub oracle_key: PublicKey,
}

impl ContractConfig {
    /// Minimum cluster size `ceil(τ · m)`.
    pub fn quorum(&self, m: usize) -> usize {
        let x = self.tau * m as f64;
        // Guard 0.7 * 10 = 7.000000000000001 style overshoot.
        let r = x.round();
        if (x - r).abs() < 1e-9 {
            r as usize
        } else {
            x.ceil() as usize
        }
    }

    pub fn fee_per_verifier(&self) -> u64 {
        self.economics.verification_reward / self.committee_size as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    AcceptInferencer,
    RejectInferencer,
    Ambiguous,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlashReason {
    NoReveal,
    OnChainMismatch,
    NonConvergent,
    InferencerRejected,
    OverturnedOnReconsideration,
    OracleProvedFaulty,
    RelayEquivocation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slash {
    pub account: Account,
    pub amount: u64,
    pub reason: SlashReason,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Outcome {
    pub verdict: Verdict,
    pub true_votes: usize,
    pub committee: usize,
    /// Cluster that decided a rejection.
    pub cluster: Vec<NodeId>,
    pub rewards: Vec<(Account, u64)>,
    pub slashes: Vec<Slash>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommitEntry {
    #[serde(with = "hex32")]
    pub state_root: Digest,
    pub leaf_count: u32,
    pub verdict: VerdictCommitment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RevealEntry {
    pub verdict: bool,
    pub values: Vec<f32>,
    pub tail_tokens: Option<Vec<u32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationRound {
    pub id: u64,
    #[serde(with = "hex32")]
    pub task: Digest,
    pub stage: u32,
    pub tail: bool,
    pub inferencer: NodeId,
    pub group: Vec<NodeId>,
    pub committee: Vec<NodeId>,
    pub final_step: u32,
    pub reported_tokens: Vec<u32>,
    pub phase: RoundPhase,
    pub commit_deadline: u64,
    pub reveal_deadline: Option<u64>,
    pub final_at: Option<u64>,
    pub commitments: BTreeMap<NodeId, CommitEntry>,
    pub package: Option<SamplingPackage>,
    pub reveals: BTreeMap<NodeId, RevealEntry>,
    pub outcome: Option<Outcome>,
    pub parent: Option<u64>,
    pub child: Option<u64>,
    pub escrow: u64,
    pub inferencer_penalty: u64,
}

impl VerificationRound {
    /// Posted roots in committee order.
    pub fn posted_roots(&self) -> Vec<Digest> {
        self.committee
            .iter()
            .filter_map(|v| self.commitments.get(v).map(|c| c.state_root))
            .collect()
    }

    fn reveal_complete(&self) -> bool {
        self.commitments.keys().all(|v| self.reveals.contains_key(v))
    }
}

/// Oracle statement about the ground truth of one round.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleAttestation {
    pub round: u64,
    #[serde(with = "hex32")]
    pub task: Digest,
    pub stage: u32,
    pub inferencer_honest: bool,
    pub signature: Signature,
}

pub fn attestation_message(round: u64, task: &Digest, stage: u32, honest: bool) -> Vec<u8> {
    let mut m = b"oracle".to_vec();
    m.extend_from_slice(&round.to_le_bytes());
    m.extend_from_slice(task);
    m.extend_from_slice(&stage.to_le_bytes());
    m.push(honest as u8);
    m
}

/// The zero-knowledge escalation stand-in: a trusted key that attests to the
/// ground truth the simulator knows.
#[derive(Debug, Clone)]
pub struct ZkOracle {
    key: SigningKey,
}

impl ZkOracle {
    pub fn new(seed: u64) -> Self {
        ZkOracle {
            key: SigningKey::from_seed(seed ^ 0x000a_11ce),
        }
    }

    pub fn public_key(&self) -> PublicKey {
        self.key.public()
    }

    pub fn attest(&self, round: &VerificationRound, inferencer_honest: bool) -> OracleAttestation {
        let msg = attestation_message(round.id, &round.task, round.stage, inferencer_honest);
        OracleAttestation {
            round: round.id,
            task: round.task,
            stage: round.stage,
            inferencer_honest,
            signature: identity::sign(&self.key, Account::Client, &msg),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "call", rename_all = "snake_case")]
pub enum Call {
    Deposit {
        account: Account,
        amount: u64,
    },
    OpenRound {
        #[serde(with = "hex32")]
        task: Digest,
        roles: StageRoles,
        tail: bool,
        final_step: u32,
        reported_tokens: Vec<u32>,
    },
    SubmitCommitment {
        round: u64,
        verifier: NodeId,
        #[serde(with = "hex32")]
        state_root: Digest,
        leaf_count: u32,
        verdict: VerdictCommitment,
    },
    AdvanceRound,
    PostSamplingPackage {
        round: u64,
        package: SamplingPackage,
    },
    Reveal {
        round: u64,
        verifier: NodeId,
        verdict: bool,
        #[serde(with = "crate::digest::hex_vec")]
        salt: Vec<u8>,
        openings: Vec<InclusionProof>,
        tail_tokens: Option<Vec<u32>>,
    },
    Adjudicate {
        round: u64,
    },
    OracleDispute {
        round: u64,
        prover: NodeId,
        attestation: OracleAttestation,
    },
    Dispute {
        round: u64,
        committee_size: usize,
        vrf: VrfOutput,
    },
    RelayComplaint {
        complainant: Account,
        record: RelayRecord,
        delivery: Delivery,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CallOutput {
    Done,
    RoundOpened { round: u64 },
    Outcome(Outcome),
    ComplaintUpheld { slashed: u64, reward: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CallResult {
    Ok(CallOutput),
    Err(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub index: u64,
    pub call: Call,
    pub result: CallResult,
    #[serde(with = "hex32")]
    pub state_root: Digest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Genesis {
    pub config: ContractConfig,
    pub registry: Registry,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Contract {
    config: ContractConfig,
    registry: Registry,
    rounds: Vec<VerificationRound>,
    complaints: BTreeSet<(String, u32, u32)>,
    #[serde(skip)]
    log: Option<Vec<LogEntry>>,
    #[serde(skip)]
    genesis: Option<Genesis>,
}

impl Contract {
    pub fn new(config: ContractConfig, registry: Registry) -> Self {
        Contract {
            config,
            registry,
            rounds: Vec::new(),
            complaints: BTreeSet::new(),
            log: None,
            genesis: None,
        }
    }

    /// Like [`Contract::new`] but records every call for later replay.
    pub fn with_log(config: ContractConfig, registry: Registry) -> Self {
        let genesis = Genesis {
            config: config.clone(),
            registry: registry.clone(),
        };
        let mut c = Contract::new(config, registry);
        c.log = Some(Vec::new());
        c.genesis = Some(genesis);
        c
    }

    pub fn config(&self) -> &ContractConfig {
        &self.config
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn round(&self, id: u64) -> Result<&VerificationRound, ContractError> {
        self.rounds.get(id as usize).ok_or(ContractError::UnknownRound(id))
    }

    pub fn rounds(&self) -> &[VerificationRound] {
        &self.rounds
    }

    pub fn clock(&self) -> u64 {
        self.registry.round()
    }

    pub fn log(&self) -> Option<&[LogEntry]> {
        self.log.as_deref()
    }

    /// Digest of the canonical JSON encoding of the whole contract state.
    pub fn state_root(&self) -> Digest {
        let bytes = serde_json::to_vec(self).expect("contract state serializes");
        tagged_hash(tag::STATE, &[&bytes])
    }

    /// Genesis line followed by one line per call.
    pub fn log_jsonl(&self) -> Option<String> {
        let genesis = self.genesis.as_ref()?;
        let mut out = serde_json::to_string(genesis).expect("genesis serializes");
        out.push('\n');
        for e in self.log.as_ref()? {
            out.push_str(&serde_json::to_string(e).expect("log entry serializes"));
            out.push('\n');
        }
        Some(out)
    }

    pub fn execute(&mut self, call: Call) -> Result<CallOutput, ContractError> {
        let result = self.dispatch(&call);
        if let Some(log) = self.log.as_mut() {
            let index = log.len() as u64;
            let entry_result = match &result {
                Ok(o) => CallResult::Ok(o.clone()),
                Err(e) => CallResult::Err(e.to_string()),
            };
            let state_root = {
                let bytes = serde_json::to_vec(&*self).expect("contract state serializes");
                tagged_hash(tag::STATE, &[&bytes])
            };
            self.log.as_mut().expect("log enabled").push(LogEntry {
                index,
                call,
                result: entry_result,
                state_root,
            });
        }
        result
    }

    fn dispatch(&mut self, call: &Call) -> Result<CallOutput, ContractError> {
        match call {
            Call::Deposit { account, amount } => {
                self.registry.deposit(*account, *amount);
                Ok(CallOutput::Done)
            }
            Call::OpenRound {
                task,
                roles,
                tail,
                final_step,
                reported_tokens,
            } => self.do_open_round(*task, roles, *tail, *final_step, reported_tokens),
            Call::SubmitCommitment {
                round,
                verifier,
                state_root,
                leaf_count,
                verdict,
            } => self.do_commit(*round, *verifier, *state_root, *leaf_count, *verdict),
            Call::AdvanceRound => {
                self.do_advance();
                Ok(CallOutput::Done)
            }
            Call::PostSamplingPackage { round, package } => self.do_post_package(*round, package),
            Call::Reveal {
                round,
                verifier,
                verdict,
                salt,
                openings,
                tail_tokens,
            } => self.do_reveal(*round, *verifier, *verdict, salt, openings, tail_tokens.clone()),
            Call::Adjudicate { round } => self.do_adjudicate(*round).map(CallOutput::Outcome),
            Call::OracleDispute {
                round,
                prover,
                attestation,
            } => self.do_oracle_dispute(*round, *prover, attestation).map(CallOutput::Outcome),
            Call::Dispute {
                round,
                committee_size,
                vrf,
            } => self.do_dispute(*round, *committee_size, vrf),
            Call::RelayComplaint {
                complainant,
                record,
                delivery,
            } => self.do_complaint(*complainant, record, delivery),
        }
    }

    fn round_mut(&mut self, id: u64) -> Result<&mut VerificationRound, ContractError> {
        self.rounds.get_mut(id as usize).ok_or(ContractError::UnknownRound(id))
    }

    fn expect_phase(r: &VerificationRound, phase: RoundPhase) -> Result<(), ContractError> {
        if r.phase != phase {
            return Err(ContractError::WrongPhase { round: r.id, phase: r.phase });
        }
        Ok(())
    }

    pub fn deposit(&mut self, account: Account, amount: u64) {
        let _ = self.execute(Call::Deposit { account, amount });
    }

    pub fn open_round(&mut self, task: Digest, roles: &StageRoles, tail: bool, final_step: u32, reported_tokens: &[u32]) -> Result<u64, ContractError> {
        match self.execute(Call::OpenRound {
            task,
            roles: roles.clone(),
            tail,
            final_step,
            reported_tokens: reported_tokens.to_vec(),
        })? {
            CallOutput::RoundOpened { round } => Ok(round),
            other => unreachable!("open_round returned {other:?}"),
        }
    }

    fn do_open_round(&mut self, task: Digest, roles: &StageRoles, tail: bool, final_step: u32, reported_tokens: &[u32]) -> Result<CallOutput, ContractError> {
        let snapshot = self
            .registry
            .group_snapshot(&self.config.model)
            .map_err(|e| ContractError::AssignmentInvalid(e.to_string()))?;
        let group = snapshot
            .group(roles.stage)
            .ok_or_else(|| ContractError::AssignmentInvalid(format!("no group for stage {}", roles.stage)))?;
        let transcript = randomness::role_transcript(&task, roles.stage, group.members.len() as u32);
        if !randomness::vrf_verify(&self.config.scheduler_vrf, &transcript, &roles.vrf) {
            return Err(ContractError::VrfInvalid(format!("role assignment for stage {}", roles.stage)));
        }
        if roles.verifiers.len() != self.config.committee_size
            || group.members.len() < self.config.committee_size + 1
            || scheduler::roles_from(roles.stage, &group.members, roles.vrf.clone(), self.config.committee_size) != *roles
        {
            return Err(ContractError::AssignmentInvalid(format!("stage {} roles do not follow the VRF", roles.stage)));
        }
        if tail && reported_tokens.len() != final_step as usize {
            return Err(ContractError::AssignmentInvalid("reported tokens do not match the final step".into()));
        }
        let id = self.rounds.len() as u64;
        self.rounds.push(VerificationRound {
            id,
            task,
            stage: roles.stage,
            tail,
            inferencer: roles.inferencer,
            group: group.members.clone(),
            committee: roles.verifiers.clone(),
            final_step,
            reported_tokens: reported_tokens.to_vec(),
            phase: RoundPhase::Commit,
            commit_deadline: self.clock() + self.config.commit_window,
            reveal_deadline: None,
            final_at: None,
            commitments: BTreeMap::new(),
            package: None,
            reveals: BTreeMap::new(),
            outcome: None,
            parent: None,
            child: None,
            escrow: 0,
            inferencer_penalty: 0,
        });
        Ok(CallOutput::RoundOpened { round: id })
    }

    pub fn submit_commitment(&mut self, round: u64, verifier: NodeId, state_root: Digest, leaf_count: u32, verdict: VerdictCommitment) -> Result<(), ContractError> {
        self.execute(Call::SubmitCommitment {
            round,
            verifier,
            state_root,
            leaf_count,
            verdict,
        })
        .map(|_| ())
    }

    fn do_commit(&mut self, round: u64, verifier: NodeId, state_root: Digest, leaf_count: u32, verdict: VerdictCommitment) -> Result<CallOutput, ContractError> {
        let r = self.round_mut(round)?;
        Self::expect_phase(r, RoundPhase::Commit)?;
        if !r.committee.contains(&verifier) {
            return Err(ContractError::NotInCommittee(verifier));
        }
        if r.commitments.contains_key(&verifier) {
            return Err(ContractError::DoubleCommit(verifier));
        }
        r.commitments.insert(
            verifier,
            CommitEntry {
                state_root,
                leaf_count,
                verdict,
            },
        );
        if r.commitments.len() == r.committee.len() {
            r.phase = RoundPhase::Sampled;
        }
        Ok(CallOutput::Done)
    }

    pub fn advance_round(&mut self) {
        let _ = self.execute(Call::AdvanceRound);
    }

    fn do_advance(&mut self) {
        self.registry.advance_round();
        let now = self.clock();
        for r in &mut self.rounds {
            match r.phase {
                RoundPhase::Commit if now >= r.commit_deadline => r.phase = RoundPhase::Sampled,
                RoundPhase::Adjudicated if r.final_at.is_some_and(|t| now >= t) => r.phase = RoundPhase::Final,
                _ => {}
            }
        }
    }

    pub fn post_sampling_package(&mut self, round: u64, package: &SamplingPackage) -> Result<(), ContractError> {
        self.execute(Call::PostSamplingPackage {
            round,
            package: package.clone(),
        })
        .map(|_| ())
    }

    /// VRF, origin and Merkle checks on a sampling package, without state
    /// changes.
    pub fn check_sampling_package(&self, round: u64, p: &SamplingPackage) -> Result<(), ContractError> {
        let r = self.round(round)?;
        match r.phase {
            RoundPhase::Commit => return Err(ContractError::CommitPhaseOpen),
            RoundPhase::Sampled => {}
            phase => return Err(ContractError::WrongPhase { round, phase }),
        }
        if p.task != r.task || p.stage != r.stage || p.final_step != r.final_step {
            return Err(ContractError::VrfInvalid("package is for a different task, stage or step".into()));
        }
        let transcript = randomness::sampling_transcript(&r.task, r.stage, r.final_step, &r.posted_roots());
        if !randomness::vrf_verify(&self.config.scheduler_vrf, &transcript, &p.vrf) {
            return Err(ContractError::VrfInvalid("proof does not match the posted roots".into()));
        }
        let d = self.config.hidden_dim;
        if p.leaf_count == 0 || !(p.leaf_count as usize).is_multiple_of(d) {
            return Err(ContractError::VrfInvalid(format!("leaf count {} is not whole rows of {d}", p.leaf_count)));
        }
        let expected = scheduler::sampled_leaves(&p.vrf.randomness, p.leaf_count as usize / d, d, self.config.sample_size)
            .map_err(|e| ContractError::VrfInvalid(e.to_string()))?;
        if expected != p.indices {
            return Err(ContractError::VrfInvalid("indices not derived from the VRF output".into()));
        }
        if p.inferencer != r.inferencer {
            return Err(ContractError::SignatureInvalid(format!("{} is not the selected inferencer", p.inferencer)));
        }
        let key = self.registry.node(r.inferencer)?.public_key;
        let msg = relay_message(&r.task, r.stage, r.final_step, &p.inferencer_root);
        if !identity::verify(&key, &msg, &p.inferencer_sig) {
            return Err(ContractError::SignatureInvalid("inferencer signature on the root".into()));
        }
        if p.values.len() != p.indices.len() || p.proofs.len() != p.indices.len() {
            return Err(ContractError::MerkleInvalid { position: p.values.len().min(p.proofs.len()) });
        }
        let commitment = commitments::MerkleCommitment {
            root: p.inferencer_root,
            leaf_count: p.leaf_count,
        };
        for (position, ((idx, v), proof)) in p.indices.iter().zip(&p.values).zip(&p.proofs).enumerate() {
            if proof.leaf_index != *idx as usize || proof.leaf_value.to_bits() != v.to_bits() || !commitment.verify(proof) {
                return Err(ContractError::MerkleInvalid { position });
            }
        }
        Ok(())
    }

    fn do_post_package(&mut self, round: u64, package: &SamplingPackage) -> Result<CallOutput, ContractError> {
        self.check_sampling_package(round, package)?;
        let now = self.clock();
        let window = self.config.reveal_window;
        let r = self.round_mut(round)?;
        r.package = Some(package.clone());
        r.reveal_deadline = Some(now + window);
        r.phase = RoundPhase::Reveal;
        Ok(CallOutput::Done)
    }

    pub fn reveal(&mut self, round: u64, verifier: NodeId, verdict: bool, salt: &[u8], openings: &[InclusionProof], tail_tokens: Option<&[u32]>) -> Result<(), ContractError> {
        self.execute(Call::Reveal {
            round,
            verifier,
            verdict,
            salt: salt.to_vec(),
            openings: openings.to_vec(),
            tail_tokens: tail_tokens.map(<[u32]>::to_vec),
        })
        .map(|_| ())
    }

    fn do_reveal(&mut self, round: u64, verifier: NodeId, verdict: bool, salt: &[u8], openings: &[InclusionProof], tail_tokens: Option<Vec<u32>>) -> Result<CallOutput, ContractError> {
        let now = self.clock();
        let r = self.round_mut(round)?;
        Self::expect_phase(r, RoundPhase::Reveal)?;
        if r.reveal_deadline.is_some_and(|d| now > d) {
            return Err(ContractError::WrongPhase { round, phase: r.phase });
        }
        let entry = r.commitments.get(&verifier).ok_or(ContractError::NotInCommittee(verifier))?;
        if r.reveals.contains_key(&verifier) {
            return Err(ContractError::AlreadyRevealed(verifier));
        }
        if !open_verdict(&entry.verdict, verdict, salt) {
            return Err(ContractError::CommitMismatch);
        }
        let package = r.package.as_ref().expect("reveal phase has a package");
        if openings.len() != package.indices.len() {
            return Err(ContractError::MerkleInvalid { position: openings.len().min(package.indices.len()) });
        }
        let commitment = commitments::MerkleCommitment {
            root: entry.state_root,
            leaf_count: entry.leaf_count,
        };
        for (position, (proof, idx)) in openings.iter().zip(&package.indices).enumerate() {
            if proof.leaf_index != *idx as usize || !commitment.verify(proof) {
                return Err(ContractError::MerkleInvalid { position });
            }
        }
        if r.tail && tail_tokens.is_none() {
            return Err(ContractError::MissingTailToken);
        }
        r.reveals.insert(
            verifier,
            RevealEntry {
                verdict,
                values: openings.iter().map(|p| p.leaf_value).collect(),
                tail_tokens,
            },
        );
        Ok(CallOutput::Done)
    }

    pub fn adjudicate(&mut self, round: u64) -> Result<Outcome, ContractError> {
        match self.execute(Call::Adjudicate { round })? {
            CallOutput::Outcome(o) => Ok(o),
            other => unreachable!("adjudicate returned {other:?}"),
        }
    }

    fn do_adjudicate(&mut self, round: u64) -> Result<Outcome, ContractError> {
        let now = self.clock();
        let r = self.round(round)?;
        Self::expect_phase(r, RoundPhase::Reveal)?;
        if !r.reveal_complete() && r.reveal_deadline.is_some_and(|d| now <= d) {
            return Err(ContractError::RevealOpen);
        }
        let mut outcome = self.decide(r);
        let r = self.round(round)?.clone();
        let econ = self.config.economics;
        let fee = self.config.fee_per_verifier();
        let pool = fee * r.committee.len() as u64;
        let inferencer = Account::Node(r.inferencer);
        // Slashes first so the pool can include collected stake.
        let mut applied = Vec::new();
        for s in outcome.slashes.drain(..) {
            let amount = self.registry.slash(s.account, s.amount);
            applied.push(Slash { amount, ..s });
        }
        outcome.slashes = applied;
        let mut inferencer_penalty = 0;
        if outcome.verdict == Verdict::RejectInferencer {
            inferencer_penalty = self.registry.slash(inferencer, econ.inferencer_slash);
            outcome.slashes.push(Slash {
                account: inferencer,
                amount: inferencer_penalty,
                reason: SlashReason::InferencerRejected,
            });
        }
        if !outcome.rewards.is_empty() {
            let share = pool / outcome.rewards.len() as u64;
            for (_, amount) in &mut outcome.rewards {
                *amount = share;
            }
        }
        if outcome.verdict != Verdict::RejectInferencer {
            outcome.rewards.insert(0, (inferencer, econ.inference_reward));
        }
        for (account, amount) in &outcome.rewards {
            self.registry.reward(*account, *amount)?;
        }
        let dispute_window = self.config.dispute_window;
        let parent = r.parent;
        {
            let rm = self.round_mut(round)?;
            rm.outcome = Some(outcome.clone());
            rm.inferencer_penalty = inferencer_penalty;
            rm.phase = RoundPhase::Adjudicated;
            rm.final_at = Some(now + dispute_window);
        }
        if let Some(parent) = parent {
            self.resolve_reconsideration(parent, round, &outcome)?;
        }
        Ok(outcome)
    }

    /// Applies the three decision rules. Rewards hold the winning verifiers
    /// with placeholder amounts; the inferencer is handled by the caller.
    fn decide(&self, r: &VerificationRound) -> Outcome {
        let econ = self.config.economics;
        let m = r.committee.len();
        let package = r.package.as_ref().expect("reveal phase has a package");
        let reference: Vec<f64> = package.values.iter().map(|&v| v as f64).collect();
        let true_votes = r.reveals.values().filter(|e| e.verdict).count();
        let mut slashes = Vec::new();
        let mut rewards = Vec::new();
        let on_chain_pass = |e: &RevealEntry| {
            bitstats::compare_values(&package.values, &e.values, &Tolerances::ON_CHAIN)
                .map(|s| bitstats::accept(&s, &Tolerances::ON_CHAIN))
                .unwrap_or(false)
        };
        for v in &r.committee {
            if !r.reveals.contains_key(v) {
                slashes.push(Slash {
                    account: Account::Node(*v),
                    amount: econ.verifier_slash,
                    reason: SlashReason::NoReveal,
                });
            }
        }
        let mut cluster = Vec::new();
        let verdict = if 2 * true_votes >= m {
            for v in &r.committee {
                let Some(e) = r.reveals.get(v) else { continue };
                if !on_chain_pass(e) {
                    slashes.push(Slash {
                        account: Account::Node(*v),
                        amount: econ.verifier_slash,
                        reason: SlashReason::OnChainMismatch,
                    });
                } else if e.verdict {
                    rewards.push((Account::Node(*v), 0));
                }
            }
            Verdict::AcceptInferencer
        } else {
            let false_voters: Vec<NodeId> = r.committee.iter().filter(|v| r.reveals.get(v).is_some_and(|e| !e.verdict)).copied().collect();
            let points: Vec<Vec<f64>> = false_voters
                .iter()
                .map(|v| r.reveals[v].values.iter().map(|&x| x as f64).collect())
                .collect();
            let q = self.config.quorum(m);
            let delta = self.config.delta_onchain;
            let winning = if points.is_empty() {
                None
            } else {
                clustering::cluster(&points, delta, q, None)
                    .ok()
                    .and_then(|o| o.proper.map(|p| o.clusters[p].clone()))
                    .filter(|members| {
                        let differing = members
                            .iter()
                            .filter(|&&i| {
                                let e = &r.reveals[&false_voters[i]];
                                clustering::mean_abs_distance(&points[i], &reference) > 2.0 * delta
                                    || (r.tail && e.tail_tokens.as_deref() != Some(&r.reported_tokens[..]))
                            })
                            .count();
                        2 * differing > members.len()
                    })
            };
            match winning {
                Some(members) => {
                    cluster = members.iter().map(|&i| false_voters[i]).collect();
                    for v in &r.committee {
                        let Some(e) = r.reveals.get(v) else { continue };
                        if cluster.contains(v) {
                            rewards.push((Account::Node(*v), 0));
                        } else if !e.verdict || !on_chain_pass(e) {
                            slashes.push(Slash {
                                account: Account::Node(*v),
                                amount: econ.verifier_slash,
                                reason: SlashReason::NonConvergent,
                            });
                        }
                    }
                    Verdict::RejectInferencer
                }
                None => Verdict::Ambiguous,
            }
        };
        Outcome {
            verdict,
            true_votes,
            committee: m,
            cluster,
            rewards,
            slashes,
        }
    }

    fn resolve_reconsideration(&mut self, parent: u64, child: u64, outcome: &Outcome) -> Result<(), ContractError> {
        let p = self.round(parent)?.clone();
        let c = self.round(child)?.clone();
        let inferencer = Account::Node(p.inferencer);
        let econ = self.config.economics;
        let mut extra_slashes = Vec::new();
        let mut extra_rewards = Vec::new();
        if outcome.verdict != Verdict::RejectInferencer {
            extra_rewards.push((inferencer, p.inferencer_penalty + c.escrow));
            if outcome.verdict == Verdict::AcceptInferencer {
                let slashed: BTreeSet<Account> = p.outcome.iter().flat_map(|o| o.slashes.iter().map(|s| s.account)).collect();
                for v in &p.committee {
                    let account = Account::Node(*v);
                    // First-round minority that voted True is paid as if it had won.
                    if p.reveals.get(v).is_some_and(|e| e.verdict) && !slashed.contains(&account) {
                        extra_rewards.push((account, self.config.fee_per_verifier()));
                    }
                    if p.reveals.get(v).is_some_and(|e| !e.verdict) {
                        let amount = self.registry.slash(Account::Node(*v), econ.verifier_slash);
                        extra_slashes.push(Slash {
                            account: Account::Node(*v),
                            amount,
                            reason: SlashReason::OverturnedOnReconsideration,
                        });
                    }
                }
            }
        }
        for (a, amt) in &extra_rewards {
            self.registry.reward(*a, *amt)?;
        }
        let pr = self.round_mut(parent)?;
        if let Some(o) = pr.outcome.as_mut() {
            o.slashes.extend(extra_slashes);
            o.rewards.extend(extra_rewards);
            if outcome.verdict != Verdict::RejectInferencer {
                o.verdict = Verdict::AcceptInferencer;
            }
        }
        pr.phase = RoundPhase::Final;
        self.round_mut(child)?.phase = RoundPhase::Final;
        Ok(())
    }

    pub fn oracle_dispute(&mut self, round: u64, prover: NodeId, attestation: &OracleAttestation) -> Result<Outcome, ContractError> {
        match self.execute(Call::OracleDispute {
            round,
            prover,
            attestation: attestation.clone(),
        })? {
            CallOutput::Outcome(o) => Ok(o),
            other => unreachable!("oracle_dispute returned {other:?}"),
        }
    }

    fn do_oracle_dispute(&mut self, round: u64, prover: NodeId, a: &OracleAttestation) -> Result<Outcome, ContractError> {
        let r = self.round(round)?;
        Self::expect_phase(r, RoundPhase::Adjudicated)?;
        if r.outcome.as_ref().map(|o| o.verdict) != Some(Verdict::Ambiguous) {
            return Err(ContractError::ProofRejected("round is not ambiguous".into()));
        }
        if !r.committee.contains(&prover) {
            return Err(ContractError::NotInCommittee(prover));
        }
        let msg = attestation_message(r.id, &r.task, r.stage, a.inferencer_honest);
        if a.round != r.id || a.task != r.task || a.stage != r.stage || !identity::verify(&self.config.oracle_key, &msg, &a.signature) {
            return Err(ContractError::ProofRejected("attestation signature invalid".into()));
        }
        if a.inferencer_honest {
            return Err(ContractError::ProofRejected("oracle attests the inferencer was honest".into()));
        }
        let econ = self.config.economics;
        let inferencer = Account::Node(r.inferencer);
        let pool = self.config.fee_per_verifier() * r.committee.len() as u64;
        let taken = self.registry.slash(inferencer, econ.inferencer_slash + econ.inference_reward);
        self.registry.reward(Account::Node(prover), pool)?;
        let rm = self.round_mut(round)?;
        let o = rm.outcome.as_mut().expect("adjudicated");
        o.verdict = Verdict::RejectInferencer;
        o.slashes.push(Slash {
            account: inferencer,
            amount: taken,
            reason: SlashReason::OracleProvedFaulty,
        });
        o.rewards.push((Account::Node(prover), pool));
        rm.phase = RoundPhase::Final;
        Ok(o.clone())
    }

    pub fn dispute(&mut self, round: u64, committee_size: usize, vrf: &VrfOutput) -> Result<u64, ContractError> {
        match self.execute(Call::Dispute {
            round,
            committee_size,
            vrf: vrf.clone(),
        })? {
            CallOutput::RoundOpened { round } => Ok(round),
            other => unreachable!("dispute returned {other:?}"),
        }
    }

    /// Nodes eligible for a reconsideration committee, in group order.
    pub fn reconsideration_pool(r: &VerificationRound) -> Vec<NodeId> {
        r.group
            .iter()
            .filter(|n| **n != r.inferencer && !r.committee.contains(n))
            .copied()
            .collect()
    }

    fn do_dispute(&mut self, round: u64, m_prime: usize, vrf: &VrfOutput) -> Result<CallOutput, ContractError> {
        let r = self.round(round)?.clone();
        let r = &r;
        Self::expect_phase(r, RoundPhase::Adjudicated)?;
        if r.parent.is_some() || r.outcome.as_ref().map(|o| o.verdict) != Some(Verdict::RejectInferencer) {
            return Err(ContractError::NotRejected(round));
        }
        let m = r.committee.len();
        if m_prime <= m {
            return Err(ContractError::CommitteeTooSmall { requested: m_prime, current: m });
        }
        let pool = Self::reconsideration_pool(r);
        if pool.len() < m_prime {
            return Err(ContractError::InsufficientGroup {
                requested: m_prime,
                available: pool.len(),
            });
        }
        let transcript = randomness::reconsideration_transcript(&r.task, r.stage, r.group.len() as u32, m_prime as u32);
        if !randomness::vrf_verify(&self.config.scheduler_vrf, &transcript, vrf) {
            return Err(ContractError::VrfInvalid("reconsideration committee".into()));
        }
        let escrow = (m_prime - m) as u64 * self.config.fee_per_verifier();
        let inferencer = Account::Node(r.inferencer);
        let available = self.registry.ledger().free_of(inferencer);
        if available < escrow {
            return Err(ContractError::InsufficientEscrow { needed: escrow, available });
        }
        let perm = randomness::permutation(&vrf.randomness, pool.len());
        let committee: Vec<NodeId> = perm[..m_prime].iter().map(|&i| pool[i]).collect();
        self.registry.collect(inferencer, escrow)?;
        let id = self.rounds.len() as u64;
        let now = self.clock();
        let mut child = r.clone();
        child.id = id;
        child.committee = committee;
        child.phase = RoundPhase::Commit;
        child.commit_deadline = now + self.config.commit_window;
        child.reveal_deadline = None;
        child.final_at = None;
        child.commitments.clear();
        child.package = None;
        child.reveals.clear();
        child.outcome = None;
        child.parent = Some(round);
        child.child = None;
        child.escrow = escrow;
        child.inferencer_penalty = 0;
        self.rounds.push(child);
        let parent = self.round_mut(round)?;
        parent.phase = RoundPhase::Disputed;
        parent.child = Some(id);
        Ok(CallOutput::RoundOpened { round: id })
    }

    pub fn file_relay_complaint(&mut self, complainant: Account, record: &RelayRecord, delivery: &Delivery) -> Result<(u64, u64), ContractError> {
        match self.execute(Call::RelayComplaint {
            complainant,
            record: record.clone(),
            delivery: delivery.clone(),
        })? {
            CallOutput::ComplaintUpheld { slashed, reward } => Ok((slashed, reward)),
            other => unreachable!("complaint returned {other:?}"),
        }
    }

    fn do_complaint(&mut self, complainant: Account, record: &RelayRecord, delivery: &Delivery) -> Result<CallOutput, ContractError> {
        let invalid = |m: &str| Err(ContractError::EvidenceInvalid(m.to_string()));
        let Some(scheduler_key) = self.registry.scheduler_key() else {
            return invalid("no registered scheduler");
        };
        let inferencer_key = self.registry.node(record.inferencer)?.public_key;
        if !record.verify(&inferencer_key, &scheduler_key) {
            return invalid("relay record signatures do not verify");
        }
        if !identity::verify(&scheduler_key, &delivery.message(), &delivery.scheduler_sig) {
            return invalid("delivery signature does not verify");
        }
        if (record.task, record.stage, record.step) != (delivery.task, delivery.stage, delivery.step) {
            return invalid("record and delivery name different hops");
        }
        if record.root == delivery.root {
            return invalid("no conflict between signed and delivered values");
        }
        let key = (hex::encode(record.task), record.stage, record.step);
        if self.complaints.contains(&key) {
            return invalid("complaint already upheld for this hop");
        }
        let slashed = self.registry.slash(Account::Scheduler, self.config.economics.scheduler_slash);
        let reward = slashed.min(self.config.economics.complaint_reward);
        self.registry.reward(complainant, reward)?;
        self.complaints.insert(key);
        Ok(CallOutput::ComplaintUpheld { slashed, reward })
    }
}

/// A verifier's private working state between commit and reveal.
#[derive(Debug, Clone)]
pub struct Ballot {
    tree: MerkleTree,
    pub verdict: bool,
    pub salt: [u8; 32],
    pub tail_tokens: Option<Vec<u32>>,
}

impl Ballot {
    pub fn new(final_state_values: &[f32], verdict: bool, salt: [u8; 32], tail_tokens: Option<Vec<u32>>) -> Result<Self, commitments::CommitmentError> {
        Ok(Ballot {
            tree: MerkleTree::build(final_state_values)?,
            verdict,
            salt,
            tail_tokens,
        })
    }

    pub fn state_root(&self) -> Digest {
        self.tree.root()
    }

    pub fn leaf_count(&self) -> u32 {
        self.tree.leaf_count() as u32
    }

    pub fn verdict_commitment(&self) -> VerdictCommitment {
        commit_verdict(self.verdict, &self.salt).expect("salt is 32 bytes")
    }

    pub fn openings(&self, indices: &[u32]) -> Vec<InclusionProof> {
        indices
            .iter()
            .map(|&i| self.tree.open(i as usize).expect("index inside the committed tree"))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ReplayStatus {
    /// Every entry re-executed to the recorded result and state root.
    Verified { entries: usize },
    /// The log ended inside an entry; everything before it verified.
    Truncated { entries: usize },
    Diverged { index: usize, reason: String },
}

/// Re-executes a contract log produced by [`Contract::log_jsonl`].
pub fn replay(log: &str) -> Result<ReplayStatus, String> {
    let mut lines = log.split_inclusive('\n');
    let first = lines.next().ok_or("empty log")?;
    let genesis: Genesis = serde_json::from_str(first.trim_end()).map_err(|e| format!("genesis: {e}"))?;
    let mut contract = Contract::new(genesis.config, genesis.registry);
    let mut entries = 0;
    for (index, line) in lines.enumerate() {
        let complete = line.ends_with('\n');
        let text = line.trim_end();
        if text.is_empty() {
            continue;
        }
        let entry: LogEntry = match serde_json::from_str(text) {
            Ok(e) => e,
            Err(_) if !complete => return Ok(ReplayStatus::Truncated { entries }),
            Err(e) => {
                return Ok(ReplayStatus::Diverged {
                    index,
                    reason: format!("unreadable entry: {e}"),
                })
            }
        };
        if entry.index != index as u64 {
            return Ok(ReplayStatus::Diverged {
                index,
                reason: format!("entry carries index {}", entry.index),
            });
        }
        let result = match contract.dispatch(&entry.call) {
            Ok(o) => CallResult::Ok(o),
            Err(e) => CallResult::Err(e.to_string()),
        };
        if result != entry.result {
            return Ok(ReplayStatus::Diverged {
                index,
                reason: format!("result {result:?} differs from recorded {:?}", entry.result),
            });
        }
        if contract.state_root() != entry.state_root {
            return Ok(ReplayStatus::Diverged {
                index,
                reason: "state root differs".into(),
            });
        }
        entries += 1;
    }
    Ok(ReplayStatus::Verified { entries })
}

/// Scripted behaviour of one committee member in [`drive_round`].
#[derive(Debug, Clone)]
pub struct Participant {
    pub verifier: NodeId,
    /// Values the verifier commits to; `None` skips the commit.
    pub ballot: Option<Ballot>,
    pub reveals: bool,
}

#[derive(Debug, Error)]
pub enum DriveError {
    #[error(transparent)]
    Contract(#[from] ContractError),
    #[error(transparent)]
    Scheduler(#[from] scheduler::SchedulerError),
}

/// Inputs shared by every participant in [`drive_round`].
#[derive(Debug, Clone, Copy)]
pub struct RoundSetup<'a> {
    pub task: Digest,
    pub roles: &'a StageRoles,
    pub tail: bool,
    pub reported_tokens: &'a [u32],
    /// The inferencer's step-T state for this stage.
    pub inferencer_state: &'a commitments::HiddenState,
    pub inferencer_key: &'a SigningKey,
}

/// Runs one round end to end: open, commit, sample, reveal, adjudicate.
/// Deadlines are advanced past whenever a participant stays silent.
pub fn drive_round(contract: &mut Contract, sched: &scheduler::Scheduler, setup: RoundSetup<'_>, participants: &[Participant]) -> Result<(u64, Outcome), DriveError> {
    let final_step = setup.inferencer_state.token_index;
    let round = contract.open_round(setup.task, setup.roles, setup.tail, final_step, setup.reported_tokens)?;
    let outcome = drive_opened_round(contract, sched, &setup, round, participants)?;
    Ok((round, outcome))
}

/// [`drive_round`] for a round that already exists, such as a
/// reconsideration opened by [`Contract::dispute`].
pub fn drive_opened_round(contract: &mut Contract, sched: &scheduler::Scheduler, setup: &RoundSetup<'_>, round: u64, participants: &[Participant]) -> Result<Outcome, DriveError> {
    let final_step = setup.inferencer_state.token_index;
    for p in participants {
        if let Some(b) = &p.ballot {
            contract.submit_commitment(round, p.verifier, b.state_root(), b.leaf_count(), b.verdict_commitment())?;
        }
    }
    while contract.round(round)?.phase == RoundPhase::Commit {
        contract.advance_round();
    }
    let r = contract.round(round)?;
    let root = MerkleTree::from_state(setup.inferencer_state).map_err(scheduler::SchedulerError::from)?.root();
    let msg = relay_message(&setup.task, r.stage, final_step, &root);
    let sig = identity::sign(setup.inferencer_key, Account::Node(r.inferencer), &msg);
    let package = sched.sampling_package(
        &setup.task,
        r.stage,
        final_step,
        &r.posted_roots(),
        setup.inferencer_state,
        r.inferencer,
        sig,
        contract.config().sample_size,
    )?;
    contract.post_sampling_package(round, &package)?;
    let mut silent = false;
    for p in participants {
        match (&p.ballot, p.reveals) {
            (Some(b), true) => contract.reveal(round, p.verifier, b.verdict, &b.salt, &b.openings(&package.indices), b.tail_tokens.as_deref())?,
            _ => silent = true,
        }
    }
    if silent {
        let deadline = contract.round(round)?.reveal_deadline.unwrap_or(0);
        while contract.clock() <= deadline {
            contract.advance_round();
        }
    }
    Ok(contract.adjudicate(round)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::commitments::HiddenState;
    use crate::identity::{LayerSlice, NodeRegistration, RegistryConfig};
    use crate::scheduler::{Scheduler, TaskRequest};

    pub(crate) const DIM: usize = 32;

    struct World {
        contract: Contract,
        sched: Scheduler,
        oracle: ZkOracle,
        keys: BTreeMap<NodeId, SigningKey>,
        task: Digest,
        roles: StageRoles,
    }

    fn world(group_size: usize) -> World {
        let mut registry = Registry::new(RegistryConfig {
            min_stake: 1000,
            withdrawal_delay: 2,
            k_min: 6,
        });
        registry.declare_model("toy", 2);
        let mut keys = BTreeMap::new();
        for i in 0..group_size {
            let key = SigningKey::from_seed(500 + i as u64);
            let id = registry
                .register(
                    NodeRegistration {
                        public_key: key.public(),
                        model: "toy".into(),
                        slice: LayerSlice::new(1, 2).unwrap(),
                        endpoint: String::new(),
                    },
                    100_000,
                )
                .unwrap();
            keys.insert(id, key);
        }
        let sched = Scheduler::new(9);
        registry.register_scheduler(sched.public_key(), 100_000).unwrap();
        registry.fund_treasury(1_000_000);
        let oracle = ZkOracle::new(4);
        let config = ContractConfig {
            model: "toy".into(),
            committee_size: 6,
            tau: 0.7,
            delta_onchain: 0.05,
            hidden_dim: DIM,
            sample_size: 16,
            commit_window: 3,
            reveal_window: 3,
            dispute_window: 5,
            economics: Economics::for_committee(6, 1000),
            scheduler_vrf: sched.vrf_public(),
            oracle_key: oracle.public_key(),
        };
        let request = TaskRequest {
            model: "toy".into(),
            prompt: vec![1, 2, 3],
            max_tokens: 4,
            nonce: 7,
        };
        let snap = registry.group_snapshot("toy").unwrap();
        let roles = sched.assign_roles(&request, &snap, 6).unwrap().stages.remove(0);
        World {
            contract: Contract::with_log(config, registry),
            sched,
            oracle,
            keys,
            task: request.task_hash(),
            roles,
        }
    }

    fn truth(task: Digest) -> HiddenState {
        let values = (0..DIM).map(|i| 0.5 + i as f32 * 0.1).collect();
        HiddenState::new(task, 2, 4, (1, DIM as u32), values).unwrap()
    }

    fn shifted(values: &[f32], by: f32) -> Vec<f32> {
        values.iter().map(|v| v + by).collect()
    }

    fn ballot(values: &[f32], verdict: bool, salt: u8) -> Ballot {
        Ballot::new(values, verdict, [salt; 32], None).unwrap()
    }

    fn participants(w: &World, states: &[(bool, Vec<f32>)]) -> Vec<Participant> {
        w.roles
            .verifiers
            .iter()
            .zip(states)
            .enumerate()
            .map(|(i, (v, (verdict, values)))| Participant {
                verifier: *v,
                ballot: Some(ballot(values, *verdict, i as u8 + 1)),
                reveals: true,
            })
            .collect()
    }

    fn drive(w: &mut World, state: &HiddenState, ps: &[Participant]) -> Result<(u64, Outcome), DriveError> {
        let key = w.keys[&w.roles.inferencer].clone();
        let setup = RoundSetup {
            task: w.task,
            roles: &w.roles,
            tail: false,
            reported_tokens: &[],
            inferencer_state: state,
            inferencer_key: &key,
        };
        drive_round(&mut w.contract, &w.sched, setup, ps)
    }

    #[test]
    fn quorum_rounds_up() {
        let w = world(7);
        assert_eq!(w.contract.config().quorum(6), 5);
        assert_eq!(w.contract.config().quorum(10), 7);
        assert_eq!(w.contract.config().quorum(12), 9);
    }

    #[test]
    fn unanimous_accept_pays_each_sixth() {
        let mut w = world(7);
        let s = truth(w.task);
        let ps = participants(&w, &vec![(true, s.values().to_vec()); 6]);
        let (round, o) = drive(&mut w, &s, &ps).unwrap();
        assert_eq!(o.verdict, Verdict::AcceptInferencer);
        assert_eq!(o.rewards[0], (Account::Node(w.roles.inferencer), 8000));
        assert_eq!(o.rewards.len(), 7);
        assert!(o.rewards[1..].iter().all(|(_, a)| *a == 1500));
        assert!(o.slashes.is_empty());
        assert_eq!(w.contract.round(round).unwrap().phase, RoundPhase::Adjudicated);
        assert!(w.contract.registry().ledger().is_conserved());
    }

    #[test]
    fn five_false_consistent_rejects() {
        let mut w = world(7);
        let s = truth(w.task);
        let wrong = shifted(s.values(), 1.0);
        let mut states = vec![(false, wrong.clone()); 5];
        states.push((true, s.values().to_vec()));
        let ps = participants(&w, &states);
        let (_, o) = drive(&mut w, &s, &ps).unwrap();
        assert_eq!(o.verdict, Verdict::RejectInferencer);
        assert_eq!(o.cluster.len(), 5);
        assert!(o.rewards.iter().all(|(_, a)| *a == 1800));
        assert!(o.slashes.iter().any(|s| s.reason == SlashReason::InferencerRejected && s.amount == 16_000));
    }

    #[test]
    fn four_of_six_capture_is_ambiguous_and_oracle_flips() {
        let mut w = world(7);
        let s = truth(w.task);
        let wrong = shifted(s.values(), 1.0);
        let mut states = vec![(false, wrong); 4];
        states.extend(vec![(true, s.values().to_vec()); 2]);
        let ps = participants(&w, &states);
        let (round, o) = drive(&mut w, &s, &ps).unwrap();
        assert_eq!(o.verdict, Verdict::Ambiguous);
        assert_eq!(o.rewards, vec![(Account::Node(w.roles.inferencer), 8000)]);
        // An honest attestation does not flip anything.
        let r = w.contract.round(round).unwrap().clone();
        let honest = w.oracle.attest(&r, true);
        assert!(matches!(w.contract.oracle_dispute(round, w.roles.verifiers[0], &honest), Err(ContractError::ProofRejected(_))));
        let forged = ZkOracle::new(99).attest(&r, false);
        assert!(matches!(w.contract.oracle_dispute(round, w.roles.verifiers[0], &forged), Err(ContractError::ProofRejected(_))));
        let faulty = w.oracle.attest(&r, false);
        let o = w.contract.oracle_dispute(round, w.roles.verifiers[0], &faulty).unwrap();
        assert_eq!(o.verdict, Verdict::RejectInferencer);
        assert_eq!(w.contract.round(round).unwrap().phase, RoundPhase::Final);
    }

    #[test]
    fn phase_errors() {
        let mut w = world(7);
        let s = truth(w.task);
        let round = w.contract.open_round(w.task, &w.roles, false, 4, &[]).unwrap();
        let b = ballot(s.values(), true, 1);
        let v0 = w.roles.verifiers[0];
        w.contract.submit_commitment(round, v0, b.state_root(), b.leaf_count(), b.verdict_commitment()).unwrap();
        assert_eq!(
            w.contract.submit_commitment(round, v0, b.state_root(), b.leaf_count(), b.verdict_commitment()),
            Err(ContractError::DoubleCommit(v0))
        );
        assert_eq!(
            w.contract.submit_commitment(round, w.roles.inferencer, b.state_root(), b.leaf_count(), b.verdict_commitment()),
            Err(ContractError::NotInCommittee(w.roles.inferencer))
        );
        assert_eq!(w.contract.reveal(round, v0, true, &b.salt, &[], None), Err(ContractError::WrongPhase { round, phase: RoundPhase::Commit }));
        let key = &w.keys[&w.roles.inferencer];
        let root = MerkleTree::from_state(&s).unwrap().root();
        let sig = identity::sign(key, Account::Node(w.roles.inferencer), &relay_message(&w.task, 1, 4, &root));
        let early = w.sched.sampling_package(&w.task, 1, 4, &[b.state_root()], &s, w.roles.inferencer, sig, 16).unwrap();
        assert_eq!(w.contract.post_sampling_package(round, &early), Err(ContractError::CommitPhaseOpen));
        for _ in 0..3 {
            w.contract.advance_round();
        }
        assert_eq!(w.contract.round(round).unwrap().phase, RoundPhase::Sampled);
        let late = w.roles.verifiers[1];
        assert_eq!(
            w.contract.submit_commitment(round, late, b.state_root(), b.leaf_count(), b.verdict_commitment()),
            Err(ContractError::WrongPhase { round, phase: RoundPhase::Sampled })
        );
        assert_eq!(w.contract.adjudicate(round), Err(ContractError::WrongPhase { round, phase: RoundPhase::Sampled }));
        w.contract.post_sampling_package(round, &early).unwrap();
        assert_eq!(w.contract.adjudicate(round), Err(ContractError::RevealOpen));
        assert_eq!(w.contract.reveal(round, v0, false, &b.salt, &[], None), Err(ContractError::CommitMismatch));
    }

    fn sampled_round(w: &mut World) -> (u64, SamplingPackage, Vec<Ballot>) {
        let s = truth(w.task);
        let round = w.contract.open_round(w.task, &w.roles, false, 4, &[]).unwrap();
        let ballots: Vec<Ballot> = (0..6).map(|i| ballot(s.values(), true, i + 1)).collect();
        for (v, b) in w.roles.verifiers.clone().iter().zip(&ballots) {
            w.contract.submit_commitment(round, *v, b.state_root(), b.leaf_count(), b.verdict_commitment()).unwrap();
        }
        let r = w.contract.round(round).unwrap();
        let key = &w.keys[&w.roles.inferencer];
        let root = MerkleTree::from_state(&s).unwrap().root();
        let sig = identity::sign(key, Account::Node(w.roles.inferencer), &relay_message(&w.task, 1, 4, &root));
        let p = w.sched.sampling_package(&w.task, 1, 4, &r.posted_roots(), &s, w.roles.inferencer, sig, 16).unwrap();
        (round, p, ballots)
    }

    #[test]
    fn package_tampering_is_named() {
        let mut w = world(7);
        let (round, p, _) = sampled_round(&mut w);
        w.contract.check_sampling_package(round, &p).unwrap();

        let mut swapped = p.clone();
        swapped.proofs.swap(3, 4);
        assert_eq!(w.contract.check_sampling_package(round, &swapped), Err(ContractError::MerkleInvalid { position: 3 }));

        let mut value = p.clone();
        value.values[7] += 1.0;
        assert_eq!(w.contract.check_sampling_package(round, &value), Err(ContractError::MerkleInvalid { position: 7 }));

        let mut idx = p.clone();
        idx.indices.swap(0, 1);
        assert!(matches!(w.contract.check_sampling_package(round, &idx), Err(ContractError::VrfInvalid(_))));

        let outsider = w.roles.verifiers[0];
        let mut sig = p.clone();
        sig.inferencer_sig = identity::sign(&w.keys[&outsider], Account::Node(outsider), &relay_message(&w.task, 1, 4, &p.inferencer_root));
        assert!(matches!(w.contract.check_sampling_package(round, &sig), Err(ContractError::SignatureInvalid(_))));
        let mut who = p.clone();
        who.inferencer = outsider;
        assert!(matches!(w.contract.check_sampling_package(round, &who), Err(ContractError::SignatureInvalid(_))));

        let mut vrf = p.clone();
        vrf.vrf.randomness[0] ^= 1;
        assert!(matches!(w.contract.check_sampling_package(round, &vrf), Err(ContractError::VrfInvalid(_))));
    }

    #[test]
    fn reveal_checks_openings_against_own_root() {
        let mut w = world(7);
        let (round, p, ballots) = sampled_round(&mut w);
        w.contract.post_sampling_package(round, &p).unwrap();
        let v = w.roles.verifiers.clone();
        let other = ballot(&shifted(truth(w.task).values(), 0.5), true, 1);
        assert!(matches!(
            w.contract.reveal(round, v[0], true, &ballots[0].salt, &other.openings(&p.indices), None),
            Err(ContractError::MerkleInvalid { position: 0 })
        ));
        let mut shuffled = ballots[0].openings(&p.indices);
        shuffled.swap(0, 1);
        assert!(matches!(w.contract.reveal(round, v[0], true, &ballots[0].salt, &shuffled, None), Err(ContractError::MerkleInvalid { .. })));
        w.contract.reveal(round, v[0], true, &ballots[0].salt, &ballots[0].openings(&p.indices), None).unwrap();
        assert_eq!(
            w.contract.reveal(round, v[0], true, &ballots[0].salt, &ballots[0].openings(&p.indices), None),
            Err(ContractError::AlreadyRevealed(v[0]))
        );
    }

    #[test]
    fn silent_verifier_is_slashed() {
        let mut w = world(7);
        let s = truth(w.task);
        let mut ps = participants(&w, &vec![(true, s.values().to_vec()); 6]);
        ps[2].reveals = false;
        ps[5].ballot = None;
        let (_, o) = drive(&mut w, &s, &ps).unwrap();
        assert_eq!(o.verdict, Verdict::AcceptInferencer);
        let no_reveal: Vec<_> = o.slashes.iter().filter(|s| s.reason == SlashReason::NoReveal).map(|s| s.account).collect();
        assert_eq!(no_reveal, vec![Account::Node(w.roles.verifiers[2]), Account::Node(w.roles.verifiers[5])]);
        assert!(o.rewards[1..].iter().all(|(_, a)| *a == 9000 / 4));
    }

    #[test]
    fn tail_round_requires_tokens_and_flags_token_mismatch() {
        let mut w = world(7);
        let s = truth(w.task);
        let reported = vec![3, 4, 5, 0];
        let key = w.keys[&w.roles.inferencer].clone();
        let mut ps = participants(&w, &vec![(false, s.values().to_vec()); 6]);
        for p in &mut ps {
            p.ballot.as_mut().unwrap().tail_tokens = Some(vec![3, 4, 5, 6]);
        }
        let setup = RoundSetup {
            task: w.task,
            roles: &w.roles,
            tail: true,
            reported_tokens: &reported,
            inferencer_state: &s,
            inferencer_key: &key,
        };
        let (_, o) = drive_round(&mut w.contract, &w.sched, setup, &ps).unwrap();
        assert_eq!(o.verdict, Verdict::RejectInferencer);
        assert_eq!(o.cluster.len(), 6);

        let mut w = world(7);
        let key = w.keys[&w.roles.inferencer].clone();
        let ps = participants(&w, &vec![(true, s.values().to_vec()); 6]);
        let setup = RoundSetup {
            task: w.task,
            roles: &w.roles,
            tail: true,
            reported_tokens: &reported,
            inferencer_state: &s,
            inferencer_key: &key,
        };
        assert!(matches!(drive_round(&mut w.contract, &w.sched, setup, &ps), Err(DriveError::Contract(ContractError::MissingTailToken))));
    }

    #[test]
    fn reconsideration_overturns_and_refunds() {
        let mut w = world(14);
        let s = truth(w.task);
        let wrong = shifted(s.values(), 1.0);
        let mut states = vec![(false, wrong); 5];
        states.push((true, s.values().to_vec()));
        let ps = participants(&w, &states);
        let (round, o) = drive(&mut w, &s, &ps).unwrap();
        assert_eq!(o.verdict, Verdict::RejectInferencer);
        let inf = Account::Node(w.roles.inferencer);
        let vrf_bad = w.sched.vrf().eval(b"something else");
        assert!(matches!(w.contract.dispute(round, 7, &vrf_bad), Err(ContractError::VrfInvalid(_))));
        let r = w.contract.round(round).unwrap().clone();
        let vrf = w.sched.vrf().eval(&randomness::reconsideration_transcript(&w.task, 1, 14, 7));
        assert_eq!(w.contract.dispute(round, 6, &vrf), Err(ContractError::CommitteeTooSmall { requested: 6, current: 6 }));
        assert_eq!(w.contract.dispute(round, 7, &vrf), Err(ContractError::InsufficientEscrow { needed: 1500, available: 0 }));
        w.contract.deposit(inf, 1500);
        let child = w.contract.dispute(round, 7, &vrf).unwrap();
        assert_eq!(w.contract.round(round).unwrap().phase, RoundPhase::Disputed);
        let c = w.contract.round(child).unwrap().clone();
        assert_eq!(c.committee.len(), 7);
        assert!(c.committee.iter().all(|v| !r.committee.contains(v) && *v != r.inferencer));

        let mut roles = w.roles.clone();
        roles.verifiers = c.committee.clone();
        let round_id = child;
        for (i, v) in c.committee.iter().enumerate() {
            let b = ballot(s.values(), true, 40 + i as u8);
            w.contract.submit_commitment(round_id, *v, b.state_root(), b.leaf_count(), b.verdict_commitment()).unwrap();
        }
        let key = &w.keys[&w.roles.inferencer];
        let root = MerkleTree::from_state(&s).unwrap().root();
        let sig = identity::sign(key, inf, &relay_message(&w.task, 1, 4, &root));
        let posted = w.contract.round(child).unwrap().posted_roots();
        let p = w.sched.sampling_package(&w.task, 1, 4, &posted, &s, w.roles.inferencer, sig, 16).unwrap();
        w.contract.post_sampling_package(child, &p).unwrap();
        for (i, v) in c.committee.iter().enumerate() {
            let b = ballot(s.values(), true, 40 + i as u8);
            w.contract.reveal(child, *v, true, &b.salt, &b.openings(&p.indices), None).unwrap();
        }
        let before = w.contract.registry().ledger().free_of(inf);
        let o2 = w.contract.adjudicate(child).unwrap();
        assert_eq!(o2.verdict, Verdict::AcceptInferencer);
        let after = w.contract.registry().ledger().free_of(inf);
        assert_eq!(after - before, 8000 + 16_000 + 1500);
        let parent = w.contract.round(round).unwrap();
        assert_eq!(parent.phase, RoundPhase::Final);
        let overturned = parent.outcome.as_ref().unwrap().slashes.iter().filter(|s| s.reason == SlashReason::OverturnedOnReconsideration).count();
        assert_eq!(overturned, 5);
        assert!(w.contract.registry().ledger().is_conserved());
    }

    #[test]
    fn relay_complaint() {
        let mut w = world(7);
        let inf = w.roles.inferencer;
        let root = [7u8; 32];
        let msg = relay_message(&w.task, 1, 2, &root);
        let record = RelayRecord {
            task: w.task,
            stage: 1,
            step: 2,
            root,
            leaf_count: 32,
            inferencer: inf,
            inferencer_sig: identity::sign(&w.keys[&inf], Account::Node(inf), &msg),
            scheduler_sig: w.sched.sign(&msg),
        };
        let bad_root = [8u8; 32];
        let delivery = Delivery {
            task: w.task,
            stage: 1,
            step: 2,
            root: bad_root,
            scheduler_sig: w.sched.sign(&relay_message(&w.task, 1, 2, &bad_root)),
        };
        let same = Delivery {
            root,
            scheduler_sig: w.sched.sign(&msg),
            ..delivery.clone()
        };
        let complainant = Account::Node(w.roles.verifiers[0]);
        assert!(matches!(w.contract.file_relay_complaint(complainant, &record, &same), Err(ContractError::EvidenceInvalid(_))));
        let mut forged = delivery.clone();
        forged.scheduler_sig = identity::sign(&w.keys[&inf], Account::Scheduler, &delivery.message());
        assert!(matches!(w.contract.file_relay_complaint(complainant, &record, &forged), Err(ContractError::EvidenceInvalid(_))));
        assert_eq!(w.contract.file_relay_complaint(complainant, &record, &delivery), Ok((20_000, 10_000)));
        assert!(matches!(w.contract.file_relay_complaint(complainant, &record, &delivery), Err(ContractError::EvidenceInvalid(_))));
    }

    #[test]
    fn log_replays_and_detects_tampering() {
        let mut w = world(7);
        let s = truth(w.task);
        let ps = participants(&w, &vec![(true, s.values().to_vec()); 6]);
        drive(&mut w, &s, &ps).unwrap();
        let log = w.contract.log_jsonl().unwrap();
        let n = log.lines().count() - 1;
        assert_eq!(replay(&log).unwrap(), ReplayStatus::Verified { entries: n });

        let truncated = &log[..log.len() - 20];
        assert_eq!(replay(truncated).unwrap(), ReplayStatus::Truncated { entries: n - 1 });

        let lines: Vec<&str> = log.lines().collect();
        let target = lines.iter().position(|l| l.contains("post_sampling_package")).unwrap();
        let mut entry: serde_json::Value = serde_json::from_str(lines[target]).unwrap();
        let proof = entry["call"]["package"]["proofs"][2]["path"][0]["sibling"].as_str().unwrap().to_string();
        let flipped = format!("{}{}", if &proof[..1] == "0" { "1" } else { "0" }, &proof[1..]);
        entry["call"]["package"]["proofs"][2]["path"][0]["sibling"] = serde_json::Value::String(flipped);
        let mut tampered: Vec<String> = lines.iter().map(|l| l.to_string()).collect();
        tampered[target] = entry.to_string();
        let tampered = tampered.join("\n") + "\n";
        match replay(&tampered).unwrap() {
            ReplayStatus::Diverged { index, .. } => assert_eq!(index, target - 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
