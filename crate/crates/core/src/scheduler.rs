//! Task orchestration: VRF role assignment, the dual-signed hidden-state
//! relay, verification work orders and audit-sample publication.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::commitments::{self, HiddenState, InclusionProof, MerkleTree};
use crate::digest::{derive_seed, hex32, tag, tagged_hash, Digest};
use crate::identity::{self, Account, GroupSnapshot, NodeId, PublicKey, Registry, Signature, SigningKey};
use crate::pipeline::{self, Attack, CostMeter, Model, NoiseModel, Phase, PipelineError, SegmentSession, StopReason};
use crate::randomness::{self, VrfKeypair, VrfOutput};

#[derive(Debug, Error)]
pub enum SchedulerError {
    #[error("group for stage {stage} has {size} nodes, needs {needed}")]
    GroupTooSmall { stage: u32, size: usize, needed: usize },
    #[error("relay signature invalid at stage {stage}, step {step}")]
    SignatureInvalid { stage: u32, step: u32 },
    #[error("no transcript for stage {0}")]
    MissingTranscript(u32),
    #[error("commit phase still open: {missing} commitments outstanding")]
    CommitPhaseOpen { missing: usize },
    #[error("no signing key for node {0}")]
    MissingKey(NodeId),
    #[error("audit failed: {0}")]
    AuditFailed(String),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Commitment(#[from] commitments::CommitmentError),
    #[error(transparent)]
    Identity(#[from] identity::IdentityError),
    #[error(transparent)]
    Randomness(#[from] randomness::RandomnessError),
    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for SchedulerError {
    fn from(e: std::io::Error) -> Self {
        SchedulerError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for SchedulerError {
    fn from(e: serde_json::Error) -> Self {
        SchedulerError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskRequest {
    pub model: String,
    pub prompt: Vec<u32>,
    pub max_tokens: u32,
    pub nonce: u64,
}

impl TaskRequest {
    pub fn task_hash(&self) -> Digest {
        let prompt: Vec<u8> = self.prompt.iter().flat_map(|t| t.to_le_bytes()).collect();
        tagged_hash(
            tag::TASK,
            &[self.model.as_bytes(), &prompt, &self.max_tokens.to_le_bytes(), &self.nonce.to_le_bytes()],
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRoles {
    pub stage: u32,
    pub group: Vec<NodeId>,
    pub vrf: VrfOutput,
    pub permutation: Vec<usize>,
    pub inferencer: NodeId,
    pub verifiers: Vec<NodeId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleAssignment {
    #[serde(with = "hex32")]
    pub task: Digest,
    pub k: usize,
    pub stages: Vec<StageRoles>,
}

impl RoleAssignment {
    pub fn stage(&self, stage: u32) -> &StageRoles {
        &self.stages[stage as usize - 1]
    }
}

pub(crate) fn roles_from(stage: u32, group: &[NodeId], vrf: VrfOutput, k: usize) -> StageRoles {
    let permutation = randomness::permutation(&vrf.randomness, group.len());
    StageRoles {
        stage,
        group: group.to_vec(),
        inferencer: group[permutation[0]],
        verifiers: permutation[1..=k].iter().map(|&p| group[p]).collect(),
        permutation,
        vrf,
    }
}

/// Signed relay entry for boundary state `S_{i+1}^{(t)}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelayRecord {
    #[serde(with = "hex32")]
    pub task: Digest,
    pub stage: u32,
    pub step: u32,
    #[serde(with = "hex32")]
    pub root: Digest,
    pub leaf_count: u32,
    pub inferencer: NodeId,
    pub inferencer_sig: Signature,
    pub scheduler_sig: Signature,
}

pub fn relay_message(task: &Digest, stage: u32, step: u32, root: &Digest) -> Vec<u8> {
    let mut m = Vec::with_capacity(8 + 32 + 8 + 32);
    m.extend_from_slice(tag::RELAY);
    m.extend_from_slice(task);
    m.extend_from_slice(&stage.to_le_bytes());
    m.extend_from_slice(&step.to_le_bytes());
    m.extend_from_slice(root);
    m
}

impl RelayRecord {
    pub fn message(&self) -> Vec<u8> {
        relay_message(&self.task, self.stage, self.step, &self.root)
    }

    pub fn verify(&self, inferencer: &PublicKey, scheduler: &PublicKey) -> bool {
        let m = self.message();
        identity::verify(inferencer, &m, &self.inferencer_sig) && identity::verify(scheduler, &m, &self.scheduler_sig)
    }
}

/// Scheduler-signed root of what was actually handed to the next hop.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Delivery {
    #[serde(with = "hex32")]
    pub task: Digest,
    pub stage: u32,
    pub step: u32,
    #[serde(with = "hex32")]
    pub root: Digest,
    pub scheduler_sig: Signature,
}

impl Delivery {
    pub fn message(&self) -> Vec<u8> {
        relay_message(&self.task, self.stage, self.step, &self.root)
    }
}

/// Injected relay misbehaviour, used to exercise abort and complaint paths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RelayFault {
    #[default]
    None,
    InferencerSignsWrongRoot { stage: u32, step: u32 },
    SchedulerTampers { stage: u32, step: u32 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskTranscript {
    pub request: TaskRequest,
    pub assignment: RoleAssignment,
    pub records: Vec<RelayRecord>,
    pub deliveries: Vec<Delivery>,
    pub tokens: Vec<u32>,
    pub stop: StopReason,
    /// Signed outputs: `states[t][i]` is stage `i + 1`'s output at step `t + 1`.
    pub states: Vec<Vec<HiddenState>>,
    /// What the next hop received; differs from `states` only under tampering.
    pub relayed: Vec<Vec<HiddenState>>,
    pub cost: CostMeter,
    pub stop_overridden: bool,
}

impl TaskTranscript {
    pub fn task(&self) -> Digest {
        self.assignment.task
    }

    pub fn stages(&self) -> u32 {
        self.assignment.stages.len() as u32
    }

    pub fn final_step(&self) -> u32 {
        self.tokens.len() as u32
    }

    pub fn prefill_tokens(&self) -> Vec<u32> {
        pipeline::prefill_tokens(&self.request.prompt, &self.tokens)
    }

    fn concat(rows: &[Vec<HiddenState>], stage: u32) -> Result<HiddenState, SchedulerError> {
        let steps: Vec<HiddenState> = rows.iter().map(|s| s[stage as usize - 1].clone()).collect();
        if steps.is_empty() {
            return Err(SchedulerError::MissingTranscript(stage));
        }
        Ok(HiddenState::concat(&steps)?)
    }

    /// Stage `stage`'s signed outputs over every position.
    pub fn stage_outputs(&self, stage: u32) -> Result<HiddenState, SchedulerError> {
        Self::concat(&self.states, stage)
    }

    /// Inputs stage `stage > 1` actually received over every position.
    pub fn stage_inputs(&self, stage: u32) -> Result<HiddenState, SchedulerError> {
        Self::concat(&self.relayed, stage - 1)
    }

    pub fn record(&self, stage: u32, step: u32) -> Option<&RelayRecord> {
        self.records.iter().find(|r| r.stage == stage && r.step == step)
    }

    /// Rows produced at the final step by stage `stage`'s inferencer.
    pub fn final_state(&self, stage: u32) -> Result<&HiddenState, SchedulerError> {
        self.states
            .last()
            .map(|s| &s[stage as usize - 1])
            .ok_or(SchedulerError::MissingTranscript(stage))
    }
}

/// Keyring of simulated node identities.
#[derive(Debug, Clone, Default)]
pub struct KeyRing(BTreeMap<NodeId, SigningKey>);

impl KeyRing {
    pub fn insert(&mut self, id: NodeId, key: SigningKey) {
        self.0.insert(id, key);
    }

    pub fn get(&self, id: NodeId) -> Result<&SigningKey, SchedulerError> {
        self.0.get(&id).ok_or(SchedulerError::MissingKey(id))
    }
}

/// Per-node noise: the base parameters with a node-specific seed.
pub fn node_noise(base: NoiseModel, node: NodeId) -> NoiseModel {
    base.with_seed(derive_seed(base.seed, &[0x401e, node.0 as u64]))
}

/// Payload of a work order: token ids for stage 1, boundary states otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Payload {
    Tokens(Vec<u32>),
    States { rows: u32, dim: u32, values: Vec<f32> },
}

/// The single message type a segment worker receives. There is no mode
/// field: inference and verification orders for the same inputs are the same
/// bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkOrder {
    #[serde(with = "hex32")]
    pub task: Digest,
    pub stage: u32,
    pub start_position: u32,
    pub payload: Payload,
}

impl WorkOrder {
    pub fn for_tokens(task: Digest, start_position: u32, tokens: Vec<u32>) -> Self {
        WorkOrder {
            task,
            stage: 1,
            start_position,
            payload: Payload::Tokens(tokens),
        }
    }

    pub fn for_states(task: Digest, stage: u32, start_position: u32, states: &HiddenState) -> Self {
        WorkOrder {
            task,
            stage,
            start_position,
            payload: Payload::States {
                rows: states.token_count() as u32,
                dim: states.hidden_dim() as u32,
                values: states.values().to_vec(),
            },
        }
    }

    /// Canonical wire bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&self.task);
        b.extend_from_slice(&self.stage.to_le_bytes());
        b.extend_from_slice(&self.start_position.to_le_bytes());
        match &self.payload {
            Payload::Tokens(t) => {
                b.push(0);
                b.extend_from_slice(&(t.len() as u32).to_le_bytes());
                t.iter().for_each(|x| b.extend_from_slice(&x.to_le_bytes()));
            }
            Payload::States { rows, dim, values } => {
                b.push(1);
                b.extend_from_slice(&rows.to_le_bytes());
                b.extend_from_slice(&dim.to_le_bytes());
                values.iter().for_each(|x| b.extend_from_slice(&x.to_bits().to_le_bytes()));
            }
        }
        b
    }
}

/// What a worker does with any order: a causal pass of its segment over the
/// payload, continuing an existing session.
pub fn execute_order(
    model: &Model,
    session: &mut SegmentSession<'_>,
    order: &WorkOrder,
    meter: &mut CostMeter,
    phase: Phase,
) -> Result<HiddenState, SchedulerError> {
    let seg = model.segment(order.stage as usize)?;
    let (rows, x) = match &order.payload {
        Payload::Tokens(t) => (t.len(), model.embed(t)?),
        Payload::States { rows, values, .. } => (*rows as usize, values.clone()),
    };
    let out = session.forward_chunk(&x, meter, phase)?;
    Ok(HiddenState::new(
        order.task,
        order.stage + 1,
        order.start_position + 1,
        (rows as u32, seg.hidden_dim() as u32),
        out,
    )?)
}

/// Inclusion proofs and values the scheduler publishes for one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingPackage {
    #[serde(with = "hex32")]
    pub task: Digest,
    pub stage: u32,
    pub final_step: u32,
    pub vrf: VrfOutput,
    pub indices: Vec<u32>,
    pub values: Vec<f32>,
    pub inferencer: NodeId,
    #[serde(with = "hex32")]
    pub inferencer_root: Digest,
    pub leaf_count: u32,
    pub inferencer_sig: Signature,
    pub proofs: Vec<InclusionProof>,
}

/// Leaf indices inside the last row of a `(rows, dim)` final-step tensor.
pub fn sampled_leaves(randomness: &Digest, rows: usize, dim: usize, q: usize) -> Result<Vec<u32>, SchedulerError> {
    let base = (rows - 1) * dim;
    Ok(randomness::sample_indices(randomness, dim, q)?
        .into_iter()
        .map(|j| (base + j) as u32)
        .collect())
}

/// The in-process scheduler identity.
#[derive(Debug, Clone)]
pub struct Scheduler {
    signing: SigningKey,
    vrf: VrfKeypair,
}

impl Scheduler {
    pub fn new(seed: u64) -> Self {
        Scheduler {
            signing: SigningKey::from_seed(derive_seed(seed, &[0x5c4e, 1])),
            vrf: VrfKeypair::from_seed(derive_seed(seed, &[0x5c4e, 2])),
        }
    }

    pub fn public_key(&self) -> PublicKey {
        self.signing.public()
    }

    pub fn vrf_public(&self) -> [u8; 32] {
        self.vrf.public()
    }

    pub fn vrf(&self) -> &VrfKeypair {
        &self.vrf
    }

    pub fn sign(&self, message: &[u8]) -> Signature {
        identity::sign(&self.signing, Account::Scheduler, message)
    }

    /// One inferencer and `k` verifiers per stage from a VRF permutation.
    pub fn assign_roles(&self, request: &TaskRequest, snapshot: &GroupSnapshot, k: usize) -> Result<RoleAssignment, SchedulerError> {
        let task = request.task_hash();
        let mut stages = Vec::with_capacity(snapshot.groups.len());
        for g in &snapshot.groups {
            if g.members.len() < k + 1 {
                return Err(SchedulerError::GroupTooSmall {
                    stage: g.stage,
                    size: g.members.len(),
                    needed: k + 1,
                });
            }
            let vrf = self.vrf.eval(&randomness::role_transcript(&task, g.stage, g.members.len() as u32));
            stages.push(roles_from(g.stage, &g.members, vrf, k));
        }
        Ok(RoleAssignment { task, k, stages })
    }

    /// Executes the task and relays every boundary state through signed
    /// records. Aborts on the first invalid inferencer signature.
    #[allow(clippy::too_many_arguments)]
    pub fn run_inference(
        &self,
        request: &TaskRequest,
        assignment: &RoleAssignment,
        registry: &Registry,
        keys: &KeyRing,
        model: &Model,
        noise: NoiseModel,
        attack: Attack,
        fault: RelayFault,
    ) -> Result<TaskTranscript, SchedulerError> {
        let task = assignment.task;
        let l = assignment.stages.len();
        let inferencers: Vec<NodeId> = assignment.stages.iter().map(|s| s.inferencer).collect();
        let noises: Vec<NoiseModel> = inferencers.iter().map(|n| node_noise(noise, *n)).collect();
        let mut inf_keys = Vec::with_capacity(l);
        let mut inf_public = Vec::with_capacity(l);
        for n in &inferencers {
            inf_keys.push(keys.get(*n)?);
            inf_public.push(registry.node(*n)?.public_key);
        }
        let mut records = Vec::new();
        let mut deliveries = Vec::new();
        let mut states: Vec<Vec<HiddenState>> = Vec::new();
        let mut meter = CostMeter::new(l);
        let gen = pipeline::apply_attack_with(
            attack,
            model,
            &noises,
            task,
            &request.prompt,
            request.max_tokens as usize,
            &mut meter,
            |step, stage, state: &mut HiddenState| -> Result<(), SchedulerError> {
                let (step, stage32) = (step as u32, stage as u32);
                let tree = MerkleTree::from_state(state)?;
                let root = tree.root();
                let signed_root = match fault {
                    RelayFault::InferencerSignsWrongRoot { stage: s, step: t } if (s, t) == (stage32, step) => {
                        tagged_hash(tag::STATE, &[&root])
                    }
                    _ => root,
                };
                let inf_sig = identity::sign(inf_keys[stage - 1], Account::Node(inferencers[stage - 1]), &relay_message(&task, stage32, step, &signed_root));
                let msg = relay_message(&task, stage32, step, &root);
                if !identity::verify(&inf_public[stage - 1], &msg, &inf_sig) {
                    return Err(SchedulerError::SignatureInvalid { stage: stage32, step });
                }
                records.push(RelayRecord {
                    task,
                    stage: stage32,
                    step,
                    root,
                    leaf_count: tree.leaf_count() as u32,
                    inferencer: inferencers[stage - 1],
                    inferencer_sig: inf_sig,
                    scheduler_sig: self.sign(&msg),
                });
                if stage == 1 {
                    states.push(Vec::with_capacity(l));
                }
                states.last_mut().expect("step row").push(state.clone());
                if stage < l {
                    if fault == (RelayFault::SchedulerTampers { stage: stage32, step }) {
                        let mut v = state.values().to_vec();
                        v[0] += 0.5;
                        *state = HiddenState::new(task, state.segment_index, state.token_index, state.shape(), v)?;
                    }
                    let delivered = commitments::merkle_root(state)?.root;
                    deliveries.push(Delivery {
                        task,
                        stage: stage32,
                        step,
                        root: delivered,
                        scheduler_sig: self.sign(&relay_message(&task, stage32, step, &delivered)),
                    });
                }
                Ok(())
            },
        )??;
        Ok(TaskTranscript {
            request: request.clone(),
            assignment: assignment.clone(),
            records,
            deliveries,
            tokens: gen.tokens,
            stop: gen.stop,
            states,
            relayed: gen.outputs,
            cost: meter,
            stop_overridden: gen.stop_overridden,
        })
    }

    /// Samples the inferencer's final-step state once every committed root is
    /// fixed. `roots` is in committee order; `None` marks a missing commitment.
    pub fn publish_samples(
        &self,
        transcript: &TaskTranscript,
        stage: u32,
        roots: &[Option<Digest>],
        deadline_passed: bool,
        sample_size: usize,
    ) -> Result<SamplingPackage, SchedulerError> {
        let missing = roots.iter().filter(|r| r.is_none()).count();
        if missing > 0 && !deadline_passed {
            return Err(SchedulerError::CommitPhaseOpen { missing });
        }
        let posted: Vec<Digest> = roots.iter().flatten().copied().collect();
        let t = transcript.final_step();
        let record = transcript
            .record(stage, t)
            .ok_or(SchedulerError::MissingTranscript(stage))?;
        self.sampling_package(
            &transcript.task(),
            stage,
            t,
            &posted,
            transcript.final_state(stage)?,
            record.inferencer,
            record.inferencer_sig.clone(),
            sample_size,
        )
    }

    /// Builds the package for an inferencer's final-step `state` given the
    /// posted verifier roots in committee order.
    #[allow(clippy::too_many_arguments)]
    pub fn sampling_package(
        &self,
        task: &Digest,
        stage: u32,
        final_step: u32,
        posted_roots: &[Digest],
        state: &HiddenState,
        inferencer: NodeId,
        inferencer_sig: Signature,
        sample_size: usize,
    ) -> Result<SamplingPackage, SchedulerError> {
        let vrf = self
            .vrf
            .eval(&randomness::sampling_transcript(task, stage, final_step, posted_roots));
        let tree = MerkleTree::from_state(state)?;
        let indices = sampled_leaves(&vrf.randomness, state.token_count(), state.hidden_dim(), sample_size)?;
        let mut values = Vec::with_capacity(indices.len());
        let mut proofs = Vec::with_capacity(indices.len());
        for &i in &indices {
            let p = tree.open(i as usize)?;
            values.push(p.leaf_value);
            proofs.push(p);
        }
        Ok(SamplingPackage {
            task: *task,
            stage,
            final_step,
            vrf,
            indices,
            values,
            inferencer,
            inferencer_root: tree.root(),
            leaf_count: tree.leaf_count() as u32,
            inferencer_sig,
            proofs,
        })
    }
}

/// Verification work orders: `k` per stage, each carrying that stage's
/// complete input sequence.
pub fn dispatch_verification(transcript: &TaskTranscript) -> Result<Vec<(NodeId, WorkOrder)>, SchedulerError> {
    if transcript.states.is_empty() {
        return Err(SchedulerError::MissingTranscript(1));
    }
    let task = transcript.task();
    let mut out = Vec::new();
    for roles in &transcript.assignment.stages {
        let order = if roles.stage == 1 {
            WorkOrder::for_tokens(task, 0, transcript.prefill_tokens())
        } else {
            WorkOrder::for_states(task, roles.stage, 0, &transcript.stage_inputs(roles.stage)?)
        };
        out.extend(roles.verifiers.iter().map(|v| (*v, order.clone())));
    }
    Ok(out)
}

/// Work order the stage-`stage` inferencer received at step `step`.
pub fn inference_order(transcript: &TaskTranscript, stage: u32, step: u32) -> Result<WorkOrder, SchedulerError> {
    let task = transcript.task();
    let prompt_len = transcript.request.prompt.len() as u32;
    let start = if step == 1 { 0 } else { prompt_len + step - 2 };
    if stage == 1 {
        let tokens = if step == 1 {
            transcript.request.prompt.clone()
        } else {
            vec![transcript.tokens[step as usize - 2]]
        };
        return Ok(WorkOrder::for_tokens(task, start, tokens));
    }
    let input = transcript
        .relayed
        .get(step as usize - 1)
        .map(|s| &s[stage as usize - 2])
        .ok_or(SchedulerError::MissingTranscript(stage))?;
    Ok(WorkOrder::for_states(task, stage, start, input))
}

/// Recomputes every stage's roles from the snapshot and checks VRF proofs.
pub fn audit_assignment(assignment: &RoleAssignment, snapshot: &GroupSnapshot, vrf_public: &[u8; 32]) -> Result<(), SchedulerError> {
    for (g, roles) in snapshot.groups.iter().zip(&assignment.stages) {
        let transcript = randomness::role_transcript(&assignment.task, g.stage, g.members.len() as u32);
        if !randomness::vrf_verify(vrf_public, &transcript, &roles.vrf) {
            return Err(SchedulerError::AuditFailed(format!("stage {} VRF proof invalid", g.stage)));
        }
        if roles_from(g.stage, &g.members, roles.vrf.clone(), assignment.k) != *roles {
            return Err(SchedulerError::AuditFailed(format!("stage {} roles do not follow the VRF", g.stage)));
        }
    }
    if snapshot.groups.len() != assignment.stages.len() {
        return Err(SchedulerError::AuditFailed("stage count differs from snapshot".into()));
    }
    Ok(())
}

/// Checks both signatures on every record and returns deliveries whose root
/// conflicts with the signed record for the same `(h, i, t)`.
pub fn audit_relay(transcript: &TaskTranscript, registry: &Registry, scheduler: &PublicKey) -> Result<Vec<(RelayRecord, Delivery)>, SchedulerError> {
    for r in &transcript.records {
        let key = registry.node(r.inferencer)?.public_key;
        if !r.verify(&key, scheduler) {
            return Err(SchedulerError::SignatureInvalid { stage: r.stage, step: r.step });
        }
    }
    let mut conflicts = Vec::new();
    for d in &transcript.deliveries {
        if !identity::verify(scheduler, &d.message(), &d.scheduler_sig) {
            return Err(SchedulerError::SignatureInvalid { stage: d.stage, step: d.step });
        }
        if let Some(r) = transcript.record(d.stage, d.step) {
            if r.root != d.root {
                conflicts.push((r.clone(), d.clone()));
            }
        }
    }
    Ok(conflicts)
}

#[derive(Serialize, Deserialize)]
struct TaskFile {
    request: TaskRequest,
    tokens: Vec<u32>,
    stop: StopReason,
    stop_overridden: bool,
    cost: CostMeter,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum RelayLine {
    Record(RelayRecord),
    Delivery(Delivery),
}

/// Persists `assignment.json`, `task.json`, `relay.log` and one trace file per
/// stage under `states/`.
pub fn write_transcript(dir: &Path, t: &TaskTranscript) -> Result<(), SchedulerError> {
    fs::create_dir_all(dir.join("states"))?;
    fs::write(dir.join("assignment.json"), serde_json::to_string_pretty(&t.assignment)?)?;
    let task = TaskFile {
        request: t.request.clone(),
        tokens: t.tokens.clone(),
        stop: t.stop,
        stop_overridden: t.stop_overridden,
        cost: t.cost.clone(),
    };
    fs::write(dir.join("task.json"), serde_json::to_string_pretty(&task)?)?;
    let mut log = String::new();
    for r in &t.records {
        log.push_str(&serde_json::to_string(&RelayLine::Record(r.clone()))?);
        log.push('\n');
    }
    for d in &t.deliveries {
        log.push_str(&serde_json::to_string(&RelayLine::Delivery(d.clone()))?);
        log.push('\n');
    }
    fs::write(dir.join("relay.log"), log)?;
    for stage in 1..=t.stages() {
        let signed: Vec<HiddenState> = t.states.iter().map(|s| s[stage as usize - 1].clone()).collect();
        commitments::write_trace_file(&dir.join("states").join(format!("stage-{stage}.trace")), &signed)?;
        let relayed: Vec<HiddenState> = t.relayed.iter().map(|s| s[stage as usize - 1].clone()).collect();
        if relayed != signed {
            commitments::write_trace_file(&dir.join("states").join(format!("stage-{stage}.relayed.trace")), &relayed)?;
        }
    }
    Ok(())
}

pub fn read_transcript(dir: &Path) -> Result<TaskTranscript, SchedulerError> {
    let assignment: RoleAssignment = serde_json::from_str(&fs::read_to_string(dir.join("assignment.json"))?)?;
    let task: TaskFile = serde_json::from_str(&fs::read_to_string(dir.join("task.json"))?)?;
    let mut records = Vec::new();
    let mut deliveries = Vec::new();
    for line in fs::read_to_string(dir.join("relay.log"))?.lines().filter(|l| !l.is_empty()) {
        match serde_json::from_str(line)? {
            RelayLine::Record(r) => records.push(r),
            RelayLine::Delivery(d) => deliveries.push(d),
        }
    }
    let l = assignment.stages.len();
    let steps = task.tokens.len();
    let mut states = vec![Vec::with_capacity(l); steps];
    let mut relayed = vec![Vec::with_capacity(l); steps];
    for stage in 1..=l {
        let signed = commitments::read_trace_file(&dir.join("states").join(format!("stage-{stage}.trace")))?;
        let alt = dir.join("states").join(format!("stage-{stage}.relayed.trace"));
        let rel = if alt.exists() { commitments::read_trace_file(&alt)? } else { signed.clone() };
        if signed.len() != steps || rel.len() != steps {
            return Err(SchedulerError::MissingTranscript(stage as u32));
        }
        for (t, (s, r)) in signed.into_iter().zip(rel).enumerate() {
            states[t].push(s);
            relayed[t].push(r);
        }
    }
    Ok(TaskTranscript {
        request: task.request,
        assignment,
        records,
        deliveries,
        tokens: task.tokens,
        stop: task.stop,
        states,
        relayed,
        cost: task.cost,
        stop_overridden: task.stop_overridden,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::identity::{LayerSlice, NodeRegistration, RegistryConfig};
    use crate::pipeline::{verify_prefill, ModelConfig, PrefillInput};

    pub(crate) struct World {
        registry: Registry,
        keys: KeyRing,
        scheduler: Scheduler,
        model: Model,
    }

    fn world(group_size: usize) -> World {
        let cfg = ModelConfig::default();
        let mut registry = Registry::new(RegistryConfig {
            min_stake: 10,
            withdrawal_delay: 1,
            k_min: 6,
        });
        registry.declare_model("toy", cfg.total_layers());
        let mut keys = KeyRing::default();
        let mut n = 0;
        for stage in 0..cfg.segments {
            for _ in 0..group_size {
                let key = SigningKey::from_seed(1000 + n);
                let slice = LayerSlice::new(stage * 2 + 1, stage * 2 + 2).unwrap();
                let id = registry
                    .register(
                        NodeRegistration {
                            public_key: key.public(),
                            model: "toy".into(),
                            slice,
                            endpoint: String::new(),
                        },
                        10,
                    )
                    .unwrap();
                keys.insert(id, key);
                n += 1;
            }
        }
        let scheduler = Scheduler::new(5);
        registry.register_scheduler(scheduler.public_key(), 10).unwrap();
        World {
            registry,
            keys,
            scheduler,
            model: Model::new(cfg, pipeline::ArithmeticMode::FullPrecision).unwrap(),
        }
    }

    fn request() -> TaskRequest {
        TaskRequest {
            model: "toy".into(),
            prompt: vec![5, 6, 7, 8, 9, 10, 11, 12],
            max_tokens: 12,
            nonce: 1,
        }
    }

    fn run(w: &World, fault: RelayFault) -> Result<TaskTranscript, SchedulerError> {
        let snap = w.registry.group_snapshot("toy").unwrap();
        let a = w.scheduler.assign_roles(&request(), &snap, 6).unwrap();
        w.scheduler.run_inference(&request(), &a, &w.registry, &w.keys, &w.model, NoiseModel::honest(3), Attack::Identity, fault)
    }

    #[test]
    fn forced_assignment_and_determinism() {
        let w = world(7);
        let snap = w.registry.group_snapshot("toy").unwrap();
        let a = w.scheduler.assign_roles(&request(), &snap, 6).unwrap();
        for (roles, g) in a.stages.iter().zip(&snap.groups) {
            let mut all = roles.verifiers.clone();
            all.push(roles.inferencer);
            all.sort();
            assert_eq!(all, g.members);
        }
        assert_eq!(a, w.scheduler.assign_roles(&request(), &snap, 6).unwrap());
        audit_assignment(&a, &snap, &w.scheduler.vrf_public()).unwrap();
        assert!(matches!(
            w.scheduler.assign_roles(&request(), &snap, 7),
            Err(SchedulerError::GroupTooSmall { stage: 1, size: 7, needed: 8 })
        ));
    }

    #[test]
    fn tampered_vrf_proof_fails_audit() {
        let w = world(9);
        let snap = w.registry.group_snapshot("toy").unwrap();
        let a = w.scheduler.assign_roles(&request(), &snap, 6).unwrap();
        for byte in 0..32 {
            let mut bad = a.clone();
            bad.stages[2].vrf.proof[byte] ^= 0x80;
            assert!(audit_assignment(&bad, &snap, &w.scheduler.vrf_public()).is_err());
        }
    }

    #[test]
    fn honest_relay_is_fully_signed() {
        let w = world(7);
        let t = run(&w, RelayFault::None).unwrap();
        assert_eq!(t.records.len(), t.tokens.len() * 4);
        assert!(audit_relay(&t, &w.registry, &w.scheduler.public_key()).unwrap().is_empty());
        for step in 2..=t.final_step() {
            let order = inference_order(&t, 1, step).unwrap();
            let Payload::Tokens(tok) = order.payload else { panic!() };
            assert_eq!(tok, vec![t.tokens[step as usize - 2]]);
        }
    }

    #[test]
    fn wrong_root_signature_aborts() {
        let w = world(7);
        let e = run(&w, RelayFault::InferencerSignsWrongRoot { stage: 2, step: 3 }).unwrap_err();
        assert!(matches!(e, SchedulerError::SignatureInvalid { stage: 2, step: 3 }));
    }

    #[test]
    fn scheduler_tamper_is_attributable() {
        let w = world(7);
        let t = run(&w, RelayFault::SchedulerTampers { stage: 1, step: 2 }).unwrap();
        let conflicts = audit_relay(&t, &w.registry, &w.scheduler.public_key()).unwrap();
        assert_eq!(conflicts.len(), 1);
        assert_eq!((conflicts[0].0.stage, conflicts[0].0.step), (1, 2));
    }

    #[test]
    fn verification_orders_match_inference_orders() {
        let w = world(7);
        let mut req = request();
        req.max_tokens = 1;
        let snap = w.registry.group_snapshot("toy").unwrap();
        let a = w.scheduler.assign_roles(&req, &snap, 6).unwrap();
        let t = w.scheduler.run_inference(&req, &a, &w.registry, &w.keys, &w.model, NoiseModel::honest(3), Attack::Identity, RelayFault::None).unwrap();
        let orders = dispatch_verification(&t).unwrap();
        assert_eq!(orders.len(), 6 * 4);
        for (_, o) in &orders {
            assert_eq!(o.to_bytes(), inference_order(&t, o.stage, 1).unwrap().to_bytes());
        }
        assert!(matches!(orders[0].1.payload, Payload::Tokens(_)));
        assert!(matches!(orders[6].1.payload, Payload::States { .. }));
    }

    #[test]
    fn executing_a_verification_order_is_prefill() {
        let w = world(7);
        let t = run(&w, RelayFault::None).unwrap();
        let orders = dispatch_verification(&t).unwrap();
        let (_, order) = orders.iter().find(|(_, o)| o.stage == 3).unwrap();
        let noise = NoiseModel::honest(77);
        let mut session = SegmentSession::new(w.model.segment(3).unwrap(), noise);
        let via_order = execute_order(&w.model, &mut session, order, &mut CostMeter::new(4), Phase::VerifyPrefill).unwrap();
        let direct = verify_prefill(&w.model, 3, PrefillInput::States(&t.stage_inputs(3).unwrap()), t.task(), noise, &mut CostMeter::new(4)).unwrap();
        assert_eq!(via_order.values(), direct.values());
    }

    #[test]
    fn publish_waits_for_commitments() {
        let w = world(7);
        let t = run(&w, RelayFault::None).unwrap();
        let mut roots = vec![Some([1u8; 32]); 6];
        roots[4] = None;
        assert!(matches!(
            w.scheduler.publish_samples(&t, 2, &roots, false, 16),
            Err(SchedulerError::CommitPhaseOpen { missing: 1 })
        ));
        let p = w.scheduler.publish_samples(&t, 2, &roots, true, 16).unwrap();
        assert_eq!(p.indices.len(), 16);
        let last_row = t.final_state(2).unwrap().token_count() - 1;
        assert!(p.indices.iter().all(|&i| i as usize / 32 == last_row));
        for (v, pr) in p.values.iter().zip(&p.proofs) {
            assert_eq!(v.to_bits(), pr.leaf_value.to_bits());
            assert!(commitments::merkle_verify(&p.inferencer_root, pr));
        }
    }

    #[test]
    fn transcript_directory_round_trip() {
        let w = world(7);
        let t = run(&w, RelayFault::SchedulerTampers { stage: 2, step: 1 }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_transcript(dir.path(), &t).unwrap();
        assert!(dir.path().join("relay.log").exists());
        let back = read_transcript(dir.path()).unwrap();
        assert_eq!(back, t);
    }
}
