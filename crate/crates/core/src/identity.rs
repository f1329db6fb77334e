//! Node registry, stake ledger and the signature primitive behind the
//! dual-signature relay.
//!
//! The registry is event-sourced: every mutation is validated, turned into a
//! [`RegistryEvent`], and applied through [`Registry::apply`]. Replaying the
//! event log reconstructs identical state.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::digest::{hex32, tag, tagged_hash, Digest};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IdentityError {
    #[error("stake {stake} below minimum {minimum}")]
    InsufficientStake { stake: u64, minimum: u64 },
    #[error("public key already registered")]
    DuplicateKey,
    #[error("node {0} is not active")]
    NotActive(NodeId),
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("stake of node {node} locked until round {until}")]
    WithdrawalLocked { node: NodeId, until: u64 },
    #[error("invalid layer slice [{lo}, {hi}]")]
    InvalidSlice { lo: u32, hi: u32 },
    #[error("unknown model {0}")]
    UnknownModel(String),
    #[error("slices of model {model} do not tile [1, {layers}]: {detail}")]
    UncoveredSlice { model: String, layers: u32, detail: String },
    #[error("group for slice {slice} has {size} active nodes, needs {needed}")]
    InsufficientGroupSize { slice: LayerSlice, size: usize, needed: usize },
    #[error("{account} has {available}, needs {needed}")]
    InsufficientFunds { account: Account, available: u64, needed: u64 },
    #[error("scheduler already registered")]
    SchedulerExists,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

/// Ledger account. Serialized as a string so it can key JSON maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Account {
    Node(NodeId),
    Scheduler,
    Client,
}

impl fmt::Display for Account {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Account::Node(n) => write!(f, "node:{}", n.0),
            Account::Scheduler => f.write_str("scheduler"),
            Account::Client => f.write_str("client"),
        }
    }
}

impl FromStr for Account {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "scheduler" => Ok(Account::Scheduler),
            "client" => Ok(Account::Client),
            _ => s
                .strip_prefix("node:")
                .and_then(|n| n.parse().ok())
                .map(|n| Account::Node(NodeId(n)))
                .ok_or_else(|| format!("bad account {s:?}")),
        }
    }
}

impl Serialize for Account {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Account {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PublicKey(#[serde(with = "hex32")] pub [u8; 32]);

#[derive(Clone)]
pub struct SigningKey {
    secret: [u8; 32],
    public: PublicKey,
}

impl fmt::Debug for SigningKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SigningKey").field("public", &self.public).finish_non_exhaustive()
    }
}

impl SigningKey {
    pub fn from_secret(secret: [u8; 32]) -> Self {
        let public = PublicKey(tagged_hash(tag::PUBLIC_KEY, &[b"sig", &secret]));
        SigningKey { secret, public }
    }

    pub fn from_seed(seed: u64) -> Self {
        Self::from_secret(tagged_hash(tag::SEED, &[b"sig-key", &seed.to_le_bytes()]))
    }

    pub fn public(&self) -> PublicKey {
        self.public
    }

    pub fn secret(&self) -> &[u8; 32] {
        &self.secret
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Signature {
    pub signer: Account,
    #[serde(with = "hex32")]
    pub message: Digest,
    #[serde(with = "hex32")]
    pub bytes: Digest,
}

pub fn message_digest(message: &[u8]) -> Digest {
    tagged_hash(tag::MESSAGE, &[message])
}

fn signature_bytes(public: &PublicKey, message: &Digest) -> Digest {
    tagged_hash(tag::SIGNATURE, &[&public.0, message])
}

/// Deterministic keyed-hash signature stand-in. Within the simulator only the
/// holder of a [`SigningKey`] calls this for its own key.
pub fn sign(key: &SigningKey, signer: Account, message: &[u8]) -> Signature {
    let digest = message_digest(message);
    Signature {
        signer,
        message: digest,
        bytes: signature_bytes(&key.public, &digest),
    }
}

pub fn verify(public: &PublicKey, message: &[u8], sig: &Signature) -> bool {
    let digest = message_digest(message);
    sig.message == digest && sig.bytes == signature_bytes(public, &digest)
}

/// Inclusive contiguous layer range hosted by a node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LayerSlice {
    pub lo: u32,
    pub hi: u32,
}

impl LayerSlice {
    pub fn new(lo: u32, hi: u32) -> Result<Self, IdentityError> {
        if lo == 0 || hi < lo {
            return Err(IdentityError::InvalidSlice { lo, hi });
        }
        Ok(LayerSlice { lo, hi })
    }

    pub fn overlaps(&self, other: &LayerSlice) -> bool {
        self.lo <= other.hi && other.lo <= self.hi
    }
}

impl fmt::Display for LayerSlice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}]", self.lo, self.hi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum NodeStatus {
    Active,
    Withdrawing { until_round: u64 },
    Exited,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub id: NodeId,
    pub public_key: PublicKey,
    pub model: String,
    pub slice: LayerSlice,
    pub endpoint: String,
    pub status: NodeStatus,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeRegistration {
    pub public_key: PublicKey,
    pub model: String,
    pub slice: LayerSlice,
    pub endpoint: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegistryConfig {
    pub min_stake: u64,
    /// Rounds between deregistration and stake release.
    pub withdrawal_delay: u64,
    /// Minimum verifier committee size a group must support.
    pub k_min: usize,
}

impl Default for RegistryConfig {
    fn default() -> Self {
        RegistryConfig {
            min_stake: 100_000,
            withdrawal_delay: 10,
            k_min: 6,
        }
    }
}

/// Token balances. `free + locked + treasury == minted` at all times.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ledger {
    pub free: BTreeMap<Account, u64>,
    pub locked: BTreeMap<Account, u64>,
    pub treasury: u64,
    pub minted: u64,
}

impl Ledger {
    pub fn free_of(&self, a: Account) -> u64 {
        self.free.get(&a).copied().unwrap_or(0)
    }

    pub fn locked_of(&self, a: Account) -> u64 {
        self.locked.get(&a).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.free.values().sum::<u64>() + self.locked.values().sum::<u64>() + self.treasury
    }

    pub fn is_conserved(&self) -> bool {
        self.total() == self.minted
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RegistryEventKind {
    DeclareModel { model: String, layers: u32 },
    Deposit { account: Account, amount: u64 },
    FundTreasury { amount: u64 },
    Register { node_id: NodeId, registration: NodeRegistration, stake: u64 },
    RegisterScheduler { public_key: PublicKey, stake: u64 },
    Deregister { node_id: NodeId, until_round: u64 },
    Withdraw { node_id: NodeId, amount: u64 },
    /// Locked stake moved to the treasury.
    Slash { account: Account, amount: u64 },
    /// Treasury paid out to a free balance.
    Reward { account: Account, amount: u64 },
    /// Free balance moved into the treasury (fees, escrow).
    Collect { account: Account, amount: u64 },
    AdvanceRound,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegistryEvent {
    pub round: u64,
    #[serde(flatten)]
    pub kind: RegistryEventKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Group {
    pub stage: u32,
    pub slice: LayerSlice,
    /// Active members in registration order.
    pub members: Vec<NodeId>,
}

/// Ordered groups `⟨G_{m,1}, …, G_{m,L}⟩` for one model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupSnapshot {
    pub model: String,
    pub layers: u32,
    pub groups: Vec<Group>,
}

impl GroupSnapshot {
    pub fn group(&self, stage: u32) -> Option<&Group> {
        self.groups.get(stage.checked_sub(1)? as usize)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Registry {
    config: RegistryConfig,
    round: u64,
    nodes: Vec<NodeRecord>,
    models: BTreeMap<String, u32>,
    scheduler_key: Option<PublicKey>,
    ledger: Ledger,
    #[serde(skip)]
    events: Vec<RegistryEvent>,
}

impl Registry {
    pub fn new(config: RegistryConfig) -> Self {
        Registry {
            config,
            round: 0,
            nodes: Vec::new(),
            models: BTreeMap::new(),
            scheduler_key: None,
            ledger: Ledger::default(),
            events: Vec::new(),
        }
    }

    pub fn config(&self) -> &RegistryConfig {
        &self.config
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn ledger(&self) -> &Ledger {
        &self.ledger
    }

    pub fn events(&self) -> &[RegistryEvent] {
        &self.events
    }

    pub fn nodes(&self) -> &[NodeRecord] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> Result<&NodeRecord, IdentityError> {
        self.nodes.get(id.0 as usize).ok_or(IdentityError::UnknownNode(id))
    }

    pub fn scheduler_key(&self) -> Option<PublicKey> {
        self.scheduler_key
    }

    pub fn stake_of(&self, id: NodeId) -> u64 {
        self.ledger.locked_of(Account::Node(id))
    }

    pub fn public_key_of(&self, account: Account) -> Option<PublicKey> {
        match account {
            Account::Node(id) => self.node(id).ok().map(|n| n.public_key),
            Account::Scheduler => self.scheduler_key,
            Account::Client => None,
        }
    }

    /// Applies a validated event. Also the replay entry point.
    pub fn apply(&mut self, event: RegistryEvent) {
        use RegistryEventKind::*;
        match &event.kind {
            DeclareModel { model, layers } => {
                self.models.insert(model.clone(), *layers);
            }
            Deposit { account, amount } => {
                *self.ledger.free.entry(*account).or_default() += amount;
                self.ledger.minted += amount;
            }
            FundTreasury { amount } => {
                self.ledger.treasury += amount;
                self.ledger.minted += amount;
            }
            Register {
                node_id,
                registration,
                stake,
            } => {
                debug_assert_eq!(node_id.0 as usize, self.nodes.len());
                self.nodes.push(NodeRecord {
                    id: *node_id,
                    public_key: registration.public_key,
                    model: registration.model.clone(),
                    slice: registration.slice,
                    endpoint: registration.endpoint.clone(),
                    status: NodeStatus::Active,
                });
                *self.ledger.locked.entry(Account::Node(*node_id)).or_default() += stake;
                self.ledger.minted += stake;
            }
            RegisterScheduler { public_key, stake } => {
                self.scheduler_key = Some(*public_key);
                *self.ledger.locked.entry(Account::Scheduler).or_default() += stake;
                self.ledger.minted += stake;
            }
            Deregister { node_id, until_round } => {
                self.nodes[node_id.0 as usize].status = NodeStatus::Withdrawing {
                    until_round: *until_round,
                };
            }
            Withdraw { node_id, amount } => {
                let acct = Account::Node(*node_id);
                self.ledger.locked.insert(acct, 0);
                *self.ledger.free.entry(acct).or_default() += amount;
                self.nodes[node_id.0 as usize].status = NodeStatus::Exited;
            }
            Slash { account, amount } => {
                *self.ledger.locked.entry(*account).or_default() -= amount;
                self.ledger.treasury += amount;
                if let Account::Node(id) = account {
                    let node = &mut self.nodes[id.0 as usize];
                    if node.status == NodeStatus::Active
                        && self.ledger.locked_of(*account) < self.config.min_stake
                    {
                        node.status = NodeStatus::Withdrawing {
                            until_round: event.round + self.config.withdrawal_delay,
                        };
                    }
                }
            }
            Reward { account, amount } => {
                self.ledger.treasury -= amount;
                *self.ledger.free.entry(*account).or_default() += amount;
            }
            Collect { account, amount } => {
                *self.ledger.free.entry(*account).or_default() -= amount;
                self.ledger.treasury += amount;
            }
            AdvanceRound => self.round += 1,
        }
        self.events.push(event);
    }

    fn emit(&mut self, kind: RegistryEventKind) {
        let e = RegistryEvent {
            round: self.round,
            kind,
        };
        self.apply(e);
    }

    pub fn replay(config: RegistryConfig, events: impl IntoIterator<Item = RegistryEvent>) -> Self {
        let mut r = Registry::new(config);
        for e in events {
            r.apply(e);
        }
        r
    }

    pub fn declare_model(&mut self, model: &str, layers: u32) {
        self.emit(RegistryEventKind::DeclareModel {
            model: model.to_string(),
            layers,
        });
    }

    pub fn deposit(&mut self, account: Account, amount: u64) {
        self.emit(RegistryEventKind::Deposit { account, amount });
    }

    pub fn fund_treasury(&mut self, amount: u64) {
        self.emit(RegistryEventKind::FundTreasury { amount });
    }

    pub fn register(&mut self, registration: NodeRegistration, stake: u64) -> Result<NodeId, IdentityError> {
        if stake < self.config.min_stake {
            return Err(IdentityError::InsufficientStake {
                stake,
                minimum: self.config.min_stake,
            });
        }
        let s = registration.slice;
        LayerSlice::new(s.lo, s.hi)?;
        let key = registration.public_key;
        if self.nodes.iter().any(|n| n.public_key == key) || self.scheduler_key == Some(key) {
            return Err(IdentityError::DuplicateKey);
        }
        let node_id = NodeId(self.nodes.len() as u32);
        self.emit(RegistryEventKind::Register {
            node_id,
            registration,
            stake,
        });
        Ok(node_id)
    }

    pub fn register_scheduler(&mut self, public_key: PublicKey, stake: u64) -> Result<(), IdentityError> {
        if self.scheduler_key.is_some() {
            return Err(IdentityError::SchedulerExists);
        }
        if self.nodes.iter().any(|n| n.public_key == public_key) {
            return Err(IdentityError::DuplicateKey);
        }
        self.emit(RegistryEventKind::RegisterScheduler { public_key, stake });
        Ok(())
    }

    /// Starts the withdrawal waiting period and returns the release round.
    pub fn deregister(&mut self, id: NodeId) -> Result<u64, IdentityError> {
        if self.node(id)?.status != NodeStatus::Active {
            return Err(IdentityError::NotActive(id));
        }
        let until_round = self.round + self.config.withdrawal_delay;
        self.emit(RegistryEventKind::Deregister { node_id: id, until_round });
        Ok(until_round)
    }

    /// Releases whatever stake remains after penalties, once the period ends.
    pub fn withdraw(&mut self, id: NodeId) -> Result<u64, IdentityError> {
        match self.node(id)?.status {
            NodeStatus::Withdrawing { until_round } if self.round >= until_round => {
                let amount = self.stake_of(id);
                self.emit(RegistryEventKind::Withdraw { node_id: id, amount });
                Ok(amount)
            }
            NodeStatus::Withdrawing { until_round } => Err(IdentityError::WithdrawalLocked {
                node: id,
                until: until_round,
            }),
            _ => Err(IdentityError::NotActive(id)),
        }
    }

    pub fn advance_round(&mut self) {
        self.emit(RegistryEventKind::AdvanceRound);
    }

    /// Moves up to `amount` of locked stake to the treasury; returns the
    /// amount actually taken.
    pub fn slash(&mut self, account: Account, amount: u64) -> u64 {
        let taken = amount.min(self.ledger.locked_of(account));
        if taken > 0 {
            self.emit(RegistryEventKind::Slash { account, amount: taken });
        }
        taken
    }

    pub fn reward(&mut self, account: Account, amount: u64) -> Result<(), IdentityError> {
        if self.ledger.treasury < amount {
            return Err(IdentityError::InsufficientFunds {
                account,
                available: self.ledger.treasury,
                needed: amount,
            });
        }
        if amount > 0 {
            self.emit(RegistryEventKind::Reward { account, amount });
        }
        Ok(())
    }

    pub fn collect(&mut self, account: Account, amount: u64) -> Result<(), IdentityError> {
        let available = self.ledger.free_of(account);
        if available < amount {
            return Err(IdentityError::InsufficientFunds {
                account,
                available,
                needed: amount,
            });
        }
        if amount > 0 {
            self.emit(RegistryEventKind::Collect { account, amount });
        }
        Ok(())
    }

    /// Groups of active nodes per distinct slice of `model`, checked to tile
    /// `[1, L]` exactly and to hold at least `1 + k_min` members each.
    pub fn group_snapshot(&self, model: &str) -> Result<GroupSnapshot, IdentityError> {
        let layers = *self
            .models
            .get(model)
            .ok_or_else(|| IdentityError::UnknownModel(model.to_string()))?;
        let mut by_slice: BTreeMap<LayerSlice, Vec<NodeId>> = BTreeMap::new();
        for n in &self.nodes {
            if n.model == model && n.status == NodeStatus::Active {
                by_slice.entry(n.slice).or_default().push(n.id);
            }
        }
        let uncovered = |detail: String| IdentityError::UncoveredSlice {
            model: model.to_string(),
            layers,
            detail,
        };
        let mut next = 1u32;
        let mut groups = Vec::with_capacity(by_slice.len());
        for (slice, members) in by_slice {
            if slice.lo < next {
                return Err(uncovered(format!("slice {slice} overlaps layers below {next}")));
            }
            if slice.lo > next {
                return Err(uncovered(format!("layers [{next}, {}] unserved", slice.lo - 1)));
            }
            let needed = 1 + self.config.k_min;
            if members.len() < needed {
                return Err(IdentityError::InsufficientGroupSize {
                    slice,
                    size: members.len(),
                    needed,
                });
            }
            groups.push(Group {
                stage: groups.len() as u32 + 1,
                slice,
                members,
            });
            next = slice.hi + 1;
        }
        if next != layers + 1 {
            return Err(uncovered(format!("layers [{next}, {layers}] unserved")));
        }
        Ok(GroupSnapshot {
            model: model.to_string(),
            layers,
            groups,
        })
    }
}

/// Writes the event log as line-delimited JSON.
pub fn events_to_jsonl(events: &[RegistryEvent]) -> String {
    let mut out = String::new();
    for e in events {
        out.push_str(&serde_json::to_string(e).expect("registry events serialize"));
        out.push('\n');
    }
    out
}

pub fn events_from_jsonl(s: &str) -> Result<Vec<RegistryEvent>, serde_json::Error> {
    s.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect()
}
