//! Shared fixtures for the integration tests.

#![allow(dead_code)]

use std::path::PathBuf;
use std::process::{Command, Output};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vinfer::commitments::HiddenState;
use vinfer::contract::{self, Ballot, Contract, DriveError, Outcome, Participant, RoundSetup};
use vinfer::digest::Digest;
use vinfer::experiments::{ProtocolSetup, ProtocolWorld, Strategy, MODEL_NAME};
use vinfer::scheduler::{StageRoles, TaskRequest};

/// A registered world plus one stage's roles and a final-step state for the
/// inferencer to be judged on.
pub struct Bench {
    pub world: ProtocolWorld,
    pub task: Digest,
    pub roles: StageRoles,
    pub state: HiddenState,
}

pub const FINAL_STEP: u32 = 5;

impl Bench {
    pub fn new(seed: u64) -> Bench {
        let world = ProtocolWorld::new(&ProtocolSetup::new(Strategy::Honest), seed).unwrap();
        let request = TaskRequest {
            model: MODEL_NAME.into(),
            prompt: vec![3, 1, 4, 1, 5],
            max_tokens: FINAL_STEP,
            nonce: seed,
        };
        let snapshot = world.registry.group_snapshot(MODEL_NAME).unwrap();
        let roles = world.scheduler.assign_roles(&request, &snapshot, 6).unwrap().stages.remove(0);
        let task = request.task_hash();
        let dim = world.config.hidden_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = (0..dim).map(|_| rng.gen_range(-2.0f32..2.0)).collect();
        let state = HiddenState::new(task, 2, FINAL_STEP, (1, dim as u32), values).unwrap();
        Bench { world, task, roles, state }
    }

    pub fn contract(&self) -> Contract {
        Contract::new(self.world.config.clone(), self.world.registry.clone())
    }

    pub fn participant(&self, position: usize, values: &[f32], verdict: bool) -> Participant {
        Participant {
            verifier: self.roles.verifiers[position],
            ballot: Some(Ballot::new(values, verdict, [position as u8 + 1; 32], None).unwrap()),
            reveals: true,
        }
    }

    pub fn drive(&self, contract: &mut Contract, participants: &[Participant]) -> Result<(u64, Outcome), DriveError> {
        let key = self.world.keys.get(self.roles.inferencer).unwrap().clone();
        let setup = RoundSetup {
            task: self.task,
            roles: &self.roles,
            tail: false,
            reported_tokens: &[],
            inferencer_state: &self.state,
            inferencer_key: &key,
        };
        contract::drive_round(contract, &self.world.scheduler, setup, participants)
    }
}

pub fn shifted(values: &[f32], by: f32) -> Vec<f32> {
    values.iter().map(|v| v + by).collect()
}

pub fn bin() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_vinfer"))
}

pub fn repo_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn scenario(name: &str) -> PathBuf {
    repo_root().join("scenarios").join(format!("{name}.json"))
}

pub fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("binary runs")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}
