//! Contract safety under arbitrary call orders: balances stay conserved,
//! phases only move forward, each round settles at most once, and every
//! recorded log replays.

mod common;

use proptest::prelude::*;
use vinfer::contract::{self, Ballot, Contract, ReplayStatus, RoundPhase};
use vinfer::identity::{self, Account};
use vinfer::scheduler::{relay_message, SamplingPackage};

use common::{shifted, Bench};

#[derive(Debug, Clone)]
enum Op {
    Commit(usize),
    Advance,
    Post,
    Reveal(usize),
    Adjudicate,
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        3 => (0..6usize).prop_map(Op::Commit),
        2 => Just(Op::Advance),
        1 => Just(Op::Post),
        3 => (0..6usize).prop_map(Op::Reveal),
        1 => Just(Op::Adjudicate),
    ]
}

fn rank(p: RoundPhase) -> u8 {
    match p {
        RoundPhase::Commit => 0,
        RoundPhase::Sampled => 1,
        RoundPhase::Reveal => 2,
        RoundPhase::Adjudicated => 3,
        RoundPhase::Disputed | RoundPhase::Final => 4,
    }
}

fn package(bench: &Bench, c: &Contract, round: u64) -> Option<SamplingPackage> {
    let r = c.round(round).ok()?;
    let key = bench.world.keys.get(r.inferencer).ok()?;
    let root = vinfer::commitments::MerkleTree::from_state(&bench.state).ok()?.root();
    let sig = identity::sign(key, Account::Node(r.inferencer), &relay_message(&bench.task, r.stage, r.final_step, &root));
    bench
        .world
        .scheduler
        .sampling_package(&bench.task, r.stage, r.final_step, &r.posted_roots(), &bench.state, r.inferencer, sig, c.config().sample_size)
        .ok()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn arbitrary_call_orders_stay_safe(
        seed in 0u64..4,
        honest in proptest::collection::vec(any::<bool>(), 6),
        verdicts in proptest::collection::vec(any::<bool>(), 6),
        ops in proptest::collection::vec(op(), 1..60),
    ) {
        let bench = Bench::new(seed);
        let mut c = Contract::with_log(bench.world.config.clone(), bench.world.registry.clone());
        let round = c.open_round(bench.task, &bench.roles, false, bench.state.token_index, &[]).unwrap();
        let ballots: Vec<Ballot> = (0..6)
            .map(|i| {
                let values = if honest[i] { bench.state.values().to_vec() } else { shifted(bench.state.values(), 0.5) };
                Ballot::new(&values, verdicts[i], [i as u8 + 1; 32], None).unwrap()
            })
            .collect();
        let mut posted: Option<SamplingPackage> = None;
        let mut settled = 0;
        let mut last = rank(c.round(round).unwrap().phase);

        for op in ops {
            let before = c.round(round).unwrap().clone();
            match op {
                Op::Commit(i) => {
                    let b = &ballots[i];
                    let ok = c.submit_commitment(round, bench.roles.verifiers[i], b.state_root(), b.leaf_count(), b.verdict_commitment()).is_ok();
                    let fresh = before.phase == RoundPhase::Commit && !before.commitments.contains_key(&bench.roles.verifiers[i]);
                    prop_assert_eq!(ok, fresh);
                }
                Op::Advance => c.advance_round(),
                Op::Post => {
                    if let Some(p) = package(&bench, &c, round) {
                        let ok = c.post_sampling_package(round, &p).is_ok();
                        prop_assert!(!ok || before.phase == RoundPhase::Sampled);
                        if ok {
                            posted = Some(p);
                        }
                    }
                }
                Op::Reveal(i) => {
                    let v = bench.roles.verifiers[i];
                    let b = &ballots[i];
                    let indices = posted.as_ref().map(|p| p.indices.clone()).unwrap_or_default();
                    let openings = if indices.is_empty() { Vec::new() } else { b.openings(&indices) };
                    let ok = c.reveal(round, v, b.verdict, &b.salt, &openings, None).is_ok();
                    if ok {
                        prop_assert!(before.commitments.contains_key(&v));
                        prop_assert!(!before.reveals.contains_key(&v));
                    }
                }
                Op::Adjudicate => {
                    if c.adjudicate(round).is_ok() {
                        settled += 1;
                    }
                }
            }
            prop_assert!(c.registry().ledger().is_conserved());
            let now = rank(c.round(round).unwrap().phase);
            prop_assert!(now >= last, "phase moved back from {} to {}", last, now);
            last = now;
        }
        prop_assert!(settled <= 1);
        prop_assert_eq!(settled == 1, c.round(round).unwrap().outcome.is_some());

        let log = c.log_jsonl().unwrap();
        let entries = c.log().unwrap().len();
        prop_assert_eq!(contract::replay(&log).unwrap(), ReplayStatus::Verified { entries });
    }
}
