//! Simulator for decentralized LLM inference verified by a commit–sample–verify
//! protocol: per-layer-slice committees re-run prefill over relayed hidden
//! states, commit to bit-level comparison verdicts, and reveal against
//! VRF-sampled Merkle openings.

pub mod bitstats;
pub mod cli;
pub mod clustering;
pub mod contract;
pub mod commitments;
pub mod digest;
pub mod experiments;
pub mod identity;
pub mod pipeline;
pub mod randomness;
pub mod scheduler;
