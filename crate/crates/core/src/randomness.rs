//! Simulated VRF, a counter-mode hash stream keyed by VRF output, and the
//! Fisher–Yates permutation and index sampler driven by it.
//!
//! The VRF is a keyed-hash stand-in: randomness is `H(secret ‖ transcript)` and
//! the proof is a deterministic tag over `(public, transcript, randomness)`.
//! It is deterministic and publicly checkable inside the simulator; it is not
//! an elliptic-curve VRF.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::{hex32, hex_vec, tag, tagged_hash, Digest};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RandomnessError {
    #[error("cannot sample {requested} distinct indices from {available}")]
    SampleTooLarge { requested: usize, available: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VrfKeypair {
    secret: [u8; 32],
    public: [u8; 32],
}

impl VrfKeypair {
    pub fn from_secret(secret: [u8; 32]) -> Self {
        let public = tagged_hash(tag::PUBLIC_KEY, &[b"vrf", &secret]);
        VrfKeypair { secret, public }
    }

    /// Convenience constructor for simulations.
    pub fn from_seed(seed: u64) -> Self {
        Self::from_secret(tagged_hash(tag::SEED, &[b"vrf-key", &seed.to_le_bytes()]))
    }

    pub fn public(&self) -> [u8; 32] {
        self.public
    }

    pub fn eval(&self, transcript: &[u8]) -> VrfOutput {
        vrf_eval(&self.secret, transcript)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VrfOutput {
    #[serde(with = "hex32")]
    pub randomness: Digest,
    #[serde(with = "hex32")]
    pub proof: Digest,
    #[serde(with = "hex_vec")]
    pub transcript: Vec<u8>,
}

pub fn vrf_eval(secret: &[u8; 32], transcript: &[u8]) -> VrfOutput {
    let public = tagged_hash(tag::PUBLIC_KEY, &[b"vrf", secret]);
    let randomness = tagged_hash(tag::VRF_OUTPUT, &[secret, transcript]);
    let proof = tagged_hash(tag::VRF_PROOF, &[&public, transcript, &randomness]);
    VrfOutput {
        randomness,
        proof,
        transcript: transcript.to_vec(),
    }
}

/// Checks `output` was produced under `public` for exactly `transcript`.
pub fn vrf_verify(public: &[u8; 32], transcript: &[u8], output: &VrfOutput) -> bool {
    !transcript.is_empty()
        && output.transcript == transcript
        && tagged_hash(tag::VRF_PROOF, &[public, transcript, &output.randomness]) == output.proof
}

/// Deterministic byte stream: `block_k = H(key ‖ k)` with
/// `key = H(kdf ‖ randomness ‖ info)`.
pub struct HashStream {
    key: Digest,
    counter: u64,
    block: [u8; 32],
    offset: usize,
}

impl HashStream {
    pub fn new(randomness: &[u8; 32], info: &[u8]) -> Self {
        HashStream {
            key: tagged_hash(tag::KDF, &[randomness, info]),
            counter: 0,
            block: [0; 32],
            offset: 32,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        if self.offset == 32 {
            self.block = tagged_hash(tag::STREAM, &[&self.key, &self.counter.to_le_bytes()]);
            self.counter += 1;
            self.offset = 0;
        }
        let v = u64::from_le_bytes(self.block[self.offset..self.offset + 8].try_into().expect("8 bytes"));
        self.offset += 8;
        v
    }

    /// Uniform in `[0, n)` by rejection sampling; `n` must be non-zero.
    pub fn next_below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "empty range");
        let limit = u64::MAX - u64::MAX % n;
        loop {
            let x = self.next_u64();
            if x < limit {
                return x % n;
            }
        }
    }
}

/// Fisher–Yates permutation of `0..n` keyed by `randomness`.
pub fn permutation(randomness: &[u8; 32], n: usize) -> Vec<usize> {
    let mut stream = HashStream::new(randomness, b"permutation");
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = stream.next_below(i as u64 + 1) as usize;
        perm.swap(i, j);
    }
    perm
}

/// `q` distinct indices in `[0, n)`, in draw order, via the first `q` steps
/// of a Fisher–Yates shuffle over a virtual array.
pub fn sample_indices(randomness: &[u8; 32], n: usize, q: usize) -> Result<Vec<usize>, RandomnessError> {
    if q > n {
        return Err(RandomnessError::SampleTooLarge {
            requested: q,
            available: n,
        });
    }
    let mut stream = HashStream::new(randomness, b"sample");
    let mut swapped: HashMap<usize, usize> = HashMap::with_capacity(2 * q);
    let mut out = Vec::with_capacity(q);
    for i in 0..q {
        let j = i + stream.next_below((n - i) as u64) as usize;
        let at_j = *swapped.get(&j).unwrap_or(&j);
        let at_i = *swapped.get(&i).unwrap_or(&i);
        swapped.insert(j, at_i);
        out.push(at_j);
    }
    Ok(out)
}

/// Role-assignment transcript `⟨h, i, L_i⟩`.
pub fn role_transcript(task: &Digest, stage: u32, group_size: u32) -> Vec<u8> {
    let mut t = Vec::with_capacity(4 + 32 + 8);
    t.extend_from_slice(b"role");
    t.extend_from_slice(task);
    t.extend_from_slice(&stage.to_le_bytes());
    t.extend_from_slice(&group_size.to_le_bytes());
    t
}

/// Reconsideration committee transcript, bound to the new committee size.
pub fn reconsideration_transcript(task: &Digest, stage: u32, group_size: u32, committee: u32) -> Vec<u8> {
    let mut t = Vec::with_capacity(8 + 32 + 12);
    t.extend_from_slice(b"reconsider");
    t.extend_from_slice(task);
    t.extend_from_slice(&stage.to_le_bytes());
    t.extend_from_slice(&group_size.to_le_bytes());
    t.extend_from_slice(&committee.to_le_bytes());
    t
}

/// Sampling transcript `⟨h, i, T, {γ_j}⟩`: roots length-prefixed and
/// concatenated in committee order.
pub fn sampling_transcript(task: &Digest, stage: u32, final_step: u32, roots: &[Digest]) -> Vec<u8> {
    let mut t = Vec::with_capacity(8 + 32 + 12 + 32 * roots.len());
    t.extend_from_slice(b"sample");
    t.extend_from_slice(task);
    t.extend_from_slice(&stage.to_le_bytes());
    t.extend_from_slice(&final_step.to_le_bytes());
    t.extend_from_slice(&(roots.len() as u32).to_le_bytes());
    for r in roots {
        t.extend_from_slice(r);
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seed(i: u64) -> [u8; 32] {
        tagged_hash(tag::SEED, &[&i.to_le_bytes()])
    }

    #[test]
    fn vrf_is_deterministic_and_verifiable() {
        let kp = VrfKeypair::from_seed(1);
        let t1 = role_transcript(&[3; 32], 1, 7);
        let t2 = role_transcript(&[3; 32], 2, 7);
        let a = kp.eval(&t1);
        assert_eq!(a, kp.eval(&t1));
        assert_ne!(a.randomness, kp.eval(&t2).randomness);
        assert!(vrf_verify(&kp.public(), &t1, &a));
        assert!(!vrf_verify(&VrfKeypair::from_seed(2).public(), &t1, &a));
        assert!(!vrf_verify(&kp.public(), &t2, &a));
    }

    #[test]
    fn every_randomness_bit_flip_fails() {
        let kp = VrfKeypair::from_seed(5);
        let t = b"transcript".to_vec();
        let out = kp.eval(&t);
        for bit in 0..256 {
            let mut bad = out.clone();
            bad.randomness[bit / 8] ^= 1 << (bit % 8);
            assert!(!vrf_verify(&kp.public(), &t, &bad));
            let mut bad = out.clone();
            bad.proof[bit / 8] ^= 1 << (bit % 8);
            assert!(!vrf_verify(&kp.public(), &t, &bad));
        }
    }

    #[test]
    fn permutation_basics() {
        assert_eq!(permutation(&seed(0), 1), vec![0]);
        assert_eq!(permutation(&seed(3), 6), permutation(&seed(3), 6));
        let mut p = permutation(&seed(4), 50);
        p.sort_unstable();
        assert_eq!(p, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn permutation_uniform_over_s4() {
        // Chi-square with 23 degrees of freedom; 49.73 is the p = 0.001 cutoff.
        let trials = 100_000u64;
        let mut counts: HashMap<Vec<usize>, u64> = HashMap::new();
        for i in 0..trials {
            *counts.entry(permutation(&seed(i), 4)).or_default() += 1;
        }
        assert_eq!(counts.len(), 24);
        let expected = trials as f64 / 24.0;
        let chi2: f64 = counts
            .values()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        assert!(chi2 < 49.73, "chi2 = {chi2}");
    }

    #[test]
    fn sample_edge_cases() {
        let mut all = sample_indices(&seed(1), 10, 10).unwrap();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert!(sample_indices(&seed(1), 10, 0).unwrap().is_empty());
        assert_eq!(
            sample_indices(&seed(1), 3, 4),
            Err(RandomnessError::SampleTooLarge {
                requested: 4,
                available: 3
            })
        );
        let s = sample_indices(&seed(9), 1024, 16).unwrap();
        let mut d = s.clone();
        d.sort_unstable();
        d.dedup();
        assert_eq!(d.len(), 16);
        assert_eq!(s, sample_indices(&seed(9), 1024, 16).unwrap());
    }

    #[test]
    fn sample_marginals_are_uniform() {
        let (n, q, trials) = (1024usize, 16usize, 100_000u64);
        let mut hits = vec![0u64; n];
        for i in 0..trials {
            for j in sample_indices(&seed(i), n, q).unwrap() {
                hits[j] += 1;
            }
        }
        let p = q as f64 / n as f64;
        let mean = trials as f64 * p;
        let sd = (trials as f64 * p * (1.0 - p)).sqrt();
        // About 0.27% of cells fall outside 3σ by chance; allow 1%, and no
        // cell may leave 4.5σ.
        let outside_3 = hits.iter().filter(|&&h| (h as f64 - mean).abs() > 3.0 * sd).count();
        assert!(outside_3 * 100 <= n, "{outside_3} cells beyond 3 sigma");
        for (j, &h) in hits.iter().enumerate() {
            assert!((h as f64 - mean).abs() < 4.5 * sd, "index {j}: {h} vs {mean}");
        }
        let total: u64 = hits.iter().sum();
        assert_eq!(total, trials * q as u64);
    }

    #[test]
    fn sampling_transcript_binds_every_root() {
        let kp = VrfKeypair::from_seed(11);
        let roots: Vec<Digest> = (0..6).map(|i| seed(100 + i)).collect();
        let base = sample_indices(&kp.eval(&sampling_transcript(&[1; 32], 2, 9, &roots)).randomness, 64, 8).unwrap();
        for j in 0..roots.len() {
            let mut r = roots.clone();
            r[j][0] ^= 1;
            let s = sample_indices(&kp.eval(&sampling_transcript(&[1; 32], 2, 9, &r)).randomness, 64, 8).unwrap();
            assert_ne!(s, base);
        }
    }
}
