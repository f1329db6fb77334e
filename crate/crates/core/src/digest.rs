//! Domain-separated SHA-256 hashing shared by every commitment, signature and
//! VRF in the crate.

use sha2::{Digest as _, Sha256};

/// A 32-byte SHA-256 output.
pub type Digest = [u8; 32];

/// Domain tags. Every hash in the protocol is prefixed by exactly one of these.
pub mod tag {
    pub const LEAF: &[u8] = b"vinfer/merkle/leaf/v1";
    pub const NODE: &[u8] = b"vinfer/merkle/node/v1";
    pub const VERDICT: &[u8] = b"vinfer/verdict/v1";
    pub const PUBLIC_KEY: &[u8] = b"vinfer/pk/v1";
    pub const SIGNATURE: &[u8] = b"vinfer/sig/v1";
    pub const MESSAGE: &[u8] = b"vinfer/msg/v1";
    pub const VRF_OUTPUT: &[u8] = b"vinfer/vrf/out/v1";
    pub const VRF_PROOF: &[u8] = b"vinfer/vrf/proof/v1";
    pub const KDF: &[u8] = b"vinfer/kdf/v1";
    pub const STREAM: &[u8] = b"vinfer/stream/v1";
    pub const TASK: &[u8] = b"vinfer/task/v1";
    pub const RELAY: &[u8] = b"vinfer/relay/v1";
    pub const STATE: &[u8] = b"vinfer/state/v1";
    pub const SEED: &[u8] = b"vinfer/seed/v1";
}

/// Hashes `tag ‖ part_0 ‖ part_1 ‖ …`, length-prefixing the tag and every part
/// so that distinct part splits never collide.
pub fn tagged_hash(tag: &[u8], parts: &[&[u8]]) -> Digest {
    let mut hasher = Sha256::new();
    hasher.update((tag.len() as u32).to_le_bytes());
    hasher.update(tag);
    for part in parts {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part);
    }
    hasher.finalize().into()
}

/// Derives a 64-bit seed from a master seed and a label path; used to give
/// every Monte Carlo trial and every simulated node an independent stream.
pub fn derive_seed(master: u64, labels: &[u64]) -> u64 {
    let mut buf = Vec::with_capacity(8 * (labels.len() + 1));
    buf.extend_from_slice(&master.to_le_bytes());
    for l in labels {
        buf.extend_from_slice(&l.to_le_bytes());
    }
    let d = tagged_hash(tag::SEED, &[&buf]);
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

pub(crate) mod hex32 {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[u8; 32], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[u8; 32], D::Error> {
        let s = String::deserialize(d)?;
        let bytes = hex::decode(&s).map_err(D::Error::custom)?;
        bytes
            .try_into()
            .map_err(|_| D::Error::custom("expected 32 hex-encoded bytes"))
    }
}

pub(crate) mod hex_vec {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        hex::decode(&s).map_err(D::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tags_separate_domains() {
        assert_ne!(tagged_hash(tag::LEAF, &[b"x"]), tagged_hash(tag::NODE, &[b"x"]));
    }

    #[test]
    fn part_boundaries_matter() {
        assert_ne!(
            tagged_hash(tag::LEAF, &[b"ab", b"c"]),
            tagged_hash(tag::LEAF, &[b"a", b"bc"])
        );
    }

    #[test]
    fn derived_seeds_differ_per_label() {
        assert_ne!(derive_seed(1, &[0]), derive_seed(1, &[1]));
        assert_eq!(derive_seed(9, &[3, 4]), derive_seed(9, &[3, 4]));
    }
}
