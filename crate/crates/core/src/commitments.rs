//! Canonical tensor serialization, Merkle trees over scalar leaves, inclusion
//! proofs and salted verdict commitments.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::{hex32, tag, tagged_hash, Digest};

/// Serialization header version: one scalar per leaf, odd layers padded by
/// duplicating the last digest.
pub const SERIALIZATION_VERSION: u8 = 1;
const HEADER_LEN: usize = 9;
const TRACE_MAGIC: &[u8; 4] = b"VTRC";
const TRACE_VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum CommitmentError {
    #[error("non-finite scalar at index {0}")]
    NonFiniteScalar(usize),
    #[error("values length {len} does not match shape {tokens}x{dim}")]
    ShapeMismatch { len: usize, tokens: u32, dim: u32 },
    #[error("empty leaf set")]
    EmptyLeafSet,
    #[error("leaf index {index} out of range for {leaf_count} leaves")]
    IndexOutOfRange { index: usize, leaf_count: usize },
    #[error("salt must be 32 bytes, got {0}")]
    MalformedSalt(usize),
    #[error("malformed encoding: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Activation tensor at a segment boundary, row-major `(token_count, hidden_dim)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HiddenState {
    #[serde(with = "hex32")]
    pub task_id: Digest,
    /// Boundary index: `i` means the input of segment `i` (`L+1` is the tail output).
    pub segment_index: u32,
    /// Decode step that produced the first row of this tensor (1-based).
    pub token_index: u32,
    token_count: u32,
    hidden_dim: u32,
    values: Vec<f32>,
}

impl HiddenState {
    pub fn new(
        task_id: Digest,
        segment_index: u32,
        token_index: u32,
        shape: (u32, u32),
        values: Vec<f32>,
    ) -> Result<Self, CommitmentError> {
        let (tokens, dim) = shape;
        if values.len() != tokens as usize * dim as usize {
            return Err(CommitmentError::ShapeMismatch {
                len: values.len(),
                tokens,
                dim,
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(CommitmentError::NonFiniteScalar(i));
        }
        Ok(HiddenState {
            task_id,
            segment_index,
            token_index,
            token_count: tokens,
            hidden_dim: dim,
            values,
        })
    }

    pub fn shape(&self) -> (u32, u32) {
        (self.token_count, self.hidden_dim)
    }

    pub fn token_count(&self) -> usize {
        self.token_count as usize
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim as usize
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn row(&self, t: usize) -> &[f32] {
        let d = self.hidden_dim();
        &self.values[t * d..(t + 1) * d]
    }

    /// The last token's row as a standalone `(1, d)` state.
    pub fn last_row(&self) -> HiddenState {
        let t = self.token_count() - 1;
        HiddenState {
            task_id: self.task_id,
            segment_index: self.segment_index,
            token_index: self.token_index + t as u32,
            token_count: 1,
            hidden_dim: self.hidden_dim,
            values: self.row(t).to_vec(),
        }
    }

    /// Concatenates states along the token axis. All must share `hidden_dim`.
    pub fn concat(states: &[HiddenState]) -> Result<HiddenState, CommitmentError> {
        let first = states.first().ok_or(CommitmentError::EmptyLeafSet)?;
        let dim = first.hidden_dim;
        let mut values = Vec::new();
        let mut tokens = 0u32;
        for s in states {
            if s.hidden_dim != dim {
                return Err(CommitmentError::ShapeMismatch {
                    len: s.values.len(),
                    tokens: s.token_count,
                    dim,
                });
            }
            tokens += s.token_count;
            values.extend_from_slice(&s.values);
        }
        HiddenState::new(first.task_id, first.segment_index, first.token_index, (tokens, dim), values)
    }

    /// Rows `[start, start + len)` as a new state.
    pub fn slice_rows(&self, start: usize, len: usize) -> HiddenState {
        let d = self.hidden_dim();
        HiddenState {
            task_id: self.task_id,
            segment_index: self.segment_index,
            token_index: self.token_index + start as u32,
            token_count: len as u32,
            hidden_dim: self.hidden_dim,
            values: self.values[start * d..(start + len) * d].to_vec(),
        }
    }
}

/// Version byte, shape as two little-endian `u32`, then each scalar's raw bit
/// pattern little-endian in row-major order.
pub fn canonical_serialize(hs: &HiddenState) -> Result<Vec<u8>, CommitmentError> {
    if let Some(i) = hs.values.iter().position(|v| !v.is_finite()) {
        return Err(CommitmentError::NonFiniteScalar(i));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * hs.values.len());
    out.push(SERIALIZATION_VERSION);
    out.extend_from_slice(&hs.token_count.to_le_bytes());
    out.extend_from_slice(&hs.hidden_dim.to_le_bytes());
    for v in &hs.values {
        out.extend_from_slice(&v.to_bits().to_le_bytes());
    }
    Ok(out)
}

/// Inverse of [`canonical_serialize`]; identity metadata comes from the caller.
pub fn canonical_deserialize(
    bytes: &[u8],
    task_id: Digest,
    segment_index: u32,
    token_index: u32,
) -> Result<HiddenState, CommitmentError> {
    if bytes.len() < HEADER_LEN {
        return Err(CommitmentError::Malformed("truncated header".into()));
    }
    if bytes[0] != SERIALIZATION_VERSION {
        return Err(CommitmentError::Malformed(format!("unknown version {}", bytes[0])));
    }
    let tokens = u32::from_le_bytes(bytes[1..5].try_into().expect("4 bytes"));
    let dim = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes"));
    let body = &bytes[HEADER_LEN..];
    if body.len() != 4 * tokens as usize * dim as usize {
        return Err(CommitmentError::Malformed(format!(
            "body has {} bytes for shape {tokens}x{dim}",
            body.len()
        )));
    }
    let values = body
        .chunks_exact(4)
        .map(|c| f32::from_bits(u32::from_le_bytes(c.try_into().expect("4 bytes"))))
        .collect();
    HiddenState::new(task_id, segment_index, token_index, (tokens, dim), values)
}

pub fn leaf_hash(value: f32) -> Digest {
    tagged_hash(tag::LEAF, &[&value.to_bits().to_le_bytes()])
}

pub fn node_hash(left: &Digest, right: &Digest) -> Digest {
    tagged_hash(tag::NODE, &[left, right])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MerkleCommitment {
    #[serde(with = "hex32")]
    pub root: Digest,
    pub leaf_count: u32,
}

impl MerkleCommitment {
    /// Verifies `proof` against this root, also checking the index is in
    /// range and the path has the depth this leaf count implies.
    pub fn verify(&self, proof: &InclusionProof) -> bool {
        proof.leaf_index < self.leaf_count as usize
            && proof.path.len() == tree_depth(self.leaf_count as usize)
            && merkle_verify(&self.root, proof)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Left,
    Right,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathStep {
    #[serde(with = "hex32")]
    pub sibling: Digest,
    pub side: Side,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InclusionProof {
    pub leaf_index: usize,
    pub leaf_value: f32,
    pub path: Vec<PathStep>,
}

/// `ceil(log2(n))`, the number of hashing layers above the leaves.
pub fn tree_depth(leaf_count: usize) -> usize {
    leaf_count.max(1).next_power_of_two().trailing_zeros() as usize
}

/// Binary Merkle tree over scalar leaves.
#[derive(Debug, Clone)]
pub struct MerkleTree {
    leaves: Vec<f32>,
    // layers[0] holds leaf digests, the last layer holds only the root.
    layers: Vec<Vec<Digest>>,
}

impl MerkleTree {
    pub fn build(leaves: &[f32]) -> Result<Self, CommitmentError> {
        if leaves.is_empty() {
            return Err(CommitmentError::EmptyLeafSet);
        }
        if let Some(i) = leaves.iter().position(|v| !v.is_finite()) {
            return Err(CommitmentError::NonFiniteScalar(i));
        }
        let mut layers = vec![leaves.iter().map(|&v| leaf_hash(v)).collect::<Vec<_>>()];
        while layers.last().expect("non-empty").len() > 1 {
            let prev = layers.last().expect("non-empty");
            let next = prev
                .chunks(2)
                .map(|pair| match pair {
                    [l, r] => node_hash(l, r),
                    [only] => node_hash(only, only),
                    _ => unreachable!(),
                })
                .collect();
            layers.push(next);
        }
        Ok(MerkleTree {
            leaves: leaves.to_vec(),
            layers,
        })
    }

    pub fn from_state(hs: &HiddenState) -> Result<Self, CommitmentError> {
        Self::build(hs.values())
    }

    pub fn root(&self) -> Digest {
        self.layers.last().expect("non-empty")[0]
    }

    pub fn leaf_count(&self) -> usize {
        self.leaves.len()
    }

    pub fn commitment(&self) -> MerkleCommitment {
        MerkleCommitment {
            root: self.root(),
            leaf_count: self.leaves.len() as u32,
        }
    }

    pub fn open(&self, index: usize) -> Result<InclusionProof, CommitmentError> {
        if index >= self.leaves.len() {
            return Err(CommitmentError::IndexOutOfRange {
                index,
                leaf_count: self.leaves.len(),
            });
        }
        let mut path = Vec::with_capacity(self.layers.len() - 1);
        let mut pos = index;
        for layer in &self.layers[..self.layers.len() - 1] {
            let step = if pos.is_multiple_of(2) {
                let sibling = *layer.get(pos + 1).unwrap_or(&layer[pos]);
                PathStep {
                    sibling,
                    side: Side::Right,
                }
            } else {
                PathStep {
                    sibling: layer[pos - 1],
                    side: Side::Left,
                }
            };
            path.push(step);
            pos /= 2;
        }
        Ok(InclusionProof {
            leaf_index: index,
            leaf_value: self.leaves[index],
            path,
        })
    }
}

/// Recomputes the root from `proof`; sibling sides must agree with the bits of
/// `leaf_index`, so a proof cannot be replayed at a different position.
pub fn merkle_verify(root: &Digest, proof: &InclusionProof) -> bool {
    if !proof.leaf_value.is_finite() || proof.path.len() >= usize::BITS as usize {
        return false;
    }
    if proof.leaf_index >> proof.path.len() != 0 {
        return false;
    }
    let mut acc = leaf_hash(proof.leaf_value);
    for (level, step) in proof.path.iter().enumerate() {
        let bit = (proof.leaf_index >> level) & 1;
        acc = match (step.side, bit) {
            (Side::Right, 0) => node_hash(&acc, &step.sibling),
            (Side::Left, 1) => node_hash(&step.sibling, &acc),
            _ => return false,
        };
    }
    &acc == root
}

/// Root of the scalar-leaf tree over `hs`.
pub fn merkle_root(hs: &HiddenState) -> Result<MerkleCommitment, CommitmentError> {
    Ok(MerkleTree::from_state(hs)?.commitment())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictCommitment {
    #[serde(with = "hex32")]
    pub digest: Digest,
}

fn verdict_digest(verdict: bool, salt: &[u8; 32]) -> Digest {
    tagged_hash(tag::VERDICT, &[&[verdict as u8], salt])
}

fn salt_array(salt: &[u8]) -> Result<&[u8; 32], CommitmentError> {
    salt.try_into().map_err(|_| CommitmentError::MalformedSalt(salt.len()))
}

pub fn commit_verdict(verdict: bool, salt: &[u8]) -> Result<VerdictCommitment, CommitmentError> {
    Ok(VerdictCommitment {
        digest: verdict_digest(verdict, salt_array(salt)?),
    })
}

pub fn open_verdict(commitment: &VerdictCommitment, verdict: bool, salt: &[u8]) -> bool {
    match salt_array(salt) {
        Ok(s) => verdict_digest(verdict, s) == commitment.digest,
        Err(_) => false,
    }
}

/// JSON record of one posted hidden-state root.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommitmentRecord {
    #[serde(with = "hex32")]
    pub task_id: Digest,
    pub segment: u32,
    pub token: u32,
    #[serde(with = "hex32")]
    pub root: Digest,
    pub leaf_count: u32,
}

/// Writes a trace file: magic, version, state count, then for every state its
/// identity (task id, segment, token index), a length prefix and its
/// canonical serialization.
pub fn write_trace<W: Write>(mut w: W, states: &[HiddenState]) -> Result<(), CommitmentError> {
    w.write_all(TRACE_MAGIC)?;
    w.write_all(&[TRACE_VERSION])?;
    w.write_all(&(states.len() as u32).to_le_bytes())?;
    for s in states {
        let body = canonical_serialize(s)?;
        w.write_all(&s.task_id)?;
        w.write_all(&s.segment_index.to_le_bytes())?;
        w.write_all(&s.token_index.to_le_bytes())?;
        w.write_all(&(body.len() as u64).to_le_bytes())?;
        w.write_all(&body)?;
    }
    Ok(())
}

pub fn read_trace<R: Read>(mut r: R) -> Result<Vec<HiddenState>, CommitmentError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(4)? != TRACE_MAGIC {
        return Err(CommitmentError::Malformed("bad trace magic".into()));
    }
    let version = cur.take(1)?[0];
    if version != TRACE_VERSION {
        return Err(CommitmentError::Malformed(format!("unknown trace version {version}")));
    }
    let count = cur.u32()?;
    let mut states = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let task_id: Digest = cur.take(32)?.try_into().expect("32 bytes");
        let segment = cur.u32()?;
        let token = cur.u32()?;
        let len = u64::from_le_bytes(cur.take(8)?.try_into().expect("8 bytes")) as usize;
        let body = cur.take(len)?;
        states.push(canonical_deserialize(body, task_id, segment, token)?);
    }
    if cur.pos != bytes.len() {
        return Err(CommitmentError::Malformed("trailing bytes after trace".into()));
    }
    Ok(states)
}

pub fn write_trace_file(path: &Path, states: &[HiddenState]) -> Result<(), CommitmentError> {
    let mut buf = Vec::new();
    write_trace(&mut buf, states)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_trace_file(path: &Path) -> Result<Vec<HiddenState>, CommitmentError> {
    read_trace(fs::File::open(path)?)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CommitmentError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| CommitmentError::Malformed("truncated trace".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CommitmentError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}
