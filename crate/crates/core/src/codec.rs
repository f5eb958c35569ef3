//! Erasure-coded payload dispersal: a systematic (n, k) Reed-Solomon code over GF(2^8), a
//! Merkle commitment over the n fragments, and the tag `(β, k, root)` binding them.
//!
//! Layout decisions:
//! - fragments are byte-symbol RS shards; the payload is right-padded with zeros to
//!   `k · fragment_size` and fragments `1..=k` are the raw payload split;
//! - the Merkle tree has `next_power_of_two(n)` leaves, padding leaves carry [`empty_leaf`],
//!   and index 1 is the leftmost leaf;
//! - a leaf hash is `H(0x00 ‖ index:u32 ‖ data)`, an interior node `H(0x01 ‖ left ‖ right)`,
//!   and the padding leaf `H(0x02)`, so positions cannot be swapped and leaves cannot be
//!   passed off as interior nodes.
//!
//! Capacity: `n ≤ 256` (the field size) and fragments of at most [`MAX_FRAGMENT_BYTES`], so
//! β ≤ k · 2^26.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Deref;
use std::sync::Arc;

use reed_solomon_erasure::galois_8::ReedSolomon;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::sim_crypto::{hash, hash_parts, Digest};
use crate::wire::{Canonical, Reader, WireError, Writer};

pub const MAX_SHARDS: u32 = 256;
pub const MAX_FRAGMENT_BYTES: u64 = 1 << 26;

const LEAF: u8 = 0x00;
const NODE: u8 = 0x01;
const EMPTY: u8 = 0x02;

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum CodecError {
    #[error("payload of {beta} bytes exceeds the capacity {max} for k = {k}")]
    PayloadTooLarge { beta: u64, k: u32, max: u64 },
    #[error("invalid code parameters n = {n}, k = {k}")]
    InvalidParameters { n: u32, k: u32 },
    #[error("{have} fragments supplied, {need} needed")]
    InsufficientFragments { have: usize, need: u32 },
}

/// Immutable, cheaply clonable byte string. Serialised as hex.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Bytes(Arc<[u8]>);

impl Bytes {
    pub fn new(v: Vec<u8>) -> Self {
        Bytes(v.into())
    }
}

impl Deref for Bytes {
    type Target = [u8];
    fn deref(&self) -> &[u8] {
        &self.0
    }
}

impl From<Vec<u8>> for Bytes {
    fn from(v: Vec<u8>) -> Self {
        Bytes::new(v)
    }
}

impl From<&[u8]> for Bytes {
    fn from(v: &[u8]) -> Self {
        Bytes(v.into())
    }
}

impl fmt::Debug for Bytes {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.len() <= 16 {
            write!(f, "0x{}", hex::encode(&self.0))
        } else {
            write!(f, "0x{}..({} bytes)", hex::encode(&self.0[..8]), self.len())
        }
    }
}

impl Serialize for Bytes {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(&self.0))
    }
}

impl<'de> Deserialize<'de> for Bytes {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        hex::decode(s).map(Bytes::new).map_err(serde::de::Error::custom)
    }
}

/// The commitment `τ(C, k) = (β, k, r)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Tag {
    pub beta: u64,
    pub k: u32,
    pub root: Digest,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fragment {
    pub index: u32,
    pub data: Bytes,
}

/// Which side of the running hash a sibling sits on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    Left,
    Right,
}

#[derive(Clone, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MerklePath {
    pub siblings: Vec<(Digest, Side)>,
}

/// A fragment together with the Merkle path proving it sits at its index under `tag`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CertifiedFragment {
    pub tag: Tag,
    pub fragment: Fragment,
    pub path: MerklePath,
}

impl CertifiedFragment {
    pub fn index(&self) -> u32 {
        self.fragment.index
    }

    pub fn verify(&self, n: u32) -> bool {
        verify_fragment(&self.tag, &self.fragment, &self.path, n)
    }
}

/// `ceil(beta / k)` bytes; the code's symbol is one byte.
pub fn fragment_size(beta: u64, _n: u32, k: u32) -> u64 {
    assert!(k >= 1, "k must be positive");
    beta.div_ceil(k as u64)
}

fn check_params(n: u32, k: u32) -> Result<(), CodecError> {
    if k == 0 || k > n || n > MAX_SHARDS {
        return Err(CodecError::InvalidParameters { n, k });
    }
    Ok(())
}

pub fn leaf_hash(index: u32, data: &[u8]) -> Digest {
    hash_parts(&[&[LEAF], &index.to_be_bytes(), data])
}

pub fn empty_leaf() -> Digest {
    hash(&[EMPTY])
}

fn node_hash(left: &Digest, right: &Digest) -> Digest {
    hash_parts(&[&[NODE], left.as_bytes(), right.as_bytes()])
}

/// Depth of the commitment tree over `n` leaves.
pub fn tree_depth(n: u32) -> usize {
    (n.max(1) as u64).next_power_of_two().trailing_zeros() as usize
}

/// Commits to `leaves` (fragment data in index order, index 1 first) and returns the root
/// and each leaf's path.
pub fn merkle_commit(leaves: &[&[u8]]) -> (Digest, Vec<MerklePath>) {
    let width = leaves.len().max(1).next_power_of_two();
    let mut level: Vec<Digest> = (0..width)
        .map(|p| match leaves.get(p) {
            Some(data) => leaf_hash(p as u32 + 1, data),
            None => empty_leaf(),
        })
        .collect();
    let mut paths = vec![MerklePath::default(); leaves.len()];
    let mut positions: Vec<usize> = (0..leaves.len()).collect();
    while level.len() > 1 {
        for (leaf, pos) in positions.iter_mut().enumerate() {
            let sibling = *pos ^ 1;
            let side = if *pos % 2 == 0 { Side::Right } else { Side::Left };
            paths[leaf].siblings.push((level[sibling], side));
            *pos /= 2;
        }
        level = level.chunks(2).map(|pair| node_hash(&pair[0], &pair[1])).collect();
    }
    (level[0], paths)
}

fn fold_path(index: u32, data: &[u8], path: &MerklePath) -> Option<Digest> {
    let mut pos = index.checked_sub(1)? as usize;
    let mut acc = leaf_hash(index, data);
    for (sibling, side) in &path.siblings {
        acc = match (side, pos % 2) {
            (Side::Right, 0) => node_hash(&acc, sibling),
            (Side::Left, 1) => node_hash(sibling, &acc),
            _ => return None,
        };
        pos /= 2;
    }
    Some(acc)
}

/// True iff `fragment` has the length `tag` implies and `path` folds to `tag.root` at
/// `fragment.index`.
pub fn verify_fragment(tag: &Tag, fragment: &Fragment, path: &MerklePath, n: u32) -> bool {
    if check_params(n, tag.k).is_err() || fragment.index == 0 || fragment.index > n {
        return false;
    }
    if fragment.data.len() as u64 != fragment_size(tag.beta, n, tag.k) {
        return false;
    }
    if path.siblings.len() != tree_depth(n) {
        return false;
    }
    fold_path(fragment.index, &fragment.data, path) == Some(tag.root)
}

/// `Encode(C, k)`: the tag and the n certified fragments, indexed 1..=n.
pub fn encode(payload: &[u8], n: u32, k: u32) -> Result<(Tag, Vec<CertifiedFragment>), CodecError> {
    check_params(n, k)?;
    let beta = payload.len() as u64;
    let size = fragment_size(beta, n, k);
    if size > MAX_FRAGMENT_BYTES {
        return Err(CodecError::PayloadTooLarge { beta, k, max: k as u64 * MAX_FRAGMENT_BYTES });
    }
    let size = size as usize;
    let mut shards: Vec<Vec<u8>> = (0..n as usize)
        .map(|i| {
            let mut shard = vec![0u8; size];
            if i < k as usize {
                let start = (i * size).min(payload.len());
                let end = ((i + 1) * size).min(payload.len());
                shard[..end - start].copy_from_slice(&payload[start..end]);
            }
            shard
        })
        .collect();
    if k < n && size > 0 {
        let rs = ReedSolomon::new(k as usize, (n - k) as usize)
            .expect("parameters checked above");
        rs.encode(&mut shards).expect("shards are uniformly sized");
    }
    let (root, paths) = merkle_commit(&shards.iter().map(|s| s.as_slice()).collect::<Vec<_>>());
    let tag = Tag { beta, k, root };
    let fragments = shards
        .into_iter()
        .zip(paths)
        .enumerate()
        .map(|(i, (data, path))| CertifiedFragment {
            tag,
            fragment: Fragment { index: i as u32 + 1, data: data.into() },
            path,
        })
        .collect();
    Ok((tag, fragments))
}

/// Encoding at the Carnot 2 recovery parameter `k = n − f − 1`.
pub fn recovery_encode(
    payload: &[u8],
    n: u32,
    f: u32,
) -> Result<(Tag, Vec<CertifiedFragment>), CodecError> {
    let k = n.checked_sub(f + 1).ok_or(CodecError::InvalidParameters { n, k: 0 })?;
    encode(payload, n, k)
}

/// The tag `encode(payload, n, k)` would produce.
pub fn tag_of(payload: &[u8], n: u32, k: u32) -> Result<Tag, CodecError> {
    encode(payload, n, k).map(|(tag, _)| tag)
}

/// `Decode`: reconstructs a candidate payload from `tag.k` of the given fragments, re-encodes
/// it and returns it iff the recomputed root equals `tag.root`; `Ok(None)` is ⊥.
///
/// Fragments of the wrong length or index are ignored. Paths are not consulted: the root
/// comparison subsumes them.
pub fn decode<'a, I>(tag: &Tag, fragments: I, n: u32) -> Result<Option<Vec<u8>>, CodecError>
where
    I: IntoIterator<Item = &'a Fragment>,
{
    check_params(n, tag.k)?;
    let size = fragment_size(tag.beta, n, tag.k);
    let mut by_index: BTreeMap<u32, &[u8]> = BTreeMap::new();
    for f in fragments {
        if f.index >= 1 && f.index <= n && f.data.len() as u64 == size {
            by_index.entry(f.index).or_insert(&f.data);
        }
    }
    let k = tag.k as usize;
    if by_index.len() < k {
        return Err(CodecError::InsufficientFragments { have: by_index.len(), need: tag.k });
    }
    let size = size as usize;
    let chosen: Vec<(u32, &[u8])> = by_index.into_iter().take(k).collect();
    let systematic = chosen.iter().enumerate().all(|(i, (idx, _))| *idx as usize == i + 1);
    let mut payload = Vec::with_capacity(k * size);
    if systematic || size == 0 {
        for (_, data) in &chosen {
            payload.extend_from_slice(data);
        }
    } else {
        let mut shards: Vec<Option<Vec<u8>>> = vec![None; n as usize];
        for (idx, data) in &chosen {
            shards[*idx as usize - 1] = Some(data.to_vec());
        }
        let rs = ReedSolomon::new(k, n as usize - k).expect("parameters checked above");
        if rs.reconstruct_data(&mut shards).is_err() {
            return Ok(None);
        }
        for shard in shards.into_iter().take(k) {
            payload.extend_from_slice(&shard.expect("data shards reconstructed"));
        }
    }
    if tag.beta as usize > payload.len() {
        return Ok(None);
    }
    payload.truncate(tag.beta as usize);
    let recomputed = tag_of(&payload, n, tag.k)?;
    Ok((recomputed.root == tag.root).then_some(payload))
}

impl Canonical for Tag {
    fn write(&self, w: &mut Writer) {
        w.u64(self.beta).u32(self.k).digest(&self.root);
    }

    fn read(r: &mut Reader<'_>) -> Result<Self, WireError> {
        Ok(Tag { beta: r.u64()?, k: r.u32()?, root: r.digest()? })
    }
}

impl Canonical for MerklePath {
    fn write(&self, w: &mut Writer) {
        w.u32(self.siblings.len() as u32);
        for (d, side) in &self.siblings {
            w.u8(match side {
                Side::Left => 0,
                Side::Right => 1,
            })
            .digest(d);
        }
    }

    fn read(r: &mut Reader<'_>) -> Result<Self, WireError> {
        let len = r.u32()?;
        if len > 64 {
            return Err(WireError::Invalid("merkle path too long"));
        }
        let mut siblings = Vec::with_capacity(len as usize);
        for _ in 0..len {
            let side = match r.u8()? {
                0 => Side::Left,
                1 => Side::Right,
                other => return Err(WireError::BadDiscriminant(other)),
            };
            siblings.push((r.digest()?, side));
        }
        Ok(MerklePath { siblings })
    }
}

impl Canonical for Fragment {
    fn write(&self, w: &mut Writer) {
        w.u32(self.index).bytes(&self.data);
    }

    fn read(r: &mut Reader<'_>) -> Result<Self, WireError> {
        Ok(Fragment { index: r.u32()?, data: r.bytes()?.into() })
    }
}

impl Canonical for CertifiedFragment {
    fn write(&self, w: &mut Writer) {
        self.tag.write(w);
        self.fragment.write(w);
        self.path.write(w);
    }

    fn read(r: &mut Reader<'_>) -> Result<Self, WireError> {
        Ok(CertifiedFragment {
            tag: Tag::read(r)?,
            fragment: Fragment::read(r)?,
            path: MerklePath::read(r)?,
        })
    }
}
