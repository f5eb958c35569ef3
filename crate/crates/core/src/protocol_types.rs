//! Blocks, votes, certificates and the view arithmetic shared by both protocols.
//!
//! Wire discriminants (first byte of a [`Message`] encoding):
//!
//! | byte | record |
//! |------|--------|
//! | 0x01 | certified fragment `(b, i, c_i, π_i)` |
//! | 0x02 | vote |
//! | 0x03 | nullify |
//! | 0x04 | certificate |
//! | 0x05 | release |
//! | 0x06 | recovery fragment (`rec` marker) |
//!
//! Certificate kinds: 0x11 stage-1 certificate, 0x12 M-certificate, 0x13 stage-2
//! certificate, 0x14 N-certificate. Signed statements are domain separated with 0x20 (block
//! body), 0x21 (vote), 0x22 (nullify) and 0x23 (release).

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{self, Bytes, CertifiedFragment, CodecError, Fragment, MerklePath, Tag};
use crate::sim_crypto::{
    hash, Digest, ProcessorId, Scheme, Signature, SigningKey, ThresholdCertificate,
    ThresholdShare,
};
use crate::wire::{Canonical, Reader, WireError, Writer};

pub type View = u64;
pub type Timeslot = u64;

/// An opaque, unique transaction.
pub type Tx = Bytes;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Variant {
    Carnot1,
    Carnot1Opt,
    Carnot2,
}

impl Variant {
    pub fn is_carnot2(self) -> bool {
        self == Variant::Carnot2
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum ProtocolError {
    #[error("{variant} needs n ≥ {need} for f = {f}, got n = {n}")]
    ResilienceViolation { variant: Variant, n: u32, f: u32, need: u32 },
    #[error("a superview needs at least 2 views, got x = {0}")]
    SuperviewTooShort(u64),
    #[error("k = {k} outside [{lo}, {hi}]")]
    BadReconstructionParameter { k: u32, lo: u32, hi: u32 },
    #[error(transparent)]
    Codec(#[from] CodecError),
}

/// Quorum sizes: stage-1 notarisation, M-certificate, stage-2 certificate, N-certificate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Quorums {
    pub stage1: u32,
    pub m: u32,
    pub stage2: u32,
    pub null: u32,
}

pub fn quorums(variant: Variant, n: u32, f: u32) -> Result<Quorums, ProtocolError> {
    match variant {
        Variant::Carnot1 | Variant::Carnot1Opt => {
            if n < 4 * f + 1 {
                return Err(ProtocolError::ResilienceViolation { variant, n, f, need: 4 * f + 1 });
            }
            // ⌈n − 1.5f⌉ = n − ⌊3f/2⌋
            Ok(Quorums { stage1: n - (3 * f) / 2, m: f + 1, stage2: n - f, null: 2 * f + 1 })
        }
        Variant::Carnot2 => {
            if n < 3 * f + 1 {
                return Err(ProtocolError::ResilienceViolation { variant, n, f, need: 3 * f + 1 });
            }
            Ok(Quorums { stage1: n - f, m: f + 1, stage2: n - f, null: n - f })
        }
    }
}

pub fn superview_of(v: View, x: u64) -> u64 {
    v.div_ceil(x)
}

pub fn is_initial(v: View, x: u64) -> bool {
    v % x == 1 % x
}

/// First view of superview `w`.
pub fn first_view(w: u64, x: u64) -> View {
    (w - 1) * x + 1
}

/// Last view of superview `w`.
pub fn last_view(w: u64, x: u64) -> View {
    w * x
}

/// `lead(v) = p_{(w mod n) + 1}` for the superview `w` containing `v`.
pub fn lead(v: View, x: u64, n: u32) -> ProcessorId {
    (superview_of(v, x) % n as u64) as u32 + 1
}

/// The threshold schemes a protocol instance signs under.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Schemes {
    pub stage1: Scheme,
    pub m: Scheme,
    pub stage2: Scheme,
    pub null: Scheme,
}

/// Static parameters of one protocol instance.
#[derive(Clone, Debug)]
pub struct Params {
    pub variant: Variant,
    pub n: u32,
    pub f: u32,
    pub x: u64,
    pub quorums: Quorums,
    pub schemes: Schemes,
    genesis: Block,
}

impl Params {
    pub fn new(variant: Variant, n: u32, f: u32, x: u64) -> Result<Self, ProtocolError> {
        let quorums = quorums(variant, n, f)?;
        if x < 2 {
            return Err(ProtocolError::SuperviewTooShort(x));
        }
        let schemes = Schemes {
            stage1: Scheme::new(quorums.stage1, n, "stage1"),
            m: Scheme::new(quorums.m, n, "m-cert"),
            stage2: Scheme::new(quorums.stage2, n, "stage2"),
            null: Scheme::new(quorums.null, n, "nullify"),
        };
        Ok(Params { variant, n, f, x, quorums, schemes, genesis: Block::genesis(n)? })
    }

    pub fn genesis(&self) -> &Block {
        &self.genesis
    }

    pub fn lead(&self, v: View) -> ProcessorId {
        lead(v, self.x, self.n)
    }

    pub fn superview_of(&self, v: View) -> u64 {
        superview_of(v, self.x)
    }

    pub fn is_initial(&self, v: View) -> bool {
        is_initial(v, self.x)
    }

    pub fn last_view_of_superview(&self, v: View) -> View {
        last_view(self.superview_of(v), self.x)
    }

    /// Range of admissible reconstruction parameters, `[n − f − 1, n − 1]`.
    pub fn k_range(&self) -> (u32, u32) {
        ((self.n - self.f - 1).max(1), (self.n - 1).max(1))
    }

    pub fn recovery_k(&self) -> u32 {
        self.n - self.f - 1
    }

    /// Checks the structural invariants of a non-genesis block: signed by its view's leader,
    /// k in range, and for Carnot 2 a consistent recovery tag.
    pub fn block_well_formed(&self, b: &Block) -> bool {
        if b.view == 0 {
            return b.id == self.genesis.id;
        }
        let Some(sig) = b.leader_sig else { return false };
        if !sig.verify(self.lead(b.view), &b.id.0) {
            return false;
        }
        let (lo, hi) = self.k_range();
        if b.tag.k < lo || b.tag.k > hi || codec::fragment_size(b.tag.beta, self.n, b.tag.k) > codec::MAX_FRAGMENT_BYTES {
            return false;
        }
        match (self.variant.is_carnot2(), &b.recovery_tag) {
            (true, Some(r)) => {
                r.beta == b.tag.beta
                    && r.k == self.recovery_k()
                    && (b.tag.k != r.k || r.root == b.tag.root)
            }
            (false, None) => true,
            _ => false,
        }
    }
}

/// `b = (v, τ(C,k), [τ(C, n−f−1)], h)` signed by `lead(v)`. Identified by the digest of its
/// unsigned body.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "BlockRecord", into = "BlockRecord")]
pub struct Block {
    view: View,
    tag: Tag,
    recovery_tag: Option<Tag>,
    parent: Digest,
    leader_sig: Option<Signature>,
    id: Digest,
}

#[derive(Clone, Serialize, Deserialize)]
struct BlockRecord {
    view: View,
    tag: Tag,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    recovery_tag: Option<Tag>,
    parent: Digest,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    leader_sig: Option<Signature>,
}

impl From<Block> for BlockRecord {
    fn from(b: Block) -> Self {
        BlockRecord {
            view: b.view,
            tag: b.tag,
            recovery_tag: b.recovery_tag,
            parent: b.parent,
            leader_sig: b.leader_sig,
        }
    }
}

impl TryFrom<BlockRecord> for Block {
    type Error = String;
    fn try_from(r: BlockRecord) -> Result<Self, String> {
        Ok(Block::assemble(r.view, r.tag, r.recovery_tag, r.parent, r.leader_sig))
    }
}

impl fmt::Debug for Block {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Block(v{} {:?} k={} β={} parent={:?})", self.view, self.id, self.tag.k, self.tag.beta, self.parent)
    }
}

fn body_bytes(view: View, tag: &Tag, recovery_tag: &Option<Tag>, parent: &Digest) -> Vec<u8> {
    let mut w = Writer::new();
    w.u8(0x20).u64(view);
    tag.write(&mut w);
    write_opt(&mut w, recovery_tag.as_ref(), |w, t| t.write(w));
    w.digest(parent);
    w.finish()
}

impl Block {
    fn assemble(
        view: View,
        tag: Tag,
        recovery_tag: Option<Tag>,
        parent: Digest,
        leader_sig: Option<Signature>,
    ) -> Self {
        let id = hash(&body_bytes(view, &tag, &recovery_tag, &parent));
        Block { view, tag, recovery_tag, parent, leader_sig, id }
    }

    /// `(0, τ(λ, n), ⊥)`.
    pub fn genesis(n: u32) -> Result<Self, CodecError> {
        let tag = codec::tag_of(&[], n, n)?;
        Ok(Block::assemble(0, tag, None, Digest::ZERO, None))
    }

    /// Signs a block body with `key`.
    pub fn new_signed(
        key: &SigningKey,
        view: View,
        tag: Tag,
        recovery_tag: Option<Tag>,
        parent: Digest,
    ) -> Self {
        let body = body_bytes(view, &tag, &recovery_tag, &parent);
        let id = hash(&body);
        let sig = key.sign(&id.0);
        Block { view, tag, recovery_tag, parent, leader_sig: Some(sig), id }
    }

    pub fn id(&self) -> Digest {
        self.id
    }

    pub fn view(&self) -> View {
        self.view
    }

    pub fn tag(&self) -> &Tag {
        &self.tag
    }

    pub fn recovery_tag(&self) -> Option<&Tag> {
        self.recovery_tag.as_ref()
    }

    pub fn parent(&self) -> Digest {
        self.parent
    }

    pub fn leader_sig(&self) -> Option<&Signature> {
        self.leader_sig.as_ref()
    }

    pub fn is_genesis(&self) -> bool {
        self.view == 0
    }
}

/// A freshly proposed block with its primary (and, for Carnot 2, recovery) fragments.
#[derive(Clone, Debug)]
pub struct Proposal {
    pub block: Block,
    pub fragments: Vec<CertifiedFragment>,
}

/// Encodes `payload` at `k`, adds the recovery tag for Carnot 2 and signs the block.
pub fn build_proposal(
    params: &Params,
    key: &SigningKey,
    view: View,
    parent: Digest,
    payload: &[u8],
    k: u32,
) -> Result<Proposal, ProtocolError> {
    let (lo, hi) = params.k_range();
    if k < lo || k > hi {
        return Err(ProtocolError::BadReconstructionParameter { k, lo, hi });
    }
    let (tag, fragments) = codec::encode(payload, params.n, k)?;
    let recovery_tag = if params.variant.is_carnot2() {
        Some(if k == params.recovery_k() { tag } else { codec::tag_of(payload, params.n, params.recovery_k())? })
    } else {
        None
    };
    Ok(Proposal { block: Block::new_signed(key, view, tag, recovery_tag, parent), fragments })
}

/// Payload bytes are the concatenation of `u32`-length-prefixed transactions; no
/// transactions is the empty payload.
pub fn encode_payload(txs: &[Tx]) -> Vec<u8> {
    let mut w = Writer::new();
    for tx in txs {
        w.bytes(tx);
    }
    w.finish()
}

/// Splits payload bytes into transactions. A payload that does not parse (only a Byzantine
/// leader produces one) is read as a single opaque transaction.
pub fn decode_payload(bytes: &[u8]) -> Vec<Tx> {
    let mut r = Reader::new(bytes);
    let mut txs = Vec::new();
    let mut consumed = 0;
    while consumed < bytes.len() {
        match r.bytes() {
            Ok(tx) => {
                consumed += 4 + tx.len();
                txs.push(Tx::from(tx));
            }
            Err(_) => return vec![Tx::from(bytes)],
        }
    }
    txs
}

pub fn vote_statement(block: &Digest, stage: u8) -> Vec<u8> {
    let mut w = Writer::new();
    w.u8(0x21).digest(block).u8(stage);
    w.finish()
}

pub fn nullify_statement(view: View) -> Vec<u8> {
    let mut w = Writer::new();
    w.u8(0x22).u64(view);
    w.finish()
}

pub fn release_statement(block: &Digest) -> Vec<u8> {
    let mut w = Writer::new();
    w.u8(0x23).digest(block);
    w.finish()
}

/// `(b, i, c_i, π_i)`: a certified fragment travelling with its block.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FragmentMsg {
    pub block: Block,
    pub fragment: CertifiedFragment,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vote {
    pub block: Block,
    pub stage: u8,
    pub voter: ProcessorId,
    pub sig: Signature,
    pub shares: Vec<ThresholdShare>,
}

impl Vote {
    /// Stage-1 votes carry a share only in Carnot 2; stage-2 votes carry the M and stage-2
    /// shares.
    pub fn new(params: &Params, key: &SigningKey, block: &Block, stage: u8) -> Self {
        let stmt = vote_statement(&block.id(), stage);
        let shares = match stage {
            1 if params.variant.is_carnot2() => vec![key.share(&params.schemes.stage1, &stmt)],
            1 => vec![],
            _ => vec![key.share(&params.schemes.m, &stmt), key.share(&params.schemes.stage2, &stmt)],
        };
        Vote { block: block.clone(), stage, voter: key.id(), sig: key.sign(&stmt), shares }
    }

    pub fn verify(&self, params: &Params) -> bool {
        let stmt = vote_statement(&self.block.id(), self.stage);
        if !self.sig.verify(self.voter, &stmt) || self.voter == 0 || self.voter > params.n {
            return false;
        }
        let expected: Vec<&Scheme> = match self.stage {
            1 if params.variant.is_carnot2() => vec![&params.schemes.stage1],
            1 => vec![],
            2 => vec![&params.schemes.m, &params.schemes.stage2],
            _ => return false,
        };
        self.shares.len() == expected.len()
            && self.shares.iter().zip(expected).all(|(s, scheme)| s.verify(scheme, self.voter, &stmt))
    }

    /// The share under `scheme`, if the vote carries one.
    pub fn share(&self, scheme: &Scheme) -> Option<&ThresholdShare> {
        self.shares.iter().find(|s| s.scheme() == scheme)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NullifyMsg {
    pub view: View,
    pub sender: ProcessorId,
    pub share: ThresholdShare,
}

impl NullifyMsg {
    pub fn new(params: &Params, key: &SigningKey, view: View) -> Self {
        NullifyMsg { view, sender: key.id(), share: key.share(&params.schemes.null, &nullify_statement(view)) }
    }

    pub fn verify(&self, params: &Params) -> bool {
        self.view >= 1 && self.share.verify(&params.schemes.null, self.sender, &nullify_statement(self.view))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CertKind {
    Stage1Cert,
    MCert,
    Stage2Cert,
    NCert,
}

impl CertKind {
    pub fn discriminant(self) -> u8 {
        match self {
            CertKind::Stage1Cert => 0x11,
            CertKind::MCert => 0x12,
            CertKind::Stage2Cert => 0x13,
            CertKind::NCert => 0x14,
        }
    }

    fn from_discriminant(b: u8) -> Result<Self, WireError> {
        Ok(match b {
            0x11 => CertKind::Stage1Cert,
            0x12 => CertKind::MCert,
            0x13 => CertKind::Stage2Cert,
            0x14 => CertKind::NCert,
            other => return Err(WireError::BadDiscriminant(other)),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Subject {
    Block(Block),
    View(View),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Certificate {
    pub kind: CertKind,
    pub subject: Subject,
    pub cert: ThresholdCertificate,
}

impl Certificate {
    pub fn statement(kind: CertKind, subject: &Subject) -> Option<Vec<u8>> {
        match (kind, subject) {
            (CertKind::Stage1Cert, Subject::Block(b)) => Some(vote_statement(&b.id(), 1)),
            (CertKind::MCert | CertKind::Stage2Cert, Subject::Block(b)) => Some(vote_statement(&b.id(), 2)),
            (CertKind::NCert, Subject::View(v)) => Some(nullify_statement(*v)),
            _ => None,
        }
    }

    pub fn scheme(params: &Params, kind: CertKind) -> &Scheme {
        match kind {
            CertKind::Stage1Cert => &params.schemes.stage1,
            CertKind::MCert => &params.schemes.m,
            CertKind::Stage2Cert => &params.schemes.stage2,
            CertKind::NCert => &params.schemes.null,
        }
    }

    pub fn verify(&self, params: &Params) -> bool {
        if self.kind == CertKind::Stage1Cert && !params.variant.is_carnot2() {
            return false;
        }
        match Certificate::statement(self.kind, &self.subject) {
            Some(stmt) => self.cert.verify(Certificate::scheme(params, self.kind), &stmt),
            None => false,
        }
    }

    pub fn block(&self) -> Option<&Block> {
        match &self.subject {
            Subject::Block(b) => Some(b),
            Subject::View(_) => None,
        }
    }

    /// The view the certificate speaks about.
    pub fn view(&self) -> View {
        match &self.subject {
            Subject::Block(b) => b.view(),
            Subject::View(v) => *v,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReleaseMsg {
    pub block: Block,
    pub leader_sig: Signature,
}

impl ReleaseMsg {
    pub fn new(key: &SigningKey, block: &Block) -> Self {
        ReleaseMsg { block: block.clone(), leader_sig: key.sign(&release_statement(&block.id())) }
    }

    pub fn verify(&self, params: &Params) -> bool {
        self.block.view() >= 1
            && self.leader_sig.verify(params.lead(self.block.view()), &release_statement(&self.block.id()))
    }
}

/// `(rec, b, i, c_i, π_i)`, verified against the block's recovery tag.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecoveryFragment {
    pub block: Block,
    pub fragment: Fragment,
    pub path: MerklePath,
}

impl RecoveryFragment {
    pub fn verify(&self, n: u32) -> bool {
        match self.block.recovery_tag() {
            Some(tag) => codec::verify_fragment(tag, &self.fragment, &self.path, n),
            None => false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Message {
    Fragment(FragmentMsg),
    Vote(Vote),
    Nullify(NullifyMsg),
    Certificate(Certificate),
    Release(ReleaseMsg),
    Recovery(RecoveryFragment),
}

impl Message {
    /// The block the message is about, if any.
    pub fn block(&self) -> Option<&Block> {
        match self {
            Message::Fragment(m) => Some(&m.block),
            Message::Vote(m) => Some(&m.block),
            Message::Nullify(_) => None,
            Message::Certificate(c) => c.block(),
            Message::Release(m) => Some(&m.block),
            Message::Recovery(m) => Some(&m.block),
        }
    }

    pub fn digest(&self) -> Digest {
        hash(&self.to_canonical())
    }

    pub fn label(&self) -> &'static str {
        match self {
            Message::Fragment(_) => "fragment",
            Message::Vote(v) if v.stage == 1 => "vote1",
            Message::Vote(_) => "vote2",
            Message::Nullify(_) => "nullify",
            Message::Certificate(_) => "certificate",
            Message::Release(_) => "release",
            Message::Recovery(_) => "recovery",
        }
    }

    /// Size of the canonical encoding.
    pub fn wire_len(&self) -> usize {
        self.to_canonical().len()
    }
}

pub type SharedMessage = Arc<Message>;

fn write_opt<T>(w: &mut Writer, v: Option<&T>, f: impl FnOnce(&mut Writer, &T)) {
    match v {
        Some(v) => {
            w.u8(1);
            f(w, v);
        }
        None => {
            w.u8(0);
        }
    }
}

fn read_opt<T>(
    r: &mut Reader<'_>,
    f: impl FnOnce(&mut Reader<'_>) -> Result<T, WireError>,
) -> Result<Option<T>, WireError> {
    match r.u8()? {
        0 => Ok(None),
        1 => Ok(Some(f(r)?)),
        other => Err(WireError::BadDiscriminant(other)),
    }
}

impl Canonical for Signature {
    fn write(&self, w: &mut Writer) {
        w.u32(self.signer()).digest(&self.message_digest());
    }

    fn read(r: &mut Reader<'_>) -> Result<Self, WireError> {
        Ok(Signature::from_parts(r.u32()?, r.digest()?))
    }
}

impl Canonical for Scheme {
    fn write(&self, w: &mut Writer) {
        w.u32(self.threshold).u32(self.total).bytes(self.label.as_bytes());
    }

    fn read(r: &mut Reader<'_>) -> Result<Self, WireError> {
        let threshold = r.u32()?;
        let total = r.u32()?;
        let label = std::str::from_utf8(r.bytes()?).map_err(|_| WireError::Invalid("scheme label"))?;
        Ok(Scheme { threshold, total, label: label.to_string() })
    }
}

impl Canonical for ThresholdShare {
    fn write(&self, w: &mut Writer) {
        self.scheme().write(w);
        w.u32(self.signer()).digest(&self.message_digest());
    }

    fn read(r: &mut Reader<'_>) -> Result<Self, WireError> {
        let scheme = Scheme::read(r)?;
        Ok(ThresholdShare::from_parts(scheme, r.u32()?, r.digest()?))
    }
}

impl Canonical for ThresholdCertificate {
    fn write(&self, w: &mut Writer) {
        self.scheme().write(w);
        w.digest(&self.message_digest()).u32(self.signers().len() as u32);
        for s in self.signers() {
            w.u32(*s);
        }
    }

    fn read(r: &mut Reader<'_>) -> Result<Self, WireError> {
        let scheme = Scheme::read(r)?;
        let digest = r.digest()?;
        let len = r.u32()?;
        if len > codec::MAX_SHARDS {
            return Err(WireError::Invalid("too many signers"));
        }
        let signers = (0..len).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
        Ok(ThresholdCertificate::from_parts(scheme, digest, signers))
    }
}

impl Canonical for Block {
    fn write(&self, w: &mut Writer) {
        w.u64(self.view);
        self.tag.write(w);
        write_opt(w, self.recovery_tag.as_ref(), |w, t| t.write(w));
        w.digest(&self.parent);
        write_opt(w, self.leader_sig.as_ref(), |w, s| s.write(w));
    }

    fn read(r: &mut Reader<'_>) -> Result<Self, WireError> {
        let view = r.u64()?;
        let tag = Tag::read(r)?;
        let recovery_tag = read_opt(r, Tag::read)?;
        let parent = r.digest()?;
        let leader_sig = read_opt(r, Signature::read)?;
        Ok(Block::assemble(view, tag, recovery_tag, parent, leader_sig))
    }
}

impl Canonical for Vote {
    fn write(&self, w: &mut Writer) {
        self.block.write(w);
        w.u8(self.stage).u32(self.voter);
        self.sig.write(w);
        w.u32(self.shares.len() as u32);
        for s in &self.shares {
            s.write(w);
        }
    }

    fn read(r: &mut Reader<'_>) -> Result<Self, WireError> {
        let block = Block::read(r)?;
        let stage = r.u8()?;
        let voter = r.u32()?;
        let sig = Signature::read(r)?;
        let len = r.u32()?;
        if len > 4 {
            return Err(WireError::Invalid("too many shares"));
        }
        let shares = (0..len).map(|_| ThresholdShare::read(r)).collect::<Result<Vec<_>, _>>()?;
        Ok(Vote { block, stage, voter, sig, shares })
    }
}

impl Canonical for NullifyMsg {
    fn write(&self, w: &mut Writer) {
        w.u64(self.view).u32(self.sender);
        self.share.write(w);
    }

    fn read(r: &mut Reader<'_>) -> Result<Self, WireError> {
        Ok(NullifyMsg { view: r.u64()?, sender: r.u32()?, share: ThresholdShare::read(r)? })
    }
}

impl Canonical for Certificate {
    fn write(&self, w: &mut Writer) {
        w.u8(self.kind.discriminant());
        match &self.subject {
            Subject::Block(b) => {
                w.u8(0);
                b.write(w);
            }
            Subject::View(v) => {
                w.u8(1).u64(*v);
            }
        }
        self.cert.write(w);
    }

    fn read(r: &mut Reader<'_>) -> Result<Self, WireError> {
        let kind = CertKind::from_discriminant(r.u8()?)?;
        let subject = match r.u8()? {
            0 => Subject::Block(Block::read(r)?),
            1 => Subject::View(r.u64()?),
            other => return Err(WireError::BadDiscriminant(other)),
        };
        Ok(Certificate { kind, subject, cert: ThresholdCertificate::read(r)? })
    }
}

impl Canonical for ReleaseMsg {
    fn write(&self, w: &mut Writer) {
        self.block.write(w);
        self.leader_sig.write(w);
    }

    fn read(r: &mut Reader<'_>) -> Result<Self, WireError> {
        Ok(ReleaseMsg { block: Block::read(r)?, leader_sig: Signature::read(r)? })
    }
}

impl Canonical for RecoveryFragment {
    fn write(&self, w: &mut Writer) {
        self.block.write(w);
        self.fragment.write(w);
        self.path.write(w);
    }

    fn read(r: &mut Reader<'_>) -> Result<Self, WireError> {
        Ok(RecoveryFragment { block: Block::read(r)?, fragment: Fragment::read(r)?, path: MerklePath::read(r)? })
    }
}

impl Canonical for Message {
    fn write(&self, w: &mut Writer) {
        match self {
            Message::Fragment(m) => {
                w.u8(0x01);
                m.block.write(w);
                m.fragment.write(w);
            }
            Message::Vote(m) => {
                w.u8(0x02);
                m.write(w);
            }
            Message::Nullify(m) => {
                w.u8(0x03);
                m.write(w);
            }
            Message::Certificate(m) => {
                w.u8(0x04);
                m.write(w);
            }
            Message::Release(m) => {
                w.u8(0x05);
                m.write(w);
            }
            Message::Recovery(m) => {
                w.u8(0x06);
                m.write(w);
            }
        }
    }

    fn read(r: &mut Reader<'_>) -> Result<Self, WireError> {
        Ok(match r.u8()? {
            0x01 => Message::Fragment(FragmentMsg { block: Block::read(r)?, fragment: CertifiedFragment::read(r)? }),
            0x02 => Message::Vote(Vote::read(r)?),
            0x03 => Message::Nullify(NullifyMsg::read(r)?),
            0x04 => Message::Certificate(Certificate::read(r)?),
            0x05 => Message::Release(ReleaseMsg::read(r)?),
            0x06 => Message::Recovery(RecoveryFragment::read(r)?),
            other => return Err(WireError::BadDiscriminant(other)),
        })
    }
}
