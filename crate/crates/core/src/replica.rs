//! State and plumbing shared by the three replica state machines.
//!
//! [`Store`] is the message set `S` together with everything derived from it automatically:
//! certificates, verified fragments, decoded payloads and the block sets. [`Core`] holds the
//! explicit local variables (`v`, `b`, `T`, the voted/nullified flags) and the proposal logic
//! all variants share. The variant modules only encode their instruction lists.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::carnot1_core::Carnot1;
use crate::carnot1_opt::Carnot1Opt;
use crate::carnot2::Carnot2;
use crate::codec::{self, CertifiedFragment, Fragment};
use crate::protocol_types::{
    build_proposal, decode_payload, encode_payload, Block, CertKind, Certificate, FragmentMsg,
    Message, NullifyMsg, Params, RecoveryFragment, ReleaseMsg, SharedMessage, Subject, Timeslot,
    Tx, Variant, View, Vote,
};
use crate::sim_crypto::{combine, Digest, ProcessorId, SigningKey};

/// Per-replica tunables that are not protocol constants.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplicaConfig {
    /// Known delay bound Δ, in timeslots.
    pub delta: u64,
    /// Carnot 2 recovery timer.
    pub s: u64,
    /// Presumed number of actual faults, used by g for non-initial views.
    pub f_a: u32,
    /// Fixes g for every view.
    pub k_override: Option<u32>,
    /// Cap on encoded payload bytes.
    pub max_payload: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dest {
    All,
    To(ProcessorId),
}

#[derive(Clone, Debug)]
pub struct OutMsg {
    pub dst: Dest,
    pub msg: SharedMessage,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockSet {
    Blocks,
    Star,
    Dagger,
    Diamond,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryCause {
    Block,
    NCert,
}

/// Observable state transitions, recorded in the trace.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum StateEvent {
    EnterView { view: View, cause: EntryCause },
    Propose { view: View, block: Digest, parent: Digest, k: u32, beta: u64, txs: usize, optimistic: bool },
    Vote { stage: u8, view: View, block: Digest },
    Nullify { view: View },
    BlockAdded { set: BlockSet, view: View, block: Digest },
    CertFormed { kind: CertKind, view: View, block: Option<Digest> },
    Release { view: View, block: Digest },
    SecondPropose { superview: u64 },
    TimerSet { block: Digest, expires: Timeslot },
    TimerFired { block: Digest, recovery_sent: u32 },
}

#[derive(Debug, Default)]
pub struct StepOutput {
    pub sends: Vec<OutMsg>,
    pub events: Vec<StateEvent>,
}

/// Outcome of decoding a block's payload, cached because it cannot change: every subset of
/// verified fragments either decodes to the same payload or to ⊥.
#[derive(Clone, Debug)]
pub enum Recovered {
    Payload(Arc<Vec<u8>>),
    /// Decoding failed, or (Carnot 2) the payload does not reproduce both tags.
    Invalid,
}

/// The message set `S` and everything automatically derived from it.
pub struct Store {
    pub params: Arc<Params>,
    pub me: ProcessorId,
    known: BTreeMap<Digest, Block>,
    children: BTreeMap<Digest, Vec<Digest>>,
    s1: BTreeMap<Digest, BTreeMap<ProcessorId, Vote>>,
    s2: BTreeMap<Digest, BTreeMap<ProcessorId, Vote>>,
    nulls: BTreeMap<View, BTreeMap<ProcessorId, NullifyMsg>>,
    certs: BTreeMap<(CertKind, Digest), Certificate>,
    ncerts: BTreeMap<View, Certificate>,
    /// Certificates that became new and have not been handed to the instruction list yet.
    new_certs: Vec<Certificate>,
    frags: BTreeMap<Digest, BTreeMap<u32, Fragment>>,
    rec: BTreeMap<Digest, BTreeMap<u32, Fragment>>,
    own: BTreeMap<Digest, CertifiedFragment>,
    own_order: BTreeMap<View, Vec<Digest>>,
    own_rec: BTreeMap<Digest, RecoveryFragment>,
    fragment_views: BTreeSet<View>,
    recovered: BTreeMap<Digest, Recovered>,
    payload_txs: BTreeMap<Digest, Arc<Vec<Tx>>>,
    releases: BTreeSet<Digest>,
    blocks: BTreeMap<Digest, u64>,
    blocks_by_view: BTreeMap<View, Vec<Digest>>,
    star: BTreeSet<Digest>,
    star_by_view: BTreeMap<View, Vec<Digest>>,
    dagger: BTreeSet<Digest>,
    diamond: BTreeSet<Digest>,
    new_diamond: Vec<Digest>,
    dirty: BTreeSet<Digest>,
    events: Vec<StateEvent>,
}

impl Store {
    pub fn new(params: Arc<Params>, me: ProcessorId) -> Self {
        let genesis = params.genesis().clone();
        let gid = genesis.id();
        let mut s = Store {
            params,
            me,
            known: BTreeMap::new(),
            children: BTreeMap::new(),
            s1: BTreeMap::new(),
            s2: BTreeMap::new(),
            nulls: BTreeMap::new(),
            certs: BTreeMap::new(),
            ncerts: BTreeMap::new(),
            new_certs: Vec::new(),
            frags: BTreeMap::new(),
            rec: BTreeMap::new(),
            own: BTreeMap::new(),
            own_order: BTreeMap::new(),
            own_rec: BTreeMap::new(),
            fragment_views: BTreeSet::new(),
            recovered: BTreeMap::new(),
            payload_txs: BTreeMap::new(),
            releases: BTreeSet::new(),
            blocks: BTreeMap::new(),
            blocks_by_view: BTreeMap::new(),
            star: BTreeSet::new(),
            star_by_view: BTreeMap::new(),
            dagger: BTreeSet::new(),
            diamond: BTreeSet::new(),
            new_diamond: Vec::new(),
            dirty: BTreeSet::new(),
            events: Vec::new(),
        };
        s.known.insert(gid, genesis);
        s.blocks.insert(gid, 0);
        s.blocks_by_view.insert(0, vec![gid]);
        s.star.insert(gid);
        s.dagger.insert(gid);
        s.diamond.insert(gid);
        s.recovered.insert(gid, Recovered::Payload(Arc::new(Vec::new())));
        s.payload_txs.insert(gid, Arc::new(Vec::new()));
        s
    }

    fn variant(&self) -> Variant {
        self.params.variant
    }

    pub fn block(&self, id: &Digest) -> Option<&Block> {
        self.known.get(id)
    }

    pub fn in_blocks(&self, id: &Digest) -> bool {
        self.blocks.contains_key(id)
    }

    /// Insertion rank of `id` in `blocks`; genesis is 0.
    pub fn blocks_rank(&self, id: &Digest) -> Option<u64> {
        self.blocks.get(id).copied()
    }

    pub fn blocks_len(&self) -> u64 {
        self.blocks.len() as u64
    }

    pub fn in_dagger(&self, id: &Digest) -> bool {
        self.dagger.contains(id)
    }

    pub fn in_diamond(&self, id: &Digest) -> bool {
        self.diamond.contains(id)
    }

    /// The first view-`v` block that entered `blocks`.
    pub fn blocks_at_view(&self, v: View) -> Option<&Block> {
        self.blocks_by_view.get(&v).and_then(|ids| ids.first()).map(|id| &self.known[id])
    }

    pub fn star_at_view(&self, v: View) -> Option<&Block> {
        self.star_by_view.get(&v).and_then(|ids| ids.first()).map(|id| &self.known[id])
    }

    pub fn has_ncert(&self, v: View) -> bool {
        self.ncerts.contains_key(&v)
    }

    pub fn has_cert(&self, kind: CertKind, id: &Digest) -> bool {
        self.certs.contains_key(&(kind, *id))
    }

    pub fn released(&self, id: &Digest) -> bool {
        self.releases.contains(id)
    }

    pub fn saw_fragment_for_view(&self, v: View) -> bool {
        self.fragment_views.contains(&v)
    }

    /// Certified fragments at this processor's own index for view-`v` blocks, in receipt
    /// order.
    pub fn own_fragments_for_view(&self, v: View) -> impl Iterator<Item = (&Block, &CertifiedFragment)> {
        self.own_order.get(&v).into_iter().flatten().map(move |id| (&self.known[id], &self.own[id]))
    }

    pub fn own_fragment(&self, id: &Digest) -> Option<&CertifiedFragment> {
        self.own.get(id)
    }

    pub fn own_recovery(&self, id: &Digest) -> Option<&RecoveryFragment> {
        self.own_rec.get(id)
    }

    pub fn own_fragment_blocks(&self) -> impl Iterator<Item = &Digest> {
        self.own.keys().chain(self.own_rec.keys())
    }

    /// Whether a recovery fragment of `id` at index `j` has been received (for blocks whose
    /// reconstruction parameter is the recovery one, primary fragments are the same thing).
    pub fn has_recovery_at(&self, id: &Digest, j: u32) -> bool {
        self.rec.get(id).is_some_and(|m| m.contains_key(&j))
    }

    pub fn payload(&self, id: &Digest) -> Option<&Arc<Vec<u8>>> {
        match self.recovered.get(id) {
            Some(Recovered::Payload(p)) => Some(p),
            _ => None,
        }
    }

    pub fn payload_txs(&self, id: &Digest) -> Option<&Arc<Vec<Tx>>> {
        self.payload_txs.get(id)
    }

    pub fn take_new_certs(&mut self) -> Vec<Certificate> {
        std::mem::take(&mut self.new_certs)
    }

    pub fn take_new_diamond(&mut self) -> Vec<Digest> {
        std::mem::take(&mut self.new_diamond)
    }

    pub fn take_events(&mut self) -> Vec<StateEvent> {
        std::mem::take(&mut self.events)
    }

    /// Records the payload of a block this processor authored.
    pub fn note_authored(&mut self, id: Digest, txs: Vec<Tx>) {
        self.payload_txs.insert(id, Arc::new(txs));
    }

    fn learn_block(&mut self, b: &Block) -> bool {
        if !self.params.block_well_formed(b) {
            return false;
        }
        let id = b.id();
        if !self.known.contains_key(&id) {
            self.known.insert(id, b.clone());
            self.children.entry(b.parent()).or_default().push(id);
            self.dirty.insert(id);
        }
        true
    }

    /// Adds a received message to `S`. Invalid messages are dropped.
    pub fn ingest(&mut self, msg: &Message) {
        match msg {
            Message::Fragment(m) => self.ingest_fragment(m),
            Message::Vote(v) => self.ingest_vote(v),
            Message::Nullify(m) => self.ingest_nullify(m),
            Message::Certificate(c) => self.ingest_certificate(c),
            Message::Release(r) => {
                if r.verify(&self.params) && self.learn_block(&r.block) {
                    self.releases.insert(r.block.id());
                }
            }
            Message::Recovery(r) => self.ingest_recovery(r),
        }
        self.maintain();
    }

    fn ingest_fragment(&mut self, m: &FragmentMsg) {
        let n = self.params.n;
        if m.fragment.tag != *m.block.tag() || !m.fragment.verify(n) || !self.learn_block(&m.block) {
            return;
        }
        let id = m.block.id();
        let idx = m.fragment.index();
        self.fragment_views.insert(m.block.view());
        let fresh = !self.frags.get(&id).is_some_and(|f| f.contains_key(&idx));
        if fresh {
            self.frags.entry(id).or_default().insert(idx, m.fragment.fragment.clone());
            if self.variant().is_carnot2() && m.block.tag().k == self.params.recovery_k() {
                self.rec.entry(id).or_default().insert(idx, m.fragment.fragment.clone());
            }
            self.dirty.insert(id);
        }
        if idx == self.me && !self.own.contains_key(&id) {
            self.own.insert(id, m.fragment.clone());
            self.own_order.entry(m.block.view()).or_default().push(id);
        }
    }

    fn ingest_recovery(&mut self, r: &RecoveryFragment) {
        if !self.variant().is_carnot2() || !r.verify(self.params.n) || !self.learn_block(&r.block) {
            return;
        }
        let id = r.block.id();
        let idx = r.fragment.index;
        if !self.rec.get(&id).is_some_and(|f| f.contains_key(&idx)) {
            self.rec.entry(id).or_default().insert(idx, r.fragment.clone());
            if r.block.tag().k == self.params.recovery_k() {
                self.frags.entry(id).or_default().entry(idx).or_insert_with(|| r.fragment.clone());
            }
            self.dirty.insert(id);
        }
        if idx == self.me && !self.own_rec.contains_key(&id) {
            self.own_rec.insert(id, r.clone());
        }
    }

    fn ingest_vote(&mut self, v: &Vote) {
        if !v.verify(&self.params) || !self.learn_block(&v.block) {
            return;
        }
        let id = v.block.id();
        let map = if v.stage == 1 { &mut self.s1 } else { &mut self.s2 };
        let votes = map.entry(id).or_default();
        if votes.contains_key(&v.voter) {
            return;
        }
        votes.insert(v.voter, v.clone());
        let count = votes.len() as u32;
        let q = self.params.quorums;
        if v.stage == 1 {
            if self.variant().is_carnot2() && count >= q.stage1 {
                self.form(CertKind::Stage1Cert, &v.block, 1);
            }
        } else {
            if count >= q.m {
                self.form(CertKind::MCert, &v.block, 2);
            }
            if count >= q.stage2 {
                self.form(CertKind::Stage2Cert, &v.block, 2);
            }
        }
        self.dirty.insert(id);
    }

    /// Combines received vote shares into a certificate of `kind` for `block`.
    fn form(&mut self, kind: CertKind, block: &Block, stage: u8) {
        let id = block.id();
        if self.certs.contains_key(&(kind, id)) {
            return;
        }
        let scheme = Certificate::scheme(&self.params, kind).clone();
        let votes = if stage == 1 { &self.s1[&id] } else { &self.s2[&id] };
        let cert = combine(votes.values().filter_map(|v| v.share(&scheme))).expect("quorum of valid shares");
        self.add_cert(Certificate { kind, subject: Subject::Block(block.clone()), cert });
    }

    fn ingest_nullify(&mut self, m: &NullifyMsg) {
        if !m.verify(&self.params) {
            return;
        }
        let votes = self.nulls.entry(m.view).or_default();
        if votes.contains_key(&m.sender) {
            return;
        }
        votes.insert(m.sender, m.clone());
        if votes.len() as u32 >= self.params.quorums.null && !self.ncerts.contains_key(&m.view) {
            let cert = combine(votes.values().map(|n| &n.share)).expect("quorum of valid shares");
            self.add_cert(Certificate { kind: CertKind::NCert, subject: Subject::View(m.view), cert });
        }
    }

    fn ingest_certificate(&mut self, c: &Certificate) {
        if !c.verify(&self.params) {
            return;
        }
        match &c.subject {
            Subject::Block(b) => {
                if !self.learn_block(b) || self.certs.contains_key(&(c.kind, b.id())) {
                    return;
                }
            }
            Subject::View(v) => {
                if self.ncerts.contains_key(v) {
                    return;
                }
            }
        }
        self.add_cert(c.clone());
    }

    fn add_cert(&mut self, c: Certificate) {
        self.events.push(StateEvent::CertFormed { kind: c.kind, view: c.view(), block: c.block().map(Block::id) });
        match &c.subject {
            Subject::Block(b) => {
                self.dirty.insert(b.id());
                self.certs.insert((c.kind, b.id()), c.clone());
            }
            Subject::View(v) => {
                self.ncerts.insert(*v, c.clone());
            }
        }
        self.new_certs.push(c);
    }

    /// Tries to recover the payload of `id` once enough fragments are present.
    fn try_recover(&mut self, id: &Digest) {
        if self.recovered.contains_key(id) {
            return;
        }
        let b = &self.known[id];
        let n = self.params.n;
        let tag = *b.tag();
        let mut candidate: Option<Option<Vec<u8>>> = None;
        if let Some(fr) = self.frags.get(id) {
            if fr.len() as u32 >= tag.k {
                candidate = Some(codec::decode(&tag, fr.values(), n).expect("enough fragments"));
            }
        }
        if candidate.is_none() && self.variant().is_carnot2() {
            let rtag = *b.recovery_tag().expect("well-formed Carnot 2 block");
            if let Some(fr) = self.rec.get(id) {
                if fr.len() as u32 >= rtag.k {
                    candidate = Some(codec::decode(&rtag, fr.values(), n).expect("enough fragments"));
                }
            }
        }
        let Some(result) = candidate else { return };
        let outcome = match result {
            Some(payload) if !self.variant().is_carnot2() || verify_dual_roots(&payload, b, &self.params) => {
                Recovered::Payload(Arc::new(payload))
            }
            _ => Recovered::Invalid,
        };
        if let Recovered::Payload(p) = &outcome {
            self.payload_txs.entry(*id).or_insert_with(|| Arc::new(decode_payload(p)));
        }
        self.recovered.insert(*id, outcome);
    }

    /// Recomputes the automatically maintained sets for every block whose inputs changed.
    pub fn maintain(&mut self) {
        while let Some(id) = self.dirty.pop_first() {
            let Some(b) = self.known.get(&id) else { continue };
            if b.is_genesis() {
                continue;
            }
            let parent_in = self.blocks.contains_key(&b.parent());
            if !parent_in {
                // Nothing below can hold yet; the parent's insertion re-dirties this block.
                continue;
            }
            let view = b.view();
            self.try_recover(&id);
            let decoded = matches!(self.recovered.get(&id), Some(Recovered::Payload(_)));
            let mut added = false;
            match self.params.variant {
                Variant::Carnot1 | Variant::Carnot1Opt => {
                    if !self.blocks.contains_key(&id) && self.certs.contains_key(&(CertKind::MCert, id)) {
                        self.insert_blocks(id, view, BlockSet::Blocks);
                        added = true;
                    }
                    let notarised = self.s1.get(&id).map_or(0, |m| m.len() as u32) >= self.params.quorums.stage1;
                    if !self.star.contains(&id) && notarised && decoded {
                        self.star.insert(id);
                        self.star_by_view.entry(view).or_default().push(id);
                        self.events.push(StateEvent::BlockAdded { set: BlockSet::Star, view, block: id });
                    }
                }
                Variant::Carnot2 => {
                    if !self.dagger.contains(&id) && self.certs.contains_key(&(CertKind::MCert, id)) {
                        self.dagger.insert(id);
                        self.events.push(StateEvent::BlockAdded { set: BlockSet::Dagger, view, block: id });
                    }
                    if !self.diamond.contains(&id) && self.certs.contains_key(&(CertKind::Stage1Cert, id)) && decoded {
                        self.diamond.insert(id);
                        self.new_diamond.push(id);
                        self.events.push(StateEvent::BlockAdded { set: BlockSet::Diamond, view, block: id });
                    }
                    if !self.blocks.contains_key(&id) && (self.dagger.contains(&id) || self.diamond.contains(&id)) {
                        self.insert_blocks(id, view, BlockSet::Blocks);
                        added = true;
                    }
                }
            }
            if added {
                if let Some(ch) = self.children.get(&id) {
                    self.dirty.extend(ch.iter().copied());
                }
            }
        }
    }

    fn insert_blocks(&mut self, id: Digest, view: View, set: BlockSet) {
        let rank = self.blocks.len() as u64;
        self.blocks.insert(id, rank);
        self.blocks_by_view.entry(view).or_default().push(id);
        self.events.push(StateEvent::BlockAdded { set, view, block: id });
    }
}

/// Re-encodes `payload` at the block's reconstruction parameter and at `n − f − 1`, and checks
/// both tags.
pub fn verify_dual_roots(payload: &[u8], block: &Block, params: &Params) -> bool {
    let Some(rtag) = block.recovery_tag() else { return false };
    let n = params.n;
    let Ok(primary) = codec::tag_of(payload, n, block.tag().k) else { return false };
    if primary != *block.tag() {
        return false;
    }
    if rtag.k == block.tag().k {
        return rtag == block.tag();
    }
    codec::tag_of(payload, n, rtag.k).is_ok_and(|t| t == *rtag)
}

/// A block proposed by this processor.
#[derive(Clone, Debug)]
pub struct OwnProposal {
    pub block: Block,
    /// Value of the second-proposal flag of the superview when the proposal was made.
    pub epoch: bool,
}

/// Explicit local variables and shared procedures.
pub struct Core {
    pub store: Store,
    pub key: SigningKey,
    pub cfg: ReplicaConfig,
    pub v: View,
    pub b: Digest,
    pub entered_at: Timeslot,
    /// Size of `blocks` when each view was entered; a prefix of the insertion order.
    pub entry_blocks: BTreeMap<View, u64>,
    pub now: Timeslot,
    pub voted1: BTreeSet<View>,
    pub voted2: BTreeSet<View>,
    pub nullified: BTreeSet<View>,
    pool: Vec<Tx>,
    pool_set: BTreeSet<Tx>,
    pub proposals: BTreeMap<View, Vec<OwnProposal>>,
    pub last_proposal_at: Option<Timeslot>,
    out: Vec<OutMsg>,
}

impl Core {
    pub fn new(params: Arc<Params>, cfg: ReplicaConfig, key: SigningKey) -> Self {
        let gid = params.genesis().id();
        Core {
            store: Store::new(params, key.id()),
            key,
            cfg,
            v: 1,
            b: gid,
            entered_at: 0,
            entry_blocks: BTreeMap::from([(1, 1)]),
            now: 0,
            voted1: BTreeSet::new(),
            voted2: BTreeSet::new(),
            nullified: BTreeSet::new(),
            pool: Vec::new(),
            pool_set: BTreeSet::new(),
            proposals: BTreeMap::new(),
            last_proposal_at: None,
            out: Vec::new(),
        }
    }

    pub fn params(&self) -> &Params {
        &self.store.params
    }

    pub fn me(&self) -> ProcessorId {
        self.store.me
    }

    /// Time since entering the current view.
    pub fn timer(&self) -> u64 {
        self.now - self.entered_at
    }

    pub fn event(&mut self, e: StateEvent) {
        self.store.events.push(e);
    }

    /// Starts a timeslot: absorbs the inbox and new transactions.
    pub fn begin(&mut self, now: Timeslot, inbox: &[(ProcessorId, SharedMessage)], txs: &[Tx]) {
        self.now = now;
        for (_, m) in inbox {
            self.store.ingest(m);
        }
        for tx in txs {
            if self.pool_set.insert(tx.clone()) {
                self.pool.push(tx.clone());
            }
        }
    }

    /// Changes whenever an instruction acts; used to run the instruction list to a fixpoint.
    pub fn fingerprint(&self) -> (View, usize, usize) {
        (self.v, self.out.len(), self.store.events.len())
    }

    pub fn finish(&mut self) -> StepOutput {
        StepOutput { sends: std::mem::take(&mut self.out), events: self.store.take_events() }
    }

    /// Sends to every processor; the copy addressed to ourselves is received immediately.
    pub fn disseminate(&mut self, msg: Message) {
        let msg = Arc::new(msg);
        self.store.ingest(&msg);
        self.out.push(OutMsg { dst: Dest::All, msg });
    }

    pub fn send_to(&mut self, dst: ProcessorId, msg: Message) {
        let msg = Arc::new(msg);
        if dst == self.me() {
            self.store.ingest(&msg);
        }
        self.out.push(OutMsg { dst: Dest::To(dst), msg });
    }

    /// Disseminates certificates that became new, restricted to the kinds the variant
    /// forwards. Returns whether anything was sent.
    pub fn disseminate_new_certs(&mut self, kinds: &[CertKind]) -> bool {
        let fresh = self.store.take_new_certs();
        let mut sent = false;
        for c in fresh {
            if kinds.contains(&c.kind) {
                // Our own copy is already in `certificates`.
                self.out.push(OutMsg { dst: Dest::All, msg: Arc::new(Message::Certificate(c)) });
                sent = true;
            }
        }
        sent
    }

    pub fn enter_view(&mut self, v: View, cause: EntryCause) {
        self.v = v;
        self.entered_at = self.now;
        self.entry_blocks.insert(v, self.store.blocks_len());
        self.event(StateEvent::EnterView { view: v, cause });
    }

    /// The reconstruction parameter g(S, v).
    pub fn g(&self, v: View) -> u32 {
        let p = self.params();
        let (lo, hi) = p.k_range();
        if let Some(k) = self.cfg.k_override {
            return k.clamp(lo, hi);
        }
        if p.is_initial(v) {
            return p.recovery_k();
        }
        (p.n.saturating_sub(self.cfg.f_a + 1)).clamp(lo, hi)
    }

    /// Pending transactions not known to be in the payload of `parent` or its ancestors.
    fn payload_for(&self, parent: &Digest) -> Vec<Tx> {
        let mut included: BTreeSet<&Tx> = BTreeSet::new();
        let mut cur = Some(*parent);
        while let Some(id) = cur {
            if let Some(txs) = self.store.payload_txs(&id) {
                included.extend(txs.iter());
            }
            cur = self.store.block(&id).filter(|b| !b.is_genesis()).map(Block::parent);
        }
        let mut chosen = Vec::new();
        let mut size = 0u64;
        for tx in &self.pool {
            if included.contains(tx) {
                continue;
            }
            let next = size + 4 + tx.len() as u64;
            if self.cfg.max_payload.is_some_and(|cap| next > cap) {
                break;
            }
            size = next;
            chosen.push(tx.clone());
        }
        chosen
    }

    /// ProposeBlock for view `v` on top of `parent`. Returns the new block.
    pub fn propose(&mut self, v: View, parent: Digest, epoch: bool, optimistic: bool) -> Block {
        let txs = self.payload_for(&parent);
        let payload = encode_payload(&txs);
        let k = self.g(v);
        let params = self.store.params.clone();
        let proposal = build_proposal(&params, &self.key, v, parent, &payload, k)
            .expect("g stays in range and payload fits the codec");
        let block = proposal.block.clone();
        self.store.note_authored(block.id(), txs.clone());
        self.event(StateEvent::Propose {
            view: v,
            block: block.id(),
            parent,
            k,
            beta: block.tag().beta,
            txs: txs.len(),
            optimistic,
        });
        self.proposals.entry(v).or_default().push(OwnProposal { block: block.clone(), epoch });
        self.last_proposal_at = Some(self.now);
        for cf in proposal.fragments {
            let j = cf.index();
            self.send_to(j, Message::Fragment(FragmentMsg { block: block.clone(), fragment: cf }));
        }
        block
    }

    pub fn vote(&mut self, block: &Block, stage: u8) {
        let vote = Vote::new(self.params(), &self.key, block, stage);
        let view = block.view();
        if stage == 1 {
            self.voted1.insert(view);
        } else {
            self.voted2.insert(view);
        }
        self.event(StateEvent::Vote { stage, view, block: block.id() });
        self.disseminate(Message::Vote(vote));
    }

    pub fn release(&mut self, block: &Block) {
        self.event(StateEvent::Release { view: block.view(), block: block.id() });
        let msg = ReleaseMsg::new(&self.key, block);
        self.disseminate(Message::Release(msg));
    }

    /// Nullifies the current view and every later view of its superview.
    pub fn nullify_rest_of_superview(&mut self) {
        let last = self.params().last_view_of_superview(self.v);
        for v in self.v..=last {
            if self.nullified.insert(v) {
                self.event(StateEvent::Nullify { view: v });
                let msg = NullifyMsg::new(self.params(), &self.key, v);
                self.disseminate(Message::Nullify(msg));
            }
        }
    }

    /// Votability clause (i) for the base protocol together with clause (ii): the parent is
    /// in `blocks` (or in `parent_ok`'s notion of it) with a lower view, and every skipped
    /// view carries an N-certificate.
    pub fn votable_with(&self, cf: &CertifiedFragment, block: &Block, parent_ok: impl Fn(&Digest) -> bool) -> bool {
        let v = self.v;
        if block.view() != v || cf.tag != *block.tag() {
            return false;
        }
        let Some(parent) = self.store.block(&block.parent()) else { return false };
        if parent.view() >= v || !parent_ok(&parent.id()) {
            return false;
        }
        (parent.view() + 1..v).all(|u| self.store.has_ncert(u))
    }

    /// Own proposals in superview `w` made under second-proposal epoch `epoch`.
    pub fn proposals_in(&self, w: u64, epoch: Option<bool>) -> impl Iterator<Item = (&View, &OwnProposal)> {
        let x = self.params().x;
        let first = crate::protocol_types::first_view(w, x);
        let last = crate::protocol_types::last_view(w, x);
        self.proposals
            .range(first..=last)
            .flat_map(|(v, ps)| ps.iter().map(move |p| (v, p)))
            .filter(move |(_, p)| epoch.is_none_or(|e| p.epoch == e))
    }
}

/// A replica of any variant.
pub enum Replica {
    Carnot1(Carnot1),
    Carnot1Opt(Carnot1Opt),
    Carnot2(Carnot2),
}

impl Replica {
    pub fn new(params: Arc<Params>, cfg: ReplicaConfig, key: SigningKey) -> Self {
        let core = Core::new(params.clone(), cfg, key);
        match params.variant {
            Variant::Carnot1 => Replica::Carnot1(Carnot1::new(core)),
            Variant::Carnot1Opt => Replica::Carnot1Opt(Carnot1Opt::new(core)),
            Variant::Carnot2 => Replica::Carnot2(Carnot2::new(core)),
        }
    }

    /// One timeslot: absorb `inbox` and `txs`, then run the instruction list.
    pub fn step(&mut self, now: Timeslot, inbox: &[(ProcessorId, SharedMessage)], txs: &[Tx]) -> StepOutput {
        match self {
            Replica::Carnot1(r) => r.step(now, inbox, txs),
            Replica::Carnot1Opt(r) => r.step(now, inbox, txs),
            Replica::Carnot2(r) => r.step(now, inbox, txs),
        }
    }

    pub fn core(&self) -> &Core {
        match self {
            Replica::Carnot1(r) => &r.core,
            Replica::Carnot1Opt(r) => &r.core,
            Replica::Carnot2(r) => &r.core,
        }
    }

    pub fn core_mut(&mut self) -> &mut Core {
        match self {
            Replica::Carnot1(r) => &mut r.core,
            Replica::Carnot1Opt(r) => &mut r.core,
            Replica::Carnot2(r) => &mut r.core,
        }
    }

    pub fn id(&self) -> ProcessorId {
        self.core().me()
    }

    pub fn view(&self) -> View {
        self.core().v
    }
}

/// Upper bound on instruction-list passes per timeslot; each pass that acts moves some
/// monotone flag, so this is never reached by correct code.
pub(crate) const MAX_PASSES: usize = 10_000;
