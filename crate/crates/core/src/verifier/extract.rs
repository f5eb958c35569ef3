//! The extraction function F over message sets, computed two ways.
//!
//! [`Extractor`] indexes every message of a trace once (verification, block table, one decode
//! per block) and then answers `F(M)` for many subsets `M` cheaply. [`brute_force_extract`]
//! enumerates every parent-linked chain and re-checks each condition from the raw messages.
//!
//! Conventions shared by both: genesis is the first block of every chain and counts as
//! decoded and certified; `n − f` distinct verified stage-2 votes count as a stage-2
//! certificate; for Carnot 2 a decoded payload must also pass the dual-root check, and
//! recovery fragments decode against the recovery tag.

use std::cell::OnceCell;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use thiserror::Error;

use super::MessageSet;
use crate::codec::{self, Fragment, Tag};
use crate::protocol_types::{decode_payload, Block, CertKind, Message, Params, SharedMessage, Tx};
use crate::replica::verify_dual_roots;
use crate::sim_crypto::{Digest, ProcessorId};

/// Bit set over processor indices `1..=256`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
struct IdxMask([u64; 4]);

impl IdxMask {
    fn set(&mut self, i: u32) {
        self.0[(i / 64) as usize % 4] |= 1 << (i % 64);
    }

    fn union(self, o: IdxMask) -> IdxMask {
        IdxMask([self.0[0] | o.0[0], self.0[1] | o.0[1], self.0[2] | o.0[2], self.0[3] | o.0[3]])
    }

    fn count(self) -> u32 {
        self.0.iter().map(|w| w.count_ones()).sum()
    }
}

#[derive(Clone, Copy, Debug)]
enum Contrib {
    Primary { block: usize, index: u32 },
    Recovery { block: usize, index: u32 },
    Stage2Cert { block: usize },
    Stage2Vote { block: usize, voter: ProcessorId },
}

struct Entry {
    block: Block,
    parent: Option<usize>,
    /// Recovery fragments decode against the primary tag.
    shared_tag: bool,
    primary: Vec<Fragment>,
    recovery: Vec<Fragment>,
    primary_payload: OnceCell<Option<Arc<Vec<Tx>>>>,
    recovery_payload: OnceCell<Option<Arc<Vec<Tx>>>>,
}

/// Per-trace index answering `F(M)` for subsets of the indexed messages.
pub struct Extractor {
    params: Params,
    entries: Vec<Entry>,
    by_id: HashMap<Digest, usize>,
    contrib: Vec<Vec<Contrib>>,
}

const GENESIS: usize = 0;

impl Extractor {
    pub fn new(params: &Params, messages: &[SharedMessage]) -> Self {
        let mut x = Extractor { params: params.clone(), entries: Vec::new(), by_id: HashMap::new(), contrib: Vec::new() };
        x.entry(params.genesis());
        for m in messages {
            let c = x.index(m);
            x.contrib.push(c);
        }
        for i in 0..x.entries.len() {
            let parent = x.entries[i].block.parent();
            x.entries[i].parent = if i == GENESIS { None } else { x.by_id.get(&parent).copied() };
        }
        x
    }

    fn entry(&mut self, b: &Block) -> Option<usize> {
        if let Some(&i) = self.by_id.get(&b.id()) {
            return Some(i);
        }
        if !b.is_genesis() && !self.params.block_well_formed(b) {
            return None;
        }
        let i = self.entries.len();
        let shared_tag = b.recovery_tag() == Some(b.tag());
        self.entries.push(Entry {
            block: b.clone(),
            parent: None,
            shared_tag,
            primary: Vec::new(),
            recovery: Vec::new(),
            primary_payload: OnceCell::new(),
            recovery_payload: OnceCell::new(),
        });
        self.by_id.insert(b.id(), i);
        Some(i)
    }

    fn index(&mut self, m: &Message) -> Vec<Contrib> {
        let n = self.params.n;
        let Some(block) = m.block() else { return Vec::new() };
        let Some(bi) = self.entry(block) else { return Vec::new() };
        match m {
            Message::Fragment(f) if f.fragment.tag == *block.tag() && f.fragment.verify(n) => {
                let index = f.fragment.index();
                self.entries[bi].primary.push(f.fragment.fragment.clone());
                vec![Contrib::Primary { block: bi, index }]
            }
            Message::Recovery(r) if r.verify(n) => {
                let index = r.fragment.index;
                self.entries[bi].recovery.push(r.fragment.clone());
                vec![Contrib::Recovery { block: bi, index }]
            }
            Message::Vote(v) if v.stage == 2 && v.verify(&self.params) => {
                vec![Contrib::Stage2Vote { block: bi, voter: v.voter }]
            }
            Message::Certificate(c) if c.kind == CertKind::Stage2Cert && c.verify(&self.params) => {
                vec![Contrib::Stage2Cert { block: bi }]
            }
            _ => Vec::new(),
        }
    }

    pub fn block_count(&self) -> usize {
        self.entries.len() - 1
    }

    pub fn block(&self, id: &Digest) -> Option<&Block> {
        self.by_id.get(id).map(|&i| &self.entries[i].block)
    }

    fn payload(&self, i: usize, recovery: bool) -> Option<&Arc<Vec<Tx>>> {
        let e = &self.entries[i];
        let (cell, tag, frags): (_, Tag, Vec<&Fragment>) = if recovery {
            let tag = *e.block.recovery_tag()?;
            let frags = if e.shared_tag { e.recovery.iter().chain(&e.primary).collect() } else { e.recovery.iter().collect() };
            (&e.recovery_payload, tag, frags)
        } else {
            let frags = if e.shared_tag { e.primary.iter().chain(&e.recovery).collect() } else { e.primary.iter().collect() };
            (&e.primary_payload, *e.block.tag(), frags)
        };
        cell.get_or_init(|| {
            let payload = codec::decode(&tag, frags, self.params.n).ok().flatten()?;
            if self.params.variant.is_carnot2() && !verify_dual_roots(&payload, &e.block, &self.params) {
                return None;
            }
            Some(Arc::new(decode_payload(&payload)))
        })
        .as_ref()
    }

    /// `F(M)`.
    pub fn extract(&self, m: &MessageSet) -> Vec<Tx> {
        self.extract_chain(m).into_iter().flat_map(|(_, txs)| txs.iter().cloned().collect::<Vec<_>>()).collect()
    }

    /// The unique longest qualifying chain (genesis excluded) with each block's transactions.
    pub fn extract_chain(&self, m: &MessageSet) -> Vec<(Digest, Arc<Vec<Tx>>)> {
        let len = self.entries.len();
        let mut prim = vec![IdxMask::default(); len];
        let mut rec = vec![IdxMask::default(); len];
        let mut votes = vec![IdxMask::default(); len];
        let mut cert = vec![false; len];
        for mid in m.iter() {
            for c in self.contrib.get(mid as usize).map(Vec::as_slice).unwrap_or(&[]) {
                match *c {
                    Contrib::Primary { block, index } => prim[block].set(index),
                    Contrib::Recovery { block, index } => rec[block].set(index),
                    Contrib::Stage2Vote { block, voter } => votes[block].set(voter),
                    Contrib::Stage2Cert { block } => cert[block] = true,
                }
            }
        }
        let n = self.params.n;
        let rk = self.params.recovery_k();
        let payload = |i: usize| -> Option<Arc<Vec<Tx>>> {
            if i == GENESIS {
                return Some(Arc::new(Vec::new()));
            }
            let e = &self.entries[i];
            let (p, r) = if e.shared_tag { (prim[i].union(rec[i]), prim[i].union(rec[i])) } else { (prim[i], rec[i]) };
            if p.count() >= e.block.tag().k {
                if let Some(txs) = self.payload(i, false) {
                    return Some(txs.clone());
                }
            }
            if self.params.variant.is_carnot2() && r.count() >= rk {
                return self.payload(i, true).cloned();
            }
            None
        };
        // depth[i]: length of the decodable chain from genesis to i, if any.
        let mut depth: Vec<Option<Option<usize>>> = vec![None; len];
        let mut payloads: Vec<Option<Arc<Vec<Tx>>>> = vec![None; len];
        fn resolve(
            i: usize,
            entries: &[Entry],
            depth: &mut Vec<Option<Option<usize>>>,
            payloads: &mut Vec<Option<Arc<Vec<Tx>>>>,
            payload: &dyn Fn(usize) -> Option<Arc<Vec<Tx>>>,
        ) -> Option<usize> {
            let mut path = Vec::new();
            let mut cur = i;
            let base = loop {
                if let Some(d) = depth[cur] {
                    break d;
                }
                path.push(cur);
                if cur == GENESIS {
                    break Some(0);
                }
                match entries[cur].parent {
                    Some(p) => cur = p,
                    None => break None,
                }
            };
            let mut d = base;
            // `path` ends at the first unresolved ancestor, or at genesis itself.
            for &j in path.iter().rev() {
                if j == GENESIS {
                    payloads[j] = payload(j);
                    d = Some(1);
                } else {
                    d = match (d, payload(j)) {
                        (Some(d), Some(txs)) => {
                            payloads[j] = Some(txs);
                            Some(d + 1)
                        }
                        _ => None,
                    };
                }
                depth[j] = Some(d);
            }
            d
        }
        let mut best: Option<(usize, Vec<usize>)> = None;
        for i in 0..len {
            let certified = i == GENESIS || cert[i] || votes[i].count() >= n - self.params.f;
            if !certified {
                continue;
            }
            let Some(d) = resolve(i, &self.entries, &mut depth, &mut payloads, &payload) else { continue };
            match &mut best {
                Some((bd, tips)) if *bd == d => tips.push(i),
                Some((bd, _)) if *bd > d => {}
                _ => best = Some((d, vec![i])),
            }
        }
        let Some((_, tips)) = best else { return Vec::new() };
        if tips.len() != 1 {
            return Vec::new();
        }
        let mut chain = Vec::new();
        let mut cur = tips[0];
        while cur != GENESIS {
            let e = &self.entries[cur];
            chain.push((e.block.id(), payloads[cur].clone().expect("resolved")));
            cur = e.parent.expect("resolved chain reaches genesis");
        }
        chain.reverse();
        chain
    }
}

/// `F(M)` from scratch over any message collection.
pub fn extract<'a>(params: &Params, messages: impl IntoIterator<Item = &'a SharedMessage>) -> Vec<Tx> {
    let msgs: Vec<SharedMessage> = messages.into_iter().cloned().collect();
    let x = Extractor::new(params, &msgs);
    x.extract(&MessageSet::full(msgs.len()))
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum ExtractError {
    #[error("{0} blocks exceed the brute-force limit of {MAX_BRUTE_FORCE_BLOCKS}")]
    TooLarge(usize),
}

pub const MAX_BRUTE_FORCE_BLOCKS: usize = 12;

/// `F(M)` by enumerating every parent-linked chain from genesis and checking each condition
/// literally against the raw messages.
pub fn brute_force_extract<'a>(
    params: &Params,
    messages: impl IntoIterator<Item = &'a Message>,
) -> Result<Vec<Tx>, ExtractError> {
    let msgs: Vec<&Message> = messages.into_iter().collect();
    let mut blocks: BTreeMap<Digest, &Block> = BTreeMap::new();
    for m in &msgs {
        if let Some(b) = m.block() {
            if params.block_well_formed(b) {
                blocks.insert(b.id(), b);
            }
        }
    }
    if blocks.len() > MAX_BRUTE_FORCE_BLOCKS {
        return Err(ExtractError::TooLarge(blocks.len()));
    }
    let n = params.n;

    let decodes = |b: &Block| -> Option<Vec<u8>> {
        let id = b.id();
        let primaries: Vec<&Fragment> = msgs
            .iter()
            .filter_map(|m| match m {
                Message::Fragment(f) if f.block.id() == id && f.fragment.tag == *b.tag() && f.fragment.verify(n) => {
                    Some(&f.fragment.fragment)
                }
                _ => None,
            })
            .collect();
        let recoveries: Vec<&Fragment> = msgs
            .iter()
            .filter_map(|m| match m {
                Message::Recovery(r) if r.block.id() == id && r.verify(n) => Some(&r.fragment),
                _ => None,
            })
            .collect();
        let ok = |p: &Vec<u8>| !params.variant.is_carnot2() || verify_dual_roots(p, b, params);
        let same = b.recovery_tag() == Some(b.tag());
        let all: Vec<&Fragment> = primaries.iter().chain(&recoveries).copied().collect();
        let first = if same { all.clone() } else { primaries };
        if let Ok(Some(p)) = codec::decode(b.tag(), first, n) {
            if ok(&p) {
                return Some(p);
            }
        }
        if !params.variant.is_carnot2() {
            return None;
        }
        let rtag = b.recovery_tag()?;
        let second = if same { all } else { recoveries };
        match codec::decode(rtag, second, n) {
            Ok(Some(p)) if ok(&p) => Some(p),
            _ => None,
        }
    };
    let certified = |b: &Block| -> bool {
        let id = b.id();
        let mut voters = BTreeSet::new();
        for m in &msgs {
            match m {
                Message::Certificate(c)
                    if c.kind == CertKind::Stage2Cert && c.block().is_some_and(|x| x.id() == id) && c.verify(params) =>
                {
                    return true;
                }
                Message::Vote(v) if v.stage == 2 && v.block.id() == id && v.verify(params) => {
                    voters.insert(v.voter);
                }
                _ => {}
            }
        }
        voters.len() as u32 >= n - params.f
    };

    // Every parent-linked sequence starting at genesis.
    let genesis = params.genesis();
    let mut chains: Vec<Vec<&Block>> = Vec::new();
    let mut stack: Vec<Vec<&Block>> = vec![vec![genesis]];
    while let Some(chain) = stack.pop() {
        let tip = chain.last().expect("nonempty").id();
        for b in blocks.values() {
            if b.parent() == tip && !chain.iter().any(|c| c.id() == b.id()) {
                let mut longer = chain.clone();
                longer.push(b);
                stack.push(longer);
            }
        }
        chains.push(chain);
    }

    let mut best: Option<(usize, Vec<Vec<Vec<u8>>>)> = None;
    for chain in chains {
        let mut payloads = Vec::new();
        let mut qualifies = true;
        for (i, b) in chain.iter().enumerate() {
            let later_certified = chain[i..].iter().any(|c| c.is_genesis() || certified(c));
            let payload = if b.is_genesis() { Some(Vec::new()) } else { decodes(b) };
            match payload {
                Some(p) if later_certified => payloads.push(p),
                _ => {
                    qualifies = false;
                    break;
                }
            }
        }
        if !qualifies {
            continue;
        }
        match &mut best {
            Some((len, all)) if *len == chain.len() => all.push(payloads),
            Some((len, _)) if *len > chain.len() => {}
            _ => best = Some((chain.len(), vec![payloads])),
        }
    }
    match best {
        Some((_, mut all)) if all.len() == 1 => {
            Ok(all.pop().expect("one chain").iter().flat_map(|p| decode_payload(p)).collect())
        }
        _ => Ok(Vec::new()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol_types::{build_proposal, encode_payload, FragmentMsg, Variant, Vote};
    use crate::sim_crypto::KeyRing;

    struct Fixture {
        params: Params,
        ring: KeyRing,
    }

    impl Fixture {
        fn new(variant: Variant) -> Self {
            let (n, f) = if variant.is_carnot2() { (4, 1) } else { (5, 1) };
            Fixture { params: Params::new(variant, n, f, 2).unwrap(), ring: KeyRing::new(n) }
        }

        fn block(&self, view: u64, parent: Digest, tx: &str, out: &mut Vec<SharedMessage>, fragments: usize) -> Block {
            let payload = encode_payload(&[Tx::from(tx.as_bytes().to_vec())]);
            let k = self.params.recovery_k().max(self.params.k_range().0);
            let leader = self.params.lead(view);
            let p = build_proposal(&self.params, &self.ring.key(leader), view, parent, &payload, k).unwrap();
            for f in p.fragments.iter().take(fragments) {
                out.push(Arc::new(Message::Fragment(FragmentMsg { block: p.block.clone(), fragment: f.clone() })));
            }
            p.block
        }

        fn certify(&self, b: &Block, out: &mut Vec<SharedMessage>) {
            let q = self.params.n - self.params.f;
            for j in 1..=q {
                out.push(Arc::new(Message::Vote(Vote::new(&self.params, &self.ring.key(j), b, 2))));
            }
        }

        fn both(&self, msgs: &[SharedMessage]) -> (Vec<Tx>, Vec<Tx>) {
            let fast = extract(&self.params, msgs);
            let slow = brute_force_extract(&self.params, msgs.iter().map(|m| &**m)).unwrap();
            (fast, slow)
        }
    }

    fn txs(names: &[&str]) -> Vec<Tx> {
        names.iter().map(|s| Tx::from(s.as_bytes().to_vec())).collect()
    }

    #[test]
    fn empty_set_extracts_nothing() {
        let fx = Fixture::new(Variant::Carnot1);
        assert_eq!(fx.both(&[]), (vec![], vec![]));
    }

    #[test]
    fn finalised_chain_of_three() {
        let fx = Fixture::new(Variant::Carnot1);
        let mut m = Vec::new();
        let b1 = fx.block(1, fx.params.genesis().id(), "a", &mut m, 5);
        let b2 = fx.block(2, b1.id(), "b", &mut m, 5);
        let b3 = fx.block(3, b2.id(), "c", &mut m, 5);
        for b in [&b1, &b2, &b3] {
            fx.certify(b, &mut m);
        }
        let want = txs(&["a", "b", "c"]);
        assert_eq!(fx.both(&m), (want.clone(), want));
    }

    #[test]
    fn certified_tip_carries_uncertified_ancestors() {
        let fx = Fixture::new(Variant::Carnot1);
        let mut m = Vec::new();
        let b1 = fx.block(1, fx.params.genesis().id(), "a", &mut m, 5);
        let b2 = fx.block(2, b1.id(), "b", &mut m, 5);
        let b3 = fx.block(3, b2.id(), "c", &mut m, 5);
        fx.certify(&b3, &mut m);
        let want = txs(&["a", "b", "c"]);
        assert_eq!(fx.both(&m), (want.clone(), want));
    }

    #[test]
    fn undecodable_ancestor_blocks_the_chain() {
        let fx = Fixture::new(Variant::Carnot1);
        let mut m = Vec::new();
        let b1 = fx.block(1, fx.params.genesis().id(), "a", &mut m, 5);
        fx.certify(&b1, &mut m);
        let b2 = fx.block(2, b1.id(), "b", &mut m, 1);
        let b3 = fx.block(3, b2.id(), "c", &mut m, 5);
        fx.certify(&b3, &mut m);
        let want = txs(&["a"]);
        assert_eq!(fx.both(&m), (want.clone(), want));
    }

    #[test]
    fn two_longest_chains_extract_nothing() {
        let fx = Fixture::new(Variant::Carnot1);
        let mut m = Vec::new();
        let b1 = fx.block(1, fx.params.genesis().id(), "a", &mut m, 5);
        let b2 = fx.block(2, fx.params.genesis().id(), "b", &mut m, 5);
        fx.certify(&b1, &mut m);
        fx.certify(&b2, &mut m);
        assert_eq!(fx.both(&m), (vec![], vec![]));
    }

    #[test]
    fn carnot2_recovery_fragments_decode() {
        let fx = Fixture::new(Variant::Carnot2);
        let mut m = Vec::new();
        // k = n - 1 primaries, only two delivered; recovery fragments at n - f - 1 = 2.
        let payload = encode_payload(&txs(&["r"]));
        let p = build_proposal(&fx.params, &fx.ring.key(fx.params.lead(1)), 1, fx.params.genesis().id(), &payload, 3).unwrap();
        for f in p.fragments.iter().take(2) {
            m.push(Arc::new(Message::Fragment(FragmentMsg { block: p.block.clone(), fragment: f.clone() })));
        }
        fx.certify(&p.block, &mut m);
        assert_eq!(fx.both(&m), (vec![], vec![]));
        let (_, rec) = codec::recovery_encode(&payload, 4, 1).unwrap();
        for cf in rec.iter().take(2) {
            m.push(Arc::new(Message::Recovery(crate::protocol_types::RecoveryFragment {
                block: p.block.clone(),
                fragment: cf.fragment.clone(),
                path: cf.path.clone(),
            })));
        }
        let want = txs(&["r"]);
        assert_eq!(fx.both(&m), (want.clone(), want));
    }

    #[test]
    fn brute_force_refuses_large_sets() {
        let fx = Fixture::new(Variant::Carnot1);
        let mut m = Vec::new();
        let mut parent = fx.params.genesis().id();
        for v in 1..=13 {
            parent = fx.block(v, parent, "t", &mut m, 1).id();
        }
        assert_eq!(brute_force_extract(&fx.params, m.iter().map(|x| &**x)), Err(ExtractError::TooLarge(13)));
    }
}
