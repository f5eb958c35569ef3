//! Carnot 1 with optimistic proposals: the next superview's leader proposes as soon as it
//! holds a votable fragment for the last view of the current one, and locks the proposal
//! behind a release message.

use std::collections::BTreeSet;

use crate::codec::CertifiedFragment;
use crate::protocol_types::{
    last_view, Block, CertKind, FragmentMsg, Message, SharedMessage, Timeslot, Tx, View,
};
use crate::replica::{Core, EntryCause, StateEvent, StepOutput, MAX_PASSES};
use crate::sim_crypto::{Digest, ProcessorId};

pub struct Carnot1Opt {
    pub core: Core,
    pub oprop: BTreeSet<View>,
    pub opar: Digest,
    /// Superviews whose second-proposal flag is set.
    pub second_propose: BTreeSet<u64>,
    /// Initial views for which the release decision has been taken.
    decided: BTreeSet<View>,
}

/// Which ProposeBlock step picks the view and parent.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProposeCase {
    Optimistic,
    Initial,
    Pipelined,
}

impl Carnot1Opt {
    pub fn new(core: Core) -> Self {
        let opar = core.params().genesis().id();
        Carnot1Opt { core, oprop: BTreeSet::new(), opar, second_propose: BTreeSet::new(), decided: BTreeSet::new() }
    }

    pub fn step(&mut self, now: Timeslot, inbox: &[(ProcessorId, SharedMessage)], txs: &[Tx]) -> StepOutput {
        self.core.begin(now, inbox, txs);
        for _ in 0..MAX_PASSES {
            let before = self.core.fingerprint();
            self.pass();
            if self.core.fingerprint() == before {
                break;
            }
        }
        self.core.finish()
    }

    fn epoch(&self, w: u64) -> bool {
        self.second_propose.contains(&w)
    }

    fn pass(&mut self) {
        self.core.disseminate_new_certs(&[CertKind::NCert, CertKind::Stage2Cert, CertKind::MCert]);

        let v = self.core.v;
        let me = self.core.me();
        if !self.core.voted1.contains(&v) {
            if let Some((block, cf)) = self.first_votable() {
                self.core.vote(&block, 1);
                let next_lead = self.core.params().lead(v + 1);
                if me != next_lead {
                    self.core.disseminate(Message::Fragment(FragmentMsg { block: block.clone(), fragment: cf }));
                } else if self.core.params().is_initial(v + 1) {
                    self.oprop.insert(v + 1);
                    self.opar = block.id();
                }
            }
        }

        let p = self.core.params();
        if p.is_initial(v)
            && me == p.lead(v)
            && self.oprop.contains(&v)
            && self.core.timer() >= 2 * self.core.cfg.delta
            && self.decided.insert(v)
        {
            if self.core.store.in_blocks(&self.opar) {
                let optimistic = self.core.proposals.get(&v).and_then(|ps| ps.first()).map(|p| p.block.clone());
                if let Some(b) = optimistic {
                    self.core.release(&b);
                }
            } else {
                let w = self.core.params().superview_of(v);
                self.second_propose.insert(w);
                self.core.event(StateEvent::SecondPropose { superview: w });
            }
        }

        if let Some(case) = self.propose_ready() {
            self.propose_block(case);
        }

        let v = self.core.v;
        let c = &mut self.core;
        if let Some(b) = c.store.star_at_view(v).cloned() {
            if !c.nullified.contains(&v) && !c.voted2.contains(&v) {
                c.vote(&b, 2);
            }
        }

        if let Some(b) = c.store.blocks_at_view(v).cloned() {
            if !c.nullified.contains(&v) && !c.voted2.contains(&v) {
                c.vote(&b, 2);
            }
            c.b = b.id();
            c.enter_view(v + 1, EntryCause::Block);
        }

        if !self.core.nullified.contains(&self.core.v) && self.timeout_ready() {
            self.core.nullify_rest_of_superview();
        }

        let c = &mut self.core;
        if c.store.has_ncert(c.v) {
            let next = c.v + 1;
            c.enter_view(next, EntryCause::NCert);
        }
    }

    /// Votability with clause (i) split by view kind: initial views accept a parent only if
    /// it was in `blocks` at view entry, or if the leader has released the block.
    pub fn votable(&self, block: &Block, cf: &CertifiedFragment) -> bool {
        let c = &self.core;
        let v = c.v;
        if !c.params().is_initial(v) {
            return c.votable_with(cf, block, |id| c.store.in_blocks(id));
        }
        let at_entry = c.entry_blocks.get(&v).copied().unwrap_or(0);
        let released = c.store.released(&block.id());
        c.votable_with(cf, block, |id| {
            c.store.blocks_rank(id).is_some_and(|r| r < at_entry || released)
        })
    }

    fn first_votable(&self) -> Option<(Block, CertifiedFragment)> {
        self.core
            .store
            .own_fragments_for_view(self.core.v)
            .find(|(b, cf)| self.votable(b, cf))
            .map(|(b, cf)| (b.clone(), cf.clone()))
    }

    pub fn propose_ready(&self) -> Option<ProposeCase> {
        let c = &self.core;
        let p = c.params();
        let v = c.v;
        let me = c.me();
        let w = p.superview_of(v + 1);
        let epoch = self.epoch(w);
        if p.is_initial(v + 1) {
            let case1 = me == p.lead(v + 1)
                && c.voted1.contains(&v)
                && self.oprop.contains(&(v + 1))
                && !c.proposals.contains_key(&(v + 1));
            return case1.then_some(ProposeCase::Optimistic);
        }
        let mine: Vec<View> = c.proposals_in(w, Some(epoch)).map(|(pv, _)| *pv).collect();
        if p.is_initial(v) && me == p.lead(v) && !mine.contains(&v) {
            return Some(ProposeCase::Initial);
        }
        let finished = c.last_proposal_at.is_some_and(|t| t < c.now);
        let greatest = mine.last().copied();
        let case3 = me == p.lead(v + 1) && finished && greatest.is_some_and(|g| g < last_view(w, p.x));
        case3.then_some(ProposeCase::Pipelined)
    }

    fn propose_block(&mut self, case: ProposeCase) {
        let v = self.core.v;
        match case {
            ProposeCase::Optimistic => {
                self.core.propose(v + 1, self.opar, false, true);
            }
            ProposeCase::Initial => {
                let w = self.core.params().superview_of(v);
                let parent = self.core.b;
                let b = self.core.propose(v, parent, self.epoch(w), false);
                self.core.release(&b);
            }
            ProposeCase::Pipelined => {
                let w = self.core.params().superview_of(v + 1);
                let epoch = self.epoch(w);
                let (pv, parent) = self
                    .core
                    .proposals_in(w, Some(epoch))
                    .last()
                    .map(|(pv, p)| (*pv, p.block.id()))
                    .expect("pipelining follows an earlier proposal");
                self.core.propose(pv + 1, parent, epoch, false);
            }
        }
    }

    pub fn timeout_ready(&self) -> bool {
        let c = &self.core;
        let v = c.v;
        let t = c.timer();
        let d = c.cfg.delta;
        let v1 = c.voted1.contains(&v);
        let v2 = c.voted2.contains(&v);
        if c.params().is_initial(v) {
            (t >= 2 * d && !c.store.saw_fragment_for_view(v))
                || (t >= 4 * d && !v1 && !v2)
                || (t >= 5 * d && !v2)
        } else {
            (t >= d && !v1 && !v2) || (t >= 2 * d && !v2)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol_types::{build_proposal, encode_payload, Params, ReleaseMsg, Variant, Vote};
    use crate::replica::ReplicaConfig;
    use crate::sim_crypto::KeyRing;
    use std::sync::Arc;

    // n = 5, f = 1, x = 2: lead(1) = lead(2) = p2, lead(3) = lead(4) = p3.
    fn setup(me: ProcessorId) -> (Arc<Params>, KeyRing, Carnot1Opt) {
        let params = Arc::new(Params::new(Variant::Carnot1Opt, 5, 1, 2).unwrap());
        let ring = KeyRing::new(5);
        let cfg = ReplicaConfig { delta: 10, s: 0, f_a: 1, k_override: None, max_payload: None };
        let r = Carnot1Opt::new(Core::new(params.clone(), cfg, ring.key(me)));
        (params, ring, r)
    }

    fn frag_msg(params: &Params, ring: &KeyRing, leader: ProcessorId, view: View, parent: Digest, to: u32) -> (Block, SharedMessage) {
        let prop = build_proposal(params, &ring.key(leader), view, parent, &encode_payload(&[]), 3).unwrap();
        let cf = prop.fragments[(to - 1) as usize].clone();
        (prop.block.clone(), Arc::new(Message::Fragment(FragmentMsg { block: prop.block, fragment: cf })))
    }

    fn mcert_votes(params: &Params, ring: &KeyRing, b: &Block) -> Vec<(ProcessorId, SharedMessage)> {
        [1, 2].iter().map(|&j| (j, Arc::new(Message::Vote(Vote::new(params, &ring.key(j), b, 2))))).collect()
    }

    #[test]
    fn initial_view_locks_parent_added_after_entry() {
        let (params, ring, mut r) = setup(4);
        let g = params.genesis().id();
        // Enter view 3 (initial) by N-certificates, then learn a view-2 parent.
        let (b2, _) = frag_msg(&params, &ring, 2, 2, g, 4);
        r.core.v = 3;
        let (b3, m3) = frag_msg(&params, &ring, 3, 3, b2.id(), 4);
        r.step(1, &[(3, m3)], &[]);
        for (_, m) in mcert_votes(&params, &ring, &b2) {
            r.core.store.ingest(&m);
        }
        for v in [1, 2] {
            for j in [1, 2, 5] {
                let n = crate::protocol_types::NullifyMsg::new(&params, &ring.key(j), v);
                r.core.store.ingest(&Message::Nullify(n));
            }
        }
        assert!(r.core.store.in_blocks(&b2.id()));
        assert!(r.first_votable().is_none());
        r.core.store.ingest(&Message::Release(ReleaseMsg::new(&ring.key(3), &b3)));
        assert!(r.first_votable().is_some());
    }

    #[test]
    fn non_initial_view_uses_current_blocks() {
        let (params, ring, mut r) = setup(4);
        let g = params.genesis().id();
        r.core.v = 2;
        for j in [1, 2, 5] {
            let n = crate::protocol_types::NullifyMsg::new(&params, &ring.key(j), 1);
            r.core.store.ingest(&Message::Nullify(n));
        }
        let (_, m) = frag_msg(&params, &ring, 2, 2, g, 4);
        r.core.store.ingest(&m);
        assert!(r.first_votable().is_some());
    }

    #[test]
    fn next_leader_proposes_optimistically() {
        // p3 leads view 3; in view 2 it receives a votable fragment of p2's view-2 block.
        let (params, ring, mut r) = setup(3);
        let g = params.genesis().id();
        r.core.v = 2;
        r.core.entry_blocks.insert(2, 1);
        for j in [1, 2, 5] {
            let n = crate::protocol_types::NullifyMsg::new(&params, &ring.key(j), 1);
            r.core.store.ingest(&Message::Nullify(n));
        }
        let (b2, m) = frag_msg(&params, &ring, 2, 2, g, 3);
        let out = r.step(1, &[(2, m)], &[]);
        assert!(r.oprop.contains(&3));
        assert_eq!(r.opar, b2.id());
        let p = r.core.proposals.get(&3).expect("optimistic proposal");
        assert_eq!(p[0].block.parent(), b2.id());
        // The next leader does not echo its fragment.
        assert!(!out.sends.iter().any(|o| matches!(&*o.msg, Message::Fragment(f) if f.block.view() == 2)));
        assert_eq!(r.propose_ready(), None);
    }

    #[test]
    fn unreleased_optimistic_proposal_triggers_second_proposal() {
        let (params, ring, mut r) = setup(3);
        let g = params.genesis().id();
        r.core.v = 2;
        for j in [1, 2, 5] {
            let n = crate::protocol_types::NullifyMsg::new(&params, &ring.key(j), 1);
            r.core.store.ingest(&Message::Nullify(n));
        }
        let (_, m) = frag_msg(&params, &ring, 2, 2, g, 3);
        r.step(1, &[(2, m)], &[]);
        // View 2 ends by N-certificate; opar never enters blocks.
        let ns: Vec<_> = [1, 2, 5]
            .iter()
            .map(|&j| (j, Arc::new(Message::Nullify(crate::protocol_types::NullifyMsg::new(&params, &ring.key(j), 2)))))
            .collect();
        r.step(2, &ns, &[]);
        assert_eq!(r.core.v, 3);
        let out = r.step(22, &[], &[]);
        assert!(r.second_propose.contains(&2));
        assert_eq!(r.core.proposals[&3].len(), 2);
        let second = &r.core.proposals[&3][1];
        assert!(second.epoch);
        assert!(out.events.contains(&StateEvent::Release { view: 3, block: second.block.id() }));
        // Decided once.
        r.step(23, &[], &[]);
        assert_eq!(r.core.proposals[&3].len(), 2);
    }

    #[test]
    fn certified_opar_releases_optimistic_block() {
        let (params, ring, mut r) = setup(3);
        let g = params.genesis().id();
        r.core.v = 2;
        for j in [1, 2, 5] {
            let n = crate::protocol_types::NullifyMsg::new(&params, &ring.key(j), 1);
            r.core.store.ingest(&Message::Nullify(n));
        }
        let (b2, m) = frag_msg(&params, &ring, 2, 2, g, 3);
        r.step(1, &[(2, m)], &[]);
        r.step(2, &mcert_votes(&params, &ring, &b2), &[]);
        assert_eq!(r.core.v, 3);
        let out = r.step(22, &[], &[]);
        let opt = r.core.proposals[&3][0].block.id();
        assert!(out.events.contains(&StateEvent::Release { view: 3, block: opt }));
        assert!(r.second_propose.is_empty());
    }

    #[test]
    fn timeout_clauses() {
        let (params, ring, mut r) = setup(4);
        r.core.now = 20;
        assert!(r.timeout_ready());
        let (_, m) = frag_msg(&params, &ring, 2, 1, params.genesis().id(), 5);
        r.core.store.ingest(&m);
        assert!(!r.timeout_ready());
        r.core.now = 40;
        assert!(r.timeout_ready());
        r.core.voted1.insert(1);
        assert!(!r.timeout_ready());
        r.core.now = 50;
        assert!(r.timeout_ready());
    }
}
