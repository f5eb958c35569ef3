//! Carnot 1 (n ≥ 4f+1): one instruction list, run to a fixpoint every timeslot.

use crate::codec::CertifiedFragment;
use crate::protocol_types::{last_view, Block, CertKind, FragmentMsg, Message, SharedMessage, Timeslot, Tx, View};
use crate::replica::{Core, EntryCause, StepOutput, MAX_PASSES};
use crate::sim_crypto::{Digest, ProcessorId};

pub struct Carnot1 {
    pub core: Core,
}

impl Carnot1 {
    pub fn new(core: Core) -> Self {
        Carnot1 { core }
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

    fn pass(&mut self) {
        let c = &mut self.core;
        c.disseminate_new_certs(&[CertKind::NCert, CertKind::Stage2Cert, CertKind::MCert]);

        if c.me() == c.params().lead(c.v) {
            if let Some((view, parent)) = propose_ready(c) {
                c.propose(view, parent, false, false);
            }
        }

        let v = c.v;
        if !c.voted1.contains(&v) {
            if let Some((block, cf)) = first_votable(c) {
                c.vote(&block, 1);
                if c.me() != c.params().lead(v) {
                    c.disseminate(Message::Fragment(FragmentMsg { block, fragment: cf }));
                }
            }
        }

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

        if !c.nullified.contains(&c.v) && timeout_ready(c) {
            c.nullify_rest_of_superview();
        }

        if c.store.has_ncert(c.v) {
            let next = c.v + 1;
            c.enter_view(next, EntryCause::NCert);
        }
    }
}

/// ProposeReady for Carnot 1 and Carnot 2 (the caller checks `p_i = lead(v)`), combined with
/// the parent selection of ProposeBlock. Returns the view to propose for and the parent.
pub(crate) fn propose_ready(c: &Core) -> Option<(View, Digest)> {
    let p = c.params();
    let w = p.superview_of(c.v);
    let latest = c.proposals_in(w, None).last().map(|(v, prop)| (*v, prop.block.id()));
    match latest {
        None => p.is_initial(c.v).then_some((c.v, c.b)),
        Some((pv, parent)) => {
            let finished = c.last_proposal_at.is_some_and(|t| t < c.now);
            (finished && pv < last_view(w, p.x)).then_some((pv + 1, parent))
        }
    }
}

/// The first certified fragment at our index that is votable for the current view, in
/// receipt order. Clause (i) uses the current `blocks`.
pub(crate) fn first_votable(c: &Core) -> Option<(Block, CertifiedFragment)> {
    c.store
        .own_fragments_for_view(c.v)
        .find(|(b, cf)| c.votable_with(cf, b, |id| c.store.in_blocks(id)))
        .map(|(b, cf)| (b.clone(), cf.clone()))
}

pub(crate) fn timeout_ready(c: &Core) -> bool {
    let v = c.v;
    let t = c.timer();
    let d = c.cfg.delta;
    let v1 = c.voted1.contains(&v);
    let v2 = c.voted2.contains(&v);
    if c.params().is_initial(v) {
        (t >= 2 * d && !v1 && !v2) || (t >= 3 * d && !v2)
    } else {
        (t >= d && !v1 && !v2) || (t >= 2 * d && !v2)
    }
}
