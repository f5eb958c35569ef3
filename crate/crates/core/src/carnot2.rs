//! Carnot 2 (n ≥ 3f+1): stage-1 certificates, view progression on decode, and recovery
//! fragments sent when a block's M-certificate is late.

use std::collections::{BTreeMap, BTreeSet};

use crate::carnot1_core::{first_votable, propose_ready};
use crate::codec::recovery_encode;
use crate::protocol_types::{
    CertKind, FragmentMsg, Message, RecoveryFragment, SharedMessage, Timeslot, Tx,
};
use crate::replica::{Core, EntryCause, StateEvent, StepOutput, MAX_PASSES};
use crate::sim_crypto::{Digest, ProcessorId};

pub struct Carnot2 {
    pub core: Core,
    /// Timer expiry per block, set when the block first enters `blocks◇`.
    pub timers: BTreeMap<Digest, Timeslot>,
    fired: BTreeSet<Digest>,
    /// Indices we have sent a recovery fragment of each block to.
    pub recovery_sent: BTreeMap<Digest, BTreeSet<u32>>,
    /// Own fragments already disseminated, keyed by block and whether the fragment is a
    /// distinct recovery fragment.
    echoed: BTreeSet<(Digest, bool)>,
}

impl Carnot2 {
    pub fn new(core: Core) -> Self {
        Carnot2 {
            core,
            timers: BTreeMap::new(),
            fired: BTreeSet::new(),
            recovery_sent: BTreeMap::new(),
            echoed: BTreeSet::new(),
        }
    }

    pub fn step(&mut self, now: Timeslot, inbox: &[(ProcessorId, SharedMessage)], txs: &[Tx]) -> StepOutput {
        self.core.begin(now, inbox, txs);
        for _ in 0..MAX_PASSES {
            let before = self.core.fingerprint();
            self.pass();
            self.recovery();
            if self.core.fingerprint() == before {
                break;
            }
        }
        self.core.finish()
    }

    fn pass(&mut self) {
        let rk = self.core.params().recovery_k();
        let c = &mut self.core;
        c.disseminate_new_certs(&[CertKind::NCert, CertKind::Stage1Cert, CertKind::MCert]);

        if c.me() == c.params().lead(c.v) {
            if let Some((view, parent)) = propose_ready(c) {
                let b = c.propose(view, parent, false, false);
                if b.tag().k == rk {
                    // The primary fragments just sent are the recovery fragments.
                    let n = c.params().n;
                    self.recovery_sent.insert(b.id(), (1..=n).collect());
                }
            }
        }

        let c = &mut self.core;
        let v = c.v;
        if !c.voted1.contains(&v) {
            if let Some((block, cf)) = first_votable(c) {
                c.vote(&block, 1);
                if c.me() != c.params().lead(v) {
                    self.echoed.insert((block.id(), false));
                    c.disseminate(Message::Fragment(FragmentMsg { block, fragment: cf }));
                }
            }
        }

        if let Some(b) = c.store.blocks_at_view(v).cloned() {
            c.b = b.id();
            if !c.nullified.contains(&v) {
                c.vote(&b, 2);
            }
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

    /// Block timers, recovery sends and echoes of our own fragments.
    fn recovery(&mut self) {
        let now = self.core.now;
        let s = self.core.cfg.s;
        for id in self.core.store.take_new_diamond() {
            let expires = now + s;
            self.timers.entry(id).or_insert(expires);
            self.core.event(StateEvent::TimerSet { block: id, expires });
        }

        let due: Vec<Digest> = self
            .timers
            .iter()
            .filter(|(id, t)| **t <= now && !self.fired.contains(*id))
            .map(|(id, _)| *id)
            .collect();
        for id in due {
            self.fired.insert(id);
            let sent = if self.core.store.in_dagger(&id) { 0 } else { self.send_recovery(&id) };
            self.core.event(StateEvent::TimerFired { block: id, recovery_sent: sent });
        }

        let rk = self.core.params().recovery_k();
        let me = self.core.me();
        let ids: Vec<Digest> = self.core.store.own_fragment_blocks().copied().collect();
        for id in ids {
            let store = &self.core.store;
            let Some(b) = store.block(&id).cloned() else { continue };
            if me == self.core.params().lead(b.view()) || !store.has_cert(CertKind::Stage1Cert, &id) {
                continue;
            }
            let distinct = b.tag().k != rk;
            if let Some(cf) = store.own_fragment(&id).cloned() {
                if self.echoed.insert((id, false)) {
                    self.core.disseminate(Message::Fragment(FragmentMsg { block: b.clone(), fragment: cf }));
                }
            }
            if let Some(rf) = self.core.store.own_recovery(&id).cloned() {
                if self.echoed.insert((id, distinct)) {
                    self.core.disseminate(Message::Recovery(rf));
                }
            }
        }
    }

    fn send_recovery(&mut self, id: &Digest) -> u32 {
        let c = &self.core;
        let (Some(b), Some(payload)) = (c.store.block(id).cloned(), c.store.payload(id).cloned()) else {
            return 0;
        };
        let p = c.params();
        let (_, frags) = recovery_encode(&payload, p.n, p.f).expect("decoded payload re-encodes");
        let same = b.tag().k == p.recovery_k();
        let me = c.me();
        let mut sent = 0;
        for cf in frags {
            let j = cf.index();
            let exchanged = self.core.store.has_recovery_at(id, j)
                || self.recovery_sent.get(id).is_some_and(|s| s.contains(&j));
            if j == me || exchanged {
                continue;
            }
            self.recovery_sent.entry(*id).or_default().insert(j);
            let msg = if same {
                Message::Fragment(FragmentMsg { block: b.clone(), fragment: cf })
            } else {
                Message::Recovery(RecoveryFragment { block: b.clone(), fragment: cf.fragment, path: cf.path })
            };
            self.core.send_to(j, msg);
            sent += 1;
        }
        sent
    }
}

pub(crate) fn timeout_ready(c: &Core) -> bool {
    let v = c.v;
    let t = c.timer();
    let d = c.cfg.delta;
    let s = c.cfg.s;
    let v1 = c.voted1.contains(&v);
    let v2 = c.voted2.contains(&v);
    if c.params().is_initial(v) {
        (t >= 4 * d + 2 * s && !v1 && !v2) || (t >= 5 * d + 2 * s && !v2)
    } else {
        (t >= d && !v1 && !v2) || (t >= 3 * d && !v2)
    }
}
