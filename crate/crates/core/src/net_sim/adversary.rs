//! The adversary interface and the built-in strategies.
//!
//! A corrupted processor keeps running its replica as a *shadow*; the adversary sees the
//! shadow's state and rewrites its output. It can only sign for corrupted processors, through
//! [`AdversaryKeys`].

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{SimConfig, SimError};
use crate::codec::{self, CertifiedFragment};
use crate::protocol_types::{
    build_proposal, encode_payload, lead, Block, CertKind, FragmentMsg, Message, Params, Timeslot, Tx, View,
};
use crate::replica::{Dest, OutMsg, Replica};
use crate::sim_crypto::{AdversaryKeys, Digest, ProcessorId};

/// What the adversary may look at when rewriting a corrupted processor's output.
pub struct AdvCtx<'a> {
    pub now: Timeslot,
    pub cfg: &'a SimConfig,
    pub params: &'a Params,
    pub keys: &'a AdversaryKeys,
    pub shadow: &'a Replica,
}

pub trait Adversary {
    /// The serialisable description recorded in trace headers.
    fn spec(&self) -> AdversarySpec;

    /// Processors to corrupt at the start of timeslot `t`.
    fn corruptions(&mut self, _t: Timeslot, _params: &Params) -> Vec<ProcessorId> {
        Vec::new()
    }

    /// Rewrites what corrupted processor `pid` sends this timeslot.
    fn on_output(&mut self, _ctx: &AdvCtx<'_>, _pid: ProcessorId, sends: Vec<OutMsg>) -> Vec<OutMsg> {
        sends
    }

    /// Delivery time for a message sent at `t`; `default` comes from the delay model.
    fn schedule(
        &mut self,
        _src: ProcessorId,
        _dst: ProcessorId,
        _msg: &Message,
        _t: Timeslot,
        default: Timeslot,
        _cfg: &SimConfig,
    ) -> Timeslot {
        default
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum AdversarySpec {
    Honest,
    /// The processors stop sending from timeslot `at`.
    Crash {
        processors: Vec<ProcessorId>,
        #[serde(default)]
        at: Timeslot,
    },
    /// Every message takes the longest delay the model allows.
    MaxDelay,
    /// `lead(view)` sends a second, conflicting block to the upper half of the processors.
    EquivocatingLeader { view: View },
    /// `lead(view)` sends primary fragments only to `recipients` (default: everyone but the
    /// highest-indexed correct processor) and forwards its own fragment only to `decoders`
    /// (default: the first `f` correct recipients). Corrupted processors withhold stage-2
    /// votes for the block.
    PartialFragmentLeader {
        view: View,
        #[serde(default)]
        recipients: Option<Vec<ProcessorId>>,
        #[serde(default)]
        decoders: Option<Vec<ProcessorId>>,
    },
    /// `lead(view)` proposes a block whose recovery tag commits to a different payload.
    BogusRecoveryRootLeader { view: View },
    /// `lead(view)` holds back everything about its view-`view` blocks for `hold` timeslots
    /// (default 2Δ).
    WithholdThenRelease {
        view: View,
        #[serde(default)]
        hold: Option<Timeslot>,
    },
}

impl AdversarySpec {
    pub fn name(&self) -> &'static str {
        match self {
            AdversarySpec::Honest => "honest",
            AdversarySpec::Crash { .. } => "crash",
            AdversarySpec::MaxDelay => "max_delay",
            AdversarySpec::EquivocatingLeader { .. } => "equivocating_leader",
            AdversarySpec::PartialFragmentLeader { .. } => "partial_fragment_leader",
            AdversarySpec::BogusRecoveryRootLeader { .. } => "bogus_recovery_root_leader",
            AdversarySpec::WithholdThenRelease { .. } => "withhold_then_release",
        }
    }

    /// Processors this strategy corrupts.
    pub fn corrupted(&self, cfg: &SimConfig) -> BTreeSet<ProcessorId> {
        match self {
            AdversarySpec::Honest | AdversarySpec::MaxDelay => BTreeSet::new(),
            AdversarySpec::Crash { processors, .. } => processors.iter().copied().collect(),
            AdversarySpec::EquivocatingLeader { view }
            | AdversarySpec::PartialFragmentLeader { view, .. }
            | AdversarySpec::BogusRecoveryRootLeader { view }
            | AdversarySpec::WithholdThenRelease { view, .. } => [lead(*view, cfg.x, cfg.n)].into(),
        }
    }

    pub fn build(&self, cfg: &SimConfig) -> Result<Box<dyn Adversary>, SimError> {
        let bad = |msg: String| Err(SimError::Config(msg));
        let in_range = |p: &ProcessorId| (1..=cfg.n).contains(p);
        match self {
            AdversarySpec::Crash { processors, .. } if !processors.iter().all(in_range) => {
                return bad(format!("crash set {processors:?} outside 1..={}", cfg.n));
            }
            AdversarySpec::EquivocatingLeader { view: 0 }
            | AdversarySpec::PartialFragmentLeader { view: 0, .. }
            | AdversarySpec::BogusRecoveryRootLeader { view: 0 }
            | AdversarySpec::WithholdThenRelease { view: 0, .. } => return bad("target view must be ≥ 1".into()),
            AdversarySpec::BogusRecoveryRootLeader { .. } if !cfg.variant.is_carnot2() => {
                return bad("bogus_recovery_root_leader needs Carnot2".into());
            }
            _ => {}
        }
        let corrupted = self.corrupted(cfg);
        Ok(match self {
            AdversarySpec::Honest | AdversarySpec::MaxDelay => Box::new(Passive { spec: self.clone() }),
            AdversarySpec::Crash { at, .. } => Box::new(Crash { spec: self.clone(), at: *at, corrupted }),
            AdversarySpec::EquivocatingLeader { view } => Box::new(Equivocate {
                spec: self.clone(),
                view: *view,
                corrupted,
                twins: BTreeMap::new(),
            }),
            AdversarySpec::PartialFragmentLeader { view, recipients, decoders } => {
                let leader = lead(*view, cfg.x, cfg.n);
                let recipients: BTreeSet<ProcessorId> = match recipients {
                    Some(r) => r.iter().copied().collect(),
                    None => (1..=cfg.n).filter(|&p| p != leader).rev().skip(1).collect(),
                };
                let decoders: BTreeSet<ProcessorId> = match decoders {
                    Some(d) => d.iter().copied().collect(),
                    None => recipients.iter().copied().filter(|&p| p != leader).take(cfg.f as usize).collect(),
                };
                if !recipients.iter().chain(&decoders).all(in_range) {
                    return bad("partial_fragment_leader processors out of range".into());
                }
                Box::new(PartialFragments { spec: self.clone(), view: *view, leader, recipients, decoders })
            }
            AdversarySpec::BogusRecoveryRootLeader { view } => Box::new(BogusRoot {
                spec: self.clone(),
                view: *view,
                corrupted,
                swaps: BTreeMap::new(),
            }),
            AdversarySpec::WithholdThenRelease { view, hold } => Box::new(Withhold {
                spec: self.clone(),
                view: *view,
                hold: hold.unwrap_or(2 * cfg.delta),
                corrupted,
                held: Vec::new(),
            }),
        })
    }
}

fn corrupt_at_zero(t: Timeslot, corrupted: &BTreeSet<ProcessorId>) -> Vec<ProcessorId> {
    if t == 0 {
        corrupted.iter().copied().collect()
    } else {
        Vec::new()
    }
}

/// Is `msg` about a block of `view` proposed by `leader`?
fn about(msg: &Message, view: View, leader: ProcessorId, params: &Params) -> Option<Digest> {
    let b = msg.block()?;
    (b.view() == view && params.lead(view) == leader).then(|| b.id())
}

struct Passive {
    spec: AdversarySpec,
}

impl Adversary for Passive {
    fn spec(&self) -> AdversarySpec {
        self.spec.clone()
    }

    fn schedule(&mut self, _: ProcessorId, _: ProcessorId, _: &Message, t: Timeslot, default: Timeslot, cfg: &SimConfig) -> Timeslot {
        match self.spec {
            AdversarySpec::MaxDelay => cfg.latest_delivery(t),
            _ => default,
        }
    }
}

struct Crash {
    spec: AdversarySpec,
    at: Timeslot,
    corrupted: BTreeSet<ProcessorId>,
}

impl Adversary for Crash {
    fn spec(&self) -> AdversarySpec {
        self.spec.clone()
    }

    fn corruptions(&mut self, t: Timeslot, _: &Params) -> Vec<ProcessorId> {
        if t == self.at {
            self.corrupted.iter().copied().collect()
        } else {
            Vec::new()
        }
    }

    fn on_output(&mut self, _: &AdvCtx<'_>, _: ProcessorId, _: Vec<OutMsg>) -> Vec<OutMsg> {
        Vec::new()
    }
}

fn fragment_to(block: &Block, fragments: &[CertifiedFragment], j: ProcessorId) -> OutMsg {
    let msg = Message::Fragment(FragmentMsg { block: block.clone(), fragment: fragments[j as usize - 1].clone() });
    OutMsg { dst: Dest::To(j), msg: msg.into() }
}

struct Equivocate {
    spec: AdversarySpec,
    view: View,
    corrupted: BTreeSet<ProcessorId>,
    /// Original block id -> conflicting twin with its fragments.
    twins: BTreeMap<Digest, (Block, Vec<CertifiedFragment>)>,
}

impl Adversary for Equivocate {
    fn spec(&self) -> AdversarySpec {
        self.spec.clone()
    }

    fn corruptions(&mut self, t: Timeslot, _: &Params) -> Vec<ProcessorId> {
        corrupt_at_zero(t, &self.corrupted)
    }

    fn on_output(&mut self, ctx: &AdvCtx<'_>, pid: ProcessorId, sends: Vec<OutMsg>) -> Vec<OutMsg> {
        let n = ctx.params.n;
        let mut out = Vec::with_capacity(sends.len());
        for s in sends {
            let (Message::Fragment(fm), Dest::To(j)) = (&*s.msg, s.dst) else {
                out.push(s);
                continue;
            };
            let Some(id) = about(&s.msg, self.view, pid, ctx.params) else {
                out.push(s);
                continue;
            };
            if j <= n / 2 || fm.fragment.index() != j {
                out.push(s);
                continue;
            }
            if !self.twins.contains_key(&id) {
                let payload = encode_payload(&[Tx::from(format!("equivocation v{}", self.view).into_bytes())]);
                let key = ctx.keys.key(pid).expect("leader is corrupted");
                match build_proposal(ctx.params, &key, self.view, fm.block.parent(), &payload, fm.block.tag().k) {
                    Ok(p) => {
                        self.twins.insert(id, (p.block, p.fragments));
                    }
                    Err(_) => {
                        out.push(s);
                        continue;
                    }
                }
            }
            let (twin, frags) = &self.twins[&id];
            out.push(fragment_to(twin, frags, j));
        }
        out
    }
}

struct PartialFragments {
    spec: AdversarySpec,
    view: View,
    leader: ProcessorId,
    recipients: BTreeSet<ProcessorId>,
    decoders: BTreeSet<ProcessorId>,
}

impl Adversary for PartialFragments {
    fn spec(&self) -> AdversarySpec {
        self.spec.clone()
    }

    fn corruptions(&mut self, t: Timeslot, _: &Params) -> Vec<ProcessorId> {
        corrupt_at_zero(t, &[self.leader].into())
    }

    fn on_output(&mut self, ctx: &AdvCtx<'_>, pid: ProcessorId, sends: Vec<OutMsg>) -> Vec<OutMsg> {
        let mut out = Vec::with_capacity(sends.len());
        for s in sends {
            let Some(id) = about(&s.msg, self.view, self.leader, ctx.params) else {
                out.push(s);
                continue;
            };
            match (&*s.msg, s.dst) {
                (Message::Fragment(fm), Dest::To(j)) if fm.fragment.index() == j => {
                    // Primary fragments go to recipients only, ours to the decoders as well.
                    if j == pid {
                        out.push(s.clone());
                        for &d in &self.decoders {
                            out.push(OutMsg { dst: Dest::To(d), msg: s.msg.clone() });
                        }
                    } else if self.recipients.contains(&j) {
                        out.push(s);
                    }
                }
                (Message::Fragment(_), _) => {
                    for &d in &self.decoders {
                        out.push(OutMsg { dst: Dest::To(d), msg: s.msg.clone() });
                    }
                }
                (Message::Vote(v), _) if v.stage == 2 && v.block.id() == id => {}
                // The leader's own vote would otherwise complete an M-certificate with one
                // decoder's vote.
                (Message::Certificate(c), _) if c.kind != CertKind::Stage1Cert => {}
                (Message::Recovery(_), _) => {}
                _ => out.push(s),
            }
        }
        out
    }
}

struct BogusRoot {
    spec: AdversarySpec,
    view: View,
    corrupted: BTreeSet<ProcessorId>,
    /// Honest block id -> bogus replacement with its primary fragments.
    swaps: BTreeMap<Digest, (Block, Vec<CertifiedFragment>)>,
}

impl BogusRoot {
    fn bogus(&mut self, ctx: &AdvCtx<'_>, pid: ProcessorId, original: &Block) -> Option<&(Block, Vec<CertifiedFragment>)> {
        let id = original.id();
        if !self.swaps.contains_key(&id) {
            let n = ctx.params.n;
            let payload = encode_payload(&[Tx::from(format!("bogus root v{}", self.view).into_bytes())]);
            let other: Vec<u8> = payload.iter().map(|b| b ^ 0xff).collect();
            let (tag, frags) = codec::encode(&payload, n, original.tag().k).ok()?;
            let rtag = codec::tag_of(&other, n, ctx.params.recovery_k()).ok()?;
            let key = ctx.keys.key(pid).ok()?;
            let block = Block::new_signed(&key, self.view, tag, Some(rtag), original.parent());
            self.swaps.insert(id, (block, frags));
        }
        self.swaps.get(&id)
    }
}

impl Adversary for BogusRoot {
    fn spec(&self) -> AdversarySpec {
        self.spec.clone()
    }

    fn corruptions(&mut self, t: Timeslot, _: &Params) -> Vec<ProcessorId> {
        corrupt_at_zero(t, &self.corrupted)
    }

    fn on_output(&mut self, ctx: &AdvCtx<'_>, pid: ProcessorId, sends: Vec<OutMsg>) -> Vec<OutMsg> {
        let mut out = Vec::with_capacity(sends.len());
        for s in sends {
            if about(&s.msg, self.view, pid, ctx.params).is_none() {
                out.push(s);
                continue;
            }
            // Everything about the honest block is replaced by the bogus one's primaries.
            if let (Message::Fragment(fm), Dest::To(j)) = (&*s.msg, s.dst) {
                if fm.fragment.index() == j {
                    let original = fm.block.clone();
                    if let Some((block, frags)) = self.bogus(ctx, pid, &original) {
                        out.push(fragment_to(block, frags, j));
                    }
                }
            }
        }
        out
    }
}

struct Withhold {
    spec: AdversarySpec,
    view: View,
    hold: Timeslot,
    corrupted: BTreeSet<ProcessorId>,
    held: Vec<(Timeslot, ProcessorId, OutMsg)>,
}

impl Adversary for Withhold {
    fn spec(&self) -> AdversarySpec {
        self.spec.clone()
    }

    fn corruptions(&mut self, t: Timeslot, _: &Params) -> Vec<ProcessorId> {
        corrupt_at_zero(t, &self.corrupted)
    }

    fn on_output(&mut self, ctx: &AdvCtx<'_>, pid: ProcessorId, sends: Vec<OutMsg>) -> Vec<OutMsg> {
        let mut out = Vec::new();
        let held = std::mem::take(&mut self.held);
        for (due, from, s) in held {
            if from == pid && due <= ctx.now {
                out.push(s);
            } else {
                self.held.push((due, from, s));
            }
        }
        for s in sends {
            if about(&s.msg, self.view, pid, ctx.params).is_some() {
                self.held.push((ctx.now + self.hold, pid, s));
            } else {
                out.push(s);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::super::{run, Event, SimConfig};
    use super::*;
    use crate::protocol_types::Variant;
    use crate::replica::StateEvent;

    fn trace(cfg: &SimConfig, spec: AdversarySpec) -> super::super::Trace {
        run(cfg, &mut *spec.build(cfg).unwrap()).unwrap()
    }

    fn blocks_proposed_for(t: &super::super::Trace, view: View) -> BTreeSet<Digest> {
        t.events
            .iter()
            .filter_map(|e| match e {
                Event::Send { mid, .. } => t.messages[*mid as usize].block().filter(|b| b.view() == view).map(|b| b.id()),
                _ => None,
            })
            .collect()
    }

    #[test]
    fn equivocating_leader_sends_two_blocks() {
        let mut cfg = SimConfig::new(Variant::Carnot1, 5, 1);
        cfg.horizon = 30;
        let t = trace(&cfg, AdversarySpec::EquivocatingLeader { view: 1 });
        assert!(blocks_proposed_for(&t, 1).len() >= 2);
    }

    #[test]
    fn bogus_root_needs_carnot2() {
        let cfg = SimConfig::new(Variant::Carnot1, 5, 1);
        assert!(AdversarySpec::BogusRecoveryRootLeader { view: 1 }.build(&cfg).is_err());
    }

    #[test]
    fn bogus_block_never_gets_stage2_votes() {
        let mut cfg = SimConfig::new(Variant::Carnot2, 4, 1);
        cfg.x = 2;
        cfg.horizon = 60;
        let t = trace(&cfg, AdversarySpec::BogusRecoveryRootLeader { view: 1 });
        let leader = lead(1, cfg.x, cfg.n);
        let proposed = blocks_proposed_for(&t, 1);
        assert_eq!(proposed.len(), 1);
        let bogus = *proposed.iter().next().unwrap();
        for e in &t.events {
            if let Event::State { pid, event: StateEvent::Vote { stage: 2, block, .. }, .. } = e {
                assert!(*pid == leader || *block != bogus);
            }
        }
        assert!(t.events.iter().any(|e| matches!(e, Event::State { event: StateEvent::Nullify { view: 1 }, .. })));
    }

    #[test]
    fn withheld_messages_are_released_later() {
        let mut cfg = SimConfig::new(Variant::Carnot1, 5, 1);
        cfg.horizon = 40;
        let t = trace(&cfg, AdversarySpec::WithholdThenRelease { view: 1, hold: Some(6) });
        let leader = lead(1, cfg.x, cfg.n);
        let first = t.events.iter().find_map(|e| match e {
            Event::Send { time, src, mid, .. } if *src == leader && t.messages[*mid as usize].block().is_some_and(|b| b.view() == 1) => Some(*time),
            _ => None,
        });
        assert!(first.unwrap() >= 6);
    }

    #[test]
    fn crash_silences_processors() {
        let mut cfg = SimConfig::new(Variant::Carnot1, 5, 1);
        cfg.horizon = 20;
        let t = trace(&cfg, AdversarySpec::Crash { processors: vec![3], at: 0 });
        assert!(!t.events.iter().any(|e| matches!(e, Event::Send { src: 3, .. })));
    }

    #[test]
    fn spec_parses_from_toml_style_json() {
        let s: AdversarySpec = serde_json::from_str(r#"{"name":"crash","processors":[1,2],"at":3}"#).unwrap();
        assert_eq!(s, AdversarySpec::Crash { processors: vec![1, 2], at: 3 });
        assert!(serde_json::from_str::<AdversarySpec>(r#"{"name":"crash","processors":[],"bogus":1}"#).is_err());
    }
}
