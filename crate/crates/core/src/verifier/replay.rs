//! Replays every processor while it is correct, feeding it exactly the deliveries and
//! transactions recorded in the trace, and compares what it does with what was recorded.

use std::collections::BTreeMap;
use std::sync::Arc;

use super::{corrupted, Verdict, Violation};
use crate::net_sim::{Event, Trace};
use crate::protocol_types::{SharedMessage, Timeslot, Tx};
use crate::replica::{Dest, Replica, StateEvent};
use crate::sim_crypto::{Digest, KeyRing, ProcessorId};

#[derive(Default)]
struct Slot {
    inbox: Vec<(ProcessorId, SharedMessage)>,
    txs: Vec<Tx>,
    states: Vec<StateEvent>,
    sends: Vec<(ProcessorId, Digest)>,
}

pub fn check_replay(trace: &Trace) -> Verdict {
    const CHECK: &str = "replay";
    let cfg = &trace.config;
    let params = match cfg.validate() {
        Ok(p) => Arc::new(p),
        Err(e) => return Verdict::new(CHECK, "invalid configuration".into(), vec![mismatch(0, 0, e.to_string())]),
    };
    let bad = corrupted(trace);
    let live_at = |p: ProcessorId, t: Timeslot| bad.get(&p).is_none_or(|&c| t < c);

    let mut slots: BTreeMap<(Timeslot, ProcessorId), Slot> = BTreeMap::new();
    for e in &trace.events {
        match e {
            Event::Deliver { time, src, dst, mid, .. } if src != dst && live_at(*dst, *time) => {
                slots.entry((*time, *dst)).or_default().inbox.push((*src, trace.messages[*mid as usize].clone()));
            }
            Event::Tx { time, pid, data } if live_at(*pid, *time) => {
                slots.entry((*time, *pid)).or_default().txs.push(data.clone());
            }
            Event::State { time, pid, event } => {
                slots.entry((*time, *pid)).or_default().states.push(event.clone());
            }
            Event::Send { time, src, dst, mid, .. } if live_at(*src, *time) => {
                slots.entry((*time, *src)).or_default().sends.push((*dst, trace.messages[*mid as usize].digest()));
            }
            _ => {}
        }
    }

    let ring = KeyRing::new(cfg.n);
    let rcfg = cfg.replica_config();
    let mut replicas: BTreeMap<ProcessorId, Replica> =
        (1..=cfg.n).map(|p| (p, Replica::new(params.clone(), rcfg.clone(), ring.key(p)))).collect();
    let empty = Slot::default();
    let mut violations = Vec::new();
    let mut steps = 0u64;
    'outer: for t in 0..=trace.end {
        for p in 1..=cfg.n {
            if !live_at(p, t) {
                continue;
            }
            let slot = slots.get(&(t, p)).unwrap_or(&empty);
            let out = replicas.get_mut(&p).expect("replica").step(t, &slot.inbox, &slot.txs);
            steps += 1;
            if out.events != slot.states {
                violations.push(mismatch(p, t, format!("{} state events replayed, {} recorded", out.events.len(), slot.states.len())));
                break 'outer;
            }
            let mut sends = Vec::new();
            for o in &out.sends {
                let d = o.msg.digest();
                match o.dst {
                    Dest::All => sends.extend((1..=cfg.n).map(|j| (j, d))),
                    Dest::To(j) if (1..=cfg.n).contains(&j) => sends.push((j, d)),
                    Dest::To(_) => {}
                }
            }
            if sends != slot.sends {
                violations.push(mismatch(p, t, format!("{} sends replayed, {} recorded", sends.len(), slot.sends.len())));
                break 'outer;
            }
        }
    }
    Verdict::new(CHECK, format!("{steps} processor steps replayed"), violations)
}

fn mismatch(pid: ProcessorId, time: Timeslot, detail: String) -> Violation {
    Violation::ReplayMismatch { pid, time, detail }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net_sim::{run, AdversarySpec, SimConfig};
    use crate::protocol_types::Variant;
    use crate::verifier::Status;

    fn trace(variant: Variant, spec: AdversarySpec) -> Trace {
        let mut cfg = SimConfig::new(variant, 5, 1);
        cfg.horizon = 40;
        cfg.tx_schedule.every = Some(3);
        run(&cfg, &mut *spec.build(&cfg).unwrap()).unwrap()
    }

    #[test]
    fn recorded_runs_replay() {
        for v in [Variant::Carnot1, Variant::Carnot1Opt, Variant::Carnot2] {
            assert_eq!(check_replay(&trace(v, AdversarySpec::Honest)).status, Status::Pass);
            let t = trace(v, AdversarySpec::EquivocatingLeader { view: 1 });
            assert_eq!(check_replay(&t).status, Status::Pass);
        }
    }

    #[test]
    fn a_missing_delivery_changes_the_replay() {
        let mut t = trace(Variant::Carnot1, AdversarySpec::Honest);
        let i = t.events.iter().position(|e| matches!(e, Event::Deliver { src, dst, .. } if src != dst)).unwrap();
        t.events.remove(i);
        assert_eq!(check_replay(&t).status, Status::Fail);
    }
}
