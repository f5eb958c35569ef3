//! Liveness at a finite horizon, timely view entry, and the per-variant latency bounds.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use super::{Extractor, Facts, MessageSet, Verdict, Violation};
use crate::net_sim::{Event, Trace};
use crate::protocol_types::{quorums, CertKind, Message, Timeslot, Tx, Variant, View};
use crate::replica::{BlockSet, StateEvent};
use crate::sim_crypto::{Digest, ProcessorId};

/// Bound for an initial view entered first at `t`: certificate by `t + bound`.
fn initial_bound(f: &Facts<'_>, delta: u64) -> u64 {
    let cfg = &f.trace.config;
    match cfg.variant {
        Variant::Carnot1 => 4 * delta,
        Variant::Carnot1Opt => 6 * cfg.delta,
        Variant::Carnot2 => 6 * delta + 2 * cfg.s(),
    }
}

/// How long after `max(t, GST)` every correct processor has entered a view someone entered
/// at `t`.
fn entry_bound(f: &Facts<'_>, delta: u64) -> u64 {
    match f.trace.config.variant {
        Variant::Carnot2 => 2 * delta + f.trace.config.s(),
        _ => delta,
    }
}

/// Initial views with a correct leader whose first correct entry is at or after GST.
///
/// The initial-view bounds assume the leader proposes with k = n − f − 1, so a view whose
/// leader used another k (only possible through `k_override`) does not qualify.
fn qualifying_initial(f: &Facts<'_>) -> Vec<(View, Timeslot)> {
    let gst = f.trace.config.gst;
    let rk = f.params.recovery_k();
    let mut other_k = BTreeSet::new();
    for e in &f.trace.events {
        if let Event::State { pid, event: StateEvent::Propose { view, k, .. }, .. } = e {
            if f.params.lead(*view) == *pid && *k != rk {
                other_k.insert(*view);
            }
        }
    }
    f.entries
        .keys()
        .filter(|&&v| f.params.is_initial(v) && f.correct.contains(&f.params.lead(v)) && !other_k.contains(&v))
        .filter_map(|&v| f.first_entry(v).map(|t| (v, t)))
        .filter(|&(_, t)| t >= gst)
        .collect()
}

fn timely_entry(f: &Facts<'_>, delta: u64) -> Vec<Violation> {
    let gst = f.trace.config.gst;
    let bound = entry_bound(f, delta);
    let mut out = Vec::new();
    for (&v, entered) in &f.entries {
        let Some(&t) = entered.values().min() else { continue };
        let deadline = gst.max(t) + bound;
        if deadline > f.trace.end {
            continue;
        }
        for &p in &f.correct {
            let at = entered.get(&p).copied();
            if at.is_none_or(|a| a > deadline) {
                out.push(Violation::BoundViolation {
                    view: v,
                    property: "timely view entry".into(),
                    pid: p,
                    deadline,
                    observed: at,
                    margin: at.map(|a| deadline as i64 - a as i64),
                });
            }
        }
    }
    out
}

pub fn check_liveness(trace: &Trace) -> Verdict {
    const CHECK: &str = "liveness";
    let f = Facts::new(trace);
    let Some(delta) = f.delta else {
        return Verdict::inconclusive(CHECK, "no post-GST deliveries".into());
    };
    if trace.config.max_payload.is_some() {
        return Verdict::inconclusive(CHECK, "payload cap set; proposals may omit pending transactions".into());
    }
    let bound = initial_bound(&f, delta);
    let views: Vec<(View, Timeslot)> =
        qualifying_initial(&f).into_iter().filter(|&(_, t)| t + bound <= trace.end).collect();
    if views.is_empty() {
        return Verdict::inconclusive(CHECK, "no post-GST initial view with a correct leader fits the horizon".into());
    }

    // The leader's first proposal for each qualifying view.
    let mut proposed_at: BTreeMap<View, Timeslot> = BTreeMap::new();
    for e in &trace.events {
        if let Event::State { time, pid, event: StateEvent::Propose { view, .. } } = e {
            if f.params.lead(*view) == *pid {
                proposed_at.entry(*view).or_insert(*time);
            }
        }
    }
    let cutoffs: Vec<(ProcessorId, View, Timeslot)> = views
        .iter()
        .map(|&(v, t)| (f.params.lead(v), v, proposed_at.get(&v).map_or(t, |&p| p.min(t))))
        .collect();

    let x = Extractor::new(&f.params, &trace.messages);
    let finalised: BTreeSet<Tx> = x.extract(&MessageSet::correct_by(trace, trace.end)).into_iter().collect();
    let mut violations = timely_entry(&f, delta);
    let mut checked = 0usize;
    for e in &trace.events {
        let Event::Tx { time, pid, data } = e else { continue };
        if !f.correct.contains(pid) {
            continue;
        }
        let Some(&(_, view, _)) = cutoffs.iter().find(|&&(p, _, cut)| p == *pid && *time <= cut) else { continue };
        checked += 1;
        if !finalised.contains(data) {
            violations.push(Violation::LivenessViolation {
                view: Some(view),
                detail: format!(
                    "transaction {} received by p{pid} at {time} is missing from F(M_c({}))",
                    hex::encode(&data[..data.len().min(8)]),
                    trace.end
                ),
            });
        }
    }
    Verdict::new(
        CHECK,
        format!("{} qualifying views, {checked} transactions checked, realised δ = {delta}", views.len()),
        violations,
    )
}

/// Earliest time each processor holds a stage-2 certificate for each block, from its
/// deliveries: a stage-2 certificate message or a quorum of distinct stage-2 votes.
fn stage2_receipts(f: &Facts<'_>) -> HashMap<(ProcessorId, Digest), (View, Timeslot)> {
    let q = quorums(f.params.variant, f.params.n, f.params.f).expect("validated");
    let mut verified: HashMap<u64, bool> = HashMap::new();
    let mut votes: HashMap<(ProcessorId, Digest), BTreeSet<ProcessorId>> = HashMap::new();
    let mut out = HashMap::new();
    for e in &f.trace.events {
        let Event::Deliver { time, dst, mid, .. } = e else { continue };
        let msg = &f.trace.messages[*mid as usize];
        let ok = *verified.entry(*mid).or_insert_with(|| match &**msg {
            Message::Vote(v) => v.stage == 2 && v.verify(&f.params),
            Message::Certificate(c) => c.kind == CertKind::Stage2Cert && c.verify(&f.params),
            _ => false,
        });
        if !ok {
            continue;
        }
        let b = msg.block().expect("votes and block certificates carry a block");
        let key = (*dst, b.id());
        let reached = match &**msg {
            Message::Vote(v) => {
                let set = votes.entry(key).or_default();
                set.insert(v.voter);
                set.len() as u32 >= q.stage2
            }
            _ => true,
        };
        if reached {
            out.entry(key).or_insert((b.view(), *time));
        }
    }
    out
}

pub fn check_latency_bounds(trace: &Trace) -> Verdict {
    const CHECK: &str = "latency";
    let f = Facts::new(trace);
    let Some(delta) = f.delta else {
        return Verdict::inconclusive(CHECK, "no post-GST deliveries".into());
    };
    let end = trace.end;
    let receipts = stage2_receipts(&f);
    // processor -> view -> first stage-2 certificate time for any block of that view.
    let mut first_cert: BTreeMap<(ProcessorId, View), Timeslot> = BTreeMap::new();
    for (&(p, _), &(v, t)) in &receipts {
        let e = first_cert.entry((p, v)).or_insert(t);
        *e = (*e).min(t);
    }
    let mut violations = Vec::new();
    let mut checked = Vec::new();
    let mut assert_view = |v: View, deadline: Timeslot, property: &str, violations: &mut Vec<Violation>| {
        checked.push(v);
        for &p in &f.correct {
            let at = first_cert.get(&(p, v)).copied();
            let next = f.entry(v + 1, p);
            let needs_entry = trace.config.variant != Variant::Carnot2;
            let late = at.is_none_or(|a| a > deadline);
            let late_entry = needs_entry && next.is_none_or(|a| a > deadline);
            if late || late_entry {
                let observed = if late { at } else { next };
                violations.push(Violation::BoundViolation {
                    view: v,
                    property: if late { property.to_string() } else { format!("{property}: enter next view") },
                    pid: p,
                    deadline,
                    observed,
                    margin: observed.map(|a| deadline as i64 - a as i64),
                });
            }
        }
    };

    let bound = initial_bound(&f, delta);
    for (v, t) in qualifying_initial(&f) {
        if t + bound <= end {
            assert_view(v, t + bound, "initial view finalises", &mut violations);
        }
    }

    let well = well_disseminated(&f);
    let gst = trace.config.gst;
    for &v in f.entries.keys() {
        if f.params.is_initial(v) || !f.correct.contains(&f.params.lead(v)) {
            continue;
        }
        let v0 = crate::protocol_types::first_view(f.params.superview_of(v), f.params.x);
        let (Some(t0), Some(t)) = (f.first_entry(v0), f.first_entry(v)) else { continue };
        if t0 < gst || !(v0 + 1..=v).all(|w| well.contains(&w)) {
            continue;
        }
        if t + 3 * delta <= end {
            assert_view(v, t + 3 * delta, "non-initial view finalises", &mut violations);
        }
    }

    if trace.config.variant == Variant::Carnot2 {
        violations.extend(blocks_agreement(&f, delta));
    }
    Verdict::new(CHECK, format!("{} views checked, realised δ = {delta}", checked.len()), violations)
}

/// Views whose leader proposed a block whose fragments at least `k` correct processors
/// disseminated at their own index.
fn well_disseminated(f: &Facts<'_>) -> BTreeSet<View> {
    let mut echoes: HashMap<Digest, (View, u32, BTreeSet<ProcessorId>)> = HashMap::new();
    for e in &f.trace.events {
        let Event::Send { src, dst, mid, .. } = e else { continue };
        let Message::Fragment(fm) = &*f.trace.messages[*mid as usize] else { continue };
        let b = &fm.block;
        let leader = f.params.lead(b.view());
        if src == dst || *src == leader || fm.fragment.index() != *src || !f.correct.contains(src) {
            continue;
        }
        echoes.entry(b.id()).or_insert_with(|| (b.view(), b.tag().k, BTreeSet::new())).2.insert(*src);
    }
    let mut proposed: BTreeSet<Digest> = BTreeSet::new();
    for e in &f.trace.events {
        if let Event::State { pid, event: StateEvent::Propose { view, block, .. }, .. } = e {
            if f.params.lead(*view) == *pid {
                proposed.insert(*block);
            }
        }
    }
    echoes
        .iter()
        .filter(|(id, (_, k, who))| proposed.contains(id) && who.len() as u32 >= *k)
        .map(|(_, (v, _, _))| *v)
        .collect()
}

/// Every correct processor adds a block to `blocks` within `2δ + s` of the first correct
/// processor doing so (counted from GST if earlier).
fn blocks_agreement(f: &Facts<'_>, delta: u64) -> Vec<Violation> {
    let cfg = &f.trace.config;
    let mut added: BTreeMap<Digest, (View, BTreeMap<ProcessorId, Timeslot>)> = BTreeMap::new();
    for e in &f.trace.events {
        if let Event::State { time, pid, event: StateEvent::BlockAdded { set: BlockSet::Blocks, view, block } } = e {
            if f.correct.contains(pid) {
                added.entry(*block).or_insert_with(|| (*view, BTreeMap::new())).1.entry(*pid).or_insert(*time);
            }
        }
    }
    let mut out = Vec::new();
    for (view, who) in added.values() {
        let first = *who.values().min().expect("nonempty");
        let deadline = cfg.gst.max(first) + 2 * delta + cfg.s();
        if deadline > f.trace.end {
            continue;
        }
        for &p in &f.correct {
            let at = who.get(&p).copied();
            if at.is_none_or(|a| a > deadline) {
                out.push(Violation::BoundViolation {
                    view: *view,
                    property: "agreement on blocks".into(),
                    pid: p,
                    deadline,
                    observed: at,
                    margin: at.map(|a| deadline as i64 - a as i64),
                });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net_sim::{run, AdversarySpec, SimConfig};
    use crate::verifier::Status;

    fn trace(cfg: &SimConfig, spec: AdversarySpec) -> Trace {
        run(cfg, &mut *spec.build(cfg).unwrap()).unwrap()
    }

    fn cfg(variant: Variant) -> SimConfig {
        let (n, f) = if variant == Variant::Carnot2 { (4, 1) } else { (5, 1) };
        let mut cfg = SimConfig::new(variant, n, f);
        cfg.horizon = 80;
        cfg.tx_schedule.every = Some(2);
        cfg
    }

    #[test]
    fn honest_runs_are_live_and_timely() {
        for v in [Variant::Carnot1, Variant::Carnot1Opt, Variant::Carnot2] {
            let t = trace(&cfg(v), AdversarySpec::Honest);
            let l = check_liveness(&t);
            assert_eq!(l.status, Status::Pass, "{v:?} {l:?}");
            let b = check_latency_bounds(&t);
            assert_eq!(b.status, Status::Pass, "{v:?} {b:?}");
        }
    }

    #[test]
    fn crashed_leader_superview_is_recovered_later() {
        let c = cfg(Variant::Carnot1);
        let leader = crate::protocol_types::lead(1, c.x, c.n);
        let t = trace(&c, AdversarySpec::Crash { processors: vec![leader], at: 0 });
        assert_eq!(check_liveness(&t).status, Status::Pass);
    }

    #[test]
    fn truncated_before_gst_is_inconclusive() {
        let mut c = cfg(Variant::Carnot1);
        c.gst = 60;
        c.horizon = 62;
        let t = trace(&c, AdversarySpec::Honest);
        assert_eq!(check_liveness(&t).status, Status::Inconclusive);
    }

    #[test]
    fn initial_views_with_a_larger_k_do_not_qualify() {
        // k = n − 1 with f processors crashed: nobody can decode the initial-view blocks.
        let mut c = cfg(Variant::Carnot2);
        c.n = 7;
        c.f = 2;
        c.k_override = Some(6);
        c.horizon = 60;
        let t = trace(&c, AdversarySpec::Crash { processors: vec![5, 7], at: 0 });
        assert_eq!(check_liveness(&t).status, Status::Inconclusive);
        assert_ne!(check_latency_bounds(&t).status, Status::Fail);
    }

    #[test]
    fn dropping_a_finalised_transaction_is_a_violation() {
        let t = trace(&cfg(Variant::Carnot1), AdversarySpec::Honest);
        let mut forged = t.clone();
        // A transaction that reached the leader of view 1 but never entered any block.
        let leader = crate::protocol_types::lead(1, forged.config.x, forged.config.n);
        forged.events.insert(0, Event::Tx { time: 0, pid: leader, data: Tx::from(b"never proposed".to_vec()) });
        assert_eq!(check_liveness(&forged).status, Status::Fail);
    }
}
