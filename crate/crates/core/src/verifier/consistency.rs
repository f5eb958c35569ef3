//! Consistency: prefix-monotonicity of F over sampled nested message sets, plus the
//! vote and certificate invariants checked directly on the trace.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{corrupted, Extractor, MessageSet, Verdict, Violation};
use crate::net_sim::{Event, Trace};
use crate::protocol_types::{quorums, Block, CertKind, Message, Params, Timeslot, Tx, View};
use crate::sim_crypto::{Digest, ProcessorId};

pub const MIN_SAMPLED_PAIRS: usize = 200;

/// A pair `M1 ⊆ M2` with `F(M1)` not a prefix of `F(M2)`, shrunk by prefix bisection.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counterexample {
    pub sampling: String,
    pub m1: Vec<u64>,
    pub m2: Vec<u64>,
    pub f1_len: usize,
    pub f2_len: usize,
}

fn is_prefix(a: &[Tx], b: &[Tx]) -> bool {
    a.len() <= b.len() && a == &b[..a.len()]
}

fn comparable(a: &[Tx], b: &[Tx]) -> bool {
    is_prefix(a, b) || is_prefix(b, a)
}

pub fn check_consistency(trace: &Trace) -> Verdict {
    let params = trace.config.params().expect("trace configuration was validated");
    let x = Extractor::new(&params, &trace.messages);
    let mut violations = invariant_violations(trace, &params);
    let (pairs, monotonicity) = sample_pairs(trace, &x);
    violations.extend(monotonicity);
    Verdict::new(
        "consistency",
        format!("{pairs} nested pairs sampled, {} blocks indexed", x.block_count()),
        violations,
    )
}

/// Deliveries in trace order: (time, dst, mid).
fn deliveries(trace: &Trace) -> Vec<(Timeslot, ProcessorId, u64)> {
    trace
        .events
        .iter()
        .filter_map(|e| match e {
            Event::Deliver { time, dst, mid, .. } => Some((*time, *dst, *mid)),
            _ => None,
        })
        .collect()
}

fn received(len: usize, log: &[(Timeslot, ProcessorId, u64)], who: &BTreeSet<ProcessorId>, t: Timeslot) -> MessageSet {
    let mut m = MessageSet::empty(len);
    for &(_, dst, mid) in log.iter().take_while(|d| d.0 <= t) {
        if who.contains(&dst) {
            m.insert(mid);
        }
    }
    m
}

fn sample_pairs(trace: &Trace, x: &Extractor) -> (usize, Vec<Violation>) {
    let len = trace.messages.len();
    let n = trace.config.n;
    let end = trace.end;
    let log = deliveries(trace);
    let everyone: BTreeSet<ProcessorId> = (1..=n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(trace.config.seed);
    rng.set_stream(7);
    let mut pairs = Vec::new();

    for _ in 0..80 {
        let (a, b) = (rng.gen_range(0..=end), rng.gen_range(0..=end));
        let (t1, t2) = (a.min(b), a.max(b));
        pairs.push(("time-prefix", received(len, &log, &everyone, t1), received(len, &log, &everyone, t2)));
    }
    for _ in 0..80 {
        let s2: BTreeSet<ProcessorId> = everyone.iter().copied().filter(|_| rng.gen_bool(0.6)).collect();
        let s1: BTreeSet<ProcessorId> = s2.iter().copied().filter(|_| rng.gen_bool(0.5)).collect();
        let (a, b) = (rng.gen_range(0..=end), rng.gen_range(0..=end));
        let (t1, t2) = (a.min(b), a.max(b));
        pairs.push(("per-processor", received(len, &log, &s1, t1), received(len, &log, &s2, t2)));
    }
    for _ in 0..60 {
        let p2: f64 = rng.gen_range(0.2..1.0);
        let p1: f64 = rng.gen_range(0.0..1.0);
        let mut m2 = MessageSet::empty(len);
        let mut m1 = MessageSet::empty(len);
        for mid in 0..len as u64 {
            if rng.gen_bool(p2) {
                m2.insert(mid);
                if rng.gen_bool(p1) {
                    m1.insert(mid);
                }
            }
        }
        pairs.push(("random-subset", m1, m2));
    }

    let mut violations = Vec::new();
    let mut extracted = Vec::with_capacity(pairs.len());
    for (sampling, m1, m2) in &pairs {
        let (f1, f2) = (x.extract(m1), x.extract(m2));
        if !is_prefix(&f1, &f2) && violations.is_empty() {
            let ce = shrink(x, sampling, m1, m2);
            violations.push(Violation::ConsistencyViolation {
                property: "F monotonicity".into(),
                detail: format!("{sampling} pair: F(M1) has {} transactions, not a prefix of F(M2)", f1.len()),
                counterexample: Some(ce),
            });
        }
        extracted.push(f2);
    }
    // Compatibility of arbitrary (not necessarily nested) sets.
    for w in extracted.windows(2) {
        if !comparable(&w[0], &w[1]) {
            violations.push(Violation::ConsistencyViolation {
                property: "compatibility".into(),
                detail: "two sampled sets extract incomparable sequences".into(),
                counterexample: None,
            });
            break;
        }
    }
    (pairs.len(), violations)
}

fn violates(x: &Extractor, m1: &MessageSet, m2: &MessageSet) -> bool {
    !is_prefix(&x.extract(m1), &x.extract(m2))
}

/// Smallest `L` in `lo..=hi` with `pred(L)`, assuming `pred(hi)` and rough monotonicity.
fn bisect(lo: usize, hi: usize, pred: impl Fn(usize) -> bool) -> usize {
    let (mut lo, mut hi) = (lo, hi);
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if pred(mid) {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    hi
}

fn from_ids(len: usize, ids: &[u64]) -> MessageSet {
    let mut m = MessageSet::empty(len);
    for &i in ids {
        m.insert(i);
    }
    m
}

fn shrink(x: &Extractor, sampling: &str, m1: &MessageSet, m2: &MessageSet) -> Counterexample {
    let len = m2.bits_len();
    let base: Vec<u64> = m1.iter().collect();
    let extra: Vec<u64> = m2.iter().filter(|m| !m1.contains(*m)).collect();
    let with_extra = |l: usize| {
        let mut ids = base.clone();
        ids.extend_from_slice(&extra[..l]);
        from_ids(len, &ids)
    };
    let l2 = bisect(0, extra.len(), |l| violates(x, m1, &with_extra(l)));
    let mut m2s = with_extra(l2);
    if !violates(x, m1, &m2s) {
        m2s = m2.clone();
    }
    let l1 = bisect(0, base.len(), |l| {
        let mut ids: Vec<u64> = base[..l].to_vec();
        ids.extend(m2s.iter().filter(|m| !m1.contains(*m)));
        let m2l = from_ids(len, &ids);
        violates(x, &from_ids(len, &base[..l]), &m2l)
    });
    let (mut a, mut b) = (from_ids(len, &base[..l1]), {
        let mut ids: Vec<u64> = base[..l1].to_vec();
        ids.extend(m2s.iter().filter(|m| !m1.contains(*m)));
        from_ids(len, &ids)
    });
    if !violates(x, &a, &b) {
        a = m1.clone();
        b = m2s;
    }
    Counterexample {
        sampling: sampling.to_string(),
        f1_len: x.extract(&a).len(),
        f2_len: x.extract(&b).len(),
        m1: a.iter().collect(),
        m2: b.iter().collect(),
    }
}

impl MessageSet {
    fn bits_len(&self) -> usize {
        self.bits.len()
    }
}

/// Quorum facts over every message in the trace.
#[derive(Default)]
struct Tally {
    blocks: BTreeMap<Digest, Block>,
    stage1: BTreeMap<Digest, BTreeSet<ProcessorId>>,
    stage2: BTreeMap<Digest, BTreeSet<ProcessorId>>,
    nullify: BTreeMap<View, BTreeSet<ProcessorId>>,
    certs: BTreeSet<(CertKind, Digest)>,
    ncerts: BTreeSet<View>,
}

fn invariant_violations(trace: &Trace, params: &Params) -> Vec<Violation> {
    let q = quorums(params.variant, params.n, params.f).expect("validated");
    let bad = corrupted(trace);
    let correct = |p: ProcessorId| !bad.contains_key(&p);
    let mut t = Tally::default();
    for m in &trace.messages {
        if let Some(b) = m.block() {
            t.blocks.entry(b.id()).or_insert_with(|| b.clone());
        }
        match &**m {
            Message::Vote(v) if v.verify(params) => {
                let set = if v.stage == 1 { &mut t.stage1 } else { &mut t.stage2 };
                set.entry(v.block.id()).or_default().insert(v.voter);
            }
            Message::Nullify(nm) if nm.verify(params) => {
                t.nullify.entry(nm.view).or_default().insert(nm.sender);
            }
            Message::Certificate(c) if c.verify(params) => match c.block() {
                Some(b) => {
                    t.certs.insert((c.kind, b.id()));
                }
                None => {
                    t.ncerts.insert(c.view());
                }
            },
            _ => {}
        }
    }
    let count = |m: &BTreeMap<Digest, BTreeSet<ProcessorId>>, id: &Digest| m.get(id).map_or(0, |s| s.len() as u32);
    let notarised = |id: &Digest| count(&t.stage1, id) >= q.stage1 || t.certs.contains(&(CertKind::Stage1Cert, *id));
    let stage2 = |id: &Digest| count(&t.stage2, id) >= q.stage2 || t.certs.contains(&(CertKind::Stage2Cert, *id));
    let mcert = |id: &Digest| count(&t.stage2, id) >= q.m || t.certs.contains(&(CertKind::MCert, *id));
    let ncert = |v: View| t.ncerts.contains(&v) || t.nullify.get(&v).map_or(0, |s| s.len() as u32) >= q.null;
    let view_of = |id: &Digest| t.blocks[id].view();

    let mut out = Vec::new();
    let mut violation = |property: &str, detail: String| {
        out.push(Violation::ConsistencyViolation { property: property.into(), detail, counterexample: None });
    };

    // One vote per stage per view from each correct processor.
    for (stage, votes) in [(1, &t.stage1), (2, &t.stage2)] {
        let mut seen: BTreeMap<(ProcessorId, View), Digest> = BTreeMap::new();
        for (id, voters) in votes {
            for &p in voters.iter().filter(|&&p| correct(p)) {
                if let Some(other) = seen.insert((p, view_of(id)), *id) {
                    if other != *id {
                        violation("one vote per view", format!("p{p} cast two stage-{stage} votes in view {}", view_of(id)));
                    }
                }
            }
        }
    }
    // No correct processor both stage-2 votes and nullifies in a view.
    for (id, voters) in &t.stage2 {
        let v = view_of(id);
        for &p in voters.iter().filter(|&&p| correct(p)) {
            if t.nullify.get(&v).is_some_and(|s| s.contains(&p)) {
                violation("no stage-2 vote and nullify", format!("p{p} stage-2 voted and nullified view {v}"));
            }
        }
    }
    // Unique stage-1 notarisation per view.
    let mut notarised_in: BTreeMap<View, Digest> = BTreeMap::new();
    for id in t.blocks.keys().filter(|id| notarised(id)) {
        if let Some(other) = notarised_in.insert(view_of(id), *id) {
            violation("unique stage-1 notarisation", format!("view {} notarised {other:?} and {id:?}", view_of(id)));
        }
    }
    let certified: Vec<Digest> = t.blocks.keys().filter(|id| stage2(id)).copied().collect();
    for id in &certified {
        if ncert(view_of(id)) {
            violation("stage-2 certificate precludes N-certificate", format!("view {} has both", view_of(id)));
        }
    }
    for id in t.blocks.keys().filter(|id| stage2(id) || mcert(id)) {
        if !notarised(id) {
            violation("stage-2 certificate implies notarisation", format!("{id:?} in view {}", view_of(id)));
        }
    }
    // Certified blocks lie on one chain.
    let ancestors = |id: &Digest| -> BTreeSet<Digest> {
        let mut out = BTreeSet::new();
        let mut cur = *id;
        while let Some(b) = t.blocks.get(&cur) {
            out.insert(cur);
            cur = b.parent();
        }
        out
    };
    let lines: Vec<BTreeSet<Digest>> = certified.iter().map(ancestors).collect();
    for i in 0..certified.len() {
        for j in i + 1..certified.len() {
            if !lines[i].contains(&certified[j]) && !lines[j].contains(&certified[i]) {
                violation(
                    "certified blocks form one chain",
                    format!("{:?} (view {}) and {:?} (view {}) conflict", certified[i], view_of(&certified[i]), certified[j], view_of(&certified[j])),
                );
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net_sim::{run, AdversarySpec, SimConfig};
    use crate::protocol_types::{build_proposal, encode_payload, FragmentMsg, Variant, Vote};
    use crate::sim_crypto::KeyRing;
    use crate::verifier::Status;
    use std::sync::Arc;

    fn honest(variant: Variant) -> Trace {
        let mut cfg = SimConfig::new(variant, 5, 1);
        cfg.horizon = 40;
        cfg.tx_schedule.every = Some(3);
        run(&cfg, &mut *AdversarySpec::Honest.build(&cfg).unwrap()).unwrap()
    }

    #[test]
    fn honest_traces_pass() {
        for v in [Variant::Carnot1, Variant::Carnot1Opt, Variant::Carnot2] {
            let verdict = check_consistency(&honest(v));
            assert_eq!(verdict.status, Status::Pass, "{v:?}: {:?}", verdict.violations);
        }
    }

    /// Appends a conflicting view-1 block with fragments and stage-2 votes from `n − f`
    /// processors, delivered to everyone at the end of the trace.
    fn forge(mut trace: Trace) -> Trace {
        let params = trace.config.params().unwrap();
        let ring = KeyRing::new(params.n);
        let payload = encode_payload(&[Tx::from(b"forged".to_vec())]);
        let k = params.k_range().0;
        let p = build_proposal(&params, &ring.key(params.lead(1)), 1, params.genesis().id(), &payload, k).unwrap();
        let mut msgs: Vec<Message> =
            p.fragments.iter().map(|f| Message::Fragment(FragmentMsg { block: p.block.clone(), fragment: f.clone() })).collect();
        for j in 1..=params.n - params.f {
            msgs.push(Message::Vote(Vote::new(&params, &ring.key(j), &p.block, 1)));
            msgs.push(Message::Vote(Vote::new(&params, &ring.key(j), &p.block, 2)));
        }
        let t = trace.end;
        let mut env = trace.envelope_count();
        for m in msgs {
            let mid = trace.messages.len() as u64;
            trace.messages.push(Arc::new(m));
            trace.events.push(Event::Send { time: t, env, src: 1, dst: 1, deliver_at: t, mid });
            trace.events.push(Event::Deliver { time: t, env, src: 1, dst: 1, mid });
            env += 1;
        }
        trace
    }

    #[test]
    fn forged_conflicting_certificates_are_caught() {
        let verdict = check_consistency(&forge(honest(Variant::Carnot1)));
        assert_eq!(verdict.status, Status::Fail);
        let properties: BTreeSet<String> = verdict
            .violations
            .iter()
            .filter_map(|v| match v {
                Violation::ConsistencyViolation { property, .. } => Some(property.clone()),
                _ => None,
            })
            .collect();
        assert!(properties.contains("certified blocks form one chain"), "{properties:?}");
        assert!(properties.contains("one vote per view"));
    }

    #[test]
    fn shrinking_keeps_a_violation() {
        // Two conflicting certified chains of different lengths in M2 only: M1 sees the
        // short one alone.
        let trace = forge(honest(Variant::Carnot1));
        let params = trace.config.params().unwrap();
        let x = Extractor::new(&params, &trace.messages);
        let len = trace.messages.len();
        let honest_len = len - (params.n as usize + 2 * (params.n - params.f) as usize);
        let forged: Vec<u64> = (honest_len as u64..len as u64).collect();
        let m1 = from_ids(len, &forged);
        let m2 = MessageSet::full(len);
        assert!(violates(&x, &m1, &m2));
        let ce = shrink(&x, "fixture", &m1, &m2);
        assert!(violates(&x, &from_ids(len, &ce.m1), &from_ids(len, &ce.m2)));
        assert!(ce.m2.len() <= len);
    }
}
