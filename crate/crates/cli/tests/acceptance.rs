//! Acceptance criteria 1-10. Runs without the libtest harness so that the PASS/FAIL lines
//! show up in plain `cargo test` output; exits non-zero if any criterion fails.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::sync::Arc;
use std::time::Instant;

use carnot::codec::{self, fragment_size};
use carnot::net_sim::{run, AdversarySpec, DelayModel, Event, SimConfig, Trace, TxInjection};
use carnot::protocol_types::{
    build_proposal, encode_payload, lead, quorums, superview_of, CertKind, FragmentMsg, Message, Params,
    SharedMessage, Tx, Variant, View, Vote,
};
use carnot::replica::{BlockSet, StateEvent};
use carnot::sim_crypto::{Digest, KeyRing, ProcessorId};
use carnot::verifier::{
    brute_force_extract, check_consistency, check_latency_bounds, check_liveness, corrupted, extract, metrics,
    realised_delta, MessageSet, Status,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

const VARIANTS: [Variant; 3] = [Variant::Carnot1, Variant::Carnot1Opt, Variant::Carnot2];

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn simulate(cfg: &SimConfig, spec: &AdversarySpec) -> Result<Trace, String> {
    let mut adv = spec.build(cfg).map_err(|e| format!("{spec:?}: {e}"))?;
    run(cfg, &mut *adv).map_err(|e| format!("{:?} seed {} {spec:?}: {e}", cfg.variant, cfg.seed))
}

fn state_events(trace: &Trace) -> impl Iterator<Item = (u64, ProcessorId, &StateEvent)> {
    trace.events.iter().filter_map(|e| match e {
        Event::State { time, pid, event } => Some((*time, *pid, event)),
        _ => None,
    })
}

// 1. Every k-subset of fragments decodes, no (k-1)-subset does.
fn codec_mds() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut decodes = 0u64;
    for n in 1..=8u32 {
        for k in 1..=n {
            for _ in 0..20 {
                let len = rng.gen_range(0..200);
                let payload: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
                let (tag, frags) = codec::encode(&payload, n, k).map_err(|e| e.to_string())?;
                for mask in 0u32..(1 << n) {
                    let size = mask.count_ones();
                    if size != k && size + 1 != k {
                        continue;
                    }
                    let subset = frags.iter().enumerate().filter(|(i, _)| mask & (1 << i) != 0).map(|(_, f)| &f.fragment);
                    let got = codec::decode(&tag, subset, n);
                    decodes += 1;
                    if size == k {
                        ensure(matches!(&got, Ok(Some(p)) if *p == payload), || format!("n={n} k={k} subset {mask:b} did not decode"))?;
                    } else {
                        ensure(!matches!(got, Ok(Some(_))), || format!("n={n} k={k} subset {mask:b} of k-1 decoded"))?;
                    }
                }
            }
        }
    }
    Ok(format!("{decodes} subset decodes"))
}

// 2. Leader expansion rate n/k for a 1 MiB payload.
fn expansion_rates() -> Outcome {
    let f = 10;
    let cases = [
        (Variant::Carnot2, 3 * f + 1, 2 * f),
        (Variant::Carnot2, 3 * f + 1, 2 * f + 1),
        (Variant::Carnot1, 4 * f + 1, 3 * f + 1),
        (Variant::Carnot1, 4 * f + 1, 4 * f),
    ];
    let beta = 1u64 << 20;
    let mut out = Vec::new();
    for (variant, n, k) in cases {
        let mut cfg = SimConfig::new(variant, n, f);
        cfg.k_override = Some(k);
        cfg.horizon = 5;
        let leader = lead(1, cfg.x, n);
        cfg.tx_schedule.explicit.push(TxInjection { time: 0, pid: Some(leader), size: Some(beta as usize - 4), data: None });
        let trace = simulate(&cfg, &AdversarySpec::Honest)?;
        let m = metrics(&trace);
        let v = m.views.iter().find(|v| v.view == 1).ok_or("no view 1 proposal")?;
        ensure(v.beta == beta && v.k == k, || format!("view 1 carried β={} k={}", v.beta, v.k))?;
        let expected = n as f64 / k as f64;
        let rate = v.rate.ok_or("no rate")?;
        ensure((rate / expected - 1.0).abs() < 0.01, || format!("(n,k)=({n},{k}): rate {rate} vs {expected}"))?;
        ensure(v.leader_bytes == n as u64 * fragment_size(beta, n, k), || "leader bytes are not n fragments".into())?;
        out.push(format!("({n},{k})={rate:.4}"));
    }
    Ok(out.join(" "))
}

/// Smallest intersection of two subsets of {1..n} with sizes at least `a` and `b`.
fn min_intersection(n: u32, a: u32, b: u32) -> u32 {
    let masks = |q: u32| -> Vec<u32> { (0u32..(1 << n)).filter(|m| m.count_ones() >= q).collect() };
    let (ma, mb) = (masks(a), masks(b));
    let mut best = n;
    for x in &ma {
        for y in &mb {
            best = best.min((x & y).count_ones());
        }
    }
    best
}

// 3. Quorum intersections by exhaustive subset enumeration.
fn quorum_intersections() -> Outcome {
    let mut checked = 0;
    for n in 1..=13u32 {
        for f in 1..=n {
            if n < 4 * f + 1 {
                break;
            }
            let q = quorums(Variant::Carnot1, n, f).map_err(|e| e.to_string())?;
            let s1 = min_intersection(n, q.stage1, q.stage1);
            ensure(s1 >= f + 1, || format!("Carnot1 n={n} f={f}: stage-1 quorums meet in {s1}"))?;
            let s2n = min_intersection(n, q.stage2, q.null);
            ensure(s2n >= f + 1, || format!("Carnot1 n={n} f={f}: stage-2 and nullify quorums meet in {s2n}"))?;
            checked += 1;
        }
    }
    for n in 1..=16u32 {
        for f in 1..=n {
            if n < 3 * f + 1 {
                break;
            }
            let q = quorums(Variant::Carnot2, n, f).map_err(|e| e.to_string())?;
            for (a, b) in [(q.stage1, q.stage1), (q.stage2, q.null), (q.stage2, q.stage2)] {
                let m = min_intersection(n, a, b);
                ensure(m >= f + 1, || format!("Carnot2 n={n} f={f}: quorums {a},{b} meet in {m}"))?;
            }
            checked += 1;
        }
    }
    Ok(format!("{checked} (variant, n, f) combinations, no counterexample"))
}

fn random_adversary(rng: &mut ChaCha8Rng, variant: Variant, n: u32, f: u32, horizon: u64) -> AdversarySpec {
    let view = rng.gen_range(1..=6);
    let mut names = vec![0, 1, 2, 3, 4, 6];
    if variant.is_carnot2() {
        names.push(5);
    }
    match *names.choose(rng).unwrap() {
        0 => AdversarySpec::Honest,
        1 => {
            let mut ids: Vec<u32> = (1..=n).collect();
            ids.shuffle(rng);
            let count = rng.gen_range(1..=f) as usize;
            AdversarySpec::Crash { processors: ids[..count].to_vec(), at: rng.gen_range(0..=horizon / 2) }
        }
        2 => AdversarySpec::MaxDelay,
        3 => AdversarySpec::EquivocatingLeader { view },
        4 => AdversarySpec::PartialFragmentLeader { view, recipients: None, decoders: None },
        5 => AdversarySpec::BogusRecoveryRootLeader { view },
        _ => AdversarySpec::WithholdThenRelease { view, hold: None },
    }
}

fn random_config(rng: &mut ChaCha8Rng, variant: Variant, seed: u64, horizon: u64) -> SimConfig {
    let f = if rng.gen_bool(0.8) { 1 } else { 2 };
    let min = if variant.is_carnot2() { 3 * f + 1 } else { 4 * f + 1 };
    let n = min + rng.gen_range(0..=1);
    let mut cfg = SimConfig::new(variant, n, f);
    cfg.seed = seed;
    cfg.x = rng.gen_range(2..=3);
    cfg.delta = 4;
    cfg.delta_typical = rng.gen_range(1..=2);
    cfg.horizon = horizon;
    cfg.gst = rng.gen_range(0..=horizon / 2);
    cfg.delay = *[DelayModel::Typical, DelayModel::Max, DelayModel::Random].choose(rng).unwrap();
    cfg.tx_schedule.every = Some(rng.gen_range(1..=4));
    if variant.is_carnot2() && rng.gen_bool(0.3) {
        cfg.k_override = Some(n - 1);
    }
    cfg
}

struct FuzzStats {
    runs: usize,
    live: usize,
    inconclusive: usize,
    failures: Vec<String>,
    liveness_failures: Vec<String>,
}

// 4 and 5 share one fuzz campaign.
fn fuzz(runs_per_variant: u64) -> Result<FuzzStats, String> {
    let mut stats = FuzzStats { runs: 0, live: 0, inconclusive: 0, failures: Vec::new(), liveness_failures: Vec::new() };
    for (vi, variant) in VARIANTS.into_iter().enumerate() {
        for i in 0..runs_per_variant {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 * vi as u64 + i);
            let horizon = rng.gen_range(24..=48);
            let cfg = random_config(&mut rng, variant, i, horizon);
            let spec = random_adversary(&mut rng, variant, cfg.n, cfg.f, horizon);
            let trace = simulate(&cfg, &spec)?;
            stats.runs += 1;
            let c = check_consistency(&trace);
            if c.status != Status::Pass {
                stats.failures.push(format!("{variant:?} run {i} {spec:?}: {}", serde_json::to_string(&c.violations).unwrap()));
            }
            let l = check_liveness(&trace);
            match l.status {
                Status::Pass => stats.live += 1,
                Status::Inconclusive => stats.inconclusive += 1,
                Status::Fail => stats.liveness_failures.push(format!("{variant:?} run {i} {spec:?}: {:?}", &l.violations[..l.violations.len().min(2)])),
            }
        }
    }
    Ok(stats)
}

/// Honest latency suites at δ = 1.
fn latency_suites() -> Outcome {
    let mut checked = 0;
    for variant in VARIANTS {
        let sizes: &[(u32, u32)] = if variant.is_carnot2() { &[(4, 1), (7, 2)] } else { &[(5, 1), (9, 2)] };
        for &(n, f) in sizes {
            for x in [2, 3] {
                for seed in 0..3 {
                    let mut cfg = SimConfig::new(variant, n, f);
                    cfg.x = x;
                    cfg.seed = seed;
                    cfg.horizon = 60;
                    cfg.tx_schedule.every = Some(2);
                    let trace = simulate(&cfg, &AdversarySpec::Honest)?;
                    let v = check_latency_bounds(&trace);
                    ensure(v.status == Status::Pass, || {
                        format!("{variant:?} n={n} x={x} seed={seed}: {} {:?}", v.summary, v.violations)
                    })?;
                    checked += 1;
                }
            }
        }
    }
    // Optimistic handoff with the outgoing superview leader crashing at every point of its superview.
    let (n, f, x) = (5, 1, 3);
    let outgoing = lead(1, x, n);
    for at in 0..=12 {
        let mut cfg = SimConfig::new(Variant::Carnot1Opt, n, f);
        cfg.x = x;
        cfg.horizon = 60;
        cfg.tx_schedule.every = Some(2);
        let trace = simulate(&cfg, &AdversarySpec::Crash { processors: vec![outgoing], at })?;
        let v = check_latency_bounds(&trace);
        ensure(v.status == Status::Pass, || format!("Carnot1Opt crash at {at}: {} {:?}", v.summary, v.violations))?;
        checked += 1;
    }
    Ok(format!("{checked} honest and handoff-crash runs within bounds"))
}

fn block_ids_of_view(trace: &Trace, view: View) -> BTreeSet<Digest> {
    trace.messages.iter().filter_map(|m| m.block()).filter(|b| b.view() == view).map(|b| b.id()).collect()
}

// 7. Carnot 2 recovery under a leader that under-delivers fragments, and quiescence when honest.
fn carnot2_recovery() -> Outcome {
    let mut out = Vec::new();
    for (n, f) in [(4, 1), (7, 2)] {
        for seed in 0..3 {
            let mut cfg = SimConfig::new(Variant::Carnot2, n, f);
            cfg.seed = seed;
            cfg.horizon = 60;
            cfg.k_override = Some(n - 1);
            cfg.tx_schedule.every = Some(2);
            let view = 1;
            let trace = simulate(&cfg, &AdversarySpec::PartialFragmentLeader { view, recipients: None, decoders: None })?;
            let bad = corrupted(&trace);
            let correct: Vec<ProcessorId> = (1..=n).filter(|p| !bad.contains_key(p)).collect();
            let ids = block_ids_of_view(&trace, view);
            ensure(ids.len() == 1, || format!("expected one view-{view} block, found {}", ids.len()))?;
            let id = *ids.iter().next().unwrap();
            let mut held: BTreeMap<ProcessorId, u64> = BTreeMap::new();
            for (t, p, e) in state_events(&trace) {
                if let StateEvent::BlockAdded { set: BlockSet::Blocks, block, .. } = e {
                    if *block == id && correct.contains(&p) {
                        held.entry(p).or_insert(t);
                    }
                }
            }
            ensure(held.len() == correct.len(), || format!("n={n} seed={seed}: only {:?} hold the block", held.keys()))?;
            let delta = realised_delta(&trace).ok_or("no realised δ")?;
            let first = *held.values().min().unwrap();
            let bound = first.max(cfg.gst) + 2 * delta + cfg.s();
            let last = *held.values().max().unwrap();
            ensure(last <= bound, || format!("n={n} seed={seed}: last holder at {last}, bound {bound}"))?;
            let m = metrics(&trace);
            let rec = m.views.iter().find(|v| v.view == view).map(|v| v.recovery_frags).unwrap_or(0);
            ensure(rec > 0, || format!("n={n} seed={seed}: no recovery fragments"))?;

            let honest = simulate(&cfg, &AdversarySpec::Honest)?;
            let idle: u64 = metrics(&honest).views.iter().map(|v| v.recovery_frags).sum();
            ensure(idle == 0, || format!("n={n} seed={seed}: honest run sent {idle} recovery fragments"))?;
            out.push(format!("n={n}/{seed}: {rec} recovery frags, held by {last} ≤ {bound}"));
        }
    }
    Ok(out.join("; "))
}

// 8. A bogus recovery root never collects a correct stage-2 vote.
fn dual_root_defence() -> Outcome {
    let mut runs = 0;
    for (n, f) in [(4, 1), (7, 2)] {
        for x in [2, 3] {
            for seed in 0..3 {
                let mut cfg = SimConfig::new(Variant::Carnot2, n, f);
                cfg.x = x;
                cfg.seed = seed;
                cfg.horizon = 60;
                cfg.tx_schedule.every = Some(2);
                // The initial view of the second superview.
                let view = x + 1;
                let trace = simulate(&cfg, &AdversarySpec::BogusRecoveryRootLeader { view })?;
                let bad = corrupted(&trace);
                let bogus = block_ids_of_view(&trace, view);
                ensure(!bogus.is_empty(), || "the bogus block was never sent".into())?;
                let mut nullified = false;
                let mut later_final = false;
                for (_, p, e) in state_events(&trace) {
                    if bad.contains_key(&p) {
                        continue;
                    }
                    match e {
                        StateEvent::Vote { stage: 2, block, .. } if bogus.contains(block) => {
                            return Err(format!("p{p} stage-2 voted for the bogus block (n={n} x={x} seed={seed})"));
                        }
                        StateEvent::Nullify { view: v } if *v == view => nullified = true,
                        StateEvent::CertFormed { kind: CertKind::Stage2Cert, view: v, .. }
                            if superview_of(*v, x) > superview_of(view, x) =>
                        {
                            later_final = true
                        }
                        _ => {}
                    }
                }
                ensure(nullified, || format!("view {view} was not nullified (n={n} x={x} seed={seed})"))?;
                ensure(later_final, || format!("no later superview finalised (n={n} x={x} seed={seed})"))?;
                ensure(check_consistency(&trace).status == Status::Pass, || "consistency failed".into())?;
                runs += 1;
            }
        }
    }
    Ok(format!("{runs} runs: no correct stage-2 vote, view nullified, progress resumed"))
}

fn subsets_of(trace: &Trace, rng: &mut ChaCha8Rng) -> Vec<MessageSet> {
    let len = trace.messages.len();
    let mut sets = vec![MessageSet::full(len), MessageSet::correct_by(trace, trace.end)];
    for _ in 0..3 {
        let t = rng.gen_range(0..=trace.end);
        sets.push(MessageSet::correct_by(trace, t));
        let p = rng.gen_range(1..=trace.config.n);
        sets.push(MessageSet::received_by(trace, |q| q == p, t));
        let keep: f64 = rng.gen_range(0.3..0.95);
        let mut s = MessageSet::empty(len);
        for mid in 0..len as u64 {
            if rng.gen_bool(keep) {
                s.insert(mid);
            }
        }
        sets.push(s);
    }
    sets
}

fn non_unique_fixture() -> Result<(), String> {
    let params = Params::new(Variant::Carnot1, 5, 1, 2).map_err(|e| e.to_string())?;
    let ring = KeyRing::new(5);
    let mut msgs: Vec<SharedMessage> = Vec::new();
    for (view, tx) in [(1, "left"), (2, "right")] {
        let payload = encode_payload(&[Tx::from(tx.as_bytes().to_vec())]);
        let p = build_proposal(&params, &ring.key(params.lead(view)), view, params.genesis().id(), &payload, 4)
            .map_err(|e| e.to_string())?;
        for fr in p.fragments {
            msgs.push(Arc::new(Message::Fragment(FragmentMsg { block: p.block.clone(), fragment: fr })));
        }
        for j in 1..=4 {
            msgs.push(Arc::new(Message::Vote(Vote::new(&params, &ring.key(j), &p.block, 2))));
        }
    }
    let fast = extract(&params, &msgs);
    let slow = brute_force_extract(&params, msgs.iter().map(|m| &**m)).map_err(|e| e.to_string())?;
    ensure(fast.is_empty() && slow.is_empty(), || format!("two finalised siblings extracted {fast:?} / {slow:?}"))?;
    // Certifying only one of them makes it the unique longest chain.
    let one: Vec<SharedMessage> =
        msgs.iter().filter(|m| !matches!(&***m, Message::Vote(v) if v.block.view() == 2)).cloned().collect();
    let fast = extract(&params, &one);
    let slow = brute_force_extract(&params, one.iter().map(|m| &**m)).map_err(|e| e.to_string())?;
    ensure(fast == slow && fast == vec![Tx::from(b"left".to_vec())], || format!("{fast:?} / {slow:?}"))
}

// 9. The indexed extraction agrees with brute-force enumeration.
fn extraction_oracle() -> Outcome {
    non_unique_fixture()?;
    let mut traces = 0;
    let mut comparisons = 0;
    let mut nonempty = 0;
    let mut attempt = 0u64;
    while traces < 500 {
        attempt += 1;
        let variant = VARIANTS[(attempt % 3) as usize];
        let mut rng = ChaCha8Rng::seed_from_u64(90_000 + attempt);
        let horizon = rng.gen_range(6..=14);
        let cfg = random_config(&mut rng, variant, attempt, horizon);
        let spec = random_adversary(&mut rng, variant, cfg.n, cfg.f, horizon);
        let trace = simulate(&cfg, &spec)?;
        let params = cfg.params().map_err(|e| e.to_string())?;
        if brute_force_extract(&params, trace.messages.iter().map(|m| &**m)).is_err() {
            continue;
        }
        traces += 1;
        for set in subsets_of(&trace, &mut rng) {
            let chosen: Vec<&SharedMessage> = set.iter().map(|mid| &trace.messages[mid as usize]).collect();
            let fast = extract(&params, chosen.iter().copied());
            let slow = brute_force_extract(&params, chosen.iter().map(|m| &***m)).map_err(|e| e.to_string())?;
            ensure(fast == slow, || {
                format!("{variant:?} attempt {attempt} {spec:?}: {} vs {} transactions", fast.len(), slow.len())
            })?;
            comparisons += 1;
            nonempty += usize::from(!fast.is_empty());
        }
    }
    Ok(format!("{traces} traces, {comparisons} message sets ({nonempty} non-empty), non-unique fixture extracts nothing"))
}

fn run_binary(scenario: &Path, out: &Path, seed: &str) -> Result<(), String> {
    let o = Command::new(env!("CARGO_BIN_EXE_carnot"))
        .args(["run", "--scenario", scenario.to_str().unwrap(), "--out-dir", out.to_str().unwrap(), "--seed", seed])
        .output()
        .map_err(|e| e.to_string())?;
    ensure(o.status.code() == Some(0), || format!("{}: {}", scenario.display(), String::from_utf8_lossy(&o.stderr)))
}

// 10. Two process invocations produce identical files.
fn determinism() -> Outcome {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios");
    let mut files = 0;
    for (name, seed) in [("honest_c1.toml", "5"), ("equivocating_c1.toml", "9"), ("recovery_c2.toml", "2")] {
        let (a, b) = (tempfile::tempdir().map_err(|e| e.to_string())?, tempfile::tempdir().map_err(|e| e.to_string())?);
        run_binary(&root.join(name), a.path(), seed)?;
        run_binary(&root.join(name), b.path(), seed)?;
        for f in ["trace.ndjson", "verdict.json", "metrics.json", "metrics.csv"] {
            let (x, y) = (fs::read(a.path().join(f)), fs::read(b.path().join(f)));
            ensure(matches!((&x, &y), (Ok(x), Ok(y)) if x == y), || format!("{name}: {f} differs"))?;
            files += 1;
        }
    }
    Ok(format!("{files} files byte-identical"))
}

fn main() {
    let mut failed = Vec::new();
    let mut report = |id: u32, name: &str, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(|| f())).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {id:>2} PASS {name} ({secs:.1}s): {detail}"),
            Err(detail) => {
                println!("criterion {id:>2} FAIL {name} ({secs:.1}s): {detail}");
                failed.push(id);
            }
        }
    };

    report(1, "codec MDS", &mut codec_mds);
    report(2, "expansion rates", &mut expansion_rates);
    report(3, "quorum intersections", &mut quorum_intersections);
    let start = Instant::now();
    let fuzzed = fuzz(1000);
    let fuzz_secs = start.elapsed().as_secs_f64();
    report(4, "safety fuzz", &mut || {
        let s = fuzzed.as_ref().map_err(Clone::clone)?;
        ensure(s.failures.is_empty(), || s.failures.join("; "))?;
        Ok(format!("{} runs in {fuzz_secs:.1}s, consistency passed on all", s.runs))
    });
    report(5, "liveness", &mut || {
        let s = fuzzed.as_ref().map_err(Clone::clone)?;
        ensure(s.liveness_failures.is_empty(), || s.liveness_failures.join("; "))?;
        Ok(format!("{} live, {} inconclusive, 0 violations", s.live, s.inconclusive))
    });
    report(6, "latency bounds", &mut latency_suites);
    report(7, "Carnot 2 recovery", &mut carnot2_recovery);
    report(8, "dual-root defence", &mut dual_root_defence);
    report(9, "extraction oracle", &mut extraction_oracle);
    report(10, "determinism", &mut determinism);

    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
