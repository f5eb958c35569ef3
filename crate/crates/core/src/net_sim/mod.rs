//! Deterministic discrete-timeslot simulator for the partial synchrony model.
//!
//! Each timeslot runs, in order: adversarial corruptions, delivery of due envelopes (sorted by
//! sender, then envelope id), transaction injection, one step of every correct processor in
//! ascending index, then one step of every corrupted processor's shadow replica, whose output
//! the adversary rewrites. Every new envelope gets a delivery time from the delay model, which
//! the adversary may override within the model bound `t < t' ≤ max(GST, t) + Δ`.

mod adversary;
mod trace;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use adversary::{AdvCtx, Adversary, AdversarySpec};
pub use trace::{Event, Trace, TraceError};

use crate::codec::Bytes;
use crate::protocol_types::{Params, ProtocolError, SharedMessage, Timeslot, Tx, Variant};
use crate::replica::{Dest, OutMsg, Replica, ReplicaConfig};
use crate::sim_crypto::{AdversaryKeys, Digest, KeyRing, ProcessorId};

/// How the network picks delivery times when the adversary does not intervene.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DelayModel {
    /// `max(GST, t) + delta_typical`.
    #[default]
    Typical,
    /// `max(GST, t) + Δ`.
    Max,
    /// Before GST uniform up to `GST + Δ`; after GST uniform in `[1, delta_typical]`.
    Random,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TxTarget {
    /// Every processor receives every transaction.
    #[default]
    All,
    /// Transaction `i` goes to processor `(i mod n) + 1`.
    RoundRobin,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TxInjection {
    pub time: Timeslot,
    /// Defaults to the schedule's target.
    #[serde(default)]
    pub pid: Option<ProcessorId>,
    #[serde(default)]
    pub size: Option<usize>,
    #[serde(default)]
    pub data: Option<Bytes>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TxSchedule {
    /// Generate one transaction every this many timeslots.
    pub every: Option<u64>,
    pub size: usize,
    pub start: Timeslot,
    pub stop: Option<Timeslot>,
    pub target: TxTarget,
    pub explicit: Vec<TxInjection>,
}

impl Default for TxSchedule {
    fn default() -> Self {
        TxSchedule { every: None, size: 32, start: 0, stop: None, target: TxTarget::All, explicit: Vec::new() }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub variant: Variant,
    pub n: u32,
    pub f: u32,
    pub x: u64,
    /// Known delay bound Δ.
    #[serde(rename = "Delta")]
    pub delta: u64,
    pub gst: Timeslot,
    pub delta_typical: u64,
    /// Carnot 2 recovery timer; defaults to `2 · delta_typical`.
    #[serde(default)]
    pub s: Option<u64>,
    /// Defaults to `f`.
    #[serde(default)]
    pub f_a: Option<u32>,
    #[serde(default)]
    pub k_override: Option<u32>,
    pub seed: u64,
    pub horizon: Timeslot,
    #[serde(default)]
    pub max_payload: Option<u64>,
    #[serde(default)]
    pub tx_schedule: TxSchedule,
    #[serde(default)]
    pub delay: DelayModel,
}

impl SimConfig {
    /// A small honest configuration; callers adjust fields as needed.
    pub fn new(variant: Variant, n: u32, f: u32) -> Self {
        SimConfig {
            variant,
            n,
            f,
            x: 3,
            delta: 4,
            gst: 0,
            delta_typical: 1,
            s: None,
            f_a: None,
            k_override: None,
            seed: 0,
            horizon: 100,
            max_payload: None,
            tx_schedule: TxSchedule::default(),
            delay: DelayModel::Typical,
        }
    }

    pub fn s(&self) -> u64 {
        self.s.unwrap_or(2 * self.delta_typical)
    }

    pub fn f_a(&self) -> u32 {
        self.f_a.unwrap_or(self.f)
    }

    pub fn params(&self) -> Result<Params, SimError> {
        Ok(Params::new(self.variant, self.n, self.f, self.x)?)
    }

    pub fn replica_config(&self) -> ReplicaConfig {
        ReplicaConfig {
            delta: self.delta,
            s: self.s(),
            f_a: self.f_a(),
            k_override: self.k_override,
            max_payload: self.max_payload,
        }
    }

    pub fn validate(&self) -> Result<Params, SimError> {
        let params = self.params()?;
        if self.delta_typical == 0 || self.delta_typical > self.delta {
            return Err(SimError::Config(format!(
                "delta_typical must be in [1, Delta], got {} with Delta = {}",
                self.delta_typical, self.delta
            )));
        }
        if self.horizon < self.gst {
            return Err(SimError::Config(format!("horizon {} precedes gst {}", self.horizon, self.gst)));
        }
        if let Some(k) = self.k_override {
            let (lo, hi) = params.k_range();
            if k < lo || k > hi {
                return Err(ProtocolError::BadReconstructionParameter { k, lo, hi }.into());
            }
        }
        if self.tx_schedule.every == Some(0) {
            return Err(SimError::Config("tx_schedule.every must be positive".into()));
        }
        for inj in &self.tx_schedule.explicit {
            if inj.pid.is_some_and(|p| p == 0 || p > self.n) {
                return Err(SimError::Config(format!("transaction target {:?} out of range", inj.pid)));
            }
        }
        Ok(params)
    }

    /// Latest delivery time the model allows for a message sent at `t`.
    pub fn latest_delivery(&self, t: Timeslot) -> Timeslot {
        self.gst.max(t) + self.delta
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("model violation at t={time}: {detail}")]
    ModelViolation { time: Timeslot, detail: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Envelope {
    env: u64,
    src: ProcessorId,
    dst: ProcessorId,
    sent_at: Timeslot,
    deliver_at: Timeslot,
    mid: u64,
}

struct Engine<'a> {
    cfg: &'a SimConfig,
    params: Arc<Params>,
    adversary: &'a mut dyn Adversary,
    correct: BTreeMap<ProcessorId, Replica>,
    shadows: BTreeMap<ProcessorId, Replica>,
    keys: AdversaryKeys,
    queue: BTreeMap<Timeslot, Vec<Envelope>>,
    next_env: u64,
    messages: Vec<SharedMessage>,
    mids: HashMap<Digest, u64>,
    events: Vec<Event>,
    delay_rng: ChaCha8Rng,
    tx_rng: ChaCha8Rng,
    tx_count: u64,
}

/// Runs `cfg` against `adversary` and returns the full trace.
pub fn run(cfg: &SimConfig, adversary: &mut dyn Adversary) -> Result<Trace, SimError> {
    let params = Arc::new(cfg.validate()?);
    let ring = KeyRing::new(cfg.n);
    let rcfg = cfg.replica_config();
    let correct = (1..=cfg.n).map(|i| (i, Replica::new(params.clone(), rcfg.clone(), ring.key(i)))).collect();
    let mut delay_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    delay_rng.set_stream(1);
    let mut tx_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    tx_rng.set_stream(2);
    let mut engine = Engine {
        cfg,
        params,
        adversary,
        correct,
        shadows: BTreeMap::new(),
        keys: AdversaryKeys::new(BTreeSet::new()),
        queue: BTreeMap::new(),
        next_env: 0,
        messages: Vec::new(),
        mids: HashMap::new(),
        events: Vec::new(),
        delay_rng,
        tx_rng,
        tx_count: 0,
    };
    for t in 0..=cfg.horizon {
        engine.timeslot(t)?;
    }
    Ok(Trace {
        config: cfg.clone(),
        adversary: engine.adversary.spec(),
        messages: engine.messages,
        events: engine.events,
        end: cfg.horizon,
    })
}

impl Engine<'_> {
    fn timeslot(&mut self, t: Timeslot) -> Result<(), SimError> {
        for pid in self.adversary.corruptions(t, &self.params) {
            self.corrupt(t, pid)?;
        }

        let mut inboxes: BTreeMap<ProcessorId, Vec<(ProcessorId, SharedMessage)>> = BTreeMap::new();
        let mut due = self.queue.remove(&t).unwrap_or_default();
        due.sort_by_key(|e| (e.src, e.env));
        for e in due {
            if e.deliver_at <= e.sent_at || e.deliver_at > self.cfg.latest_delivery(e.sent_at) {
                return Err(SimError::ModelViolation { time: t, detail: format!("envelope {} out of bounds", e.env) });
            }
            self.events.push(Event::Deliver { time: t, env: e.env, src: e.src, dst: e.dst, mid: e.mid });
            inboxes.entry(e.dst).or_default().push((e.src, self.messages[e.mid as usize].clone()));
        }

        let txs = self.inject(t);

        let pids: Vec<ProcessorId> = self.correct.keys().copied().collect();
        for pid in pids {
            let inbox = inboxes.remove(&pid).unwrap_or_default();
            let tx = txs.get(&pid).map(Vec::as_slice).unwrap_or(&[]);
            let out = self.correct.get_mut(&pid).expect("correct replica").step(t, &inbox, tx);
            for event in out.events {
                self.events.push(Event::State { time: t, pid, event });
            }
            self.route(t, pid, out.sends)?;
        }

        let pids: Vec<ProcessorId> = self.shadows.keys().copied().collect();
        for pid in pids {
            let inbox = inboxes.remove(&pid).unwrap_or_default();
            let tx = txs.get(&pid).map(Vec::as_slice).unwrap_or(&[]);
            let shadow = self.shadows.get_mut(&pid).expect("shadow replica");
            let out = shadow.step(t, &inbox, tx);
            let ctx = AdvCtx { now: t, cfg: self.cfg, params: &self.params, keys: &self.keys, shadow };
            let sends = self.adversary.on_output(&ctx, pid, out.sends);
            self.route(t, pid, sends)?;
        }
        Ok(())
    }

    fn corrupt(&mut self, t: Timeslot, pid: ProcessorId) -> Result<(), SimError> {
        if self.shadows.contains_key(&pid) {
            return Ok(());
        }
        let Some(replica) = self.correct.remove(&pid) else {
            return Err(SimError::ModelViolation { time: t, detail: format!("no processor {pid}") });
        };
        if self.shadows.len() as u32 + 1 > self.cfg.f {
            return Err(SimError::ModelViolation {
                time: t,
                detail: format!("corrupting p{pid} exceeds f = {}", self.cfg.f),
            });
        }
        self.shadows.insert(pid, replica);
        self.keys = AdversaryKeys::new(self.shadows.keys().copied().collect());
        self.events.push(Event::Corrupt { time: t, pid });
        Ok(())
    }

    fn inject(&mut self, t: Timeslot) -> BTreeMap<ProcessorId, Vec<Tx>> {
        let sched = &self.cfg.tx_schedule;
        let n = self.cfg.n;
        let mut planned: Vec<(Option<ProcessorId>, Tx)> = Vec::new();
        if let Some(every) = sched.every {
            let active = t >= sched.start && sched.stop.is_none_or(|s| t <= s);
            if active && (t - sched.start) % every == 0 {
                let tx = self.fresh_tx(sched.size);
                planned.push((None, tx));
            }
        }
        for inj in sched.explicit.iter().filter(|i| i.time == t) {
            let tx = match &inj.data {
                Some(d) => d.clone(),
                None => self.fresh_tx(inj.size.unwrap_or(sched.size)),
            };
            planned.push((inj.pid, tx));
        }
        let mut out: BTreeMap<ProcessorId, Vec<Tx>> = BTreeMap::new();
        for (pid, tx) in planned {
            let targets: Vec<ProcessorId> = match (pid, sched.target) {
                (Some(p), _) => vec![p],
                (None, TxTarget::All) => (1..=n).collect(),
                (None, TxTarget::RoundRobin) => vec![(self.tx_count % n as u64) as u32 + 1],
            };
            self.tx_count += 1;
            for p in targets {
                self.events.push(Event::Tx { time: t, pid: p, data: tx.clone() });
                out.entry(p).or_default().push(tx.clone());
            }
        }
        out
    }

    /// Unique transaction bytes: an 8-byte counter followed by seeded filler.
    fn fresh_tx(&mut self, size: usize) -> Tx {
        let mut data = vec![0u8; size.max(8)];
        data[..8].copy_from_slice(&self.tx_count.to_be_bytes());
        self.tx_rng.fill(&mut data[8..]);
        Tx::from(data)
    }

    fn intern(&mut self, msg: SharedMessage) -> u64 {
        let digest = msg.digest();
        if let Some(&mid) = self.mids.get(&digest) {
            return mid;
        }
        let mid = self.messages.len() as u64;
        self.messages.push(msg);
        self.mids.insert(digest, mid);
        mid
    }

    fn default_delivery(&mut self, t: Timeslot) -> Timeslot {
        let base = self.cfg.gst.max(t);
        match self.cfg.delay {
            DelayModel::Typical => base + self.cfg.delta_typical,
            DelayModel::Max => base + self.cfg.delta,
            DelayModel::Random => {
                if t < self.cfg.gst {
                    self.delay_rng.gen_range(t + 1..=self.cfg.latest_delivery(t))
                } else {
                    t + self.delay_rng.gen_range(1..=self.cfg.delta_typical)
                }
            }
        }
    }

    fn route(&mut self, t: Timeslot, src: ProcessorId, sends: Vec<OutMsg>) -> Result<(), SimError> {
        for OutMsg { dst, msg } in sends {
            let mid = self.intern(msg.clone());
            let dsts: Vec<ProcessorId> = match dst {
                Dest::All => (1..=self.cfg.n).collect(),
                Dest::To(j) if (1..=self.cfg.n).contains(&j) => vec![j],
                Dest::To(_) => continue,
            };
            for dst in dsts {
                let env = self.next_env;
                self.next_env += 1;
                if dst == src {
                    // Already received by the sender when it was sent.
                    self.events.push(Event::Send { time: t, env, src, dst, deliver_at: t, mid });
                    self.events.push(Event::Deliver { time: t, env, src, dst, mid });
                    continue;
                }
                let default = self.default_delivery(t);
                let deliver_at = self.adversary.schedule(src, dst, &msg, t, default, self.cfg);
                if deliver_at <= t || deliver_at > self.cfg.latest_delivery(t) {
                    return Err(SimError::ModelViolation {
                        time: t,
                        detail: format!("delivery at {deliver_at} for a message sent at {t} from p{src} to p{dst}"),
                    });
                }
                self.events.push(Event::Send { time: t, env, src, dst, deliver_at, mid });
                self.queue.entry(deliver_at).or_default().push(Envelope { env, src, dst, sent_at: t, deliver_at, mid });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn honest(cfg: &SimConfig) -> Trace {
        run(cfg, &mut *AdversarySpec::Honest.build(cfg).unwrap()).unwrap()
    }

    #[test]
    fn honest_sends_arrive_next_timeslot() {
        let mut cfg = SimConfig::new(Variant::Carnot1, 5, 1);
        cfg.horizon = 20;
        let trace = honest(&cfg);
        for e in &trace.events {
            if let Event::Send { time, deliver_at, src, dst, .. } = e {
                if src != dst {
                    assert_eq!(*deliver_at, time + 1);
                }
            }
        }
    }

    #[test]
    fn pre_gst_delays_stay_within_bound() {
        let mut cfg = SimConfig::new(Variant::Carnot2, 4, 1);
        cfg.gst = 30;
        cfg.delay = DelayModel::Random;
        cfg.delta_typical = 2;
        cfg.horizon = 60;
        let trace = honest(&cfg);
        let mut late = false;
        for e in &trace.events {
            if let Event::Send { time, deliver_at, src, dst, .. } = e {
                if src != dst {
                    assert!(*deliver_at > *time && *deliver_at <= cfg.latest_delivery(*time));
                    late |= *deliver_at > time + cfg.delta_typical;
                }
            }
        }
        assert!(late);
    }

    #[test]
    fn runs_are_deterministic() {
        let mut cfg = SimConfig::new(Variant::Carnot1Opt, 5, 1);
        cfg.delay = DelayModel::Random;
        cfg.delta_typical = 3;
        cfg.seed = 7;
        cfg.tx_schedule.every = Some(3);
        let a = honest(&cfg).to_ndjson_string();
        let b = honest(&cfg).to_ndjson_string();
        assert_eq!(a, b);
    }

    #[test]
    fn corrupting_more_than_f_is_a_model_violation() {
        let cfg = SimConfig::new(Variant::Carnot1, 5, 1);
        let spec = AdversarySpec::Crash { processors: vec![1, 2], at: 0 };
        let err = run(&cfg, &mut *spec.build(&cfg).unwrap()).unwrap_err();
        assert!(matches!(err, SimError::ModelViolation { .. }));
        let spec = AdversarySpec::Crash { processors: vec![1], at: 5 };
        assert!(run(&cfg, &mut *spec.build(&cfg).unwrap()).is_ok());
    }

    #[test]
    fn out_of_bound_schedule_is_rejected() {
        struct Late;
        impl Adversary for Late {
            fn spec(&self) -> AdversarySpec {
                AdversarySpec::Honest
            }
            fn schedule(&mut self, _: ProcessorId, _: ProcessorId, _: &crate::protocol_types::Message, t: Timeslot, _: Timeslot, cfg: &SimConfig) -> Timeslot {
                cfg.latest_delivery(t) + 1
            }
        }
        let cfg = SimConfig::new(Variant::Carnot1, 5, 1);
        assert!(matches!(run(&cfg, &mut Late), Err(SimError::ModelViolation { .. })));
    }

    #[test]
    fn honest_run_makes_progress() {
        let mut cfg = SimConfig::new(Variant::Carnot1, 5, 1);
        cfg.horizon = 40;
        let trace = honest(&cfg);
        let entered = trace.events.iter().filter(|e| matches!(e, Event::State { event: crate::replica::StateEvent::EnterView { view: 10, .. }, .. })).count();
        assert_eq!(entered, 5);
    }
}
