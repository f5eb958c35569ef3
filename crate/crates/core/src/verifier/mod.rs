//! Offline checks over execution traces: the extraction function, consistency and liveness
//! checkers, latency bounds, replay and metrics.

mod consistency;
mod extract;
mod liveness;
mod metrics;
mod replay;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

pub use consistency::{check_consistency, Counterexample, MIN_SAMPLED_PAIRS};
pub use extract::{brute_force_extract, extract, ExtractError, Extractor, MAX_BRUTE_FORCE_BLOCKS};
pub use liveness::{check_latency_bounds, check_liveness};
pub use metrics::{metrics, Metrics, ViewMetrics};
pub use replay::check_replay;

use crate::net_sim::{Event, Trace};
use crate::protocol_types::{Params, Timeslot, View};
use crate::replica::StateEvent;
use crate::sim_crypto::ProcessorId;

/// A set of message ids of one trace.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MessageSet {
    bits: Vec<bool>,
}

impl MessageSet {
    pub fn empty(len: usize) -> Self {
        MessageSet { bits: vec![false; len] }
    }

    pub fn full(len: usize) -> Self {
        MessageSet { bits: vec![true; len] }
    }

    /// `M_S(t)`: messages received by some processor in `who` at or before `t`.
    pub fn received_by(trace: &Trace, who: impl Fn(ProcessorId) -> bool, t: Timeslot) -> Self {
        let mut m = MessageSet::empty(trace.messages.len());
        for e in &trace.events {
            if let Event::Deliver { time, dst, mid, .. } = e {
                if *time > t {
                    break;
                }
                if who(*dst) {
                    m.insert(*mid);
                }
            }
        }
        m
    }

    /// `M_c(t)` with "correct" meaning never corrupted during the trace.
    pub fn correct_by(trace: &Trace, t: Timeslot) -> Self {
        let corrupted = corrupted(trace);
        MessageSet::received_by(trace, |p| !corrupted.contains_key(&p), t)
    }

    pub fn insert(&mut self, mid: u64) {
        self.bits[mid as usize] = true;
    }

    pub fn contains(&self, mid: u64) -> bool {
        self.bits.get(mid as usize).copied().unwrap_or(false)
    }

    pub fn iter(&self) -> impl Iterator<Item = u64> + '_ {
        self.bits.iter().enumerate().filter(|(_, b)| **b).map(|(i, _)| i as u64)
    }

    pub fn len(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_subset(&self, other: &MessageSet) -> bool {
        self.iter().all(|m| other.contains(m))
    }
}

/// First corruption time of every corrupted processor.
pub fn corrupted(trace: &Trace) -> BTreeMap<ProcessorId, Timeslot> {
    let mut out = BTreeMap::new();
    for e in &trace.events {
        if let Event::Corrupt { time, pid } = e {
            out.entry(*pid).or_insert(*time);
        }
    }
    out
}

/// Largest post-GST delay in the trace, `max(deliver_at − max(GST, sent_at))` over envelopes
/// between distinct processors. `None` if nothing is delivered after GST.
pub fn realised_delta(trace: &Trace) -> Option<u64> {
    let gst = trace.config.gst;
    trace
        .events
        .iter()
        .filter_map(|e| match e {
            Event::Send { time, src, dst, deliver_at, .. } if src != dst && *deliver_at > gst => {
                Some(deliver_at - gst.max(*time))
            }
            _ => None,
        })
        .max()
}

/// Facts about view entry and proposals shared by the liveness-type checks.
pub(crate) struct Facts<'a> {
    pub trace: &'a Trace,
    pub params: Params,
    pub correct: BTreeSet<ProcessorId>,
    /// view -> processor -> entry time, correct processors only. Everyone starts in view 1.
    pub entries: BTreeMap<View, BTreeMap<ProcessorId, Timeslot>>,
    pub delta: Option<u64>,
}

impl<'a> Facts<'a> {
    pub fn new(trace: &'a Trace) -> Self {
        let params = trace.config.params().expect("trace configuration was validated");
        let bad = corrupted(trace);
        let correct: BTreeSet<ProcessorId> = (1..=trace.config.n).filter(|p| !bad.contains_key(p)).collect();
        let mut entries: BTreeMap<View, BTreeMap<ProcessorId, Timeslot>> = BTreeMap::new();
        entries.insert(1, correct.iter().map(|&p| (p, 0)).collect());
        for e in &trace.events {
            if let Event::State { time, pid, event: StateEvent::EnterView { view, .. } } = e {
                if correct.contains(pid) {
                    entries.entry(*view).or_default().entry(*pid).or_insert(*time);
                }
            }
        }
        Facts { trace, params, correct, entries, delta: realised_delta(trace) }
    }

    /// Time the first correct processor entered `v`.
    pub fn first_entry(&self, v: View) -> Option<Timeslot> {
        self.entries.get(&v).and_then(|m| m.values().min().copied())
    }

    pub fn entry(&self, v: View, pid: ProcessorId) -> Option<Timeslot> {
        self.entries.get(&v).and_then(|m| m.get(&pid).copied())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pass,
    Inconclusive,
    Fail,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum Violation {
    ConsistencyViolation {
        property: String,
        detail: String,
        #[serde(skip_serializing_if = "Option::is_none")]
        counterexample: Option<Counterexample>,
    },
    LivenessViolation {
        #[serde(skip_serializing_if = "Option::is_none")]
        view: Option<View>,
        detail: String,
    },
    BoundViolation {
        view: View,
        property: String,
        pid: ProcessorId,
        deadline: Timeslot,
        #[serde(skip_serializing_if = "Option::is_none")]
        observed: Option<Timeslot>,
        /// `deadline − observed`; negative means late. Absent if the event never happened.
        #[serde(skip_serializing_if = "Option::is_none")]
        margin: Option<i64>,
    },
    ReplayMismatch {
        pid: ProcessorId,
        time: Timeslot,
        detail: String,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub check: String,
    pub status: Status,
    pub summary: String,
    pub violations: Vec<Violation>,
}

impl Verdict {
    pub(crate) fn new(check: &str, summary: String, violations: Vec<Violation>) -> Self {
        let status = if violations.is_empty() { Status::Pass } else { Status::Fail };
        Verdict { check: check.to_string(), status, summary, violations }
    }

    pub(crate) fn inconclusive(check: &str, summary: String) -> Self {
        Verdict { check: check.to_string(), status: Status::Inconclusive, summary, violations: Vec::new() }
    }
}

/// Which checks [`verify`] runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Checks {
    pub consistency: bool,
    pub liveness: bool,
    pub latency: bool,
    pub replay: bool,
}

impl Default for Checks {
    fn default() -> Self {
        Checks { consistency: true, liveness: true, latency: true, replay: true }
    }
}

impl Checks {
    pub const NAMES: [&'static str; 4] = ["consistency", "liveness", "latency", "replay"];

    pub fn none() -> Self {
        Checks { consistency: false, liveness: false, latency: false, replay: false }
    }

    /// Parses a comma-separated list such as `consistency,replay`, or `all`.
    pub fn parse_list(s: &str) -> Result<Self, String> {
        let mut c = Checks::none();
        for name in s.split(',').map(str::trim).filter(|x| !x.is_empty()) {
            match name {
                "all" => c = Checks::default(),
                "consistency" => c.consistency = true,
                "liveness" => c.liveness = true,
                "latency" => c.latency = true,
                "replay" => c.replay = true,
                other => return Err(format!("unknown check {other:?}; expected one of {:?}", Checks::NAMES)),
            }
        }
        Ok(c)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Report {
    pub verdicts: Vec<Verdict>,
}

impl Report {
    /// True unless some check failed. Inconclusive checks do not fail a run.
    pub fn passed(&self) -> bool {
        self.verdicts.iter().all(|v| v.status != Status::Fail)
    }

    pub fn get(&self, check: &str) -> Option<&Verdict> {
        self.verdicts.iter().find(|v| v.check == check)
    }
}

pub fn verify(trace: &Trace, checks: &Checks) -> Report {
    let mut verdicts = Vec::new();
    if checks.consistency {
        verdicts.push(check_consistency(trace));
    }
    if checks.liveness {
        verdicts.push(check_liveness(trace));
    }
    if checks.latency {
        verdicts.push(check_latency_bounds(trace));
    }
    if checks.replay {
        verdicts.push(check_replay(trace));
    }
    Report { verdicts }
}
