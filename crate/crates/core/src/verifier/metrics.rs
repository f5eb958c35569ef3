use std::collections::{BTreeMap, BTreeSet};
use std::io;

use serde::{Deserialize, Serialize};

use super::realised_delta;
use crate::net_sim::{Event, Trace};
use crate::protocol_types::{quorums, CertKind, Message, Timeslot, View};
use crate::replica::StateEvent;
use crate::sim_crypto::{Digest, ProcessorId};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewMetrics {
    pub view: View,
    pub leader: ProcessorId,
    /// Reconstruction parameter of the leader's first block for the view.
    pub k: u32,
    /// Total payload bytes over the leader's blocks for the view.
    pub beta: u64,
    /// Fragment bytes the leader sent for those blocks, its own fragment included.
    pub leader_bytes: u64,
    pub rate: Option<f64>,
    /// From the first fragment send to the first stage-2 certificate anyone holds.
    pub finalisation_latency: Option<u64>,
    pub recovery_frags: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub views: Vec<ViewMetrics>,
    pub realised_delta: Option<u64>,
    /// Wire bytes of everything except the leaders' own fragments.
    pub overhead_bytes: u64,
    pub messages_by_label: BTreeMap<String, u64>,
    pub bytes_by_label: BTreeMap<String, u64>,
}

impl Metrics {
    pub const CSV_HEADER: [&'static str; 8] =
        ["view", "leader", "k", "beta", "leader_bytes", "rate", "finalisation_latency", "recovery_frags"];

    pub fn write_csv(&self, w: impl io::Write) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(Self::CSV_HEADER)?;
        for v in &self.views {
            out.write_record([
                v.view.to_string(),
                v.leader.to_string(),
                v.k.to_string(),
                v.beta.to_string(),
                v.leader_bytes.to_string(),
                v.rate.map(|r| format!("{r:.6}")).unwrap_or_default(),
                v.finalisation_latency.map(|l| l.to_string()).unwrap_or_default(),
                v.recovery_frags.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

pub fn metrics(trace: &Trace) -> Metrics {
    let params = trace.config.params().expect("trace configuration was validated");
    let q = quorums(params.variant, params.n, params.f).expect("validated");

    // Blocks proposed by their view's leader, by view, in proposal order.
    let mut blocks: BTreeMap<View, Vec<(Digest, u32, u64)>> = BTreeMap::new();
    let mut seen: BTreeMap<Digest, (View, bool)> = BTreeMap::new();
    let mut first_send: BTreeMap<Digest, Timeslot> = BTreeMap::new();
    let mut leader_bytes: BTreeMap<View, u64> = BTreeMap::new();
    let mut recovery: BTreeMap<View, u64> = BTreeMap::new();
    let mut by_label: BTreeMap<String, u64> = BTreeMap::new();
    let mut bytes_by_label: BTreeMap<String, u64> = BTreeMap::new();
    let mut overhead = 0u64;
    let mut wire: BTreeMap<u64, u64> = BTreeMap::new();

    for e in &trace.events {
        let Event::Send { time, src, dst, mid, .. } = e else { continue };
        let msg = &trace.messages[*mid as usize];
        let len = *wire.entry(*mid).or_insert_with(|| msg.wire_len() as u64);
        *by_label.entry(msg.label().to_string()).or_default() += 1;
        *bytes_by_label.entry(msg.label().to_string()).or_default() += len;
        match &**msg {
            Message::Fragment(fm) if params.lead(fm.block.view()) == *src && fm.fragment.index() == *dst => {
                let b = &fm.block;
                if seen.insert(b.id(), (b.view(), b.recovery_tag() == Some(b.tag()))).is_none() {
                    blocks.entry(b.view()).or_default().push((b.id(), b.tag().k, b.tag().beta));
                }
                first_send.entry(b.id()).or_insert(*time);
                *leader_bytes.entry(b.view()).or_default() += fm.fragment.fragment.data.len() as u64;
            }
            Message::Recovery(r) if src != dst => {
                *recovery.entry(r.block.view()).or_default() += 1;
                overhead += len;
            }
            _ => overhead += len,
        }
    }
    // Recovery fragments sent as primary fragments (k = n − f − 1) show up in timer events.
    for e in &trace.events {
        if let Event::State { event: StateEvent::TimerFired { block, recovery_sent }, .. } = e {
            if let Some(&(v, true)) = seen.get(block) {
                *recovery.entry(v).or_default() += *recovery_sent as u64;
            }
        }
    }

    // First time anyone holds a stage-2 certificate for each block.
    let mut votes: BTreeMap<(ProcessorId, Digest), BTreeSet<ProcessorId>> = BTreeMap::new();
    let mut certified_at: BTreeMap<Digest, Timeslot> = BTreeMap::new();
    for e in &trace.events {
        let Event::Deliver { time, dst, mid, .. } = e else { continue };
        match &*trace.messages[*mid as usize] {
            Message::Vote(v) if v.stage == 2 => {
                let set = votes.entry((*dst, v.block.id())).or_default();
                set.insert(v.voter);
                if set.len() as u32 >= q.stage2 {
                    certified_at.entry(v.block.id()).or_insert(*time);
                }
            }
            Message::Certificate(c) if c.kind == CertKind::Stage2Cert => {
                if let Some(b) = c.block() {
                    certified_at.entry(b.id()).or_insert(*time);
                }
            }
            _ => {}
        }
    }

    let views = blocks
        .iter()
        .map(|(&view, bs)| {
            let beta: u64 = bs.iter().map(|b| b.2).sum();
            let sent = leader_bytes.get(&view).copied().unwrap_or(0);
            let latency = bs
                .iter()
                .filter_map(|(id, _, _)| Some(certified_at.get(id)?.saturating_sub(*first_send.get(id)?)))
                .min();
            ViewMetrics {
                view,
                leader: params.lead(view),
                k: bs[0].1,
                beta,
                leader_bytes: sent,
                rate: (beta > 0).then(|| sent as f64 / beta as f64),
                finalisation_latency: latency,
                recovery_frags: recovery.get(&view).copied().unwrap_or(0),
            }
        })
        .collect();
    Metrics {
        views,
        realised_delta: realised_delta(trace),
        overhead_bytes: overhead,
        messages_by_label: by_label,
        bytes_by_label,
    }
}
