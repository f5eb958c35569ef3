//! Execution traces and their newline-delimited JSON form.
//!
//! Every line carries a `seq` equal to its line number and a `kind`. The first line is the
//! `HEADER` (configuration and adversary), the last is `END`. A `MSG` line defines message
//! `mid` by its canonical encoding in hex and precedes the first `SEND` that uses it; message
//! ids are dense and in order. `SEND` lines allocate envelope ids densely in order.

use std::collections::BTreeMap;
use std::io::{self, BufRead, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{AdversarySpec, SimConfig};
use crate::codec::Bytes;
use crate::protocol_types::{Message, SharedMessage, Timeslot};
use crate::replica::StateEvent;
use crate::sim_crypto::{Digest, ProcessorId};
use crate::wire::Canonical;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Event {
    Send { time: Timeslot, env: u64, src: ProcessorId, dst: ProcessorId, deliver_at: Timeslot, mid: u64 },
    Deliver { time: Timeslot, env: u64, src: ProcessorId, dst: ProcessorId, mid: u64 },
    Corrupt { time: Timeslot, pid: ProcessorId },
    Tx { time: Timeslot, pid: ProcessorId, data: Bytes },
    State { time: Timeslot, pid: ProcessorId, event: StateEvent },
}

impl Event {
    pub fn time(&self) -> Timeslot {
        match self {
            Event::Send { time, .. }
            | Event::Deliver { time, .. }
            | Event::Corrupt { time, .. }
            | Event::Tx { time, .. }
            | Event::State { time, .. } => *time,
        }
    }
}

/// A complete run: configuration, interned messages and the event log.
#[derive(Clone, Debug)]
pub struct Trace {
    pub config: SimConfig,
    pub adversary: AdversarySpec,
    /// Indexed by message id.
    pub messages: Vec<SharedMessage>,
    pub events: Vec<Event>,
    /// Last simulated timeslot.
    pub end: Timeslot,
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("line {line}: {msg}")]
    Json { line: u64, msg: String },
    #[error("line {line}: malformed trace: {detail}")]
    Malformed { line: u64, detail: String },
}

#[derive(Serialize, Deserialize)]
struct Line {
    seq: u64,
    #[serde(flatten)]
    record: Record,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
enum Record {
    Header { config: SimConfig, adversary: AdversarySpec },
    Msg { mid: u64, label: String, canonical: String },
    Send { time: Timeslot, env: u64, src: ProcessorId, dst: ProcessorId, deliver_at: Timeslot, mid: u64 },
    Deliver { time: Timeslot, env: u64, src: ProcessorId, dst: ProcessorId, mid: u64 },
    Corrupt { time: Timeslot, pid: ProcessorId },
    Tx { time: Timeslot, pid: ProcessorId, data: Bytes },
    State { time: Timeslot, pid: ProcessorId, event: StateEvent },
    End { time: Timeslot, messages: u64, envelopes: u64 },
}

impl From<&Event> for Record {
    fn from(e: &Event) -> Self {
        match e.clone() {
            Event::Send { time, env, src, dst, deliver_at, mid } => Record::Send { time, env, src, dst, deliver_at, mid },
            Event::Deliver { time, env, src, dst, mid } => Record::Deliver { time, env, src, dst, mid },
            Event::Corrupt { time, pid } => Record::Corrupt { time, pid },
            Event::Tx { time, pid, data } => Record::Tx { time, pid, data },
            Event::State { time, pid, event } => Record::State { time, pid, event },
        }
    }
}

fn write_line(w: &mut impl Write, seq: &mut u64, record: Record) -> io::Result<()> {
    serde_json::to_writer(&mut *w, &Line { seq: *seq, record })?;
    w.write_all(b"\n")?;
    *seq += 1;
    Ok(())
}

impl Trace {
    pub fn envelope_count(&self) -> u64 {
        self.events.iter().filter(|e| matches!(e, Event::Send { .. })).count() as u64
    }

    pub fn write_ndjson(&self, w: &mut impl Write) -> io::Result<()> {
        let mut seq = 0;
        write_line(w, &mut seq, Record::Header { config: self.config.clone(), adversary: self.adversary.clone() })?;
        let mut defined = 0u64;
        for e in &self.events {
            if let Event::Send { mid, .. } = e {
                while defined <= *mid {
                    let m = &self.messages[defined as usize];
                    let record = Record::Msg {
                        mid: defined,
                        label: m.label().to_string(),
                        canonical: hex::encode(m.to_canonical()),
                    };
                    write_line(w, &mut seq, record)?;
                    defined += 1;
                }
            }
            write_line(w, &mut seq, Record::from(e))?;
        }
        let record = Record::End { time: self.end, messages: defined, envelopes: self.envelope_count() };
        write_line(w, &mut seq, record)
    }

    pub fn to_ndjson_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_ndjson(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("JSON is UTF-8")
    }

    /// Parses and validates a trace. Any structural inconsistency (gaps in `seq`, undefined
    /// messages, deliveries without a matching send, sends due before the end but never
    /// delivered) is reported as malformed.
    pub fn read_ndjson(r: impl BufRead) -> Result<Trace, TraceError> {
        let mut parser = Parser::default();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            let i = i as u64;
            let parsed: Line = serde_json::from_str(&line).map_err(|e| TraceError::Json { line: i, msg: e.to_string() })?;
            if parsed.seq != i {
                return Err(malformed(i, format!("seq {} where {} was expected", parsed.seq, i)));
            }
            parser.feed(i, parsed.record)?;
        }
        parser.finish()
    }
}

fn malformed(line: u64, detail: impl Into<String>) -> TraceError {
    TraceError::Malformed { line, detail: detail.into() }
}

#[derive(Default)]
struct Parser {
    header: Option<(SimConfig, AdversarySpec)>,
    messages: Vec<SharedMessage>,
    digests: BTreeMap<Digest, u64>,
    events: Vec<Event>,
    /// env -> (src, dst, deliver_at, mid, delivered)
    envelopes: Vec<(ProcessorId, ProcessorId, Timeslot, u64, bool)>,
    now: Timeslot,
    end: Option<Timeslot>,
}

impl Parser {
    fn feed(&mut self, line: u64, record: Record) -> Result<(), TraceError> {
        if self.end.is_some() {
            return Err(malformed(line, "record after END"));
        }
        let Some((cfg, _)) = &self.header else {
            return match record {
                Record::Header { config, adversary } => {
                    config.validate().map_err(|e| malformed(line, e.to_string()))?;
                    self.header = Some((config, adversary));
                    Ok(())
                }
                _ => Err(malformed(line, "first record is not HEADER")),
            };
        };
        let n = cfg.n;
        let pid_ok = |p: ProcessorId| (1..=n).contains(&p);
        let time = match &record {
            Record::Send { time, .. }
            | Record::Deliver { time, .. }
            | Record::Corrupt { time, .. }
            | Record::Tx { time, .. }
            | Record::State { time, .. }
            | Record::End { time, .. } => Some(*time),
            _ => None,
        };
        if let Some(t) = time {
            if t < self.now {
                return Err(malformed(line, format!("time {t} goes backwards from {}", self.now)));
            }
            self.now = t;
        }
        match record {
            Record::Header { .. } => return Err(malformed(line, "second HEADER")),
            Record::Msg { mid, label, canonical } => {
                if mid != self.messages.len() as u64 {
                    return Err(malformed(line, format!("message id {mid} out of order")));
                }
                let bytes = hex::decode(&canonical).map_err(|e| malformed(line, e.to_string()))?;
                let msg = Message::from_canonical(&bytes).map_err(|e| malformed(line, e.to_string()))?;
                if msg.label() != label {
                    return Err(malformed(line, format!("label {label} does not match {}", msg.label())));
                }
                if self.digests.insert(msg.digest(), mid).is_some() {
                    return Err(malformed(line, "duplicate message definition"));
                }
                self.messages.push(Arc::new(msg));
            }
            Record::Send { time, env, src, dst, deliver_at, mid } => {
                if env != self.envelopes.len() as u64 {
                    return Err(malformed(line, format!("envelope id {env} out of order")));
                }
                if mid >= self.messages.len() as u64 || !pid_ok(src) || !pid_ok(dst) {
                    return Err(malformed(line, "SEND references unknown message or processor"));
                }
                let in_bounds = if src == dst {
                    deliver_at == time
                } else {
                    deliver_at > time && deliver_at <= cfg.latest_delivery(time)
                };
                if !in_bounds {
                    return Err(malformed(line, format!("delivery time {deliver_at} outside the model bound")));
                }
                self.envelopes.push((src, dst, deliver_at, mid, false));
                self.events.push(Event::Send { time, env, src, dst, deliver_at, mid });
            }
            Record::Deliver { time, env, src, dst, mid } => {
                let Some(e) = self.envelopes.get_mut(env as usize) else {
                    return Err(malformed(line, format!("DELIVER of unknown envelope {env}")));
                };
                if e.4 || (e.0, e.1, e.2, e.3) != (src, dst, time, mid) {
                    return Err(malformed(line, format!("DELIVER of envelope {env} does not match its SEND")));
                }
                e.4 = true;
                self.events.push(Event::Deliver { time, env, src, dst, mid });
            }
            Record::Corrupt { time, pid } if pid_ok(pid) => self.events.push(Event::Corrupt { time, pid }),
            Record::Tx { time, pid, data } if pid_ok(pid) => self.events.push(Event::Tx { time, pid, data }),
            Record::State { time, pid, event } if pid_ok(pid) => self.events.push(Event::State { time, pid, event }),
            Record::Corrupt { .. } | Record::Tx { .. } | Record::State { .. } => {
                return Err(malformed(line, "unknown processor"));
            }
            Record::End { time, messages, envelopes } => {
                if messages != self.messages.len() as u64 || envelopes != self.envelopes.len() as u64 {
                    return Err(malformed(line, "END counts do not match the trace"));
                }
                if let Some(env) = self.envelopes.iter().position(|e| e.2 <= time && !e.4) {
                    return Err(malformed(line, format!("envelope {env} due by {time} was never delivered")));
                }
                self.end = Some(time);
            }
        }
        Ok(())
    }

    fn finish(self) -> Result<Trace, TraceError> {
        let Some((config, adversary)) = self.header else {
            return Err(malformed(0, "empty trace"));
        };
        let Some(end) = self.end else {
            return Err(malformed(self.events.len() as u64, "missing END"));
        };
        Ok(Trace { config, adversary, messages: self.messages, events: self.events, end })
    }
}

#[cfg(test)]
mod tests {
    use super::super::{run, SimConfig};
    use super::*;
    use crate::protocol_types::Variant;

    fn sample() -> Trace {
        let mut cfg = SimConfig::new(Variant::Carnot2, 4, 1);
        cfg.horizon = 25;
        cfg.tx_schedule.every = Some(4);
        run(&cfg, &mut *AdversarySpec::Honest.build(&cfg).unwrap()).unwrap()
    }

    #[test]
    fn round_trip_is_lossless() {
        let t = sample();
        let text = t.to_ndjson_string();
        let back = Trace::read_ndjson(text.as_bytes()).unwrap();
        assert_eq!(back.events, t.events);
        assert_eq!(back.messages.len(), t.messages.len());
        assert_eq!(back.to_ndjson_string(), text);
    }

    #[test]
    fn deleted_deliver_is_malformed() {
        let text = sample().to_ndjson_string();
        let lines: Vec<&str> = text.lines().collect();
        let i = lines.iter().position(|l| l.contains("\"kind\":\"DELIVER\"")).unwrap();
        let mut kept = lines.clone();
        kept.remove(i);
        let err = Trace::read_ndjson(kept.join("\n").as_bytes()).unwrap_err();
        assert!(matches!(err, TraceError::Malformed { .. }));
    }

    #[test]
    fn renumbered_deletion_is_still_caught() {
        let text = sample().to_ndjson_string();
        let mut lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        let i = lines.iter().position(|l| l["kind"] == "DELIVER").unwrap();
        lines.remove(i);
        for (seq, l) in lines.iter_mut().enumerate() {
            l["seq"] = seq.into();
        }
        let body: Vec<String> = lines.iter().map(|l| l.to_string()).collect();
        assert!(Trace::read_ndjson(body.join("\n").as_bytes()).is_err());
    }

    #[test]
    fn first_line_must_be_header() {
        let text = sample().to_ndjson_string();
        let rest: Vec<&str> = text.lines().skip(1).collect();
        assert!(Trace::read_ndjson(rest.join("\n").as_bytes()).is_err());
    }
}
