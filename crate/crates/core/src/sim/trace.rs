//! Globally ordered record of everything a simulation did.
//!
//! A trace carries per-event records (send/receive detail only at the `full`
//! level), compact per-server delivery logs, per-message transmission
//! counts, and the run outcome. Traces export to a stable tab-separated text
//! format that round-trips through [`Trace::parse`], so checkers can run on
//! files as well as in-memory runs, and equal-seed runs can be compared
//! byte for byte.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::overlay::ServerId;
use crate::protocol::{
    FailureNotification, Message, Payload, ProbeDirection, RoundKind, SimTime, StateLabel,
    TransitionKind, Wire, WireRoundKind,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceLevel {
    /// Every send, receive, and suppression is recorded.
    Full,
    /// Only state-changing records; for large scenarios.
    Light,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EndReason {
    /// Every live server delivered the whole workload.
    Completed,
    /// The configured simulated-time bound elapsed first.
    TimeBound,
    /// No events left but the workload is not delivered.
    Stalled,
    /// No live server remains.
    AllTerminated,
    /// A protocol invariant trap fired.
    Violation(String),
}

impl EndReason {
    fn tag(&self) -> String {
        match self {
            EndReason::Completed => "completed".into(),
            EndReason::TimeBound => "time-bound".into(),
            EndReason::Stalled => "stalled".into(),
            EndReason::AllTerminated => "all-terminated".into(),
            EndReason::Violation(d) => format!("violation {}", d.replace(['\t', '\n'], " ")),
        }
    }
}

/// Dense server-id set.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SourceBits(Vec<u64>);

impl SourceBits {
    pub fn from_ids(ids: impl IntoIterator<Item = ServerId>) -> Self {
        let mut bits = SourceBits::default();
        for id in ids {
            bits.insert(id);
        }
        bits
    }

    pub fn insert(&mut self, id: ServerId) {
        let word = id / 64;
        if self.0.len() <= word {
            self.0.resize(word + 1, 0);
        }
        self.0[word] |= 1 << (id % 64);
    }

    pub fn contains(&self, id: ServerId) -> bool {
        self.0
            .get(id / 64)
            .is_some_and(|w| w & (1 << (id % 64)) != 0)
    }

    pub fn iter(&self) -> impl Iterator<Item = ServerId> + '_ {
        self.0.iter().enumerate().flat_map(|(w, &word)| {
            (0..64).filter_map(move |b| (word & (1 << b) != 0).then_some(w * 64 + b))
        })
    }

    pub fn len(&self) -> usize {
        self.0.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.0.iter().all(|&w| w == 0)
    }

    pub fn to_hex(&self) -> String {
        if self.0.is_empty() {
            return "0".into();
        }
        self.0
            .iter()
            .map(|w| format!("{w:x}"))
            .collect::<Vec<_>>()
            .join(",")
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        let words = s
            .split(',')
            .map(|w| u64::from_str_radix(w, 16).ok())
            .collect::<Option<Vec<_>>>()?;
        Some(SourceBits(words))
    }
}

/// One A-delivered round at one server.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeliveredRound {
    pub round: u32,
    pub epoch: u32,
    pub kind: WireRoundKind,
    pub time: SimTime,
    pub count: u32,
    pub sources: SourceBits,
    /// XOR of the delivered payload digests; order-insensitive content check.
    pub digest_xor: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TraceEventKind {
    Send { to: ServerId, wire: Wire },
    Receive { from: ServerId, wire: Wire, label: StateLabel },
    Suppressed { from: ServerId, wire: Wire },
    Transition { kind: TransitionKind, from: StateLabel, to: StateLabel },
    Deliver { round: u32, epoch: u32, kind: WireRoundKind, count: u32 },
    Crash,
    /// Local failure detector emitted a notification for `target`.
    Detected { target: ServerId },
    Removed { servers: Vec<ServerId> },
    SelfTerminated,
    EonDirective { epoch: u32 },
    TransitionalEntered { epoch: u32, round: u32 },
    EonSwitched { eon: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceEvent {
    pub time: SimTime,
    pub server: ServerId,
    pub kind: TraceEventKind,
}

/// Scenario facts the checkers need, embedded in the trace.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceMeta {
    pub n: usize,
    pub f: usize,
    pub seed: u64,
    pub rounds: u32,
    pub payload_len: u32,
    pub perfect_fd: bool,
    pub uniform: bool,
    pub partition: bool,
    pub reliable_only: bool,
    pub exceeds_f: bool,
    pub level_full: bool,
    /// Reruns were allowed to carry fresh payloads.
    pub rerun_relax: bool,
}

#[derive(Debug, Clone)]
pub struct Trace {
    pub meta: TraceMeta,
    pub events: Vec<TraceEvent>,
    /// Indexed by server id.
    pub logs: Vec<Vec<DeliveredRound>>,
    /// First A-broadcast per (server, round): time, epoch, payload digest.
    pub own_broadcasts: BTreeMap<(ServerId, u32), (SimTime, u32, u64)>,
    /// Transmissions per message identity (source, epoch, round, kind).
    pub transmissions: BTreeMap<(ServerId, u32, u32, WireRoundKind), u64>,
    pub crashed: BTreeMap<ServerId, SimTime>,
    pub terminated: BTreeMap<ServerId, SimTime>,
    pub transitions: BTreeMap<TransitionKind, u64>,
    pub end: EndReason,
    pub end_time: SimTime,
}

impl Trace {
    pub fn new(meta: TraceMeta) -> Self {
        let n = meta.n;
        Trace {
            meta,
            events: Vec::new(),
            logs: vec![Vec::new(); n],
            own_broadcasts: BTreeMap::new(),
            transmissions: BTreeMap::new(),
            crashed: BTreeMap::new(),
            terminated: BTreeMap::new(),
            transitions: BTreeMap::new(),
            end: EndReason::Stalled,
            end_time: 0,
        }
    }

    /// Servers that were neither crashed nor self-terminated at trace end.
    pub fn live_servers(&self) -> Vec<ServerId> {
        (0..self.meta.n)
            .filter(|s| !self.crashed.contains_key(s) && !self.terminated.contains_key(s))
            .collect()
    }

    /// Faulty from the checkers' viewpoint: crashed or self-terminated.
    pub fn is_faulty(&self, s: ServerId) -> bool {
        self.crashed.contains_key(&s) || self.terminated.contains_key(&s)
    }

    pub fn transition_count(&self, kind: TransitionKind) -> u64 {
        self.transitions.get(&kind).copied().unwrap_or(0)
    }

    /// Did any membership view remove `server` at or after `time`?
    pub fn removed_after(&self, time: SimTime, server: ServerId) -> bool {
        self.events.iter().any(|ev| {
            ev.time >= time
                && matches!(&ev.kind, TraceEventKind::Removed { servers } if servers.contains(&server))
        })
    }

    /// FNV-1a over the exported text; equal seeds must give equal digests.
    pub fn digest(&self) -> u64 {
        let text = self.export();
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in text.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }

    pub fn export(&self) -> String {
        let mut out = String::new();
        let m = &self.meta;
        out.push_str("#dualcast-trace v1\n");
        let _ = writeln!(
            out,
            "#meta n={} f={} seed={} rounds={} payload={} perfect={} uniform={} partition={} reliable_only={} exceeds_f={} full={} relax={}",
            m.n, m.f, m.seed, m.rounds, m.payload_len,
            m.perfect_fd as u8, m.uniform as u8, m.partition as u8,
            m.reliable_only as u8, m.exceeds_f as u8, m.level_full as u8,
            m.rerun_relax as u8,
        );
        let _ = writeln!(out, "#end\t{}\t{}", self.end_time, self.end.tag());
        for (s, t) in &self.crashed {
            let _ = writeln!(out, "#crash\t{s}\t{t}");
        }
        for (s, t) in &self.terminated {
            let _ = writeln!(out, "#term\t{s}\t{t}");
        }
        for ((s, r), (t, e, d)) in &self.own_broadcasts {
            let _ = writeln!(out, "#own\t{s}\t{r}\t{t}\t{e}\t{d:x}");
        }
        for ((s, e, r, k), c) in &self.transmissions {
            let _ = writeln!(out, "#tx\t{s}\t{e}\t{r}\t{k}\t{c}");
        }
        for (server, log) in self.logs.iter().enumerate() {
            for d in log {
                let _ = writeln!(
                    out,
                    "#log\t{server}\t{}\t{}\t{}\t{}\t{}\t{:x}\t{}",
                    d.round,
                    d.epoch,
                    d.kind,
                    d.time,
                    d.count,
                    d.digest_xor,
                    d.sources.to_hex()
                );
            }
        }
        for ev in &self.events {
            let _ = writeln!(out, "{}", format_event(ev));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Trace, TraceParseError> {
        parse_trace(text)
    }
}

fn format_label(l: &StateLabel) -> String {
    format!("{}:{}:{}", l.kind, l.epoch, l.round)
}

fn parse_label(s: &str) -> Option<StateLabel> {
    let mut it = s.split(':');
    let kind = match it.next()? {
        "U" => RoundKind::Unreliable,
        "U1" => RoundKind::UnreliableFirst,
        "R" => RoundKind::Reliable,
        _ => return None,
    };
    let epoch = it.next()?.parse().ok()?;
    let round = it.next()?.parse().ok()?;
    Some(StateLabel::new(epoch, round, kind))
}

fn format_wire(w: &Wire) -> String {
    match w {
        Wire::Broadcast(m) => format!(
            "b:{}:{}:{}:{}:{}:{:x}",
            m.source, m.epoch, m.round, m.eon, m.payload.len, m.payload.digest
        ),
        Wire::RBroadcast(m) => format!(
            "r:{}:{}:{}:{}:{}:{:x}",
            m.source, m.epoch, m.round, m.eon, m.payload.len, m.payload.digest
        ),
        Wire::Fail(f) => format!("f:{}:{}:{}", f.target, f.owner, f.eon),
        Wire::Heartbeat { from, eon, sent_at } => format!("h:{from}:{eon}:{sent_at}"),
        Wire::Probe {
            origin,
            epoch,
            round,
            direction,
            eon,
        } => {
            let d = match direction {
                ProbeDirection::Forward => "fw",
                ProbeDirection::Backward => "bw",
            };
            format!("p:{origin}:{epoch}:{round}:{d}:{eon}")
        }
    }
}

fn parse_wire(s: &str) -> Option<Wire> {
    let mut it = s.split(':');
    let tag = it.next()?;
    let mut num = || it.next().and_then(|v| v.parse::<u64>().ok());
    match tag {
        "b" | "r" => {
            let source = num()? as ServerId;
            let epoch = num()? as u32;
            let round = num()? as u32;
            let eon = num()? as u32;
            let len = num()? as u32;
            let digest = u64::from_str_radix(it.next()?, 16).ok()?;
            let kind = if tag == "b" {
                WireRoundKind::Unreliable
            } else {
                WireRoundKind::Reliable
            };
            let msg = Message {
                source,
                epoch,
                round,
                kind,
                eon,
                payload: Payload { len, digest },
            };
            Some(if tag == "b" {
                Wire::Broadcast(msg)
            } else {
                Wire::RBroadcast(msg)
            })
        }
        "f" => Some(Wire::Fail(FailureNotification {
            target: num()? as ServerId,
            owner: num()? as ServerId,
            eon: num()? as u32,
        })),
        "h" => Some(Wire::Heartbeat {
            from: num()? as ServerId,
            eon: num()? as u32,
            sent_at: num()?,
        }),
        "p" => {
            let origin = num()? as ServerId;
            let epoch = num()? as u32;
            let round = num()? as u32;
            let direction = match it.next()? {
                "fw" => ProbeDirection::Forward,
                "bw" => ProbeDirection::Backward,
                _ => return None,
            };
            let eon = it.next()?.parse::<u32>().ok()?;
            Some(Wire::Probe {
                origin,
                epoch,
                round,
                direction,
                eon,
            })
        }
        _ => None,
    }
}

fn parse_transition_kind(s: &str) -> Option<TransitionKind> {
    Some(match s {
        "tuu" => TransitionKind::Tuu,
        "trf" => TransitionKind::Trf,
        "tur" => TransitionKind::Tur,
        "tfr" => TransitionKind::Tfr,
        "trr" => TransitionKind::Trr,
        "tsk" => TransitionKind::Tsk,
        _ => return None,
    })
}

fn format_event(ev: &TraceEvent) -> String {
    let body = match &ev.kind {
        TraceEventKind::Send { to, wire } => format!("snd\t{to}\t{}", format_wire(wire)),
        TraceEventKind::Receive { from, wire, label } => {
            format!("rcv\t{from}\t{}\t{}", format_wire(wire), format_label(label))
        }
        TraceEventKind::Suppressed { from, wire } => {
            format!("sup\t{from}\t{}", format_wire(wire))
        }
        TraceEventKind::Transition { kind, from, to } => {
            format!("trn\t{kind}\t{}\t{}", format_label(from), format_label(to))
        }
        TraceEventKind::Deliver {
            round,
            epoch,
            kind,
            count,
        } => format!("dlv\t{round}\t{epoch}\t{kind}\t{count}"),
        TraceEventKind::Crash => "crash".into(),
        TraceEventKind::Detected { target } => format!("det\t{target}"),
        TraceEventKind::Removed { servers } => format!(
            "rm\t{}",
            servers
                .iter()
                .map(|s| s.to_string())
                .collect::<Vec<_>>()
                .join(",")
        ),
        TraceEventKind::SelfTerminated => "halt".into(),
        TraceEventKind::EonDirective { epoch } => format!("eondir\t{epoch}"),
        TraceEventKind::TransitionalEntered { epoch, round } => {
            format!("trent\t{epoch}\t{round}")
        }
        TraceEventKind::EonSwitched { eon } => format!("eonsw\t{eon}"),
    };
    format!("{}\t{}\t{}", ev.time, ev.server, body)
}

#[derive(Debug, Error)]
#[error("trace parse error at line {line}: {msg}")]
pub struct TraceParseError {
    pub line: usize,
    pub msg: String,
}

fn parse_trace(text: &str) -> Result<Trace, TraceParseError> {
    let err = |line: usize, msg: &str| TraceParseError {
        line,
        msg: msg.to_string(),
    };
    let mut meta: Option<TraceMeta> = None;
    let mut trace: Option<Trace> = None;
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.is_empty() || raw == "#dualcast-trace v1" {
            continue;
        }
        if let Some(rest) = raw.strip_prefix("#meta ") {
            let mut kv = BTreeMap::new();
            for part in rest.split_whitespace() {
                let (k, v) = part
                    .split_once('=')
                    .ok_or_else(|| err(line, "bad meta pair"))?;
                kv.insert(k.to_string(), v.to_string());
            }
            let get = |k: &str| -> Result<u64, TraceParseError> {
                kv.get(k)
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| err(line, &format!("missing meta {k}")))
            };
            let m = TraceMeta {
                n: get("n")? as usize,
                f: get("f")? as usize,
                seed: get("seed")?,
                rounds: get("rounds")? as u32,
                payload_len: get("payload")? as u32,
                perfect_fd: get("perfect")? != 0,
                uniform: get("uniform")? != 0,
                partition: get("partition")? != 0,
                reliable_only: get("reliable_only")? != 0,
                exceeds_f: get("exceeds_f")? != 0,
                level_full: get("full")? != 0,
                rerun_relax: kv.get("relax").and_then(|v| v.parse::<u64>().ok()).unwrap_or(0) != 0,
            };
            trace = Some(Trace::new(m.clone()));
            meta = Some(m);
            continue;
        }
        let t = trace
            .as_mut()
            .ok_or_else(|| err(line, "content before #meta"))?;
        let fields: Vec<&str> = raw.split('\t').collect();
        if raw.starts_with('#') {
            match fields[0] {
                "#end" => {
                    if fields.len() < 3 {
                        return Err(err(line, "bad #end"));
                    }
                    t.end_time = fields[1].parse().map_err(|_| err(line, "bad end time"))?;
                    t.end = match fields[2].split(' ').next().unwrap_or("") {
                        "completed" => EndReason::Completed,
                        "time-bound" => EndReason::TimeBound,
                        "stalled" => EndReason::Stalled,
                        "all-terminated" => EndReason::AllTerminated,
                        "violation" => EndReason::Violation(
                            fields[2].splitn(2, ' ').nth(1).unwrap_or("").to_string(),
                        ),
                        _ => return Err(err(line, "bad end reason")),
                    };
                }
                "#crash" => {
                    t.crashed.insert(
                        fields[1].parse().map_err(|_| err(line, "bad server"))?,
                        fields[2].parse().map_err(|_| err(line, "bad time"))?,
                    );
                }
                "#term" => {
                    t.terminated.insert(
                        fields[1].parse().map_err(|_| err(line, "bad server"))?,
                        fields[2].parse().map_err(|_| err(line, "bad time"))?,
                    );
                }
                "#own" => {
                    if fields.len() != 6 {
                        return Err(err(line, "bad #own"));
                    }
                    let s: ServerId = fields[1].parse().map_err(|_| err(line, "bad server"))?;
                    let r: u32 = fields[2].parse().map_err(|_| err(line, "bad round"))?;
                    let tm: SimTime = fields[3].parse().map_err(|_| err(line, "bad time"))?;
                    let e: u32 = fields[4].parse().map_err(|_| err(line, "bad epoch"))?;
                    let d = u64::from_str_radix(fields[5], 16).map_err(|_| err(line, "bad digest"))?;
                    t.own_broadcasts.insert((s, r), (tm, e, d));
                }
                "#tx" => {
                    if fields.len() != 6 {
                        return Err(err(line, "bad #tx"));
                    }
                    let s: ServerId = fields[1].parse().map_err(|_| err(line, "bad server"))?;
                    let e: u32 = fields[2].parse().map_err(|_| err(line, "bad epoch"))?;
                    let r: u32 = fields[3].parse().map_err(|_| err(line, "bad round"))?;
                    let k = match fields[4] {
                        "u" => WireRoundKind::Unreliable,
                        "r" => WireRoundKind::Reliable,
                        _ => return Err(err(line, "bad kind")),
                    };
                    let c: u64 = fields[5].parse().map_err(|_| err(line, "bad count"))?;
                    t.transmissions.insert((s, e, r, k), c);
                }
                "#log" => {
                    if fields.len() != 9 {
                        return Err(err(line, "bad #log"));
                    }
                    let server: ServerId =
                        fields[1].parse().map_err(|_| err(line, "bad server"))?;
                    let kind = match fields[4] {
                        "u" => WireRoundKind::Unreliable,
                        "r" => WireRoundKind::Reliable,
                        _ => return Err(err(line, "bad kind")),
                    };
                    let d = DeliveredRound {
                        round: fields[2].parse().map_err(|_| err(line, "bad round"))?,
                        epoch: fields[3].parse().map_err(|_| err(line, "bad epoch"))?,
                        kind,
                        time: fields[5].parse().map_err(|_| err(line, "bad time"))?,
                        count: fields[6].parse().map_err(|_| err(line, "bad count"))?,
                        digest_xor: u64::from_str_radix(fields[7], 16)
                            .map_err(|_| err(line, "bad digest"))?,
                        sources: SourceBits::from_hex(fields[8])
                            .ok_or_else(|| err(line, "bad sources"))?,
                    };
                    let m = meta.as_ref().unwrap();
                    if server >= m.n {
                        return Err(err(line, "server out of range"));
                    }
                    t.logs[server].push(d);
                }
                _ => return Err(err(line, "unknown section")),
            }
            continue;
        }
        // Plain event line.
        if fields.len() < 3 {
            return Err(err(line, "short event line"));
        }
        let time: SimTime = fields[0].parse().map_err(|_| err(line, "bad time"))?;
        let server: ServerId = fields[1].parse().map_err(|_| err(line, "bad server"))?;
        let kind = match fields[2] {
            "snd" => TraceEventKind::Send {
                to: fields[3].parse().map_err(|_| err(line, "bad target"))?,
                wire: parse_wire(fields[4]).ok_or_else(|| err(line, "bad wire"))?,
            },
            "rcv" => TraceEventKind::Receive {
                from: fields[3].parse().map_err(|_| err(line, "bad sender"))?,
                wire: parse_wire(fields[4]).ok_or_else(|| err(line, "bad wire"))?,
                label: parse_label(fields[5]).ok_or_else(|| err(line, "bad label"))?,
            },
            "sup" => TraceEventKind::Suppressed {
                from: fields[3].parse().map_err(|_| err(line, "bad sender"))?,
                wire: parse_wire(fields[4]).ok_or_else(|| err(line, "bad wire"))?,
            },
            "trn" => TraceEventKind::Transition {
                kind: parse_transition_kind(fields[3]).ok_or_else(|| err(line, "bad kind"))?,
                from: parse_label(fields[4]).ok_or_else(|| err(line, "bad label"))?,
                to: parse_label(fields[5]).ok_or_else(|| err(line, "bad label"))?,
            },
            "dlv" => TraceEventKind::Deliver {
                round: fields[3].parse().map_err(|_| err(line, "bad round"))?,
                epoch: fields[4].parse().map_err(|_| err(line, "bad epoch"))?,
                kind: match fields[5] {
                    "u" => WireRoundKind::Unreliable,
                    "r" => WireRoundKind::Reliable,
                    _ => return Err(err(line, "bad kind")),
                },
                count: fields[6].parse().map_err(|_| err(line, "bad count"))?,
            },
            "crash" => TraceEventKind::Crash,
            "det" => TraceEventKind::Detected {
                target: fields[3].parse().map_err(|_| err(line, "bad target"))?,
            },
            "rm" => TraceEventKind::Removed {
                servers: fields[3]
                    .split(',')
                    .filter(|s| !s.is_empty())
                    .map(|s| s.parse().map_err(|_| err(line, "bad server list")))
                    .collect::<Result<_, _>>()?,
            },
            "halt" => TraceEventKind::SelfTerminated,
            "eondir" => TraceEventKind::EonDirective {
                epoch: fields[3].parse().map_err(|_| err(line, "bad epoch"))?,
            },
            "trent" => TraceEventKind::TransitionalEntered {
                epoch: fields[3].parse().map_err(|_| err(line, "bad epoch"))?,
                round: fields[4].parse().map_err(|_| err(line, "bad round"))?,
            },
            "eonsw" => TraceEventKind::EonSwitched {
                eon: fields[3].parse().map_err(|_| err(line, "bad eon"))?,
            },
            other => return Err(err(line, &format!("unknown event {other}"))),
        };
        if let TraceEventKind::Transition { kind, .. } = &kind {
            *t.transitions.entry(*kind).or_insert(0) += 1;
        }
        t.events.push(TraceEvent { time, server, kind });
    }
    trace.ok_or_else(|| err(0, "empty trace"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta() -> TraceMeta {
        TraceMeta {
            n: 3,
            f: 1,
            seed: 7,
            rounds: 5,
            payload_len: 16,
            perfect_fd: true,
            uniform: false,
            partition: false,
            reliable_only: false,
            exceeds_f: false,
            level_full: true,
            rerun_relax: false,
        }
    }

    #[test]
    fn export_parse_round_trip() {
        let mut t = Trace::new(meta());
        t.end = EndReason::Completed;
        t.end_time = 4242;
        t.crashed.insert(2, 1000);
        t.own_broadcasts.insert((0, 1), (5, 1, 0xdead));
        t.transmissions.insert((0, 1, 1, WireRoundKind::Unreliable), 2);
        t.logs[0].push(DeliveredRound {
            round: 1,
            epoch: 1,
            kind: WireRoundKind::Unreliable,
            time: 300,
            count: 3,
            sources: SourceBits::from_ids([0, 1, 2]),
            digest_xor: 0xabc,
        });
        t.events.push(TraceEvent {
            time: 10,
            server: 0,
            kind: TraceEventKind::Transition {
                kind: TransitionKind::Trf,
                from: StateLabel::INITIAL,
                to: StateLabel::new(1, 1, RoundKind::UnreliableFirst),
            },
        });
        t.events.push(TraceEvent {
            time: 11,
            server: 0,
            kind: TraceEventKind::Send {
                to: 1,
                wire: Wire::Broadcast(Message {
                    source: 0,
                    epoch: 1,
                    round: 1,
                    kind: WireRoundKind::Unreliable,
                    eon: 1,
                    payload: Payload { len: 16, digest: 0x99 },
                }),
            },
        });
        let text = t.export();
        let parsed = Trace::parse(&text).unwrap();
        assert_eq!(parsed.export(), text);
        assert_eq!(parsed.end, EndReason::Completed);
        assert_eq!(parsed.logs[0].len(), 1);
        assert_eq!(parsed.transition_count(TransitionKind::Trf), 1);
    }

    #[test]
    fn source_bits_round_trip() {
        let bits = SourceBits::from_ids([0, 5, 63, 64, 100]);
        assert_eq!(bits.len(), 5);
        assert!(bits.contains(64));
        assert!(!bits.contains(63 + 2));
        let again = SourceBits::from_hex(&bits.to_hex()).unwrap();
        assert_eq!(bits, again);
        assert_eq!(again.iter().collect::<Vec<_>>(), vec![0, 5, 63, 64, 100]);
    }

    #[test]
    fn parse_rejects_garbage_with_line_numbers() {
        let e = Trace::parse("#dualcast-trace v1\n#meta n=2\n").unwrap_err();
        assert_eq!(e.line, 2);
    }
}
