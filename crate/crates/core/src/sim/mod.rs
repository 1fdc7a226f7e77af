//! Deterministic discrete-event simulator.
//!
//! Virtual time is in microseconds. Events are processed in `(time, seq)`
//! order with a monotone sequence counter breaking ties, so equal scenarios
//! with equal seeds produce byte-identical traces. Channels are FIFO and
//! lossless; a crash silences a server atomically but messages already sent
//! still arrive (crash-stop, not link loss). All protocol I/O goes through
//! [`Effect`](crate::protocol::Effect) interpretation here; the engine
//! itself never touches a clock or a socket.

pub mod scenario;
pub mod trace;

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::fd::FdState;
use crate::overlay::ServerId;
use crate::overlay::OverlayFamily;
use crate::protocol::{
    ChannelKind, Effect, FailureNotification, ProtocolViolation, ServerState, SimTime,
    ValidatedSetup, Wire,
};
use scenario::{LatencyProfile, Scenario, ScenarioError};
use trace::{
    DeliveredRound, EndReason, SourceBits, Trace, TraceEvent, TraceEventKind, TraceLevel,
    TraceMeta,
};

pub use scenario::Scenario as SimScenario;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("{0}")]
    Scenario(#[from] ScenarioError),
    #[error("config: {0}")]
    Config(#[from] crate::protocol::ConfigError),
    #[error("failure injection: {0}")]
    Injection(String),
}

/// Inter-site one-way latencies in microseconds for the five-site profile;
/// within a site every hop is [`INTRA_SITE_US`].
const SITE_LATENCY_US: [[SimTime; 5]; 5] = [
    [50, 2500, 3900, 4800, 6900],
    [2500, 50, 2600, 3500, 6200],
    [3900, 2600, 50, 2900, 7400],
    [4800, 3500, 2900, 50, 5900],
    [6900, 6200, 7400, 5900, 50],
];
const INTRA_SITE_US: SimTime = 50;
/// 1 GigE serialization rate.
const BYTES_PER_US: u64 = 125;
const MSG_HEADER_BYTES: u64 = 64;

fn wire_bytes(wire: &Wire) -> u64 {
    match wire {
        Wire::Broadcast(m) | Wire::RBroadcast(m) => MSG_HEADER_BYTES + m.payload.len as u64,
        Wire::Fail(_) => 48,
        Wire::Heartbeat { .. } => 32,
        Wire::Probe { .. } => 48,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum EventKind {
    Deliver {
        from: ServerId,
        to: ServerId,
        channel: ChannelKind,
        wire: Wire,
    },
    Crash {
        server: ServerId,
    },
    FdTick {
        server: ServerId,
    },
    EonDirective {
        epoch: u32,
        family: OverlayFamily,
    },
    PartitionTimer {
        server: ServerId,
        epoch: u32,
        round: u32,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct QueuedEvent {
    time: SimTime,
    seq: u64,
    kind: EventKind,
}

impl Ord for QueuedEvent {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.time, self.seq).cmp(&(other.time, other.seq))
    }
}

impl PartialOrd for QueuedEvent {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

pub struct Sim {
    scenario: Scenario,
    servers: Vec<ServerState>,
    fds: Vec<FdState>,
    crashed: Vec<bool>,
    terminated: Vec<bool>,
    queue: BinaryHeap<Reverse<QueuedEvent>>,
    seq: u64,
    /// Last scheduled arrival per channel, for FIFO enforcement.
    channel_clock: HashMap<(ServerId, ServerId, ChannelKind), SimTime>,
    /// When each server's protocol egress link is free again: one shared
    /// serializer per server, so redundant overlays pay their bandwidth.
    /// Failure-detector traffic runs on dedicated links and is exempt.
    egress_free: Vec<SimTime>,
    rng: ChaCha8Rng,
    now: SimTime,
    trace: Trace,
    fail_send: Vec<scenario::FailAtSend>,
    fail_recv: Vec<scenario::FailAtReceive>,
    fail_deliver: Vec<scenario::FailAtDeliver>,
    violation: Option<ProtocolViolation>,
}

/// Parses, builds, and runs a scenario to completion.
pub fn run_text(text: &str) -> Result<Trace, SimError> {
    let scenario = Scenario::parse(text)?;
    run(&scenario)
}

/// Runs a scenario to completion. The returned trace carries the end reason;
/// invariant violations end the run rather than erroring, so the trace (and
/// its diagnosis) survives.
pub fn run(scenario: &Scenario) -> Result<Trace, SimError> {
    let mut sim = Sim::new(scenario)?;
    sim.run_to_end();
    Ok(sim.into_trace())
}

impl Sim {
    pub fn new(scenario: &Scenario) -> Result<Sim, SimError> {
        let scenario = scenario.clone();
        let setup: ValidatedSetup = scenario
            .system_config(scenario.effective_f(usize::MAX))
            .validate()
            .or_else(|_| {
                // The default f is derived from the measured connectivity.
                let probe = scenario.system_config(0).validate()?;
                let f = scenario.effective_f(probe.kappa);
                scenario.system_config(f).validate()
            })?;
        // Normalizes f for trace metadata.
        let f = scenario.effective_f(setup.kappa);

        let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
        let meta = TraceMeta {
            n: scenario.n,
            f,
            seed: scenario.seed,
            rounds: scenario.rounds,
            payload_len: scenario.payload,
            perfect_fd: scenario.perfect,
            uniform: scenario.uniform,
            partition: scenario.partition,
            reliable_only: scenario.reliable_only,
            exceeds_f: scenario.exceeds_f,
            level_full: scenario.trace_level == TraceLevel::Full,
            rerun_relax: scenario.allow_rerun_payload_change,
        };

        let servers: Vec<ServerState> = (0..scenario.n).map(|i| setup.server(i)).collect();
        let fd_cfg = scenario.fd_config();
        let fds: Vec<FdState> = (0..scenario.n)
            .map(|i| FdState::new(i, &setup.g_r, fd_cfg, 0))
            .collect();

        let mut sim = Sim {
            servers,
            fds,
            crashed: vec![false; scenario.n],
            terminated: vec![false; scenario.n],
            queue: BinaryHeap::new(),
            seq: 0,
            channel_clock: HashMap::new(),
            egress_free: vec![0; scenario.n],
            rng: ChaCha8Rng::seed_from_u64(scenario.seed ^ 0x9e3779b97f4a7c15),
            now: 0,
            trace: Trace::new(meta),
            fail_send: scenario.fail_send.clone(),
            fail_recv: scenario.fail_recv.clone(),
            fail_deliver: scenario.fail_deliver.clone(),
            violation: None,
            scenario: scenario.clone(),
        };

        // Failure-detector ticks start at a per-server phase so detections
        // are staggered the way independent clocks would be.
        for i in 0..scenario.n {
            let phase = 1 + rng.gen_range(0..scenario.fd_hb_us.max(1));
            sim.schedule(phase, EventKind::FdTick { server: i });
        }
        for &(t, s) in &scenario.fails {
            sim.inject_failure(t, s)?;
        }
        let mut auto_targets: Vec<ServerId> = (0..scenario.n).collect();
        for _ in 0..scenario.autofail {
            if auto_targets.is_empty() {
                break;
            }
            let idx = rng.gen_range(0..auto_targets.len());
            let server = auto_targets.swap_remove(idx);
            let t = rng.gen_range(1_000..scenario.autofail_by_us.max(1_001));
            sim.inject_failure(t, server)?;
        }
        if let Some((t, epoch, family)) = &scenario.eon {
            sim.schedule(
                *t,
                EventKind::EonDirective {
                    epoch: *epoch,
                    family: family.clone(),
                },
            );
        }
        Ok(sim)
    }

    /// Schedules a crash. Duplicate targets are refused.
    pub fn inject_failure(&mut self, time: SimTime, server: ServerId) -> Result<(), SimError> {
        if server >= self.servers.len() {
            return Err(SimError::Injection(format!("server {server} out of range")));
        }
        let already = self.queue.iter().any(|Reverse(ev)| {
            matches!(ev.kind, EventKind::Crash { server: s } if s == server)
        });
        if already {
            return Err(SimError::Injection(format!(
                "server {server} is already scheduled to crash"
            )));
        }
        self.schedule(time, EventKind::Crash { server });
        Ok(())
    }

    fn schedule(&mut self, time: SimTime, kind: EventKind) {
        let seq = self.seq;
        self.seq += 1;
        self.queue.push(Reverse(QueuedEvent { time, seq, kind }));
    }

    fn record(&mut self, server: ServerId, kind: TraceEventKind) {
        self.trace.events.push(TraceEvent {
            time: self.now,
            server,
            kind,
        });
    }

    fn full_trace(&self) -> bool {
        self.scenario.trace_level == TraceLevel::Full
    }

    fn hop_latency(&self, from: ServerId, to: ServerId) -> SimTime {
        match self.scenario.latency {
            LatencyProfile::Sdc => 50,
            LatencyProfile::Mdc => {
                let (a, b) = (from % 5, to % 5);
                if a == b {
                    INTRA_SITE_US
                } else {
                    SITE_LATENCY_US[a][b]
                }
            }
        }
    }

    fn alive(&self, s: ServerId) -> bool {
        !self.crashed[s] && !self.terminated[s]
    }

    /// All live servers have delivered the whole workload.
    fn goal_met(&self) -> bool {
        let mut any = false;
        for s in 0..self.servers.len() {
            if self.alive(s) {
                any = true;
                if self.servers[s].last_delivered() < self.scenario.rounds {
                    return false;
                }
            }
        }
        any
    }

    fn run_to_end(&mut self) {
        // Bootstrap everyone at t=0 in id order. A server may die mid-
        // bootstrap (send-truncation directive); the rest still start.
        for s in 0..self.servers.len() {
            let fx = self.servers[s].on_start();
            self.interpret(s, fx);
        }
        while self.violation.is_none() {
            let Some(Reverse(ev)) = self.queue.pop() else {
                self.trace.end = if self.goal_met() {
                    EndReason::Completed
                } else {
                    EndReason::Stalled
                };
                self.trace.end_time = self.now;
                return;
            };
            if ev.time > self.scenario.time_bound_us {
                self.trace.end = EndReason::TimeBound;
                self.trace.end_time = self.scenario.time_bound_us;
                return;
            }
            self.now = ev.time;
            self.dispatch(ev.kind);
            if self.violation.is_none() {
                if (0..self.servers.len()).all(|s| !self.alive(s)) {
                    self.trace.end = EndReason::AllTerminated;
                    self.trace.end_time = self.now;
                    return;
                }
                if self.goal_met() {
                    self.trace.end = EndReason::Completed;
                    self.trace.end_time = self.now;
                    return;
                }
            }
        }
        if let Some(v) = &self.violation {
            self.trace.end = EndReason::Violation(v.to_string());
            self.trace.end_time = self.now;
        }
    }

    fn dispatch(&mut self, kind: EventKind) {
        match kind {
            EventKind::Deliver {
                from,
                to,
                channel,
                wire,
            } => self.dispatch_deliver(from, to, channel, wire),
            EventKind::Crash { server } => {
                if !self.crashed[server] {
                    self.crashed[server] = true;
                    self.trace.crashed.insert(server, self.now);
                    self.record(server, TraceEventKind::Crash);
                }
            }
            EventKind::FdTick { server } => self.dispatch_fd_tick(server),
            EventKind::EonDirective { epoch, family } => {
                for s in 0..self.servers.len() {
                    if !self.alive(s) {
                        continue;
                    }
                    self.record(s, TraceEventKind::EonDirective { epoch });
                    let fx = self.servers[s].handle_eon_directive(epoch, family.clone());
                    self.interpret(s, fx);
                }
            }
            EventKind::PartitionTimer {
                server,
                epoch,
                round,
            } => {
                if self.alive(server) {
                    let fx = self.servers[server].partition_timeout(epoch, round);
                    self.interpret(server, fx);
                }
            }
        }
    }

    fn dispatch_deliver(&mut self, from: ServerId, to: ServerId, _ch: ChannelKind, wire: Wire) {
        if !self.alive(to) {
            return;
        }
        // Crash-on-receive directive: the message is received, the server
        // dies before acting on it.
        if let Wire::Broadcast(m) | Wire::RBroadcast(m) = &wire {
            if let Some(pos) = self
                .fail_recv
                .iter()
                .position(|d| d.server == to && d.source == m.source && d.round == m.round)
            {
                self.fail_recv.swap_remove(pos);
                self.crashed[to] = true;
                self.trace.crashed.insert(to, self.now);
                self.record(to, TraceEventKind::Crash);
                return;
            }
        }
        if let Wire::Heartbeat { from: hb_from, eon, sent_at } = wire {
            self.fds[to].on_heartbeat(hb_from, eon, sent_at);
            return;
        }
        if self.fds[to].should_suppress(from, &wire) {
            if self.full_trace() {
                self.record(to, TraceEventKind::Suppressed { from, wire });
            }
            return;
        }
        if self.full_trace() {
            self.record(
                to,
                TraceEventKind::Receive {
                    from,
                    wire: wire.clone(),
                    label: self.servers[to].label(),
                },
            );
        }
        match self.servers[to].handle_wire(from, &wire) {
            Ok(fx) => {
                self.interpret(to, fx);
            }
            Err(v) => self.violation = Some(v),
        }
    }

    fn dispatch_fd_tick(&mut self, server: ServerId) {
        if !self.alive(server) {
            return;
        }
        let out = self.fds[server].tick(self.now);
        for (target, eon) in out.heartbeats {
            let wire = Wire::Heartbeat {
                from: server,
                eon,
                sent_at: self.now,
            };
            self.transmit(server, &[target], ChannelKind::Fd, wire);
        }
        for target in out.suspicions {
            self.record(server, TraceEventKind::Detected { target });
            let fnote = FailureNotification {
                target,
                owner: server,
                eon: self.servers[server].eon(),
            };
            match self.servers[server].handle_wire(server, &Wire::Fail(fnote)) {
                Ok(fx) => {
                    if self.interpret(server, fx) {
                        return;
                    }
                }
                Err(v) => {
                    self.violation = Some(v);
                    return;
                }
            }
        }
        let next = self.now + self.scenario.fd_hb_us;
        self.schedule(next, EventKind::FdTick { server });
    }

    /// Expands one send effect into per-target deliveries with serialization
    /// cost, hop latency, optional jitter, spike stalls, and FIFO clamping.
    fn transmit(&mut self, from: ServerId, targets: &[ServerId], channel: ChannelKind, wire: Wire) {
        let bytes = wire_bytes(&wire);
        let ser = bytes.div_ceil(BYTES_PER_US).max(1);
        // Own first broadcast of a round is the latency-measurement anchor.
        if let Wire::Broadcast(m) | Wire::RBroadcast(m) = &wire {
            if m.source == from {
                self.trace
                    .own_broadcasts
                    .entry((from, m.round))
                    .or_insert((self.now, m.epoch, m.payload.digest));
            }
            if !targets.is_empty() {
                *self
                    .trace
                    .transmissions
                    .entry((m.source, m.epoch, m.round, m.kind))
                    .or_insert(0) += targets.len() as u64;
            }
        }
        for &to in targets.iter() {
            let depart = if channel == ChannelKind::Fd {
                self.now + 1
            } else {
                let d = self.egress_free[from].max(self.now) + ser;
                self.egress_free[from] = d;
                d
            };
            let jitter = if self.scenario.jitter_us > 0 {
                self.rng.gen_range(0..=self.scenario.jitter_us)
            } else {
                0
            };
            let lat = self.hop_latency(from, to) + jitter;
            let mut arrival = depart + lat;
            for sp in &self.scenario.spikes {
                let applies = sp.from == from
                    && sp.to == to
                    && sp.kind.map_or(true, |kk| kk == channel)
                    && depart >= sp.start
                    && depart < sp.start + sp.duration;
                if applies {
                    arrival = arrival.max(sp.start + sp.duration + lat);
                }
            }
            let clock = self
                .channel_clock
                .entry((from, to, channel))
                .or_insert(0);
            arrival = arrival.max(*clock);
            *clock = arrival;
            if self.full_trace() && channel != ChannelKind::Fd {
                // Send records carry the wire-departure time (the event list
                // stays in processing order).
                self.trace.events.push(TraceEvent {
                    time: depart,
                    server: from,
                    kind: TraceEventKind::Send { to, wire: wire.clone() },
                });
            }
            self.schedule(
                arrival,
                EventKind::Deliver {
                    from,
                    to,
                    channel,
                    wire: wire.clone(),
                },
            );
        }
    }

    /// Interprets a handler's effects. Returns true when the interpretation
    /// crashed the acting server mid-action (a send-truncation directive),
    /// which aborts the rest of its effects.
    fn interpret(&mut self, server: ServerId, effects: Vec<Effect>) -> bool {
        for effect in effects {
            match effect {
                Effect::Send { wire, to, channel } => {
                    // Send-truncation directive: the server dies mid-send of
                    // its own message, having reached only `keep`.
                    let truncate = match &wire {
                        Wire::Broadcast(m) | Wire::RBroadcast(m) if m.source == server => self
                            .fail_send
                            .iter()
                            .position(|d| d.server == server && d.round == m.round),
                        _ => None,
                    };
                    if let Some(pos) = truncate {
                        let directive = self.fail_send.swap_remove(pos);
                        let kept: Vec<ServerId> = to
                            .iter()
                            .copied()
                            .filter(|t| directive.keep.contains(t))
                            .collect();
                        self.transmit(server, &kept, channel, wire);
                        self.crashed[server] = true;
                        self.trace.crashed.insert(server, self.now);
                        self.record(server, TraceEventKind::Crash);
                        return true;
                    }
                    self.transmit(server, &to, channel, wire);
                }
                Effect::Deliver {
                    round,
                    epoch,
                    kind,
                    messages,
                } => {
                    let sources = SourceBits::from_ids(messages.iter().map(|m| m.source));
                    let digest_xor = messages
                        .iter()
                        .fold(0u64, |acc, m| acc ^ m.payload.digest);
                    self.trace.logs[server].push(DeliveredRound {
                        round,
                        epoch,
                        kind,
                        time: self.now,
                        count: messages.len() as u32,
                        sources,
                        digest_xor,
                    });
                    self.record(
                        server,
                        TraceEventKind::Deliver {
                            round,
                            epoch,
                            kind,
                            count: messages.len() as u32,
                        },
                    );
                    // Deliver-then-die directive: the delivery stands, the
                    // rest of the server's actions do not.
                    if let Some(pos) = self
                        .fail_deliver
                        .iter()
                        .position(|d| d.server == server && d.round == round)
                    {
                        self.fail_deliver.swap_remove(pos);
                        self.crashed[server] = true;
                        self.trace.crashed.insert(server, self.now);
                        self.record(server, TraceEventKind::Crash);
                        return true;
                    }
                }
                Effect::Remove { servers } => {
                    self.record(server, TraceEventKind::Removed { servers });
                    let g = self.servers[server].reliable_overlay().clone();
                    self.fds[server].rebind(&g);
                }
                Effect::Transition { kind, from, to } => {
                    *self.trace.transitions.entry(kind).or_insert(0) += 1;
                    self.record(server, TraceEventKind::Transition { kind, from, to });
                }
                Effect::SelfTerminate { .. } => {
                    self.terminated[server] = true;
                    self.trace.terminated.insert(server, self.now);
                    self.record(server, TraceEventKind::SelfTerminated);
                }
                Effect::EnteredTransitionalRound { epoch, round } => {
                    self.record(server, TraceEventKind::TransitionalEntered { epoch, round });
                }
                Effect::StartNextEonHeartbeats { eon } => {
                    let staged = self.servers[server]
                        .staged_next_overlay()
                        .expect("staged overlay accompanies the heartbeat effect")
                        .clone();
                    self.fds[server].stage_next(&staged, eon, self.now);
                }
                Effect::EonSwitched { eon } => {
                    let g = self.servers[server].reliable_overlay().clone();
                    self.fds[server].switch_eon(eon, &g, self.now);
                    self.record(server, TraceEventKind::EonSwitched { eon });
                }
                Effect::ArmPartitionTimer { epoch, round } => {
                    let t = self.now + self.scenario.partition_timeout_us;
                    self.schedule(
                        t,
                        EventKind::PartitionTimer {
                            server,
                            epoch,
                            round,
                        },
                    );
                }
            }
        }
        false
    }

    pub fn into_trace(self) -> Trace {
        self.trace
    }
}
