//! The per-server engine state and its four event handlers.

use std::collections::{BTreeMap, BTreeSet};

use crate::overlay::{
    build_overlay, Digraph, DigraphSpec, OverlayFamily, ServerId, UnreliableOverlay,
};
use crate::protocol::membership::{partition_gate, uniform_gate_met, EonControl, PendingRound, ProbeBook};
use crate::protocol::tracking::TrackingDigraph;
use crate::protocol::{
    apply_transition, ChannelKind, ConfigError, Effect, FailureNotification, HaltReason, Message,
    Payload, ProbeDirection, ProtocolViolation, RoundKind, StateLabel, TransitionKind, Wire,
    WireRoundKind,
};

/// Static configuration shared by every server of a deployment.
#[derive(Debug, Clone)]
pub struct SystemConfig {
    pub n: usize,
    /// Failure budget; must stay below the reliable overlay's connectivity.
    pub f: usize,
    pub unreliable: DigraphSpec,
    pub reliable: DigraphSpec,
    /// Gate unreliable-round delivery on witnesses from two rounds ahead so
    /// agreement and total order extend to faulty servers.
    pub uniform: bool,
    /// Primary-partition mode: gate reliable-round delivery on forward and
    /// backward probe majorities.
    pub partition: bool,
    /// Run every round on the reliable overlay (no unreliable mode at all).
    pub reliable_only: bool,
    /// Treat receipt-constraint violations as fatal. On under a perfect
    /// failure detector; relaxed to drops when false suspicion is possible.
    pub strict_receipt: bool,
    /// Allow a rerun round to carry a different payload than the original.
    pub allow_rerun_payload_change: bool,
    /// Rounds carrying synthesized application payloads.
    pub workload_rounds: u32,
    pub payload_len: u32,
}

impl SystemConfig {
    pub fn validate(&self) -> Result<ValidatedSetup, ConfigError> {
        if self.unreliable.n != self.n || self.reliable.n != self.n {
            return Err(ConfigError::Invalid(format!(
                "overlay sizes ({}, {}) disagree with n={}",
                self.unreliable.n, self.reliable.n, self.n
            )));
        }
        let g_u = UnreliableOverlay::build(&self.unreliable)?;
        let g_r = build_overlay(&self.reliable)?;
        let kappa = g_r.vertex_connectivity();
        if self.f >= kappa {
            return Err(ConfigError::FailureBudget { f: self.f, kappa });
        }
        if self.uniform && self.n <= 2 * self.f {
            return Err(ConfigError::UniformBudget { n: self.n, f: self.f });
        }
        Ok(ValidatedSetup {
            g_u,
            g_r,
            kappa,
            config: self.clone(),
        })
    }
}

/// A validated deployment: overlays built once, connectivity verified.
#[derive(Debug, Clone)]
pub struct ValidatedSetup {
    pub g_u: UnreliableOverlay,
    pub g_r: Digraph,
    pub kappa: usize,
    pub config: SystemConfig,
}

impl ValidatedSetup {
    pub fn server(&self, id: ServerId) -> ServerState {
        ServerState::from_setup(self, id)
    }
}

/// What the buffer of premature messages currently holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum NextSlot {
    Empty,
    /// Next unreliable round of the current epoch.
    Unreliable { epoch: u32, round: u32 },
    /// First reliable round of the next epoch.
    Reliable { epoch: u32, round: u32 },
}

/// One server's complete engine state. Handlers mutate it and append
/// [`Effect`]s; they never perform I/O themselves.
#[derive(Debug, Clone)]
pub struct ServerState {
    id: ServerId,
    cfg: SystemConfig,
    label: StateLabel,
    eon: u32,
    g_u: UnreliableOverlay,
    g_r: Digraph,
    /// Messages received for the current state, keyed by source.
    m: BTreeMap<ServerId, Message>,
    /// The previous completed, not yet delivered unreliable round.
    m_prev: BTreeMap<ServerId, Message>,
    /// Premature messages, all from the single state in `next_slot`.
    m_next: BTreeMap<ServerId, Message>,
    next_slot: NextSlot,
    /// Premature reliable messages not yet forwarded (next-eon traffic must
    /// wait for the overlay switch).
    next_unforwarded: BTreeSet<ServerId>,
    /// Valid failure notifications of the current eon, as (target, owner).
    f_set: BTreeSet<(ServerId, ServerId)>,
    tracking: BTreeMap<ServerId, TrackingDigraph>,
    last_delivered: u32,
    own_payloads: BTreeMap<u32, Payload>,
    pending: Option<PendingRound>,
    probes: ProbeBook,
    /// Reliable round completed but the partition gate has not passed.
    completion_gated: bool,
    eon_ctl: EonControl,
    halted: Option<HaltReason>,
}

impl ServerState {
    fn from_setup(setup: &ValidatedSetup, id: ServerId) -> Self {
        let tracking = setup
            .g_r
            .vertices()
            .map(|v| (v, TrackingDigraph::new(v)))
            .collect();
        ServerState {
            id,
            cfg: setup.config.clone(),
            label: StateLabel::INITIAL,
            eon: 1,
            g_u: setup.g_u.clone(),
            g_r: setup.g_r.clone(),
            m: BTreeMap::new(),
            m_prev: BTreeMap::new(),
            m_next: BTreeMap::new(),
            next_slot: NextSlot::Empty,
            next_unforwarded: BTreeSet::new(),
            f_set: BTreeSet::new(),
            tracking,
            last_delivered: 0,
            own_payloads: BTreeMap::new(),
            pending: None,
            probes: ProbeBook::default(),
            completion_gated: false,
            eon_ctl: EonControl::default(),
            halted: None,
        }
    }

    pub fn id(&self) -> ServerId {
        self.id
    }

    pub fn label(&self) -> StateLabel {
        self.label
    }

    pub fn eon(&self) -> u32 {
        self.eon
    }

    pub fn halted(&self) -> Option<HaltReason> {
        self.halted
    }

    pub fn last_delivered(&self) -> u32 {
        self.last_delivered
    }

    pub fn reliable_overlay(&self) -> &Digraph {
        &self.g_r
    }

    pub fn unreliable_overlay(&self) -> &UnreliableOverlay {
        &self.g_u
    }

    pub fn members(&self) -> BTreeSet<ServerId> {
        self.g_r.vertex_set()
    }

    pub fn tracking_digraph(&self, source: ServerId) -> Option<&TrackingDigraph> {
        self.tracking.get(&source)
    }

    pub fn failure_notifications(&self) -> &BTreeSet<(ServerId, ServerId)> {
        &self.f_set
    }

    pub fn own_payload(&self, round: u32) -> Option<Payload> {
        self.own_payloads.get(&round).copied()
    }

    /// The payload this server A-broadcasts for `round`: the workload entry
    /// while the workload lasts, an explicit empty message afterwards. With
    /// the rerun-identity requirement relaxed, each epoch regenerates the
    /// content, so a rerun observably differs from the original.
    fn payload_for(&self, round: u32) -> Payload {
        if round <= self.cfg.workload_rounds && round >= 1 {
            if self.cfg.allow_rerun_payload_change {
                Payload::synthesize(
                    self.id,
                    round ^ (self.label.epoch << 20),
                    self.cfg.payload_len,
                )
            } else {
                Payload::synthesize(self.id, round, self.cfg.payload_len)
            }
        } else {
            Payload::EMPTY
        }
    }

    /// Rounds past the workload still worth starting: one extra round makes
    /// the final workload round deliverable, two when the uniform gate needs
    /// witnesses from two rounds ahead.
    fn broadcast_horizon(&self) -> u32 {
        if self.cfg.reliable_only {
            self.cfg.workload_rounds
        } else if self.cfg.uniform && self.cfg.f > 0 {
            self.cfg.workload_rounds + 2
        } else {
            self.cfg.workload_rounds + 1
        }
    }

    /// Transition from the bootstrap state into the first real round.
    pub fn on_start(&mut self) -> Vec<Effect> {
        let mut fx = Vec::new();
        debug_assert_eq!(self.label, StateLabel::INITIAL);
        if self.cfg.reliable_only {
            self.transition(TransitionKind::Tsk, &mut fx);
        } else {
            self.transition(TransitionKind::Trf, &mut fx);
        }
        self.enter_state(&mut fx);
        fx
    }

    /// Post-transition entry work shared by the bootstrap path.
    fn enter_state(&mut self, fx: &mut Vec<Effect>) {
        if self.label.kind == RoundKind::Reliable {
            self.enter_reliable_hooks(fx);
        }
        self.a_broadcast_own(fx);
        self.try_to_complete(fx);
    }

    /// Routes one received wire to its handler. Heartbeats are failure
    /// detector business and never reach the engine.
    pub fn handle_wire(
        &mut self,
        from: ServerId,
        wire: &Wire,
    ) -> Result<Vec<Effect>, ProtocolViolation> {
        let mut fx = Vec::new();
        if self.halted.is_some() {
            return Ok(fx);
        }
        match wire {
            Wire::Broadcast(msg) => self.handle_unreliable_msg(*msg, &mut fx)?,
            Wire::RBroadcast(msg) => self.handle_reliable_msg(*msg, &mut fx)?,
            Wire::Fail(fnote) => self.handle_failure_notification(*fnote, &mut fx)?,
            Wire::Probe {
                origin,
                epoch,
                round,
                direction,
                ..
            } => self.handle_probe(*origin, *epoch, *round, *direction, &mut fx),
            Wire::Heartbeat { .. } => {
                debug_assert!(false, "heartbeats are routed to the failure detector");
            }
        }
        let _ = from;
        Ok(fx)
    }

    fn violation(&self, detail: impl Into<String>) -> ProtocolViolation {
        ProtocolViolation {
            server: self.id,
            label: self.label,
            detail: detail.into(),
        }
    }

    /// Drop silently when false suspicion makes the receipt constraints
    /// unsound, trap otherwise.
    fn receipt_trap(&self, detail: String) -> Result<(), ProtocolViolation> {
        if self.cfg.strict_receipt {
            Err(self.violation(detail))
        } else {
            Ok(())
        }
    }

    // ------------------------------------------------------------------
    // Broadcasting

    /// A-broadcast this server's own message for the current round, lazily
    /// creating (and pinning) the payload. Re-broadcasting within one round
    /// is a no-op.
    fn a_broadcast_own(&mut self, fx: &mut Vec<Effect>) {
        if self.halted.is_some() || self.label.round > self.broadcast_horizon() {
            return;
        }
        if self.m.contains_key(&self.id) {
            return;
        }
        let round = self.label.round;
        let payload = if self.cfg.allow_rerun_payload_change {
            let p = self.payload_for(round);
            self.own_payloads.insert(round, p);
            p
        } else {
            // Reruns must re-broadcast the original payload.
            let fresh = self.payload_for(round);
            *self.own_payloads.entry(round).or_insert(fresh)
        };
        let msg = Message {
            source: self.id,
            epoch: self.label.epoch,
            round,
            kind: self.label.kind.wire(),
            eon: self.eon,
            payload,
        };
        match self.label.kind.wire() {
            WireRoundKind::Unreliable => self.broadcast(msg, fx),
            WireRoundKind::Reliable => self.rbroadcast(msg, fx),
        }
    }

    /// Send an unreliable-round message onward (per-source dissemination
    /// rule) unless already seen, and account it for the current round.
    fn broadcast(&mut self, msg: Message, fx: &mut Vec<Effect>) {
        if !self.m.contains_key(&msg.source) {
            let to = self.g_u.forward_targets(msg.source, self.id);
            if !to.is_empty() {
                fx.push(Effect::Send {
                    wire: Wire::Broadcast(msg),
                    to,
                    channel: ChannelKind::Unreliable,
                });
            }
            self.m.insert(msg.source, msg);
        }
    }

    /// Send a reliable-round message to every reliable-overlay successor
    /// unless already seen; receiving it finishes tracking its source.
    fn rbroadcast(&mut self, msg: Message, fx: &mut Vec<Effect>) {
        if !self.m.contains_key(&msg.source) {
            let to: Vec<ServerId> = self.g_r.successors(self.id).collect();
            if !to.is_empty() {
                fx.push(Effect::Send {
                    wire: Wire::RBroadcast(msg),
                    to,
                    channel: ChannelKind::Reliable,
                });
            }
            self.m.insert(msg.source, msg);
        }
        if let Some(g) = self.tracking.get_mut(&msg.source) {
            g.clear();
        }
    }

    // ------------------------------------------------------------------
    // Event handlers

    fn handle_unreliable_msg(
        &mut self,
        msg: Message,
        fx: &mut Vec<Effect>,
    ) -> Result<(), ProtocolViolation> {
        debug_assert_eq!(msg.kind, WireRoundKind::Unreliable);
        if !self.g_u.contains(msg.source) {
            return Ok(()); // source already removed from the membership
        }
        let (e, r) = (self.label.epoch, self.label.round);
        if msg.epoch > e {
            return self.receipt_trap(format!(
                "unreliable message {}:{} from future epoch",
                msg.epoch, msg.round
            ));
        }
        if msg.epoch < e || msg.round < r {
            return Ok(()); // stale
        }
        match msg.round {
            round if round == r => {
                if self.label.kind == RoundKind::Reliable {
                    return self.receipt_trap(format!(
                        "unreliable message for round {round} while running it reliably"
                    ));
                }
                self.broadcast(msg, fx);
                self.a_broadcast_own(fx);
                self.maybe_release_pending(fx);
                self.try_to_complete(fx);
            }
            round if round == r + 1 => {
                // Postpone for the next unreliable round, unless premature
                // reliable traffic already claimed the buffer (it wins).
                match self.next_slot {
                    NextSlot::Reliable { .. } => {}
                    NextSlot::Empty => {
                        self.next_slot = NextSlot::Unreliable { epoch: e, round };
                        self.m_next.insert(msg.source, msg);
                        self.maybe_release_pending(fx);
                    }
                    NextSlot::Unreliable { epoch, round: held } => {
                        debug_assert_eq!((epoch, held), (e, round));
                        self.m_next.entry(msg.source).or_insert(msg);
                        self.maybe_release_pending(fx);
                    }
                }
            }
            _ => {
                return self.receipt_trap(format!(
                    "unreliable message skips ahead to round {} while in round {r}",
                    msg.round
                ));
            }
        }
        Ok(())
    }

    fn handle_reliable_msg(
        &mut self,
        msg: Message,
        fx: &mut Vec<Effect>,
    ) -> Result<(), ProtocolViolation> {
        debug_assert_eq!(msg.kind, WireRoundKind::Reliable);
        if !self.g_r.contains(msg.source) {
            return Ok(());
        }
        let (e, r) = (self.label.epoch, self.label.round);
        if msg.epoch < e || msg.round < r {
            return Ok(()); // stale
        }
        if self.label.kind != RoundKind::Reliable {
            return self.receipt_trap(format!(
                "reliable message {}:{} received in unreliable round",
                msg.epoch, msg.round
            ));
        }
        if msg.epoch > e {
            if msg.epoch != e + 1 || msg.round != r + 1 {
                return self.receipt_trap(format!(
                    "reliable message {}:{} skips ahead from ({e},{r})",
                    msg.epoch, msg.round
                ));
            }
            // Premature: forward now (to preserve ordering relative to
            // failure notifications), deliver in the next epoch. Next-eon
            // traffic must instead wait for the overlay switch.
            if matches!(self.next_slot, NextSlot::Reliable { .. })
                && self.m_next.contains_key(&msg.source)
            {
                return Ok(());
            }
            if matches!(self.next_slot, NextSlot::Unreliable { .. } | NextSlot::Empty) {
                self.m_next.clear();
                self.next_unforwarded.clear();
                self.next_slot = NextSlot::Reliable {
                    epoch: msg.epoch,
                    round: msg.round,
                };
            }
            if msg.eon > self.eon {
                self.next_unforwarded.insert(msg.source);
            } else {
                let to: Vec<ServerId> = self.g_r.successors(self.id).collect();
                if !to.is_empty() {
                    fx.push(Effect::Send {
                        wire: Wire::RBroadcast(msg),
                        to,
                        channel: ChannelKind::Reliable,
                    });
                }
            }
            self.m_next.insert(msg.source, msg);
            return Ok(());
        }
        // Same epoch from here on.
        if msg.round == r + 1 {
            self.skip_transition(fx)?;
            // Re-handle in the new state, where it is a same-state message.
            return self.handle_reliable_msg(msg, fx);
        }
        if msg.round > r + 1 {
            return self.receipt_trap(format!(
                "reliable message for round {} skips ahead from round {r}",
                msg.round
            ));
        }
        debug_assert_eq!(msg.round, r);
        self.rbroadcast(msg, fx);
        self.a_broadcast_own(fx);
        self.try_to_complete(fx);
        Ok(())
    }

    /// Peer evidence that this epoch's reliable round already moved one
    /// round ahead: deliver the previous unreliable round and skip forward.
    fn skip_transition(&mut self, fx: &mut Vec<Effect>) -> Result<(), ProtocolViolation> {
        if self.m_prev.is_empty() {
            return Err(self.violation(
                "skip evidence without a completed undelivered round".to_string(),
            ));
        }
        self.flush_pending(fx);
        let prev: Vec<Message> = std::mem::take(&mut self.m_prev).into_values().collect();
        self.deliver_round(prev, fx);
        self.m.clear();
        self.m_next.clear();
        self.next_slot = NextSlot::Empty;
        self.next_unforwarded.clear();
        for g in self.tracking.values_mut() {
            g.reset();
        }
        let fresh: Vec<_> = self.f_set.iter().copied().collect();
        for g in self.tracking.values_mut() {
            g.update(&self.g_r, &BTreeSet::new(), &fresh);
        }
        self.transition(TransitionKind::Tsk, fx);
        self.enter_reliable_hooks(fx);
        self.a_broadcast_own(fx);
        Ok(())
    }

    fn handle_failure_notification(
        &mut self,
        fnote: FailureNotification,
        fx: &mut Vec<Effect>,
    ) -> Result<(), ProtocolViolation> {
        if fnote.eon < self.eon {
            return Ok(()); // previous eon: dropped
        }
        if fnote.eon > self.eon {
            // Next eon: neither forwarded nor applied until the switch.
            self.eon_ctl.postpone(fnote);
            return Ok(());
        }
        if !self.g_r.contains(fnote.target) || !self.g_r.contains(fnote.owner) {
            return Ok(()); // invalid: involves a removed server
        }
        let pair = (fnote.target, fnote.owner);
        if self.f_set.contains(&pair) {
            return Ok(()); // already handled (and forwarded) once
        }
        let to: Vec<ServerId> = self.g_r.successors(self.id).collect();
        if !to.is_empty() {
            fx.push(Effect::Send {
                wire: Wire::Fail(fnote),
                to,
                channel: ChannelKind::Reliable,
            });
        }
        if self.label.kind.is_unreliable() {
            // Rollback: rerun the oldest completed-but-undelivered round
            // reliably (the current one when nothing is pending delivery).
            self.m.clear();
            self.m_next.clear();
            self.next_slot = NextSlot::Empty;
            self.next_unforwarded.clear();
            let kind = if self.label.kind == RoundKind::UnreliableFirst {
                debug_assert!(self.m_prev.is_empty());
                TransitionKind::Tfr
            } else {
                debug_assert!(!self.m_prev.is_empty());
                TransitionKind::Tur
            };
            self.transition(kind, fx);
            self.enter_reliable_hooks(fx);
        }
        let fresh = [pair];
        for g in self.tracking.values_mut() {
            g.update(&self.g_r, &self.f_set, &fresh);
        }
        self.f_set.insert(pair);
        self.a_broadcast_own(fx);
        self.try_to_complete(fx);
        Ok(())
    }

    fn handle_probe(
        &mut self,
        origin: ServerId,
        epoch: u32,
        round: u32,
        direction: ProbeDirection,
        fx: &mut Vec<Effect>,
    ) {
        if !self.cfg.partition || !self.g_r.contains(origin) {
            return;
        }
        if self.probes.record(epoch, round, origin, direction) {
            let to = match direction {
                ProbeDirection::Forward => self.g_r.successors(self.id).collect::<Vec<_>>(),
                ProbeDirection::Backward => self.g_r.predecessors(self.id),
            };
            if !to.is_empty() {
                fx.push(Effect::Send {
                    wire: Wire::Probe {
                        origin,
                        epoch,
                        round,
                        direction,
                        eon: self.eon,
                    },
                    to,
                    channel: ChannelKind::Reliable,
                });
            }
        }
        if self.completion_gated
            && self.label.kind == RoundKind::Reliable
            && (epoch, round) == (self.label.epoch, self.label.round)
        {
            self.try_to_complete(fx);
        }
    }

    /// Stages the next reliable overlay when the simulator injects an eon
    /// directive: the reliable round of `epoch` becomes transitional.
    pub fn handle_eon_directive(&mut self, epoch: u32, family: OverlayFamily) -> Vec<Effect> {
        let mut fx = Vec::new();
        if self.halted.is_some() {
            return fx;
        }
        if self.eon_ctl.stage(epoch, family, self.label.epoch)
            && self.label.kind == RoundKind::Reliable
        {
            self.enter_reliable_hooks(&mut fx);
        }
        fx
    }

    // ------------------------------------------------------------------
    // Completion

    fn try_to_complete(&mut self, fx: &mut Vec<Effect>) {
        loop {
            if self.halted.is_some() {
                return;
            }
            let progressed = if self.label.kind.is_unreliable() {
                self.try_complete_unreliable(fx)
            } else {
                self.try_complete_reliable(fx)
            };
            if !progressed {
                return;
            }
        }
    }

    fn try_complete_unreliable(&mut self, fx: &mut Vec<Effect>) -> bool {
        if self.m.len() != self.g_u.member_count() {
            return false;
        }
        // A completed round releases any still-pending delivery: its own
        // message set supplies at least f witnesses.
        self.flush_pending(fx);
        if self.label.kind == RoundKind::Unreliable {
            let prev: Vec<Message> = std::mem::take(&mut self.m_prev).into_values().collect();
            debug_assert!(!prev.is_empty());
            if self.cfg.uniform && self.cfg.f > 0 {
                // Witnesses exclude this server: f other completers of the
                // next round guarantee a non-faulty one survives.
                let witnesses = match self.next_slot {
                    NextSlot::Unreliable { .. } => {
                        self.m_next.len() - usize::from(self.m_next.contains_key(&self.id))
                    }
                    _ => 0,
                };
                if uniform_gate_met(self.cfg.f, witnesses) {
                    self.deliver_round(prev, fx);
                } else {
                    self.pending = Some(PendingRound {
                        round: self.label.round - 1,
                        epoch: self.label.epoch,
                        messages: prev,
                    });
                }
            } else {
                self.deliver_round(prev, fx);
            }
        } else {
            debug_assert!(self.m_prev.is_empty());
        }
        // Forward postponed next-round messages, then promote them.
        let next: Vec<Message> = match self.next_slot {
            NextSlot::Unreliable { .. } => self.m_next.values().copied().collect(),
            _ => Vec::new(),
        };
        for msg in &next {
            let to = self.g_u.forward_targets(msg.source, self.id);
            if !to.is_empty() {
                fx.push(Effect::Send {
                    wire: Wire::Broadcast(*msg),
                    to,
                    channel: ChannelKind::Unreliable,
                });
            }
        }
        self.m_prev = std::mem::take(&mut self.m);
        self.m = next.into_iter().map(|m| (m.source, m)).collect();
        self.m_next.clear();
        self.next_slot = NextSlot::Empty;
        self.next_unforwarded.clear();
        self.transition(TransitionKind::Tuu, fx);
        self.a_broadcast_own(fx);
        self.maybe_release_pending(fx);
        true
    }

    fn try_complete_reliable(&mut self, fx: &mut Vec<Effect>) -> bool {
        if !self.tracking.values().all(|g| g.is_done()) {
            return false;
        }
        if self.cfg.partition && !self.partition_gate_passed(fx) {
            self.completion_gated = true;
            return false;
        }
        self.completion_gated = false;
        self.flush_pending(fx);

        let delivered: Vec<Message> = self.m.values().copied().collect();
        let members = self.g_r.vertex_set();
        let removed: BTreeSet<ServerId> = members
            .iter()
            .copied()
            .filter(|p| !self.m.contains_key(p))
            .collect();
        self.deliver_round(delivered, fx);

        if !removed.is_empty() {
            fx.push(Effect::Remove {
                servers: removed.iter().copied().collect(),
            });
            let survivors: BTreeSet<ServerId> =
                members.difference(&removed).copied().collect();
            self.g_u = self.g_u.rebuild(&survivors);
            self.g_r = self.g_r.remove_servers(&removed);
            self.f_set
                .retain(|&(t, o)| !removed.contains(&t) && !removed.contains(&o));
            self.tracking.retain(|p, _| !removed.contains(p));
        }
        for g in self.tracking.values_mut() {
            g.reset();
        }
        self.m_prev.clear();
        self.probes.gc_before(self.label.epoch);

        if removed.contains(&self.id) {
            // The membership agreed this server is gone: controlled crash.
            self.halt(HaltReason::RemovedByAgreement, fx);
            return false;
        }

        // Transitional round completed: swap in the next reliable overlay,
        // drop this eon's notifications, release postponed next-eon ones.
        if self.eon_ctl.trigger_epoch() == Some(self.label.epoch) {
            if let Some(next) = self.eon_ctl.next_gr.take() {
                self.eon += 1;
                self.g_r = next.remove_servers(&removed);
                self.f_set.clear();
                self.tracking = self
                    .g_r
                    .vertices()
                    .map(|v| (v, TrackingDigraph::new(v)))
                    .collect();
                let postponed = std::mem::take(&mut self.eon_ctl.postponed);
                for fnote in postponed {
                    if fnote.eon == self.eon
                        && self.g_r.contains(fnote.target)
                        && self.g_r.contains(fnote.owner)
                    {
                        let to: Vec<ServerId> = self.g_r.successors(self.id).collect();
                        if !to.is_empty() {
                            fx.push(Effect::Send {
                                wire: Wire::Fail(fnote),
                                to,
                                channel: ChannelKind::Reliable,
                            });
                        }
                        self.f_set.insert((fnote.target, fnote.owner));
                    }
                }
                self.eon_ctl.clear_directive();
                fx.push(Effect::EonSwitched {
                    eon: self.eon,
                });
            }
        }

        if self.f_set.is_empty() && !self.cfg.reliable_only {
            // Clean completion: start a fresh unreliable sequence.
            let next: Vec<Message> = match self.next_slot {
                NextSlot::Unreliable { .. } => self.m_next.values().copied().collect(),
                NextSlot::Reliable { .. } => {
                    debug_assert!(false, "premature reliable traffic implies a surviving notification");
                    Vec::new()
                }
                NextSlot::Empty => Vec::new(),
            };
            self.m_prev.clear();
            self.m = next.iter().map(|m| (m.source, *m)).collect();
            self.m_next.clear();
            self.next_slot = NextSlot::Empty;
            self.next_unforwarded.clear();
            self.transition(TransitionKind::Trf, fx);
            for msg in &next {
                let to = self.g_u.forward_targets(msg.source, self.id);
                if !to.is_empty() {
                    fx.push(Effect::Send {
                        wire: Wire::Broadcast(*msg),
                        to,
                        channel: ChannelKind::Unreliable,
                    });
                }
            }
            self.a_broadcast_own(fx);
        } else {
            // Notifications survive: the next round is reliable too.
            let carried: Vec<Message> = match self.next_slot {
                NextSlot::Reliable { epoch, .. } if epoch == self.label.epoch + 1 => {
                    self.m_next.values().copied().collect()
                }
                _ => Vec::new(),
            };
            self.m.clear();
            self.m_next.clear();
            self.next_slot = NextSlot::Empty;
            self.transition(TransitionKind::Trr, fx);
            self.enter_reliable_hooks(fx);
            for msg in carried {
                if self.next_unforwarded.remove(&msg.source) {
                    let to: Vec<ServerId> = self.g_r.successors(self.id).collect();
                    if !to.is_empty() {
                        fx.push(Effect::Send {
                            wire: Wire::RBroadcast(msg),
                            to,
                            channel: ChannelKind::Reliable,
                        });
                    }
                }
                self.m.insert(msg.source, msg);
                if let Some(g) = self.tracking.get_mut(&msg.source) {
                    g.clear();
                }
            }
            self.next_unforwarded.clear();
            let fresh: Vec<_> = self.f_set.iter().copied().collect();
            for g in self.tracking.values_mut() {
                g.reset();
                g.update(&self.g_r, &BTreeSet::new(), &fresh);
            }
            // Tracking of already-carried messages is finished regardless.
            let carried_sources: Vec<ServerId> = self.m.keys().copied().collect();
            for s in carried_sources {
                if let Some(g) = self.tracking.get_mut(&s) {
                    g.clear();
                }
            }
            self.a_broadcast_own(fx);
        }
        true
    }

    /// Sends this round's probes once, then evaluates the gate.
    fn partition_gate_passed(&mut self, fx: &mut Vec<Effect>) -> bool {
        let (e, r) = (self.label.epoch, self.label.round);
        if self.probes.mark_own_sent(e, r) {
            for direction in [ProbeDirection::Forward, ProbeDirection::Backward] {
                self.probes.record(e, r, self.id, direction);
                let to = match direction {
                    ProbeDirection::Forward => self.g_r.successors(self.id).collect::<Vec<_>>(),
                    ProbeDirection::Backward => self.g_r.predecessors(self.id),
                };
                if !to.is_empty() {
                    fx.push(Effect::Send {
                        wire: Wire::Probe {
                            origin: self.id,
                            epoch: e,
                            round: r,
                            direction,
                            eon: self.eon,
                        },
                        to,
                        channel: ChannelKind::Reliable,
                    });
                }
            }
        }
        let (fwd, bwd) = self.probes.acks(e, r);
        partition_gate(fwd, bwd, self.g_r.vertex_count())
    }

    // ------------------------------------------------------------------
    // Delivery and bookkeeping

    /// Emits the A-delivery of one round in deterministic order and advances
    /// the gap-free delivery cursor. Delivering out of order is an engine
    /// bug, not an input condition, so it aborts loudly.
    fn deliver_round(&mut self, messages: Vec<Message>, fx: &mut Vec<Effect>) {
        let round = self.label.round;
        let (round, epoch, kind) = match messages.first() {
            Some(m) => (m.round, m.epoch, m.kind),
            None => (round, self.label.epoch, self.label.kind.wire()),
        };
        assert_eq!(
            round,
            self.last_delivered + 1,
            "server {} delivering round {round} after {}",
            self.id,
            self.last_delivered
        );
        let ordered = crate::protocol::deterministic_delivery_order(messages);
        fx.push(Effect::Deliver {
            round,
            epoch,
            kind,
            messages: ordered,
        });
        self.last_delivered = round;
        let keep_from = round + 1;
        self.own_payloads = self.own_payloads.split_off(&keep_from);
    }

    fn flush_pending(&mut self, fx: &mut Vec<Effect>) {
        if let Some(pending) = self.pending.take() {
            self.deliver_round(pending.messages, fx);
        }
    }

    /// Releases a gate-delayed unreliable round once enough witnesses from
    /// two rounds ahead have been observed.
    fn maybe_release_pending(&mut self, fx: &mut Vec<Effect>) {
        let Some(pending) = &self.pending else {
            return;
        };
        let wanted_round = pending.round + 2;
        let wanted_epoch = pending.epoch;
        let witnesses = if self.label.kind.is_unreliable()
            && self.label.epoch == wanted_epoch
            && self.label.round == wanted_round
        {
            self.m.len() - usize::from(self.m.contains_key(&self.id))
        } else if matches!(self.next_slot, NextSlot::Unreliable { epoch, round }
            if epoch == wanted_epoch && round == wanted_round)
        {
            self.m_next.len() - usize::from(self.m_next.contains_key(&self.id))
        } else {
            0
        };
        if uniform_gate_met(self.cfg.f, witnesses) {
            self.flush_pending(fx);
        }
    }

    fn transition(&mut self, kind: TransitionKind, fx: &mut Vec<Effect>) {
        let from = self.label;
        let to = apply_transition(from, kind).expect("transition legality is enforced by callers");
        self.label = to;
        fx.push(Effect::Transition { kind, from, to });
    }

    /// Entry work for a (possibly new) reliable round: stage the next eon's
    /// overlay when this epoch is the transitional one, and arm the
    /// partition watchdog.
    fn enter_reliable_hooks(&mut self, fx: &mut Vec<Effect>) {
        debug_assert_eq!(self.label.kind, RoundKind::Reliable);
        if self.cfg.partition {
            fx.push(Effect::ArmPartitionTimer {
                epoch: self.label.epoch,
                round: self.label.round,
            });
        }
        if self.eon_ctl.trigger_epoch() == Some(self.label.epoch) && self.eon_ctl.next_gr.is_none()
        {
            let members: Vec<ServerId> = self.g_r.vertices().collect();
            let family = self.eon_ctl.family().cloned().expect("directive present");
            let next = build_family_over(&family, &members);
            fx.push(Effect::EnteredTransitionalRound {
                epoch: self.label.epoch,
                round: self.label.round,
            });
            fx.push(Effect::StartNextEonHeartbeats { eon: self.eon + 1 });
            self.eon_ctl.next_gr = Some(next);
        }
    }

    /// The staged next-eon overlay, for the simulator's heartbeat wiring.
    pub fn staged_next_overlay(&self) -> Option<&Digraph> {
        self.eon_ctl.next_gr.as_ref()
    }

    fn halt(&mut self, reason: HaltReason, fx: &mut Vec<Effect>) {
        if self.halted.is_none() {
            self.halted = Some(reason);
            fx.push(Effect::SelfTerminate { reason });
        }
    }

    /// Partition watchdog: still stuck in the same reliable round after the
    /// timeout means this server cannot assemble a majority.
    pub fn partition_timeout(&mut self, epoch: u32, round: u32) -> Vec<Effect> {
        let mut fx = Vec::new();
        if self.halted.is_none()
            && self.cfg.partition
            && self.label.kind == RoundKind::Reliable
            && (self.label.epoch, self.label.round) == (epoch, round)
        {
            self.halt(HaltReason::NoMajorityPartition, &mut fx);
        }
        fx
    }

    /// Internal consistency checks exercised by tests after every event.
    #[doc(hidden)]
    pub fn check_invariants(&self) {
        match self.next_slot {
            NextSlot::Empty => assert!(self.m_next.is_empty()),
            NextSlot::Unreliable { epoch, round } => {
                assert_eq!(epoch, self.label.epoch);
                assert_eq!(round, self.label.round + 1);
                assert!(self
                    .m_next
                    .values()
                    .all(|m| m.kind == WireRoundKind::Unreliable));
            }
            NextSlot::Reliable { epoch, round } => {
                assert_eq!(epoch, self.label.epoch + 1);
                assert_eq!(round, self.label.round + 1);
                assert!(self
                    .m_next
                    .values()
                    .all(|m| m.kind == WireRoundKind::Reliable));
            }
        }
        if self.label.kind.is_unreliable() {
            // Tracking digraphs are quiescent during unreliable rounds.
            for g in self.tracking.values() {
                assert!(g.is_done() || (g.vertices().len() == 1 && g.vertices().contains(&g.root())));
            }
        }
        if let Some(p) = &self.pending {
            assert_eq!(p.round, self.last_delivered + 1);
        }
    }
}

/// Builds a family over an explicit ordered member list (used for staged
/// next-eon overlays, where the vertex set is the survivor set).
fn build_family_over(family: &OverlayFamily, members: &[ServerId]) -> Digraph {
    match family {
        OverlayFamily::Explicit { edges } => {
            let mut g = Digraph::new(members.iter().copied());
            for &(u, v) in edges {
                if g.contains(u) && g.contains(v) {
                    g.add_edge(u, v);
                }
            }
            g
        }
        _ => {
            let mut g = Digraph::new(members.iter().copied());
            let n = members.len();
            let degree = match family {
                OverlayFamily::Ring => 1,
                OverlayFamily::Circulant { degree } => (*degree).min(n.saturating_sub(1)),
                _ => 1,
            };
            for i in 0..n {
                for k in 1..=degree {
                    if n > 1 {
                        g.add_edge(members[i], members[(i + k) % n]);
                    }
                }
            }
            g
        }
    }
}
