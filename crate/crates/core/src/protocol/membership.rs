//! Membership extensions: the uniform-delivery gate, primary-partition
//! probes, and eon control for replacing the reliable overlay at runtime.

use std::collections::{BTreeMap, BTreeSet};

use crate::overlay::{Digraph, OverlayFamily, ServerId};
use crate::protocol::{FailureNotification, Message, ProbeDirection};

/// True when a server holding both forward and backward probe acks from
/// `forward`/`backward` distinct origins (itself included) may A-deliver a
/// completed reliable round: both counts must be a strict majority of the
/// current membership.
pub fn partition_gate(forward: usize, backward: usize, members: usize) -> bool {
    2 * forward > members && 2 * backward > members
}

/// Uniform-delivery gate: an unreliable round may be A-delivered once
/// messages from at least `f` distinct servers of the round two ahead have
/// been observed (with `f = 0` this is immediate, recovering non-uniform
/// behavior).
pub fn uniform_gate_met(f: usize, witnesses: usize) -> bool {
    witnesses >= f
}

/// An unreliable round that completed (its successor round finished) but
/// whose A-delivery is withheld by the uniform gate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PendingRound {
    pub round: u32,
    pub epoch: u32,
    pub messages: Vec<Message>,
}

/// Probe bookkeeping for the primary-partition gate. Forward probes flood
/// the reliable overlay, backward probes its transpose; a server counts the
/// distinct origins it has seen per reliable round. The ack sets double as
/// relay deduplication.
#[derive(Debug, Clone, Default)]
pub struct ProbeBook {
    rounds: BTreeMap<(u32, u32), ProbeAcks>,
}

#[derive(Debug, Clone, Default)]
pub struct ProbeAcks {
    pub forward: BTreeSet<ServerId>,
    pub backward: BTreeSet<ServerId>,
    pub own_sent: bool,
}

impl ProbeBook {
    /// Records an ack; returns true when this origin/direction is new for
    /// the round (the caller relays exactly then).
    pub fn record(
        &mut self,
        epoch: u32,
        round: u32,
        origin: ServerId,
        direction: ProbeDirection,
    ) -> bool {
        let acks = self.rounds.entry((epoch, round)).or_default();
        match direction {
            ProbeDirection::Forward => acks.forward.insert(origin),
            ProbeDirection::Backward => acks.backward.insert(origin),
        }
    }

    pub fn mark_own_sent(&mut self, epoch: u32, round: u32) -> bool {
        let acks = self.rounds.entry((epoch, round)).or_default();
        let first = !acks.own_sent;
        acks.own_sent = true;
        first
    }

    pub fn acks(&self, epoch: u32, round: u32) -> (usize, usize) {
        self.rounds
            .get(&(epoch, round))
            .map_or((0, 0), |a| (a.forward.len(), a.backward.len()))
    }

    /// Drops bookkeeping for epochs before `epoch`.
    pub fn gc_before(&mut self, epoch: u32) {
        self.rounds.retain(|&(e, _), _| e >= epoch);
    }
}

/// Eon control: the staged directive, the next reliable overlay while a
/// transitional round is in flight, and next-eon notifications received
/// early (they are postponed: neither forwarded nor applied until the eon
/// actually switches).
#[derive(Debug, Clone, Default)]
pub struct EonControl {
    directive: Option<(u32, OverlayFamily)>,
    pub next_gr: Option<Digraph>,
    pub postponed: Vec<FailureNotification>,
}

impl EonControl {
    /// Stages a directive: the reliable round of `epoch` becomes the
    /// transitional round and `family` (rebuilt over the survivors) becomes
    /// the next reliable overlay. Returns false for stale directives.
    pub fn stage(&mut self, epoch: u32, family: OverlayFamily, current_epoch: u32) -> bool {
        if self.directive.is_some() || current_epoch > epoch {
            return false;
        }
        self.directive = Some((epoch, family));
        true
    }

    pub fn trigger_epoch(&self) -> Option<u32> {
        self.directive.as_ref().map(|&(e, _)| e)
    }

    pub fn family(&self) -> Option<&OverlayFamily> {
        self.directive.as_ref().map(|(_, f)| f)
    }

    pub fn clear_directive(&mut self) {
        self.directive = None;
    }

    pub fn postpone(&mut self, fnote: FailureNotification) {
        if !self.postponed.contains(&fnote) {
            self.postponed.push(fnote);
        }
    }
}
