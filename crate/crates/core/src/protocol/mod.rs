//! The per-server dual-overlay broadcast engine.
//!
//! Servers progress through rounds grouped into epochs. Unreliable rounds
//! run on the connectivity-1 overlay and complete when a message from every
//! member has arrived; reliable rounds run on the resilient overlay and
//! complete when every tracking digraph is empty (early termination). Six
//! transitions connect the states:
//!
//! - `Tuu`: completed an unreliable round, next unreliable round.
//! - `Trf`: completed a reliable round with no pending failure notifications,
//!   first unreliable round of the epoch.
//! - `Tur`: failure notification in a plain unreliable round; roll back and
//!   rerun the previous (completed, not yet delivered) round reliably.
//! - `Tfr`: failure notification in the first unreliable round after a
//!   reliable one; rerun the current round reliably.
//! - `Trr`: completed a reliable round with failure notifications left,
//!   next round is reliable as well.
//! - `Tsk`: evidence that peers already rerun the next round in this epoch;
//!   deliver the previous round and skip forward without completing.
//!
//! Handlers are pure: they mutate only the local [`ServerState`] and emit
//! [`Effect`]s. All timing, channels, and failure injection live in the
//! simulator, which interprets the effects.

mod membership;
mod server;
mod tracking;

pub use membership::{partition_gate, uniform_gate_met, EonControl, PendingRound, ProbeBook};
pub use server::{ServerState, SystemConfig, ValidatedSetup};
pub use tracking::{NotificationPair, TrackingDigraph};

use std::fmt;

use thiserror::Error;

use crate::overlay::ServerId;

/// Simulated time in microseconds.
pub type SimTime = u64;

/// Content fingerprint of an application payload: length plus a digest.
/// The engine treats payloads opaquely; equality of fingerprints is what the
/// rerun-identity invariant and the checkers compare.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Payload {
    pub len: u32,
    pub digest: u64,
}

impl Payload {
    pub const EMPTY: Payload = Payload { len: 0, digest: 0 };

    pub fn from_bytes(bytes: &[u8]) -> Self {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        Payload {
            len: bytes.len() as u32,
            digest: h,
        }
    }

    /// Deterministic synthetic workload payload.
    pub fn synthesize(source: ServerId, round: u32, len: u32) -> Self {
        let mut h: u64 = 0x9e37_79b9_7f4a_7c15;
        for v in [source as u64, round as u64, len as u64] {
            h ^= v.wrapping_mul(0xff51_afd7_ed55_8ccd);
            h = h.rotate_left(31).wrapping_mul(0xc4ce_b9fe_1a85_ec53);
        }
        Payload { len, digest: h }
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Round flavor as carried on the wire. The local "first unreliable round"
/// marker is bookkeeping, not a wire distinction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum WireRoundKind {
    Unreliable,
    Reliable,
}

impl fmt::Display for WireRoundKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WireRoundKind::Unreliable => write!(f, "u"),
            WireRoundKind::Reliable => write!(f, "r"),
        }
    }
}

/// A broadcast message. Identity is the tuple
/// `(source, epoch, round, kind)`; the eon tag and payload ride along.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Message {
    pub source: ServerId,
    pub epoch: u32,
    pub round: u32,
    pub kind: WireRoundKind,
    pub eon: u32,
    pub payload: Payload,
}

impl Message {
    pub fn identity(&self) -> (ServerId, u32, u32, WireRoundKind) {
        (self.source, self.epoch, self.round, self.kind)
    }
}

/// `owner` announces that `target` failed. Valid only while both are members
/// of the reliable overlay of the notification's eon.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FailureNotification {
    pub target: ServerId,
    pub owner: ServerId,
    pub eon: u32,
}

/// Direction of a primary-partition probe: forward probes flood the reliable
/// overlay, backward probes flood its transpose.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ProbeDirection {
    Forward,
    Backward,
}

/// Everything that can arrive on a channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Wire {
    /// Unreliable-overlay broadcast traffic.
    Broadcast(Message),
    /// Reliable-overlay broadcast traffic.
    RBroadcast(Message),
    Fail(FailureNotification),
    Heartbeat {
        from: ServerId,
        eon: u32,
        sent_at: SimTime,
    },
    Probe {
        origin: ServerId,
        epoch: u32,
        round: u32,
        direction: ProbeDirection,
        eon: u32,
    },
}

impl Wire {
    pub fn is_failure_notification(&self) -> bool {
        matches!(self, Wire::Fail(_))
    }
}

/// Which channel class a send uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ChannelKind {
    Unreliable,
    Reliable,
    Fd,
}

impl fmt::Display for ChannelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ChannelKind::Unreliable => write!(f, "U"),
            ChannelKind::Reliable => write!(f, "R"),
            ChannelKind::Fd => write!(f, "F"),
        }
    }
}

/// Local round flavor, distinguishing the first unreliable round after a
/// reliable one (rollback from it targets the current round, not the
/// previous one).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RoundKind {
    Unreliable,
    UnreliableFirst,
    Reliable,
}

impl RoundKind {
    pub fn is_unreliable(&self) -> bool {
        !matches!(self, RoundKind::Reliable)
    }

    pub fn wire(&self) -> WireRoundKind {
        match self {
            RoundKind::Reliable => WireRoundKind::Reliable,
            _ => WireRoundKind::Unreliable,
        }
    }
}

impl fmt::Display for RoundKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RoundKind::Unreliable => write!(f, "U"),
            RoundKind::UnreliableFirst => write!(f, "U1"),
            RoundKind::Reliable => write!(f, "R"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StateLabel {
    pub epoch: u32,
    pub round: u32,
    pub kind: RoundKind,
}

impl StateLabel {
    pub const INITIAL: StateLabel = StateLabel {
        epoch: 1,
        round: 0,
        kind: RoundKind::Reliable,
    };

    pub fn new(epoch: u32, round: u32, kind: RoundKind) -> Self {
        StateLabel { epoch, round, kind }
    }
}

impl fmt::Display for StateLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}({},{})", self.kind, self.epoch, self.round)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TransitionKind {
    /// Unreliable round completed, next unreliable round.
    Tuu,
    /// Reliable round completed cleanly, first unreliable round.
    Trf,
    /// Rollback from a plain unreliable round.
    Tur,
    /// Rollback from the first unreliable round of the epoch.
    Tfr,
    /// Reliable round completed with notifications pending.
    Trr,
    /// Skip an uncompleted reliable round on peer evidence.
    Tsk,
}

impl fmt::Display for TransitionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TransitionKind::Tuu => "uu",
            TransitionKind::Trf => "rf",
            TransitionKind::Tur => "ur",
            TransitionKind::Tfr => "fr",
            TransitionKind::Trr => "rr",
            TransitionKind::Tsk => "sk",
        };
        write!(f, "t{s}")
    }
}

pub const ALL_TRANSITIONS: [TransitionKind; 6] = [
    TransitionKind::Tuu,
    TransitionKind::Trf,
    TransitionKind::Tur,
    TransitionKind::Tfr,
    TransitionKind::Trr,
    TransitionKind::Tsk,
];

#[derive(Debug, Error, PartialEq, Eq)]
#[error("transition {kind} illegal from {from}")]
pub struct IllegalTransition {
    pub from: StateLabel,
    pub kind: TransitionKind,
}

/// The state-machine transition table.
pub fn apply_transition(
    from: StateLabel,
    kind: TransitionKind,
) -> Result<StateLabel, IllegalTransition> {
    use RoundKind::*;
    use TransitionKind::*;
    let illegal = || IllegalTransition { from, kind };
    let (e, r) = (from.epoch, from.round);
    match kind {
        Tuu if from.kind.is_unreliable() => Ok(StateLabel::new(e, r + 1, Unreliable)),
        Tur if from.kind == Unreliable => {
            let r = r.checked_sub(1).ok_or_else(illegal)?;
            Ok(StateLabel::new(e + 1, r, Reliable))
        }
        Tfr if from.kind == UnreliableFirst => Ok(StateLabel::new(e + 1, r, Reliable)),
        Trf if from.kind == Reliable => Ok(StateLabel::new(e, r + 1, UnreliableFirst)),
        Trr if from.kind == Reliable => Ok(StateLabel::new(e + 1, r + 1, Reliable)),
        Tsk if from.kind == Reliable => Ok(StateLabel::new(e, r + 1, Reliable)),
        _ => Err(illegal()),
    }
}

/// Sorts a round's message set into delivery order: ascending source id.
/// Round sets hold one message per source, so the order is total.
pub fn deterministic_delivery_order(mut messages: Vec<Message>) -> Vec<Message> {
    messages.sort_by_key(|m| m.source);
    messages
}

/// Why a server stopped participating.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HaltReason {
    /// The membership agreed this server is gone; a live server honoring the
    /// agreement performs a controlled crash.
    RemovedByAgreement,
    /// Primary-partition mode and this server cannot assemble a majority.
    NoMajorityPartition,
}

/// Outputs of a handler, interpreted by the simulator in order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Effect {
    Send {
        wire: Wire,
        to: Vec<ServerId>,
        channel: ChannelKind,
    },
    Deliver {
        round: u32,
        epoch: u32,
        kind: WireRoundKind,
        messages: Vec<Message>,
    },
    /// Membership agreement removed these servers.
    Remove { servers: Vec<ServerId> },
    Transition {
        kind: TransitionKind,
        from: StateLabel,
        to: StateLabel,
    },
    SelfTerminate { reason: HaltReason },
    /// Entered the transitional reliable round bridging two eons.
    EnteredTransitionalRound { epoch: u32, round: u32 },
    /// Start heartbeating on the staged next reliable overlay.
    StartNextEonHeartbeats { eon: u32 },
    /// The transitional round completed; the reliable overlay was replaced.
    EonSwitched { eon: u32 },
    /// Ask the simulator to check back: if the server is still stuck in this
    /// reliable round after the partition timeout, it must self-terminate.
    ArmPartitionTimer { epoch: u32, round: u32 },
}

/// A state or receipt constraint was violated. Under a perfect failure
/// detector these are impossible; hitting one aborts the run with a
/// diagnostic rather than masking the bug.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("server {server} in {label}: {detail}")]
pub struct ProtocolViolation {
    pub server: ServerId,
    pub label: StateLabel,
    pub detail: String,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("overlay: {0}")]
    Overlay(#[from] crate::overlay::OverlayError),
    #[error("failure budget f={f} must stay below the reliable overlay connectivity {kappa}")]
    FailureBudget { f: usize, kappa: usize },
    #[error("uniform delivery requires n > 2f (n={n}, f={f})")]
    UniformBudget { n: usize, f: usize },
    #[error("{0}")]
    Invalid(String),
}
