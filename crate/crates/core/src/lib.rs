//! Dual-overlay leaderless atomic broadcast.
//!
//! Every server runs the same round-based engine over two overlay networks:
//! a connectivity-1 unreliable digraph used while no failures occur (each
//! broadcast message is sent and received at most once per server), and a
//! resilient reliable digraph the engine falls back to when a failure is
//! detected. Rounds, epochs, and the six state transitions between them are
//! implemented as a pure state machine ([`protocol::ServerState`]) that maps
//! events to effects; all I/O is interpreted by the deterministic
//! discrete-event simulator in [`sim`].
//!
//! The crate also ships the supporting tooling the engine is tested with:
//! heartbeat failure detection ([`fd`]), membership extensions (uniform
//! delivery gate, primary-partition gate, eon-based reliable-digraph
//! replacement), trace checkers for the atomic-broadcast properties
//! ([`analysis`]), and the closed-form performance model
//! ([`analysis::model`]).

pub mod analysis;
pub mod fd;
pub mod overlay;
pub mod protocol;
pub mod sim;

pub use overlay::{build_overlay, Digraph, DigraphSpec, OverlayFamily, ServerId, UnreliableOverlay};
