//! Heartbeat failure detection over the reliable overlay.
//!
//! Every server heartbeats its reliable-overlay successors on dedicated
//! channels; each server watches its predecessors and suspects one after
//! `timeout` without a heartbeat. Suspicion is permanent within an eon and
//! produces a failure notification owned by the detecting server. In perfect
//! mode the deployment guarantees timeliness, so suspicion implies a real
//! crash; in eventually-perfect mode false suspicion is possible and the
//! engine additionally ignores all non-notification traffic from suspected
//! predecessors.
//!
//! Suspicion is judged on heartbeat *send* times: a server that crashed at
//! time `t` sent its last heartbeat no later than `t`, so with a heartbeat
//! period `p` and timeout `to` some live successor emits a notification by
//! `t + to + p`.

use std::collections::{BTreeMap, BTreeSet};

use crate::overlay::{Digraph, ServerId};
use crate::protocol::{SimTime, Wire};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FdMode {
    Perfect,
    EventuallyPerfect,
}

#[derive(Debug, Clone, Copy)]
pub struct FdConfig {
    pub heartbeat_period: SimTime,
    pub timeout: SimTime,
    pub mode: FdMode,
}

impl FdConfig {
    pub fn valid(&self) -> bool {
        self.heartbeat_period > 0 && self.timeout > self.heartbeat_period
    }
}

/// Heartbeats due this tick and any fresh suspicions (ascending target id).
#[derive(Debug, Default)]
pub struct FdTickOutput {
    /// `(target, eon)` pairs; next-eon heartbeats flow while a transitional
    /// round stages the next overlay.
    pub heartbeats: Vec<(ServerId, u32)>,
    pub suspicions: Vec<ServerId>,
}

#[derive(Debug, Clone)]
struct NextEonWatch {
    eon: u32,
    hb_targets: Vec<ServerId>,
    last_heard: BTreeMap<ServerId, SimTime>,
}

#[derive(Debug, Clone)]
pub struct FdState {
    id: ServerId,
    cfg: FdConfig,
    eon: u32,
    watched: BTreeSet<ServerId>,
    hb_targets: Vec<ServerId>,
    last_heard: BTreeMap<ServerId, SimTime>,
    suspected: BTreeSet<ServerId>,
    next: Option<NextEonWatch>,
}

impl FdState {
    pub fn new(id: ServerId, g_r: &Digraph, cfg: FdConfig, now: SimTime) -> Self {
        let watched: BTreeSet<ServerId> = g_r.predecessors(id).into_iter().collect();
        let last_heard = watched.iter().map(|&p| (p, now)).collect();
        FdState {
            id,
            cfg,
            eon: 1,
            watched,
            hb_targets: g_r.successors(id).collect(),
            last_heard,
            suspected: BTreeSet::new(),
            next: None,
        }
    }

    pub fn mode(&self) -> FdMode {
        self.cfg.mode
    }

    pub fn suspected(&self) -> &BTreeSet<ServerId> {
        &self.suspected
    }

    /// One failure-detector period: emit heartbeats, time out silent
    /// predecessors. Multiple predecessors timing out in the same tick are
    /// reported in ascending id order.
    pub fn tick(&mut self, now: SimTime) -> FdTickOutput {
        let mut out = FdTickOutput::default();
        for &t in &self.hb_targets {
            out.heartbeats.push((t, self.eon));
        }
        if let Some(next) = &self.next {
            for &t in &next.hb_targets {
                out.heartbeats.push((t, next.eon));
            }
        }
        for (&pred, &heard) in &self.last_heard {
            if now.saturating_sub(heard) > self.cfg.timeout && self.suspected.insert(pred) {
                out.suspicions.push(pred);
            }
        }
        out
    }

    pub fn on_heartbeat(&mut self, from: ServerId, eon: u32, sent_at: SimTime) {
        if eon == self.eon {
            if let Some(h) = self.last_heard.get_mut(&from) {
                *h = (*h).max(sent_at);
            }
        } else if let Some(next) = &mut self.next {
            if eon == next.eon {
                next.last_heard
                    .entry(from)
                    .and_modify(|h| *h = (*h).max(sent_at))
                    .or_insert(sent_at);
            }
        }
    }

    /// In eventually-perfect mode, everything but failure notifications from
    /// a suspected predecessor is ignored; a perfect detector never needs to
    /// suppress.
    pub fn should_suppress(&self, link_from: ServerId, wire: &Wire) -> bool {
        self.cfg.mode == FdMode::EventuallyPerfect
            && self.suspected.contains(&link_from)
            && !wire.is_failure_notification()
    }

    /// Track the (possibly shrunk) current overlay: removed servers are no
    /// longer watched, successors may have changed.
    pub fn rebind(&mut self, g_r: &Digraph) {
        self.watched = g_r.predecessors(self.id).into_iter().collect();
        self.hb_targets = g_r.successors(self.id).collect();
        self.last_heard.retain(|p, _| self.watched.contains(p));
    }

    /// Transitional round entered: also heartbeat on the staged overlay and
    /// start collecting its predecessors' liveness.
    pub fn stage_next(&mut self, next_gr: &Digraph, eon: u32, now: SimTime) {
        let preds = next_gr.predecessors(self.id);
        self.next = Some(NextEonWatch {
            eon,
            hb_targets: next_gr.successors(self.id).collect(),
            last_heard: preds.into_iter().map(|p| (p, now)).collect(),
        });
    }

    /// The eon switched: adopt the new overlay, seed liveness from the
    /// heartbeats collected during the transitional round, and reset the
    /// suspicion scope.
    pub fn switch_eon(&mut self, eon: u32, g_r: &Digraph, now: SimTime) {
        let staged = self.next.take();
        self.eon = eon;
        self.watched = g_r.predecessors(self.id).into_iter().collect();
        self.hb_targets = g_r.successors(self.id).collect();
        let staged_heard = staged
            .filter(|n| n.eon == eon)
            .map(|n| n.last_heard)
            .unwrap_or_default();
        self.last_heard = self
            .watched
            .iter()
            .map(|&p| (p, staged_heard.get(&p).copied().unwrap_or(now)))
            .collect();
        self.suspected.clear();
    }
}
