//! Trace checkers for the broadcast properties.
//!
//! Everything here is pure over an immutable [`Trace`]. Each checker returns
//! reports with a verdict and, on failure, a locator good enough to find the
//! offending spot (server, round, event index).

use std::collections::BTreeMap;
use std::fmt;

use crate::overlay::ServerId;
use crate::protocol::{RoundKind, StateLabel, WireRoundKind};
use crate::sim::trace::{EndReason, Trace, TraceEventKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Pass,
    Fail,
    /// The run ended before the property became decidable.
    Inconclusive,
    /// The trace is outside the checker's assumptions.
    Skipped,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Verdict::Pass => write!(f, "pass"),
            Verdict::Fail => write!(f, "FAIL"),
            Verdict::Inconclusive => write!(f, "inconclusive"),
            Verdict::Skipped => write!(f, "skipped"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub property: String,
    pub verdict: Verdict,
    /// Counterexample locator when failed.
    pub detail: String,
}

impl CheckReport {
    fn pass(property: &str) -> Self {
        CheckReport {
            property: property.into(),
            verdict: Verdict::Pass,
            detail: String::new(),
        }
    }

    fn fail(property: &str, detail: String) -> Self {
        CheckReport {
            property: property.into(),
            verdict: Verdict::Fail,
            detail,
        }
    }

    fn with(property: &str, verdict: Verdict, detail: String) -> Self {
        CheckReport {
            property: property.into(),
            verdict,
            detail,
        }
    }

    pub fn ok(&self) -> bool {
        !matches!(self.verdict, Verdict::Fail)
    }
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.detail.is_empty() {
            write!(f, "{:<24} {}", self.property, self.verdict)
        } else {
            write!(f, "{:<24} {} ({})", self.property, self.verdict, self.detail)
        }
    }
}

/// Safety: integrity, total order, per-round set agreement, and same-epoch
/// delivery, over the non-faulty servers.
pub fn check_safety(trace: &Trace) -> Vec<CheckReport> {
    let mut reports = Vec::new();
    let live = trace.live_servers();

    // Integrity (a): rounds are delivered once, in order, gap-free, so no
    // (source, round) pair can be delivered twice.
    let mut integrity = CheckReport::pass("integrity");
    'integrity: for &s in &live {
        let mut expected = 1;
        for d in &trace.logs[s] {
            if d.round != expected {
                integrity = CheckReport::fail(
                    "integrity",
                    format!("server {s} delivered round {} after round {}", d.round, expected - 1),
                );
                break 'integrity;
            }
            expected += 1;
            if d.sources.len() != d.count as usize {
                integrity = CheckReport::fail(
                    "integrity",
                    format!("server {s} round {}: duplicate sources in one round", d.round),
                );
                break 'integrity;
            }
            // Integrity (b): everything delivered was previously broadcast.
            // With relaxed rerun payloads only presence is checkable (the
            // delivered instance may postdate the recorded first broadcast).
            let mut xor = 0u64;
            for src in d.sources.iter() {
                match trace.own_broadcasts.get(&(src, d.round)) {
                    Some(&(_, _, digest)) => xor ^= digest,
                    None => {
                        integrity = CheckReport::fail(
                            "integrity",
                            format!(
                                "server {s} round {}: message from {src} was never broadcast",
                                d.round
                            ),
                        );
                        break 'integrity;
                    }
                }
            }
            if trace.meta.rerun_relax {
                continue;
            }
            if xor != d.digest_xor {
                integrity = CheckReport::fail(
                    "integrity",
                    format!(
                        "server {s} round {}: delivered content differs from broadcast content",
                        d.round
                    ),
                );
                break 'integrity;
            }
        }
    }
    reports.push(integrity);

    // Total order: all non-faulty logs are prefix-compatible.
    let mut total_order = CheckReport::pass("total-order");
    if let Some((&first, rest)) = live.split_first() {
        'outer: for &s in rest {
            let a = &trace.logs[first];
            let b = &trace.logs[s];
            for i in 0..a.len().min(b.len()) {
                let (x, y) = (&a[i], &b[i]);
                if (x.round, x.epoch, x.kind, x.count, &x.sources, x.digest_xor)
                    != (y.round, y.epoch, y.kind, y.count, &y.sources, y.digest_xor)
                {
                    total_order = CheckReport::fail(
                        "total-order",
                        format!(
                            "logs of servers {first} and {s} diverge at position {i} (round {})",
                            x.round
                        ),
                    );
                    break 'outer;
                }
            }
        }
    }
    reports.push(total_order);

    // Set agreement + same-epoch delivery per round.
    let mut set_agreement = CheckReport::pass("set-agreement");
    let mut same_epoch = CheckReport::pass("same-epoch-delivery");
    let mut per_round: BTreeMap<u32, (ServerId, u32, WireRoundKind, u32, u64)> = BTreeMap::new();
    'sets: for &s in &live {
        for d in &trace.logs[s] {
            match per_round.get(&d.round) {
                None => {
                    per_round.insert(d.round, (s, d.epoch, d.kind, d.count, d.digest_xor));
                }
                Some(&(s0, epoch, kind, count, xor)) => {
                    if d.epoch != epoch || d.kind != kind {
                        same_epoch = CheckReport::fail(
                            "same-epoch-delivery",
                            format!(
                                "round {} delivered in epoch {epoch} by {s0} but epoch {} by {s}",
                                d.round, d.epoch
                            ),
                        );
                        break 'sets;
                    }
                    if d.count != count || d.digest_xor != xor {
                        set_agreement = CheckReport::fail(
                            "set-agreement",
                            format!("round {}: servers {s0} and {s} delivered different sets", d.round),
                        );
                        break 'sets;
                    }
                }
            }
        }
    }
    reports.push(set_agreement);
    reports.push(same_epoch);
    reports
}

/// Liveness: validity (own messages in own log) and agreement (logs equal
/// through the last commonly delivered round).
pub fn check_liveness(trace: &Trace) -> Vec<CheckReport> {
    if trace.meta.exceeds_f {
        return vec![CheckReport::with(
            "liveness",
            Verdict::Skipped,
            "assumption violated: more failures than the budget".into(),
        )];
    }
    if trace.end != EndReason::Completed {
        return vec![CheckReport::with(
            "liveness",
            Verdict::Inconclusive,
            format!("run ended early: {:?}", trace.end),
        )];
    }
    let live = trace.live_servers();
    let common = live
        .iter()
        .map(|&s| trace.logs[s].last().map_or(0, |d| d.round))
        .min()
        .unwrap_or(0);

    let mut validity = CheckReport::pass("validity");
    'validity: for &s in &live {
        for d in &trace.logs[s] {
            if d.round > common {
                break;
            }
            if !d.sources.contains(s) {
                validity = CheckReport::fail(
                    "validity",
                    format!("server {s} round {}: own message missing from own log", d.round),
                );
                break 'validity;
            }
        }
        if trace.logs[s].last().map_or(0, |d| d.round) < trace.meta.rounds {
            validity = CheckReport::fail(
                "validity",
                format!("server {s} never delivered the whole workload"),
            );
            break 'validity;
        }
    }

    let mut agreement = CheckReport::pass("agreement");
    if let Some((&first, rest)) = live.split_first() {
        'agree: for &s in rest {
            for i in 0..common as usize {
                let (a, b) = (&trace.logs[first][i], &trace.logs[s][i]);
                if (a.round, a.epoch, a.count, a.digest_xor) != (b.round, b.epoch, b.count, b.digest_xor) {
                    agreement = CheckReport::fail(
                        "agreement",
                        format!("servers {first} and {s} disagree on round {}", a.round),
                    );
                    break 'agree;
                }
            }
        }
    }
    vec![validity, agreement]
}

fn is_reliable(l: &StateLabel) -> bool {
    l.kind == RoundKind::Reliable
}

/// Receipt constraint for one receive event; `None` means fine (handled or
/// droppable), `Some(reason)` is a violation.
fn receipt_violation(
    label: &StateLabel,
    msg_kind: WireRoundKind,
    me: u32,
    mr: u32,
) -> Option<String> {
    let (e, r) = (label.epoch, label.round);
    match msg_kind {
        WireRoundKind::Unreliable => {
            if me > e {
                return Some(format!("unreliable message from future epoch {me} received in epoch {e}"));
            }
            if me < e || mr < r {
                return None; // stale, dropped
            }
            if mr == r && is_reliable(label) {
                return Some(format!("unreliable round-{mr} message while running round {r} reliably"));
            }
            if mr > r + 1 {
                return Some(format!("unreliable message skips from round {r} to {mr}"));
            }
            None
        }
        WireRoundKind::Reliable => {
            if me < e || mr < r {
                return None; // stale
            }
            if !is_reliable(label) {
                return Some(format!(
                    "reliable message ({me},{mr}) received in unreliable round ({e},{r})"
                ));
            }
            if me > e + 1 || (me == e + 1 && mr != r + 1) {
                return Some(format!("reliable message ({me},{mr}) skips ahead of ({e},{r})"));
            }
            if me == e && mr > r + 1 {
                return Some(format!("reliable message for round {mr} skips round {}", r + 1));
            }
            None
        }
    }
}

/// Legal concurrent label pairs (the state-uniqueness family of
/// constraints). `a` and `b` are the labels of two non-faulty servers
/// observed at the same instant.
pub fn concurrent_labels_ok(a: &StateLabel, b: &StateLabel) -> bool {
    listed(a, b) && listed(b, a)
}

fn listed(pj: &StateLabel, pi: &StateLabel) -> bool {
    use RoundKind::*;
    let (e, r) = (pj.epoch as i64, pj.round as i64);
    let t = (pi.epoch as i64, pi.round as i64, pi.kind);
    match pj.kind {
        Unreliable => {
            t == (e, r - 1, Unreliable)
                || t == (e, r - 1, UnreliableFirst)
                || t == (e, r, Unreliable)
                || t == (e, r + 1, Unreliable)
                || t == (e + 1, r - 2, Reliable)
                || t == (e + 1, r - 1, Reliable)
                || t == (e + 1, r, Reliable)
        }
        UnreliableFirst => {
            t == (e, r - 1, Reliable)
                || t == (e, r, UnreliableFirst)
                || t == (e, r + 1, Unreliable)
                || t == (e + 1, r, Reliable)
        }
        Reliable => {
            t == (e - 1, r, Unreliable)
                || t == (e - 1, r, UnreliableFirst)
                || t == (e - 1, r + 1, Unreliable)
                || t == (e - 1, r + 2, Unreliable)
                || t == (e, r + 1, UnreliableFirst)
                || t == (e - 1, r - 1, Reliable)
                || t == (e, r - 1, Reliable)
                || t == (e, r, Reliable)
                || t == (e, r + 1, Reliable)
                || t == (e + 1, r + 1, Reliable)
        }
    }
}

/// Walks every receive event against the receipt constraints and every
/// label change against the concurrent-states table. Needs a full-level
/// trace under a perfect failure detector.
pub fn check_state_propositions(trace: &Trace) -> Vec<CheckReport> {
    if !trace.meta.perfect_fd {
        return vec![CheckReport::with(
            "state-propositions",
            Verdict::Skipped,
            "receipt constraints assume a perfect failure detector".into(),
        )];
    }
    if !trace.meta.level_full {
        return vec![CheckReport::with(
            "state-propositions",
            Verdict::Inconclusive,
            "trace has no receive records (light level)".into(),
        )];
    }

    let mut receipt = CheckReport::pass("receipt-constraints");
    let mut concurrency = CheckReport::pass("concurrent-states");
    let mut labels: Vec<StateLabel> = vec![StateLabel::INITIAL; trace.meta.n];
    let mut gone = vec![false; trace.meta.n];

    for (idx, ev) in trace.events.iter().enumerate() {
        match &ev.kind {
            TraceEventKind::Receive { wire, label, .. } => {
                let (kind, me, mr) = match wire {
                    crate::protocol::Wire::Broadcast(m) => (m.kind, m.epoch, m.round),
                    crate::protocol::Wire::RBroadcast(m) => (m.kind, m.epoch, m.round),
                    _ => continue,
                };
                if receipt.verdict == Verdict::Pass {
                    if let Some(reason) = receipt_violation(label, kind, me, mr) {
                        receipt = CheckReport::fail(
                            "receipt-constraints",
                            format!("event {idx} (t={}): server {}: {reason}", ev.time, ev.server),
                        );
                    }
                }
            }
            TraceEventKind::Transition { to, .. } => {
                labels[ev.server] = *to;
                if concurrency.verdict == Verdict::Pass {
                    for other in 0..labels.len() {
                        if other == ev.server || gone[other] {
                            continue;
                        }
                        if !concurrent_labels_ok(&labels[ev.server], &labels[other]) {
                            concurrency = CheckReport::fail(
                                "concurrent-states",
                                format!(
                                    "event {idx} (t={}): server {} in {} while server {other} in {}",
                                    ev.time, ev.server, labels[ev.server], labels[other]
                                ),
                            );
                            break;
                        }
                    }
                }
            }
            TraceEventKind::Crash | TraceEventKind::SelfTerminated => {
                gone[ev.server] = true;
            }
            _ => {}
        }
    }
    vec![receipt, concurrency]
}

/// Uniform agreement and uniform total order: include faulty servers'
/// deliveries and require every round anyone delivered to be delivered by
/// all non-faulty servers, same epoch, same set.
pub fn check_uniformity(trace: &Trace) -> Vec<CheckReport> {
    let live = trace.live_servers();
    let mut agreement = CheckReport::pass("uniform-agreement");
    let mut order = CheckReport::pass("uniform-total-order");

    // Reference per round from any deliverer, compared across everyone.
    let mut reference: BTreeMap<u32, (ServerId, u32, u32, u64)> = BTreeMap::new();
    for s in 0..trace.meta.n {
        for d in &trace.logs[s] {
            match reference.get(&d.round) {
                None => {
                    reference.insert(d.round, (s, d.epoch, d.count, d.digest_xor));
                }
                Some(&(s0, epoch, count, xor)) => {
                    if d.epoch != epoch || d.count != count || d.digest_xor != xor {
                        agreement = CheckReport::fail(
                            "uniform-agreement",
                            format!(
                                "round {}: server {s} delivered (epoch {}, {} msgs) but {s0} delivered (epoch {epoch}, {count} msgs)",
                                d.round, d.epoch, d.count
                            ),
                        );
                    }
                }
            }
        }
    }
    // Every delivered round must also reach all non-faulty servers.
    if agreement.verdict == Verdict::Pass {
        'rounds: for (&round, &(s0, ..)) in &reference {
            for &s in &live {
                if !trace.logs[s].iter().any(|d| d.round == round) {
                    agreement = CheckReport::fail(
                        "uniform-agreement",
                        format!("round {round} delivered by {s0} but never by non-faulty {s}"),
                    );
                    break 'rounds;
                }
            }
        }
    }
    // Uniform total order: everyone's log (faulty included) is a prefix of
    // the reference sequence.
    let ordered: Vec<(u32, u32, u32, u64)> = reference
        .iter()
        .map(|(&r, &(_, e, c, x))| (r, e, c, x))
        .collect();
    'servers: for s in 0..trace.meta.n {
        for (i, d) in trace.logs[s].iter().enumerate() {
            let Some(&(r, e, c, x)) = ordered.get(i) else {
                break;
            };
            if (d.round, d.epoch, d.count, d.digest_xor) != (r, e, c, x) {
                order = CheckReport::fail(
                    "uniform-total-order",
                    format!("server {s} position {i}: round {} out of order", d.round),
                );
                break 'servers;
            }
        }
    }
    vec![agreement, order]
}

/// Primary-partition safety: a server that self-terminated never delivered
/// a round the surviving side did not deliver with the same content.
pub fn check_partition_safety(trace: &Trace) -> CheckReport {
    let live = trace.live_servers();
    for (&s, _) in &trace.terminated {
        for d in &trace.logs[s] {
            let survivors_have = live.iter().all(|&x| {
                trace.logs[x]
                    .iter()
                    .any(|e| e.round == d.round && e.digest_xor == d.digest_xor && e.count == d.count)
            });
            if !live.is_empty() && !survivors_have {
                return CheckReport::fail(
                    "partition-safety",
                    format!("terminated server {s} delivered round {} ahead of the surviving side", d.round),
                );
            }
        }
    }
    CheckReport::pass("partition-safety")
}

/// Eon barrier: no next-eon protocol traffic before every non-faulty server
/// entered the transitional round.
pub fn check_eon_barrier(trace: &Trace, next_eon: u32) -> CheckReport {
    if !trace.meta.level_full {
        return CheckReport::with(
            "eon-barrier",
            Verdict::Inconclusive,
            "needs a full-level trace".into(),
        );
    }
    let mut last_entry: Option<u64> = None;
    for ev in &trace.events {
        if let TraceEventKind::TransitionalEntered { .. } = ev.kind {
            if !trace.is_faulty(ev.server) {
                last_entry = Some(last_entry.map_or(ev.time, |t: u64| t.max(ev.time)));
            }
        }
    }
    let Some(barrier) = last_entry else {
        return CheckReport::fail("eon-barrier", "no server entered a transitional round".into());
    };
    for ev in &trace.events {
        if let TraceEventKind::Send { wire, .. } = &ev.kind {
            let eon = match wire {
                crate::protocol::Wire::RBroadcast(m) => m.eon,
                crate::protocol::Wire::Fail(f) => f.eon,
                crate::protocol::Wire::Probe { eon, .. } => *eon,
                _ => continue,
            };
            if eon >= next_eon && ev.time < barrier {
                return CheckReport::fail(
                    "eon-barrier",
                    format!(
                        "server {} sent eon-{eon} traffic at t={} before the barrier at t={barrier}",
                        ev.server, ev.time
                    ),
                );
            }
        }
    }
    CheckReport::pass("eon-barrier")
}

/// The standard bundle: safety and liveness always, propositions when the
/// trace supports them, uniformity/partition checks when the mode was on.
pub fn check_all(trace: &Trace) -> Vec<CheckReport> {
    let mut reports = Vec::new();
    if let EndReason::Violation(v) = &trace.end {
        reports.push(CheckReport::fail("invariant-traps", format!("run aborted: {v}")));
    } else {
        reports.push(CheckReport::pass("invariant-traps"));
    }
    reports.extend(check_safety(trace));
    reports.extend(check_liveness(trace));
    reports.extend(check_state_propositions(trace));
    if trace.meta.uniform {
        reports.extend(check_uniformity(trace));
    }
    if trace.meta.partition {
        reports.push(check_partition_safety(trace));
    }
    reports
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::overlay::OverlayFamily;
    use crate::sim::scenario::Scenario;

    fn run_small(fails: Vec<(u64, ServerId)>) -> Trace {
        let mut sc = Scenario::default();
        sc.n = 5;
        sc.rounds = 30;
        sc.unreliable = OverlayFamily::Ring;
        sc.reliable = OverlayFamily::Circulant { degree: 3 };
        sc.f = Some(2);
        sc.fails = fails;
        sc.resolve(0).unwrap();
        crate::sim::run(&sc).unwrap()
    }

    #[test]
    fn clean_run_passes_everything() {
        let t = run_small(vec![]);
        for r in check_all(&t) {
            assert!(r.ok(), "{r}");
        }
    }

    #[test]
    fn crash_run_passes_everything() {
        let t = run_small(vec![(2_500, 1), (4_000, 3)]);
        for r in check_all(&t) {
            assert!(r.ok(), "{r}");
        }
    }

    #[test]
    fn corrupted_log_fails_total_order_with_locator() {
        let mut t = run_small(vec![]);
        t.logs[2][5].digest_xor ^= 1;
        let rs = check_safety(&t);
        let to = rs.iter().find(|r| r.property == "total-order").unwrap();
        assert_eq!(to.verdict, Verdict::Fail);
        assert!(to.detail.contains("position 5"), "{}", to.detail);
        let sa = rs.iter().find(|r| r.property == "set-agreement").unwrap();
        assert_eq!(sa.verdict, Verdict::Fail);
    }

    #[test]
    fn duplicated_round_fails_integrity() {
        let mut t = run_small(vec![]);
        let dup = t.logs[0][3].clone();
        t.logs[0].insert(3, dup);
        let rs = check_safety(&t);
        assert_eq!(rs[0].property, "integrity");
        assert_eq!(rs[0].verdict, Verdict::Fail);
    }

    #[test]
    fn never_broadcast_message_fails_integrity() {
        let mut t = run_small(vec![]);
        t.logs[1][2].sources.insert(77);
        t.logs[1][2].count += 1;
        let rs = check_safety(&t);
        assert_eq!(rs[0].verdict, Verdict::Fail);
        assert!(rs[0].detail.contains("never broadcast"), "{}", rs[0].detail);
    }

    #[test]
    fn dropped_own_message_fails_validity() {
        let mut t = run_small(vec![]);
        // erase server 4's message from its own delivered round 7
        let log = &mut t.logs[4];
        let d = log.iter_mut().find(|d| d.round == 7).unwrap();
        let kept: Vec<ServerId> = d.sources.iter().filter(|&s| s != 4).collect();
        d.sources = crate::sim::trace::SourceBits::from_ids(kept);
        d.count -= 1;
        let rs = check_liveness(&t);
        let v = rs.iter().find(|r| r.property == "validity").unwrap();
        assert_eq!(v.verdict, Verdict::Fail);
    }

    #[test]
    fn synthetic_future_epoch_receive_fails_receipt_constraints() {
        let mut t = run_small(vec![]);
        // a message from epoch 9 "received" while in epoch 1
        let msg = crate::protocol::Message {
            source: 1,
            epoch: 9,
            round: 3,
            kind: WireRoundKind::Unreliable,
            eon: 1,
            payload: crate::protocol::Payload::EMPTY,
        };
        t.events.push(crate::sim::trace::TraceEvent {
            time: 1,
            server: 0,
            kind: TraceEventKind::Receive {
                from: 1,
                wire: crate::protocol::Wire::Broadcast(msg),
                label: StateLabel::new(1, 3, RoundKind::Unreliable),
            },
        });
        let rs = check_state_propositions(&t);
        let rc = rs.iter().find(|r| r.property == "receipt-constraints").unwrap();
        assert_eq!(rc.verdict, Verdict::Fail);
    }

    #[test]
    fn concurrency_table_accepts_legal_and_rejects_illegal_pairs() {
        use RoundKind::*;
        let ok = [
            (StateLabel::new(2, 5, Unreliable), StateLabel::new(2, 5, Unreliable)),
            (StateLabel::new(2, 5, Unreliable), StateLabel::new(2, 6, Unreliable)),
            (StateLabel::new(2, 5, Unreliable), StateLabel::new(3, 4, Reliable)),
            (StateLabel::new(2, 5, UnreliableFirst), StateLabel::new(2, 4, Reliable)),
            (StateLabel::new(3, 4, Reliable), StateLabel::new(3, 5, Reliable)),
            (StateLabel::new(3, 4, Reliable), StateLabel::new(2, 6, Unreliable)),
            (StateLabel::new(1, 0, Reliable), StateLabel::new(1, 1, UnreliableFirst)),
        ];
        for (a, b) in ok {
            assert!(concurrent_labels_ok(&a, &b), "{a} vs {b}");
            assert!(concurrent_labels_ok(&b, &a), "{b} vs {a}");
        }
        let bad = [
            (StateLabel::new(2, 5, Unreliable), StateLabel::new(2, 5, Reliable)),
            (StateLabel::new(2, 5, Unreliable), StateLabel::new(2, 7, Unreliable)),
            (StateLabel::new(2, 5, Unreliable), StateLabel::new(4, 5, Reliable)),
            (StateLabel::new(2, 5, UnreliableFirst), StateLabel::new(2, 5, Unreliable)),
            (StateLabel::new(3, 4, Reliable), StateLabel::new(3, 6, Reliable)),
        ];
        for (a, b) in bad {
            assert!(!concurrent_labels_ok(&a, &b), "{a} vs {b}");
        }
    }

    #[test]
    fn skipped_and_inconclusive_scopes() {
        let mut t = run_small(vec![]);
        t.meta.exceeds_f = true;
        assert_eq!(check_liveness(&t)[0].verdict, Verdict::Skipped);
        t.meta.exceeds_f = false;
        t.meta.perfect_fd = false;
        assert_eq!(check_state_propositions(&t)[0].verdict, Verdict::Skipped);
    }
}
