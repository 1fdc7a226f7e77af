//! Acceptance suite: one test per criterion, each printing a verdict line.
//!
//! Run with `cargo test --test acceptance -- --nocapture` to see the lines.

use std::collections::BTreeSet;
use std::sync::OnceLock;
use std::time::Instant;

use dualcast_core::analysis::checks::{
    check_all, check_eon_barrier, check_safety, check_uniformity, CheckReport,
};
use dualcast_core::analysis::metrics::{summarize_window, MetricsError};
use dualcast_core::analysis::model::{expected_performance, PerfModel};
use dualcast_core::overlay::{OverlayFamily, ServerId};
use dualcast_core::protocol::{
    FailureNotification, SimTime, SystemConfig, TransitionKind, Wire, WireRoundKind,
};
use dualcast_core::sim::scenario::{FailAtDeliver, FailAtReceive, FailAtSend, Scenario, Spike};
use dualcast_core::sim::trace::{EndReason, Trace, TraceEventKind, TraceLevel};
use dualcast_core::DigraphSpec;

fn verdict(criterion: &str, ok: bool, detail: &str) {
    println!(
        "ACCEPTANCE {:<28} {} {}",
        criterion,
        if ok { "pass" } else { "FAIL" },
        detail
    );
    assert!(ok, "{criterion}: {detail}");
}

fn assert_reports_ok(criterion: &str, reports: &[CheckReport]) {
    for r in reports {
        assert!(r.ok(), "{criterion}: {r}");
    }
}

/// Degree-3, connectivity-3 overlay over nine servers in which server 0
/// feeds {3,4,5} and server 5 feeds {6,7,8}.
fn nine_server_edges() -> Vec<(ServerId, ServerId)> {
    vec![
        (0, 3), (0, 4), (0, 5),
        (1, 2), (1, 3), (1, 6),
        (2, 4), (2, 5), (2, 6),
        (3, 1), (3, 2), (3, 7),
        (4, 0), (4, 3), (4, 8),
        (5, 6), (5, 7), (5, 8),
        (6, 0), (6, 5), (6, 8),
        (7, 0), (7, 1), (7, 2),
        (8, 1), (8, 4), (8, 7),
    ]
}

fn base_scenario(n: usize, d: usize, rounds: u32) -> Scenario {
    let mut sc = Scenario::default();
    sc.n = n;
    sc.rounds = rounds;
    sc.unreliable = OverlayFamily::Ring;
    sc.reliable = OverlayFamily::Circulant { degree: d };
    sc.payload = 64;
    sc
}

fn transition_time(
    trace: &Trace,
    server: ServerId,
    pred: impl Fn(TransitionKind, &dualcast_core::protocol::StateLabel) -> bool,
) -> Option<SimTime> {
    trace.events.iter().find_map(|ev| match &ev.kind {
        TraceEventKind::Transition { kind, to, .. } if ev.server == server && pred(*kind, to) => {
            Some(ev.time)
        }
        _ => None,
    })
}

fn deliver_time(trace: &Trace, server: ServerId, round: u32) -> Option<SimTime> {
    trace.logs[server]
        .iter()
        .find(|d| d.round == round)
        .map(|d| d.time)
}

/// Departure time of `sender`'s own unreliable round-`round` message toward
/// `to` (for aiming link stalls at exactly one message).
fn own_send_depart(trace: &Trace, sender: ServerId, to: ServerId, round: u32) -> Option<SimTime> {
    trace.events.iter().find_map(|ev| match &ev.kind {
        TraceEventKind::Send { to: t, wire: Wire::Broadcast(m) }
            if ev.server == sender && *t == to && m.source == sender && m.round == round =>
        {
            Some(ev.time)
        }
        _ => None,
    })
}

/// Criterion 1: lost-message tracking replay on the nine-server overlay.
/// Server 0 sends its message only to server 5 and dies; server 5 dies on
/// receipt. Server 6's tracking digraph for that message must shrink to
/// exactly {0, 5} and then to nothing, and the round completes without it.
#[test]
fn criterion_01_tracking_digraph_replay() {
    let started = Instant::now();

    // Exact-order replay through the real handlers of server 6.
    let cfg = SystemConfig {
        n: 9,
        f: 2,
        unreliable: DigraphSpec::new(OverlayFamily::Ring, 9),
        reliable: DigraphSpec::new(
            OverlayFamily::Explicit {
                edges: nine_server_edges(),
            },
            9,
        ),
        uniform: false,
        partition: false,
        reliable_only: true,
        strict_receipt: true,
        allow_rerun_payload_change: false,
        workload_rounds: 1,
        payload_len: 64,
    };
    let setup = cfg.validate().expect("overlay must support f=2");
    assert_eq!(setup.kappa, 3);
    let mut p6 = setup.server(6);
    let mut fx = p6.on_start();
    // Messages from everyone except 0 (lost) and 6 (own, already sent).
    for src in [1, 2, 3, 4, 5, 7, 8] {
        let msg = dualcast_core::protocol::Message {
            source: src,
            epoch: 1,
            round: 1,
            kind: WireRoundKind::Reliable,
            eon: 1,
            payload: dualcast_core::protocol::Payload::synthesize(src, 1, 64),
        };
        fx.extend(p6.handle_wire(src, &Wire::RBroadcast(msg)).unwrap());
    }
    let mut observed = Vec::new();
    for (target, owner) in [(0, 4), (0, 3), (5, 6), (5, 8), (5, 7)] {
        let fnote = FailureNotification {
            target,
            owner,
            eon: 1,
        };
        fx.extend(p6.handle_wire(owner, &Wire::Fail(fnote)).unwrap());
        observed.push(
            p6.tracking_digraph(0)
                .map(|g| g.vertices().iter().copied().collect::<Vec<_>>())
                .unwrap_or_default(),
        );
    }
    assert_eq!(
        observed,
        vec![
            vec![0, 3, 5],
            vec![0, 5],
            vec![0, 5, 7, 8],
            vec![0, 5, 7],
            vec![],
        ],
        "suspicion must shrink to {{0,5}} and then empty"
    );
    // The last notification finished tracking, so the round completed.
    let delivered = fx.iter().find_map(|e| match e {
        dualcast_core::protocol::Effect::Deliver { round, messages, .. } => {
            Some((*round, messages.iter().map(|m| m.source).collect::<Vec<_>>()))
        }
        _ => None,
    });
    let (round, sources) = delivered.expect("server 6 completes the round");
    assert_eq!(round, 1);
    assert_eq!(sources, vec![1, 2, 3, 4, 5, 6, 7, 8], "no message from server 0");

    // The same schedule end-to-end through the simulator.
    let mut sc = base_scenario(9, 3, 1);
    sc.reliable = OverlayFamily::Explicit {
        edges: nine_server_edges(),
    };
    sc.reliable_only = true;
    sc.f = Some(2);
    sc.fail_send = vec![FailAtSend {
        server: 0,
        round: 1,
        keep: BTreeSet::from([5]),
    }];
    sc.fail_recv = vec![FailAtReceive {
        server: 5,
        source: 0,
        round: 1,
    }];
    sc.resolve(0).unwrap();
    let trace = dualcast_core::sim::run(&sc).unwrap();
    assert_eq!(trace.end, EndReason::Completed, "{:?}", trace.end);
    for &s in &trace.live_servers() {
        let d = &trace.logs[s][0];
        assert_eq!(d.round, 1);
        assert!(!d.sources.contains(0), "server {s} delivered the lost message");
        assert!(d.sources.contains(5), "server 5 broadcast before dying");
        assert_eq!(d.count, 8);
    }
    let elapsed = started.elapsed();
    verdict(
        "1-tracking-replay",
        elapsed.as_secs() < 1,
        &format!("suspicion {{0,5}} then empty; round without lost message; {elapsed:?}"),
    );
}

/// Criterion 2: failure-free unreliable rounds move each message exactly
/// n-1 times, and nobody receives a message twice.
#[test]
fn criterion_02_minimal_work() {
    for n in [4usize, 8, 16] {
        for family in [OverlayFamily::Ring, OverlayFamily::BinomialDissemination] {
            let mut sc = base_scenario(n, (n - 1).min(3), 20);
            sc.unreliable = family.clone();
            sc.resolve(0).unwrap();
            let trace = dualcast_core::sim::run(&sc).unwrap();
            assert_eq!(trace.end, EndReason::Completed);
            for round in 1..=20u32 {
                for src in 0..n {
                    let tx = trace
                        .transmissions
                        .get(&(src, 1, round, WireRoundKind::Unreliable))
                        .copied()
                        .unwrap_or(0);
                    assert_eq!(
                        tx,
                        (n - 1) as u64,
                        "{family} n={n}: message ({src}, round {round}) moved {tx} times"
                    );
                }
            }
            // Receive-once: no server sees the same message twice.
            let mut seen = BTreeSet::new();
            for ev in &trace.events {
                if let TraceEventKind::Receive { wire: Wire::Broadcast(m), .. } = &ev.kind {
                    assert!(
                        seen.insert((ev.server, m.source, m.epoch, m.round)),
                        "{family} n={n}: server {} received ({},{},{}) twice",
                        ev.server,
                        m.source,
                        m.epoch,
                        m.round
                    );
                }
            }
        }
    }
    verdict("2-minimal-work", true, "n-1 transmissions per message, receive-once");
}

struct SweepOutcome {
    seed: u64,
    n: usize,
    f: usize,
    crashes: usize,
    end: EndReason,
    reports: Vec<CheckReport>,
}

fn safety_sweep() -> &'static Vec<SweepOutcome> {
    static RESULTS: OnceLock<Vec<SweepOutcome>> = OnceLock::new();
    RESULTS.get_or_init(|| {
        use rayon::prelude::*;
        (0..500u64)
            .into_par_iter()
            .map(|seed| {
                let n = 4 + (seed as usize % 9); // 4..=12
                let f_max = 3.min(n - 2);
                let f = 1 + (seed as usize / 9) % f_max;
                let d = f + 1;
                let crashes = seed as usize % (f + 1);
                let mut sc = base_scenario(n, d, 30);
                sc.unreliable = if seed % 2 == 0 {
                    OverlayFamily::Ring
                } else {
                    OverlayFamily::BinomialDissemination
                };
                sc.f = Some(f);
                sc.seed = seed;
                sc.jitter_us = 25;
                sc.autofail = crashes;
                sc.autofail_by_us = 9_000;
                sc.time_bound_us = 60_000_000;
                sc.resolve(0).unwrap();
                let trace = dualcast_core::sim::run(&sc).unwrap();
                SweepOutcome {
                    seed,
                    n,
                    f,
                    crashes,
                    end: trace.end.clone(),
                    reports: check_all(&trace),
                }
            })
            .collect()
    })
}

/// Criterion 3: 500 seeded scenarios with random crash schedules under a
/// perfect detector show zero safety or proposition violations.
#[test]
fn criterion_03_safety_sweep() {
    let started = Instant::now();
    let results = safety_sweep();
    assert_eq!(results.len(), 500);
    let mut with_crashes = 0;
    for out in results {
        if out.crashes > 0 {
            with_crashes += 1;
        }
        for r in &out.reports {
            let safety = matches!(
                r.property.as_str(),
                "invariant-traps"
                    | "integrity"
                    | "total-order"
                    | "set-agreement"
                    | "same-epoch-delivery"
                    | "receipt-constraints"
                    | "concurrent-states"
            );
            if safety {
                assert!(
                    r.ok(),
                    "seed {} (n={}, f={}, crashes={}): {r}",
                    out.seed,
                    out.n,
                    out.f,
                    out.crashes
                );
            }
        }
    }
    verdict(
        "3-safety-sweep",
        started.elapsed().as_secs() < 300,
        &format!(
            "500 runs ({with_crashes} with crashes), zero violations, {:?}",
            started.elapsed()
        ),
    );
}

/// Criterion 4: the same 500 scenarios satisfy validity and agreement.
#[test]
fn criterion_04_liveness_sweep() {
    let results = safety_sweep();
    for out in results {
        assert_eq!(
            out.end,
            EndReason::Completed,
            "seed {}: liveness requires completion, got {:?}",
            out.seed,
            out.end
        );
        for r in &out.reports {
            if matches!(r.property.as_str(), "validity" | "agreement") {
                assert!(r.ok(), "seed {}: {r}", out.seed);
            }
        }
    }
    verdict("4-liveness-sweep", true, "validity and agreement hold in all 500 runs");
}

/// Criterion 5: a two-group schedule triggers a skip transition; the skipped
/// round is delivered exactly once everywhere.
#[test]
fn criterion_05_skip_transition() {
    // Pass 1: failure-free timing probe.
    let mut probe = base_scenario(5, 3, 12);
    probe.f = Some(1);
    probe.resolve(0).unwrap();
    let t0 = dualcast_core::sim::run(&probe).unwrap();
    assert_eq!(t0.end, EndReason::Completed);
    // Server 3's own round-4 message departing toward 4 opens the stall
    // window on channel 3 -> 4 (everything of round 3 departed earlier).
    let t_stall_open = own_send_depart(&t0, 3, 4, 4).unwrap();
    // Group A = {0,1,2,3} all reach round 5; the last entry plus slack is
    // when the crash lands.
    let t_a5 = (0..4)
        .map(|s| {
            transition_time(&t0, s, |k, to| k == TransitionKind::Tuu && to.round == 5).unwrap()
        })
        .max()
        .unwrap();

    // Pass 2: stall 3 -> 4 for all round-4+ unreliable traffic, crash
    // server 1 while A waits in round 5 and server 4 waits in round 4.
    let mut sc = base_scenario(5, 3, 12);
    sc.f = Some(1);
    sc.spikes = vec![Spike {
        from: 3,
        to: 4,
        kind: Some(dualcast_core::protocol::ChannelKind::Unreliable),
        start: t_stall_open,
        duration: 40_000,
    }];
    sc.fails = vec![(t_a5 + 500, 1)];
    sc.resolve(0).unwrap();
    let trace = dualcast_core::sim::run(&sc).unwrap();
    assert_eq!(trace.end, EndReason::Completed, "{:?}", trace.end);
    let skips = trace.transition_count(TransitionKind::Tsk);
    assert!(skips >= 1, "no skip transition in the crafted schedule");
    // Server 4 skipped the round-3 rerun; round 3 is delivered exactly once
    // by every server, with the full unreliable set.
    for s in trace.live_servers() {
        let hits: Vec<_> = trace.logs[s].iter().filter(|d| d.round == 3).collect();
        assert_eq!(hits.len(), 1, "server {s} delivered round 3 {} times", hits.len());
        assert_eq!(hits[0].count, 5, "round 3 keeps the pre-rollback set");
        assert_eq!(hits[0].epoch, 1);
    }
    assert_reports_ok("criterion 5", &check_all(&trace));
    verdict(
        "5-skip-transition",
        true,
        &format!("tsk count = {skips}, skipped round delivered once everywhere"),
    );
}

fn mean_median_latency(trace: &Trace, lo: u32, hi: u32) -> f64 {
    let s = summarize_window(trace, lo, hi).unwrap();
    s.per_server.iter().map(|p| p.median_latency_us).sum::<f64>() / s.per_server.len() as f64
}

fn round_period(trace: &Trace, lo: u32, hi: u32) -> Result<f64, MetricsError> {
    Ok(summarize_window(trace, lo, hi)?.mean_round_period_us)
}

/// Criterion 6: the analytic model, fed with durations measured from the
/// simulator itself at n=72, is monotone in lambda, matches the failure-free
/// latency at the limit, and the dual engine's round rate dominates the
/// reliable-only engine's.
#[test]
fn criterion_06_analytic_model() {
    let n = 72;
    let mut dual = base_scenario(n, 5, 112);
    dual.unreliable = OverlayFamily::BinomialDissemination;
    dual.payload = 1024;
    dual.trace_level = TraceLevel::Light;
    dual.time_bound_us = 120_000_000;
    dual.resolve(0).unwrap();
    let dual_trace = dualcast_core::sim::run(&dual).unwrap();
    assert_eq!(dual_trace.end, EndReason::Completed);
    let delta_u = round_period(&dual_trace, 10, 110).unwrap();
    let measured_latency = mean_median_latency(&dual_trace, 10, 110);

    let mut rel = dual.clone();
    rel.reliable_only = true;
    rel.resolve(0).unwrap();
    let rel_trace = dualcast_core::sim::run(&rel).unwrap();
    assert_eq!(rel_trace.end, EndReason::Completed);
    let delta_r = round_period(&rel_trace, 10, 110).unwrap();

    assert!(
        0.0 < delta_u && delta_u < delta_r,
        "du={delta_u} dr={delta_r}"
    );
    let model = PerfModel::new(delta_u, delta_r).unwrap();
    let mut last = expected_performance(&model, 3.0).unwrap();
    for lambda in 4..=100 {
        let e = expected_performance(&model, lambda as f64).unwrap();
        assert!(e.latency < last.latency, "latency must decrease in lambda");
        assert!(e.throughput > last.throughput, "throughput must increase in lambda");
        last = e;
    }
    let limit_latency = 2.0 * delta_u;
    let rel_err = (limit_latency - measured_latency).abs() / measured_latency;
    assert!(
        rel_err <= 0.05,
        "limit latency {limit_latency:.1} vs measured {measured_latency:.1} ({:.1}%)",
        rel_err * 100.0
    );

    // Dual-mode round rate dominates reliable-only for smaller deployments.
    for (n, d) in [(8usize, 3usize), (18, 4), (30, 4)] {
        let mut a = base_scenario(n, d, 40);
        a.unreliable = OverlayFamily::BinomialDissemination;
        a.payload = 1024;
        a.resolve(0).unwrap();
        let ta = dualcast_core::sim::run(&a).unwrap();
        let mut b = a.clone();
        b.reliable_only = true;
        b.resolve(0).unwrap();
        let tb = dualcast_core::sim::run(&b).unwrap();
        let pa = round_period(&ta, 5, 35).unwrap();
        let pb = round_period(&tb, 5, 35).unwrap();
        assert!(
            pa <= pb,
            "n={n}: dual round period {pa:.1} must not exceed reliable-only {pb:.1}"
        );
    }
    verdict(
        "6-analytic-model",
        true,
        &format!(
            "du={delta_u:.0}us dr={delta_r:.0}us, monotone, limit within {:.2}%",
            rel_err * 100.0
        ),
    );
}

/// Criterion 7: n=72, four crashes within one simulated second. Each crash
/// produces a fail transition, a completed reliable round, and a return to
/// unreliable mode; dual mode out-delivers reliable-only on the same
/// schedule.
#[test]
fn criterion_07_failure_scenario() {
    let fails: Vec<(SimTime, ServerId)> =
        vec![(150_000, 9), (350_000, 23), (600_000, 41), (850_000, 60)];
    let mut sc = base_scenario(72, 5, 1_800);
    sc.unreliable = OverlayFamily::BinomialDissemination;
    sc.payload = 1024;
    sc.f = Some(4);
    sc.fails = fails.clone();
    sc.trace_level = TraceLevel::Light;
    sc.time_bound_us = 6_000_000;
    sc.resolve(0).unwrap();
    let trace = dualcast_core::sim::run(&sc).unwrap();
    assert_eq!(trace.end, EndReason::Completed, "{:?}", trace.end);

    for &(t_crash, server) in &fails {
        // A fail transition follows the crash within the detection window.
        let window_end = t_crash + 50_000;
        let fail_t = trace
            .events
            .iter()
            .find_map(|ev| match &ev.kind {
                TraceEventKind::Transition { kind, .. }
                    if matches!(kind, TransitionKind::Tur | TransitionKind::Tfr)
                        && ev.time > t_crash
                        && ev.time < window_end =>
                {
                    Some(ev.time)
                }
                _ => None,
            })
            .unwrap_or_else(|| panic!("no fail transition after crash of {server} at {t_crash}"));
        // ... then a completed (delivered) reliable round ...
        let rel_t = trace
            .events
            .iter()
            .find_map(|ev| match &ev.kind {
                TraceEventKind::Deliver { kind: WireRoundKind::Reliable, .. }
                    if ev.time >= fail_t && ev.time < window_end =>
                {
                    Some(ev.time)
                }
                _ => None,
            })
            .unwrap_or_else(|| panic!("no reliable round completed after crash at {t_crash}"));
        // ... and a prompt return to unreliable mode.
        let back_t = trace
            .events
            .iter()
            .find_map(|ev| match &ev.kind {
                TraceEventKind::Transition { kind: TransitionKind::Trf, .. }
                    if ev.time >= rel_t && ev.time < window_end =>
                {
                    Some(ev.time)
                }
                _ => None,
            });
        assert!(
            back_t.is_some(),
            "no return to unreliable mode after the reliable round at {rel_t}"
        );
        assert!(
            trace.removed_after(t_crash, server),
            "crashed server {server} must be removed from the membership"
        );
    }
    assert_reports_ok("criterion 7", &check_safety(&trace));

    let mut rel = sc.clone();
    rel.reliable_only = true;
    rel.rounds = 400;
    rel.resolve(0).unwrap();
    let rel_trace = dualcast_core::sim::run(&rel).unwrap();
    assert_eq!(rel_trace.end, EndReason::Completed);

    let thr = |t: &Trace| {
        let s = summarize_window(t, 10, t.logs[0].last().unwrap().round - 5).unwrap();
        s.mean_throughput_msgs_per_s
    };
    let dual_thr = thr(&trace);
    let rel_thr = thr(&rel_trace);
    assert!(
        dual_thr > rel_thr,
        "dual throughput {dual_thr:.0} must exceed reliable-only {rel_thr:.0}"
    );
    verdict(
        "7-failure-scenario",
        true,
        &format!("4 recoveries; dual {dual_thr:.0} vs reliable-only {rel_thr:.0} msgs/s"),
    );
}

/// Criterion 8: uniformity. With the gate on, adversarial deliver-then-crash
/// schedules never violate uniform agreement/total order (200 seeds); with
/// the gate off, the same schedule exhibits a concrete counterexample.
#[test]
fn criterion_08_uniformity() {
    let crafted = |seed: u64, uniform: bool| -> Trace {
        // Pass 1: find when server 0 enters round 6 and delivers round 5.
        let mut probe = base_scenario(6, 3, 14);
        probe.f = Some(2);
        probe.seed = seed;
        probe.jitter_us = 15;
        probe.resolve(0).unwrap();
        let t0 = dualcast_core::sim::run(&probe).unwrap();
        let t_send6 = own_send_depart(&t0, 0, 1, 6).unwrap();
        let t_deliver5 = deliver_time(&t0, 0, 5).unwrap();
        // Pass 2: stall server 0's round-6 message; it dies the moment it
        // delivers round 5 (with the gate on that moment never comes, so a
        // fallback crash kills it while the others are stuck).
        let mut sc = probe.clone();
        sc.uniform = uniform;
        sc.spikes = vec![Spike {
            from: 0,
            to: 1,
            kind: Some(dualcast_core::protocol::ChannelKind::Unreliable),
            start: t_send6,
            duration: 60_000,
        }];
        sc.fail_deliver = vec![FailAtDeliver { server: 0, round: 5 }];
        sc.fails = vec![(t_deliver5 + 2_500, 0)];
        sc.resolve(0).unwrap();
        dualcast_core::sim::run(&sc).unwrap()
    };

    // Gate off: the crash demonstrably breaks uniformity.
    let bad = crafted(0, false);
    let unif = check_uniformity(&bad);
    assert!(
        unif.iter().any(|r| !r.ok()),
        "gate-off schedule must exhibit a non-uniform counterexample"
    );
    // The victim delivered round 5 from epoch 1 with all six messages; the
    // survivors rerun it reliably without the victim's message.
    let victim = bad.logs[0].iter().find(|d| d.round == 5).unwrap();
    let survivor = bad.logs[1].iter().find(|d| d.round == 5).unwrap();
    assert_eq!(victim.count, 6);
    assert_eq!(survivor.count, 5);

    // Gate on: 200 seeded variants, zero violations.
    use rayon::prelude::*;
    let failures: Vec<String> = (0..200u64)
        .into_par_iter()
        .filter_map(|seed| {
            let t = crafted(seed, true);
            if t.end != EndReason::Completed {
                return Some(format!("seed {seed}: {:?}", t.end));
            }
            for r in check_uniformity(&t).iter().chain(check_safety(&t).iter()) {
                if !r.ok() {
                    return Some(format!("seed {seed}: {r}"));
                }
            }
            None
        })
        .collect();
    assert!(failures.is_empty(), "{failures:?}");
    verdict(
        "8-uniformity",
        true,
        "gate blocks the counterexample; 200 gated runs clean",
    );
}

/// Criterion 9: eventually-perfect detector with a symmetric link stall.
/// The majority side keeps delivering behind the partition gate; the
/// minority self-terminates without delivering ahead.
#[test]
fn criterion_09_partition_mode() {
    let mut sc = base_scenario(5, 4, 40); // complete reliable overlay
    sc.perfect = false;
    sc.partition = true;
    sc.partition_timeout_us = 150_000;
    sc.f = Some(1);
    sc.time_bound_us = 5_000_000;
    // Hard split {0,1,2} | {3,4} for 60 ms from t=5ms: every cross link,
    // every channel class.
    for &a in &[0usize, 1, 2] {
        for &b in &[3usize, 4] {
            for (from, to) in [(a, b), (b, a)] {
                sc.spikes.push(Spike {
                    from,
                    to,
                    kind: None,
                    start: 5_000,
                    duration: 60_000,
                });
            }
        }
    }
    sc.resolve(0).unwrap();
    let trace = dualcast_core::sim::run(&sc).unwrap();
    assert_eq!(trace.end, EndReason::Completed, "{:?}", trace.end);
    // The minority terminated rather than delivering ahead.
    assert!(trace.terminated.contains_key(&3), "server 3 must self-terminate");
    assert!(trace.terminated.contains_key(&4), "server 4 must self-terminate");
    assert_eq!(trace.live_servers(), vec![0, 1, 2]);
    for &s in &[0usize, 1, 2] {
        assert!(trace.logs[s].last().unwrap().round >= 40);
    }
    let part = dualcast_core::analysis::checks::check_partition_safety(&trace);
    assert!(part.ok(), "{part}");
    assert_reports_ok("criterion 9", &check_safety(&trace));
    verdict(
        "9-partition-mode",
        true,
        "majority delivered 40 rounds; minority self-terminated",
    );
}

/// Criterion 10: the max-flow connectivity computation agrees with
/// exhaustive vertex-cut enumeration on every circulant up to n=10.
#[test]
fn criterion_10_connectivity_oracle() {
    fn enumerated(g: &dualcast_core::Digraph) -> usize {
        let verts: Vec<ServerId> = g.vertices().collect();
        let n = verts.len();
        let mut best = n - 1;
        for mask in 1u32..(1 << n) {
            let size = mask.count_ones() as usize;
            if size >= best || size >= n - 1 {
                continue;
            }
            let removed: BTreeSet<ServerId> = (0..n)
                .filter(|i| mask & (1 << i) != 0)
                .map(|i| verts[i])
                .collect();
            if !g.remove_servers(&removed).is_strongly_connected() {
                best = size;
            }
        }
        best
    }
    let mut pairs = 0;
    for n in 2..=10usize {
        for d in 1..n {
            let g = dualcast_core::build_overlay(&DigraphSpec::new(
                OverlayFamily::Circulant { degree: d },
                n,
            ))
            .unwrap();
            let fast = g.vertex_connectivity();
            let slow = enumerated(&g);
            assert_eq!(fast, slow, "circulant({n},{d})");
            assert_eq!(fast, d, "circulant({n},{d})");
            pairs += 1;
        }
    }
    verdict(
        "10-connectivity-oracle",
        true,
        &format!("{pairs} circulants match exhaustive enumeration"),
    );
}

/// Criterion 11: replacing the reliable overlay mid-run. The trace shows the
/// barrier held (no next-eon traffic before every live server entered the
/// transitional round) and at least 20 clean rounds follow the switch.
#[test]
fn criterion_11_eon_transition() {
    let mut sc = base_scenario(7, 3, 45);
    sc.f = Some(2);
    sc.fails = vec![(4_000, 2)];
    sc.eon = Some((1_000, 2, OverlayFamily::Circulant { degree: 3 }));
    sc.time_bound_us = 10_000_000;
    sc.resolve(0).unwrap();
    let trace = dualcast_core::sim::run(&sc).unwrap();
    assert_eq!(trace.end, EndReason::Completed, "{:?}", trace.end);

    let switch_times: Vec<SimTime> = trace
        .events
        .iter()
        .filter_map(|ev| match ev.kind {
            TraceEventKind::EonSwitched { eon: 2 } => Some(ev.time),
            _ => None,
        })
        .collect();
    assert_eq!(
        switch_times.len(),
        trace.live_servers().len(),
        "every live server switches eons"
    );
    let switch = *switch_times.iter().max().unwrap();
    for &s in &trace.live_servers() {
        let after = trace.logs[s].iter().filter(|d| d.time > switch).count();
        assert!(after >= 20, "server {s} delivered only {after} rounds after the switch");
    }
    let barrier = check_eon_barrier(&trace, 2);
    assert!(barrier.ok(), "{barrier}");
    assert_reports_ok("criterion 11", &check_all(&trace));
    verdict(
        "11-eon-transition",
        true,
        &format!("switch at {switch} us, 20+ clean rounds after, barrier held"),
    );
}
