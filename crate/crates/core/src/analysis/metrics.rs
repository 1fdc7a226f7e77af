//! Latency/throughput extraction from traces.
//!
//! Latency of a message is the span from its source's first A-broadcast of
//! the round to that source A-delivering the round. The measuring window
//! follows the usual warmup discipline: rounds 11..=110, i.e. between every
//! server having delivered 10n and 110n messages, giving 100 own-message
//! samples per server. The median is reported with a nonparametric 95%
//! interval from binomial order statistics.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::overlay::ServerId;
use crate::protocol::{SimTime, TransitionKind, WireRoundKind};
use crate::sim::trace::Trace;

pub const WINDOW_LO_ROUND: u32 = 10;
pub const WINDOW_HI_ROUND: u32 = 110;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("measuring window needs rounds {lo}..={hi}, trace only reaches {reached}")]
    WindowNotReached { lo: u32, hi: u32, reached: u32 },
    #[error("window {lo}..={hi} is empty")]
    EmptyWindow { lo: u32, hi: u32 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerMetrics {
    pub server: ServerId,
    pub median_latency_us: f64,
    pub ci_lo_us: f64,
    pub ci_hi_us: f64,
    pub throughput_msgs_per_s: f64,
    /// Rounds delivered inside the window.
    pub rounds: u32,
    /// Network transmissions of this server's own windowed messages.
    pub transmissions: u64,
}

#[derive(Debug, Clone)]
pub struct Summary {
    pub window: (u32, u32),
    pub window_span_us: (SimTime, SimTime),
    pub per_server: Vec<ServerMetrics>,
    pub transition_histogram: BTreeMap<TransitionKind, u64>,
    /// Mean time between consecutive round deliveries inside the window,
    /// averaged over live servers.
    pub mean_round_period_us: f64,
    /// Mean per-server delivered-message throughput.
    pub mean_throughput_msgs_per_s: f64,
}

impl Summary {
    pub fn csv(&self) -> String {
        let mut out =
            String::from("server,median_latency_us,ci_lo,ci_hi,throughput_msgs_per_s,rounds,transmissions\n");
        for m in &self.per_server {
            out.push_str(&format!(
                "{},{:.1},{:.1},{:.1},{:.1},{},{}\n",
                m.server,
                m.median_latency_us,
                m.ci_lo_us,
                m.ci_hi_us,
                m.throughput_msgs_per_s,
                m.rounds,
                m.transmissions
            ));
        }
        out
    }
}

/// Order-statistic bounds for the median at ~95% confidence: ranks
/// `n/2 -+ 1.96*sqrt(n)/2` (clamped), 1-based.
fn median_with_ci(sorted: &[f64]) -> (f64, f64, f64) {
    let n = sorted.len();
    debug_assert!(n > 0);
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    };
    let half_width = 1.96 * (n as f64).sqrt() / 2.0;
    let lo = ((n as f64 / 2.0 - half_width).floor().max(0.0)) as usize;
    let hi = (((n as f64 / 2.0 + half_width).ceil()) as usize).min(n - 1);
    (median, sorted[lo], sorted[hi])
}

/// Metrics over the standard warmup window.
pub fn summarize(trace: &Trace) -> Result<Summary, MetricsError> {
    summarize_window(trace, WINDOW_LO_ROUND, WINDOW_HI_ROUND)
}

/// Metrics over rounds `lo+1..=hi` (round `lo` closes the warmup).
pub fn summarize_window(trace: &Trace, lo: u32, hi: u32) -> Result<Summary, MetricsError> {
    if hi <= lo {
        return Err(MetricsError::EmptyWindow { lo, hi });
    }
    let live = trace.live_servers();
    let mut reached = u32::MAX;
    for &s in &live {
        let last = trace.logs[s].last().map_or(0, |d| d.round);
        reached = reached.min(last);
    }
    if live.is_empty() || reached < hi {
        return Err(MetricsError::WindowNotReached {
            lo,
            hi,
            reached: if reached == u32::MAX { 0 } else { reached },
        });
    }

    // Common window: opens when the last server closes round `lo`, closes
    // when the last server delivers round `hi`.
    let mut t1: SimTime = 0;
    let mut t2: SimTime = 0;
    for &s in &live {
        for d in &trace.logs[s] {
            if d.round == lo {
                t1 = t1.max(d.time);
            }
            if d.round == hi {
                t2 = t2.max(d.time);
            }
        }
    }

    let mut per_server = Vec::new();
    let mut period_sum = 0.0;
    let mut period_count = 0u64;
    let mut throughput_sum = 0.0;
    for &s in &live {
        let mut latencies = Vec::new();
        let mut transmissions = 0u64;
        let mut rounds_in_window = 0u32;
        let mut msgs_in_span = 0u64;
        let mut prev_time: Option<SimTime> = None;
        for d in &trace.logs[s] {
            if d.round > lo && d.round <= hi {
                rounds_in_window += 1;
                if let Some(&(t_bcast, _, _)) = trace.own_broadcasts.get(&(s, d.round)) {
                    latencies.push(d.time.saturating_sub(t_bcast) as f64);
                }
                // All reruns of one round carry the same payload; transmission
                // counts accumulate across epochs under the same round.
                transmissions += trace
                    .transmissions
                    .iter()
                    .filter(|(&(src, _, r, _), _)| src == s && r == d.round)
                    .map(|(_, &c)| c)
                    .sum::<u64>();
                if let Some(p) = prev_time {
                    period_sum += (d.time - p) as f64;
                    period_count += 1;
                }
                prev_time = Some(d.time);
            }
            if d.time > t1 && d.time <= t2 {
                msgs_in_span += d.count as u64;
            }
        }
        latencies.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let (median, ci_lo, ci_hi) = if latencies.is_empty() {
            (f64::NAN, f64::NAN, f64::NAN)
        } else {
            median_with_ci(&latencies)
        };
        let span_s = (t2 - t1) as f64 / 1e6;
        let throughput = if span_s > 0.0 {
            msgs_in_span as f64 / span_s
        } else {
            f64::NAN
        };
        throughput_sum += throughput;
        per_server.push(ServerMetrics {
            server: s,
            median_latency_us: median,
            ci_lo_us: ci_lo,
            ci_hi_us: ci_hi,
            throughput_msgs_per_s: throughput,
            rounds: rounds_in_window,
            transmissions,
        });
    }

    Ok(Summary {
        window: (lo, hi),
        window_span_us: (t1, t2),
        per_server,
        transition_histogram: trace.transitions.clone(),
        mean_round_period_us: if period_count > 0 {
            period_sum / period_count as f64
        } else {
            f64::NAN
        },
        mean_throughput_msgs_per_s: if live.is_empty() {
            f64::NAN
        } else {
            throughput_sum / live.len() as f64
        },
    })
}

/// Total transmissions of one message identity across the run.
pub fn message_transmissions(
    trace: &Trace,
    source: ServerId,
    epoch: u32,
    round: u32,
    kind: WireRoundKind,
) -> u64 {
    trace
        .transmissions
        .get(&(source, epoch, round, kind))
        .copied()
        .unwrap_or(0)
}
