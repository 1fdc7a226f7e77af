//! Line-oriented `key=value` scenario files.
//!
//! ```text
//! # nine servers, two tolerated failures
//! n=9
//! f=2
//! reliable=circulant:3
//! unreliable=binomial
//! fd.hb_us=1000
//! fd.to_us=10000
//! mode=perfect
//! rounds=100
//! payload=1024
//! seed=42
//! latency=sdc
//! fail=12000:4
//! ```
//!
//! `fail=` lines repeat. Extensions beyond the basic keys: `engine=reliable`
//! forces every round onto the reliable overlay, `spike=` injects a link
//! stall, `fail_send=`/`fail_recv=` crash a server in the middle of one
//! broadcast action, `eon=` schedules a reliable-overlay replacement, and
//! `autofail=` draws a random crash schedule from the seed.

use std::collections::BTreeSet;
use std::fmt;

use thiserror::Error;

use crate::fd::{FdConfig, FdMode};
use crate::overlay::{DigraphSpec, OverlayFamily, ServerId};
use crate::protocol::{ChannelKind, SimTime, SystemConfig};
use crate::sim::trace::TraceLevel;

#[derive(Debug, Error)]
#[error("scenario line {line}: {msg}")]
pub struct ScenarioError {
    pub line: usize,
    pub msg: String,
}

fn serr(line: usize, msg: impl Into<String>) -> ScenarioError {
    ScenarioError {
        line,
        msg: msg.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatencyProfile {
    /// Constant 50 us per hop plus serialization.
    Sdc,
    /// Two-tier: 50 us within a site, fixed millisecond-scale between the
    /// five sites.
    Mdc,
}

impl fmt::Display for LatencyProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LatencyProfile::Sdc => write!(f, "sdc"),
            LatencyProfile::Mdc => write!(f, "mdc"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Spike {
    pub from: ServerId,
    pub to: ServerId,
    /// Restrict to one channel class, or all when `None`.
    pub kind: Option<ChannelKind>,
    pub start: SimTime,
    pub duration: SimTime,
}

/// Crash a server the moment it performs the initial send of its own
/// round-`round` message, truncating that send to the `keep` targets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FailAtSend {
    pub server: ServerId,
    pub round: u32,
    pub keep: BTreeSet<ServerId>,
}

/// Crash a server the moment `source`'s round-`round` message reaches it,
/// before it can forward anything.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FailAtReceive {
    pub server: ServerId,
    pub source: ServerId,
    pub round: u32,
}

/// Crash a server immediately after it A-delivers `round`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FailAtDeliver {
    pub server: ServerId,
    pub round: u32,
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub n: usize,
    pub f: Option<usize>,
    pub unreliable: OverlayFamily,
    pub reliable: OverlayFamily,
    pub reliable_only: bool,
    pub fd_hb_us: SimTime,
    pub fd_to_us: SimTime,
    pub perfect: bool,
    pub uniform: bool,
    pub partition: bool,
    pub partition_timeout_us: SimTime,
    pub rounds: u32,
    pub payload: u32,
    pub seed: u64,
    pub latency: LatencyProfile,
    pub jitter_us: SimTime,
    pub time_bound_us: SimTime,
    pub trace_level: TraceLevel,
    pub fails: Vec<(SimTime, ServerId)>,
    pub autofail: usize,
    pub autofail_by_us: SimTime,
    pub fail_send: Vec<FailAtSend>,
    pub fail_recv: Vec<FailAtReceive>,
    pub fail_deliver: Vec<FailAtDeliver>,
    pub spikes: Vec<Spike>,
    /// `(inject_time, transitional_epoch, next_family)`
    pub eon: Option<(SimTime, u32, OverlayFamily)>,
    pub exceeds_f: bool,
    pub allow_rerun_payload_change: bool,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            n: 4,
            f: None,
            unreliable: OverlayFamily::BinomialDissemination,
            reliable: OverlayFamily::Circulant { degree: 2 },
            reliable_only: false,
            fd_hb_us: 1_000,
            fd_to_us: 10_000,
            perfect: true,
            uniform: false,
            partition: false,
            partition_timeout_us: 300_000,
            rounds: 20,
            payload: 256,
            seed: 1,
            latency: LatencyProfile::Sdc,
            jitter_us: 0,
            time_bound_us: 30_000_000,
            trace_level: TraceLevel::Full,
            fails: Vec::new(),
            autofail: 0,
            autofail_by_us: 100_000,
            fail_send: Vec::new(),
            fail_recv: Vec::new(),
            fail_deliver: Vec::new(),
            spikes: Vec::new(),
            eon: None,
            exceeds_f: false,
            allow_rerun_payload_change: false,
        }
    }
}

fn parse_family(v: &str, line: usize) -> Result<OverlayFamily, ScenarioError> {
    let mut parts = v.split(':');
    match parts.next().unwrap_or("") {
        "ring" => Ok(OverlayFamily::Ring),
        "binomial" => Ok(OverlayFamily::BinomialDissemination),
        "complete" => Ok(OverlayFamily::Circulant { degree: usize::MAX }),
        "circulant" => {
            let d = parts
                .next()
                .and_then(|d| d.parse().ok())
                .ok_or_else(|| serr(line, "circulant needs a degree, e.g. circulant:3"))?;
            Ok(OverlayFamily::Circulant { degree: d })
        }
        "edgelist" => {
            let path = parts
                .next()
                .ok_or_else(|| serr(line, "edgelist needs a path"))?;
            let text = std::fs::read_to_string(path)
                .map_err(|e| serr(line, format!("cannot read {path}: {e}")))?;
            let g = crate::overlay::Digraph::from_edge_list(&text)
                .map_err(|e| serr(line, e.to_string()))?;
            Ok(OverlayFamily::Explicit {
                edges: g.edges().collect(),
            })
        }
        other => Err(serr(line, format!("unknown overlay family {other:?}"))),
    }
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Scenario, ScenarioError> {
        let mut sc = Scenario::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| serr(line, "expected key=value"))?;
            sc.apply(key.trim(), value.trim(), line)?;
        }
        sc.resolve(0)?;
        Ok(sc)
    }

    /// Applies a single key, the same way the parser and `--vary` do.
    pub fn apply(&mut self, key: &str, value: &str, line: usize) -> Result<(), ScenarioError> {
        let num = |v: &str| -> Result<u64, ScenarioError> {
            v.parse()
                .map_err(|_| serr(line, format!("bad number {v:?} for {key}")))
        };
        let flag = |v: &str| -> Result<bool, ScenarioError> {
            match v {
                "0" => Ok(false),
                "1" => Ok(true),
                _ => Err(serr(line, format!("flag {key} must be 0 or 1"))),
            }
        };
        match key {
            "n" => self.n = num(value)? as usize,
            "f" => self.f = Some(num(value)? as usize),
            "unreliable" => self.unreliable = parse_family(value, line)?,
            "reliable" => self.reliable = parse_family(value, line)?,
            "engine" => {
                self.reliable_only = match value {
                    "dual" => false,
                    "reliable" => true,
                    _ => return Err(serr(line, "engine must be dual or reliable")),
                }
            }
            "fd.hb_us" => self.fd_hb_us = num(value)?,
            "fd.to_us" => self.fd_to_us = num(value)?,
            "mode" => {
                self.perfect = match value {
                    "perfect" => true,
                    "ep" => false,
                    _ => return Err(serr(line, "mode must be perfect or ep")),
                }
            }
            "uniform" => self.uniform = flag(value)?,
            "partition" => self.partition = flag(value)?,
            "partition_timeout_us" => self.partition_timeout_us = num(value)?,
            "rounds" => self.rounds = num(value)? as u32,
            "payload" => self.payload = num(value)? as u32,
            "seed" => self.seed = num(value)?,
            "latency" => {
                self.latency = match value {
                    "sdc" => LatencyProfile::Sdc,
                    "mdc" => LatencyProfile::Mdc,
                    _ => return Err(serr(line, "latency must be sdc or mdc")),
                }
            }
            "jitter_us" => self.jitter_us = num(value)?,
            "time_bound_us" => self.time_bound_us = num(value)?,
            "trace" => {
                self.trace_level = match value {
                    "full" => TraceLevel::Full,
                    "light" => TraceLevel::Light,
                    _ => return Err(serr(line, "trace must be full or light")),
                }
            }
            "fail" => {
                let (t, s) = value
                    .split_once(':')
                    .ok_or_else(|| serr(line, "fail needs TIME_US:SERVER"))?;
                self.fails.push((num(t)?, num(s)? as ServerId));
            }
            "autofail" => self.autofail = num(value)? as usize,
            "autofail_by_us" => self.autofail_by_us = num(value)?,
            "fail_send" => {
                // SERVER:ROUND[:KEEP1,KEEP2,...]
                let mut parts = value.split(':');
                let server = num(parts.next().unwrap_or(""))? as ServerId;
                let round = num(parts.next().ok_or_else(|| serr(line, "fail_send needs SERVER:ROUND"))?)? as u32;
                let keep = match parts.next() {
                    None | Some("") => BTreeSet::new(),
                    Some(list) => list
                        .split(',')
                        .map(|s| num(s).map(|v| v as ServerId))
                        .collect::<Result<_, _>>()?,
                };
                self.fail_send.push(FailAtSend { server, round, keep });
            }
            "fail_recv" => {
                let parts: Vec<&str> = value.split(':').collect();
                if parts.len() != 3 {
                    return Err(serr(line, "fail_recv needs SERVER:SOURCE:ROUND"));
                }
                self.fail_recv.push(FailAtReceive {
                    server: num(parts[0])? as ServerId,
                    source: num(parts[1])? as ServerId,
                    round: num(parts[2])? as u32,
                });
            }
            "fail_deliver" => {
                let (srv, round) = value
                    .split_once(':')
                    .ok_or_else(|| serr(line, "fail_deliver needs SERVER:ROUND"))?;
                self.fail_deliver.push(FailAtDeliver {
                    server: num(srv)? as ServerId,
                    round: num(round)? as u32,
                });
            }
            "spike" => {
                // FROM:TO:KIND:START_US:DURATION_US  (KIND in u|r|fd|all)
                let parts: Vec<&str> = value.split(':').collect();
                if parts.len() != 5 {
                    return Err(serr(line, "spike needs FROM:TO:KIND:START_US:DURATION_US"));
                }
                let kind = match parts[2] {
                    "u" => Some(ChannelKind::Unreliable),
                    "r" => Some(ChannelKind::Reliable),
                    "fd" => Some(ChannelKind::Fd),
                    "all" => None,
                    _ => return Err(serr(line, "spike kind must be u, r, fd, or all")),
                };
                self.spikes.push(Spike {
                    from: num(parts[0])? as ServerId,
                    to: num(parts[1])? as ServerId,
                    kind,
                    start: num(parts[3])?,
                    duration: num(parts[4])?,
                });
            }
            "eon" => {
                // TIME_US:EPOCH:FAMILY
                let parts: Vec<&str> = value.splitn(3, ':').collect();
                if parts.len() != 3 {
                    return Err(serr(line, "eon needs TIME_US:EPOCH:FAMILY"));
                }
                self.eon = Some((
                    num(parts[0])?,
                    num(parts[1])? as u32,
                    parse_family(parts[2], line)?,
                ));
            }
            "exceeds_f" => self.exceeds_f = flag(value)?,
            "rerun_relax" => self.allow_rerun_payload_change = flag(value)?,
            other => return Err(serr(line, format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Post-parse fixups and validation that need the full picture.
    pub fn resolve(&mut self, line: usize) -> Result<(), ScenarioError> {
        if self.n < 2 {
            return Err(serr(line, "n must be at least 2"));
        }
        if self.rounds < 1 {
            return Err(serr(line, "rounds must be at least 1"));
        }
        if let OverlayFamily::Circulant { degree } = self.reliable {
            if degree == usize::MAX {
                self.reliable = OverlayFamily::Circulant { degree: self.n - 1 };
            }
        }
        if let OverlayFamily::Circulant { degree } = self.unreliable {
            if degree == usize::MAX {
                self.unreliable = OverlayFamily::Circulant { degree: self.n - 1 };
            }
        }
        if self.fd_to_us <= 2 * self.fd_hb_us {
            return Err(serr(line, "fd.to_us must exceed twice fd.hb_us"));
        }
        for sp in &self.spikes {
            if matches!(sp.kind, Some(ChannelKind::Fd) | None) && self.perfect {
                return Err(serr(
                    line,
                    "spikes on failure-detector channels need mode=ep",
                ));
            }
        }
        let mut crash_targets: std::collections::BTreeSet<ServerId> =
            self.fails.iter().map(|&(_, s)| s).collect();
        crash_targets.extend(self.fail_send.iter().map(|d| d.server));
        crash_targets.extend(self.fail_recv.iter().map(|d| d.server));
        crash_targets.extend(self.fail_deliver.iter().map(|d| d.server));
        let injected = crash_targets.len() + self.autofail;
        if let Some(f) = self.f {
            if injected > f && !self.exceeds_f {
                return Err(serr(
                    line,
                    format!("{injected} injected failures exceed f={f}; set exceeds_f=1 to force"),
                ));
            }
        }
        for &(_, s) in &self.fails {
            if s >= self.n {
                return Err(serr(line, format!("fail target {s} out of range")));
            }
        }
        Ok(())
    }

    /// The effective failure budget: explicit, or the largest the reliable
    /// overlay supports.
    pub fn effective_f(&self, kappa: usize) -> usize {
        self.f.unwrap_or_else(|| kappa.saturating_sub(1))
    }

    pub fn system_config(&self, f: usize) -> SystemConfig {
        SystemConfig {
            n: self.n,
            f,
            unreliable: DigraphSpec::new(self.unreliable.clone(), self.n),
            reliable: DigraphSpec::new(self.reliable.clone(), self.n),
            uniform: self.uniform,
            partition: self.partition,
            reliable_only: self.reliable_only,
            strict_receipt: self.perfect,
            allow_rerun_payload_change: self.allow_rerun_payload_change,
            workload_rounds: self.rounds,
            payload_len: self.payload,
        }
    }

    pub fn fd_config(&self) -> FdConfig {
        FdConfig {
            heartbeat_period: self.fd_hb_us,
            timeout: self.fd_to_us,
            mode: if self.perfect {
                FdMode::Perfect
            } else {
                FdMode::EventuallyPerfect
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_the_documented_example() {
        let text = "\
# nine servers
n=9
f=2
reliable=circulant:3
unreliable=binomial
fd.hb_us=1000
fd.to_us=10000
mode=perfect
rounds=100
payload=1024
seed=42
latency=sdc
fail=12000:4
";
        let sc = Scenario::parse(text).unwrap();
        assert_eq!(sc.n, 9);
        assert_eq!(sc.f, Some(2));
        assert_eq!(sc.reliable, OverlayFamily::Circulant { degree: 3 });
        assert_eq!(sc.fails, vec![(12_000, 4)]);
    }

    #[test]
    fn bad_key_reports_line_number() {
        let e = Scenario::parse("n=4\nbogus=1\n").unwrap_err();
        assert_eq!(e.line, 2);
    }

    #[test]
    fn too_many_failures_need_the_marker() {
        let base = "n=4\nf=1\nreliable=circulant:2\nfail=1000:0\nfail=2000:1\n";
        assert!(Scenario::parse(base).is_err());
        let forced = format!("{base}exceeds_f=1\n");
        assert!(Scenario::parse(&forced).is_ok());
    }

    #[test]
    fn complete_family_resolves_to_full_degree() {
        let sc = Scenario::parse("n=5\nreliable=complete\nf=2\n").unwrap();
        assert_eq!(sc.reliable, OverlayFamily::Circulant { degree: 4 });
    }
}
