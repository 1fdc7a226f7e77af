//! Construction, mutation, and analysis of the overlay digraphs.
//!
//! The engine runs on two overlays: an unreliable digraph `G_U` with
//! vertex-connectivity 1 that carries failure-free rounds with minimal work,
//! and a reliable digraph `G_R` with vertex-connectivity above the failure
//! budget that carries reliable rounds, failure notifications, and heartbeats.
//! Both are plain successor-list digraphs; the unreliable overlay additionally
//! carries a per-source forwarding rule so dissemination trees can be rebuilt
//! deterministically over any survivor set.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use thiserror::Error;

/// Server identifier. Servers are numbered densely from zero at bootstrap;
/// the numbering survives removals (survivor sets are sparse subsets).
pub type ServerId = usize;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum OverlayError {
    #[error("invalid overlay spec: {0}")]
    InvalidSpec(String),
    #[error("edge list parse error at line {line}: {msg}")]
    EdgeListParse { line: usize, msg: String },
}

/// Directed graph with deterministically ordered successor lists.
///
/// Every vertex appears as a key, even when it has no successors, so the
/// vertex set is always explicit. No self-loops, no duplicate edges.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Digraph {
    succ: BTreeMap<ServerId, BTreeSet<ServerId>>,
}

impl Digraph {
    pub fn new(vertices: impl IntoIterator<Item = ServerId>) -> Self {
        Digraph {
            succ: vertices.into_iter().map(|v| (v, BTreeSet::new())).collect(),
        }
    }

    pub fn add_edge(&mut self, from: ServerId, to: ServerId) {
        if from == to {
            return;
        }
        self.succ.entry(from).or_default().insert(to);
        self.succ.entry(to).or_default();
    }

    pub fn vertex_count(&self) -> usize {
        self.succ.len()
    }

    pub fn edge_count(&self) -> usize {
        self.succ.values().map(|s| s.len()).sum()
    }

    pub fn contains(&self, v: ServerId) -> bool {
        self.succ.contains_key(&v)
    }

    pub fn vertices(&self) -> impl Iterator<Item = ServerId> + '_ {
        self.succ.keys().copied()
    }

    pub fn vertex_set(&self) -> BTreeSet<ServerId> {
        self.succ.keys().copied().collect()
    }

    /// Successors in ascending id order. Empty for unknown vertices.
    pub fn successors(&self, v: ServerId) -> impl Iterator<Item = ServerId> + '_ {
        self.succ.get(&v).into_iter().flatten().copied()
    }

    pub fn has_edge(&self, from: ServerId, to: ServerId) -> bool {
        self.succ.get(&from).is_some_and(|s| s.contains(&to))
    }

    pub fn predecessors(&self, v: ServerId) -> Vec<ServerId> {
        self.succ
            .iter()
            .filter(|(_, s)| s.contains(&v))
            .map(|(&u, _)| u)
            .collect()
    }

    pub fn edges(&self) -> impl Iterator<Item = (ServerId, ServerId)> + '_ {
        self.succ
            .iter()
            .flat_map(|(&u, s)| s.iter().map(move |&v| (u, v)))
    }

    /// Every edge reversed; vertex set unchanged.
    pub fn transpose(&self) -> Digraph {
        let mut t = Digraph::new(self.vertices());
        for (u, v) in self.edges() {
            t.add_edge(v, u);
        }
        t
    }

    /// Deletes the given vertices and all incident edges.
    pub fn remove_servers(&self, removed: &BTreeSet<ServerId>) -> Digraph {
        let mut g = Digraph {
            succ: BTreeMap::new(),
        };
        for (&u, succs) in &self.succ {
            if removed.contains(&u) {
                continue;
            }
            g.succ.insert(
                u,
                succs
                    .iter()
                    .copied()
                    .filter(|v| !removed.contains(v))
                    .collect(),
            );
        }
        g
    }

    pub fn is_complete(&self) -> bool {
        let n = self.vertex_count();
        n > 0 && self.succ.values().all(|s| s.len() == n - 1)
    }

    /// Vertices reachable from `start`, including `start` itself.
    pub fn reachable_from(&self, start: ServerId) -> BTreeSet<ServerId> {
        let mut seen = BTreeSet::new();
        if !self.contains(start) {
            return seen;
        }
        let mut queue = VecDeque::from([start]);
        seen.insert(start);
        while let Some(u) = queue.pop_front() {
            for v in self.successors(u) {
                if seen.insert(v) {
                    queue.push_back(v);
                }
            }
        }
        seen
    }

    pub fn is_strongly_connected(&self) -> bool {
        let n = self.vertex_count();
        if n <= 1 {
            return true;
        }
        let start = *self.succ.keys().next().unwrap();
        self.reachable_from(start).len() == n && self.transpose().reachable_from(start).len() == n
    }

    /// Serializes as one `u v` pair per line.
    pub fn to_edge_list(&self) -> String {
        let mut out = String::new();
        out.push_str("# directed edge list: one `from to` pair per line\n");
        for v in self.vertices() {
            if self.succ[&v].is_empty() && self.predecessors(v).is_empty() {
                out.push_str(&format!("# isolated {v}\n"));
            }
        }
        for (u, v) in self.edges() {
            out.push_str(&format!("{u} {v}\n"));
        }
        out
    }

    /// Parses the `to_edge_list` format. Lines starting with `#` are comments.
    pub fn from_edge_list(text: &str) -> Result<Digraph, OverlayError> {
        let mut g = Digraph {
            succ: BTreeMap::new(),
        };
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let mut parts = content.split_whitespace();
            let parse = |tok: Option<&str>| -> Result<ServerId, OverlayError> {
                tok.ok_or_else(|| OverlayError::EdgeListParse {
                    line,
                    msg: "expected `from to`".into(),
                })?
                .parse()
                .map_err(|e| OverlayError::EdgeListParse {
                    line,
                    msg: format!("bad server id: {e}"),
                })
            };
            let from = parse(parts.next())?;
            let to = parse(parts.next())?;
            if parts.next().is_some() {
                return Err(OverlayError::EdgeListParse {
                    line,
                    msg: "trailing tokens".into(),
                });
            }
            if from == to {
                return Err(OverlayError::EdgeListParse {
                    line,
                    msg: "self-loop".into(),
                });
            }
            g.add_edge(from, to);
        }
        Ok(g)
    }

    /// Minimum number of vertices whose removal disconnects the digraph,
    /// or `n - 1` for complete digraphs.
    ///
    /// Computed via max-flow between vertex pairs with vertex splitting
    /// (each internal vertex becomes an in/out pair joined by a unit-capacity
    /// edge). Pairs joined by a direct edge impose no constraint and are
    /// skipped. All ordered pairs are examined: fixing a single source is
    /// not sound when that vertex sits in every minimum cut.
    pub fn vertex_connectivity(&self) -> usize {
        let verts: Vec<ServerId> = self.vertices().collect();
        let n = verts.len();
        if n <= 1 {
            return 0;
        }
        let mut best = n - 1;
        for &s in &verts {
            for &t in &verts {
                if s == t || self.has_edge(s, t) {
                    continue;
                }
                let flow = self.split_vertex_max_flow(s, t, best);
                best = best.min(flow);
                if best == 0 {
                    return 0;
                }
            }
        }
        best
    }

    /// Unit-capacity max flow from `s` to `t` over the split graph, stopping
    /// early once the flow reaches `cap`.
    fn split_vertex_max_flow(&self, s: ServerId, t: ServerId, cap: usize) -> usize {
        // Node encoding: for vertex index i, in-node = 2i, out-node = 2i + 1.
        let verts: Vec<ServerId> = self.vertices().collect();
        let index: BTreeMap<ServerId, usize> = verts.iter().enumerate().map(|(i, &v)| (v, i)).collect();
        let nn = verts.len() * 2;
        // Adjacency with residual capacities; edge ids paired with reverse.
        let mut adj: Vec<Vec<usize>> = vec![Vec::new(); nn];
        let mut to: Vec<usize> = Vec::new();
        let mut capacity: Vec<i32> = Vec::new();
        let mut add = |adj: &mut Vec<Vec<usize>>, u: usize, v: usize, c: i32| {
            adj[u].push(to.len());
            to.push(v);
            capacity.push(c);
            adj[v].push(to.len());
            to.push(u);
            capacity.push(0);
        };
        const INF: i32 = i32::MAX / 2;
        for (i, &v) in verts.iter().enumerate() {
            let c = if v == s || v == t { INF } else { 1 };
            add(&mut adj, 2 * i, 2 * i + 1, c);
        }
        for (u, v) in self.edges() {
            add(&mut adj, 2 * index[&u] + 1, 2 * index[&v], INF);
        }
        let (src, dst) = (2 * index[&s] + 1, 2 * index[&t]);
        let mut flow = 0usize;
        while flow < cap {
            // BFS for an augmenting path; unit capacities make each pass cheap.
            let mut prev_edge = vec![usize::MAX; nn];
            let mut visited = vec![false; nn];
            visited[src] = true;
            let mut queue = VecDeque::from([src]);
            'bfs: while let Some(u) = queue.pop_front() {
                for &e in &adj[u] {
                    let v = to[e];
                    if !visited[v] && capacity[e] > 0 {
                        visited[v] = true;
                        prev_edge[v] = e;
                        if v == dst {
                            break 'bfs;
                        }
                        queue.push_back(v);
                    }
                }
            }
            if !visited[dst] {
                break;
            }
            let mut v = dst;
            while v != src {
                let e = prev_edge[v];
                capacity[e] -= 1;
                capacity[e ^ 1] += 1;
                v = to[e ^ 1];
            }
            flow += 1;
        }
        flow
    }
}

impl fmt::Display for Digraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "digraph(n={}, m={})", self.vertex_count(), self.edge_count())
    }
}

/// Overlay family. Ring and binomial dissemination yield connectivity-1
/// digraphs for the unreliable mode; circulant yields connectivity `d` for
/// the reliable mode; an explicit edge list admits externally constructed
/// digraphs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OverlayFamily {
    Ring,
    BinomialDissemination,
    Circulant { degree: usize },
    Explicit { edges: Vec<(ServerId, ServerId)> },
}

impl fmt::Display for OverlayFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OverlayFamily::Ring => write!(f, "ring"),
            OverlayFamily::BinomialDissemination => write!(f, "binomial"),
            OverlayFamily::Circulant { degree } => write!(f, "circulant:{degree}"),
            OverlayFamily::Explicit { .. } => write!(f, "explicit"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DigraphSpec {
    pub family: OverlayFamily,
    pub n: usize,
}

impl DigraphSpec {
    pub fn new(family: OverlayFamily, n: usize) -> Self {
        DigraphSpec { family, n }
    }

    pub fn validate(&self) -> Result<(), OverlayError> {
        if self.n < 2 {
            return Err(OverlayError::InvalidSpec(format!(
                "need at least 2 servers, got {}",
                self.n
            )));
        }
        if let OverlayFamily::Circulant { degree } = self.family {
            if degree < 1 || degree >= self.n {
                return Err(OverlayError::InvalidSpec(format!(
                    "circulant degree {} out of range for n={}",
                    degree, self.n
                )));
            }
        }
        if let OverlayFamily::Explicit { edges } = &self.family {
            for &(u, v) in edges {
                if u == v || u >= self.n || v >= self.n {
                    return Err(OverlayError::InvalidSpec(format!(
                        "explicit edge ({u},{v}) invalid for n={}",
                        self.n
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Builds the requested family over servers `0..n-1`.
pub fn build_overlay(spec: &DigraphSpec) -> Result<Digraph, OverlayError> {
    spec.validate()?;
    Ok(build_over(&spec.family, &(0..spec.n).collect::<Vec<_>>()))
}

/// Builds a family over an arbitrary ordered member list. Positions in the
/// list, not raw ids, drive the ring/circulant/binomial structure, so the
/// construction is stable under removals.
fn build_over(family: &OverlayFamily, members: &[ServerId]) -> Digraph {
    let n = members.len();
    let mut g = Digraph::new(members.iter().copied());
    match family {
        OverlayFamily::Ring => {
            for i in 0..n {
                if n > 1 {
                    g.add_edge(members[i], members[(i + 1) % n]);
                }
            }
        }
        OverlayFamily::Circulant { degree } => {
            let d = (*degree).min(n.saturating_sub(1));
            for i in 0..n {
                for k in 1..=d {
                    g.add_edge(members[i], members[(i + k) % n]);
                }
            }
        }
        OverlayFamily::BinomialDissemination => {
            // Union of the per-source binomial trees; forwarding uses the
            // per-source rule, the union digraph backs connectivity checks.
            for src_pos in 0..n {
                for rel in 0..n {
                    for child in binomial_children(rel, n) {
                        g.add_edge(
                            members[(src_pos + rel) % n],
                            members[(src_pos + child) % n],
                        );
                    }
                }
            }
        }
        OverlayFamily::Explicit { edges } => {
            for &(u, v) in edges {
                g.add_edge(u, v);
            }
        }
    }
    g
}

/// Children of relative rank `rel` in a binomial broadcast tree over `n`
/// ranks rooted at 0: rank k sends to k + 2^j for every j strictly above
/// k's highest set bit (all j >= 0 for the root).
fn binomial_children(rel: usize, n: usize) -> Vec<usize> {
    let mut j = if rel == 0 {
        0
    } else {
        usize::BITS - rel.leading_zeros()
    };
    let mut out = Vec::new();
    loop {
        let child = rel + (1usize << j);
        if child >= n {
            break;
        }
        out.push(child);
        j += 1;
    }
    out
}

/// The unreliable overlay: a digraph plus the per-source forwarding rule
/// needed to rebuild dissemination deterministically over survivor sets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnreliableOverlay {
    family: OverlayFamily,
    members: Vec<ServerId>,
    graph: Digraph,
}

impl UnreliableOverlay {
    pub fn build(spec: &DigraphSpec) -> Result<Self, OverlayError> {
        spec.validate()?;
        Ok(Self::over(spec.family.clone(), (0..spec.n).collect()))
    }

    fn over(family: OverlayFamily, members: Vec<ServerId>) -> Self {
        let graph = build_over(&family, &members);
        UnreliableOverlay {
            family,
            members,
            graph,
        }
    }

    /// Deterministic re-derivation of the family over the survivor set, so
    /// connectivity is preserved rather than patched.
    pub fn rebuild(&self, survivors: &BTreeSet<ServerId>) -> Self {
        let members: Vec<ServerId> = self
            .members
            .iter()
            .copied()
            .filter(|m| survivors.contains(m))
            .collect();
        Self::over(self.family.clone(), members)
    }

    pub fn graph(&self) -> &Digraph {
        &self.graph
    }

    pub fn members(&self) -> &[ServerId] {
        &self.members
    }

    pub fn member_count(&self) -> usize {
        self.members.len()
    }

    pub fn contains(&self, v: ServerId) -> bool {
        self.members.binary_search(&v).is_ok()
    }

    fn position(&self, v: ServerId) -> Option<usize> {
        self.members.binary_search(&v).ok()
    }

    /// Where `relay` forwards a message originated by `source`; when the
    /// relay is the source itself this is the initial dissemination fan-out.
    ///
    /// Ring: each message travels once around, stopping at the source's
    /// predecessor, so every server sends and receives it at most once.
    /// Binomial: the relay sends to its children in the source-rooted tree.
    /// Circulant/explicit: flood to all successors the source cannot be,
    /// deduplicated by the caller's receive-once bookkeeping.
    pub fn forward_targets(&self, source: ServerId, relay: ServerId) -> Vec<ServerId> {
        let n = self.members.len();
        if n <= 1 {
            return Vec::new();
        }
        let (Some(src_pos), Some(rel_pos)) = (self.position(source), self.position(relay)) else {
            return Vec::new();
        };
        match &self.family {
            OverlayFamily::Ring => {
                let next = (rel_pos + 1) % n;
                if next == src_pos {
                    Vec::new()
                } else {
                    vec![self.members[next]]
                }
            }
            OverlayFamily::BinomialDissemination => {
                let rel = (n + rel_pos - src_pos) % n;
                binomial_children(rel, n)
                    .into_iter()
                    .map(|c| self.members[(src_pos + c) % n])
                    .collect()
            }
            OverlayFamily::Circulant { .. } | OverlayFamily::Explicit { .. } => self
                .graph
                .successors(relay)
                .filter(|&v| v != source)
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn circulant(n: usize, d: usize) -> Digraph {
        build_overlay(&DigraphSpec::new(OverlayFamily::Circulant { degree: d }, n)).unwrap()
    }

    /// Brute-force connectivity oracle: smallest vertex subset whose removal
    /// breaks strong connectivity, found by exhaustive enumeration of all
    /// subsets (bitmask walk, so only suitable for n <= ~16).
    fn connectivity_by_enumeration(g: &Digraph) -> usize {
        let verts: Vec<ServerId> = g.vertices().collect();
        let n = verts.len();
        if n <= 1 {
            return 0;
        }
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

    #[test]
    fn ring_of_three() {
        let g = build_overlay(&DigraphSpec::new(OverlayFamily::Ring, 3)).unwrap();
        let edges: Vec<_> = g.edges().collect();
        assert_eq!(edges, vec![(0, 1), (1, 2), (2, 0)]);
    }

    #[test]
    fn circulant_nine_three_has_connectivity_three() {
        let g = circulant(9, 3);
        for v in g.vertices() {
            assert_eq!(g.successors(v).count(), 3);
        }
        assert_eq!(g.vertex_connectivity(), 3);
        assert_eq!(connectivity_by_enumeration(&g), 3);
    }

    #[test]
    fn circulant_degree_n_minus_one_is_complete() {
        let g = circulant(5, 4);
        assert!(g.is_complete());
        assert_eq!(g.vertex_connectivity(), 4);
    }

    #[test]
    fn ring_connectivity_is_one_and_complete_is_n_minus_one() {
        let ring = build_overlay(&DigraphSpec::new(OverlayFamily::Ring, 4)).unwrap();
        assert_eq!(ring.vertex_connectivity(), 1);
        let k4 = circulant(4, 3);
        assert_eq!(k4.vertex_connectivity(), 3);
    }

    #[test]
    fn connectivity_matches_enumeration_on_small_circulants() {
        for n in 2..=10 {
            for d in 1..n {
                let g = circulant(n, d);
                let fast = g.vertex_connectivity();
                let slow = connectivity_by_enumeration(&g);
                assert_eq!(fast, slow, "circulant({n},{d})");
                assert_eq!(fast, d, "circulant({n},{d}) should have connectivity d");
            }
        }
    }

    #[test]
    fn connectivity_handles_cut_vertex_adjacent_to_all() {
        // Two triangles sharing vertex 2; removing vertex 2 disconnects.
        let mut g = Digraph::new(0..5);
        for (u, v) in [(0, 1), (1, 0), (0, 2), (2, 0), (1, 2), (2, 1)] {
            g.add_edge(u, v);
        }
        for (u, v) in [(3, 4), (4, 3), (3, 2), (2, 3), (4, 2), (2, 4)] {
            g.add_edge(u, v);
        }
        assert_eq!(g.vertex_connectivity(), 1);
        assert_eq!(connectivity_by_enumeration(&g), 1);
    }

    #[test]
    fn transpose_reverses_single_edge_and_cycles() {
        let mut g = Digraph::new(0..2);
        g.add_edge(0, 1);
        assert_eq!(g.transpose().edges().collect::<Vec<_>>(), vec![(1, 0)]);

        let ring = build_overlay(&DigraphSpec::new(OverlayFamily::Ring, 3)).unwrap();
        let t = ring.transpose();
        assert_eq!(t.edges().collect::<Vec<_>>(), vec![(0, 2), (1, 0), (2, 1)]);
    }

    #[test]
    fn remove_and_rebuild_ring_over_survivors() {
        let u = UnreliableOverlay::build(&DigraphSpec::new(OverlayFamily::Ring, 4)).unwrap();
        let survivors: BTreeSet<ServerId> = [0, 1, 3].into_iter().collect();
        let rebuilt = u.rebuild(&survivors);
        let edges: Vec<_> = rebuilt.graph().edges().collect();
        assert_eq!(edges, vec![(0, 1), (1, 3), (3, 0)]);
    }

    #[test]
    fn remove_nothing_is_identity() {
        let g = circulant(9, 3);
        assert_eq!(g.remove_servers(&BTreeSet::new()), g);
    }

    #[test]
    fn rebuilt_binomial_reaches_every_survivor_from_every_source() {
        let u = UnreliableOverlay::build(&DigraphSpec::new(OverlayFamily::BinomialDissemination, 8))
            .unwrap();
        let survivors: BTreeSet<ServerId> = [0, 1, 2, 4, 6, 7].into_iter().collect();
        let rebuilt = u.rebuild(&survivors);
        for &src in rebuilt.members() {
            // Walk the forwarding rule as the dissemination would.
            let mut seen = BTreeSet::from([src]);
            let mut queue = VecDeque::from([src]);
            while let Some(relay) = queue.pop_front() {
                for t in rebuilt.forward_targets(src, relay) {
                    assert!(seen.insert(t), "duplicate receive of {src}'s message at {t}");
                    queue.push_back(t);
                }
            }
            assert_eq!(seen, survivors, "source {src} must reach all survivors");
        }
    }

    #[test]
    fn binomial_tree_transmissions_are_n_minus_one() {
        for n in [2usize, 4, 8, 16, 9, 13] {
            let u = UnreliableOverlay::build(&DigraphSpec::new(
                OverlayFamily::BinomialDissemination,
                n,
            ))
            .unwrap();
            let mut sends = 0;
            let mut queue = VecDeque::from([0]);
            while let Some(relay) = queue.pop_front() {
                for t in u.forward_targets(0, relay) {
                    sends += 1;
                    queue.push_back(t);
                }
            }
            assert_eq!(sends, n - 1);
        }
    }

    #[test]
    fn ring_forwarding_stops_at_source_predecessor() {
        let u = UnreliableOverlay::build(&DigraphSpec::new(OverlayFamily::Ring, 4)).unwrap();
        assert_eq!(u.forward_targets(1, 1), vec![2]);
        assert_eq!(u.forward_targets(1, 2), vec![3]);
        assert_eq!(u.forward_targets(1, 3), vec![0]);
        assert_eq!(u.forward_targets(1, 0), Vec::<ServerId>::new());
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(build_overlay(&DigraphSpec::new(OverlayFamily::Ring, 1)).is_err());
        assert!(build_overlay(&DigraphSpec::new(OverlayFamily::Circulant { degree: 0 }, 4)).is_err());
        assert!(build_overlay(&DigraphSpec::new(OverlayFamily::Circulant { degree: 4 }, 4)).is_err());
    }

    #[test]
    fn edge_list_round_trip_and_errors() {
        let g = circulant(5, 2);
        let text = g.to_edge_list();
        let parsed = Digraph::from_edge_list(&text).unwrap();
        assert_eq!(parsed, g);

        let err = Digraph::from_edge_list("0 1\n2 2\n").unwrap_err();
        assert!(matches!(err, OverlayError::EdgeListParse { line: 2, .. }));
    }

    #[test]
    fn remove_servers_leaves_no_dangling_edges() {
        let g = circulant(9, 3);
        let removed: BTreeSet<ServerId> = [2, 5, 7].into_iter().collect();
        let h = g.remove_servers(&removed);
        for (u, v) in h.edges() {
            assert!(h.contains(u) && h.contains(v));
            assert!(!removed.contains(&u) && !removed.contains(&v));
        }
    }
}
