//! Per-message tracking digraphs for early termination.
//!
//! In a reliable round, every server tracks every message it has not yet
//! received with a digraph over the servers suspected of holding it: vertices
//! are suspects, edges are the paths the message may have traveled. Failure
//! notifications drive the digraph: a notification for a suspect with no
//! mapped onward paths expands the digraph with that suspect's reliable-
//! overlay successors (a failed server may have relayed before dying), while
//! a notification whose owner is already mapped as a successor deletes that
//! edge (FIFO channels: had the owner received the message from the target,
//! the message would have arrived before the notification). A digraph whose
//! suspects are all known-failed is emptied: the message cannot arrive and
//! tracking is finished. The reliable round completes when every tracking
//! digraph is empty.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use crate::overlay::{Digraph, ServerId};

/// A `(target, owner)` pair: `owner` detected and announced `target`'s death.
pub type NotificationPair = (ServerId, ServerId);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrackingDigraph {
    root: ServerId,
    verts: BTreeSet<ServerId>,
    succ: BTreeMap<ServerId, BTreeSet<ServerId>>,
}

impl TrackingDigraph {
    /// Fresh digraph suspecting only the message's source.
    pub fn new(root: ServerId) -> Self {
        TrackingDigraph {
            root,
            verts: BTreeSet::from([root]),
            succ: BTreeMap::new(),
        }
    }

    pub fn root(&self) -> ServerId {
        self.root
    }

    /// Tracking is finished: the message arrived, or only failed servers
    /// could have held it.
    pub fn is_done(&self) -> bool {
        self.verts.is_empty()
    }

    /// Marks tracking finished (the tracked message was received).
    pub fn clear(&mut self) {
        self.verts.clear();
        self.succ.clear();
    }

    /// Back to the initial single-suspect state, for the start of a new
    /// reliable round.
    pub fn reset(&mut self) {
        self.verts = BTreeSet::from([self.root]);
        self.succ.clear();
    }

    pub fn vertices(&self) -> &BTreeSet<ServerId> {
        &self.verts
    }

    pub fn edges(&self) -> impl Iterator<Item = (ServerId, ServerId)> + '_ {
        self.succ
            .iter()
            .flat_map(|(&u, s)| s.iter().map(move |&v| (u, v)))
    }

    fn successors_of(&self, v: ServerId) -> Option<&BTreeSet<ServerId>> {
        self.succ.get(&v)
    }

    /// Applies `fresh` notifications on top of the already-applied `known`
    /// set (`known` and `fresh` must be disjoint).
    ///
    /// Expansion skips successors that already own a notification for the
    /// expanded target, at every level: such an owner announced the target's
    /// death without relaying the message first, so the message cannot have
    /// traveled that edge.
    pub fn update(
        &mut self,
        g_r: &Digraph,
        known: &BTreeSet<NotificationPair>,
        fresh: &[NotificationPair],
    ) {
        debug_assert!(fresh.iter().all(|p| !known.contains(p)));
        let mut seen_pairs: BTreeSet<NotificationPair> = BTreeSet::new();
        let mut seen_targets: BTreeSet<ServerId> = known.iter().map(|&(t, _)| t).collect();

        let pair_known = |seen: &BTreeSet<NotificationPair>, t: ServerId, o: ServerId| {
            known.contains(&(t, o)) || seen.contains(&(t, o))
        };

        for &(target, owner) in fresh {
            seen_pairs.insert((target, owner));
            seen_targets.insert(target);

            if self.verts.contains(&target) {
                let has_mapped_succs = self
                    .successors_of(target)
                    .is_some_and(|s| !s.is_empty());
                if !has_mapped_succs {
                    // The target may have relayed the message before failing:
                    // expand along its reliable-overlay successors, recursing
                    // through suspects that are themselves known failed.
                    let mut queue: VecDeque<(ServerId, ServerId)> = g_r
                        .successors(target)
                        .filter(|&s| !pair_known(&seen_pairs, target, s))
                        .map(|s| (target, s))
                        .collect();
                    while let Some((parent, child)) = queue.pop_front() {
                        if self.verts.insert(child) && seen_targets.contains(&child) {
                            for s in g_r.successors(child) {
                                if !pair_known(&seen_pairs, child, s) {
                                    queue.push_back((child, s));
                                }
                            }
                        }
                        self.succ.entry(parent).or_default().insert(child);
                    }
                } else if self
                    .successors_of(target)
                    .is_some_and(|s| s.contains(&owner))
                {
                    // The owner never received the message from the target.
                    self.succ.get_mut(&target).unwrap().remove(&owner);
                    self.prune_unreachable();
                }

                if self.verts.iter().all(|v| seen_targets.contains(v)) {
                    // Only failed servers left: no dissemination possible.
                    self.clear();
                }
            }
        }
    }

    fn prune_unreachable(&mut self) {
        if !self.verts.contains(&self.root) {
            self.clear();
            return;
        }
        let mut reachable = BTreeSet::from([self.root]);
        let mut queue = VecDeque::from([self.root]);
        while let Some(u) = queue.pop_front() {
            for &v in self.succ.get(&u).into_iter().flatten() {
                if self.verts.contains(&v) && reachable.insert(v) {
                    queue.push_back(v);
                }
            }
        }
        self.verts.retain(|v| reachable.contains(v));
        self.succ.retain(|k, _| reachable.contains(k));
        for s in self.succ.values_mut() {
            s.retain(|v| reachable.contains(v));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::overlay::{build_overlay, DigraphSpec, OverlayFamily};

    /// Degree-3 reliable overlay over nine servers where server 0 feeds
    /// {3,4,5} and server 5 feeds {6,7,8}.
    fn nine_server_overlay() -> Digraph {
        let edges = vec![
            (0, 3), (0, 4), (0, 5),
            (1, 2), (1, 3), (1, 6),
            (2, 4), (2, 5), (2, 6),
            (3, 1), (3, 2), (3, 7),
            (4, 0), (4, 3), (4, 8),
            (5, 6), (5, 7), (5, 8),
            (6, 0), (6, 5), (6, 8),
            (7, 0), (7, 1), (7, 2),
            (8, 1), (8, 4), (8, 7),
        ];
        build_overlay(&DigraphSpec::new(OverlayFamily::Explicit { edges }, 9)).unwrap()
    }

    #[test]
    fn nine_server_overlay_is_degree_three_optimally_connected() {
        let g = nine_server_overlay();
        for v in g.vertices() {
            assert_eq!(g.successors(v).count(), 3, "out-degree of {v}");
            assert_eq!(g.predecessors(v).len(), 3, "in-degree of {v}");
        }
        assert_eq!(g.vertex_connectivity(), 3);
    }

    /// Server 0 sends its message only to server 5 and dies; server 5 dies
    /// before relaying. A third party applying the notification sequence
    /// (0,4), (0,3), (5,6), (5,8), (5,7) must end up suspecting exactly
    /// {0, 5} and then finish tracking, since both suspects are dead.
    #[test]
    fn lost_message_tracking_shrinks_to_dead_suspects_then_finishes() {
        let g_r = nine_server_overlay();
        let mut g = TrackingDigraph::new(0);
        let mut known: BTreeSet<NotificationPair> = BTreeSet::new();

        let mut observed: Vec<BTreeSet<ServerId>> = Vec::new();
        for pair in [(0, 4), (0, 3), (5, 6), (5, 8), (5, 7)] {
            g.update(&g_r, &known, &[pair]);
            known.insert(pair);
            observed.push(g.vertices().clone());
        }

        let expect = |ids: &[ServerId]| ids.iter().copied().collect::<BTreeSet<_>>();
        assert_eq!(observed[0], expect(&[0, 3, 5]));
        assert_eq!(observed[1], expect(&[0, 5]));
        assert_eq!(observed[2], expect(&[0, 5, 7, 8]));
        assert_eq!(observed[3], expect(&[0, 5, 7]));
        assert_eq!(observed[4], expect(&[]));
        assert!(g.is_done());
    }

    #[test]
    fn notification_for_unsuspected_server_changes_nothing() {
        let g_r = nine_server_overlay();
        let mut g = TrackingDigraph::new(0);
        let before = g.clone();
        g.update(&g_r, &BTreeSet::new(), &[(7, 8)]);
        assert_eq!(g, before);
    }

    #[test]
    fn received_message_keeps_tracking_finished() {
        let g_r = nine_server_overlay();
        let mut g = TrackingDigraph::new(2);
        g.clear();
        g.update(&g_r, &BTreeSet::new(), &[(2, 1), (2, 3)]);
        assert!(g.is_done());
    }

    #[test]
    fn expansion_skips_all_known_owners_not_just_the_newest() {
        // Both 4 and 5 announced 0's death before we ever suspected 0's
        // dissemination paths; when 0 is finally expanded, neither 4 nor 5
        // may be suspected of having received the message from 0.
        let g_r = nine_server_overlay();
        let mut g = TrackingDigraph::new(0);
        let known: BTreeSet<NotificationPair> = [(0, 4)].into_iter().collect();
        g.update(&g_r, &known, &[(0, 5)]);
        // succ(0) = {3,4,5}; owners 4 and 5 excluded.
        assert_eq!(g.vertices().iter().copied().collect::<Vec<_>>(), vec![0, 3]);
    }

    #[test]
    fn every_vertex_stays_reachable_from_root_under_random_updates() {
        use rand::{Rng, SeedableRng};
        let g_r = build_overlay(&DigraphSpec::new(
            OverlayFamily::Circulant { degree: 3 },
            9,
        ))
        .unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let root = rng.gen_range(0..9);
            let mut g = TrackingDigraph::new(root);
            let mut known: BTreeSet<NotificationPair> = BTreeSet::new();
            for _ in 0..rng.gen_range(1..12) {
                let t = rng.gen_range(0..9);
                let owners: Vec<_> = g_r.successors(t).collect();
                let o = owners[rng.gen_range(0..owners.len())];
                if known.contains(&(t, o)) {
                    continue;
                }
                g.update(&g_r, &known, &[(t, o)]);
                known.insert((t, o));
                for &v in g.vertices() {
                    let mut reachable = BTreeSet::from([g.root()]);
                    let mut queue = VecDeque::from([g.root()]);
                    while let Some(u) = queue.pop_front() {
                        for (a, b) in g.edges() {
                            if a == u && reachable.insert(b) {
                                queue.push_back(b);
                            }
                        }
                    }
                    assert!(reachable.contains(&v), "vertex {v} unreachable from root");
                }
            }
        }
    }
}
