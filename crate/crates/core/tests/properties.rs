//! Property tests for the overlay algebra and the deterministic pieces the
//! rest of the engine leans on.

use std::collections::BTreeSet;

use proptest::prelude::*;

use dualcast_core::overlay::{build_overlay, Digraph, DigraphSpec, OverlayFamily, ServerId};
use dualcast_core::protocol::{deterministic_delivery_order, Message, Payload, WireRoundKind};
use dualcast_core::UnreliableOverlay;

fn arb_digraph() -> impl Strategy<Value = Digraph> {
    (2usize..9, proptest::collection::vec((0usize..9, 0usize..9), 0..40)).prop_map(
        |(n, edges)| {
            let mut g = Digraph::new(0..n);
            for (u, v) in edges {
                if u < n && v < n && u != v {
                    g.add_edge(u, v);
                }
            }
            g
        },
    )
}

proptest! {
    #[test]
    fn transpose_is_an_involution(g in arb_digraph()) {
        prop_assert_eq!(g.transpose().transpose(), g);
    }

    #[test]
    fn transpose_preserves_degree_sums(g in arb_digraph()) {
        prop_assert_eq!(g.transpose().edge_count(), g.edge_count());
        prop_assert_eq!(g.transpose().vertex_count(), g.vertex_count());
    }

    #[test]
    fn removal_never_leaves_dangling_edges(
        g in arb_digraph(),
        removed in proptest::collection::btree_set(0usize..9, 0..5),
    ) {
        let h = g.remove_servers(&removed);
        for (u, v) in h.edges() {
            prop_assert!(h.contains(u) && h.contains(v));
            prop_assert!(!removed.contains(&u) && !removed.contains(&v));
        }
    }

    /// Rebuilt unreliable overlays stay strongly connected over any nonempty
    /// survivor set, and their dissemination reaches every survivor exactly
    /// once from every source.
    #[test]
    fn rebuilt_overlays_reach_every_survivor(
        n in 2usize..12,
        family_ring in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let family = if family_ring {
            OverlayFamily::Ring
        } else {
            OverlayFamily::BinomialDissemination
        };
        let overlay = UnreliableOverlay::build(&DigraphSpec::new(family, n)).unwrap();
        // survivor subset derived from the seed, never empty
        let mut survivors: BTreeSet<ServerId> = (0..n).filter(|i| (seed >> i) & 1 == 1).collect();
        survivors.insert((seed % n as u64) as usize);
        let rebuilt = overlay.rebuild(&survivors);
        prop_assert!(rebuilt.graph().is_strongly_connected());
        for &src in rebuilt.members() {
            let mut seen = BTreeSet::from([src]);
            let mut queue = vec![src];
            while let Some(relay) = queue.pop() {
                for t in rebuilt.forward_targets(src, relay) {
                    prop_assert!(seen.insert(t), "duplicate receive at {t}");
                    queue.push(t);
                }
            }
            prop_assert_eq!(&seen, &survivors);
        }
    }

    #[test]
    fn circulant_connectivity_equals_degree(n in 2usize..9, d_seed in 1usize..8) {
        let d = 1 + d_seed % (n - 1).max(1);
        let g = build_overlay(&DigraphSpec::new(OverlayFamily::Circulant { degree: d }, n)).unwrap();
        prop_assert_eq!(g.vertex_connectivity(), d);
    }

    #[test]
    fn delivery_order_is_total_and_stable(sources in proptest::collection::btree_set(0usize..64, 1..20)) {
        let msgs: Vec<Message> = sources
            .iter()
            .map(|&s| Message {
                source: s,
                epoch: 1,
                round: 1,
                kind: WireRoundKind::Unreliable,
                eon: 1,
                payload: Payload::EMPTY,
            })
            .collect();
        let mut shuffled = msgs.clone();
        shuffled.reverse();
        let a = deterministic_delivery_order(msgs);
        let b = deterministic_delivery_order(shuffled);
        prop_assert_eq!(&a, &b);
        prop_assert!(a.windows(2).all(|w| w[0].source < w[1].source));
    }
}
