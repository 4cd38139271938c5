//! Property tests for cross-cutting invariants: cosine retrieval is
//! scale-invariant, BPR stays non-negative, ranking respects exclusions,
//! and the binary feature format round-trips bit-exactly.

use std::collections::BTreeSet;

use proptest::prelude::*;

use corona_core::eval::{ndcg_at_k, recall_at_k};
use corona_core::features::{load_features, save_features, FeatureStore};
use corona_core::gnn::{bpr_loss, rank_items};
use corona_core::graph::{build_graph, RawInteraction, RetrievalStage, Subgraph};
use corona_core::llm::QueryEmbedding;
use corona_core::matrix::Matrix;
use corona_core::retrieval::top_k_users;
use corona_core::{ItemId, UserId};

fn finite_f64() -> impl Strategy<Value = f64> {
    (-1e3f64..1e3).prop_filter("finite", |v| v.is_finite())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn top_k_selection_ignores_positive_scaling(
        rows in prop::collection::vec(prop::collection::vec(finite_f64(), 4), 3..24),
        qv in prop::collection::vec(-1e2f64..1e2, 4),
        k in 1usize..12,
        scale in 1e-3f64..1e3,
    ) {
        prop_assume!(qv.iter().map(|v| v * v).sum::<f64>() > 1e-9);
        let n = rows.len();
        let base = Matrix::from_rows(rows.clone());
        let scaled = Matrix::from_rows(
            rows.iter().map(|r| r.iter().map(|v| v * scale).collect()).collect(),
        );
        let target = UserId(0);
        let candidates: BTreeSet<UserId> =
            (1..n as u32).map(UserId).collect();
        prop_assume!(!candidates.is_empty());
        let q = QueryEmbedding {
            vector: qv,
            stage: RetrievalStage::Preference,
            source_hash: "prop".into(),
        };
        let a = top_k_users(&q, &base, &candidates, k, target).unwrap();
        let b = top_k_users(&q, &scaled, &candidates, k, target).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn bpr_loss_is_non_negative(
        pos in -50f64..50.0,
        negs in prop::collection::vec(-50f64..50.0, 1..16),
    ) {
        let loss = bpr_loss(pos, &negs).unwrap();
        prop_assert!(loss >= 0.0, "loss {}", loss);
        // Equality only in the pos >> neg limit.
        if negs.iter().all(|&n| pos - n < 30.0) {
            prop_assert!(loss > 0.0);
        }
    }

    #[test]
    fn ranking_never_returns_excluded_items(
        n_items in 1usize..30,
        exclude_bits in prop::collection::vec(any::<bool>(), 30),
        item_rows in prop::collection::vec(prop::collection::vec(finite_f64(), 3), 30),
        encoding in prop::collection::vec(finite_f64(), 3),
    ) {
        let items: BTreeSet<ItemId> = (0..n_items as u32).map(ItemId).collect();
        let exclude: BTreeSet<ItemId> = (0..n_items)
            .filter(|&i| exclude_bits[i])
            .map(|i| ItemId(i as u32))
            .collect();
        let subgraph = Subgraph {
            stage: RetrievalStage::Intent,
            users: BTreeSet::from([UserId(0)]),
            items,
            edges: vec![],
            degenerate: false,
        };
        let features = FeatureStore::new(
            Matrix::zeros(1, 3),
            Matrix::from_rows(item_rows[..30].to_vec()),
        );
        let ranked = rank_items(&subgraph, &encoding, &features, &exclude, UserId(0)).unwrap();
        for (item, _) in &ranked.entries {
            prop_assert!(!exclude.contains(item));
        }
        prop_assert_eq!(ranked.entries.len(), n_items - exclude.iter().filter(|v| v.0 < n_items as u32).count());
        // Scores are non-increasing.
        for pair in ranked.entries.windows(2) {
            prop_assert!(pair[0].1 >= pair[1].1);
        }
    }

    #[test]
    fn feature_files_round_trip_bit_exactly(
        rows in 1usize..12,
        cols in 1usize..12,
        values in prop::collection::vec(-1e6f32..1e6, 144),
    ) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.crnf");
        let data: Vec<f64> =
            values[..rows * cols].iter().map(|&v| v as f64).collect();
        let m = Matrix::from_vec(rows, cols, data);
        save_features(&path, &m).unwrap();
        let back = load_features(&path, rows, cols).unwrap();
        prop_assert_eq!(m, back);
    }

    #[test]
    fn metrics_stay_in_unit_range_and_monotone(
        order in prop::collection::vec(0u32..40, 1..40),
        gt_ids in prop::collection::vec(0u32..40, 1..6),
    ) {
        // Dedupe the ranking order while preserving position.
        let mut seen = BTreeSet::new();
        let entries: Vec<(ItemId, f64)> = order
            .iter()
            .filter(|id| seen.insert(**id))
            .enumerate()
            .map(|(i, &id)| (ItemId(id), -(i as f64)))
            .collect();
        prop_assume!(!entries.is_empty());
        let ranked = corona_core::gnn::RankedList {
            target: UserId(0),
            entries,
            subgraph_fingerprint: "prop".into(),
            exhausted: false,
        };
        let gt: BTreeSet<ItemId> = gt_ids.into_iter().map(ItemId).collect();
        let mut prev_r = 0.0;
        let mut prev_n = 0.0;
        for k in 1..=40usize {
            let r = recall_at_k(&ranked, &gt, k).unwrap();
            let n = ndcg_at_k(&ranked, &gt, k).unwrap();
            prop_assert!((0.0..=1.0).contains(&r));
            prop_assert!((0.0..=1.0 + 1e-12).contains(&n));
            prop_assert!(r + 1e-12 >= prev_r);
            // NDCG's ideal normalizer grows with K until K reaches |gt|,
            // so monotonicity only holds from there on.
            if k > gt.len() {
                prop_assert!(n + 1e-12 >= prev_n);
            }
            prev_r = r;
            prev_n = n;
        }
    }

    #[test]
    fn graph_serde_round_trips_identically(
        edges in prop::collection::vec((0u8..12, 0u8..12, 0i64..1000), 1..60),
    ) {
        let recs: Vec<RawInteraction> = edges
            .iter()
            .map(|&(u, v, t)| RawInteraction {
                user: format!("u{u}"),
                item: format!("v{v}"),
                timestamp: t,
            })
            .collect();
        let graph = build_graph(&recs, &[]).unwrap();
        let json = serde_json::to_string(&graph).unwrap();
        let back: corona_core::InteractionGraph = serde_json::from_str(&json).unwrap();
        prop_assert_eq!(&graph, &back);

        // Inducing over all users reproduces the full item/edge sets.
        let sub = graph
            .induce_subgraph(&graph.all_users(), RetrievalStage::Preference)
            .unwrap();
        prop_assert_eq!(sub.items.len(), graph.n_items());
        let total: usize = graph.users().map(|u| graph.items_of(u).len()).sum();
        prop_assert_eq!(sub.edges.len(), total);
    }
}
