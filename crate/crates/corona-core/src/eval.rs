//! Recall@K / NDCG@K evaluation harness, cold-item slice, and
//! subgraph-rule ablations.
//!
//! Evaluation follows the all-ranking protocol within the retrieved
//! candidate set: for each test user the pipeline's final subgraph bounds
//! the rankable items, ground-truth items outside it count as misses, and
//! the full-graph ablation ranks over all items. Reports carry per-run raw
//! values, candidate-set sizes and dataset fingerprints so results stay
//! interpretable.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{FeatureStore, TextStore};
use crate::gnn::{forward_target, rank_items, GnnError, GnnParams, RankedList, SubgraphContext};
use crate::graph::{HopBucket, InteractionGraph, ItemId, RetrievalStage, UserId};
use crate::llm::LlmGateway;
use crate::retrieval::{
    stage1_retrieve, stage2_retrieve, RetrievalConfig, RetrievalError, RetrieverParams,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("ground-truth set is empty")]
    EmptyGroundTruth,
    #[error("cutoff K must be positive")]
    BadCutoff,
    #[error("cutoffs must be positive and strictly ascending")]
    BadCutoffList,
    #[error("runs must be at least 1")]
    BadRuns,
    #[error("ablation mode list is empty")]
    NoModes,
    #[error("unknown ablation mode: {0}")]
    UnknownMode(String),
    #[error("test edge ({user}, {item}) is not masked from the adjacency")]
    UnmaskedTestEdge { user: UserId, item: ItemId },
    #[error("no test users with ground truth to evaluate")]
    NoTestUsers,
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Gnn(#[from] GnnError),
    #[error(transparent)]
    Graph(#[from] crate::graph::GraphError),
}

/// Subgraph rule under evaluation: the full pipeline or one of the fixed
/// rules it is compared against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationMode {
    Corona,
    FullGraph,
    Fixed1Hop,
    Fixed2Hop,
}

impl AblationMode {
    pub fn parse(s: &str) -> Result<Self, EvalError> {
        match s.to_ascii_lowercase().as_str() {
            "corona" => Ok(Self::Corona),
            "full-graph" | "fullgraph" | "full_graph" => Ok(Self::FullGraph),
            "fixed-1hop" | "fixed1hop" | "fixed_1hop" => Ok(Self::Fixed1Hop),
            "fixed-2hop" | "fixed2hop" | "fixed_2hop" => Ok(Self::Fixed2Hop),
            other => Err(EvalError::UnknownMode(other.to_string())),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Corona => "corona",
            Self::FullGraph => "full-graph",
            Self::Fixed1Hop => "fixed-1hop",
            Self::Fixed2Hop => "fixed-2hop",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub cutoffs: Vec<usize>,
    pub runs: usize,
    pub cold_start_threshold: usize,
    pub ablation_modes: Vec<AblationMode>,
    /// Worker threads for per-user evaluation; 1 keeps it sequential.
    pub workers: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            cutoffs: vec![10, 20, 50],
            runs: 5,
            cold_start_threshold: 2,
            ablation_modes: vec![
                AblationMode::Corona,
                AblationMode::FullGraph,
                AblationMode::Fixed1Hop,
                AblationMode::Fixed2Hop,
            ],
            workers: 1,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.runs < 1 {
            return Err(EvalError::BadRuns);
        }
        if self.cutoffs.is_empty() || self.cutoffs[0] == 0 {
            return Err(EvalError::BadCutoffList);
        }
        if self.cutoffs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(EvalError::BadCutoffList);
        }
        Ok(())
    }
}

/// |top-K ∩ ground truth| / |ground truth|.
pub fn recall_at_k(
    ranked: &RankedList,
    ground_truth: &BTreeSet<ItemId>,
    k: usize,
) -> Result<f64, EvalError> {
    if ground_truth.is_empty() {
        return Err(EvalError::EmptyGroundTruth);
    }
    if k == 0 {
        return Err(EvalError::BadCutoff);
    }
    let hits = ranked.top(k).filter(|&&(item, _)| ground_truth.contains(&item)).count();
    Ok(hits as f64 / ground_truth.len() as f64)
}

/// DCG with unit gains at hit positions p (1-indexed) contributing
/// 1/log2(p+1), normalized by the ideal DCG of min(|gt|, K) front-loaded
/// hits.
pub fn ndcg_at_k(
    ranked: &RankedList,
    ground_truth: &BTreeSet<ItemId>,
    k: usize,
) -> Result<f64, EvalError> {
    if ground_truth.is_empty() {
        return Err(EvalError::EmptyGroundTruth);
    }
    if k == 0 {
        return Err(EvalError::BadCutoff);
    }
    let mut dcg = 0.0;
    for (position, &(item, _)) in ranked.top(k).enumerate() {
        if ground_truth.contains(&item) {
            dcg += 1.0 / ((position + 2) as f64).log2();
        }
    }
    let ideal_hits = ground_truth.len().min(k);
    let idcg: f64 = (0..ideal_hits).map(|p| 1.0 / ((p + 2) as f64).log2()).sum();
    Ok(dcg / idcg)
}

/// Items whose total interaction count (adjacency plus masked samples) is
/// at most `threshold`.
pub fn cold_start_slice(graph: &InteractionGraph, threshold: usize) -> BTreeSet<ItemId> {
    graph.items().filter(|&v| graph.item_interaction_count(v) <= threshold).collect()
}

/// Frozen trained state evaluated against test edges.
pub struct ModelBundle<'a> {
    pub graph: &'a InteractionGraph,
    pub features: &'a FeatureStore,
    pub texts: &'a TextStore,
    pub gateway: &'a LlmGateway,
    pub retriever: &'a RetrieverParams,
    pub gnn: &'a GnnParams,
    pub retrieval: RetrievalConfig,
}

/// Group test edges by user, validating that each is masked from the
/// adjacency.
pub fn test_edges_by_user(
    graph: &InteractionGraph,
    test: &[(UserId, ItemId)],
) -> Result<BTreeMap<UserId, BTreeSet<ItemId>>, EvalError> {
    let mut by_user: BTreeMap<UserId, BTreeSet<ItemId>> = BTreeMap::new();
    for &(user, item) in test {
        if !graph.is_masked(user, item) {
            return Err(EvalError::UnmaskedTestEdge { user, item });
        }
        by_user.entry(user).or_default().insert(item);
    }
    Ok(by_user)
}

/// Build the evaluation subgraph for one user under a given mode. For the
/// chain pipeline this runs both retrieval stages (LLM caches make this
/// cheap on repeat); fixed rules derive the user set from hop buckets.
pub fn mode_subgraph(
    bundle: &ModelBundle<'_>,
    mode: AblationMode,
    target: UserId,
) -> Result<crate::graph::Subgraph, EvalError> {
    let graph = bundle.graph;
    match mode {
        AblationMode::Corona => {
            let stage1 = stage1_retrieve(
                graph,
                bundle.features,
                bundle.texts,
                bundle.retriever,
                &bundle.retrieval,
                bundle.gateway,
                target,
            )?;
            let history: Vec<ItemId> =
                graph.visible_history(target).iter().map(|&(item, _)| item).collect();
            let stage2 = stage2_retrieve(
                &stage1,
                graph,
                bundle.texts,
                &bundle.retrieval,
                bundle.gateway,
                target,
                &history,
            )?;
            Ok(stage2.subgraph)
        }
        AblationMode::FullGraph => {
            Ok(graph.induce_subgraph(&graph.all_users(), RetrievalStage::Intent)?)
        }
        AblationMode::Fixed1Hop | AblationMode::Fixed2Hop => {
            let distances = graph.hop_distance(target)?;
            let mut users: BTreeSet<UserId> = BTreeSet::from([target]);
            for (user, bucket) in distances.iter() {
                let keep = match mode {
                    AblationMode::Fixed1Hop => bucket == HopBucket::One,
                    _ => bucket == HopBucket::One || bucket == HopBucket::Two,
                };
                if keep {
                    users.insert(user);
                }
            }
            Ok(graph.induce_subgraph(&users, RetrievalStage::Intent)?)
        }
    }
}

/// Rank candidates for one user under a mode: GCN-encode the target over
/// the mode's subgraph and score its items, excluding the user's adjacency
/// (already-purchased items); masked test edges stay eligible.
pub fn rank_for_user(
    bundle: &ModelBundle<'_>,
    mode: AblationMode,
    target: UserId,
) -> Result<RankedList, EvalError> {
    let subgraph = mode_subgraph(bundle, mode, target)?;
    let exclude: BTreeSet<ItemId> = bundle.graph.items_of(target).iter().copied().collect();
    if subgraph.degenerate {
        return Ok(RankedList {
            target,
            entries: vec![],
            subgraph_fingerprint: subgraph.fingerprint(),
            exhausted: true,
        });
    }
    let ctx = SubgraphContext::build(subgraph, bundle.features, target, exclude)?;
    let encoding = forward_target(&ctx.input, bundle.gnn)?;
    Ok(rank_items(&ctx.subgraph, &encoding, bundle.features, &ctx.exclude, target)?)
}

/// Per-user metric rows aggregated over one evaluation pass.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModeEvaluation {
    pub mode: AblationMode,
    /// cutoff -> mean recall / ndcg over evaluated users.
    pub recall: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
    pub users_evaluated: usize,
    pub mean_candidates: f64,
}

/// Evaluate one mode over the test edges. Users with no ground truth
/// (after the optional slice filter) are skipped; ground-truth items
/// absent from the candidate set count as misses.
pub fn evaluate_mode(
    bundle: &ModelBundle<'_>,
    mode: AblationMode,
    test: &[(UserId, ItemId)],
    config: &EvalConfig,
    item_filter: Option<&BTreeSet<ItemId>>,
) -> Result<ModeEvaluation, EvalError> {
    config.validate()?;
    let by_user = test_edges_by_user(bundle.graph, test)?;
    let targets: Vec<(UserId, BTreeSet<ItemId>)> = by_user
        .into_iter()
        .filter_map(|(user, gt)| {
            let gt: BTreeSet<ItemId> = match item_filter {
                Some(filter) => gt.intersection(filter).copied().collect(),
                None => gt,
            };
            (!gt.is_empty()).then_some((user, gt))
        })
        .collect();
    if targets.is_empty() {
        return Err(EvalError::NoTestUsers);
    }

    let eval_one = |(user, gt): &(UserId, BTreeSet<ItemId>)| -> Result<
        (Vec<f64>, Vec<f64>, usize),
        EvalError,
    > {
        let ranked = rank_for_user(bundle, mode, *user)?;
        let mut recalls = Vec::with_capacity(config.cutoffs.len());
        let mut ndcgs = Vec::with_capacity(config.cutoffs.len());
        for &k in &config.cutoffs {
            recalls.push(recall_at_k(&ranked, gt, k)?);
            ndcgs.push(ndcg_at_k(&ranked, gt, k)?);
        }
        Ok((recalls, ndcgs, ranked.entries.len()))
    };

    let rows: Vec<(Vec<f64>, Vec<f64>, usize)> = if config.workers > 1 {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.workers)
            .build()
            .expect("worker pool");
        pool.install(|| targets.par_iter().map(eval_one).collect::<Result<Vec<_>, _>>())?
    } else {
        targets.iter().map(eval_one).collect::<Result<Vec<_>, _>>()?
    };

    let n = rows.len() as f64;
    let mut recall = BTreeMap::new();
    let mut ndcg = BTreeMap::new();
    for (i, &k) in config.cutoffs.iter().enumerate() {
        recall.insert(k, rows.iter().map(|r| r.0[i]).sum::<f64>() / n);
        ndcg.insert(k, rows.iter().map(|r| r.1[i]).sum::<f64>() / n);
    }
    let mean_candidates = rows.iter().map(|r| r.2 as f64).sum::<f64>() / n;
    Ok(ModeEvaluation {
        mode,
        recall,
        ndcg,
        users_evaluated: rows.len(),
        mean_candidates,
    })
}

/// One run's raw values for a (mode, K) cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunCell {
    pub seed: u64,
    pub recall: f64,
    pub ndcg: f64,
}

/// Mean metrics for a (mode, K) cell plus the per-run raw values.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModeCell {
    pub mode: AblationMode,
    pub k: usize,
    pub recall_mean: f64,
    pub ndcg_mean: f64,
    pub runs: Vec<RunCell>,
    pub mean_candidate_size: f64,
}

/// Full comparative report: config snapshot, fingerprints, one cell per
/// (mode, K).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config: serde_json::Value,
    pub fingerprints: BTreeMap<String, String>,
    pub modes: Vec<ModeCell>,
}

impl MetricsReport {
    /// Assemble cells from per-(mode, seed) evaluations.
    pub fn from_runs(
        config: serde_json::Value,
        fingerprints: BTreeMap<String, String>,
        cutoffs: &[usize],
        runs: &[(u64, Vec<ModeEvaluation>)],
    ) -> Self {
        let mut modes: Vec<ModeCell> = Vec::new();
        let mut mode_order: Vec<AblationMode> = Vec::new();
        for (_, evals) in runs {
            for e in evals {
                if !mode_order.contains(&e.mode) {
                    mode_order.push(e.mode);
                }
            }
        }
        for mode in mode_order {
            for &k in cutoffs {
                let cells: Vec<RunCell> = runs
                    .iter()
                    .filter_map(|(seed, evals)| {
                        evals.iter().find(|e| e.mode == mode).map(|e| RunCell {
                            seed: *seed,
                            recall: e.recall[&k],
                            ndcg: e.ndcg[&k],
                        })
                    })
                    .collect();
                if cells.is_empty() {
                    continue;
                }
                let n = cells.len() as f64;
                let candidate_mean = runs
                    .iter()
                    .filter_map(|(_, evals)| {
                        evals.iter().find(|e| e.mode == mode).map(|e| e.mean_candidates)
                    })
                    .sum::<f64>()
                    / n;
                modes.push(ModeCell {
                    mode,
                    k,
                    recall_mean: cells.iter().map(|c| c.recall).sum::<f64>() / n,
                    ndcg_mean: cells.iter().map(|c| c.ndcg).sum::<f64>() / n,
                    runs: cells,
                    mean_candidate_size: candidate_mean,
                });
            }
        }
        Self { config, fingerprints, modes }
    }

    pub fn cell(&self, mode: AblationMode, k: usize) -> Option<&ModeCell> {
        self.modes.iter().find(|c| c.mode == mode && c.k == k)
    }

    /// Aligned plain-text table, one row per (mode, K).
    pub fn to_text_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<12} {:>4} {:>12} {:>12} {:>10} {:>6}\n",
            "mode", "K", "recall", "ndcg", "cands", "runs"
        ));
        for cell in &self.modes {
            out.push_str(&format!(
                "{:<12} {:>4} {:>12.6} {:>12.6} {:>10.1} {:>6}\n",
                cell.mode.name(),
                cell.k,
                cell.recall_mean,
                cell.ndcg_mean,
                cell.mean_candidate_size,
                cell.runs.len()
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_graph, RawInteraction};

    fn ranked(ids: &[u32]) -> RankedList {
        RankedList {
            target: UserId(0),
            entries: ids
                .iter()
                .enumerate()
                .map(|(i, &id)| (ItemId(id), 100.0 - i as f64))
                .collect(),
            subgraph_fingerprint: "test".into(),
            exhausted: ids.is_empty(),
        }
    }

    #[test]
    fn recall_examples() {
        let gt1 = BTreeSet::from([ItemId(0)]);
        assert_eq!(recall_at_k(&ranked(&[0, 1, 2]), &gt1, 10).unwrap(), 1.0);
        assert_eq!(recall_at_k(&ranked(&[5, 6, 7]), &gt1, 10).unwrap(), 0.0);
        // |gt|=2, one at rank 3 and one beyond K.
        let gt2 = BTreeSet::from([ItemId(2), ItemId(30)]);
        let list: Vec<u32> = (0..40).collect();
        assert_eq!(recall_at_k(&ranked(&list), &gt2, 10).unwrap(), 0.5);
        assert!(matches!(
            recall_at_k(&ranked(&[0]), &BTreeSet::new(), 10),
            Err(EvalError::EmptyGroundTruth)
        ));
    }

    #[test]
    fn ndcg_examples() {
        let gt = BTreeSet::from([ItemId(0)]);
        assert!((ndcg_at_k(&ranked(&[0, 1, 2]), &gt, 10).unwrap() - 1.0).abs() < 1e-12);
        // Single hit at rank 3: 1/log2(4) = 0.5.
        assert!(
            (ndcg_at_k(&ranked(&[9, 8, 0, 7]), &gt, 10).unwrap() - 0.5).abs() < 1e-12
        );
        assert_eq!(ndcg_at_k(&ranked(&[9, 8, 7]), &gt, 3).unwrap(), 0.0);
    }

    #[test]
    fn metrics_are_monotone_in_k() {
        let gt = BTreeSet::from([ItemId(3), ItemId(11), ItemId(25)]);
        let list: Vec<u32> = (0..40).collect();
        let r = ranked(&list);
        let mut last_recall = 0.0;
        let mut last_ndcg = 0.0;
        for k in 1..=40 {
            let rec = recall_at_k(&r, &gt, k).unwrap();
            let nd = ndcg_at_k(&r, &gt, k).unwrap();
            assert!(rec + 1e-12 >= last_recall);
            assert!(nd + 1e-12 >= last_ndcg);
            last_recall = rec;
            last_ndcg = nd;
        }
    }

    #[test]
    fn metrics_ignore_score_scale() {
        // Same ordering, different positive affine transform of scores.
        let gt = BTreeSet::from([ItemId(1)]);
        let a = ranked(&[2, 1, 0]);
        let mut b = a.clone();
        for (_, s) in b.entries.iter_mut() {
            *s = *s * 7.5 + 3.0;
        }
        for k in [1, 2, 3] {
            assert_eq!(recall_at_k(&a, &gt, k).unwrap(), recall_at_k(&b, &gt, k).unwrap());
            assert_eq!(ndcg_at_k(&a, &gt, k).unwrap(), ndcg_at_k(&b, &gt, k).unwrap());
        }
    }

    fn cold_graph() -> InteractionGraph {
        // i0: 2 interactions (1 adjacency + 1 masked); i1: 3; i2: 1.
        let recs = vec![
            RawInteraction { user: "a".into(), item: "i0".into(), timestamp: 1 },
            RawInteraction { user: "b".into(), item: "i0".into(), timestamp: 2 },
            RawInteraction { user: "a".into(), item: "i1".into(), timestamp: 3 },
            RawInteraction { user: "b".into(), item: "i1".into(), timestamp: 4 },
            RawInteraction { user: "c".into(), item: "i1".into(), timestamp: 5 },
            RawInteraction { user: "c".into(), item: "i2".into(), timestamp: 6 },
        ];
        build_graph(&recs, &[("b".to_string(), "i0".to_string())]).unwrap()
    }

    #[test]
    fn cold_slice_includes_at_most_threshold_interactions() {
        let g = cold_graph();
        let slice = cold_start_slice(&g, 2);
        let i0 = g.item_id("i0").unwrap();
        let i1 = g.item_id("i1").unwrap();
        let i2 = g.item_id("i2").unwrap();
        assert!(slice.contains(&i0), "2 interactions stays in the slice");
        assert!(!slice.contains(&i1), "3 interactions is out");
        assert!(slice.contains(&i2));
    }

    #[test]
    fn cold_slice_with_huge_threshold_is_everything() {
        let g = cold_graph();
        assert_eq!(cold_start_slice(&g, usize::MAX).len(), g.n_items());
        let empty = build_graph(&[], &[]).unwrap();
        assert!(cold_start_slice(&empty, 2).is_empty());
    }

    #[test]
    fn config_validation() {
        let mut config = EvalConfig::default();
        config.validate().unwrap();
        config.cutoffs = vec![10, 10];
        assert!(matches!(config.validate(), Err(EvalError::BadCutoffList)));
        config.cutoffs = vec![10, 20];
        config.runs = 0;
        assert!(matches!(config.validate(), Err(EvalError::BadRuns)));
    }

    #[test]
    fn mode_parsing() {
        assert_eq!(AblationMode::parse("corona").unwrap(), AblationMode::Corona);
        assert_eq!(AblationMode::parse("full-graph").unwrap(), AblationMode::FullGraph);
        assert_eq!(AblationMode::parse("Fixed1Hop").unwrap(), AblationMode::Fixed1Hop);
        assert!(matches!(AblationMode::parse("nope"), Err(EvalError::UnknownMode(_))));
    }

    #[test]
    fn unmasked_test_edge_is_rejected() {
        let g = cold_graph();
        let a = g.user_id("a").unwrap();
        let i0 = g.item_id("i0").unwrap();
        assert!(matches!(
            test_edges_by_user(&g, &[(a, i0)]),
            Err(EvalError::UnmaskedTestEdge { .. })
        ));
        let b = g.user_id("b").unwrap();
        let ok = test_edges_by_user(&g, &[(b, i0)]).unwrap();
        assert_eq!(ok[&b], BTreeSet::from([i0]));
    }

    fn bundle_fixture() -> (
        InteractionGraph,
        crate::features::FeatureStore,
        crate::features::TextStore,
        LlmGateway,
        crate::retrieval::RetrieverParams,
        crate::gnn::GnnParams,
    ) {
        // u0 shares i0 with u1; u2 is two hops out via i1; u3 is beyond.
        let recs = vec![
            RawInteraction { user: "u0".into(), item: "i0".into(), timestamp: 1 },
            RawInteraction { user: "u1".into(), item: "i0".into(), timestamp: 2 },
            RawInteraction { user: "u1".into(), item: "i1".into(), timestamp: 3 },
            RawInteraction { user: "u2".into(), item: "i1".into(), timestamp: 4 },
            RawInteraction { user: "u3".into(), item: "i2".into(), timestamp: 5 },
            RawInteraction { user: "u0".into(), item: "i2".into(), timestamp: 6 },
        ];
        let graph = build_graph(&recs, &[("u0".to_string(), "i2".to_string())]).unwrap();
        let d = 4;
        let features = crate::features::FeatureStore::new(
            crate::matrix::Matrix::from_vec(
                graph.n_users(),
                d,
                (0..graph.n_users() * d).map(|i| (i as f64 * 0.37).sin()).collect(),
            ),
            crate::matrix::Matrix::from_vec(
                graph.n_items(),
                d,
                (0..graph.n_items() * d).map(|i| (i as f64 * 0.53).cos()).collect(),
            ),
        );
        let texts = crate::features::TextStore::from_records(vec![], vec![], &graph);
        let gateway =
            LlmGateway::from_config(&crate::llm::LlmConfig::mock(1, 32, d)).unwrap();
        let retriever = crate::retrieval::RetrieverParams::init(d, 2, 1);
        let gnn = crate::gnn::GnnParams::init(d, 3, d, 2);
        (graph, features, texts, gateway, retriever, gnn)
    }

    #[test]
    fn fixed_mode_subgraphs_follow_hop_buckets() {
        let (graph, features, texts, gateway, retriever, gnn) = bundle_fixture();
        let bundle = ModelBundle {
            graph: &graph,
            features: &features,
            texts: &texts,
            gateway: &gateway,
            retriever: &retriever,
            gnn: &gnn,
            retrieval: crate::retrieval::RetrievalConfig { k: 3 },
        };
        let target = graph.user_id("u0").unwrap();

        let full = mode_subgraph(&bundle, AblationMode::FullGraph, target).unwrap();
        assert_eq!(full.users.len(), graph.n_users());
        assert_eq!(full.items.len(), graph.n_items(), "full graph covers every item");

        let one = mode_subgraph(&bundle, AblationMode::Fixed1Hop, target).unwrap();
        let u1 = graph.user_id("u1").unwrap();
        assert_eq!(one.users, BTreeSet::from([target, u1]));

        let two = mode_subgraph(&bundle, AblationMode::Fixed2Hop, target).unwrap();
        let u2 = graph.user_id("u2").unwrap();
        assert_eq!(two.users, BTreeSet::from([target, u1, u2]));

        let corona = mode_subgraph(&bundle, AblationMode::Corona, target).unwrap();
        assert!(corona.users.contains(&target));
        assert!(corona.users.len() <= 3 / 2 + 1);
    }

    #[test]
    fn parallel_evaluation_matches_sequential() {
        let (graph, features, texts, gateway, retriever, gnn) = bundle_fixture();
        let bundle = ModelBundle {
            graph: &graph,
            features: &features,
            texts: &texts,
            gateway: &gateway,
            retriever: &retriever,
            gnn: &gnn,
            retrieval: crate::retrieval::RetrievalConfig { k: 3 },
        };
        let test = vec![(graph.user_id("u0").unwrap(), graph.item_id("i2").unwrap())];
        let sequential = EvalConfig { workers: 1, runs: 1, ..EvalConfig::default() };
        let parallel = EvalConfig { workers: 2, runs: 1, ..EvalConfig::default() };
        let a = evaluate_mode(&bundle, AblationMode::FullGraph, &test, &sequential, None)
            .unwrap();
        let b =
            evaluate_mode(&bundle, AblationMode::FullGraph, &test, &parallel, None).unwrap();
        assert_eq!(a.recall, b.recall);
        assert_eq!(a.ndcg, b.ndcg);
        assert_eq!(a.users_evaluated, b.users_evaluated);
    }

    #[test]
    fn front_loaded_hits_score_one_everywhere() {
        // An oracle ranking with every ground-truth item first scores 1.0
        // on all six metric cells.
        let gt = BTreeSet::from([ItemId(7), ItemId(9)]);
        let r = ranked(&[7, 9, 0, 1, 2, 3, 4, 5]);
        for k in [10usize, 20, 50] {
            assert_eq!(recall_at_k(&r, &gt, k).unwrap(), 1.0);
            assert!((ndcg_at_k(&r, &gt, k).unwrap() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn report_means_equal_run_means() {
        let make_eval = |mode, recall_val: f64| ModeEvaluation {
            mode,
            recall: BTreeMap::from([(20, recall_val)]),
            ndcg: BTreeMap::from([(20, recall_val / 2.0)]),
            users_evaluated: 3,
            mean_candidates: 42.0,
        };
        let runs = vec![
            (1u64, vec![make_eval(AblationMode::Corona, 0.4)]),
            (2u64, vec![make_eval(AblationMode::Corona, 0.6)]),
        ];
        let report = MetricsReport::from_runs(
            serde_json::json!({}),
            BTreeMap::new(),
            &[20],
            &runs,
        );
        let cell = report.cell(AblationMode::Corona, 20).unwrap();
        assert!((cell.recall_mean - 0.5).abs() < 1e-12);
        assert_eq!(cell.runs.len(), 2);
        let table = report.to_text_table();
        assert!(table.contains("corona"));
    }
}
