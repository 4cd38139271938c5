//! Two-stage subgraph retrieval and retriever training.
//!
//! Users are embedded by fusing their feature row with a learned hop-bucket
//! distance encoding through a linear layer; retrieval takes the top-k
//! cosine matches against an LLM-derived query embedding (stage one over
//! all users, stage two over the stage-one user set with breadth k/2). The
//! retriever trains on a negative summed-softmax loss over the users
//! adjacent to the ground-truth item, with hand-derived gradients and Adam.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{FeatureStore, TextStore};
use crate::graph::{
    GraphError, HopBucket, HopDistances, InteractionGraph, ItemId, RetrievalStage, Subgraph,
    UserId,
};
use crate::llm::summary::{summarize, CandidateSummary};
use crate::llm::{prompts, GatewayError, LlmGateway, QueryEmbedding};
use crate::matrix::{dot, l2_norm, Matrix};
use crate::optim::{Adam, AdamConfig};

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("query embedding has zero norm")]
    ZeroNormQuery,
    #[error("k must be at least 1, got {0}")]
    BadK(usize),
    #[error("candidate set contains the target user {0}")]
    TargetInCandidates(UserId),
    #[error("user universe is empty")]
    EmptyUniverse,
    #[error("true-user set contains {0}, which is outside the universe")]
    TrueUserOutOfRange(UserId),
    #[error("training loss became non-finite at step {step} (loss {loss})")]
    NonFiniteLoss { step: usize, loss: f64 },
    #[error("no training samples with at least one true user")]
    NoUsableSamples,
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Feature(#[from] crate::features::FeatureError),
}

/// Learned retriever state: three hop-bucket encodings plus the fusion
/// layer mapping `[feature ; encoding]` back to feature space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrieverParams {
    pub dim_e: usize,
    pub d: usize,
    /// Distance encodings for hop buckets one, two and beyond.
    pub e: [Vec<f64>; 3],
    /// (d + dim_e) x d, applied as x = Wᵀ·concat(f, e) + b.
    pub fusion_weight: Matrix,
    pub fusion_bias: Vec<f64>,
}

impl RetrieverParams {
    /// Near-identity initialization: the feature block starts as identity
    /// plus small seeded noise, the encoding block near zero, so untrained
    /// retrieval degrades gracefully to raw feature cosine.
    pub fn init(d: usize, dim_e: usize, seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut uniform = |scale: f64| (rand::Rng::random::<f64>(&mut rng) * 2.0 - 1.0) * scale;
        let mut fusion_weight = Matrix::zeros(d + dim_e, d);
        for i in 0..d + dim_e {
            for j in 0..d {
                let base = if i == j { 1.0 } else { 0.0 };
                fusion_weight.set(i, j, base + uniform(0.01));
            }
        }
        let e = [
            (0..dim_e).map(|_| uniform(0.1)).collect(),
            (0..dim_e).map(|_| uniform(0.1)).collect(),
            (0..dim_e).map(|_| uniform(0.1)).collect(),
        ];
        Self { dim_e, d, e, fusion_weight, fusion_bias: vec![0.0; d] }
    }

    pub fn encoding(&self, bucket: HopBucket) -> &[f64] {
        match bucket {
            HopBucket::One => &self.e[0],
            HopBucket::Two => &self.e[1],
            HopBucket::Beyond => &self.e[2],
        }
    }

    pub fn validate(&self) -> Result<(), RetrievalError> {
        for e in &self.e {
            if e.len() != self.dim_e {
                return Err(RetrievalError::Shape(format!(
                    "distance encoding has dim {}, expected {}",
                    e.len(),
                    self.dim_e
                )));
            }
            if e.iter().any(|v| !v.is_finite()) {
                return Err(RetrievalError::Shape("non-finite distance encoding".into()));
            }
        }
        if self.fusion_weight.rows() != self.d + self.dim_e || self.fusion_weight.cols() != self.d
        {
            return Err(RetrievalError::Shape(format!(
                "fusion weight is {}x{}, expected {}x{}",
                self.fusion_weight.rows(),
                self.fusion_weight.cols(),
                self.d + self.dim_e,
                self.d
            )));
        }
        if self.fusion_bias.len() != self.d {
            return Err(RetrievalError::Shape("fusion bias length mismatch".into()));
        }
        if !self.fusion_weight.is_finite() || self.fusion_bias.iter().any(|v| !v.is_finite()) {
            return Err(RetrievalError::Shape("non-finite fusion parameters".into()));
        }
        Ok(())
    }

    pub fn n_params(&self) -> usize {
        3 * self.dim_e + (self.d + self.dim_e) * self.d + self.d
    }

    /// Flatten in a fixed order: e1, e2, e3, fusion weight (row-major),
    /// fusion bias.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.n_params());
        for e in &self.e {
            flat.extend_from_slice(e);
        }
        flat.extend_from_slice(self.fusion_weight.data());
        flat.extend_from_slice(&self.fusion_bias);
        flat
    }

    pub fn assign_from_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.n_params());
        let mut offset = 0;
        for e in &mut self.e {
            e.copy_from_slice(&flat[offset..offset + self.dim_e]);
            offset += self.dim_e;
        }
        let w_len = self.fusion_weight.data().len();
        self.fusion_weight.data_mut().copy_from_slice(&flat[offset..offset + w_len]);
        offset += w_len;
        self.fusion_bias.copy_from_slice(&flat[offset..]);
    }

    fn zeros_like(&self) -> Self {
        Self {
            dim_e: self.dim_e,
            d: self.d,
            e: [vec![0.0; self.dim_e], vec![0.0; self.dim_e], vec![0.0; self.dim_e]],
            fusion_weight: Matrix::zeros(self.d + self.dim_e, self.d),
            fusion_bias: vec![0.0; self.d],
        }
    }
}

/// Retrieval breadth. Similarity is fixed to cosine; ties break by
/// ascending internal user id.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalConfig {
    #[serde(default = "default_k")]
    pub k: usize,
}

fn default_k() -> usize {
    3000
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self { k: default_k() }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<(), RetrievalError> {
        // k >= 2 keeps the stage-two breadth floor(k/2) at least 1.
        if self.k < 2 {
            return Err(RetrievalError::BadK(self.k));
        }
        Ok(())
    }

    pub fn stage2_k(&self) -> usize {
        self.k / 2
    }
}

/// Distance-encoded embeddings for every user. The target's own row uses
/// the "beyond" encoding (distance to self has no hop bucket); stage
/// retrieval never ranks that row because candidate sets exclude the
/// target.
pub fn encode_users(
    features: &FeatureStore,
    distances: &HopDistances,
    params: &RetrieverParams,
    target: UserId,
) -> Result<Matrix, RetrievalError> {
    params.validate()?;
    if features.dim() != params.d {
        return Err(RetrievalError::Shape(format!(
            "feature dim {} does not match retriever dim {}",
            features.dim(),
            params.d
        )));
    }
    if distances.target() != target {
        return Err(RetrievalError::Shape("distance map built for a different target".into()));
    }
    let n = features.users.rows();
    let d = params.d;
    let mut out = Matrix::zeros(n, d);
    for u in 0..n {
        let user = UserId(u as u32);
        let feature = features.user_row(user);
        let encoding = params.encoding(distances.encoding_bucket(user));
        let row = out.row_mut(u);
        row.copy_from_slice(&params.fusion_bias);
        for (i, &x) in feature.iter().chain(encoding.iter()).enumerate() {
            if x == 0.0 {
                continue;
            }
            let w_row = params.fusion_weight.row(i);
            for (j, r) in row.iter_mut().enumerate() {
                *r += x * w_row[j];
            }
        }
    }
    Ok(out)
}

fn cosine_or_neg_inf(query: &[f64], row: &[f64], query_norm: f64) -> f64 {
    let row_norm = l2_norm(row);
    if row_norm == 0.0 {
        // Cosine is undefined at zero; rank such rows last.
        return f64::NEG_INFINITY;
    }
    dot(query, row) / (query_norm * row_norm)
}

/// The k candidates most cosine-similar to the query, plus the target.
/// Ties break by ascending user id; zero-norm rows rank last. When there
/// are fewer than k candidates, all of them are returned.
pub fn top_k_users(
    query: &QueryEmbedding,
    user_embeddings: &Matrix,
    candidates: &BTreeSet<UserId>,
    k: usize,
    target: UserId,
) -> Result<BTreeSet<UserId>, RetrievalError> {
    if k == 0 {
        return Err(RetrievalError::BadK(k));
    }
    if candidates.contains(&target) {
        return Err(RetrievalError::TargetInCandidates(target));
    }
    let query_norm = l2_norm(&query.vector);
    if query_norm == 0.0 {
        return Err(RetrievalError::ZeroNormQuery);
    }
    if query.vector.len() != user_embeddings.cols() {
        return Err(RetrievalError::Shape(format!(
            "query dim {} vs embedding dim {}",
            query.vector.len(),
            user_embeddings.cols()
        )));
    }
    let mut scored: Vec<(f64, UserId)> = candidates
        .iter()
        .map(|&u| {
            (cosine_or_neg_inf(&query.vector, user_embeddings.row(u.0 as usize), query_norm), u)
        })
        .collect();
    scored.sort_unstable_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
    let mut selected: BTreeSet<UserId> = scored.into_iter().take(k).map(|(_, u)| u).collect();
    selected.insert(target);
    Ok(selected)
}

/// Everything stage one produces: the preference subgraph, the candidate
/// summary feeding stage two, the query embedding, and the encoded user
/// matrix reused by stage two. Prompt and reasoning text are kept for
/// tracing.
#[derive(Debug, Clone)]
pub struct StageOneResult {
    pub subgraph: Subgraph,
    pub summary: CandidateSummary,
    pub query: QueryEmbedding,
    pub user_embeddings: Matrix,
    pub prompt: String,
    pub reasoning: String,
}

#[derive(Debug, Clone)]
pub struct StageTwoResult {
    pub subgraph: Subgraph,
    pub query: QueryEmbedding,
    pub prompt: String,
    pub reasoning: String,
}

/// Preference-assisted retrieval: profile -> reasoning -> query embedding
/// -> top-k users over everyone else -> induced subgraph -> summary.
pub fn stage1_retrieve(
    graph: &InteractionGraph,
    features: &FeatureStore,
    texts: &TextStore,
    params: &RetrieverParams,
    config: &RetrievalConfig,
    gateway: &LlmGateway,
    target: UserId,
) -> Result<StageOneResult, RetrievalError> {
    config.validate()?;
    if !graph.contains_user(target) {
        return Err(GraphError::UnknownUser(target.to_string()).into());
    }
    let profile = texts.user_profile(target)?;
    let prompt = prompts::preference_prompt(&profile.attributes);
    let reasoning = gateway.complete(&prompt)?;
    let query = gateway.encode_text(&reasoning, RetrievalStage::Preference)?;

    let distances = graph.hop_distance(target)?;
    let user_embeddings = encode_users(features, &distances, params, target)?;
    let candidates: BTreeSet<UserId> = graph.users().filter(|&u| u != target).collect();
    let users = if candidates.is_empty() {
        BTreeSet::from([target])
    } else {
        top_k_users(&query, &user_embeddings, &candidates, config.k, target)?
    };
    let subgraph = graph.induce_subgraph(&users, RetrievalStage::Preference)?;
    let summary = summarize(&texts.item_text(&subgraph.items)?);
    Ok(StageOneResult { subgraph, summary, query, user_embeddings, prompt, reasoning })
}

/// Intent-assisted retrieval: history + stage-1 summary -> reasoning ->
/// query embedding -> top-k/2 users within the stage-1 user set -> final
/// subgraph. The result user set is a subset of stage one's, target
/// included.
pub fn stage2_retrieve(
    stage1: &StageOneResult,
    graph: &InteractionGraph,
    texts: &TextStore,
    config: &RetrievalConfig,
    gateway: &LlmGateway,
    target: UserId,
    history: &[ItemId],
) -> Result<StageTwoResult, RetrievalError> {
    config.validate()?;
    let history_texts = texts.items_in_order(history)?;
    let prompt = prompts::intent_prompt(&stage1.summary, &history_texts);
    let reasoning = gateway.complete(&prompt)?;
    let query = gateway.encode_text(&reasoning, RetrievalStage::Intent)?;

    let candidates: BTreeSet<UserId> =
        stage1.subgraph.users.iter().copied().filter(|&u| u != target).collect();
    let users = if candidates.is_empty() {
        BTreeSet::from([target])
    } else {
        top_k_users(&query, &stage1.user_embeddings, &candidates, config.stage2_k(), target)?
    };
    let subgraph = graph.induce_subgraph(&users, RetrievalStage::Intent)?;
    Ok(StageTwoResult { subgraph, query, prompt, reasoning })
}

fn softmax_over_rows(query: &[f64], embeddings: &Matrix) -> Vec<f64> {
    let n = embeddings.rows();
    let mut logits: Vec<f64> = (0..n).map(|u| dot(query, embeddings.row(u))).collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for l in logits.iter_mut() {
        *l = (*l - max).exp();
        sum += *l;
    }
    for l in logits.iter_mut() {
        *l /= sum;
    }
    logits
}

/// Retriever loss: the negative sum, over true users, of their softmax
/// probabilities under both query embeddings. Each softmax normalizes over
/// the whole user universe (target row included). Probabilities are used
/// as printed, not log-probabilities.
pub fn retriever_loss(
    query1: &QueryEmbedding,
    query2: &QueryEmbedding,
    user_embeddings: &Matrix,
    true_users: &BTreeSet<UserId>,
) -> Result<f64, RetrievalError> {
    if user_embeddings.rows() == 0 {
        return Err(RetrievalError::EmptyUniverse);
    }
    if let Some(&bad) = true_users.iter().find(|u| u.0 as usize >= user_embeddings.rows()) {
        return Err(RetrievalError::TrueUserOutOfRange(bad));
    }
    if true_users.is_empty() {
        return Ok(0.0);
    }
    let p1 = softmax_over_rows(&query1.vector, user_embeddings);
    let p2 = softmax_over_rows(&query2.vector, user_embeddings);
    let mut loss = 0.0;
    for &u in true_users {
        loss -= p1[u.0 as usize] + p2[u.0 as usize];
    }
    Ok(loss)
}

/// Loss plus hand-derived gradient with respect to every retriever
/// parameter.
///
/// With s_u = q·X_u, p = softmax(s) and S = Σ_{t∈N} p_t, the chain rule
/// gives dL/ds_u = -p_u·(1[u∈N] - S) per query; dL/dX_u = Σ_q (dL/ds_u)·q,
/// and X_u = Wᵀ·z_u + b pushes that into W, b and the bucket encodings.
pub fn retriever_loss_and_grad(
    features: &FeatureStore,
    distances: &HopDistances,
    params: &RetrieverParams,
    target: UserId,
    query1: &QueryEmbedding,
    query2: &QueryEmbedding,
    true_users: &BTreeSet<UserId>,
) -> Result<(f64, RetrieverParams), RetrievalError> {
    let embeddings = encode_users(features, distances, params, target)?;
    let loss = retriever_loss(query1, query2, &embeddings, true_users)?;

    let mut grad = params.zeros_like();
    if true_users.is_empty() {
        return Ok((loss, grad));
    }

    let n = embeddings.rows();
    let d = params.d;
    let mut in_set = vec![false; n];
    for &u in true_users {
        in_set[u.0 as usize] = true;
    }

    // dL/dX_u accumulated over both queries.
    let mut dx = Matrix::zeros(n, d);
    for query in [query1, query2] {
        let p = softmax_over_rows(&query.vector, &embeddings);
        let s: f64 = true_users.iter().map(|&u| p[u.0 as usize]).sum();
        for u in 0..n {
            let ds = -p[u] * ((in_set[u] as i32 as f64) - s);
            if ds == 0.0 {
                continue;
            }
            let row = dx.row_mut(u);
            for (j, &q) in query.vector.iter().enumerate() {
                row[j] += ds * q;
            }
        }
    }

    // Push dX through X_u = Wᵀ z_u + b.
    for u in 0..n {
        let user = UserId(u as u32);
        let dxu = dx.row(u).to_vec();
        if dxu.iter().all(|&v| v == 0.0) {
            continue;
        }
        for (j, &g) in dxu.iter().enumerate() {
            grad.fusion_bias[j] += g;
        }
        let feature = features.user_row(user);
        let bucket = distances.encoding_bucket(user);
        for (i, &z) in feature.iter().enumerate() {
            if z == 0.0 {
                continue;
            }
            let w_row = grad.fusion_weight.row_mut(i);
            for (j, &g) in dxu.iter().enumerate() {
                w_row[j] += z * g;
            }
        }
        let encoding = params.encoding(bucket).to_vec();
        for (r, &z) in encoding.iter().enumerate() {
            if z != 0.0 {
                let w_row = grad.fusion_weight.row_mut(d + r);
                for (j, &g) in dxu.iter().enumerate() {
                    w_row[j] += z * g;
                }
            }
        }
        // dL/de_bucket[r] = Σ_j W[d+r][j] · dX_u[j]
        let bucket_index = match bucket {
            HopBucket::One => 0,
            HopBucket::Two => 1,
            HopBucket::Beyond => 2,
        };
        for r in 0..params.dim_e {
            grad.e[bucket_index][r] += dot(params.fusion_weight.row(d + r), &dxu);
        }
    }
    Ok((loss, grad))
}

/// Per-user query embeddings frozen before training: one reasoning pass
/// per user, reused across all epochs.
#[derive(Debug, Clone, Default)]
pub struct FrozenQueries {
    pub by_user: BTreeMap<UserId, (QueryEmbedding, QueryEmbedding)>,
}

/// Run both reasoning stages once for every distinct user in `samples`
/// with the given (initial) parameters, caching the query embeddings.
pub fn freeze_queries(
    graph: &InteractionGraph,
    features: &FeatureStore,
    texts: &TextStore,
    params: &RetrieverParams,
    config: &RetrievalConfig,
    gateway: &LlmGateway,
    samples: &[(UserId, ItemId)],
) -> Result<FrozenQueries, RetrievalError> {
    let mut by_user = BTreeMap::new();
    for &(user, _) in samples {
        if by_user.contains_key(&user) {
            continue;
        }
        let stage1 = stage1_retrieve(graph, features, texts, params, config, gateway, user)?;
        let history: Vec<ItemId> =
            graph.visible_history(user).iter().map(|&(item, _)| item).collect();
        let stage2 = stage2_retrieve(&stage1, graph, texts, config, gateway, user, &history)?;
        by_user.insert(user, (stage1.query, stage2.query));
    }
    Ok(FrozenQueries { by_user })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: AdamConfig,
    /// Consecutive non-improving validation evaluations before stopping.
    pub patience: usize,
    /// Steps between validation evaluations; 0 means once per epoch.
    pub eval_every: usize,
    pub max_steps: usize,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: AdamConfig::default(),
            patience: 10,
            eval_every: 0,
            max_steps: 10_000,
            validation_fraction: 0.1,
            seed: 17,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    Patience,
    MaxSteps,
    ExhaustedData,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    pub evaluations: usize,
    pub non_improving_at_stop: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub best_validation: Option<f64>,
    pub stop: StopReason,
    pub skipped_samples: usize,
}

/// Seeded shuffle split of sample indices into (train, validation).
pub fn validation_split(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x5eed_0f17);
    indices.shuffle(&mut rng);
    let n_val = (((n as f64) * fraction).floor() as usize).min(n.saturating_sub(1));
    let val = indices[..n_val].to_vec();
    let train = indices[n_val..].to_vec();
    (train, val)
}

fn mean_loss_over(
    samples: &[(UserId, ItemId)],
    indices: &[usize],
    graph: &InteractionGraph,
    features: &FeatureStore,
    params: &RetrieverParams,
    queries: &FrozenQueries,
    distance_cache: &mut BTreeMap<UserId, HopDistances>,
) -> Result<Option<f64>, RetrievalError> {
    let mut total = 0.0;
    let mut count = 0usize;
    for &idx in indices {
        let (user, item) = samples[idx];
        let true_users: BTreeSet<UserId> = graph.users_of(item).iter().copied().collect();
        if true_users.is_empty() {
            continue;
        }
        let (q1, q2) = &queries.by_user[&user];
        let distances = distance_cache
            .entry(user)
            .or_insert_with(|| graph.hop_distance(user).expect("user exists"));
        let embeddings = encode_users(features, distances, params, user)?;
        total += retriever_loss(q1, q2, &embeddings, &true_users)?;
        count += 1;
    }
    Ok((count > 0).then(|| total / count as f64))
}

/// Train the retriever on (target user, ground-truth item) samples. Query
/// embeddings are frozen inputs; the loss is optimized one sample per step
/// with Adam. Validation is a seeded split evaluated on a fixed cadence;
/// training stops after `patience` consecutive non-improving evaluations
/// and returns the best-validation parameters.
pub fn train_retriever(
    graph: &InteractionGraph,
    features: &FeatureStore,
    params0: &RetrieverParams,
    queries: &FrozenQueries,
    samples: &[(UserId, ItemId)],
    config: &TrainConfig,
) -> Result<(RetrieverParams, TrainReport), RetrievalError> {
    params0.validate()?;
    if samples.is_empty() {
        return Err(RetrievalError::NoUsableSamples);
    }
    let (train_idx, val_idx) =
        validation_split(samples.len(), config.validation_fraction, config.seed);
    let mut distance_cache: BTreeMap<UserId, HopDistances> = BTreeMap::new();

    let mut params = params0.clone();
    let mut flat = params.to_flat();
    let mut adam = Adam::new(config.optimizer, flat.len());
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);

    let initial_loss = mean_loss_over(
        samples,
        &train_idx,
        graph,
        features,
        &params,
        queries,
        &mut distance_cache,
    )?
    .ok_or(RetrievalError::NoUsableSamples)?;

    let eval_every =
        if config.eval_every == 0 { train_idx.len().max(1) } else { config.eval_every };
    let mut best_val: Option<f64> = None;
    let mut best_params = params.clone();
    let mut non_improving = 0usize;
    let mut evaluations = 0usize;
    let mut steps = 0usize;
    let mut skipped = 0usize;
    let stop;

    'outer: loop {
        let mut order = train_idx.clone();
        order.shuffle(&mut rng);
        let mut advanced = false;
        for idx in order {
            if steps >= config.max_steps {
                stop = StopReason::MaxSteps;
                break 'outer;
            }
            let (user, item) = samples[idx];
            let true_users: BTreeSet<UserId> = graph.users_of(item).iter().copied().collect();
            if true_users.is_empty() {
                skipped += 1;
                continue;
            }
            let (q1, q2) = &queries.by_user[&user];
            let distances = distance_cache
                .entry(user)
                .or_insert_with(|| graph.hop_distance(user).expect("user exists"));
            let (loss, grad) =
                retriever_loss_and_grad(features, distances, &params, user, q1, q2, &true_users)?;
            if !loss.is_finite() {
                return Err(RetrievalError::NonFiniteLoss { step: steps, loss });
            }
            adam.step(&mut flat, &grad.to_flat());
            params.assign_from_flat(&flat);
            steps += 1;
            advanced = true;

            if steps % eval_every == 0 && !val_idx.is_empty() {
                if let Some(val) = mean_loss_over(
                    samples,
                    &val_idx,
                    graph,
                    features,
                    &params,
                    queries,
                    &mut distance_cache,
                )? {
                    evaluations += 1;
                    if best_val.is_none_or(|b| val < b) {
                        best_val = Some(val);
                        best_params = params.clone();
                        non_improving = 0;
                    } else {
                        non_improving += 1;
                        if non_improving >= config.patience {
                            stop = StopReason::Patience;
                            break 'outer;
                        }
                    }
                }
            }
        }
        if !advanced {
            // Every sample lacked true users; nothing can train.
            stop = StopReason::ExhaustedData;
            break;
        }
    }

    let final_params = if best_val.is_some() { best_params } else { params };
    let final_loss = mean_loss_over(
        samples,
        &train_idx,
        graph,
        features,
        &final_params,
        queries,
        &mut distance_cache,
    )?
    .unwrap_or(initial_loss);

    Ok((
        final_params,
        TrainReport {
            steps,
            evaluations,
            non_improving_at_stop: non_improving,
            initial_loss,
            final_loss,
            best_validation: best_val,
            stop,
            skipped_samples: skipped,
        },
    ))
}
