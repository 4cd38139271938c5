//! GCN ranking over retrieved subgraphs.
//!
//! A two-layer graph convolution with symmetric degree-normalized
//! adjacency (self-loops included) encodes the target user over the final
//! subgraph; items are scored by inner product between that encoding and
//! their raw feature rows, and the ranker trains with BPR against sampled
//! negatives. Backpropagation is hand-derived; the loss only reads the
//! target row of the second layer, which keeps the backward pass to a few
//! vector products.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::FeatureStore;
use crate::graph::{ItemId, Subgraph, UserId};
use crate::matrix::{dot, Matrix};
use crate::optim::{Adam, AdamConfig};
use crate::retrieval::{StopReason, TrainReport};

#[derive(Debug, Error)]
pub enum GnnError {
    #[error("target user {0} is not in the subgraph")]
    TargetMissing(UserId),
    #[error("dimension mismatch: {0}")]
    Shape(String),
    #[error("negative-sample pool is empty")]
    EmptyPool,
    #[error("negative score list is empty")]
    NoNegatives,
    #[error("training loss became non-finite at step {step} (loss {loss})")]
    NonFiniteLoss { step: usize, loss: f64 },
    #[error("no trainable samples (all subgraphs degenerate or pools empty)")]
    NoUsableSamples,
}

/// Two-layer GCN parameters: d -> hidden (ReLU) -> d_out, with biases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GnnParams {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

impl GnnParams {
    /// Glorot-style uniform initialization from a seeded generator; biases
    /// start at zero.
    pub fn init(d: usize, hidden: usize, d_out: usize, seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut glorot = |fan_in: usize, fan_out: usize| {
            let scale = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| (rand::Rng::random::<f64>(&mut rng) * 2.0 - 1.0) * scale)
                .collect();
            Matrix::from_vec(fan_in, fan_out, data)
        };
        Self {
            w1: glorot(d, hidden),
            b1: vec![0.0; hidden],
            w2: glorot(hidden, d_out),
            b2: vec![0.0; d_out],
        }
    }

    pub fn d(&self) -> usize {
        self.w1.rows()
    }

    pub fn hidden(&self) -> usize {
        self.w1.cols()
    }

    pub fn d_out(&self) -> usize {
        self.w2.cols()
    }

    pub fn validate(&self) -> Result<(), GnnError> {
        if self.w1.cols() != self.w2.rows() {
            return Err(GnnError::Shape(format!(
                "layer-1 output {} does not feed layer-2 input {}",
                self.w1.cols(),
                self.w2.rows()
            )));
        }
        if self.b1.len() != self.hidden() || self.b2.len() != self.d_out() {
            return Err(GnnError::Shape("bias length mismatch".into()));
        }
        if !self.w1.is_finite()
            || !self.w2.is_finite()
            || self.b1.iter().any(|v| !v.is_finite())
            || self.b2.iter().any(|v| !v.is_finite())
        {
            return Err(GnnError::Shape("non-finite parameters".into()));
        }
        Ok(())
    }

    pub fn n_params(&self) -> usize {
        self.w1.data().len() + self.b1.len() + self.w2.data().len() + self.b2.len()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.n_params());
        flat.extend_from_slice(self.w1.data());
        flat.extend_from_slice(&self.b1);
        flat.extend_from_slice(self.w2.data());
        flat.extend_from_slice(&self.b2);
        flat
    }

    pub fn assign_from_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.n_params());
        let mut offset = 0;
        let w1_len = self.w1.data().len();
        self.w1.data_mut().copy_from_slice(&flat[offset..offset + w1_len]);
        offset += w1_len;
        let b1_len = self.b1.len();
        self.b1.copy_from_slice(&flat[offset..offset + b1_len]);
        offset += b1_len;
        let w2_len = self.w2.data().len();
        self.w2.data_mut().copy_from_slice(&flat[offset..offset + w2_len]);
        offset += w2_len;
        self.b2.copy_from_slice(&flat[offset..]);
    }

    fn zeros_like(&self) -> Self {
        Self {
            w1: Matrix::zeros(self.w1.rows(), self.w1.cols()),
            b1: vec![0.0; self.b1.len()],
            w2: Matrix::zeros(self.w2.rows(), self.w2.cols()),
            b2: vec![0.0; self.b2.len()],
        }
    }
}

/// Precomputed propagation state for one (subgraph, target) pair: the
/// symmetric-normalized adjacency applied to the node features (constant
/// across training steps) and its target row.
#[derive(Debug, Clone)]
pub struct GnnInput {
    /// Â·X, nodes ordered (sorted users, then sorted items).
    pub propagated: Matrix,
    /// Target row of Â.
    pub target_row: Vec<f64>,
    pub target_index: usize,
    pub items: Vec<ItemId>,
}

/// Build the propagation input: Â = D^{-1/2}(A+I)D^{-1/2} over the induced
/// subgraph, nodes carrying user feature rows and item feature rows.
pub fn build_gnn_input(
    subgraph: &Subgraph,
    features: &FeatureStore,
    target: UserId,
) -> Result<GnnInput, GnnError> {
    if !subgraph.users.contains(&target) {
        return Err(GnnError::TargetMissing(target));
    }
    let users: Vec<UserId> = subgraph.users.iter().copied().collect();
    let items: Vec<ItemId> = subgraph.items.iter().copied().collect();
    let n = users.len() + items.len();
    let d = features.dim();

    let user_index: BTreeMap<UserId, usize> =
        users.iter().enumerate().map(|(i, &u)| (u, i)).collect();
    let item_index: BTreeMap<ItemId, usize> =
        items.iter().enumerate().map(|(i, &v)| (v, users.len() + i)).collect();
    let target_index = user_index[&target];

    // Adjacency with self-loops; degree includes the self-loop.
    let mut neighbors: Vec<Vec<usize>> = vec![Vec::new(); n];
    for &(u, v) in &subgraph.edges {
        let (a, b) = (user_index[&u], item_index[&v]);
        neighbors[a].push(b);
        neighbors[b].push(a);
    }
    let degree: Vec<f64> = neighbors.iter().map(|adj| (adj.len() + 1) as f64).collect();

    let feature_row = |node: usize| -> &[f64] {
        if node < users.len() {
            features.user_row(users[node])
        } else {
            features.item_row(items[node - users.len()])
        }
    };

    let mut propagated = Matrix::zeros(n, d);
    for node in 0..n {
        let self_weight = 1.0 / degree[node];
        let row_out = propagated.row_mut(node);
        for (j, &x) in feature_row(node).iter().enumerate() {
            row_out[j] += self_weight * x;
        }
        for &other in &neighbors[node] {
            let weight = 1.0 / (degree[node] * degree[other]).sqrt();
            let row_in = feature_row(other);
            let row_out = propagated.row_mut(node);
            for (j, &x) in row_in.iter().enumerate() {
                row_out[j] += weight * x;
            }
        }
    }

    let mut target_row = vec![0.0; n];
    target_row[target_index] = 1.0 / degree[target_index];
    for &other in &neighbors[target_index] {
        target_row[other] = 1.0 / (degree[target_index] * degree[other]).sqrt();
    }

    Ok(GnnInput { propagated, target_row, target_index, items })
}

fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// Forward pass returning the target user's output row:
/// H_t = row_t(Â)·ReLU(Â·X·W1 + b1)·W2 + b2.
pub fn forward_target(input: &GnnInput, params: &GnnParams) -> Result<Vec<f64>, GnnError> {
    params.validate()?;
    if input.propagated.cols() != params.d() {
        return Err(GnnError::Shape(format!(
            "feature dim {} vs layer-1 input {}",
            input.propagated.cols(),
            params.d()
        )));
    }
    let pre1 = input.propagated.matmul(&params.w1);
    let hidden = params.hidden();
    // Weighted sum over nodes of ReLU(pre1 + b1), weights = target row of Â.
    let mut pooled = vec![0.0; hidden];
    for (node, &weight) in input.target_row.iter().enumerate() {
        if weight == 0.0 {
            continue;
        }
        let row = pre1.row(node);
        for j in 0..hidden {
            pooled[j] += weight * relu(row[j] + params.b1[j]);
        }
    }
    let mut out = params.b2.clone();
    for (i, &p) in pooled.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        let w_row = params.w2.row(i);
        for (j, o) in out.iter_mut().enumerate() {
            *o += p * w_row[j];
        }
    }
    Ok(out)
}

/// Encode the target user over a subgraph (public operation; training uses
/// [`build_gnn_input`] + [`forward_target`] to reuse the propagation).
pub fn gcn_forward(
    subgraph: &Subgraph,
    features: &FeatureStore,
    params: &GnnParams,
    target: UserId,
) -> Result<Vec<f64>, GnnError> {
    let input = build_gnn_input(subgraph, features, target)?;
    forward_target(&input, params)
}

/// Inner-product score between a user encoding and an item feature row.
pub fn score(user_encoding: &[f64], item_features: &[f64]) -> Result<f64, GnnError> {
    if user_encoding.len() != item_features.len() {
        return Err(GnnError::Shape(format!(
            "score dims {} vs {}",
            user_encoding.len(),
            item_features.len()
        )));
    }
    Ok(dot(user_encoding, item_features))
}

/// Uniform sample without replacement from `candidates \ positives`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NegativeSample {
    pub items: Vec<ItemId>,
    /// True when the pool held fewer than the requested n.
    pub shortfall: bool,
}

pub fn sample_negatives(
    candidates: &BTreeSet<ItemId>,
    positives: &BTreeSet<ItemId>,
    n: usize,
    rng: &mut ChaCha20Rng,
) -> Result<NegativeSample, GnnError> {
    let pool: Vec<ItemId> = candidates.difference(positives).copied().collect();
    if pool.is_empty() {
        return Err(GnnError::EmptyPool);
    }
    if pool.len() <= n {
        return Ok(NegativeSample { shortfall: pool.len() < n, items: pool });
    }
    let mut items: Vec<ItemId> = pool.choose_multiple(rng, n).copied().collect();
    items.sort_unstable();
    Ok(NegativeSample { items, shortfall: false })
}

/// Numerically stable softplus: ln(1 + e^x) = max(x, 0) + ln1p(e^{-|x|}).
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// BPR loss: -Σ log σ(pos - neg) = Σ softplus(neg - pos).
pub fn bpr_loss(pos_score: f64, neg_scores: &[f64]) -> Result<f64, GnnError> {
    if neg_scores.is_empty() {
        return Err(GnnError::NoNegatives);
    }
    Ok(neg_scores.iter().map(|&neg| softplus(neg - pos_score)).sum())
}

/// Loss and gradient of the BPR objective through the full GCN pipeline
/// for one (target, positive, negatives) sample.
pub fn bpr_loss_and_grad(
    input: &GnnInput,
    params: &GnnParams,
    features: &FeatureStore,
    positive: ItemId,
    negatives: &[ItemId],
) -> Result<(f64, GnnParams), GnnError> {
    if negatives.is_empty() {
        return Err(GnnError::NoNegatives);
    }
    let encoding = forward_target(input, params)?;
    let pos_row = features.item_row(positive);
    let pos_score = score(&encoding, pos_row)?;

    let mut loss = 0.0;
    // dL/dH accumulated across the positive and all negatives.
    let mut dh = vec![0.0; encoding.len()];
    for &neg in negatives {
        let neg_row = features.item_row(neg);
        let neg_score = score(&encoding, neg_row)?;
        let margin = neg_score - pos_score;
        loss += softplus(margin);
        let weight = sigmoid(margin); // d softplus(m)/dm
        for (j, g) in dh.iter_mut().enumerate() {
            *g += weight * (neg_row[j] - pos_row[j]);
        }
    }

    // Backward through H_t = pooledᵀ·W2 + b2 with
    // pooled = Σ_m â_tm · ReLU(A1[m]), A1 = (Â X)·W1 + b1.
    let pre1 = input.propagated.matmul(&params.w1);
    let hidden = params.hidden();
    let mut pooled = vec![0.0; hidden];
    for (node, &weight) in input.target_row.iter().enumerate() {
        if weight == 0.0 {
            continue;
        }
        let row = pre1.row(node);
        for j in 0..hidden {
            pooled[j] += weight * relu(row[j] + params.b1[j]);
        }
    }

    let mut grad = params.zeros_like();
    grad.b2.copy_from_slice(&dh);
    for i in 0..hidden {
        if pooled[i] == 0.0 {
            continue;
        }
        let row = grad.w2.row_mut(i);
        for (j, &g) in dh.iter().enumerate() {
            row[j] = pooled[i] * g;
        }
    }
    // d pooled = W2 · dH
    let mut dpooled = vec![0.0; hidden];
    for i in 0..hidden {
        dpooled[i] = dot(params.w2.row(i), &dh);
    }
    // Through ReLU and the propagation weights into W1, b1.
    for (node, &weight) in input.target_row.iter().enumerate() {
        if weight == 0.0 {
            continue;
        }
        let pre_row = pre1.row(node);
        let px_row = input.propagated.row(node);
        for j in 0..hidden {
            if pre_row[j] + params.b1[j] <= 0.0 {
                continue;
            }
            let g = weight * dpooled[j];
            if g == 0.0 {
                continue;
            }
            grad.b1[j] += g;
            for (i, &x) in px_row.iter().enumerate() {
                if x != 0.0 {
                    *grad
                        .w1
                        .data_mut()
                        .get_mut(i * hidden + j)
                        .expect("w1 index in range") += x * g;
                }
            }
        }
    }
    Ok((loss, grad))
}

/// Ranked recommendation list, scores strictly non-increasing, ties broken
/// by ascending item id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub target: UserId,
    pub entries: Vec<(ItemId, f64)>,
    pub subgraph_fingerprint: String,
    /// True when every candidate was excluded.
    pub exhausted: bool,
}

impl RankedList {
    pub fn top(&self, n: usize) -> impl Iterator<Item = &(ItemId, f64)> {
        self.entries.iter().take(n)
    }
}

/// Score every subgraph item outside `exclude` by inner product with the
/// user encoding, descending; an empty candidate set is flagged rather
/// than an error.
pub fn rank_items(
    subgraph: &Subgraph,
    user_encoding: &[f64],
    features: &FeatureStore,
    exclude: &BTreeSet<ItemId>,
    target: UserId,
) -> Result<RankedList, GnnError> {
    let mut entries: Vec<(ItemId, f64)> = Vec::with_capacity(subgraph.items.len());
    for &item in &subgraph.items {
        if exclude.contains(&item) {
            continue;
        }
        entries.push((item, score(user_encoding, features.item_row(item))?));
    }
    entries.sort_unstable_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(RankedList {
        target,
        exhausted: entries.is_empty(),
        entries,
        subgraph_fingerprint: subgraph.fingerprint(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GnnTrainConfig {
    pub optimizer: AdamConfig,
    pub patience: usize,
    pub eval_every: usize,
    pub max_steps: usize,
    pub validation_fraction: f64,
    /// Negatives sampled per positive.
    pub negative_set: usize,
    /// Validation metric cutoff (hit-rate within top-K of the candidate
    /// ranking).
    pub recall_cutoff: usize,
    pub seed: u64,
}

impl Default for GnnTrainConfig {
    fn default() -> Self {
        Self {
            optimizer: AdamConfig::default(),
            patience: 10,
            eval_every: 0,
            max_steps: 10_000,
            validation_fraction: 0.1,
            negative_set: 10,
            recall_cutoff: 20,
            seed: 23,
        }
    }
}

/// Per-user frozen retrieval output consumed by GNN training and
/// evaluation.
pub struct SubgraphContext {
    pub subgraph: Subgraph,
    pub input: GnnInput,
    /// Items to exclude from ranking (the user's adjacency).
    pub exclude: BTreeSet<ItemId>,
}

impl SubgraphContext {
    pub fn build(
        subgraph: Subgraph,
        features: &FeatureStore,
        target: UserId,
        exclude: BTreeSet<ItemId>,
    ) -> Result<Self, GnnError> {
        let input = build_gnn_input(&subgraph, features, target)?;
        Ok(Self { subgraph, input, exclude })
    }
}

fn validation_hit_rate(
    samples: &[(UserId, ItemId)],
    indices: &[usize],
    contexts: &BTreeMap<UserId, SubgraphContext>,
    features: &FeatureStore,
    params: &GnnParams,
    cutoff: usize,
) -> Result<Option<f64>, GnnError> {
    let mut hits = 0usize;
    let mut count = 0usize;
    for &idx in indices {
        let (user, item) = samples[idx];
        let Some(ctx) = contexts.get(&user) else { continue };
        if ctx.subgraph.degenerate {
            continue;
        }
        let encoding = forward_target(&ctx.input, params)?;
        let ranked = rank_items(&ctx.subgraph, &encoding, features, &ctx.exclude, user)?;
        count += 1;
        if ranked.top(cutoff).any(|&(v, _)| v == item) {
            hits += 1;
        }
    }
    Ok((count > 0).then(|| hits as f64 / count as f64))
}

/// Train the GNN with BPR over frozen per-user subgraphs. Per sample the
/// positive is the labeled item and negatives are drawn from the subgraph
/// item set minus the user's positives. Early stopping watches validation
/// hit-rate@`recall_cutoff` with the configured patience and the best
/// parameters are returned.
pub fn train_gnn(
    samples: &[(UserId, ItemId)],
    contexts: &BTreeMap<UserId, SubgraphContext>,
    features: &FeatureStore,
    params0: &GnnParams,
    config: &GnnTrainConfig,
) -> Result<(GnnParams, TrainReport), GnnError> {
    params0.validate()?;
    if samples.is_empty() {
        return Err(GnnError::NoUsableSamples);
    }
    let (train_idx, val_idx) = crate::retrieval::validation_split(
        samples.len(),
        config.validation_fraction,
        config.seed,
    );

    let mut params = params0.clone();
    let mut flat = params.to_flat();
    let mut adam = Adam::new(config.optimizer, flat.len());
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);

    let sample_loss = |params: &GnnParams,
                       user: UserId,
                       item: ItemId,
                       rng: &mut ChaCha20Rng|
     -> Result<Option<(f64, GnnParams)>, GnnError> {
        let Some(ctx) = contexts.get(&user) else { return Ok(None) };
        if ctx.subgraph.degenerate {
            return Ok(None);
        }
        let mut positives = ctx.exclude.clone();
        positives.insert(item);
        let negatives = match sample_negatives(
            &ctx.subgraph.items,
            &positives,
            config.negative_set,
            rng,
        ) {
            Ok(sample) => sample.items,
            Err(GnnError::EmptyPool) => return Ok(None),
            Err(e) => return Err(e),
        };
        let (loss, grad) = bpr_loss_and_grad(&ctx.input, params, features, item, &negatives)?;
        Ok(Some((loss, grad)))
    };

    let mean_train_loss = |params: &GnnParams| -> Result<Option<f64>, GnnError> {
        // Fixed negative stream so before/after losses are comparable.
        let mut loss_rng = ChaCha20Rng::seed_from_u64(config.seed ^ 0x10ad);
        let mut total = 0.0;
        let mut count = 0usize;
        for &idx in &train_idx {
            let (user, item) = samples[idx];
            if let Some((loss, _)) = sample_loss(params, user, item, &mut loss_rng)? {
                total += loss;
                count += 1;
            }
        }
        Ok((count > 0).then(|| total / count as f64))
    };

    let initial_loss = mean_train_loss(&params)?.ok_or(GnnError::NoUsableSamples)?;

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
            let Some((loss, grad)) = sample_loss(&params, user, item, &mut rng)? else {
                skipped += 1;
                continue;
            };
            if !loss.is_finite() {
                return Err(GnnError::NonFiniteLoss { step: steps, loss });
            }
            adam.step(&mut flat, &grad.to_flat());
            params.assign_from_flat(&flat);
            steps += 1;
            advanced = true;

            if steps % eval_every == 0 && !val_idx.is_empty() {
                if let Some(metric) = validation_hit_rate(
                    samples,
                    &val_idx,
                    contexts,
                    features,
                    &params,
                    config.recall_cutoff,
                )? {
                    evaluations += 1;
                    // Higher hit-rate is better.
                    if best_val.is_none_or(|b| metric > b) {
                        best_val = Some(metric);
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
            stop = StopReason::ExhaustedData;
            break;
        }
    }

    let final_params = if best_val.is_some() { best_params } else { params };
    let final_loss = mean_train_loss(&final_params)?.unwrap_or(initial_loss);
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_graph, RawInteraction, RetrievalStage};

    fn features(user_rows: Vec<Vec<f64>>, item_rows: Vec<Vec<f64>>) -> FeatureStore {
        FeatureStore::new(Matrix::from_rows(user_rows), Matrix::from_rows(item_rows))
    }

    fn isolated_target_subgraph() -> (Subgraph, UserId) {
        let sub = Subgraph {
            stage: RetrievalStage::Intent,
            users: BTreeSet::from([UserId(0)]),
            items: BTreeSet::new(),
            edges: vec![],
            degenerate: true,
        };
        (sub, UserId(0))
    }

    #[test]
    fn isolated_target_collapses_to_the_self_formula() {
        // Self-loop only: H = W2ᵀ·ReLU(W1ᵀ·F_u) when biases are zero.
        let (sub, target) = isolated_target_subgraph();
        let fs = features(vec![vec![1.0, -2.0]], vec![vec![0.0, 0.0]]);
        let mut params = GnnParams::init(2, 2, 2, 0);
        params.w1 = Matrix::from_rows(vec![vec![1.0, 0.5], vec![-1.0, 0.25]]);
        params.w2 = Matrix::from_rows(vec![vec![2.0, 0.0], vec![1.0, -1.0]]);
        params.b1 = vec![0.0, 0.0];
        params.b2 = vec![0.0, 0.0];
        let h = gcn_forward(&sub, &fs, &params, target).unwrap();
        // W1ᵀ f = [1*1 + (-1)(-2), 0.5*1 + 0.25*(-2)] = [3, 0]; ReLU -> [3, 0]
        // H = [3*2 + 0*1, 3*0 + 0*(-1)] = [6, 0]
        assert_eq!(h, vec![6.0, 0.0]);
    }

    #[test]
    fn all_zero_params_yield_zero_encoding() {
        let (sub, target) = isolated_target_subgraph();
        let fs = features(vec![vec![1.0, -2.0]], vec![vec![0.0, 0.0]]);
        let mut params = GnnParams::init(2, 3, 2, 0);
        params.w1 = Matrix::zeros(2, 3);
        params.w2 = Matrix::zeros(3, 2);
        params.b1 = vec![0.0; 3];
        params.b2 = vec![0.0; 2];
        let h = gcn_forward(&sub, &fs, &params, target).unwrap();
        assert_eq!(h, vec![0.0, 0.0]);
    }

    #[test]
    fn path_graph_matches_hand_propagation() {
        // u0 - i0 - u1: degrees with self-loops are 2, 3, 2.
        let recs = vec![
            RawInteraction { user: "u0".into(), item: "i0".into(), timestamp: 1 },
            RawInteraction { user: "u1".into(), item: "i0".into(), timestamp: 2 },
        ];
        let graph = build_graph(&recs, &[]).unwrap();
        let target = graph.user_id("u0").unwrap();
        let sub = graph.induce_subgraph(&graph.all_users(), RetrievalStage::Intent).unwrap();
        let fs = features(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![vec![2.0, 2.0]]);
        let mut params = GnnParams::init(2, 2, 2, 0);
        params.w1 = Matrix::from_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        params.w2 = Matrix::from_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        params.b1 = vec![0.0, 0.0];
        params.b2 = vec![0.0, 0.0];

        // Â rows (node order u0, u1, i0):
        //   u0: self 1/2, i0 1/sqrt(6)
        //   u1: self 1/2, i0 1/sqrt(6)
        //   i0: self 1/3, u0 1/sqrt(6), u1 1/sqrt(6)
        let s = 1.0 / 6.0f64.sqrt();
        let z0 = [0.5 + 2.0 * s, 2.0 * s]; // Â X row u0 (identity W1, ReLU no-op: positive)
        let z1 = [2.0 * s, 0.5 + 2.0 * s];
        let zi = [s + 2.0 / 3.0, s + 2.0 / 3.0];
        // Layer 2: H_u0 = 0.5*z0 + s*zi (identity W2).
        let expected = [0.5 * z0[0] + s * zi[0], 0.5 * z0[1] + s * zi[1]];
        let _ = z1;
        let h = gcn_forward(&sub, &fs, &params, target).unwrap();
        assert!((h[0] - expected[0]).abs() < 1e-12, "{h:?} vs {expected:?}");
        assert!((h[1] - expected[1]).abs() < 1e-12);
    }

    #[test]
    fn encoding_is_invariant_to_node_relabeling() {
        // Same topology ingested in two different orders: internal ids and
        // thus node ordering differ, but the target encoding must agree.
        let recs_a = vec![
            RawInteraction { user: "t".into(), item: "x".into(), timestamp: 1 },
            RawInteraction { user: "o".into(), item: "x".into(), timestamp: 2 },
            RawInteraction { user: "o".into(), item: "y".into(), timestamp: 3 },
        ];
        let recs_b = vec![
            RawInteraction { user: "o".into(), item: "y".into(), timestamp: 3 },
            RawInteraction { user: "o".into(), item: "x".into(), timestamp: 2 },
            RawInteraction { user: "t".into(), item: "x".into(), timestamp: 1 },
        ];
        let params = GnnParams::init(3, 4, 3, 11);
        let mut results = Vec::new();
        for recs in [recs_a, recs_b] {
            let graph = build_graph(&recs, &[]).unwrap();
            let target = graph.user_id("t").unwrap();
            // Features keyed by external id so both orderings agree.
            let mut user_rows = vec![vec![0.0; 3]; graph.n_users()];
            user_rows[graph.user_id("t").unwrap().0 as usize] = vec![1.0, 2.0, 3.0];
            user_rows[graph.user_id("o").unwrap().0 as usize] = vec![-1.0, 0.5, 0.0];
            let mut item_rows = vec![vec![0.0; 3]; graph.n_items()];
            item_rows[graph.item_id("x").unwrap().0 as usize] = vec![0.25, -0.5, 1.0];
            item_rows[graph.item_id("y").unwrap().0 as usize] = vec![2.0, 0.0, -1.0];
            let fs = features(user_rows, item_rows);
            let sub =
                graph.induce_subgraph(&graph.all_users(), RetrievalStage::Intent).unwrap();
            results.push(gcn_forward(&sub, &fs, &params, target).unwrap());
        }
        for (a, b) in results[0].iter().zip(&results[1]) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn score_examples() {
        let x = vec![1.0, 2.0];
        assert_eq!(score(&x, &x).unwrap(), 5.0);
        assert_eq!(score(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(score(&[1.0, 2.0], &[3.0, -1.0]).unwrap(), 1.0);
        assert!(matches!(score(&[1.0], &[1.0, 2.0]), Err(GnnError::Shape(_))));
    }

    #[test]
    fn negative_sampling_contract() {
        let pool: BTreeSet<ItemId> = (0..10).map(ItemId).collect();
        let mut rng = ChaCha20Rng::seed_from_u64(1);

        // Pool exactly n: returns the entire pool, no shortfall.
        let all = sample_negatives(&pool, &BTreeSet::new(), 10, &mut rng).unwrap();
        assert_eq!(all.items.len(), 10);
        assert!(!all.shortfall);

        // Positives exhaust the pool: sampling error.
        assert!(matches!(
            sample_negatives(&pool, &pool, 3, &mut rng),
            Err(GnnError::EmptyPool)
        ));

        // Fixed seed reproduces the sample.
        let mut rng_a = ChaCha20Rng::seed_from_u64(7);
        let mut rng_b = ChaCha20Rng::seed_from_u64(7);
        let a = sample_negatives(&pool, &BTreeSet::from([ItemId(0)]), 4, &mut rng_a).unwrap();
        let b = sample_negatives(&pool, &BTreeSet::from([ItemId(0)]), 4, &mut rng_b).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.items.len(), 4);
        assert!(a.items.iter().all(|v| *v != ItemId(0)));

        // Undersized pool returns everything and flags it.
        let small: BTreeSet<ItemId> = (0..3).map(ItemId).collect();
        let short = sample_negatives(&small, &BTreeSet::new(), 10, &mut rng).unwrap();
        assert_eq!(short.items.len(), 3);
        assert!(short.shortfall);
    }

    #[test]
    fn bpr_equal_scores_give_ten_ln_two() {
        let loss = bpr_loss(1.5, &[1.5; 10]).unwrap();
        assert!((loss - 10.0 * 2.0f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn bpr_vanishes_when_positive_dominates() {
        let loss = bpr_loss(1e6, &[0.0, 1.0]).unwrap();
        assert!(loss >= 0.0);
        assert!(loss < 1e-12);
    }

    #[test]
    fn bpr_hand_example() {
        // pos=1, negs=[0,2]: softplus(-1) + softplus(1) ≈ 1.62652.
        let loss = bpr_loss(1.0, &[0.0, 2.0]).unwrap();
        let expected = (1.0 + (-1.0f64).exp()).ln() + (1.0 + 1.0f64.exp()).ln();
        assert!((loss - expected).abs() < 1e-12);
        assert!((loss - 1.6265).abs() < 1e-3);
        assert!(matches!(bpr_loss(1.0, &[]), Err(GnnError::NoNegatives)));
    }

    fn toy_context() -> (FeatureStore, BTreeMap<UserId, SubgraphContext>, Vec<(UserId, ItemId)>)
    {
        let recs = vec![
            RawInteraction { user: "u0".into(), item: "i0".into(), timestamp: 1 },
            RawInteraction { user: "u0".into(), item: "i1".into(), timestamp: 2 },
            RawInteraction { user: "u1".into(), item: "i1".into(), timestamp: 3 },
            RawInteraction { user: "u1".into(), item: "i2".into(), timestamp: 4 },
            RawInteraction { user: "u0".into(), item: "i3".into(), timestamp: 5 },
        ];
        let graph = build_graph(&recs, &[("u0".to_string(), "i3".to_string())]).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let d = 4;
        let mut rand_rows = |n: usize| -> Vec<Vec<f64>> {
            (0..n)
                .map(|_| {
                    (0..d).map(|_| rand::Rng::random::<f64>(&mut rng) * 2.0 - 1.0).collect()
                })
                .collect()
        };
        let fs = features(rand_rows(graph.n_users()), rand_rows(graph.n_items()));
        let target = graph.user_id("u0").unwrap();
        let sub = graph.induce_subgraph(&graph.all_users(), RetrievalStage::Intent).unwrap();
        let exclude: BTreeSet<ItemId> = graph.items_of(target).iter().copied().collect();
        let ctx = SubgraphContext::build(sub, &fs, target, exclude).unwrap();
        let samples = vec![(target, graph.item_id("i3").unwrap())];
        (fs, BTreeMap::from([(target, ctx)]), samples)
    }

    #[test]
    fn gnn_gradients_match_finite_differences_smoke() {
        let (fs, contexts, samples) = toy_context();
        let (user, item) = samples[0];
        let ctx = &contexts[&user];
        let params = GnnParams::init(4, 3, 4, 5);
        let negatives: Vec<ItemId> =
            ctx.subgraph.items.iter().copied().filter(|v| *v != item).take(2).collect();
        let (_, grad) = bpr_loss_and_grad(&ctx.input, &params, &fs, item, &negatives).unwrap();
        let analytic = grad.to_flat();
        let flat0 = params.to_flat();
        let step = 1e-5;
        for (i, &g) in analytic.iter().enumerate() {
            let eval = |delta: f64| {
                let mut p = params.clone();
                let mut f = flat0.clone();
                f[i] += delta;
                p.assign_from_flat(&f);
                let h = forward_target(&ctx.input, &p).unwrap();
                let pos = score(&h, fs.item_row(item)).unwrap();
                let negs: Vec<f64> =
                    negatives.iter().map(|&v| score(&h, fs.item_row(v)).unwrap()).collect();
                bpr_loss(pos, &negs).unwrap()
            };
            let numeric = (eval(step) - eval(-step)) / (2.0 * step);
            let denom = g.abs().max(numeric.abs()).max(1e-7);
            assert!(
                ((g - numeric) / denom).abs() < 1e-4,
                "param {i}: analytic {g} vs numeric {numeric}"
            );
        }
    }

    #[test]
    fn ranking_is_descending_and_respects_exclusions() {
        let sub = Subgraph {
            stage: RetrievalStage::Intent,
            users: BTreeSet::from([UserId(0)]),
            items: BTreeSet::from([ItemId(0), ItemId(1), ItemId(2)]),
            edges: vec![],
            degenerate: false,
        };
        let fs = features(
            vec![vec![1.0, 0.0]],
            vec![vec![1.0, 0.0], vec![2.0, 0.0], vec![0.5, 0.0]],
        );
        let h = vec![1.0, 0.0];
        let ranked = rank_items(&sub, &h, &fs, &BTreeSet::new(), UserId(0)).unwrap();
        let ids: Vec<ItemId> = ranked.entries.iter().map(|&(v, _)| v).collect();
        assert_eq!(ids, vec![ItemId(1), ItemId(0), ItemId(2)]);
        for pair in ranked.entries.windows(2) {
            assert!(pair[0].1 >= pair[1].1);
        }

        let one = rank_items(&sub, &h, &fs, &BTreeSet::from([ItemId(1), ItemId(2)]), UserId(0))
            .unwrap();
        assert_eq!(one.entries.len(), 1);
        assert!(!one.exhausted);

        let none = rank_items(
            &sub,
            &h,
            &fs,
            &BTreeSet::from([ItemId(0), ItemId(1), ItemId(2)]),
            UserId(0),
        )
        .unwrap();
        assert!(none.exhausted);
        assert!(none.entries.is_empty());
    }

    #[test]
    fn ranking_ties_break_by_item_id() {
        let sub = Subgraph {
            stage: RetrievalStage::Intent,
            users: BTreeSet::from([UserId(0)]),
            items: BTreeSet::from([ItemId(0), ItemId(1)]),
            edges: vec![],
            degenerate: false,
        };
        let fs = features(vec![vec![1.0]], vec![vec![2.0], vec![2.0]]);
        let ranked = rank_items(&sub, &[1.0], &fs, &BTreeSet::new(), UserId(0)).unwrap();
        assert_eq!(ranked.entries[0].0, ItemId(0));
    }

    #[test]
    fn target_missing_from_subgraph_errors() {
        let (sub, _) = isolated_target_subgraph();
        let fs = features(vec![vec![1.0, 0.0]], vec![vec![0.0, 0.0]]);
        let params = GnnParams::init(2, 2, 2, 0);
        assert!(matches!(
            gcn_forward(&sub, &fs, &params, UserId(5)),
            Err(GnnError::TargetMissing(_))
        ));
    }

    #[test]
    fn training_reduces_loss_and_zero_lr_freezes_params() {
        let (fs, contexts, samples) = toy_context();
        let params = GnnParams::init(4, 3, 4, 5);

        let config = GnnTrainConfig {
            optimizer: AdamConfig::with_learning_rate(1e-2),
            max_steps: 100,
            validation_fraction: 0.0,
            negative_set: 2,
            ..GnnTrainConfig::default()
        };
        let (_, report) = train_gnn(&samples, &contexts, &fs, &params, &config).unwrap();
        assert_eq!(report.steps, 100);
        assert!(
            report.final_loss < report.initial_loss,
            "final {} vs initial {}",
            report.final_loss,
            report.initial_loss
        );

        let frozen = GnnTrainConfig {
            optimizer: AdamConfig::with_learning_rate(0.0),
            max_steps: 10,
            validation_fraction: 0.0,
            negative_set: 2,
            ..GnnTrainConfig::default()
        };
        let (trained, _) = train_gnn(&samples, &contexts, &fs, &params, &frozen).unwrap();
        assert_eq!(trained, params);
    }
}
