//! Bipartite user-item interaction graph.
//!
//! Owns ingestion of raw interaction records, hop-distance computation over
//! the user projection, time-sorted purchase histories and subgraph
//! induction. The graph is immutable once built; labeled train/test samples
//! are kept out of the adjacency as masked edges.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Dense internal user id, assigned in first-seen ingestion order.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct UserId(pub u32);

/// Dense internal item id, assigned in first-seen ingestion order.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct ItemId(pub u32);

impl fmt::Display for UserId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "u#{}", self.0)
    }
}

impl fmt::Display for ItemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "i#{}", self.0)
    }
}

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("malformed interaction record at line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("mask pair ({user}, {item}) does not match any ingested interaction")]
    MaskNotPresent { user: String, item: String },
    #[error("unknown user id: {0}")]
    UnknownUser(String),
    #[error("unknown item id: {0}")]
    UnknownItem(String),
    #[error("subgraph user set is empty")]
    EmptyUserSet,
    #[error("user set contains id {0} outside the graph universe")]
    UserOutOfRange(UserId),
}

/// One ingested interaction, pre-registry. External ids stay strings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawInteraction {
    pub user: String,
    pub item: String,
    pub timestamp: i64,
}

/// Parse tab-separated `user<TAB>item<TAB>unix_timestamp` records, one per
/// line. Blank lines are skipped; anything else malformed names its line.
pub fn parse_interactions(text: &str) -> Result<Vec<RawInteraction>, GraphError> {
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let (user, item, ts) = match (fields.next(), fields.next(), fields.next()) {
            (Some(u), Some(i), Some(t)) => (u, i, t),
            _ => {
                return Err(GraphError::MalformedRecord {
                    line: line_no,
                    reason: "expected user<TAB>item<TAB>timestamp".into(),
                })
            }
        };
        if user.is_empty() || item.is_empty() {
            return Err(GraphError::MalformedRecord {
                line: line_no,
                reason: "empty user or item id".into(),
            });
        }
        let timestamp = ts.trim().parse::<i64>().map_err(|e| GraphError::MalformedRecord {
            line: line_no,
            reason: format!("bad timestamp {ts:?}: {e}"),
        })?;
        out.push(RawInteraction { user: user.to_string(), item: item.to_string(), timestamp });
    }
    Ok(out)
}

/// Parse `user<TAB>item` mask records (same format, no timestamp column).
pub fn parse_mask(text: &str) -> Result<Vec<(String, String)>, GraphError> {
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        match (fields.next(), fields.next()) {
            (Some(u), Some(i)) if !u.is_empty() && !i.is_empty() => {
                out.push((u.to_string(), i.to_string()))
            }
            _ => {
                return Err(GraphError::MalformedRecord {
                    line: line_no,
                    reason: "expected user<TAB>item".into(),
                })
            }
        }
    }
    Ok(out)
}

/// Bidirectional registry between external string ids and dense internal ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct IdRegistry {
    forward: Vec<String>,
    reverse: BTreeMap<String, u32>,
}

impl IdRegistry {
    fn intern(&mut self, key: &str) -> u32 {
        if let Some(&id) = self.reverse.get(key) {
            return id;
        }
        let id = self.forward.len() as u32;
        self.forward.push(key.to_string());
        self.reverse.insert(key.to_string(), id);
        id
    }

    pub fn lookup(&self, key: &str) -> Option<u32> {
        self.reverse.get(key).copied()
    }

    pub fn key(&self, id: u32) -> Option<&str> {
        self.forward.get(id as usize).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }
}

/// Hop bucket of a user relative to a retrieval target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HopBucket {
    /// Shares at least one item with the target.
    One,
    /// Two steps away in the user projection.
    Two,
    /// Three or more steps away, or disconnected.
    Beyond,
}

/// Hop buckets for every user except the target itself.
#[derive(Debug, Clone)]
pub struct HopDistances {
    target: UserId,
    buckets: Vec<HopBucket>,
}

impl HopDistances {
    pub fn target(&self) -> UserId {
        self.target
    }

    /// Bucket for `user`; `None` for the target (not part of the map).
    pub fn bucket(&self, user: UserId) -> Option<HopBucket> {
        if user == self.target {
            return None;
        }
        self.buckets.get(user.0 as usize).copied()
    }

    /// Bucket used when encoding rows: the target's own row takes the
    /// "beyond" encoding since distance-to-self has no hop bucket.
    pub fn encoding_bucket(&self, user: UserId) -> HopBucket {
        self.bucket(user).unwrap_or(HopBucket::Beyond)
    }

    pub fn iter(&self) -> impl Iterator<Item = (UserId, HopBucket)> + '_ {
        self.buckets
            .iter()
            .enumerate()
            .map(|(i, &b)| (UserId(i as u32), b))
            .filter(move |(u, _)| *u != self.target)
    }
}

/// Retrieval stage that produced a subgraph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RetrievalStage {
    Preference,
    Intent,
}

/// A user-induced slice of the interaction graph: the given users, every
/// item adjacent to them, and the edges between the two sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subgraph {
    pub stage: RetrievalStage,
    pub users: BTreeSet<UserId>,
    pub items: BTreeSet<ItemId>,
    pub edges: Vec<(UserId, ItemId)>,
    /// True when the user set has no surviving edges (item set empty).
    pub degenerate: bool,
}

impl Subgraph {
    /// Stable digest of the member sets, recorded in ranked outputs so a
    /// recommendation can be traced back to the subgraph that produced it.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(match self.stage {
            RetrievalStage::Preference => b"P",
            RetrievalStage::Intent => b"I",
        });
        for u in &self.users {
            hasher.update(u.0.to_le_bytes());
        }
        hasher.update(b"/");
        for v in &self.items {
            hasher.update(v.0.to_le_bytes());
        }
        hex_prefix(&hasher.finalize(), 16)
    }
}

pub(crate) fn hex_prefix(bytes: &[u8], len: usize) -> String {
    let mut s = String::with_capacity(len * 2);
    for b in bytes.iter().take(len) {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Immutable bipartite interaction graph with per-user histories and a
/// masked labeled-sample set kept out of the adjacency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionGraph {
    user_registry: IdRegistry,
    item_registry: IdRegistry,
    user_items: Vec<Vec<ItemId>>,
    item_users: Vec<Vec<UserId>>,
    /// Per user, (item, timestamp) sorted ascending by (timestamp, item);
    /// includes masked interactions.
    histories: Vec<Vec<(ItemId, i64)>>,
    masked: BTreeSet<(UserId, ItemId)>,
}

/// Build the graph from interaction triples plus a mask of labeled sample
/// pairs. Duplicate (user, item) pairs collapse to one edge; the history
/// keeps the latest timestamp. Masked pairs must exist among the
/// interactions; they are excluded from the adjacency but stay in the
/// history and in the labeled set.
pub fn build_graph(
    interactions: &[RawInteraction],
    mask: &[(String, String)],
) -> Result<InteractionGraph, GraphError> {
    let mut user_registry = IdRegistry::default();
    let mut item_registry = IdRegistry::default();
    let mut latest: HashMap<(u32, u32), i64> = HashMap::new();
    let mut order: Vec<(u32, u32)> = Vec::new();

    for rec in interactions {
        let u = user_registry.intern(&rec.user);
        let v = item_registry.intern(&rec.item);
        match latest.entry((u, v)) {
            std::collections::hash_map::Entry::Occupied(mut e) => {
                if rec.timestamp > *e.get() {
                    e.insert(rec.timestamp);
                }
            }
            std::collections::hash_map::Entry::Vacant(e) => {
                e.insert(rec.timestamp);
                order.push((u, v));
            }
        }
    }

    let mut masked = BTreeSet::new();
    for (user, item) in mask {
        let u = user_registry
            .lookup(user)
            .ok_or_else(|| GraphError::MaskNotPresent { user: user.clone(), item: item.clone() })?;
        let v = item_registry
            .lookup(item)
            .ok_or_else(|| GraphError::MaskNotPresent { user: user.clone(), item: item.clone() })?;
        if !latest.contains_key(&(u, v)) {
            return Err(GraphError::MaskNotPresent { user: user.clone(), item: item.clone() });
        }
        masked.insert((UserId(u), ItemId(v)));
    }

    let n_users = user_registry.len();
    let n_items = item_registry.len();
    let mut user_items: Vec<Vec<ItemId>> = vec![Vec::new(); n_users];
    let mut item_users: Vec<Vec<UserId>> = vec![Vec::new(); n_items];
    let mut histories: Vec<Vec<(ItemId, i64)>> = vec![Vec::new(); n_users];

    for &(u, v) in &order {
        let ts = latest[&(u, v)];
        histories[u as usize].push((ItemId(v), ts));
        if !masked.contains(&(UserId(u), ItemId(v))) {
            user_items[u as usize].push(ItemId(v));
            item_users[v as usize].push(UserId(u));
        }
    }
    for list in &mut user_items {
        list.sort_unstable();
    }
    for list in &mut item_users {
        list.sort_unstable();
    }
    for hist in &mut histories {
        hist.sort_unstable_by_key(|&(item, ts)| (ts, item));
    }

    Ok(InteractionGraph { user_registry, item_registry, user_items, item_users, histories, masked })
}

impl InteractionGraph {
    pub fn n_users(&self) -> usize {
        self.user_registry.len()
    }

    pub fn n_items(&self) -> usize {
        self.item_registry.len()
    }

    pub fn users(&self) -> impl Iterator<Item = UserId> {
        (0..self.n_users() as u32).map(UserId)
    }

    pub fn items(&self) -> impl Iterator<Item = ItemId> {
        (0..self.n_items() as u32).map(ItemId)
    }

    pub fn all_users(&self) -> BTreeSet<UserId> {
        self.users().collect()
    }

    pub fn user_id(&self, key: &str) -> Option<UserId> {
        self.user_registry.lookup(key).map(UserId)
    }

    pub fn item_id(&self, key: &str) -> Option<ItemId> {
        self.item_registry.lookup(key).map(ItemId)
    }

    pub fn user_key(&self, id: UserId) -> Option<&str> {
        self.user_registry.key(id.0)
    }

    pub fn item_key(&self, id: ItemId) -> Option<&str> {
        self.item_registry.key(id.0)
    }

    pub fn contains_user(&self, id: UserId) -> bool {
        (id.0 as usize) < self.n_users()
    }

    pub fn contains_item(&self, id: ItemId) -> bool {
        (id.0 as usize) < self.n_items()
    }

    /// Items adjacent to `user` (masked pairs excluded), ascending.
    pub fn items_of(&self, user: UserId) -> &[ItemId] {
        &self.user_items[user.0 as usize]
    }

    /// Users adjacent to `item` (masked pairs excluded), ascending.
    pub fn users_of(&self, item: ItemId) -> &[UserId] {
        &self.item_users[item.0 as usize]
    }

    /// Full interaction history, masked pairs included, sorted by time.
    pub fn history(&self, user: UserId) -> &[(ItemId, i64)] {
        &self.histories[user.0 as usize]
    }

    /// History restricted to non-masked interactions: what the user is
    /// "known" to have purchased when labeled samples must stay hidden.
    pub fn visible_history(&self, user: UserId) -> Vec<(ItemId, i64)> {
        self.history(user)
            .iter()
            .filter(|&&(item, _)| !self.masked.contains(&(user, item)))
            .copied()
            .collect()
    }

    pub fn masked_edges(&self) -> &BTreeSet<(UserId, ItemId)> {
        &self.masked
    }

    pub fn is_masked(&self, user: UserId, item: ItemId) -> bool {
        self.masked.contains(&(user, item))
    }

    /// Total interaction count of an item: adjacency degree plus masked
    /// labeled samples. Used for the cold-item slice.
    pub fn item_interaction_count(&self, item: ItemId) -> usize {
        let masked = self.masked.iter().filter(|&&(_, v)| v == item).count();
        self.users_of(item).len() + masked
    }

    /// Hop buckets of every other user relative to `target`: bucket one for
    /// users sharing an item, bucket two for users two steps away in the
    /// user projection, beyond otherwise (disconnected users included).
    pub fn hop_distance(&self, target: UserId) -> Result<HopDistances, GraphError> {
        if !self.contains_user(target) {
            return Err(GraphError::UnknownUser(target.to_string()));
        }
        let n = self.n_users();
        let mut buckets = vec![HopBucket::Beyond; n];

        let mut one_hop: BTreeSet<UserId> = BTreeSet::new();
        for &item in self.items_of(target) {
            for &u in self.users_of(item) {
                if u != target {
                    one_hop.insert(u);
                }
            }
        }
        for &u in &one_hop {
            buckets[u.0 as usize] = HopBucket::One;
        }
        for &u in &one_hop {
            for &item in self.items_of(u) {
                for &w in self.users_of(item) {
                    if w != target && !one_hop.contains(&w) {
                        buckets[w.0 as usize] = HopBucket::Two;
                    }
                }
            }
        }
        Ok(HopDistances { target, buckets })
    }

    /// Induce the subgraph spanned by `users`: their full item
    /// neighborhoods plus every parent edge with both endpoints inside.
    pub fn induce_subgraph(
        &self,
        users: &BTreeSet<UserId>,
        stage: RetrievalStage,
    ) -> Result<Subgraph, GraphError> {
        if users.is_empty() {
            return Err(GraphError::EmptyUserSet);
        }
        if let Some(&bad) = users.iter().find(|u| !self.contains_user(**u)) {
            return Err(GraphError::UserOutOfRange(bad));
        }
        let mut items = BTreeSet::new();
        let mut edges = Vec::new();
        for &u in users {
            for &v in self.items_of(u) {
                items.insert(v);
                edges.push((u, v));
            }
        }
        let degenerate = items.is_empty();
        Ok(Subgraph { stage, users: users.clone(), items, edges, degenerate })
    }

    /// Canonical digest over the whole graph, used as the dataset
    /// fingerprint component.
    pub fn fingerprint(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("graph serialization cannot fail");
        let mut hasher = Sha256::new();
        hasher.update(&bytes);
        hex_prefix(&hasher.finalize(), 16)
    }
}
