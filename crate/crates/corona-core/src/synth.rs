//! Planted-cluster synthetic dataset generator.
//!
//! Users and items are split into clusters; each user purchases mostly
//! within their own cluster (probability `p_in`). Every cluster gets a
//! signature genre word that appears in user profiles (`Interest`) and in
//! item attributes, and feature vectors are planted around the encoded
//! direction of that word, so the mock chat -> mock embedding -> cosine
//! retrieval chain can actually find the cluster from the reasoning text.
//! The last two purchases of each user become the held-out train/test
//! labeled samples.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::features::{ItemText, UserProfile};
use crate::graph::{RawInteraction, RetrievalStage};
use crate::llm::{GatewayError, LlmGateway};
use crate::matrix::Matrix;

const GENRE_WORDS: [&str; 12] = [
    "western", "noir", "musical", "wuxia", "documentary", "slapstick", "cyberpunk", "opera",
    "kaiju", "heist", "giallo", "mockumentary",
];

const COUNTRIES: [&str; 6] = ["US", "FR", "JP", "BR", "DE", "KR"];
const GENDERS: [&str; 2] = ["Female", "Male"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub users: usize,
    pub items: usize,
    pub clusters: usize,
    /// Probability that a purchase stays inside the user's cluster.
    pub in_cluster_probability: f64,
    pub purchases_per_user: usize,
    /// Feature dimensionality of the generated dataset.
    pub dim: usize,
    /// Relative noise around each cluster's feature direction.
    pub feature_noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            users: 300,
            items: 500,
            clusters: 5,
            in_cluster_probability: 0.9,
            purchases_per_user: 12,
            dim: 32,
            feature_noise: 0.2,
            seed: 1,
        }
    }
}

/// A generated dataset in ingestion-ready form, plus the planted cluster
/// assignments for verification.
#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub interactions: Vec<RawInteraction>,
    /// Second-to-last purchase of each user.
    pub train_mask: Vec<(String, String)>,
    /// Last purchase of each user.
    pub test_mask: Vec<(String, String)>,
    pub user_features: Matrix,
    pub item_features: Matrix,
    pub user_profiles: Vec<UserProfile>,
    pub item_texts: Vec<ItemText>,
    pub user_cluster: Vec<usize>,
    pub item_cluster: Vec<usize>,
    pub genre_of_cluster: Vec<String>,
}

fn user_key(u: usize) -> String {
    format!("u{u:04}")
}

fn item_key(v: usize) -> String {
    format!("v{v:04}")
}

/// Generate the dataset. The gateway supplies the embedding pipeline that
/// cluster feature directions are planted against; passing the same mock
/// configuration used at train/eval time is what aligns reasoning text
/// with features.
pub fn generate(config: &SynthConfig, gateway: &LlmGateway) -> Result<SynthDataset, SynthError> {
    if config.clusters == 0 || config.users == 0 || config.items == 0 {
        return Err(SynthError::Degenerate("users, items and clusters must be positive".into()));
    }
    if config.clusters > config.users || config.clusters > config.items {
        return Err(SynthError::Degenerate("more clusters than users or items".into()));
    }
    if !(0.0..=1.0).contains(&config.in_cluster_probability) {
        return Err(SynthError::Degenerate("in-cluster probability outside [0, 1]".into()));
    }
    if config.purchases_per_user < 3 {
        // Two purchases become held-out samples; at least one must remain.
        return Err(SynthError::Degenerate("need at least 3 purchases per user".into()));
    }
    if gateway.target_dim() != config.dim {
        return Err(SynthError::Degenerate(format!(
            "gateway target dim {} does not match synth dim {}",
            gateway.target_dim(),
            config.dim
        )));
    }

    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    let genre_of_cluster: Vec<String> = (0..config.clusters)
        .map(|c| {
            GENRE_WORDS.get(c).map_or_else(|| format!("genre{c}"), |w| (*w).to_string())
        })
        .collect();

    // Demographic attributes are deterministic per cluster. With the
    // profile fully determined by the cluster, every profile token carries
    // cluster signal through the mock reasoning chain instead of acting as
    // per-user noise.
    let cluster_age = |c: usize| (22 + 9 * c).to_string();
    let cluster_gender = |c: usize| GENDERS[c % GENDERS.len()].to_string();
    let cluster_country = |c: usize| COUNTRIES[c % COUNTRIES.len()].to_string();

    // Cluster feature directions come from the same encoding pipeline the
    // retriever will use on reasoning text, over the full signature phrase
    // a cluster member's profile contributes to that text.
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(config.clusters);
    for c in 0..config.clusters {
        let signature = format!(
            "{} {} {} {}",
            genre_of_cluster[c],
            cluster_age(c),
            cluster_gender(c),
            cluster_country(c)
        );
        centers.push(gateway.encode_text(&signature, RetrievalStage::Preference)?.vector);
    }

    let user_cluster: Vec<usize> = (0..config.users).map(|u| u % config.clusters).collect();
    let item_cluster: Vec<usize> = (0..config.items).map(|v| v % config.clusters).collect();
    let items_of_cluster: Vec<Vec<usize>> = (0..config.clusters)
        .map(|c| (0..config.items).filter(|&v| item_cluster[v] == c).collect())
        .collect();

    let planted_row = |center: &[f64], rng: &mut ChaCha20Rng, noise: f64| -> Vec<f64> {
        center
            .iter()
            .map(|&c| {
                let jitter: f64 = rng.random::<f64>() * 2.0 - 1.0;
                // Narrow through f32 so CRNF round-trips are bit-exact.
                ((c + noise * jitter) as f32) as f64
            })
            .collect()
    };

    let mut user_features = Matrix::zeros(config.users, config.dim);
    for u in 0..config.users {
        let row = planted_row(&centers[user_cluster[u]], &mut rng, config.feature_noise);
        user_features.row_mut(u).copy_from_slice(&row);
    }
    let mut item_features = Matrix::zeros(config.items, config.dim);
    for v in 0..config.items {
        let row = planted_row(&centers[item_cluster[v]], &mut rng, config.feature_noise);
        item_features.row_mut(v).copy_from_slice(&row);
    }

    let user_profiles: Vec<UserProfile> = (0..config.users)
        .map(|u| {
            let c = user_cluster[u];
            let mut attributes = std::collections::BTreeMap::new();
            attributes.insert("Interest".to_string(), genre_of_cluster[c].clone());
            attributes.insert("Age".to_string(), cluster_age(c));
            attributes.insert("Gender".to_string(), cluster_gender(c));
            attributes.insert("Country".to_string(), cluster_country(c));
            UserProfile { id: user_key(u), attributes }
        })
        .collect();

    let item_texts: Vec<ItemText> = (0..config.items)
        .map(|v| {
            let mut attributes = std::collections::BTreeMap::new();
            attributes
                .insert("genre".to_string(), vec![genre_of_cluster[item_cluster[v]].clone()]);
            ItemText {
                id: item_key(v),
                title: Some(format!("Feature {v:04}")),
                year: Some(rng.random_range(1930..2025)),
                attributes,
            }
        })
        .collect();

    let users_of_cluster: Vec<Vec<usize>> = (0..config.clusters)
        .map(|c| (0..config.users).filter(|&u| user_cluster[u] == c).collect())
        .collect();

    let mut interactions = Vec::with_capacity(config.users * config.purchases_per_user);
    let mut train_mask = Vec::with_capacity(config.users);
    let mut test_mask = Vec::with_capacity(config.users);
    let mut item_covered = vec![false; config.items];
    for u in 0..config.users {
        let own = user_cluster[u];
        let mut chosen: Vec<usize> = Vec::with_capacity(config.purchases_per_user);
        let mut guard = 0;
        while chosen.len() < config.purchases_per_user && guard < config.purchases_per_user * 50
        {
            guard += 1;
            let cluster = if rng.random::<f64>() < config.in_cluster_probability {
                own
            } else {
                // Uniform over the other clusters (or own when alone).
                if config.clusters == 1 {
                    own
                } else {
                    let mut c = rng.random_range(0..config.clusters - 1);
                    if c >= own {
                        c += 1;
                    }
                    c
                }
            };
            let pool = &items_of_cluster[cluster];
            let item = pool[rng.random_range(0..pool.len())];
            if !chosen.contains(&item) {
                chosen.push(item);
            }
        }
        for (t, &item) in chosen.iter().enumerate() {
            item_covered[item] = true;
            interactions.push(RawInteraction {
                user: user_key(u),
                item: item_key(item),
                timestamp: (u * config.purchases_per_user + t) as i64,
            });
        }
        if chosen.len() >= 3 {
            let test_item = chosen[chosen.len() - 1];
            let train_item = chosen[chosen.len() - 2];
            train_mask.push((user_key(u), item_key(train_item)));
            test_mask.push((user_key(u), item_key(test_item)));
        }
    }

    // Every item must appear in at least one interaction, otherwise the
    // ingested graph and the feature matrices disagree on the item
    // universe. Uncovered items get one purchase from a same-cluster user.
    let coverage_base = (config.users * config.purchases_per_user) as i64;
    for v in 0..config.items {
        if item_covered[v] {
            continue;
        }
        let pool = &users_of_cluster[item_cluster[v]];
        let u = pool[rng.random_range(0..pool.len())];
        interactions.push(RawInteraction {
            user: user_key(u),
            item: item_key(v),
            timestamp: coverage_base + v as i64,
        });
    }

    Ok(SynthDataset {
        interactions,
        train_mask,
        test_mask,
        user_features,
        item_features,
        user_profiles,
        item_texts,
        user_cluster,
        item_cluster,
        genre_of_cluster,
    })
}

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("degenerate synthetic configuration: {0}")]
    Degenerate(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}
