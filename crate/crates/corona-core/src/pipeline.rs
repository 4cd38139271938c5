//! End-to-end orchestration: configuration, dataset bundles, training
//! commands, recommendation, evaluation and ablations.
//!
//! All command surfaces of the CLI live here as library functions so the
//! acceptance suite can drive them in-process. Commands are idempotent or
//! explicitly versioned (checkpoints append, never overwrite) and report
//! wall time plus LLM call accounting.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::checkpoint::{self, Checkpoint, CheckpointError};
use crate::eval::{
    evaluate_mode, AblationMode, EvalConfig, EvalError, MetricsReport, ModeEvaluation,
    ModelBundle,
};
use crate::features::{save_features, write_jsonl, FeatureError, FeatureStore, TextStore};
use crate::gnn::{
    forward_target, rank_items, train_gnn, GnnError, GnnParams, GnnTrainConfig, RankedList,
    SubgraphContext,
};
use crate::graph::{
    build_graph, parse_interactions, parse_mask, GraphError, InteractionGraph, ItemId, UserId,
};
use crate::llm::{BackendKind, GatewayError, GatewayStats, LlmConfig, LlmGateway, RetryPolicy};
use crate::optim::AdamConfig;
use crate::retrieval::{
    freeze_queries, stage1_retrieve, stage2_retrieve, train_retriever, RetrievalConfig,
    RetrievalError, RetrieverParams, TrainConfig, TrainReport,
};
use crate::synth::{generate, SynthConfig, SynthError};

pub const RETRIEVER_KIND: &str = "retriever";
pub const GNN_KIND: &str = "gnn";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("missing input file: {0}")]
    MissingInput(String),
    #[error("unknown user id: {0}")]
    UnknownUser(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Gnn(#[from] GnnError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Synth(#[from] SynthError),
}

/// Process exit classes: 2 validation, 3 backend/transport, 4 missing
/// artifact.
impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Gateway(e) | PipelineError::Retrieval(RetrievalError::Gateway(e)) => {
                match e {
                    GatewayError::Transport(_)
                    | GatewayError::BadStatus { .. }
                    | GatewayError::MalformedResponse(_)
                    | GatewayError::RetriesExhausted { .. } => 3,
                    _ => 2,
                }
            }
            PipelineError::Checkpoint(CheckpointError::NotFound { .. })
            | PipelineError::MissingInput(_) => 4,
            PipelineError::Io { source, .. }
                if source.kind() == std::io::ErrorKind::NotFound =>
            {
                4
            }
            _ => 2,
        }
    }
}

fn io_err(path: &Path, source: std::io::Error) -> PipelineError {
    PipelineError::Io { path: path.display().to_string(), source }
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub interactions: PathBuf,
    #[serde(default)]
    pub train_mask: Option<PathBuf>,
    #[serde(default)]
    pub test_mask: Option<PathBuf>,
    pub user_features: PathBuf,
    pub item_features: PathBuf,
    pub user_texts: PathBuf,
    pub item_texts: PathBuf,
    pub cache_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub bundle_dir: PathBuf,
    #[serde(default)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LlmFileConfig {
    pub chat: BackendKind,
    pub embedding: BackendKind,
    pub temperature: f64,
    pub embed_dim_native: usize,
    pub projection_seed: u64,
    pub retry_attempts: u32,
    pub retry_base_backoff_ms: u64,
    pub max_in_flight: usize,
}

impl Default for LlmFileConfig {
    fn default() -> Self {
        Self {
            chat: BackendKind::Mock { seed: 1 },
            embedding: BackendKind::Mock { seed: 1 },
            temperature: 0.2,
            embed_dim_native: 1536,
            projection_seed: 7,
            retry_attempts: 3,
            retry_base_backoff_ms: 1_000,
            max_in_flight: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingFileConfig {
    pub learning_rate: f64,
    pub patience: usize,
    pub negative_set: usize,
    pub d: usize,
    pub dim_e: usize,
    pub hidden: usize,
    /// 0 evaluates once per epoch.
    pub eval_every: usize,
    pub max_steps: usize,
    pub validation_fraction: f64,
}

impl Default for TrainingFileConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-6,
            patience: 10,
            negative_set: 10,
            d: 128,
            dim_e: 2,
            hidden: 128,
            eval_every: 0,
            max_steps: 10_000,
            validation_fraction: 0.1,
        }
    }
}

impl TrainingFileConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.learning_rate < 0.0 || !self.learning_rate.is_finite() {
            return Err(PipelineError::Config("learning_rate must be non-negative".into()));
        }
        for (name, v) in
            [("patience", self.patience), ("negative_set", self.negative_set), ("d", self.d), ("hidden", self.hidden), ("max_steps", self.max_steps)]
        {
            if v == 0 {
                return Err(PipelineError::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    pub fn retriever_train(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            optimizer: AdamConfig::with_learning_rate(self.learning_rate),
            patience: self.patience,
            eval_every: self.eval_every,
            max_steps: self.max_steps,
            validation_fraction: self.validation_fraction,
            seed,
        }
    }

    pub fn gnn_train(&self, seed: u64) -> GnnTrainConfig {
        GnnTrainConfig {
            optimizer: AdamConfig::with_learning_rate(self.learning_rate),
            patience: self.patience,
            eval_every: self.eval_every,
            max_steps: self.max_steps,
            validation_fraction: self.validation_fraction,
            negative_set: self.negative_set,
            recall_cutoff: 20,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalFileConfig {
    pub cutoffs: Vec<usize>,
    pub runs: usize,
    pub cold_start_threshold: usize,
    pub ablation_modes: Vec<String>,
    pub workers: usize,
}

impl Default for EvalFileConfig {
    fn default() -> Self {
        Self {
            cutoffs: vec![10, 20, 50],
            runs: 5,
            cold_start_threshold: 2,
            ablation_modes: vec![
                "corona".into(),
                "full-graph".into(),
                "fixed-1hop".into(),
                "fixed-2hop".into(),
            ],
            workers: 1,
        }
    }
}

impl EvalFileConfig {
    pub fn to_eval_config(&self) -> Result<EvalConfig, PipelineError> {
        let modes = self
            .ablation_modes
            .iter()
            .map(|m| AblationMode::parse(m))
            .collect::<Result<Vec<_>, _>>()?;
        let config = EvalConfig {
            cutoffs: self.cutoffs.clone(),
            runs: self.runs,
            cold_start_threshold: self.cold_start_threshold,
            ablation_modes: modes,
            workers: self.workers.max(1),
        };
        config.validate()?;
        Ok(config)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub paths: PathsConfig,
    #[serde(default)]
    pub llm: LlmFileConfig,
    #[serde(default)]
    pub retrieval: RetrievalConfig,
    #[serde(default)]
    pub training: TrainingFileConfig,
    #[serde(default)]
    pub eval: EvalFileConfig,
}

fn default_seed() -> u64 {
    42
}

/// Expand `${VAR}` references from the environment; unresolved variables
/// are a configuration error.
pub fn interpolate_env(raw: &str) -> Result<String, PipelineError> {
    let mut out = String::with_capacity(raw.len());
    let mut rest = raw;
    while let Some(start) = rest.find("${") {
        out.push_str(&rest[..start]);
        let tail = &rest[start + 2..];
        let Some(end) = tail.find('}') else {
            return Err(PipelineError::Config("unterminated ${ in config".into()));
        };
        let name = &tail[..end];
        let value = std::env::var(name).map_err(|_| {
            PipelineError::Config(format!("environment variable {name} is not set"))
        })?;
        out.push_str(&value);
        rest = &tail[end + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

impl PipelineConfig {
    pub fn from_file(path: &Path) -> Result<Self, PipelineError> {
        let raw = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        Self::from_toml(&raw)
    }

    pub fn from_toml(raw: &str) -> Result<Self, PipelineError> {
        let interpolated = interpolate_env(raw)?;
        let config: PipelineConfig = toml::from_str(&interpolated)
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.training.validate()?;
        self.retrieval.validate()?;
        self.llm_config().validate()?;
        self.eval.to_eval_config()?;
        Ok(())
    }

    pub fn llm_config(&self) -> LlmConfig {
        LlmConfig {
            chat: self.llm.chat.clone(),
            embedding: self.llm.embedding.clone(),
            temperature: self.llm.temperature,
            embed_dim_native: self.llm.embed_dim_native,
            target_dim: self.training.d,
            projection_seed: self.llm.projection_seed,
            cache_dir: Some(self.paths.cache_dir.clone()),
            retry: RetryPolicy {
                attempts: self.llm.retry_attempts,
                base_backoff_ms: self.llm.retry_base_backoff_ms,
            },
            max_in_flight: self.llm.max_in_flight,
        }
    }

    pub fn gateway(&self) -> Result<LlmGateway, PipelineError> {
        Ok(LlmGateway::from_config(&self.llm_config())?)
    }
}

// ---------------------------------------------------------------------------
// Dataset bundle
// ---------------------------------------------------------------------------

/// Validated dataset: graph plus aligned features and texts.
#[derive(Debug)]
pub struct Dataset {
    pub graph: InteractionGraph,
    pub features: FeatureStore,
    pub texts: TextStore,
    /// (user, item) labeled training samples (masked from adjacency).
    pub train_samples: Vec<(UserId, ItemId)>,
    /// (user, item) held-out test samples (masked from adjacency).
    pub test_samples: Vec<(UserId, ItemId)>,
    pub fingerprint: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BundleManifest {
    pub fingerprint: String,
    pub n_users: usize,
    pub n_items: usize,
    pub dim: usize,
    pub n_train_samples: usize,
    pub n_test_samples: usize,
    pub warnings: Vec<String>,
}

fn digest_file(path: &Path) -> Result<String, PipelineError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(crate::graph::hex_prefix(&hasher.finalize(), 16))
}

fn mask_to_internal(
    graph: &InteractionGraph,
    mask: &[(String, String)],
) -> Vec<(UserId, ItemId)> {
    mask.iter()
        .filter_map(|(u, v)| Some((graph.user_id(u)?, graph.item_id(v)?)))
        .collect()
}

/// Load and validate the raw dataset named by the config. A missing mask
/// file is tolerated (empty mask, warning recorded); everything else must
/// parse and align.
pub fn load_dataset(config: &PipelineConfig) -> Result<(Dataset, Vec<String>), PipelineError> {
    let paths = &config.paths;
    let mut warnings = Vec::new();

    let read_required = |path: &Path| -> Result<String, PipelineError> {
        if !path.exists() {
            return Err(PipelineError::MissingInput(path.display().to_string()));
        }
        fs::read_to_string(path).map_err(|e| io_err(path, e))
    };
    let interactions = parse_interactions(&read_required(&paths.interactions)?)?;

    let mut read_mask = |label: &str,
                         path: &Option<PathBuf>|
     -> Result<Vec<(String, String)>, PipelineError> {
        match path {
            Some(p) if p.exists() => {
                Ok(parse_mask(&fs::read_to_string(p).map_err(|e| io_err(p, e))?)?)
            }
            Some(p) => {
                warnings.push(format!(
                    "{label} mask file {} missing; proceeding with empty mask",
                    p.display()
                ));
                Ok(vec![])
            }
            None => {
                warnings.push(format!("no {label} mask configured; proceeding with empty mask"));
                Ok(vec![])
            }
        }
    };
    let train_mask = read_mask("train", &paths.train_mask)?;
    let test_mask = read_mask("test", &paths.test_mask)?;

    let mut full_mask = train_mask.clone();
    full_mask.extend(test_mask.iter().cloned());
    let graph = build_graph(&interactions, &full_mask)?;

    let features = FeatureStore::load(
        &paths.user_features,
        &paths.item_features,
        &graph,
        config.training.d,
    )?;
    let texts = TextStore::load(&paths.user_texts, &paths.item_texts, &graph)?;
    if texts.filled_users > 0 || texts.filled_items > 0 {
        warnings.push(format!(
            "filled {} user and {} item text records with empty attributes",
            texts.filled_users, texts.filled_items
        ));
    }

    let train_samples = mask_to_internal(&graph, &train_mask);
    let test_samples = mask_to_internal(&graph, &test_mask);

    let mut hasher = Sha256::new();
    hasher.update(graph.fingerprint().as_bytes());
    hasher.update(digest_file(&paths.user_features)?.as_bytes());
    hasher.update(digest_file(&paths.item_features)?.as_bytes());
    hasher.update(digest_file(&paths.user_texts)?.as_bytes());
    hasher.update(digest_file(&paths.item_texts)?.as_bytes());
    let fingerprint = crate::graph::hex_prefix(&hasher.finalize(), 16);

    Ok((
        Dataset { graph, features, texts, train_samples, test_samples, fingerprint },
        warnings,
    ))
}

/// Outcome common to all commands: wall time plus gateway accounting.
#[derive(Debug, Clone, Serialize)]
pub struct CommandStats {
    pub wall_ms: u128,
    pub seed: u64,
    pub gateway: GatewayStats,
}

#[derive(Debug)]
pub struct IngestOutcome {
    pub manifest: BundleManifest,
    pub stats: CommandStats,
    /// True when an identical bundle was already present.
    pub unchanged: bool,
}

/// Validate the raw dataset and persist the bundle manifest. Re-running on
/// identical inputs is a no-op (same fingerprint).
pub fn cmd_ingest(config: &PipelineConfig) -> Result<IngestOutcome, PipelineError> {
    let start = Instant::now();
    let (dataset, warnings) = load_dataset(config)?;
    fs::create_dir_all(&config.paths.bundle_dir)
        .map_err(|e| io_err(&config.paths.bundle_dir, e))?;
    let manifest_path = config.paths.bundle_dir.join("manifest.json");
    let manifest = BundleManifest {
        fingerprint: dataset.fingerprint.clone(),
        n_users: dataset.graph.n_users(),
        n_items: dataset.graph.n_items(),
        dim: dataset.features.dim(),
        n_train_samples: dataset.train_samples.len(),
        n_test_samples: dataset.test_samples.len(),
        warnings,
    };
    let unchanged = match fs::read_to_string(&manifest_path) {
        Ok(old) => serde_json::from_str::<BundleManifest>(&old)
            .map(|m| m.fingerprint == manifest.fingerprint)
            .unwrap_or(false),
        Err(_) => false,
    };
    if !unchanged {
        let graph_path = config.paths.bundle_dir.join("graph.json");
        let graph_json = serde_json::to_string(&dataset.graph)
            .expect("graph serialization cannot fail");
        fs::write(&graph_path, graph_json).map_err(|e| io_err(&graph_path, e))?;
        fs::write(
            &manifest_path,
            serde_json::to_string_pretty(&manifest).expect("manifest serialization"),
        )
        .map_err(|e| io_err(&manifest_path, e))?;
    }
    Ok(IngestOutcome {
        manifest,
        unchanged,
        stats: CommandStats {
            wall_ms: start.elapsed().as_millis(),
            seed: config.seed,
            gateway: GatewayStats::default(),
        },
    })
}

/// Write a generated planted-cluster dataset to the configured raw paths.
pub fn cmd_synth(
    config: &PipelineConfig,
    synth: &SynthConfig,
) -> Result<CommandStats, PipelineError> {
    let start = Instant::now();
    // The generator plants features against the configured embedding
    // pipeline so mock reasoning stays aligned with the feature space.
    let mut llm_config = config.llm_config();
    llm_config.target_dim = synth.dim;
    let gateway = LlmGateway::from_config(&llm_config)?;
    let data = generate(synth, &gateway)?;

    let paths = &config.paths;
    for dir in [&paths.interactions, &paths.user_features] {
        if let Some(parent) = dir.parent() {
            fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
        }
    }
    let mut tsv = String::new();
    for rec in &data.interactions {
        tsv.push_str(&format!("{}\t{}\t{}\n", rec.user, rec.item, rec.timestamp));
    }
    fs::write(&paths.interactions, tsv).map_err(|e| io_err(&paths.interactions, e))?;

    let write_mask = |path: &Option<PathBuf>, mask: &[(String, String)]| -> Result<(), PipelineError> {
        let Some(path) = path else {
            return Err(PipelineError::Config(
                "synth requires train_mask and test_mask paths".into(),
            ));
        };
        let mut text = String::new();
        for (u, v) in mask {
            text.push_str(&format!("{u}\t{v}\n"));
        }
        fs::write(path, text).map_err(|e| io_err(path, e))
    };
    write_mask(&paths.train_mask, &data.train_mask)?;
    write_mask(&paths.test_mask, &data.test_mask)?;

    save_features(&paths.user_features, &data.user_features)?;
    save_features(&paths.item_features, &data.item_features)?;
    write_jsonl(&paths.user_texts, &data.user_profiles)?;
    write_jsonl(&paths.item_texts, &data.item_texts)?;

    Ok(CommandStats {
        wall_ms: start.elapsed().as_millis(),
        seed: synth.seed,
        gateway: gateway.stats(),
    })
}

// ---------------------------------------------------------------------------
// Checkpoint conversion
// ---------------------------------------------------------------------------

pub fn retriever_to_checkpoint(
    params: &RetrieverParams,
    projection_seed: u64,
    k: usize,
) -> Checkpoint {
    let mut ckpt = Checkpoint::new(RETRIEVER_KIND);
    ckpt.push_vector("e1", &params.e[0]);
    ckpt.push_vector("e2", &params.e[1]);
    ckpt.push_vector("e3", &params.e[2]);
    ckpt.push_tensor("fusion_weight", params.fusion_weight.clone());
    ckpt.push_vector("fusion_bias", &params.fusion_bias);
    ckpt.set_extra("d", params.d);
    ckpt.set_extra("dim_e", params.dim_e);
    ckpt.set_extra("projection_seed", projection_seed);
    ckpt.set_extra("k", k);
    ckpt
}

pub fn retriever_from_checkpoint(
    ckpt: &Checkpoint,
    path: &Path,
) -> Result<RetrieverParams, PipelineError> {
    ckpt.expect_kind(path, RETRIEVER_KIND)?;
    let fusion_weight = ckpt.tensor(path, "fusion_weight")?.clone();
    let fusion_bias = ckpt.vector(path, "fusion_bias")?;
    let e = [
        ckpt.vector(path, "e1")?,
        ckpt.vector(path, "e2")?,
        ckpt.vector(path, "e3")?,
    ];
    let d = fusion_bias.len();
    let dim_e = e[0].len();
    let params = RetrieverParams { dim_e, d, e, fusion_weight, fusion_bias };
    params.validate().map_err(PipelineError::Retrieval)?;
    Ok(params)
}

pub fn gnn_to_checkpoint(params: &GnnParams) -> Checkpoint {
    let mut ckpt = Checkpoint::new(GNN_KIND);
    ckpt.push_tensor("w1", params.w1.clone());
    ckpt.push_vector("b1", &params.b1);
    ckpt.push_tensor("w2", params.w2.clone());
    ckpt.push_vector("b2", &params.b2);
    ckpt.set_extra("d", params.d());
    ckpt.set_extra("hidden", params.hidden());
    ckpt.set_extra("d_out", params.d_out());
    ckpt
}

pub fn gnn_from_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<GnnParams, PipelineError> {
    ckpt.expect_kind(path, GNN_KIND)?;
    let params = GnnParams {
        w1: ckpt.tensor(path, "w1")?.clone(),
        b1: ckpt.vector(path, "b1")?,
        w2: ckpt.tensor(path, "w2")?.clone(),
        b2: ckpt.vector(path, "b2")?,
    };
    params.validate().map_err(PipelineError::Gnn)?;
    Ok(params)
}

// ---------------------------------------------------------------------------
// Training commands
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint_path: PathBuf,
    pub report: TrainReport,
    pub stats: CommandStats,
}

pub fn cmd_train_retriever(config: &PipelineConfig) -> Result<TrainOutcome, PipelineError> {
    let start = Instant::now();
    let (dataset, _) = load_dataset(config)?;
    if dataset.train_samples.is_empty() {
        return Err(PipelineError::Config(
            "no training samples: train_mask is empty or missing".into(),
        ));
    }
    let gateway = config.gateway()?;
    let params0 = RetrieverParams::init(config.training.d, config.training.dim_e, config.seed);
    let queries = freeze_queries(
        &dataset.graph,
        &dataset.features,
        &dataset.texts,
        &params0,
        &config.retrieval,
        &gateway,
        &dataset.train_samples,
    )?;
    let train_config = config.training.retriever_train(config.seed);
    let (params, report) = train_retriever(
        &dataset.graph,
        &dataset.features,
        &params0,
        &queries,
        &dataset.train_samples,
        &train_config,
    )?;
    let path = checkpoint::next_versioned_path(&config.paths.checkpoint_dir, RETRIEVER_KIND)?;
    retriever_to_checkpoint(&params, config.llm.projection_seed, config.retrieval.k)
        .save(&path)?;
    Ok(TrainOutcome {
        checkpoint_path: path,
        report,
        stats: CommandStats {
            wall_ms: start.elapsed().as_millis(),
            seed: config.seed,
            gateway: gateway.stats(),
        },
    })
}

/// Final-stage subgraph contexts for a set of users under the chain
/// pipeline with frozen retriever parameters.
pub fn chain_contexts(
    dataset: &Dataset,
    retriever: &RetrieverParams,
    retrieval: &RetrievalConfig,
    gateway: &LlmGateway,
    users: impl Iterator<Item = UserId>,
) -> Result<BTreeMap<UserId, SubgraphContext>, PipelineError> {
    let mut contexts = BTreeMap::new();
    for user in users {
        if contexts.contains_key(&user) {
            continue;
        }
        let stage1 = stage1_retrieve(
            &dataset.graph,
            &dataset.features,
            &dataset.texts,
            retriever,
            retrieval,
            gateway,
            user,
        )?;
        let history: Vec<ItemId> =
            dataset.graph.visible_history(user).iter().map(|&(item, _)| item).collect();
        let stage2 = stage2_retrieve(
            &stage1,
            &dataset.graph,
            &dataset.texts,
            retrieval,
            gateway,
            user,
            &history,
        )?;
        if stage2.subgraph.degenerate {
            continue;
        }
        let exclude: BTreeSet<ItemId> =
            dataset.graph.items_of(user).iter().copied().collect();
        contexts.insert(
            user,
            SubgraphContext::build(stage2.subgraph, &dataset.features, user, exclude)?,
        );
    }
    Ok(contexts)
}

/// Mode-specific subgraph contexts (fixed hop rules / full graph).
pub fn mode_contexts(
    dataset: &Dataset,
    retriever: &RetrieverParams,
    retrieval: &RetrievalConfig,
    gateway: &LlmGateway,
    gnn_params: &GnnParams,
    mode: AblationMode,
    users: impl Iterator<Item = UserId>,
) -> Result<BTreeMap<UserId, SubgraphContext>, PipelineError> {
    let bundle = ModelBundle {
        graph: &dataset.graph,
        features: &dataset.features,
        texts: &dataset.texts,
        gateway,
        retriever,
        gnn: gnn_params,
        retrieval: *retrieval,
    };
    let mut contexts = BTreeMap::new();
    for user in users {
        if contexts.contains_key(&user) {
            continue;
        }
        let subgraph = crate::eval::mode_subgraph(&bundle, mode, user)?;
        if subgraph.degenerate {
            continue;
        }
        let exclude: BTreeSet<ItemId> =
            dataset.graph.items_of(user).iter().copied().collect();
        contexts.insert(
            user,
            SubgraphContext::build(subgraph, &dataset.features, user, exclude)?,
        );
    }
    Ok(contexts)
}

pub fn cmd_train_gnn(config: &PipelineConfig) -> Result<TrainOutcome, PipelineError> {
    let start = Instant::now();
    let (dataset, _) = load_dataset(config)?;
    if dataset.train_samples.is_empty() {
        return Err(PipelineError::Config(
            "no training samples: train_mask is empty or missing".into(),
        ));
    }
    let gateway = config.gateway()?;
    let (retriever_ckpt, retriever_path) =
        checkpoint::load_latest(&config.paths.checkpoint_dir, RETRIEVER_KIND)?;
    let retriever = retriever_from_checkpoint(&retriever_ckpt, &retriever_path)?;

    let contexts = chain_contexts(
        &dataset,
        &retriever,
        &config.retrieval,
        &gateway,
        dataset.train_samples.iter().map(|&(u, _)| u),
    )?;
    let params0 = GnnParams::init(
        config.training.d,
        config.training.hidden,
        config.training.d,
        config.seed.wrapping_add(1),
    );
    let train_config = config.training.gnn_train(config.seed);
    let (params, report) = train_gnn(
        &dataset.train_samples,
        &contexts,
        &dataset.features,
        &params0,
        &train_config,
    )?;
    let path = checkpoint::next_versioned_path(&config.paths.checkpoint_dir, GNN_KIND)?;
    gnn_to_checkpoint(&params).save(&path)?;
    Ok(TrainOutcome {
        checkpoint_path: path,
        report,
        stats: CommandStats {
            wall_ms: start.elapsed().as_millis(),
            seed: config.seed,
            gateway: gateway.stats(),
        },
    })
}

// ---------------------------------------------------------------------------
// Recommendation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct RecommendTrace {
    pub preference_prompt: String,
    pub preference_reasoning: String,
    pub intent_prompt: String,
    pub intent_reasoning: String,
    pub summary_text: String,
    pub stage1_users: usize,
    pub stage1_items: usize,
    pub stage2_users: usize,
    pub stage2_items: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct RecommendOutput {
    pub user: String,
    pub entries: Vec<RecommendEntry>,
    pub subgraph_fingerprint: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trace: Option<RecommendTrace>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RecommendEntry {
    pub item: String,
    pub score: f64,
}

#[derive(Debug)]
pub struct RecommendOutcome {
    pub output: RecommendOutput,
    pub stats: CommandStats,
}

/// Run the full chain for one user and rank the top-n items.
pub fn cmd_recommend(
    config: &PipelineConfig,
    user_key: &str,
    n: usize,
    trace: bool,
) -> Result<RecommendOutcome, PipelineError> {
    let start = Instant::now();
    let (dataset, _) = load_dataset(config)?;
    let target = dataset
        .graph
        .user_id(user_key)
        .ok_or_else(|| PipelineError::UnknownUser(user_key.to_string()))?;
    let gateway = config.gateway()?;
    let (retriever_ckpt, retriever_path) =
        checkpoint::load_latest(&config.paths.checkpoint_dir, RETRIEVER_KIND)?;
    let retriever = retriever_from_checkpoint(&retriever_ckpt, &retriever_path)?;
    let (gnn_ckpt, gnn_path) = checkpoint::load_latest(&config.paths.checkpoint_dir, GNN_KIND)?;
    let gnn = gnn_from_checkpoint(&gnn_ckpt, &gnn_path)?;

    let stage1 = stage1_retrieve(
        &dataset.graph,
        &dataset.features,
        &dataset.texts,
        &retriever,
        &config.retrieval,
        &gateway,
        target,
    )?;
    let history: Vec<ItemId> =
        dataset.graph.visible_history(target).iter().map(|&(item, _)| item).collect();
    let stage2 = stage2_retrieve(
        &stage1,
        &dataset.graph,
        &dataset.texts,
        &config.retrieval,
        &gateway,
        target,
        &history,
    )?;

    let exclude: BTreeSet<ItemId> = dataset.graph.items_of(target).iter().copied().collect();
    let ranked: RankedList = if stage2.subgraph.degenerate {
        RankedList {
            target,
            entries: vec![],
            subgraph_fingerprint: stage2.subgraph.fingerprint(),
            exhausted: true,
        }
    } else {
        let ctx =
            SubgraphContext::build(stage2.subgraph.clone(), &dataset.features, target, exclude)?;
        let encoding = forward_target(&ctx.input, &gnn)?;
        rank_items(&ctx.subgraph, &encoding, &dataset.features, &ctx.exclude, target)?
    };

    let entries = ranked
        .top(n)
        .map(|&(item, score)| RecommendEntry {
            item: dataset.graph.item_key(item).unwrap_or_default().to_string(),
            score,
        })
        .collect();
    let output = RecommendOutput {
        user: user_key.to_string(),
        entries,
        subgraph_fingerprint: ranked.subgraph_fingerprint.clone(),
        trace: trace.then(|| RecommendTrace {
            preference_prompt: stage1.prompt.clone(),
            preference_reasoning: stage1.reasoning.clone(),
            intent_prompt: stage2.prompt.clone(),
            intent_reasoning: stage2.reasoning.clone(),
            summary_text: stage1.summary.rendered_text.clone(),
            stage1_users: stage1.subgraph.users.len(),
            stage1_items: stage1.subgraph.items.len(),
            stage2_users: stage2.subgraph.users.len(),
            stage2_items: stage2.subgraph.items.len(),
        }),
    };
    Ok(RecommendOutcome {
        output,
        stats: CommandStats {
            wall_ms: start.elapsed().as_millis(),
            seed: config.seed,
            gateway: gateway.stats(),
        },
    })
}

// ---------------------------------------------------------------------------
// Evaluation and ablation
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct EvaluateOutcome {
    pub report: MetricsReport,
    pub stats: CommandStats,
}

/// Evaluate the trained chain pipeline on the test mask; with
/// `cold_slice`, ground truth is restricted to items at or below the
/// cold-start interaction threshold.
pub fn cmd_evaluate(
    config: &PipelineConfig,
    cold_slice: bool,
) -> Result<EvaluateOutcome, PipelineError> {
    let start = Instant::now();
    let (dataset, _) = load_dataset(config)?;
    if dataset.test_samples.is_empty() {
        return Err(PipelineError::Config(
            "no test samples: test_mask is empty or missing".into(),
        ));
    }
    let gateway = config.gateway()?;
    let (retriever_ckpt, retriever_path) =
        checkpoint::load_latest(&config.paths.checkpoint_dir, RETRIEVER_KIND)?;
    let retriever = retriever_from_checkpoint(&retriever_ckpt, &retriever_path)?;
    let (gnn_ckpt, gnn_path) = checkpoint::load_latest(&config.paths.checkpoint_dir, GNN_KIND)?;
    let gnn = gnn_from_checkpoint(&gnn_ckpt, &gnn_path)?;

    let eval_config = config.eval.to_eval_config()?;
    let bundle = ModelBundle {
        graph: &dataset.graph,
        features: &dataset.features,
        texts: &dataset.texts,
        gateway: &gateway,
        retriever: &retriever,
        gnn: &gnn,
        retrieval: config.retrieval,
    };
    let filter = cold_slice
        .then(|| crate::eval::cold_start_slice(&dataset.graph, eval_config.cold_start_threshold));
    let evaluation = evaluate_mode(
        &bundle,
        AblationMode::Corona,
        &dataset.test_samples,
        &eval_config,
        filter.as_ref(),
    )?;
    let report = MetricsReport::from_runs(
        serde_json::to_value(config).expect("config serialization"),
        BTreeMap::from([("dataset".to_string(), dataset.fingerprint.clone())]),
        &eval_config.cutoffs,
        &[(config.seed, vec![evaluation])],
    );
    Ok(EvaluateOutcome {
        report,
        stats: CommandStats {
            wall_ms: start.elapsed().as_millis(),
            seed: config.seed,
            gateway: gateway.stats(),
        },
    })
}

/// One complete train-and-evaluate pass over an in-memory dataset for a
/// set of ablation modes. Shared by the CLI `ablate` command and the
/// synthetic trend experiments.
pub fn train_and_evaluate_modes(
    dataset: &Dataset,
    gateway: &LlmGateway,
    retrieval: &RetrievalConfig,
    training: &TrainingFileConfig,
    eval_config: &EvalConfig,
    modes: &[AblationMode],
    seed: u64,
) -> Result<Vec<ModeEvaluation>, PipelineError> {
    if modes.is_empty() {
        return Err(EvalError::NoModes.into());
    }
    // Retriever first; its frozen subgraphs feed every mode's GNN.
    let params0 = RetrieverParams::init(training.d, training.dim_e, seed);
    let queries = freeze_queries(
        &dataset.graph,
        &dataset.features,
        &dataset.texts,
        &params0,
        retrieval,
        gateway,
        &dataset.train_samples,
    )?;
    let (retriever, _) = train_retriever(
        &dataset.graph,
        &dataset.features,
        &params0,
        &queries,
        &dataset.train_samples,
        &training.retriever_train(seed),
    )?;

    let gnn0 = GnnParams::init(training.d, training.hidden, training.d, seed.wrapping_add(1));
    let mut outcomes = Vec::with_capacity(modes.len());
    for &mode in modes {
        let contexts = match mode {
            AblationMode::Corona => chain_contexts(
                dataset,
                &retriever,
                retrieval,
                gateway,
                dataset.train_samples.iter().map(|&(u, _)| u),
            )?,
            _ => mode_contexts(
                dataset,
                &retriever,
                retrieval,
                gateway,
                &gnn0,
                mode,
                dataset.train_samples.iter().map(|&(u, _)| u),
            )?,
        };
        let (gnn, _) = train_gnn(
            &dataset.train_samples,
            &contexts,
            &dataset.features,
            &gnn0,
            &training.gnn_train(seed),
        )?;
        let bundle = ModelBundle {
            graph: &dataset.graph,
            features: &dataset.features,
            texts: &dataset.texts,
            gateway,
            retriever: &retriever,
            gnn: &gnn,
            retrieval: *retrieval,
        };
        outcomes.push(evaluate_mode(
            &bundle,
            mode,
            &dataset.test_samples,
            eval_config,
            None,
        )?);
    }
    Ok(outcomes)
}

/// Build an in-memory dataset directly from a generated synthetic corpus.
pub fn dataset_from_synth(data: &crate::synth::SynthDataset) -> Result<Dataset, PipelineError> {
    let mask: Vec<(String, String)> =
        data.train_mask.iter().chain(&data.test_mask).cloned().collect();
    let graph = build_graph(&data.interactions, &mask)?;
    let features = FeatureStore::new(data.user_features.clone(), data.item_features.clone());
    let texts =
        TextStore::from_records(data.user_profiles.clone(), data.item_texts.clone(), &graph);
    let train_samples = mask_to_internal(&graph, &data.train_mask);
    let test_samples = mask_to_internal(&graph, &data.test_mask);
    let fingerprint = graph.fingerprint();
    Ok(Dataset { graph, features, texts, train_samples, test_samples, fingerprint })
}

/// The synthetic ablation experiment: regenerate the planted-cluster
/// dataset per seed, train every mode, and aggregate one report.
pub fn run_synth_ablation(
    synth: &SynthConfig,
    seeds: &[u64],
    modes: &[AblationMode],
    retrieval: &RetrievalConfig,
    training: &TrainingFileConfig,
    eval_config: &EvalConfig,
    llm: &LlmConfig,
) -> Result<MetricsReport, PipelineError> {
    if modes.is_empty() {
        return Err(EvalError::NoModes.into());
    }
    let mut runs: Vec<(u64, Vec<ModeEvaluation>)> = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut synth_config = synth.clone();
        synth_config.seed = seed;
        let gateway = LlmGateway::from_config(llm)?;
        let data = generate(&synth_config, &gateway)?;
        let dataset = dataset_from_synth(&data)?;
        let outcomes = train_and_evaluate_modes(
            &dataset, &gateway, retrieval, training, eval_config, modes, seed,
        )?;
        runs.push((seed, outcomes));
    }
    Ok(MetricsReport::from_runs(
        serde_json::json!({
            "synth": synth,
            "retrieval": retrieval,
            "training": training,
            "eval": eval_config,
        }),
        BTreeMap::from([("generator".to_string(), format!("planted-cluster:{}", synth.seed))]),
        &eval_config.cutoffs,
        &runs,
    ))
}

#[derive(Debug)]
pub struct AblateOutcome {
    pub report: MetricsReport,
    pub stats: CommandStats,
}

/// Train and evaluate every configured mode on the ingested dataset,
/// repeating over `runs` seeds (seed, seed+1, ...).
pub fn cmd_ablate(config: &PipelineConfig) -> Result<AblateOutcome, PipelineError> {
    let start = Instant::now();
    let (dataset, _) = load_dataset(config)?;
    if dataset.train_samples.is_empty() || dataset.test_samples.is_empty() {
        return Err(PipelineError::Config(
            "ablation needs both train_mask and test_mask samples".into(),
        ));
    }
    let eval_config = config.eval.to_eval_config()?;
    if eval_config.ablation_modes.is_empty() {
        return Err(EvalError::NoModes.into());
    }
    let gateway = config.gateway()?;
    let mut runs = Vec::with_capacity(eval_config.runs);
    for r in 0..eval_config.runs {
        let seed = config.seed.wrapping_add(r as u64);
        let outcomes = train_and_evaluate_modes(
            &dataset,
            &gateway,
            &config.retrieval,
            &config.training,
            &eval_config,
            &eval_config.ablation_modes,
            seed,
        )?;
        runs.push((seed, outcomes));
    }
    let report = MetricsReport::from_runs(
        serde_json::to_value(config).expect("config serialization"),
        BTreeMap::from([("dataset".to_string(), dataset.fingerprint.clone())]),
        &eval_config.cutoffs,
        &runs,
    );
    Ok(AblateOutcome {
        report,
        stats: CommandStats {
            wall_ms: start.elapsed().as_millis(),
            seed: config.seed,
            gateway: gateway.stats(),
        },
    })
}

// ---------------------------------------------------------------------------
// Cache management
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct CacheInfo {
    pub directory: String,
    pub entries: usize,
}

pub fn cmd_cache_inspect(config: &PipelineConfig) -> Result<CacheInfo, PipelineError> {
    let gateway = config.gateway()?;
    Ok(CacheInfo {
        directory: config.paths.cache_dir.display().to_string(),
        entries: gateway.cache().disk_entries()?,
    })
}

pub fn cmd_cache_clear(config: &PipelineConfig) -> Result<CacheInfo, PipelineError> {
    let gateway = config.gateway()?;
    let removed = gateway.cache().clear()?;
    Ok(CacheInfo { directory: config.paths.cache_dir.display().to_string(), entries: removed })
}

pub fn write_report(
    report: &MetricsReport,
    path: &Path,
) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    let json = serde_json::to_string_pretty(report).expect("report serialization");
    fs::write(path, json).map_err(|e| io_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::Matrix;
    use tempfile::tempdir;

    fn base_toml(root: &Path) -> String {
        format!(
            r#"
seed = 7

[paths]
interactions = "{root}/data/interactions.tsv"
train_mask = "{root}/data/train_mask.tsv"
test_mask = "{root}/data/test_mask.tsv"
user_features = "{root}/data/user_features.crnf"
item_features = "{root}/data/item_features.crnf"
user_texts = "{root}/data/user_texts.jsonl"
item_texts = "{root}/data/item_texts.jsonl"
cache_dir = "{root}/cache"
checkpoint_dir = "{root}/ckpt"
bundle_dir = "{root}/bundle"

[llm]
chat = {{ kind = "mock", seed = 1 }}
embedding = {{ kind = "mock", seed = 1 }}
embed_dim_native = 64
retry_base_backoff_ms = 1

[retrieval]
k = 10

[training]
d = 16
dim_e = 2
hidden = 8
learning_rate = 0.001
max_steps = 50

[eval]
cutoffs = [10, 20, 50]
runs = 1
workers = 1
"#,
            root = root.display()
        )
    }

    fn config_at(root: &Path) -> PipelineConfig {
        PipelineConfig::from_toml(&base_toml(root)).unwrap()
    }

    fn synth_config() -> SynthConfig {
        SynthConfig {
            users: 24,
            items: 30,
            clusters: 3,
            purchases_per_user: 6,
            dim: 16,
            seed: 3,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn toml_parses_with_defaults_and_env_interpolation() {
        let dir = tempdir().unwrap();
        std::env::set_var("CORONA_TEST_SEED_VALUE", "99");
        let toml = base_toml(dir.path()).replace("seed = 7", "seed = ${CORONA_TEST_SEED_VALUE}");
        let config = PipelineConfig::from_toml(&toml).unwrap();
        assert_eq!(config.seed, 99);
        assert_eq!(config.training.patience, 10);
        assert_eq!(config.training.negative_set, 10);
        assert_eq!(config.eval.cold_start_threshold, 2);
    }

    #[test]
    fn missing_env_variable_is_a_config_error() {
        let dir = tempdir().unwrap();
        let toml =
            base_toml(dir.path()).replace("seed = 7", "seed = ${CORONA_DEFINITELY_UNSET_VAR}");
        assert!(matches!(PipelineConfig::from_toml(&toml), Err(PipelineError::Config(_))));
    }

    #[test]
    fn synth_ingest_round_trip_is_idempotent() {
        let dir = tempdir().unwrap();
        let config = config_at(dir.path());
        cmd_synth(&config, &synth_config()).unwrap();
        let first = cmd_ingest(&config).unwrap();
        assert!(!first.unchanged);
        let second = cmd_ingest(&config).unwrap();
        assert!(second.unchanged);
        assert_eq!(first.manifest.fingerprint, second.manifest.fingerprint);
        assert_eq!(first.manifest.n_users, 24);
        assert_eq!(first.manifest.n_train_samples, 24);
    }

    #[test]
    fn missing_mask_files_warn_but_proceed() {
        let dir = tempdir().unwrap();
        let config = config_at(dir.path());
        cmd_synth(&config, &synth_config()).unwrap();
        fs::remove_file(config.paths.train_mask.as_ref().unwrap()).unwrap();
        fs::remove_file(config.paths.test_mask.as_ref().unwrap()).unwrap();
        let (dataset, warnings) = load_dataset(&config).unwrap();
        assert!(dataset.train_samples.is_empty());
        assert_eq!(warnings.iter().filter(|w| w.contains("mask")).count(), 2);
    }

    #[test]
    fn feature_misalignment_surfaces_as_feature_error() {
        let dir = tempdir().unwrap();
        let config = config_at(dir.path());
        cmd_synth(&config, &synth_config()).unwrap();
        // Overwrite user features with the wrong row count.
        save_features(&config.paths.user_features, &Matrix::zeros(3, 16)).unwrap();
        match load_dataset(&config) {
            Err(PipelineError::Feature(FeatureError::RowMismatch { .. })) => {}
            other => panic!("expected row mismatch, got {other:?}"),
        }
    }

    #[test]
    fn evaluate_without_checkpoints_is_a_missing_artifact() {
        let dir = tempdir().unwrap();
        let config = config_at(dir.path());
        cmd_synth(&config, &synth_config()).unwrap();
        let err = cmd_evaluate(&config, false).unwrap_err();
        assert_eq!(err.exit_code(), 4);
    }

    #[test]
    fn full_train_recommend_cycle_produces_versioned_checkpoints() {
        let dir = tempdir().unwrap();
        let config = config_at(dir.path());
        cmd_synth(&config, &synth_config()).unwrap();
        cmd_ingest(&config).unwrap();

        let retriever = cmd_train_retriever(&config).unwrap();
        assert!(retriever.checkpoint_path.ends_with("retriever-0001.crnf"));
        let gnn = cmd_train_gnn(&config).unwrap();
        assert!(gnn.checkpoint_path.ends_with("gnn-0001.crnf"));

        // Training again appends a new version.
        let retriever2 = cmd_train_retriever(&config).unwrap();
        assert!(retriever2.checkpoint_path.ends_with("retriever-0002.crnf"));

        let rec = cmd_recommend(&config, "u0003", 5, true).unwrap();
        assert!(!rec.output.entries.is_empty());
        assert!(rec.output.entries.len() <= 5);
        let trace = rec.output.trace.as_ref().unwrap();
        assert!(trace.stage1_users >= trace.stage2_users);
        assert!(!trace.preference_prompt.is_empty());
        assert!(!trace.intent_prompt.is_empty());

        // Unknown user surfaces as a validation error.
        let err = cmd_recommend(&config, "nobody", 5, false).unwrap_err();
        assert_eq!(err.exit_code(), 2);

        // Evaluation runs end-to-end and fills all six cells.
        let eval = cmd_evaluate(&config, false).unwrap();
        assert_eq!(eval.report.modes.len(), 3);
        for cell in &eval.report.modes {
            assert!(cell.recall_mean >= 0.0 && cell.recall_mean <= 1.0);
            assert!(cell.ndcg_mean >= 0.0 && cell.ndcg_mean <= 1.0);
        }
    }

    #[test]
    fn recommendations_are_reproducible_given_warm_cache_and_seed() {
        let dir = tempdir().unwrap();
        let config = config_at(dir.path());
        cmd_synth(&config, &synth_config()).unwrap();
        cmd_ingest(&config).unwrap();
        cmd_train_retriever(&config).unwrap();
        cmd_train_gnn(&config).unwrap();
        let a = cmd_recommend(&config, "u0001", 5, false).unwrap();
        let b = cmd_recommend(&config, "u0001", 5, false).unwrap();
        let ja = serde_json::to_string(&a.output).unwrap();
        let jb = serde_json::to_string(&b.output).unwrap();
        assert_eq!(ja, jb);
    }

    #[test]
    fn cache_inspect_and_clear_round_trip() {
        let dir = tempdir().unwrap();
        let config = config_at(dir.path());
        cmd_synth(&config, &synth_config()).unwrap();
        cmd_ingest(&config).unwrap();
        cmd_train_retriever(&config).unwrap();
        let info = cmd_cache_inspect(&config).unwrap();
        assert!(info.entries > 0);
        let cleared = cmd_cache_clear(&config).unwrap();
        assert_eq!(cleared.entries, info.entries);
        let after = cmd_cache_inspect(&config).unwrap();
        assert_eq!(after.entries, 0);
    }
}
