//! `corona` — chain-of-retrieval recommender CLI.
//!
//! Verbs: `ingest`, `synth`, `train-retriever`, `train-gnn`, `recommend`,
//! `evaluate`, `ablate`, `cache`. Exit codes: 0 success, 2 validation,
//! 3 backend/transport, 4 missing artifact.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use corona_core::pipeline::{
    cmd_ablate, cmd_cache_clear, cmd_cache_inspect, cmd_evaluate, cmd_ingest, cmd_recommend,
    cmd_synth, cmd_train_gnn, cmd_train_retriever, write_report, CommandStats, PipelineConfig,
    PipelineError,
};
use corona_core::synth::SynthConfig;

#[derive(Parser)]
#[command(
    name = "corona",
    about = "Chain-of-retrieval recommendation engine",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Path to the TOML configuration file.
    #[arg(short, long)]
    config: PathBuf,
    /// Override the global seed from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the stage-1 retrieval breadth k.
    #[arg(long)]
    k: Option<usize>,
    /// Override the training learning rate.
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Override the LLM sampling temperature.
    #[arg(long)]
    temperature: Option<f64>,
    /// Override the evaluation worker count.
    #[arg(long)]
    workers: Option<usize>,
    /// Override the response cache directory.
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    /// Override the checkpoint directory.
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<PipelineConfig, PipelineError> {
        let mut config = PipelineConfig::from_file(&self.config)?;
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(k) = self.k {
            config.retrieval.k = k;
        }
        if let Some(lr) = self.learning_rate {
            config.training.learning_rate = lr;
        }
        if let Some(t) = self.temperature {
            config.llm.temperature = t;
        }
        if let Some(w) = self.workers {
            config.eval.workers = w;
        }
        if let Some(dir) = &self.cache_dir {
            config.paths.cache_dir = dir.clone();
        }
        if let Some(dir) = &self.checkpoint_dir {
            config.paths.checkpoint_dir = dir.clone();
        }
        config.validate()?;
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Validate the raw dataset and persist a fingerprinted bundle.
    Ingest(Common),
    /// Generate the planted-cluster synthetic dataset at the configured
    /// raw-data paths.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 300)]
        users: usize,
        #[arg(long, default_value_t = 500)]
        items: usize,
        #[arg(long, default_value_t = 5)]
        clusters: usize,
        /// In-cluster purchase probability.
        #[arg(long, default_value_t = 0.9)]
        p_in: f64,
        #[arg(long, default_value_t = 12)]
        purchases: usize,
        /// Feature dimensionality of the generated dataset (must match
        /// training.d in the config).
        #[arg(long, default_value_t = 32)]
        dim: usize,
    },
    /// Train the subgraph retriever and write a versioned checkpoint.
    TrainRetriever(Common),
    /// Train the GCN ranker over frozen retrieved subgraphs.
    TrainGnn(Common),
    /// Recommend top-n items for a user.
    Recommend {
        #[command(flatten)]
        common: Common,
        /// External user id.
        #[arg(long)]
        user: String,
        #[arg(short = 'n', long, default_value_t = 10)]
        top: usize,
        /// Emit the full trace (prompts, reasoning, subgraph sizes) as JSON.
        #[arg(long)]
        trace: bool,
    },
    /// Evaluate the trained pipeline on the test mask.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Restrict ground truth to cold items (at most the configured
        /// interaction threshold).
        #[arg(long)]
        cold_start: bool,
        /// Write the JSON report here (defaults to paths.report).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate every configured subgraph rule side by side.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated mode list overriding the config
        /// (corona,full-graph,fixed-1hop,fixed-2hop).
        #[arg(long)]
        modes: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Inspect or clear the LLM response cache.
    Cache {
        #[command(flatten)]
        common: Common,
        #[command(subcommand)]
        action: CacheAction,
    },
}

#[derive(Subcommand)]
enum CacheAction {
    /// Print the cache directory and entry count.
    Inspect,
    /// Remove every cached response.
    Clear,
}

fn print_stats(stats: &CommandStats) {
    println!(
        "done in {} ms (seed {}); llm: {} chat calls / {} cache hits, {} embed calls / {} cache hits, ~{} tokens",
        stats.wall_ms,
        stats.seed,
        stats.gateway.chat_backend_calls,
        stats.gateway.chat_cache_hits,
        stats.gateway.embed_backend_calls,
        stats.gateway.embed_cache_hits,
        stats.gateway.estimated_tokens
    );
}

fn run() -> Result<(), PipelineError> {
    let cli = Cli::parse();
    match cli.command {
        Command::Ingest(common) => {
            let config = common.load()?;
            let outcome = cmd_ingest(&config)?;
            for warning in &outcome.manifest.warnings {
                eprintln!("warning: {warning}");
            }
            if outcome.unchanged {
                println!(
                    "bundle unchanged (fingerprint {})",
                    outcome.manifest.fingerprint
                );
            } else {
                println!(
                    "ingested {} users, {} items, {} train / {} test samples (fingerprint {})",
                    outcome.manifest.n_users,
                    outcome.manifest.n_items,
                    outcome.manifest.n_train_samples,
                    outcome.manifest.n_test_samples,
                    outcome.manifest.fingerprint
                );
            }
            print_stats(&outcome.stats);
            Ok(())
        }
        Command::Synth { common, users, items, clusters, p_in, purchases, dim } => {
            let config = common.load()?;
            let synth = SynthConfig {
                users,
                items,
                clusters,
                in_cluster_probability: p_in,
                purchases_per_user: purchases,
                dim,
                seed: config.seed,
                ..SynthConfig::default()
            };
            let stats = cmd_synth(&config, &synth)?;
            println!(
                "wrote synthetic dataset: {users} users, {items} items, {clusters} clusters (p_in {p_in})"
            );
            print_stats(&stats);
            Ok(())
        }
        Command::TrainRetriever(common) => {
            let config = common.load()?;
            let outcome = cmd_train_retriever(&config)?;
            println!(
                "retriever checkpoint {} ({} steps, {} evals, loss {:.6} -> {:.6}, stop {:?})",
                outcome.checkpoint_path.display(),
                outcome.report.steps,
                outcome.report.evaluations,
                outcome.report.initial_loss,
                outcome.report.final_loss,
                outcome.report.stop
            );
            print_stats(&outcome.stats);
            Ok(())
        }
        Command::TrainGnn(common) => {
            let config = common.load()?;
            let outcome = cmd_train_gnn(&config)?;
            println!(
                "gnn checkpoint {} ({} steps, {} evals, loss {:.6} -> {:.6}, stop {:?})",
                outcome.checkpoint_path.display(),
                outcome.report.steps,
                outcome.report.evaluations,
                outcome.report.initial_loss,
                outcome.report.final_loss,
                outcome.report.stop
            );
            print_stats(&outcome.stats);
            Ok(())
        }
        Command::Recommend { common, user, top, trace } => {
            let config = common.load()?;
            let outcome = cmd_recommend(&config, &user, top, trace)?;
            for (rank, entry) in outcome.output.entries.iter().enumerate() {
                println!("{:>3}. {}  {:.6}", rank + 1, entry.item, entry.score);
            }
            if outcome.output.entries.is_empty() {
                println!("(no recommendable items: candidate set exhausted)");
            }
            println!(
                "{}",
                serde_json::to_string(&outcome.output).expect("output serialization")
            );
            print_stats(&outcome.stats);
            Ok(())
        }
        Command::Evaluate { common, cold_start, out } => {
            let config = common.load()?;
            let outcome = cmd_evaluate(&config, cold_start)?;
            print!("{}", outcome.report.to_text_table());
            let path = out.or(config.paths.report.clone());
            if let Some(path) = path {
                write_report(&outcome.report, &path)?;
                println!("report written to {}", path.display());
            }
            print_stats(&outcome.stats);
            Ok(())
        }
        Command::Ablate { common, modes, out } => {
            let mut config = common.load()?;
            if let Some(modes) = modes {
                config.eval.ablation_modes =
                    modes.split(',').map(|m| m.trim().to_string()).collect();
                config.validate()?;
            }
            let outcome = cmd_ablate(&config)?;
            print!("{}", outcome.report.to_text_table());
            let path = out.or(config.paths.report.clone());
            if let Some(path) = path {
                write_report(&outcome.report, &path)?;
                println!("report written to {}", path.display());
            }
            print_stats(&outcome.stats);
            Ok(())
        }
        Command::Cache { common, action } => {
            let config = common.load()?;
            let info = match action {
                CacheAction::Inspect => cmd_cache_inspect(&config)?,
                CacheAction::Clear => {
                    let info = cmd_cache_clear(&config)?;
                    println!("cleared {} cached responses", info.entries);
                    info
                }
            };
            println!("cache {}: {} entries", info.directory, info.entries);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            let mut source = std::error::Error::source(&err);
            while let Some(cause) = source {
                eprintln!("  caused by: {cause}");
                source = cause.source();
            }
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
