//! Chain-of-retrieval recommendation engine.
//!
//! The pipeline narrows candidates in three stages over a bipartite
//! user-item interaction graph:
//!
//! 1. **Preference retrieval** — an LLM reasons over the user's profile;
//!    the response is embedded and used as a cosine query against
//!    distance-encoded user embeddings to pull the top-k similar users and
//!    their item neighborhoods into a subgraph.
//! 2. **Intent retrieval** — the LLM reasons over the user's purchase
//!    history plus a frequency summary of the stage-1 items; the resulting
//!    query keeps the top-k/2 users, shrinking the subgraph further.
//! 3. **GCN ranking** — a two-layer graph convolution encodes the target
//!    user over the final subgraph and items are ranked by inner product
//!    with their features.
//!
//! The retriever trains with a softmax loss over true users, the ranker
//! with BPR; both use hand-derived gradients and Adam. The [`eval`] module
//! hosts the Recall/NDCG harness, cold-item slice and subgraph-rule
//! ablations, [`synth`] the planted-cluster benchmark generator, and
//! [`pipeline`] ties everything to on-disk artifacts for the CLI.

pub mod checkpoint;
pub mod eval;
pub mod features;
pub mod gnn;
pub mod graph;
pub mod llm;
pub mod matrix;
pub mod optim;
pub mod pipeline;
pub mod retrieval;
pub mod synth;

pub use graph::{InteractionGraph, ItemId, Subgraph, UserId};
pub use matrix::Matrix;
