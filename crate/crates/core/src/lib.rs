//! Recommender over a user/item/streamer tripartite interaction graph.
//!
//! Three bipartite graphs (buy: user-item, follow: user-streamer, sell:
//! streamer-item) are encoded separately over shared per-kind embedding
//! tables. Each node's outputs are concatenated into a unified embedding and
//! scored by per-task MLPs, trained jointly on buy and follow prediction.

pub mod datagen;
pub mod error;
pub mod eval;
pub mod graph_store;
pub mod influence;
pub mod model;
pub mod numkit;
pub mod rng;
pub mod sampler;
pub mod trainer;

pub use error::{Error, Result};
