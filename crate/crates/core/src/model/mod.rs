//! The forward-pass contract and the models that implement it.
//!
//! A [`TokenModel`] takes a set of queries packed into one pass, a
//! [`PassMask`] saying which cached positions and which fellow queries each
//! query may attend to, and the shared [`KvCache`]. The logits for a query
//! must depend only on what its mask row exposes. That is the property the
//! whole parallel decoder rests on.

mod kv_cache;
mod mock;
mod sampling;
mod transformer;

pub use kv_cache::{CacheEntry, KvCache};
pub use mock::MockHashModel;
pub use sampling::{greedy_next, Sampler};
pub use transformer::{ReferenceTransformer, TransformerConfig};

use thiserror::Error;

use crate::mask::PassMask;
use crate::template::TokenId;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("position {0} is already written")]
    PositionWritten(usize),
    #[error("position {0} is outside the cache")]
    PositionOutOfBounds(usize),
    #[error("token {token} is outside the model vocabulary of {vocab_size}")]
    TokenOutOfVocab { token: TokenId, vocab_size: usize },
    #[error("non-finite logit at index {0}")]
    NonFinite(usize),
    #[error("empty logits row")]
    EmptyLogits,
    #[error("weights: {0}")]
    Weights(String),
}

/// One token fed to the model at an explicit position id.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Query {
    pub token: TokenId,
    pub position: usize,
}

pub trait TokenModel: Send + Sync {
    fn vocab_size(&self) -> usize;

    /// Runs one packed pass and returns one logits row per query.
    ///
    /// Mask columns must be the cache's written positions followed by the
    /// queries. With `write`, each query's state is stored at its position.
    fn forward(
        &self,
        queries: &[Query],
        mask: &PassMask,
        cache: &mut KvCache,
        write: bool,
    ) -> Result<Vec<Vec<f32>>, ModelError>;
}

/// Where a visible key lives during a pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum KeySource {
    Cached(usize),
    Query(usize),
}

/// Visible keys of mask row `row`, sorted by layout position.
pub(crate) fn visible_keys(mask: &PassMask, row: usize) -> Vec<(usize, KeySource)> {
    let cached = mask.cached_positions().len();
    let mut keys: Vec<(usize, KeySource)> = mask
        .row(row)
        .iter()
        .enumerate()
        .filter(|&(_, &v)| v)
        .map(|(col, _)| {
            let source = if col < cached {
                KeySource::Cached(col)
            } else {
                KeySource::Query(col - cached)
            };
            (mask.column_position(col), source)
        })
        .collect();
    keys.sort_by_key(|&(pos, _)| pos);
    keys
}

/// Shape checks shared by every model.
pub(crate) fn check_pass(
    queries: &[Query],
    mask: &PassMask,
    cache: &KvCache,
    vocab_size: usize,
) -> Result<(), ModelError> {
    if mask.rows() != queries.len() {
        return Err(ModelError::Shape(format!(
            "{} queries but {} mask rows",
            queries.len(),
            mask.rows()
        )));
    }
    if mask.cached_positions() != cache.written_positions() {
        return Err(ModelError::Shape(format!(
            "mask covers {} cached positions, cache holds {}",
            mask.cached_positions().len(),
            cache.len()
        )));
    }
    for (q, &expected) in queries.iter().zip(mask.query_positions()) {
        if q.position != expected {
            return Err(ModelError::Shape(format!(
                "query at position {} but mask row expects {expected}",
                q.position
            )));
        }
        if q.position >= cache.capacity() {
            return Err(ModelError::PositionOutOfBounds(q.position));
        }
        if cache.is_written(q.position) {
            return Err(ModelError::PositionWritten(q.position));
        }
        if q.token as usize >= vocab_size {
            return Err(ModelError::TokenOutOfVocab {
                token: q.token,
                vocab_size,
            });
        }
    }
    let mut positions: Vec<usize> = queries.iter().map(|q| q.position).collect();
    positions.sort_unstable();
    if positions.windows(2).any(|w| w[0] == w[1]) {
        return Err(ModelError::Shape("duplicate query positions".into()));
    }
    Ok(())
}
