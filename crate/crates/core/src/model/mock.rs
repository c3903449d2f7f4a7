//! A model whose output is a hash of exactly what the mask exposes.
//!
//! Each logits row is a pseudo-random vector seeded by the query position
//! and the sorted list of visible `(position, token)` pairs. Any difference
//! in visibility, even a single mask bit, changes the row, so a leaky or
//! over-strict mask shows up as a token or logits mismatch.

use crate::mask::PassMask;
use crate::template::TokenId;

use super::{
    check_pass, visible_keys, CacheEntry, KeySource, KvCache, ModelError, Query, TokenModel,
};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MockHashModel {
    vocab_size: usize,
    salt: u64,
    stop: Option<(TokenId, u32)>,
}

impl MockHashModel {
    pub fn new(vocab_size: usize, salt: u64) -> Self {
        Self {
            vocab_size,
            salt,
            stop: None,
        }
    }

    /// Make `token` the argmax for roughly `permille`/1000 of queries.
    /// Elsewhere `token` gets the lowest logit of the row.
    pub fn with_stop(mut self, token: TokenId, permille: u32) -> Self {
        assert!((token as usize) < self.vocab_size);
        self.stop = Some((token, permille.min(1000)));
        self
    }

    /// Digest of everything the query at `row` can see.
    fn visible_digest(
        &self,
        queries: &[Query],
        mask: &PassMask,
        cache: &KvCache,
        row: usize,
    ) -> u64 {
        let mut h = mix(self.salt ^ 0x5eed);
        h = mix(h ^ mix(queries[row].position as u64));
        for (position, source) in visible_keys(mask, row) {
            let token = match source {
                KeySource::Cached(_) => cache
                    .get(position)
                    .map(|e| e.token)
                    .expect("mask columns come from the cache"),
                KeySource::Query(i) => queries[i].token,
            };
            h = mix(h ^ mix(position as u64 + 1));
            h = mix(h ^ mix((token as u64) << 1 | 1));
        }
        h
    }
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl TokenModel for MockHashModel {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn forward(
        &self,
        queries: &[Query],
        mask: &PassMask,
        cache: &mut KvCache,
        write: bool,
    ) -> Result<Vec<Vec<f32>>, ModelError> {
        check_pass(queries, mask, cache, self.vocab_size)?;
        let logits = (0..queries.len())
            .map(|row| {
                let h = self.visible_digest(queries, mask, cache, row);
                let mut logits: Vec<f32> = (0..self.vocab_size as u64)
                    .map(|i| {
                        (mix(h ^ i.wrapping_mul(0xd6e8_feb8_6659_fd93)) >> 40) as f32
                            / (1u64 << 24) as f32
                    })
                    .collect();
                if let Some((token, permille)) = self.stop {
                    let stops = (mix(h ^ 0x570f) % 1000) < permille as u64;
                    logits[token as usize] = if stops { 2.0 } else { -1.0 };
                }
                logits
            })
            .collect();
        if write {
            for q in queries {
                cache.write(
                    q.position,
                    CacheEntry {
                        token: q.token,
                        keys: Vec::new(),
                        values: Vec::new(),
                    },
                )?;
            }
        }
        Ok(logits)
    }
}
