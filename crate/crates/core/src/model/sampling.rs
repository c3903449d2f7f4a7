use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::template::TokenId;

use super::ModelError;

/// Argmax; ties go to the smallest token id.
pub fn greedy_next(logits: &[f32]) -> Result<TokenId, ModelError> {
    let mut best: Option<(usize, f32)> = None;
    for (i, &x) in logits.iter().enumerate() {
        if !x.is_finite() {
            return Err(ModelError::NonFinite(i));
        }
        if best.is_none_or(|(_, b)| x > b) {
            best = Some((i, x));
        }
    }
    best.map(|(i, _)| i as TokenId)
        .ok_or(ModelError::EmptyLogits)
}

/// Picks the next token from a logits row.
#[derive(Debug, Clone)]
pub enum Sampler {
    Greedy,
    /// Softmax sampling at `temperature`, from a seeded stream.
    Temperature {
        temperature: f32,
        rng: Box<ChaCha8Rng>,
    },
}

impl Sampler {
    pub fn temperature(temperature: f32, seed: u64) -> Self {
        Sampler::Temperature {
            temperature,
            rng: Box::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn sample(&mut self, logits: &[f32]) -> Result<TokenId, ModelError> {
        match self {
            Sampler::Greedy => greedy_next(logits),
            Sampler::Temperature { temperature, rng } => {
                let argmax = greedy_next(logits)? as usize;
                if *temperature <= 0.0 {
                    return Ok(argmax as TokenId);
                }
                let max = logits[argmax];
                let weights: Vec<f64> = logits
                    .iter()
                    .map(|&x| (((x - max) / *temperature) as f64).exp())
                    .collect();
                let total: f64 = weights.iter().sum();
                let mut target = rng.random::<f64>() * total;
                for (i, w) in weights.iter().enumerate() {
                    target -= w;
                    if target < 0.0 {
                        return Ok(i as TokenId);
                    }
                }
                Ok(argmax as TokenId)
            }
        }
    }
}
