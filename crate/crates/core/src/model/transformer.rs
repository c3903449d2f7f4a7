//! Desk-scale pre-norm transformer decoder with explicit position ids.
//!
//! Attention is an exact softmax over the keys a query's mask row exposes,
//! summed in ascending position order. Masked keys never enter the sum, so
//! a query's logits are bit-identical whether it runs alone or packed with
//! independent queries.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::mask::PassMask;

use super::{
    check_pass, visible_keys, CacheEntry, KeySource, KvCache, ModelError, Query, TokenModel,
};

const NORM_EPS: f32 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 4,
            d_model: 32,
            d_ff: 128,
            vocab_size: 256,
        }
    }
}

impl TransformerConfig {
    fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    norm1_gain: Vec<f32>,
    norm1_bias: Vec<f32>,
    wq: Vec<f32>,
    wk: Vec<f32>,
    wv: Vec<f32>,
    wo: Vec<f32>,
    norm2_gain: Vec<f32>,
    norm2_bias: Vec<f32>,
    ff_in: Vec<f32>,
    ff_in_bias: Vec<f32>,
    ff_out: Vec<f32>,
    ff_out_bias: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceTransformer {
    config: TransformerConfig,
    seed: u64,
    embed: Vec<f32>,
    blocks: Vec<Block>,
    final_gain: Vec<f32>,
    final_bias: Vec<f32>,
    unembed: Vec<f32>,
}

/// `x` times a row-major `[x.len(), out]` matrix.
fn matvec(x: &[f32], w: &[f32], out: usize) -> Vec<f32> {
    let mut y = vec![0.0f32; out];
    for (i, &xi) in x.iter().enumerate() {
        let row = &w[i * out..(i + 1) * out];
        for (yj, &wij) in y.iter_mut().zip(row) {
            *yj += xi * wij;
        }
    }
    y
}

fn layer_norm(x: &[f32], gain: &[f32], bias: &[f32]) -> Vec<f32> {
    let n = x.len() as f32;
    let mean = x.iter().sum::<f32>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
    let inv = 1.0 / (var + NORM_EPS).sqrt();
    x.iter()
        .zip(gain.iter().zip(bias))
        .map(|(v, (g, b))| (v - mean) * inv * g + b)
        .collect()
}

fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (0.797_884_6 * (x + 0.044_715 * x * x * x)).tanh())
}

/// Sinusoidal encoding of an explicit position id.
pub fn sinusoidal_encoding(position: usize, d_model: usize) -> Vec<f32> {
    (0..d_model)
        .map(|i| {
            let pair = (i / 2) as f64;
            let angle = position as f64 / 10000f64.powf(2.0 * pair / d_model as f64);
            if i % 2 == 0 {
                angle.sin() as f32
            } else {
                angle.cos() as f32
            }
        })
        .collect()
}

impl ReferenceTransformer {
    pub fn new(config: TransformerConfig, seed: u64) -> Self {
        assert!(config.heads > 0 && config.d_model.is_multiple_of(config.heads));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = |len: usize, std: f32| -> Vec<f32> {
            let dist = Normal::new(0.0f32, std).expect("positive std");
            (0..len).map(|_| dist.sample(&mut rng)).collect()
        };
        let d = config.d_model;
        let ff = config.d_ff;
        let proj = 1.0 / (d as f32).sqrt();
        let embed = normal(config.vocab_size * d, 1.0);
        let blocks = (0..config.layers)
            .map(|_| Block {
                norm1_gain: vec![1.0; d],
                norm1_bias: vec![0.0; d],
                wq: normal(d * d, proj),
                wk: normal(d * d, proj),
                wv: normal(d * d, proj),
                wo: normal(d * d, proj),
                norm2_gain: vec![1.0; d],
                norm2_bias: vec![0.0; d],
                ff_in: normal(d * ff, proj),
                ff_in_bias: vec![0.0; ff],
                ff_out: normal(ff * d, 1.0 / (ff as f32).sqrt()),
                ff_out_bias: vec![0.0; d],
            })
            .collect();
        let unembed = normal(d * config.vocab_size, proj);
        Self {
            config,
            seed,
            embed,
            blocks,
            final_gain: vec![1.0; d],
            final_bias: vec![0.0; d],
            unembed,
        }
    }

    /// Default desk-scale shape: 2 layers, 4 heads, width 32, vocab 256.
    pub fn seeded(seed: u64) -> Self {
        Self::new(TransformerConfig::default(), seed)
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn tensors(&self) -> Vec<(String, Vec<usize>, &[f32])> {
        let d = self.config.d_model;
        let ff = self.config.d_ff;
        let mut out: Vec<(String, Vec<usize>, &[f32])> =
            vec![("embed".into(), vec![self.config.vocab_size, d], &self.embed)];
        for (i, b) in self.blocks.iter().enumerate() {
            let p = |name: &str| format!("blocks.{i}.{name}");
            out.push((p("norm1.gain"), vec![d], &b.norm1_gain));
            out.push((p("norm1.bias"), vec![d], &b.norm1_bias));
            out.push((p("attn.wq"), vec![d, d], &b.wq));
            out.push((p("attn.wk"), vec![d, d], &b.wk));
            out.push((p("attn.wv"), vec![d, d], &b.wv));
            out.push((p("attn.wo"), vec![d, d], &b.wo));
            out.push((p("norm2.gain"), vec![d], &b.norm2_gain));
            out.push((p("norm2.bias"), vec![d], &b.norm2_bias));
            out.push((p("ff.in"), vec![d, ff], &b.ff_in));
            out.push((p("ff.in_bias"), vec![ff], &b.ff_in_bias));
            out.push((p("ff.out"), vec![ff, d], &b.ff_out));
            out.push((p("ff.out_bias"), vec![d], &b.ff_out_bias));
        }
        out.push(("final.gain".into(), vec![d], &self.final_gain));
        out.push(("final.bias".into(), vec![d], &self.final_bias));
        out.push((
            "unembed".into(),
            vec![d, self.config.vocab_size],
            &self.unembed,
        ));
        out
    }

    /// Sidecar manifest path for a weights binary: `<path>.json`.
    pub fn manifest_path(weights: &Path) -> PathBuf {
        let mut name = weights.as_os_str().to_owned();
        name.push(".json");
        PathBuf::from(name)
    }

    /// Writes little-endian f32 weights to `path` and the manifest next to it.
    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let mut bytes = Vec::new();
        let mut tensors = BTreeMap::new();
        for (name, shape, data) in self.tensors() {
            tensors.insert(
                name,
                TensorEntry {
                    shape,
                    offset: bytes.len(),
                },
            );
            for v in data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest = Manifest {
            format: "f32-le".into(),
            seed: self.seed,
            config: self.config,
            tensors,
        };
        let io = |e: std::io::Error| ModelError::Weights(format!("{}: {e}", path.display()));
        fs::write(path, &bytes).map_err(io)?;
        let json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| ModelError::Weights(e.to_string()))?;
        fs::write(Self::manifest_path(path), json).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let manifest_path = Self::manifest_path(path);
        let read_err =
            |p: &Path, e: std::io::Error| ModelError::Weights(format!("{}: {e}", p.display()));
        let bytes = fs::read(path).map_err(|e| read_err(path, e))?;
        let manifest: Manifest = serde_json::from_str(
            &fs::read_to_string(&manifest_path).map_err(|e| read_err(&manifest_path, e))?,
        )
        .map_err(|e| ModelError::Weights(format!("{}: {e}", manifest_path.display())))?;
        if manifest.format != "f32-le" {
            return Err(ModelError::Weights(format!(
                "unsupported format `{}`",
                manifest.format
            )));
        }
        // Start from a correctly shaped model, then overwrite every tensor.
        let mut model = Self::new(manifest.config, manifest.seed);
        let shapes: Vec<(String, Vec<usize>)> = model
            .tensors()
            .into_iter()
            .map(|(n, s, _)| (n, s))
            .collect();
        let mut loaded = BTreeMap::new();
        for (name, shape) in shapes {
            let entry = manifest
                .tensors
                .get(&name)
                .ok_or_else(|| ModelError::Weights(format!("missing tensor `{name}`")))?;
            if entry.shape != shape {
                return Err(ModelError::Weights(format!(
                    "tensor `{name}` has shape {:?}, expected {shape:?}",
                    entry.shape
                )));
            }
            let len: usize = shape.iter().product();
            let raw = bytes
                .get(entry.offset..entry.offset + 4 * len)
                .ok_or_else(|| ModelError::Weights(format!("tensor `{name}` runs past the end")))?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            loaded.insert(name, data);
        }
        let mut take = |name: &str| loaded.remove(name).expect("every tensor was loaded");
        model.embed = take("embed");
        for i in 0..model.blocks.len() {
            let mut t = |n: &str| take(&format!("blocks.{i}.{n}"));
            model.blocks[i] = Block {
                norm1_gain: t("norm1.gain"),
                norm1_bias: t("norm1.bias"),
                wq: t("attn.wq"),
                wk: t("attn.wk"),
                wv: t("attn.wv"),
                wo: t("attn.wo"),
                norm2_gain: t("norm2.gain"),
                norm2_bias: t("norm2.bias"),
                ff_in: t("ff.in"),
                ff_in_bias: t("ff.in_bias"),
                ff_out: t("ff.out"),
                ff_out_bias: t("ff.out_bias"),
            };
        }
        model.final_gain = take("final.gain");
        model.final_bias = take("final.bias");
        model.unembed = take("unembed");
        Ok(model)
    }

    fn attend(&self, query: &[f32], keys: &[(&[f32], &[f32])]) -> Vec<f32> {
        let d = self.config.d_model;
        let hd = self.config.head_dim();
        let scale = 1.0 / (hd as f32).sqrt();
        let mut out = vec![0.0f32; d];
        if keys.is_empty() {
            return out;
        }
        let mut scores = vec![0.0f32; keys.len()];
        for h in 0..self.config.heads {
            let range = h * hd..(h + 1) * hd;
            let q = &query[range.clone()];
            for (s, (k, _)) in scores.iter_mut().zip(keys) {
                *s = q
                    .iter()
                    .zip(&k[range.clone()])
                    .map(|(a, b)| a * b)
                    .sum::<f32>()
                    * scale;
            }
            let max = scores.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut total = 0.0f32;
            for s in scores.iter_mut() {
                *s = (*s - max).exp();
                total += *s;
            }
            let head_out = &mut out[range.clone()];
            for (s, (_, v)) in scores.iter().zip(keys) {
                let w = s / total;
                for (o, &vi) in head_out.iter_mut().zip(&v[range.clone()]) {
                    *o += w * vi;
                }
            }
        }
        out
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    shape: Vec<usize>,
    /// Byte offset into the weights binary.
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    seed: u64,
    config: TransformerConfig,
    tensors: BTreeMap<String, TensorEntry>,
}

impl TokenModel for ReferenceTransformer {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn forward(
        &self,
        queries: &[Query],
        mask: &PassMask,
        cache: &mut KvCache,
        write: bool,
    ) -> Result<Vec<Vec<f32>>, ModelError> {
        check_pass(queries, mask, cache, self.config.vocab_size)?;
        let d = self.config.d_model;
        let layers = self.config.layers;
        for &pos in mask.cached_positions() {
            let entry = cache.get(pos).expect("checked against the mask");
            if entry.keys.len() != layers || entry.values.len() != layers {
                return Err(ModelError::Shape(format!(
                    "cache entry at {pos} holds {} layers, model has {layers}",
                    entry.keys.len()
                )));
            }
        }

        let visible: Vec<Vec<(usize, KeySource)>> =
            (0..queries.len()).map(|r| visible_keys(mask, r)).collect();
        let mut hidden: Vec<Vec<f32>> = queries
            .iter()
            .map(|q| {
                let t = q.token as usize;
                self.embed[t * d..(t + 1) * d]
                    .iter()
                    .zip(sinusoidal_encoding(q.position, d))
                    .map(|(e, p)| e + p)
                    .collect()
            })
            .collect();
        let mut new_keys: Vec<Vec<Vec<f32>>> = vec![Vec::with_capacity(layers); queries.len()];
        let mut new_values: Vec<Vec<Vec<f32>>> = vec![Vec::with_capacity(layers); queries.len()];

        for (layer, block) in self.blocks.iter().enumerate() {
            let mut q_proj = Vec::with_capacity(queries.len());
            for (i, h) in hidden.iter().enumerate() {
                let normed = layer_norm(h, &block.norm1_gain, &block.norm1_bias);
                q_proj.push(matvec(&normed, &block.wq, d));
                new_keys[i].push(matvec(&normed, &block.wk, d));
                new_values[i].push(matvec(&normed, &block.wv, d));
            }
            for (i, h) in hidden.iter_mut().enumerate() {
                let keys: Vec<(&[f32], &[f32])> = visible[i]
                    .iter()
                    .map(|&(pos, source)| match source {
                        KeySource::Cached(_) => {
                            let e = cache.get(pos).expect("checked against the mask");
                            (e.keys[layer].as_slice(), e.values[layer].as_slice())
                        }
                        KeySource::Query(j) => (
                            new_keys[j][layer].as_slice(),
                            new_values[j][layer].as_slice(),
                        ),
                    })
                    .collect();
                let attn = matvec(&self.attend(&q_proj[i], &keys), &block.wo, d);
                for (x, a) in h.iter_mut().zip(&attn) {
                    *x += a;
                }
                let normed = layer_norm(h, &block.norm2_gain, &block.norm2_bias);
                let mut inner = matvec(&normed, &block.ff_in, self.config.d_ff);
                for (x, b) in inner.iter_mut().zip(&block.ff_in_bias) {
                    *x = gelu(*x + b);
                }
                let ff = matvec(&inner, &block.ff_out, d);
                for ((x, f), b) in h.iter_mut().zip(&ff).zip(&block.ff_out_bias) {
                    *x += f + b;
                }
            }
        }

        let logits = hidden
            .iter()
            .map(|h| {
                let normed = layer_norm(h, &self.final_gain, &self.final_bias);
                matvec(&normed, &self.unembed, self.config.vocab_size)
            })
            .collect();

        if write {
            for ((q, keys), values) in queries.iter().zip(new_keys).zip(new_values) {
                cache.write(
                    q.position,
                    CacheEntry {
                        token: q.token,
                        keys,
                        values,
                    },
                )?;
            }
        }
        Ok(logits)
    }
}
