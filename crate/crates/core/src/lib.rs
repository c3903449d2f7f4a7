//! Parallel decoding of template-structured chain-of-thought.
//!
//! A template fixes the fields of the reasoning text and a dependency graph
//! says which fields need which. All fields share one packed sequence and
//! one KV cache; each forward pass decodes the next token of every field
//! whose prerequisites are complete, and an attention mask keeps each field
//! blind to everything but its ancestors and the fixed tokens.

pub mod analysis;
pub mod engine;
pub mod graph;
pub mod layout;
pub mod mask;
pub mod model;
pub mod presets;
pub mod scheduler;
pub mod template;

pub use engine::{decode_autoregressive, decode_oracle, decode_parallel, DecodeResult};
pub use graph::DependencyGraph;
pub use template::{TemplateSpec, TokenId};
