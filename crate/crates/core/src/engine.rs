//! The three decoders: parallel, autoregressive baseline, and per-field oracle.
//!
//! All three share the packed layout, the prefill pass and the query
//! convention. The query for step `t` of field `f` sits at slot position
//! `t` and is fed the field's previous token: the last prefix token for
//! `t = 0` (the template terminator if the prefix is empty), otherwise
//! generated token `t - 1`. Its logits pick generated token `t`.

use std::time::Instant;

use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::graph::DependencyGraph;
use crate::layout::PackedLayout;
use crate::mask::{pass_mask, prefill_mask, MaskError, PassMask};
use crate::model::{KvCache, ModelError, Query, Sampler, TokenModel};
use crate::scheduler::{DecodeScheduler, PassRecord, ScheduleError, StopRule};
use crate::template::{TemplateSpec, TokenId, Tokenizer};

#[derive(Debug, Error, PartialEq)]
pub enum EngineError {
    #[error("model vocabulary {model} differs from template vocabulary {template}")]
    VocabMismatch { model: usize, template: usize },
    #[error("prompt of {len} tokens does not fit the {capacity}-token prompt span")]
    PromptTooLong { len: usize, capacity: usize },
    #[error("model returned {got} logits rows of width {width}, expected {rows} of width {vocab}")]
    LogitsShape {
        got: usize,
        width: usize,
        rows: usize,
        vocab: usize,
    },
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Observation and fault-injection points inside a decode.
pub trait DecodeHooks {
    /// Called with every mask before it reaches the model. Pass 0 is prefill.
    fn on_mask(&mut self, _pass: usize, _mask: &mut PassMask) {}
    /// Called with the logits row that chose generated token `step` of `field`.
    fn on_logits(&mut self, _field: usize, _step: usize, _logits: &[f32]) {}
    /// Called once with the final cache.
    fn on_finish(&mut self, _cache: &KvCache) {}
}

/// Hooks that do nothing.
#[derive(Debug, Default, Clone, Copy)]
pub struct NoHooks;

impl DecodeHooks for NoHooks {}

#[derive(Debug, Clone, Default)]
pub struct DecodeOptions {
    pub sampler: Option<Sampler>,
    pub stop: StopRule,
}

impl DecodeOptions {
    pub fn with_stop(stop: StopRule) -> Self {
        Self {
            sampler: None,
            stop,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PhaseTiming {
    pub prefill_ns: u64,
    pub generate_ns: u64,
}

impl PhaseTiming {
    pub fn total_ns(&self) -> u64 {
        self.prefill_ns + self.generate_ns
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeResult {
    /// Per-field content with a trailing terminator removed.
    pub contents: Vec<Vec<TokenId>>,
    /// Generated tokens per field, terminators included.
    pub lengths: Vec<usize>,
    /// Generation passes; prefill is not counted.
    pub pass_count: usize,
    pub total_generated: usize,
    pub trace: Vec<PassRecord>,
    pub timing: PhaseTiming,
}

impl DecodeResult {
    pub fn average_parallel_degree(&self) -> f64 {
        if self.pass_count == 0 {
            0.0
        } else {
            self.total_generated as f64 / self.pass_count as f64
        }
    }

    /// `{"fields", "pass_count", "total_generated", "parallel_degree", "trace"}`,
    /// plus `"timing"` when `timing` is set.
    pub fn to_json(
        &self,
        template: &TemplateSpec,
        tokenizer: &dyn Tokenizer,
        timing: bool,
    ) -> Value {
        let names: Vec<&str> = template.field_names().collect();
        let fields: Map<String, Value> = names
            .iter()
            .zip(&self.contents)
            .map(|(name, content)| (name.to_string(), Value::String(tokenizer.decode(content))))
            .collect();
        let trace: Vec<Value> = self
            .trace
            .iter()
            .map(|record| {
                json!({
                    "pass": record.pass,
                    "fields": record.fields.iter().map(|&f| names[f]).collect::<Vec<_>>(),
                    "completed": record.completed.iter().map(|&f| names[f]).collect::<Vec<_>>(),
                })
            })
            .collect();
        let mut out = json!({
            "fields": fields,
            "pass_count": self.pass_count,
            "total_generated": self.total_generated,
            "parallel_degree": self.average_parallel_degree(),
            "trace": trace,
        });
        if timing {
            out["timing"] = json!({
                "prefill_ns": self.timing.prefill_ns,
                "generate_ns": self.timing.generate_ns,
            });
        }
        out
    }
}

/// Per-session state shared by the decoders.
struct Session<'a> {
    template: &'a TemplateSpec,
    graph: &'a DependencyGraph,
    layout: PackedLayout,
    cache: KvCache,
    generated: Vec<Vec<TokenId>>,
    sampler: Sampler,
}

impl<'a> Session<'a> {
    fn start(
        template: &'a TemplateSpec,
        graph: &'a DependencyGraph,
        model: &dyn TokenModel,
        prompt: &[TokenId],
        options: &DecodeOptions,
        hooks: &mut dyn DecodeHooks,
    ) -> Result<Self, EngineError> {
        if model.vocab_size() != template.vocab_size() {
            return Err(EngineError::VocabMismatch {
                model: model.vocab_size(),
                template: template.vocab_size(),
            });
        }
        if graph.node_count() != template.len() {
            return Err(ScheduleError::SizeMismatch {
                graph: graph.node_count(),
                template: template.len(),
            }
            .into());
        }
        options.stop.validate(template)?;
        let layout = PackedLayout::new(template);
        let capacity = layout.prompt_span().len();
        if prompt.len() > capacity {
            return Err(EngineError::PromptTooLong {
                len: prompt.len(),
                capacity,
            });
        }
        let mut session = Self {
            template,
            graph,
            cache: KvCache::new(layout.total_len()),
            layout,
            generated: vec![Vec::new(); template.len()],
            sampler: options.sampler.clone().unwrap_or(Sampler::Greedy),
        };
        session.prefill(model, prompt, hooks)?;
        Ok(session)
    }

    fn prefill(
        &mut self,
        model: &dyn TokenModel,
        prompt: &[TokenId],
        hooks: &mut dyn DecodeHooks,
    ) -> Result<(), EngineError> {
        let mut mask = prefill_mask(&self.layout, self.graph, prompt.len())?;
        let prefix_tokens = self
            .template
            .fields()
            .iter()
            .flat_map(|f| f.prefix_tokens.iter().copied());
        let queries: Vec<Query> = prompt
            .iter()
            .copied()
            .chain(prefix_tokens)
            .zip(mask.query_positions().to_vec())
            .map(|(token, position)| Query { token, position })
            .collect();
        if queries.is_empty() {
            return Ok(());
        }
        hooks.on_mask(0, &mut mask);
        model.forward(&queries, &mask, &mut self.cache, true)?;
        Ok(())
    }

    fn query(&self, field: usize) -> Query {
        let step = self.generated[field].len();
        let token = match step {
            0 => self
                .template
                .field(field)
                .prefix_tokens
                .last()
                .copied()
                .unwrap_or(self.template.terminator()),
            _ => self.generated[field][step - 1],
        };
        Query {
            token,
            position: self.layout.slot_position(field, step),
        }
    }

    /// Runs one generation pass over `fields` and returns the sampled tokens.
    fn step(
        &mut self,
        model: &dyn TokenModel,
        pass: usize,
        fields: &[usize],
        hooks: &mut dyn DecodeHooks,
    ) -> Result<Vec<(usize, TokenId)>, EngineError> {
        let cursors: Vec<usize> = self.generated.iter().map(Vec::len).collect();
        let mut mask = pass_mask(
            &self.layout,
            self.graph,
            fields,
            &cursors,
            self.cache.written_positions(),
        )?;
        hooks.on_mask(pass, &mut mask);
        let queries: Vec<Query> = fields.iter().map(|&f| self.query(f)).collect();
        let logits = model.forward(&queries, &mask, &mut self.cache, true)?;
        let vocab = self.template.vocab_size();
        if logits.len() != fields.len() || logits.iter().any(|row| row.len() != vocab) {
            return Err(EngineError::LogitsShape {
                got: logits.len(),
                width: logits.first().map_or(0, Vec::len),
                rows: fields.len(),
                vocab,
            });
        }
        let mut emitted = Vec::with_capacity(fields.len());
        for (&field, row) in fields.iter().zip(&logits) {
            hooks.on_logits(field, cursors[field], row);
            let token = self.sampler.sample(row)?;
            self.generated[field].push(token);
            emitted.push((field, token));
        }
        Ok(emitted)
    }

    fn finish(
        self,
        pass_count: usize,
        trace: Vec<PassRecord>,
        timing: PhaseTiming,
        hooks: &mut dyn DecodeHooks,
    ) -> DecodeResult {
        hooks.on_finish(&self.cache);
        let lengths: Vec<usize> = self.generated.iter().map(Vec::len).collect();
        let contents = self
            .generated
            .into_iter()
            .zip(self.template.fields())
            .map(|(mut tokens, spec)| {
                if tokens.last() == Some(&spec.terminator) {
                    tokens.pop();
                }
                tokens
            })
            .collect();
        DecodeResult {
            contents,
            total_generated: lengths.iter().sum(),
            lengths,
            pass_count,
            trace,
            timing,
        }
    }
}

fn elapsed_ns(start: Instant) -> u64 {
    start.elapsed().as_nanos().min(u64::MAX as u128) as u64
}

/// Parallel decoding: every pass decodes one token of each ready field.
pub fn decode_parallel(
    template: &TemplateSpec,
    graph: &DependencyGraph,
    model: &dyn TokenModel,
    prompt: &[TokenId],
) -> Result<DecodeResult, EngineError> {
    decode_parallel_with(
        template,
        graph,
        model,
        prompt,
        &DecodeOptions::default(),
        &mut NoHooks,
    )
}

pub fn decode_parallel_with(
    template: &TemplateSpec,
    graph: &DependencyGraph,
    model: &dyn TokenModel,
    prompt: &[TokenId],
    options: &DecodeOptions,
    hooks: &mut dyn DecodeHooks,
) -> Result<DecodeResult, EngineError> {
    let start = Instant::now();
    let mut session = Session::start(template, graph, model, prompt, options, hooks)?;
    let prefill_ns = elapsed_ns(start);
    let start = Instant::now();
    let mut scheduler = DecodeScheduler::with_stop_rule(graph, template, options.stop.clone())?;
    while !scheduler.is_done() {
        let ready = scheduler.ready_fields();
        let emitted = session.step(model, scheduler.pass_count() + 1, &ready, hooks)?;
        scheduler.commit_pass(&emitted)?;
    }
    let timing = PhaseTiming {
        prefill_ns,
        generate_ns: elapsed_ns(start),
    };
    let pass_count = scheduler.pass_count();
    Ok(session.finish(pass_count, scheduler.into_trace(), timing, hooks))
}

/// Autoregressive baseline: fields one after another in template order,
/// each seeing every earlier field, in the same packed layout.
pub fn decode_autoregressive(
    template: &TemplateSpec,
    model: &dyn TokenModel,
    prompt: &[TokenId],
) -> Result<DecodeResult, EngineError> {
    decode_autoregressive_with(
        template,
        model,
        prompt,
        &DecodeOptions::default(),
        &mut NoHooks,
    )
}

pub fn decode_autoregressive_with(
    template: &TemplateSpec,
    model: &dyn TokenModel,
    prompt: &[TokenId],
    options: &DecodeOptions,
    hooks: &mut dyn DecodeHooks,
) -> Result<DecodeResult, EngineError> {
    let chain = DependencyGraph::chain(template.len());
    decode_parallel_with(template, &chain, model, prompt, options, hooks)
}

/// Equivalence oracle: one field at a time in topological order, one token
/// per pass, with masks from the same visibility rule.
pub fn decode_oracle(
    template: &TemplateSpec,
    graph: &DependencyGraph,
    model: &dyn TokenModel,
    prompt: &[TokenId],
) -> Result<DecodeResult, EngineError> {
    decode_oracle_with(
        template,
        graph,
        model,
        prompt,
        &DecodeOptions::default(),
        &mut NoHooks,
    )
}

pub fn decode_oracle_with(
    template: &TemplateSpec,
    graph: &DependencyGraph,
    model: &dyn TokenModel,
    prompt: &[TokenId],
    options: &DecodeOptions,
    hooks: &mut dyn DecodeHooks,
) -> Result<DecodeResult, EngineError> {
    let start = Instant::now();
    let mut session = Session::start(template, graph, model, prompt, options, hooks)?;
    let prefill_ns = elapsed_ns(start);
    let start = Instant::now();
    let mut pass = 0;
    let mut trace = Vec::new();
    for &field in graph.topological_order() {
        loop {
            pass += 1;
            let emitted = session.step(model, pass, &[field], hooks)?;
            let generated = session.generated[field].len();
            let done = options
                .stop
                .finishes(field, emitted[0].1, generated, template);
            trace.push(PassRecord {
                pass,
                fields: vec![field],
                completed: if done { vec![field] } else { Vec::new() },
            });
            if done {
                break;
            }
        }
    }
    let timing = PhaseTiming {
        prefill_ns,
        generate_ns: elapsed_ns(start),
    };
    Ok(session.finish(pass, trace, timing, hooks))
}
