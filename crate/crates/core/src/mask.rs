//! Visibility between tokens of the packed sequence, and per-pass masks.
//!
//! A generated token of field `b` may attend to a generated token of field
//! `a` iff `a` is an ancestor of `b` in the dependency graph, or `a == b` and
//! the key is not later than the query. Fixed tokens (prompt and prefixes)
//! are visible to every generated token. Unwritten positions are visible to
//! nobody.

use std::fmt::Write as _;

use thiserror::Error;

use crate::graph::DependencyGraph;
use crate::layout::{PackedLayout, Region};
use crate::template::TemplateSpec;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MaskError {
    #[error("position {0} is outside the layout")]
    PositionOutOfBounds(usize),
    #[error("position {0} is a generated slot, not a fixed token")]
    NotFixed(usize),
    #[error("field {field} step {step} is outside the layout")]
    SlotOutOfBounds { field: usize, step: usize },
    #[error("ready fields {0} and {1} depend on each other")]
    DependentQueries(usize, usize),
    #[error("query position {0} is already written")]
    QueryWritten(usize),
    #[error("written positions must be strictly ascending")]
    UnsortedWritten,
}

/// Identifies one token of the packed sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TokenRef {
    /// Prompt or prefix token at this position.
    Fixed(usize),
    Slot {
        field: usize,
        step: usize,
    },
}

impl TokenRef {
    pub fn at(layout: &PackedLayout, position: usize) -> Result<Self, MaskError> {
        match layout
            .region(position)
            .ok_or(MaskError::PositionOutOfBounds(position))?
        {
            Region::Slot { field, step } => Ok(TokenRef::Slot { field, step }),
            _ => Ok(TokenRef::Fixed(position)),
        }
    }

    pub fn position(self, layout: &PackedLayout) -> Result<usize, MaskError> {
        match self {
            TokenRef::Fixed(p) => match layout.region(p) {
                None => Err(MaskError::PositionOutOfBounds(p)),
                Some(r) if !r.is_fixed() => Err(MaskError::NotFixed(p)),
                Some(_) => Ok(p),
            },
            TokenRef::Slot { field, step } => {
                if field < layout.field_count() && step < layout.slot_span(field).len() {
                    Ok(layout.slot_position(field, step))
                } else {
                    Err(MaskError::SlotOutOfBounds { field, step })
                }
            }
        }
    }
}

/// Whether `query` may attend to `key`.
///
/// Fixed queries only occur during prefill and see fixed keys causally.
pub fn visible(
    layout: &PackedLayout,
    graph: &DependencyGraph,
    query: TokenRef,
    key: TokenRef,
    key_written: bool,
) -> Result<bool, MaskError> {
    let query_pos = query.position(layout)?;
    let key_pos = key.position(layout)?;
    if !key_written {
        return Ok(false);
    }
    Ok(match (query, key) {
        (TokenRef::Fixed(_), TokenRef::Fixed(_)) => key_pos <= query_pos,
        (TokenRef::Fixed(_), TokenRef::Slot { .. }) => false,
        (TokenRef::Slot { .. }, TokenRef::Fixed(_)) => true,
        (
            TokenRef::Slot {
                field: qf,
                step: qs,
            },
            TokenRef::Slot {
                field: kf,
                step: ks,
            },
        ) => {
            if qf == kf {
                ks <= qs
            } else {
                graph.is_ancestor(kf, qf)
            }
        }
    })
}

/// Dense boolean mask for one forward pass.
///
/// Rows are queries. Columns are the cache positions written before the
/// pass (ascending) followed by this pass's queries in row order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PassMask {
    cached: Vec<usize>,
    queries: Vec<usize>,
    bits: Vec<bool>,
}

impl PassMask {
    pub fn rows(&self) -> usize {
        self.queries.len()
    }

    pub fn cols(&self) -> usize {
        self.cached.len() + self.queries.len()
    }

    pub fn cached_positions(&self) -> &[usize] {
        &self.cached
    }

    pub fn query_positions(&self) -> &[usize] {
        &self.queries
    }

    /// Layout position of column `col`.
    pub fn column_position(&self, col: usize) -> usize {
        if col < self.cached.len() {
            self.cached[col]
        } else {
            self.queries[col - self.cached.len()]
        }
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.cols() + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        let cols = self.cols();
        self.bits[row * cols + col] = value;
    }

    pub fn flip(&mut self, row: usize, col: usize) {
        let cols = self.cols();
        self.bits[row * cols + col] ^= true;
    }

    pub fn row(&self, row: usize) -> &[bool] {
        let cols = self.cols();
        &self.bits[row * cols..(row + 1) * cols]
    }

    /// Tab-separated 0/1 grid with `field:step` style labels.
    pub fn render_grid(&self, layout: &PackedLayout, template: &TemplateSpec) -> String {
        let label = |pos: usize| match layout.region(pos) {
            Some(Region::Prompt { index }) => format!("prompt:{index}"),
            Some(Region::Prefix { field, index }) => {
                format!("{}:p{index}", template.field(field).name)
            }
            Some(Region::Slot { field, step }) => format!("{}:{step}", template.field(field).name),
            None => format!("?{pos}"),
        };
        let mut out = String::new();
        for col in 0..self.cols() {
            out.push('\t');
            out.push_str(&label(self.column_position(col)));
        }
        out.push('\n');
        for row in 0..self.rows() {
            out.push_str(&label(self.queries[row]));
            for &bit in self.row(row) {
                let _ = write!(out, "\t{}", u8::from(bit));
            }
            out.push('\n');
        }
        out
    }
}

fn check_written(written: &[usize], layout: &PackedLayout) -> Result<(), MaskError> {
    if written.windows(2).any(|w| w[0] >= w[1]) {
        return Err(MaskError::UnsortedWritten);
    }
    match written.last() {
        Some(&p) if p >= layout.total_len() => Err(MaskError::PositionOutOfBounds(p)),
        _ => Ok(()),
    }
}

/// Mask for one generation pass: the next token of every ready field.
///
/// `written` lists the positions already in the cache, ascending.
pub fn pass_mask(
    layout: &PackedLayout,
    graph: &DependencyGraph,
    ready: &[usize],
    cursors: &[usize],
    written: &[usize],
) -> Result<PassMask, MaskError> {
    for (i, &a) in ready.iter().enumerate() {
        for &b in &ready[i + 1..] {
            if a == b || graph.is_ancestor(a, b) || graph.is_ancestor(b, a) {
                return Err(MaskError::DependentQueries(a, b));
            }
        }
    }
    check_written(written, layout)?;
    let query_refs: Vec<TokenRef> = ready
        .iter()
        .map(|&field| TokenRef::Slot {
            field,
            step: cursors[field],
        })
        .collect();
    let queries = query_refs
        .iter()
        .map(|q| q.position(layout))
        .collect::<Result<Vec<_>, _>>()?;
    if let Some(&p) = queries.iter().find(|p| written.binary_search(p).is_ok()) {
        return Err(MaskError::QueryWritten(p));
    }
    let key_refs = written
        .iter()
        .map(|&p| TokenRef::at(layout, p))
        .collect::<Result<Vec<_>, _>>()?;

    let cols = written.len() + queries.len();
    let mut bits = Vec::with_capacity(queries.len() * cols);
    for &q in &query_refs {
        for &k in key_refs.iter().chain(&query_refs) {
            bits.push(visible(layout, graph, q, k, true)?);
        }
    }
    Ok(PassMask {
        cached: written.to_vec(),
        queries,
        bits,
    })
}

/// Mask for the prefill pass over the first `prompt_len` prompt tokens and
/// every prefix token, causal among themselves.
pub fn prefill_mask(
    layout: &PackedLayout,
    graph: &DependencyGraph,
    prompt_len: usize,
) -> Result<PassMask, MaskError> {
    let prompt = layout.prompt_span();
    if prompt_len > prompt.len() {
        return Err(MaskError::PositionOutOfBounds(prompt_len - 1));
    }
    let queries: Vec<usize> = (0..prompt_len).chain(layout.prefix_positions()).collect();
    let n = queries.len();
    let mut bits = Vec::with_capacity(n * n);
    for &q in &queries {
        for &k in &queries {
            bits.push(visible(
                layout,
                graph,
                TokenRef::Fixed(q),
                TokenRef::Fixed(k),
                true,
            )?);
        }
    }
    Ok(PassMask {
        cached: Vec::new(),
        queries,
        bits,
    })
}
