//! Ready-set schedule over the dependency graph.
//!
//! Every pass decodes one token for each ready field. A field finishes when
//! it emits its terminator or fills its slot; its dependents lose one
//! outstanding prerequisite and join the ready set once they have none left.
//! Newly ready fields start on the following pass, after the prerequisite's
//! final token has reached the cache.

use serde::Serialize;
use thiserror::Error;

use crate::graph::DependencyGraph;
use crate::template::{TemplateSpec, TokenId};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ScheduleError {
    #[error("graph has {graph} nodes but the template has {template} fields")]
    SizeMismatch { graph: usize, template: usize },
    #[error("emitted fields {emitted:?} do not match the ready set {ready:?}")]
    NotReadySet {
        emitted: Vec<usize>,
        ready: Vec<usize>,
    },
    #[error("field {0} is already done")]
    FieldDone(usize),
    #[error("field {field}: forced length {length} is outside 1..={max_len}")]
    BadForcedLength {
        field: usize,
        length: usize,
        max_len: usize,
    },
    #[error("forced lengths cover {got} fields, expected {expected}")]
    ForcedLengthCount { got: usize, expected: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldStatus {
    Blocked,
    Ready,
    Done,
}

/// When a field stops generating.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum StopRule {
    /// On the field's terminator, or when the slot is full.
    #[default]
    Natural,
    /// After exactly this many tokens per field, terminators ignored.
    /// Replays a known set of realized lengths.
    Exact(Vec<usize>),
}

impl StopRule {
    pub fn validate(&self, template: &TemplateSpec) -> Result<(), ScheduleError> {
        if let StopRule::Exact(lengths) = self {
            if lengths.len() != template.len() {
                return Err(ScheduleError::ForcedLengthCount {
                    got: lengths.len(),
                    expected: template.len(),
                });
            }
            for (field, (&length, spec)) in lengths.iter().zip(template.fields()).enumerate() {
                if length == 0 || length > spec.max_len {
                    return Err(ScheduleError::BadForcedLength {
                        field,
                        length,
                        max_len: spec.max_len,
                    });
                }
            }
        }
        Ok(())
    }

    /// Whether `field` is finished after emitting `token` as its `generated`-th token.
    pub fn finishes(
        &self,
        field: usize,
        token: TokenId,
        generated: usize,
        template: &TemplateSpec,
    ) -> bool {
        let spec = template.field(field);
        match self {
            StopRule::Natural => token == spec.terminator || generated >= spec.max_len,
            StopRule::Exact(lengths) => generated >= lengths[field],
        }
    }
}

/// One pass of the schedule.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PassRecord {
    /// 1-based generation pass number.
    pub pass: usize,
    pub fields: Vec<usize>,
    pub completed: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct DecodeScheduler<'a> {
    graph: &'a DependencyGraph,
    template: &'a TemplateSpec,
    stop: StopRule,
    remaining_in_degree: Vec<usize>,
    status: Vec<FieldStatus>,
    cursor: Vec<usize>,
    pass_count: usize,
    total_generated: usize,
    completed_count: usize,
    trace: Vec<PassRecord>,
}

impl<'a> DecodeScheduler<'a> {
    pub fn new(
        graph: &'a DependencyGraph,
        template: &'a TemplateSpec,
    ) -> Result<Self, ScheduleError> {
        Self::with_stop_rule(graph, template, StopRule::Natural)
    }

    pub fn with_stop_rule(
        graph: &'a DependencyGraph,
        template: &'a TemplateSpec,
        stop: StopRule,
    ) -> Result<Self, ScheduleError> {
        if graph.node_count() != template.len() {
            return Err(ScheduleError::SizeMismatch {
                graph: graph.node_count(),
                template: template.len(),
            });
        }
        stop.validate(template)?;
        let n = template.len();
        let remaining_in_degree: Vec<usize> = (0..n).map(|v| graph.in_degree(v)).collect();
        let status = remaining_in_degree
            .iter()
            .map(|&d| {
                if d == 0 {
                    FieldStatus::Ready
                } else {
                    FieldStatus::Blocked
                }
            })
            .collect();
        Ok(Self {
            graph,
            template,
            stop,
            remaining_in_degree,
            status,
            cursor: vec![0; n],
            pass_count: 0,
            total_generated: 0,
            completed_count: 0,
            trace: Vec::new(),
        })
    }

    /// Ready fields in ascending template order.
    pub fn ready_fields(&self) -> Vec<usize> {
        (0..self.status.len())
            .filter(|&v| self.status[v] == FieldStatus::Ready)
            .collect()
    }

    /// Applies one pass: `emitted` holds one token for every ready field.
    /// Returns the fields that finished on this pass.
    pub fn commit_pass(
        &mut self,
        emitted: &[(usize, TokenId)],
    ) -> Result<Vec<usize>, ScheduleError> {
        let ready = self.ready_fields();
        let mut fields: Vec<usize> = emitted.iter().map(|&(f, _)| f).collect();
        fields.sort_unstable();
        if fields != ready {
            if let Some(&(f, _)) = emitted
                .iter()
                .find(|&&(f, _)| self.status.get(f) == Some(&FieldStatus::Done))
            {
                return Err(ScheduleError::FieldDone(f));
            }
            return Err(ScheduleError::NotReadySet {
                emitted: fields,
                ready,
            });
        }

        self.pass_count += 1;
        let mut completed = Vec::new();
        for &(field, token) in emitted {
            assert!(
                self.graph
                    .predecessors(field)
                    .iter()
                    .all(|&p| self.status[p] == FieldStatus::Done),
                "field {field} decoded before its prerequisites finished"
            );
            self.cursor[field] += 1;
            self.total_generated += 1;
            debug_assert!(self.cursor[field] <= self.template.field(field).max_len);
            if self
                .stop
                .finishes(field, token, self.cursor[field], self.template)
            {
                completed.push(field);
            }
        }
        completed.sort_unstable();

        // Release dependents only after every emission of this pass is applied,
        // so nothing released here is decoded in the same pass.
        for &field in &completed {
            self.status[field] = FieldStatus::Done;
            self.completed_count += 1;
            for &next in self.graph.successors(field) {
                self.remaining_in_degree[next] -= 1;
                if self.remaining_in_degree[next] == 0 {
                    self.status[next] = FieldStatus::Ready;
                }
            }
        }
        self.trace.push(PassRecord {
            pass: self.pass_count,
            fields: ready,
            completed: completed.clone(),
        });
        Ok(completed)
    }

    pub fn is_done(&self) -> bool {
        self.completed_count == self.status.len()
    }

    pub fn status(&self, field: usize) -> FieldStatus {
        self.status[field]
    }

    pub fn cursor(&self, field: usize) -> usize {
        self.cursor[field]
    }

    pub fn cursors(&self) -> &[usize] {
        &self.cursor
    }

    pub fn remaining_in_degree(&self, field: usize) -> usize {
        self.remaining_in_degree[field]
    }

    pub fn pass_count(&self) -> usize {
        self.pass_count
    }

    pub fn total_generated(&self) -> usize {
        self.total_generated
    }

    /// `total_generated / pass_count`, or 0 before the first pass.
    pub fn average_parallel_degree(&self) -> f64 {
        if self.pass_count == 0 {
            0.0
        } else {
            self.total_generated as f64 / self.pass_count as f64
        }
    }

    pub fn trace(&self) -> &[PassRecord] {
        &self.trace
    }

    pub fn into_trace(self) -> Vec<PassRecord> {
        self.trace
    }
}

/// Runs the schedule to completion with per-field lengths fixed in advance.
/// Used by planning; no model is involved.
pub fn simulate(
    graph: &DependencyGraph,
    template: &TemplateSpec,
    lengths: &[usize],
) -> Result<Vec<PassRecord>, ScheduleError> {
    let mut scheduler =
        DecodeScheduler::with_stop_rule(graph, template, StopRule::Exact(lengths.to_vec()))?;
    while !scheduler.is_done() {
        let emitted: Vec<_> = scheduler
            .ready_fields()
            .into_iter()
            .map(|f| (f, template.field(f).terminator))
            .collect();
        scheduler.commit_pass(&emitted)?;
    }
    Ok(scheduler.into_trace())
}
