//! Single-sequence placement of prompt, field prefixes, and field slots.
//!
//! Every position is fixed by the template alone: the prompt occupies
//! `[0, P)`, then each field contributes its prefix followed by a slot of
//! `max_len` positions. Slot positions that are never generated stay as
//! padding; they keep their place in the position arithmetic but are
//! never written.

use std::ops::Range;

use crate::template::TemplateSpec;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldSpans {
    pub prefix: Range<usize>,
    pub slot: Range<usize>,
}

/// What occupies a layout position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Region {
    Prompt { index: usize },
    Prefix { field: usize, index: usize },
    Slot { field: usize, step: usize },
}

impl Region {
    /// Prompt and prefix tokens are known before generation starts.
    pub fn is_fixed(self) -> bool {
        !matches!(self, Region::Slot { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedLayout {
    prompt: Range<usize>,
    fields: Vec<FieldSpans>,
    total_len: usize,
}

impl PackedLayout {
    pub fn new(template: &TemplateSpec) -> Self {
        let prompt = 0..template.prompt_tokens().len();
        let mut cursor = prompt.end;
        let fields = template
            .fields()
            .iter()
            .map(|field| {
                let prefix = cursor..cursor + field.prefix_tokens.len();
                let slot = prefix.end..prefix.end + field.max_len;
                cursor = slot.end;
                FieldSpans { prefix, slot }
            })
            .collect();
        Self {
            prompt,
            fields,
            total_len: cursor,
        }
    }

    pub fn prompt_span(&self) -> Range<usize> {
        self.prompt.clone()
    }

    pub fn field_spans(&self, field: usize) -> &FieldSpans {
        &self.fields[field]
    }

    pub fn prefix_span(&self, field: usize) -> Range<usize> {
        self.fields[field].prefix.clone()
    }

    pub fn slot_span(&self, field: usize) -> Range<usize> {
        self.fields[field].slot.clone()
    }

    pub fn field_count(&self) -> usize {
        self.fields.len()
    }

    /// One past the last slot position.
    pub fn total_len(&self) -> usize {
        self.total_len
    }

    /// Position id of generated token `step` of `field`.
    pub fn slot_position(&self, field: usize, step: usize) -> usize {
        let slot = &self.fields[field].slot;
        assert!(
            step < slot.len(),
            "step {step} outside slot of field {field}"
        );
        slot.start + step
    }

    pub fn region(&self, position: usize) -> Option<Region> {
        if position >= self.total_len {
            return None;
        }
        if self.prompt.contains(&position) {
            return Some(Region::Prompt { index: position });
        }
        // fields are laid out in order; find the one whose span covers position
        let field = self
            .fields
            .partition_point(|spans| spans.slot.end <= position);
        let spans = &self.fields[field];
        Some(if spans.prefix.contains(&position) {
            Region::Prefix {
                field,
                index: position - spans.prefix.start,
            }
        } else {
            Region::Slot {
                field,
                step: position - spans.slot.start,
            }
        })
    }

    /// Positions of all prefix tokens, ascending.
    pub fn prefix_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.fields.iter().flat_map(|f| f.prefix.clone())
    }
}
