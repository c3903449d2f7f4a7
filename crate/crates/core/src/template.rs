//! CoT templates: named fields with fixed prefixes and fixed-capacity slots.
//!
//! A template is the static shape of a structured chain-of-thought. The
//! prompt and every field prefix are known up front and get prefilled; only
//! slot contents are generated. A completed CoT renders as one
//! `prefix + content` line per field, in template order.

use std::collections::{HashMap, HashSet};

use serde::Deserialize;
use thiserror::Error;

pub type TokenId = u32;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TemplateError {
    #[error("malformed template document: {0}")]
    Malformed(String),
    #[error("template defines no fields")]
    NoFields,
    #[error("field #{index} has an empty name")]
    EmptyName { index: usize },
    #[error("duplicate field name `{0}`")]
    DuplicateField(String),
    #[error("field `{field}`: max_len must be at least 1, got {max_len}")]
    ZeroCapacity { field: String, max_len: i64 },
    #[error("field `{field}`: prefix token {token} is outside the vocabulary of {vocab_size}")]
    UnknownPrefixToken {
        field: String,
        token: TokenId,
        vocab_size: usize,
    },
    #[error("field `{field}`: terminator {token} is outside the vocabulary of {vocab_size}")]
    TerminatorOutOfVocab {
        field: String,
        token: i64,
        vocab_size: usize,
    },
    #[error("prompt token {token} is outside the vocabulary of {vocab_size}")]
    PromptTokenOutOfVocab { token: TokenId, vocab_size: usize },
    #[error("vocab_size must be positive")]
    EmptyVocab,
    #[error("no content supplied for field `{0}`")]
    MissingContent(String),
}

/// One named unit of the template.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldSpec {
    pub name: String,
    /// Rendered verbatim in front of the content; `"name: "` unless overridden.
    pub prefix_text: String,
    /// Fixed tokens of the prefix. Prefilled, never generated.
    pub prefix_tokens: Vec<TokenId>,
    /// Capacity of the slot in generated tokens. Prefix tokens are not counted.
    pub max_len: usize,
    pub terminator: TokenId,
}

impl FieldSpec {
    /// Field whose prefix is the default `"name: "`, tokenized with `tokenizer`.
    pub fn new(
        name: impl Into<String>,
        max_len: usize,
        terminator: TokenId,
        tokenizer: &dyn Tokenizer,
    ) -> Self {
        let name = name.into();
        let prefix_text = default_prefix(&name);
        let prefix_tokens = tokenizer.encode(&prefix_text);
        Self {
            name,
            prefix_text,
            prefix_tokens,
            max_len,
            terminator,
        }
    }

    /// Field with explicit prefix tokens and no prefix text.
    pub fn with_prefix_tokens(
        name: impl Into<String>,
        prefix_tokens: Vec<TokenId>,
        max_len: usize,
        terminator: TokenId,
    ) -> Self {
        Self {
            name: name.into(),
            prefix_text: String::new(),
            prefix_tokens,
            max_len,
            terminator,
        }
    }
}

fn default_prefix(name: &str) -> String {
    format!("{name}: ")
}

/// A validated template: prompt, ordered fields, vocabulary size.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSpec {
    prompt_tokens: Vec<TokenId>,
    fields: Vec<FieldSpec>,
    vocab_size: usize,
    terminator: TokenId,
}

impl TemplateSpec {
    pub fn new(
        prompt_tokens: Vec<TokenId>,
        fields: Vec<FieldSpec>,
        vocab_size: usize,
        terminator: TokenId,
    ) -> Result<Self, TemplateError> {
        if vocab_size == 0 {
            return Err(TemplateError::EmptyVocab);
        }
        if fields.is_empty() {
            return Err(TemplateError::NoFields);
        }
        if let Some(&token) = prompt_tokens.iter().find(|&&t| t as usize >= vocab_size) {
            return Err(TemplateError::PromptTokenOutOfVocab { token, vocab_size });
        }
        if terminator as usize >= vocab_size {
            return Err(TemplateError::TerminatorOutOfVocab {
                field: "<template>".into(),
                token: terminator as i64,
                vocab_size,
            });
        }
        let mut seen = HashSet::new();
        for (index, field) in fields.iter().enumerate() {
            if field.name.is_empty() {
                return Err(TemplateError::EmptyName { index });
            }
            if !seen.insert(field.name.as_str()) {
                return Err(TemplateError::DuplicateField(field.name.clone()));
            }
            if field.max_len == 0 {
                return Err(TemplateError::ZeroCapacity {
                    field: field.name.clone(),
                    max_len: 0,
                });
            }
            if let Some(&token) = field
                .prefix_tokens
                .iter()
                .find(|&&t| t as usize >= vocab_size)
            {
                return Err(TemplateError::UnknownPrefixToken {
                    field: field.name.clone(),
                    token,
                    vocab_size,
                });
            }
            if field.terminator as usize >= vocab_size {
                return Err(TemplateError::TerminatorOutOfVocab {
                    field: field.name.clone(),
                    token: field.terminator as i64,
                    vocab_size,
                });
            }
        }
        Ok(Self {
            prompt_tokens,
            fields,
            vocab_size,
            terminator,
        })
    }

    pub fn prompt_tokens(&self) -> &[TokenId] {
        &self.prompt_tokens
    }

    pub fn fields(&self) -> &[FieldSpec] {
        &self.fields
    }

    pub fn field(&self, index: usize) -> &FieldSpec {
        &self.fields[index]
    }

    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    /// Template-wide default terminator.
    pub fn terminator(&self) -> TokenId {
        self.terminator
    }

    pub fn field_index(&self, name: &str) -> Option<usize> {
        self.fields.iter().position(|f| f.name == name)
    }

    pub fn field_names(&self) -> impl Iterator<Item = &str> {
        self.fields.iter().map(|f| f.name.as_str())
    }

    pub fn max_lens(&self) -> Vec<usize> {
        self.fields.iter().map(|f| f.max_len).collect()
    }
}

/// Text <-> token id conversion.
pub trait Tokenizer: Send + Sync {
    fn encode(&self, text: &str) -> Vec<TokenId>;
    fn decode(&self, tokens: &[TokenId]) -> String;
    fn vocab_size(&self) -> usize;
}

/// One token per byte; ids 0..=255.
#[derive(Debug, Clone, Copy, Default)]
pub struct ByteTokenizer;

impl ByteTokenizer {
    pub fn encode_bytes(&self, bytes: &[u8]) -> Vec<TokenId> {
        bytes.iter().map(|&b| TokenId::from(b)).collect()
    }

    /// `None` if any id is not a byte.
    pub fn decode_bytes(&self, tokens: &[TokenId]) -> Option<Vec<u8>> {
        tokens.iter().map(|&t| u8::try_from(t).ok()).collect()
    }
}

impl Tokenizer for ByteTokenizer {
    fn encode(&self, text: &str) -> Vec<TokenId> {
        self.encode_bytes(text.as_bytes())
    }

    /// Invalid UTF-8 and non-byte ids decode to U+FFFD.
    fn decode(&self, tokens: &[TokenId]) -> String {
        let mut out = String::new();
        let mut run = Vec::new();
        for &t in tokens {
            match u8::try_from(t) {
                Ok(b) => run.push(b),
                Err(_) => {
                    out.push_str(&String::from_utf8_lossy(&run));
                    run.clear();
                    out.push(char::REPLACEMENT_CHARACTER);
                }
            }
        }
        out.push_str(&String::from_utf8_lossy(&run));
        out
    }

    fn vocab_size(&self) -> usize {
        256
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TemplateDocument {
    vocab_size: i64,
    prompt: String,
    terminator: i64,
    fields: Vec<FieldDocument>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FieldDocument {
    name: String,
    prefix: Option<String>,
    max_len: i64,
    terminator: Option<i64>,
}

/// Parses and validates a JSON template document.
///
/// Field order in the document is template order.
pub fn load_template(
    document: &str,
    tokenizer: &dyn Tokenizer,
) -> Result<TemplateSpec, TemplateError> {
    let doc: TemplateDocument =
        serde_json::from_str(document).map_err(|e| TemplateError::Malformed(e.to_string()))?;
    if doc.vocab_size <= 0 {
        return Err(TemplateError::EmptyVocab);
    }
    let vocab_size = doc.vocab_size as usize;
    let check_terminator = |field: &str, t: i64| -> Result<TokenId, TemplateError> {
        if t < 0 || t as u64 >= vocab_size as u64 {
            Err(TemplateError::TerminatorOutOfVocab {
                field: field.to_string(),
                token: t,
                vocab_size,
            })
        } else {
            Ok(t as TokenId)
        }
    };
    let default_terminator = check_terminator("<template>", doc.terminator)?;

    let mut fields = Vec::with_capacity(doc.fields.len());
    for field in doc.fields {
        if field.max_len < 1 {
            return Err(TemplateError::ZeroCapacity {
                field: field.name,
                max_len: field.max_len,
            });
        }
        let terminator = match field.terminator {
            Some(t) => check_terminator(&field.name, t)?,
            None => default_terminator,
        };
        let prefix_text = field.prefix.unwrap_or_else(|| default_prefix(&field.name));
        let prefix_tokens = tokenizer.encode(&prefix_text);
        fields.push(FieldSpec {
            name: field.name,
            prefix_text,
            prefix_tokens,
            max_len: field.max_len as usize,
            terminator,
        });
    }
    TemplateSpec::new(
        tokenizer.encode(&doc.prompt),
        fields,
        vocab_size,
        default_terminator,
    )
}

/// Renders a completed CoT: one `prefix + content` line per field in template order.
pub fn render_cot(
    template: &TemplateSpec,
    contents: &HashMap<String, Vec<TokenId>>,
    tokenizer: &dyn Tokenizer,
) -> Result<String, TemplateError> {
    let lines = template
        .fields()
        .iter()
        .map(|field| {
            contents
                .get(&field.name)
                .map(|content| format!("{}{}", field.prefix_text, tokenizer.decode(content)))
                .ok_or_else(|| TemplateError::MissingContent(field.name.clone()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(lines.join("\n"))
}

/// Same as [`render_cot`] for contents indexed by field position.
pub fn render_indexed(
    template: &TemplateSpec,
    contents: &[Vec<TokenId>],
    tokenizer: &dyn Tokenizer,
) -> String {
    template
        .fields()
        .iter()
        .zip(contents)
        .map(|(field, content)| format!("{}{}", field.prefix_text, tokenizer.decode(content)))
        .collect::<Vec<_>>()
        .join("\n")
}
