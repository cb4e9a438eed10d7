//! Default tokenizer used for token-level scoring and agreement.
//!
//! Maximal runs of alphanumeric characters form one token, every other
//! non-whitespace character is a token on its own, and whitespace separates.
//! Offsets are char offsets into the input.

use std::collections::HashMap;

use crate::model::{Document, TokenSpan};

pub fn tokenize(text: &str) -> Vec<TokenSpan> {
    let mut tokens = Vec::new();
    let mut word_start: Option<usize> = None;
    let mut pos = 0;
    for c in text.chars() {
        if c.is_alphanumeric() {
            word_start.get_or_insert(pos);
        } else {
            if let Some(start) = word_start.take() {
                tokens.push(TokenSpan::new(start, pos));
            }
            if !c.is_whitespace() {
                tokens.push(TokenSpan::new(pos, pos + 1));
            }
        }
        pos += 1;
    }
    if let Some(start) = word_start {
        tokens.push(TokenSpan::new(start, pos));
    }
    tokens
}

/// Tokens for a set of documents, keyed by doc id.
#[derive(Debug, Clone, Default)]
pub struct Tokenization {
    tokens: HashMap<String, Vec<TokenSpan>>,
}

impl Tokenization {
    pub fn from_documents<'a>(docs: impl IntoIterator<Item = &'a Document>) -> Self {
        let tokens = docs
            .into_iter()
            .map(|d| (d.id().to_string(), tokenize(d.text())))
            .collect();
        Self { tokens }
    }

    pub fn insert(&mut self, doc_id: impl Into<String>, tokens: Vec<TokenSpan>) {
        self.tokens.insert(doc_id.into(), tokens);
    }

    pub fn get(&self, doc_id: &str) -> Option<&[TokenSpan]> {
        self.tokens.get(doc_id).map(Vec::as_slice)
    }
}
