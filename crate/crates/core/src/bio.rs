//! BIO encoding of spans over a tokenization, and the inverse decoding.

use crate::error::{Error, Result};
use crate::model::{check_non_overlapping, Span, TokenSpan, OUTSIDE_LABEL};

/// A parsed BIO tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tag<'a> {
    Outside,
    Begin(&'a str),
    Inside(&'a str),
}

impl<'a> Tag<'a> {
    pub fn parse(tag: &'a str) -> Result<Self> {
        if tag == OUTSIDE_LABEL {
            return Ok(Tag::Outside);
        }
        let tagged = |label: &'a str| {
            if label.is_empty() || label == OUTSIDE_LABEL {
                Err(Error::InvalidTag(tag.to_string()))
            } else {
                Ok(label)
            }
        };
        if let Some(label) = tag.strip_prefix("B-") {
            Ok(Tag::Begin(tagged(label)?))
        } else if let Some(label) = tag.strip_prefix("I-") {
            Ok(Tag::Inside(tagged(label)?))
        } else {
            Err(Error::InvalidTag(tag.to_string()))
        }
    }

    /// The entity class, or `O`.
    pub fn class(&self) -> &'a str {
        match self {
            Tag::Outside => OUTSIDE_LABEL,
            Tag::Begin(l) | Tag::Inside(l) => l,
        }
    }
}

/// Index of the span each token belongs to, under the ≥1-character overlap
/// rule. A token touching two spans goes to the leftmost one.
/// `spans` must be sorted and non-overlapping.
pub(crate) fn token_owners(tokens: &[TokenSpan], spans: &[Span]) -> Vec<Option<usize>> {
    let mut owners = Vec::with_capacity(tokens.len());
    let mut next = 0;
    for token in tokens {
        while next < spans.len() && spans[next].end() <= token.start {
            next += 1;
        }
        owners.push((next < spans.len() && token.overlaps(&spans[next])).then_some(next));
    }
    owners
}

fn sorted_flat_spans(spans: &[Span]) -> Result<Vec<Span>> {
    let mut sorted = spans.to_vec();
    sorted.sort_by(Span::storage_cmp);
    if let Some(s) = sorted.iter().find(|s| s.is_conflict()) {
        return Err(Error::InvalidSpan {
            start: s.start(),
            end: s.end(),
            label: s.label().to_string(),
            reason: "conflict spans cannot be BIO-encoded".into(),
        });
    }
    check_non_overlapping(sorted.iter())?;
    Ok(sorted)
}

/// Per-token stripped class (`O` or the entity label).
pub(crate) fn token_classes<'a>(tokens: &[TokenSpan], spans: &'a [Span]) -> Vec<&'a str> {
    token_owners(tokens, spans)
        .into_iter()
        .map(|o| o.map_or(OUTSIDE_LABEL, |i| spans[i].label()))
        .collect()
}

pub fn spans_to_bio(tokens: &[TokenSpan], spans: &[Span]) -> Result<Vec<String>> {
    let spans = sorted_flat_spans(spans)?;
    let owners = token_owners(tokens, &spans);
    let mut prev = None;
    let tags = owners
        .into_iter()
        .map(|owner| {
            let tag = match owner {
                None => OUTSIDE_LABEL.to_string(),
                Some(i) if prev == Some(i) => format!("I-{}", spans[i].label()),
                Some(i) => format!("B-{}", spans[i].label()),
            };
            prev = owner;
            tag
        })
        .collect();
    Ok(tags)
}

/// Entity runs as `(first_token, last_token_inclusive, label)`, with orphan
/// `I-x` tags repaired to `B-x`.
pub(crate) fn decode_runs<S: AsRef<str>>(tags: &[S]) -> Result<Vec<(usize, usize, &str)>> {
    let mut runs: Vec<(usize, usize, &str)> = Vec::new();
    let mut open = false;
    for (i, raw) in tags.iter().enumerate() {
        match Tag::parse(raw.as_ref())? {
            Tag::Outside => open = false,
            Tag::Begin(label) => {
                runs.push((i, i, label));
                open = true;
            }
            Tag::Inside(label) => match runs.last_mut() {
                Some(run) if open && run.2 == label => run.1 = i,
                _ => {
                    runs.push((i, i, label));
                    open = true;
                }
            },
        }
    }
    Ok(runs)
}

pub fn bio_to_spans<S: AsRef<str>>(tokens: &[TokenSpan], tags: &[S]) -> Result<Vec<Span>> {
    if tokens.len() != tags.len() {
        return Err(Error::LengthMismatch {
            tokens: tokens.len(),
            tags: tags.len(),
        });
    }
    decode_runs(tags)?
        .into_iter()
        .map(|(first, last, label)| Span::new(tokens[first].start, tokens[last].end, label))
        .collect()
}
