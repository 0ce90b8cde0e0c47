//! Extraction of a proposed context from free-form assistant text.

use serde_json::{Map, Value};
use thiserror::Error;

use super::prompt::SUGGESTION_MARKER;
use crate::context_space::{Context, ContextError, ContextSpace, RawJsonError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParseError {
    #[error("no valid JSON object found in response")]
    NoJsonObject,
    #[error("proposal is missing required key {0}")]
    MissingKey(String),
    #[error("proposal value for {0} is not a number")]
    NotANumber(String),
    #[error("proposal rejected: {0}")]
    Rejected(#[from] ContextError),
}

/// Byte ranges of every top-level, syntactically valid JSON object in `text`.
pub fn json_objects(text: &str) -> Vec<(usize, usize, Map<String, Value>)> {
    let mut found = Vec::new();
    let mut i = 0;
    while let Some(off) = text[i..].find('{') {
        let start = i + off;
        let mut stream = serde_json::Deserializer::from_str(&text[start..]).into_iter::<Value>();
        match stream.next() {
            Some(Ok(Value::Object(map))) => {
                let end = start + stream.byte_offset();
                found.push((start, end, map));
                i = end;
            }
            _ => i = start + 1,
        }
    }
    found
}

/// Free text preceding the suggestion marker (or the chosen JSON object).
pub fn insights(raw_text: &str) -> String {
    match raw_text.rfind(SUGGESTION_MARKER) {
        Some(pos) => raw_text[..pos].trim().to_string(),
        None => match json_objects(raw_text).last() {
            Some((start, _, _)) => raw_text[..*start].trim().to_string(),
            None => raw_text.trim().to_string(),
        },
    }
}

/// Takes the last valid JSON object after the last suggestion marker (or in
/// the whole text when the marker is absent), maps it onto the space, and
/// sanitizes it into bounds.
pub fn parse_proposal(raw_text: &str, space: &ContextSpace) -> Result<Context, ParseError> {
    let tail = match raw_text.rfind(SUGGESTION_MARKER) {
        Some(pos) => &raw_text[pos + SUGGESTION_MARKER.len()..],
        None => raw_text,
    };
    let (_, _, obj) = json_objects(tail)
        .pop()
        .ok_or(ParseError::NoJsonObject)?;
    let raw = space.raw_from_json(&obj).map_err(|e| match e {
        RawJsonError::MissingKey(k) => ParseError::MissingKey(k),
        RawJsonError::NotANumber(k) => ParseError::NotANumber(k),
    })?;
    Ok(space.clamp_and_round(&raw)?)
}
