//! Tolerant line-oriented parser for distillation replies.
//!
//! Recognized lines (case-insensitive, optional markdown bullets/bold):
//! `Pros k: ...`, `Cons k: ...`, `Evidence: ...`, `Keywords: ...`.
//! Anything else is ignored.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::template::PromptTemplate;
use super::Polarity;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ParseError {
    #[error("malformed response: no pros/cons block with keywords found")]
    MalformedResponse,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistilledReason {
    pub polarity: Polarity,
    pub reason: String,
    pub evidence: String,
    pub keywords: Vec<String>,
}

const SURROUNDING: &[char] = &[
    '[', ']', '(', ')', '{', '}', '"', '\'', '`', '“', '”', '‘', '’', '*',
];

/// Canonical keyword form: lowercase, trimmed, inner whitespace collapsed,
/// surrounding brackets/quotes and trailing periods removed.
pub fn normalize_keyword(raw: &str) -> String {
    let lowered = raw.to_lowercase();
    let mut s = lowered.as_str();
    loop {
        let t = s
            .trim()
            .trim_matches(SURROUNDING)
            .trim_end_matches('.')
            .trim();
        if t.len() == s.len() {
            break;
        }
        s = t;
    }
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Strip every layer of surrounding whitespace and brackets from free text.
fn strip_wrapping(raw: &str) -> String {
    let mut s = raw;
    loop {
        let t = s.trim().trim_matches(SURROUNDING).trim();
        if t.len() == s.len() {
            break;
        }
        s = t;
    }
    s.to_string()
}

pub fn split_keywords(payload: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for part in payload.split([',', ';', '，', '；']) {
        let k = normalize_keyword(part);
        if !k.is_empty() && !out.contains(&k) {
            out.push(k);
        }
    }
    out
}

/// Remove list bullets, heading marks and bold markers from the line start.
fn strip_decorations(line: &str) -> &str {
    line.trim_start_matches(|c: char| c.is_whitespace() || matches!(c, '*' | '#' | '-' | '>' | '_'))
}

/// `"pros 2: rest"` → `(Pro, "rest")`.
fn block_header(line: &str) -> Option<(Polarity, &str)> {
    let head = line.get(..4)?;
    let polarity = if head.eq_ignore_ascii_case("pros") {
        Polarity::Pro
    } else if head.eq_ignore_ascii_case("cons") {
        Polarity::Con
    } else {
        return None;
    };
    let rest = line[4..].trim_start();
    let digits = rest.len() - rest.trim_start_matches(|c: char| c.is_ascii_digit()).len();
    if digits == 0 {
        return None;
    }
    let rest = rest[digits..].trim_start_matches(|c: char| c.is_whitespace() || c == '*');
    let rest = rest.strip_prefix(':').or_else(|| rest.strip_prefix('：'))?;
    Some((polarity, rest))
}

/// `"keywords: rest"` → `"rest"` for the given field name.
fn field<'a>(line: &'a str, name: &str) -> Option<&'a str> {
    let head = line.get(..name.len())?;
    if !head.eq_ignore_ascii_case(name) {
        return None;
    }
    let rest = line[name.len()..].trim_start_matches(|c: char| c.is_whitespace() || c == '*');
    rest.strip_prefix(':').or_else(|| rest.strip_prefix('：'))
}

#[derive(Default)]
struct Partial {
    polarity: Option<Polarity>,
    reason: String,
    evidence: Option<String>,
    keywords: Option<Vec<String>>,
}

impl Partial {
    fn finish(self, template: &PromptTemplate, out: &mut Vec<DistilledReason>) {
        let Some(polarity) = self.polarity else { return };
        let keywords = self.keywords.unwrap_or_default();
        if keywords.is_empty() || !template.kind.accepts(polarity) {
            return;
        }
        out.push(DistilledReason {
            polarity,
            reason: self.reason,
            evidence: self.evidence.unwrap_or_default(),
            keywords,
        });
    }
}

pub fn parse_distillation_response(
    text: &str,
    expected: &PromptTemplate,
) -> Result<Vec<DistilledReason>, ParseError> {
    let mut out = Vec::new();
    let mut current = Partial::default();
    for raw_line in text.lines() {
        let line = strip_decorations(raw_line);
        if let Some((polarity, rest)) = block_header(line) {
            std::mem::take(&mut current).finish(expected, &mut out);
            current.polarity = Some(polarity);
            current.reason = strip_wrapping(rest);
        } else if let Some(rest) = field(line, "keywords").or_else(|| field(line, "keyword")) {
            if current.polarity.is_some() && current.keywords.is_none() {
                current.keywords = Some(split_keywords(&strip_wrapping(rest)));
            }
        } else if let Some(rest) = field(line, "evidence") {
            if current.polarity.is_some() && current.evidence.is_none() {
                current.evidence = Some(strip_wrapping(rest));
            }
        }
    }
    current.finish(expected, &mut out);
    if out.is_empty() {
        Err(ParseError::MalformedResponse)
    } else {
        Ok(out)
    }
}

/// Render reasons in the canonical objective reply layout.
pub fn render_reasons(reasons: &[DistilledReason]) -> String {
    let mut out = String::new();
    let (mut pros, mut cons) = (0, 0);
    for r in reasons {
        let k = match r.polarity {
            Polarity::Pro => {
                pros += 1;
                pros
            }
            Polarity::Con => {
                cons += 1;
                cons
            }
        };
        let _ = writeln!(out, "{} {k}: [{}]", r.polarity.block_label(), r.reason);
        let _ = writeln!(out, "Evidence: [{}]", r.evidence);
        let _ = writeln!(out, "Keywords: [{}]", r.keywords.join(", "));
    }
    out
}
