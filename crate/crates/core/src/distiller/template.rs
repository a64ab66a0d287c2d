//! Objective and subjective distillation prompt templates.

use std::fmt::Write as _;

use thiserror::Error;

use crate::corpus::{RawItem, RawReview};

use super::Polarity;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TemplateError {
    #[error("unknown placeholder `{{{0}}}` in template body")]
    UnknownPlaceholder(String),
    #[error("no value supplied for placeholder `{{{0}}}`")]
    MissingValue(String),
    #[error("unterminated placeholder in template body")]
    Unterminated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Placeholder {
    Name,
    Attributes,
    Categories,
    Rating,
    Comments,
}

impl Placeholder {
    pub const ALL: [Placeholder; 5] = [
        Placeholder::Name,
        Placeholder::Attributes,
        Placeholder::Categories,
        Placeholder::Rating,
        Placeholder::Comments,
    ];

    pub fn token(self) -> &'static str {
        match self {
            Placeholder::Name => "NAME",
            Placeholder::Attributes => "ATTRIBUTES",
            Placeholder::Categories => "CATEGORIES",
            Placeholder::Rating => "RATING",
            Placeholder::Comments => "COMMENTS",
        }
    }

    fn parse(token: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.token() == token)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TemplateKind {
    Objective,
    SubjectivePositive,
    SubjectiveNegative,
}

impl TemplateKind {
    pub fn accepts(self, polarity: Polarity) -> bool {
        match self {
            TemplateKind::Objective => true,
            TemplateKind::SubjectivePositive => polarity == Polarity::Pro,
            TemplateKind::SubjectiveNegative => polarity == Polarity::Con,
        }
    }
}

pub const EMPTY_ATTRIBUTES: &str = "none provided";
pub const EMPTY_COMMENT: &str = "(no comment)";
pub const DEFAULT_DOMAIN_NOUN: &str = "Movie";

/// A prompt body with `{PLACEHOLDER}` slots and the block layout the reply
/// must follow.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub kind: TemplateKind,
    pub body: String,
    pub expected_pros: usize,
    pub expected_cons: usize,
}

fn lower_first(s: &str) -> String {
    s.to_lowercase()
}

impl PromptTemplate {
    /// The objective template; `domain` is the item noun ("Movie",
    /// "business", "game").
    pub fn objective(domain: &str) -> Self {
        let noun = domain.trim();
        let lower = lower_first(noun);
        let mut body = format!(
            "Given a {noun} named {{NAME}} and its characteristics, I need you to provide pros \
             and cons, corresponding evidence and keywords from a customer perspective. {noun} \
             has the following attributes: {{ATTRIBUTES}}. Categories of the {lower} include \
             {{CATEGORIES}}. Reasons, keywords, and evidence should be concise and reasonable. \
             Keywords should appear positive or negative. Evidence should refer to the \
             information given. Strictly follow the reply format, fill [], do not say anything \
             else:\n"
        );
        for label in ["Pros", "Cons"] {
            let l = label.to_lowercase();
            for k in 1..=3 {
                let _ = write!(
                    body,
                    "{label} {k}: [{l} {k}]\nEvidence: [evidence of {l} {k}]\nKeywords: [keywords of {l} {k}]\n"
                );
            }
        }
        Self {
            kind: TemplateKind::Objective,
            body,
            expected_pros: 3,
            expected_cons: 3,
        }
    }

    /// The subjective template for one review; `Pro` asks for reasons behind
    /// a positive rating, `Con` for a negative one.
    pub fn subjective(domain: &str, polarity: Polarity) -> Self {
        let lower = lower_first(domain.trim());
        let label = polarity.block_label();
        let l = label.to_lowercase();
        let mut body = format!(
            "A customer rates {{RATING}} to the {lower} with comments: {{COMMENTS}} The \
             information of this {lower} is: name: {{NAME}}, attributes: {{ATTRIBUTES}}, \
             categories: {{CATEGORIES}}.\nI need you to provide {label}, corresponding evidence \
             and keywords of the rating based on given information. Evidence should refer to the \
             information given. Strictly follow the reply format, fill [], do not say anything \
             else:\n"
        );
        for k in 1..=3 {
            let _ = write!(
                body,
                "{label} {k}: [{l} {k}]\nKeywords: [keywords of {l} {k}]\nEvidence: [evidence of {l} {k}]\n"
            );
        }
        let (kind, pros, cons) = match polarity {
            Polarity::Pro => (TemplateKind::SubjectivePositive, 3, 0),
            Polarity::Con => (TemplateKind::SubjectiveNegative, 0, 3),
        };
        Self {
            kind,
            body,
            expected_pros: pros,
            expected_cons: cons,
        }
    }

    /// Placeholders referenced by the body, in order of first appearance.
    pub fn placeholders(&self) -> Result<Vec<Placeholder>, TemplateError> {
        let mut out = Vec::new();
        for token in scan_tokens(&self.body)? {
            let p = Placeholder::parse(token)
                .ok_or_else(|| TemplateError::UnknownPlaceholder(token.to_string()))?;
            if !out.contains(&p) {
                out.push(p);
            }
        }
        Ok(out)
    }

    /// Substitute every placeholder in a single pass; substituted values are
    /// never re-scanned.
    pub fn render(&self, lookup: impl Fn(Placeholder) -> Option<String>) -> Result<String, TemplateError> {
        let mut out = String::with_capacity(self.body.len() + 256);
        let mut rest = self.body.as_str();
        while let Some(start) = rest.find('{') {
            out.push_str(&rest[..start]);
            let after = &rest[start + 1..];
            let end = after.find('}').ok_or(TemplateError::Unterminated)?;
            let token = &after[..end];
            let p = Placeholder::parse(token)
                .ok_or_else(|| TemplateError::UnknownPlaceholder(token.to_string()))?;
            let value = lookup(p).ok_or_else(|| TemplateError::MissingValue(token.to_string()))?;
            out.push_str(&value);
            rest = &after[end + 1..];
        }
        out.push_str(rest);
        Ok(out)
    }
}

fn scan_tokens(body: &str) -> Result<Vec<&str>, TemplateError> {
    let mut tokens = Vec::new();
    let mut rest = body;
    while let Some(start) = rest.find('{') {
        let after = &rest[start + 1..];
        let end = after.find('}').ok_or(TemplateError::Unterminated)?;
        tokens.push(&after[..end]);
        rest = &after[end + 1..];
    }
    Ok(tokens)
}

fn attributes_text(item: &RawItem) -> String {
    let attrs: Vec<&str> = item
        .attributes
        .iter()
        .map(|a| a.trim())
        .filter(|a| !a.is_empty())
        .collect();
    if attrs.is_empty() {
        EMPTY_ATTRIBUTES.to_string()
    } else {
        attrs.join(", ")
    }
}

pub fn render_objective_prompt(
    template: &PromptTemplate,
    item: &RawItem,
    category: &str,
) -> Result<String, TemplateError> {
    template.render(|p| match p {
        Placeholder::Name => Some(item.name.trim().to_string()),
        Placeholder::Attributes => Some(attributes_text(item)),
        Placeholder::Categories => Some(category.to_string()),
        Placeholder::Rating | Placeholder::Comments => None,
    })
}

pub fn render_subjective_prompt(
    template: &PromptTemplate,
    item: &RawItem,
    category: &str,
    review: &RawReview,
) -> Result<String, TemplateError> {
    template.render(|p| match p {
        Placeholder::Name => Some(item.name.trim().to_string()),
        Placeholder::Attributes => Some(attributes_text(item)),
        Placeholder::Categories => Some(category.to_string()),
        Placeholder::Rating => Some(format!("{}", review.rating)),
        Placeholder::Comments => {
            let c = review.comment.trim();
            Some(if c.is_empty() { EMPTY_COMMENT.to_string() } else { c.to_string() })
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ihop() -> RawItem {
        RawItem {
            item_id: "b1".into(),
            name: "IHOP".into(),
            attributes: vec!["pancakes".into()],
            raw_categories: vec!["Restaurants".into()],
        }
    }

    fn rev(comment: &str, rating: f64) -> RawReview {
        RawReview {
            user_id: "u".into(),
            item_id: "b1".into(),
            rating,
            comment: comment.into(),
            timestamp: None,
        }
    }

    #[test]
    fn objective_prompt_names_the_item() {
        let t = PromptTemplate::objective("Movie");
        let p = render_objective_prompt(&t, &ihop(), "Restaurants").unwrap();
        assert!(p.contains("a Movie named IHOP"));
        assert!(p.contains("attributes: pancakes."));
        assert!(p.contains("Categories of the movie include Restaurants."));
        assert!(p.contains("Pros 3: [pros 3]\nEvidence: [evidence of pros 3]\nKeywords: [keywords of pros 3]"));
        assert!(p.contains("Cons 1: [cons 1]"));

        let b = render_objective_prompt(&PromptTemplate::objective("business"), &ihop(), "Restaurants").unwrap();
        assert!(b.contains("a business named IHOP"));
    }

    #[test]
    fn empty_attributes_use_degenerate_text() {
        let mut item = ihop();
        item.attributes.clear();
        let p = render_objective_prompt(&PromptTemplate::objective("Movie"), &item, "X").unwrap();
        assert!(p.contains("attributes: none provided."));
    }

    #[test]
    fn rendered_prompts_have_no_placeholders_left() {
        let review = rev("great", 4.0);
        let prompts = [
            render_objective_prompt(&PromptTemplate::objective("Movie"), &ihop(), "R").unwrap(),
            render_subjective_prompt(&PromptTemplate::subjective("Movie", Polarity::Pro), &ihop(), "R", &review)
                .unwrap(),
            render_subjective_prompt(&PromptTemplate::subjective("Movie", Polarity::Con), &ihop(), "R", &review)
                .unwrap(),
        ];
        for p in prompts {
            assert!(!p.contains('{') && !p.contains('}'), "{p}");
            for ph in Placeholder::ALL {
                assert!(!p.contains(ph.token()), "leftover {}", ph.token());
            }
        }
    }

    #[test]
    fn subjective_variants_request_single_polarity() {
        let review = rev("", 4.5);
        let pos = render_subjective_prompt(&PromptTemplate::subjective("Movie", Polarity::Pro), &ihop(), "R", &review)
            .unwrap();
        assert!(pos.starts_with("A customer rates 4.5 to the movie with comments: (no comment) "));
        assert!(pos.contains("Pros 1:") && pos.contains("Pros 2:") && pos.contains("Pros 3:"));
        assert!(!pos.contains("Cons"));
        let neg = render_subjective_prompt(&PromptTemplate::subjective("Movie", Polarity::Con), &ihop(), "R", &review)
            .unwrap();
        assert!(neg.contains("Cons 1: [cons 1]\nKeywords: [keywords of cons 1]"));
        assert!(!neg.contains("Pros"));
    }

    #[test]
    fn template_placeholders_are_declared() {
        assert_eq!(
            PromptTemplate::objective("Movie").placeholders().unwrap(),
            vec![Placeholder::Name, Placeholder::Attributes, Placeholder::Categories]
        );
        assert_eq!(PromptTemplate::subjective("Movie", Polarity::Con).placeholders().unwrap().len(), 5);
        let t = PromptTemplate::objective("Movie");
        assert_eq!(t.expected_pros + t.expected_cons, 6);

        let bad = PromptTemplate {
            kind: TemplateKind::Objective,
            body: "hello {WHO}".into(),
            expected_pros: 0,
            expected_cons: 0,
        };
        assert_eq!(bad.placeholders(), Err(TemplateError::UnknownPlaceholder("WHO".into())));
    }

    #[test]
    fn missing_value_is_a_template_error() {
        let t = PromptTemplate::subjective("Movie", Polarity::Pro);
        let err = render_objective_prompt(&t, &ihop(), "R").unwrap_err();
        assert_eq!(err, TemplateError::MissingValue("RATING".into()));
    }

    #[test]
    fn substituted_values_are_not_rescanned() {
        let mut item = ihop();
        item.name = "{RATING}".into();
        let p = render_objective_prompt(&PromptTemplate::objective("Movie"), &item, "R").unwrap();
        assert!(p.contains("named {RATING} and"));
    }
}
