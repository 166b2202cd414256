//! Prompt templates: literal text with `{expr}` placeholders.
//! `{{` and `}}` produce literal braces.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::expr::{EvalError, Expr, Scope, StaticIssue, StaticScope, SyntaxError, Value};
use crate::model::Prompt;
use crate::types::{canonical_string, FieldValue, Fields};

#[derive(Debug, Clone, PartialEq)]
pub enum TemplatePart {
    Literal(String),
    Placeholder(Expr),
}

#[derive(Debug, Clone)]
pub struct PromptTemplate {
    source: String,
    parts: Vec<TemplatePart>,
}

impl PartialEq for PromptTemplate {
    fn eq(&self, other: &Self) -> bool {
        self.parts == other.parts
    }
}

impl fmt::Display for PromptTemplate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.source)
    }
}

impl PromptTemplate {
    pub fn parse(source: &str) -> Result<Self, SyntaxError> {
        let mut parts = Vec::new();
        let mut lit = String::new();
        let mut chars = source.char_indices().peekable();
        while let Some((i, c)) = chars.next() {
            match c {
                '{' if matches!(chars.peek(), Some((_, '{'))) => {
                    chars.next();
                    lit.push('{');
                }
                '}' if matches!(chars.peek(), Some((_, '}'))) => {
                    chars.next();
                    lit.push('}');
                }
                '}' => return Err(SyntaxError { offset: i, message: "unmatched '}' (use '}}' for a literal brace)".into() }),
                '{' => {
                    let start = i + 1;
                    let mut quote: Option<char> = None;
                    let mut end = None;
                    while let Some((j, d)) = chars.next() {
                        match (quote, d) {
                            (Some(_), '\\') => {
                                chars.next();
                            }
                            (Some(q), d) if d == q => quote = None,
                            (None, '"') | (None, '\'') => quote = Some(d),
                            (None, '}') => {
                                end = Some(j);
                                break;
                            }
                            _ => {}
                        }
                    }
                    let end = end.ok_or(SyntaxError { offset: i, message: "unterminated placeholder".into() })?;
                    let expr = Expr::parse(&source[start..end])
                        .map_err(|e| SyntaxError { offset: start + e.offset, message: e.message })?;
                    if !lit.is_empty() {
                        parts.push(TemplatePart::Literal(std::mem::take(&mut lit)));
                    }
                    parts.push(TemplatePart::Placeholder(expr));
                }
                c => lit.push(c),
            }
        }
        if !lit.is_empty() {
            parts.push(TemplatePart::Literal(lit));
        }
        Ok(PromptTemplate { source: source.to_string(), parts })
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn parts(&self) -> &[TemplatePart] {
        &self.parts
    }

    pub fn placeholders(&self) -> impl Iterator<Item = &Expr> {
        self.parts.iter().filter_map(|p| match p {
            TemplatePart::Placeholder(e) => Some(e),
            _ => None,
        })
    }

    pub fn check(&self, scope: &StaticScope, issues: &mut Vec<StaticIssue>) {
        for e in self.placeholders() {
            e.check(scope, issues);
        }
    }

    /// Renders into a multi-modal prompt. Media values become media parts;
    /// list values expand one element per line.
    pub fn render(&self, scope: &Scope<'_>) -> Result<Prompt, EvalError> {
        let mut prompt = Prompt::default();
        for part in &self.parts {
            match part {
                TemplatePart::Literal(s) => prompt.push_text(s),
                TemplatePart::Placeholder(e) => {
                    let v = e.eval(scope)?;
                    push_value(&mut prompt, &v, true);
                }
            }
        }
        if prompt.parts.is_empty() {
            prompt.parts.push(crate::model::PromptPart::Text { text: String::new() });
        }
        Ok(prompt)
    }

    /// Text-only rendering, media shown by locator. Used for log lines.
    pub fn render_text(&self, scope: &Scope<'_>) -> Result<String, EvalError> {
        let mut out = String::new();
        for part in &self.parts {
            match part {
                TemplatePart::Literal(s) => out.push_str(s),
                TemplatePart::Placeholder(e) => {
                    let mut p = Prompt::default();
                    push_value(&mut p, &e.eval(scope)?, false);
                    out.push_str(&p.rendered_text());
                }
            }
        }
        Ok(out)
    }
}

fn fields_line(f: &Fields) -> String {
    f.iter().map(|(k, v)| format!("{k}={}", canonical_string(v))).collect::<Vec<_>>().join("; ")
}

fn push_value(prompt: &mut Prompt, v: &Value<'_>, media_parts: bool) {
    match v {
        Value::Scalar(FieldValue::Media(m)) if media_parts => prompt.push_media(m),
        Value::Scalar(s) => prompt.push_text(&canonical_string(s)),
        Value::Item(f) => prompt.push_text(&fields_line(f)),
        Value::List(xs) => {
            for (i, x) in xs.iter().enumerate() {
                if i > 0 {
                    prompt.push_text("\n");
                }
                push_value(prompt, x, media_parts);
            }
        }
        Value::Items(xs) => {
            let lines: Vec<_> = xs.iter().map(|f| fields_line(f)).collect();
            prompt.push_text(&lines.join("\n"));
        }
    }
}

impl Serialize for PromptTemplate {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.source)
    }
}

impl<'de> Deserialize<'de> for PromptTemplate {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        PromptTemplate::parse(&s).map_err(serde::de::Error::custom)
    }
}
