//! `{name}` placeholder templates with value whitelisting.
//!
//! `{{` and `}}` produce literal braces. Every substituted value must match
//! [`SAFE_VALUE`] unless it was inserted as raw, which only configuration
//! loaded from the hub config file may do.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::OnceLock;

use regex::Regex;
use thiserror::Error;

/// Whitelist applied to every non-raw template value.
pub const SAFE_VALUE: &str = r"^[A-Za-z0-9._:=/@-]+$";

fn safe_value() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(SAFE_VALUE).expect("valid regex"))
}

fn placeholder_name() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^[A-Za-z_][A-Za-z0-9_]*$").expect("valid regex"))
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TemplateError {
    #[error("template variable {0:?} is not set")]
    MissingVariable(String),
    #[error("value for {name:?} rejected by whitelist")]
    InjectionRejected { name: String },
    #[error("malformed placeholder or brace escape at byte {0}")]
    UnknownPlaceholderEscape(usize),
}

pub fn is_safe_value(value: &str) -> bool {
    safe_value().is_match(value)
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct TemplateValue {
    value: String,
    raw: bool,
}

/// Values available to a render.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TemplateVars {
    values: BTreeMap<String, TemplateValue>,
}

impl TemplateVars {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert a value subject to the whitelist at render time.
    pub fn set(&mut self, name: impl Into<String>, value: impl Into<String>) -> &mut Self {
        self.values.insert(
            name.into(),
            TemplateValue {
                value: value.into(),
                raw: false,
            },
        );
        self
    }

    /// Insert an administrator-supplied value exempt from the whitelist.
    pub fn set_raw(&mut self, name: impl Into<String>, value: impl Into<String>) -> &mut Self {
        self.values.insert(
            name.into(),
            TemplateValue {
                value: value.into(),
                raw: true,
            },
        );
        self
    }

    pub fn get(&self, name: &str) -> Option<&str> {
        self.values.get(name).map(|v| v.value.as_str())
    }

    pub fn extend(&mut self, other: &TemplateVars) {
        for (k, v) in &other.values {
            self.values.insert(k.clone(), v.clone());
        }
    }
}

impl<K: Into<String>, V: Into<String>> FromIterator<(K, V)> for TemplateVars {
    fn from_iter<I: IntoIterator<Item = (K, V)>>(iter: I) -> Self {
        let mut vars = TemplateVars::new();
        for (k, v) in iter {
            vars.set(k, v);
        }
        vars
    }
}

#[derive(Debug, PartialEq, Eq)]
enum Piece<'a> {
    Literal(&'a str),
    Brace(char),
    Placeholder(&'a str),
}

fn parse(template: &str) -> Result<Vec<Piece<'_>>, TemplateError> {
    let bytes = template.as_bytes();
    let mut pieces = Vec::new();
    let mut lit_start = 0;
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'{' | b'}' => {
                if lit_start < i {
                    pieces.push(Piece::Literal(&template[lit_start..i]));
                }
                let c = bytes[i];
                if bytes.get(i + 1) == Some(&c) {
                    pieces.push(Piece::Brace(c as char));
                    i += 2;
                } else if c == b'{' {
                    let close = template[i + 1..]
                        .find('}')
                        .ok_or(TemplateError::UnknownPlaceholderEscape(i))?;
                    let name = &template[i + 1..i + 1 + close];
                    if !placeholder_name().is_match(name) {
                        return Err(TemplateError::UnknownPlaceholderEscape(i));
                    }
                    pieces.push(Piece::Placeholder(name));
                    i += close + 2;
                } else {
                    return Err(TemplateError::UnknownPlaceholderEscape(i));
                }
                lit_start = i;
            }
            _ => i += 1,
        }
    }
    if lit_start < bytes.len() {
        pieces.push(Piece::Literal(&template[lit_start..]));
    }
    Ok(pieces)
}

/// Names of all placeholders used by `template`.
pub fn placeholders(template: &str) -> Result<BTreeSet<String>, TemplateError> {
    Ok(parse(template)?
        .into_iter()
        .filter_map(|p| match p {
            Piece::Placeholder(name) => Some(name.to_string()),
            _ => None,
        })
        .collect())
}

/// Substitute every placeholder of `template` from `vars`.
pub fn render_template(template: &str, vars: &TemplateVars) -> Result<String, TemplateError> {
    let pieces = parse(template)?;
    let mut out = String::with_capacity(template.len());
    for piece in pieces {
        match piece {
            Piece::Literal(s) => out.push_str(s),
            Piece::Brace(c) => out.push(c),
            Piece::Placeholder(name) => {
                let v = vars
                    .values
                    .get(name)
                    .ok_or_else(|| TemplateError::MissingVariable(name.to_string()))?;
                if !v.raw && !is_safe_value(&v.value) {
                    return Err(TemplateError::InjectionRejected {
                        name: name.to_string(),
                    });
                }
                out.push_str(&v.value);
            }
        }
    }
    Ok(out)
}
