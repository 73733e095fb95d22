//! Prompt templates with `{PLACEHOLDER}` substitution.
//!
//! A template file is a sequence of `[SYSTEM]` / `[USER]` sections; each
//! section becomes one chat message with surrounding blank lines trimmed.

use std::collections::HashMap;
use std::path::Path;

use thiserror::Error;

use crate::clients::ChatMessage;

pub const STAGE1_CONFIG: &str = include_str!("../templates/stage1_config.txt");
pub const STAGE2_GENERATE: &str = include_str!("../templates/stage2_generate.txt");
pub const SEGMENT_AUDIT: &str = include_str!("../templates/segment_audit.txt");

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("template has no [SYSTEM] or [USER] section")]
    NoSections,
    #[error("text before the first section marker: {0:?}")]
    StrayText(String),
    #[error("cannot read template {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptTemplate {
    sections: Vec<(String, String)>,
}

impl PromptTemplate {
    pub fn parse(text: &str) -> Result<Self, PromptError> {
        let mut sections: Vec<(String, String)> = Vec::new();
        let mut stray = String::new();
        for line in text.split('\n') {
            let role = match line.trim_end_matches('\r') {
                "[SYSTEM]" => Some("system"),
                "[USER]" => Some("user"),
                _ => None,
            };
            match (role, sections.last_mut()) {
                (Some(role), _) => sections.push((role.to_string(), String::new())),
                (None, Some((_, body))) => {
                    body.push_str(line);
                    body.push('\n');
                }
                (None, None) => stray.push_str(line),
            }
        }
        if !stray.trim().is_empty() {
            return Err(PromptError::StrayText(stray));
        }
        if sections.is_empty() {
            return Err(PromptError::NoSections);
        }
        for (_, body) in &mut sections {
            *body = body.trim_matches(|c| c == '\n' || c == '\r').to_string();
        }
        Ok(Self { sections })
    }

    pub fn from_file(path: &Path) -> Result<Self, PromptError> {
        let text = std::fs::read_to_string(path).map_err(|source| PromptError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn render(&self, vars: &[(&str, &str)]) -> Vec<ChatMessage> {
        let map: HashMap<&str, &str> = vars.iter().copied().collect();
        self.sections
            .iter()
            .map(|(role, body)| ChatMessage {
                role: role.clone(),
                content: substitute(body, &map),
            })
            .collect()
    }
}

/// Single-pass substitution: `{NAME}` is replaced when `NAME` is a known
/// variable; every other brace sequence is copied verbatim. Substituted
/// values are never rescanned.
pub fn substitute(template: &str, vars: &HashMap<&str, &str>) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let name_len = after
            .find(|c: char| !(c.is_ascii_alphanumeric() || c == '_'))
            .unwrap_or(after.len());
        let name = &after[..name_len];
        match (after[name_len..].starts_with('}'), vars.get(name)) {
            (true, Some(value)) if !name.is_empty() => {
                out.push_str(value);
                rest = &after[name_len + 1..];
            }
            _ => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

/// The three templates used by the pipeline.
#[derive(Clone, Debug)]
pub struct PromptSet {
    pub stage1: PromptTemplate,
    pub stage2: PromptTemplate,
    pub audit: PromptTemplate,
}

impl Default for PromptSet {
    fn default() -> Self {
        Self {
            stage1: PromptTemplate::parse(STAGE1_CONFIG).expect("bundled template parses"),
            stage2: PromptTemplate::parse(STAGE2_GENERATE).expect("bundled template parses"),
            audit: PromptTemplate::parse(SEGMENT_AUDIT).expect("bundled template parses"),
        }
    }
}

impl PromptSet {
    /// Bundled templates, replaced by `stage1_config.txt`,
    /// `stage2_generate.txt` or `segment_audit.txt` found in `dir`.
    pub fn with_overrides(dir: &Path) -> Result<Self, PromptError> {
        let mut set = Self::default();
        for (name, slot) in [
            ("stage1_config.txt", &mut set.stage1),
            ("stage2_generate.txt", &mut set.stage2),
            ("segment_audit.txt", &mut set.audit),
        ] {
            let path = dir.join(name);
            if path.exists() {
                *slot = PromptTemplate::from_file(&path)?;
            }
        }
        Ok(set)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn substitution_is_single_pass() {
        let vars: HashMap<&str, &str> = [("A", "{B}"), ("B", "x")].into_iter().collect();
        assert_eq!(substitute("{A}-{B}", &vars), "{B}-x");
    }

    #[test]
    fn unknown_and_json_braces_survive() {
        let vars: HashMap<&str, &str> = [("Q", "why")].into_iter().collect();
        assert_eq!(
            substitute(r#"{Q} {"answer": "yes|no"} {UNKNOWN} {"#, &vars),
            r#"why {"answer": "yes|no"} {UNKNOWN} {"#
        );
    }

    #[test]
    fn sections_become_messages() {
        let t = PromptTemplate::parse("[SYSTEM]\nsys\n\n[USER]\nhello {X}\n").unwrap();
        let msgs = t.render(&[("X", "world")]);
        assert_eq!(msgs, vec![ChatMessage::system("sys"), ChatMessage::user("hello world")]);
        assert!(PromptTemplate::parse("no markers").is_err());
    }

    #[test]
    fn bundled_templates_parse() {
        let set = PromptSet::default();
        assert_eq!(set.stage1.sections.len(), 1);
        assert_eq!(set.audit.sections.len(), 2);
    }
}
