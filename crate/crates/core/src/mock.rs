//! Seeded, deterministic stand-ins for the inference services.
//!
//! These implement the client traits in-process so pipelines can run
//! offline (endpoint `base_url = "mock://<seed>"`) and tests need no
//! network. They are crude lexical models, not approximations of any real
//! generator, embedder or reranker.

use serde_json::json;

use crate::clients::{ChatClient, ChatMessage, ClientError, EmbeddingClient, EmbeddingVector, RerankClient};

/// FNV-1a over the seed and each part, with a separator between parts.
pub fn stable_hash(seed: u64, parts: &[&str]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for part in parts {
        for b in part.bytes().chain(std::iter::once(0xff)) {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    // Final avalanche so low bits are usable.
    h ^= h >> 33;
    h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
    h ^= h >> 33;
    h
}

/// Lowercased alphanumeric tokens with their starting character offsets.
pub fn tokens_with_offsets(text: &str) -> Vec<(usize, String)> {
    let mut out = Vec::new();
    let mut current = String::new();
    let mut start = 0;
    for (i, c) in text.chars().enumerate() {
        if c.is_alphanumeric() {
            if current.is_empty() {
                start = i;
            }
            current.extend(c.to_lowercase());
        } else if !current.is_empty() {
            out.push((start, std::mem::take(&mut current)));
        }
    }
    if !current.is_empty() {
        out.push((start, current));
    }
    out
}

pub fn tokens(text: &str) -> Vec<String> {
    tokens_with_offsets(text).into_iter().map(|(_, t)| t).collect()
}

fn between<'a>(text: &'a str, open: &str, close: &str) -> Option<&'a str> {
    let start = text.find(open)? + open.len();
    let end = start + text[start..].find(close)?;
    Some(&text[start..end])
}

/// Chat model that answers the three prompt families used by the pipeline.
#[derive(Clone, Debug)]
pub struct MockChat {
    seed: u64,
}

impl MockChat {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    fn select_config(&self, prompt: &str) -> String {
        let passage = between(prompt, "<passage> ", " </passage>").unwrap_or("");
        let personas = between(prompt, "Character Candidates: ", "\nDifficulties:").unwrap_or("");
        let lines: Vec<&str> = personas.lines().filter(|l| !l.trim().is_empty()).collect();
        let h = stable_hash(self.seed, &["config", passage]);
        let character = if lines.is_empty() {
            "a curious reader".to_string()
        } else {
            lines[(h % lines.len() as u64) as usize].trim().to_string()
        };
        let difficulty = ["high_school", "university", "phd"][((h >> 8) % 3) as usize];
        let length = ["short", "medium", "long"][((h >> 16) % 3) as usize];
        json!({"Character": character, "Difficulty": difficulty, "Query_Length": length}).to_string()
    }

    fn generate(&self, prompt: &str) -> String {
        let segment = between(prompt, "\"> ", " </target_segment>").unwrap_or("");
        let words: Vec<&str> = segment.split_whitespace().collect();
        if words.is_empty() {
            return "I cannot produce a query for an empty segment.".into();
        }
        let h = stable_hash(self.seed, &["generate", segment]);
        let window = 6.min(words.len());
        let start = (h % (words.len() - window + 1) as u64) as usize;
        let query_words = &words[start..start + window];
        let answer_words = &words[start..(start + 3).min(words.len())];
        let query = format!("what does the text say about {}", query_words.join(" "));
        json!({
            "query": query,
            "answer": answer_words.join(" "),
            "reasoning": "The phrase only occurs in the target segment.",
        })
        .to_string()
    }

    fn audit(&self, prompt: &str) -> String {
        let question = between(prompt, "Question: ", "\n\nText:\n").unwrap_or("");
        let segment = between(prompt, "\n\nText:\n", "\n\nDoes the text above").unwrap_or("");
        let seg_tokens: std::collections::HashSet<String> = tokens(segment).into_iter().collect();
        let q = content_tokens(question);
        let hits = q.iter().filter(|t| seg_tokens.contains(*t)).count();
        let yes = !q.is_empty() && hits * 2 >= q.len();
        json!({
            "reasoning": format!("{hits} of {} question terms appear in the text.", q.len()),
            "answer": if yes { "yes" } else { "no" },
        })
        .to_string()
    }
}

const STOPWORDS: &[&str] = &[
    "a", "an", "and", "the", "of", "to", "in", "is", "it", "what", "does", "text", "say", "about",
    "for", "on", "with", "as", "by", "at", "or",
];

fn content_tokens(text: &str) -> Vec<String> {
    tokens(text)
        .into_iter()
        .filter(|t| !STOPWORDS.contains(&t.as_str()))
        .collect()
}

impl ChatClient for MockChat {
    fn chat(&self, messages: &[ChatMessage]) -> Result<String, ClientError> {
        let prompt = messages
            .iter()
            .rev()
            .find(|m| m.role == "user")
            .map(|m| m.content.as_str())
            .ok_or_else(|| ClientError::InvalidRequest("no user message".into()))?;
        if prompt.contains("<target_segment position=") {
            Ok(self.generate(prompt))
        } else if prompt.contains("Character Candidates:") {
            Ok(self.select_config(prompt))
        } else if prompt.contains("Does the text above contain the answer") {
            Ok(self.audit(prompt))
        } else {
            Ok(format!("mock reply {:016x}", stable_hash(self.seed, &[prompt])))
        }
    }
}

/// Token-overlap reranker. The score is the fraction of query content terms
/// present in the passage, shrunk by a per-reranker factor in [0.85, 1].
#[derive(Clone, Debug)]
pub struct MockReranker {
    id: String,
    seed: u64,
}

impl MockReranker {
    pub fn new(id: impl Into<String>, seed: u64) -> Self {
        Self { id: id.into(), seed }
    }

    pub fn score(&self, query: &str, passage: &str) -> f64 {
        let q = content_tokens(query);
        if q.is_empty() {
            return 0.0;
        }
        let p: std::collections::HashSet<String> = tokens(passage).into_iter().collect();
        let overlap = q.iter().filter(|t| p.contains(*t)).count() as f64 / q.len() as f64;
        let jitter = (stable_hash(self.seed, &[&self.id, query, passage]) % 1000) as f64 / 1000.0;
        (overlap * (0.85 + 0.15 * jitter)).clamp(0.0, 1.0)
    }
}

impl RerankClient for MockReranker {
    fn id(&self) -> &str {
        &self.id
    }

    fn rerank(&self, query: &str, passages: &[String]) -> Result<Vec<f64>, ClientError> {
        if passages.is_empty() {
            return Err(ClientError::InvalidRequest("no passages to rerank".into()));
        }
        Ok(passages.iter().map(|p| self.score(query, p)).collect())
    }
}

/// Hashed bag-of-words embedder, optionally weighting tokens by where they
/// sit in the text.
#[derive(Clone, Debug)]
pub struct MockEmbedder {
    seed: u64,
    dim: usize,
    bias: Option<PositionBias>,
}

/// Extra weight for tokens whose relative offset is near `center`:
/// `1 + strength * max(0, 1 - |r - center| / width)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PositionBias {
    pub center: f64,
    pub width: f64,
    pub strength: f64,
}

impl MockEmbedder {
    pub fn new(seed: u64, dim: usize) -> Self {
        Self {
            seed,
            dim: dim.max(2),
            bias: None,
        }
    }

    pub fn with_position_bias(mut self, bias: PositionBias) -> Self {
        self.bias = Some(bias);
        self
    }

    pub fn embed_one(&self, text: &str) -> EmbeddingVector {
        let mut v = vec![0.0; self.dim];
        // Constant component keeps every vector nonzero.
        v[0] = 1e-3;
        let total = text.chars().count().max(1) as f64;
        for (offset, token) in tokens_with_offsets(text) {
            let h = stable_hash(self.seed, &["embed", &token]);
            let idx = (h % self.dim as u64) as usize;
            let sign = if (h >> 40) & 1 == 0 { 1.0 } else { -1.0 };
            let weight = match self.bias {
                Some(b) => {
                    let r = offset as f64 / total;
                    1.0 + b.strength * (1.0 - (r - b.center).abs() / b.width).max(0.0)
                }
                None => 1.0,
            };
            v[idx] += sign * weight;
        }
        EmbeddingVector::new(v).expect("finite by construction")
    }
}

impl EmbeddingClient for MockEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ClientError> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_is_stable_and_separated() {
        assert_eq!(stable_hash(1, &["ab", "c"]), stable_hash(1, &["ab", "c"]));
        assert_ne!(stable_hash(1, &["ab", "c"]), stable_hash(1, &["a", "bc"]));
        assert_ne!(stable_hash(1, &["x"]), stable_hash(2, &["x"]));
    }

    #[test]
    fn tokenizer_offsets() {
        let t = tokens_with_offsets("Hi, Élan 42x");
        assert_eq!(
            t,
            vec![(0, "hi".into()), (4, "élan".into()), (9, "42x".into())]
        );
    }

    #[test]
    fn reranker_prefers_overlap() {
        let r = MockReranker::new("r", 3);
        let s = r
            .rerank(
                "what does the text say about purple elephants",
                &["purple elephants dance".into(), "green frogs".into()],
            )
            .unwrap();
        assert!(s[0] > s[1]);
        assert!(s.iter().all(|x| (0.0..=1.0).contains(x)));
    }

    #[test]
    fn embedder_is_deterministic() {
        let e = MockEmbedder::new(9, 16);
        assert_eq!(e.embed_one("alpha beta"), e.embed_one("alpha beta"));
        assert_eq!(e.embed_one("alpha beta"), e.embed_one("beta alpha"));
    }
}
