//! Two-stage persona-conditioned query generation.
//!
//! Stage 1 picks one [`GenerationConfig`] per document from a set of
//! retrieved personas; stage 2 asks for one query per target position
//! (begin, middle, end) under that shared configuration.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::analyze::cosine;
use crate::clients::{sha256_hex, ChatClient, ClientError, EmbeddingClient, EmbeddingVector};
use crate::corpus::{thirds, CorpusError, Document, LengthBin, Position};
use crate::jsonl::{self, JsonlError};
use crate::prompts::PromptSet;

/// Why a model reply could not be turned into a record.
#[derive(Debug, Error, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ParseFailure {
    #[error("reply contains no JSON object")]
    NoJson,
    #[error("reply JSON is invalid: {message}")]
    InvalidJson { message: String },
    #[error("missing or non-string field {field:?}")]
    MissingField { field: String },
    #[error("field {field:?} has unsupported value {value:?}")]
    InvalidValue { field: String, value: String },
}

#[derive(Debug, Error)]
pub enum QueryGenError {
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("stage-1 reply rejected: {0}")]
    Parse(ParseFailure),
    #[error("persona pool: {0}")]
    Pool(String),
    #[error(transparent)]
    Io(#[from] JsonlError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    HighSchool,
    University,
    Phd,
}

impl Difficulty {
    pub fn as_str(self) -> &'static str {
        match self {
            Difficulty::HighSchool => "high_school",
            Difficulty::University => "university",
            Difficulty::Phd => "phd",
        }
    }
}

impl FromStr for Difficulty {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        let norm: String = s
            .trim()
            .to_ascii_lowercase()
            .chars()
            .map(|c| if c == ' ' || c == '-' { '_' } else { c })
            .collect();
        match norm.as_str() {
            "high_school" => Ok(Difficulty::HighSchool),
            "university" => Ok(Difficulty::University),
            "phd" => Ok(Difficulty::Phd),
            _ => Err(()),
        }
    }
}

impl fmt::Display for Difficulty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryLength {
    Short,
    Medium,
    Long,
}

impl QueryLength {
    pub fn as_str(self) -> &'static str {
        match self {
            QueryLength::Short => "short",
            QueryLength::Medium => "medium",
            QueryLength::Long => "long",
        }
    }
}

impl FromStr for QueryLength {
    type Err = ();

    /// Accepts the bare option name or the option as listed in the prompt,
    /// e.g. `"short (under 10 words)"`.
    fn from_str(s: &str) -> Result<Self, ()> {
        let lower = s.trim().to_ascii_lowercase();
        let head = lower.split(|c: char| c.is_whitespace() || c == '(').next().unwrap_or("");
        match head {
            "short" => Ok(QueryLength::Short),
            "medium" => Ok(QueryLength::Medium),
            "long" => Ok(QueryLength::Long),
            _ => Err(()),
        }
    }
}

impl fmt::Display for QueryLength {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Persona, difficulty and length shared by all positional queries of one
/// document.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub character: String,
    pub difficulty: Difficulty,
    pub query_length: QueryLength,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryCandidate {
    pub candidate_id: String,
    pub doc_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub length_bin: Option<LengthBin>,
    pub target_position: Position,
    pub query: String,
    pub answer: String,
    #[serde(default)]
    pub reasoning: String,
    pub config: GenerationConfig,
}

impl QueryCandidate {
    pub fn make_id(doc_id: &str, position: Position) -> String {
        format!("{doc_id}#{position}")
    }
}

/// Finds the first balanced top-level `{...}` object in `reply`, honoring
/// JSON string quoting so braces inside strings do not count.
pub fn extract_json_object(reply: &str) -> Option<&str> {
    let start = reply.find('{')?;
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, c) in reply[start..].char_indices() {
        if in_string {
            match (escaped, c) {
                (true, _) => escaped = false,
                (false, '\\') => escaped = true,
                (false, '"') => in_string = false,
                _ => {}
            }
            continue;
        }
        match c {
            '"' => in_string = true,
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(&reply[start..start + i + 1]);
                }
            }
            _ => {}
        }
    }
    None
}

fn reply_object(reply: &str) -> Result<Map<String, Value>, ParseFailure> {
    let raw = extract_json_object(reply).ok_or(ParseFailure::NoJson)?;
    match serde_json::from_str::<Value>(raw) {
        Ok(Value::Object(map)) => Ok(map),
        Ok(_) => Err(ParseFailure::NoJson),
        Err(e) => Err(ParseFailure::InvalidJson {
            message: e.to_string(),
        }),
    }
}

fn string_field<'a>(map: &'a Map<String, Value>, field: &str) -> Result<&'a str, ParseFailure> {
    map.get(field)
        .and_then(Value::as_str)
        .ok_or_else(|| ParseFailure::MissingField {
            field: field.to_string(),
        })
}

fn non_empty<'a>(map: &'a Map<String, Value>, field: &str) -> Result<&'a str, ParseFailure> {
    let value = string_field(map, field)?.trim();
    if value.is_empty() {
        return Err(ParseFailure::InvalidValue {
            field: field.to_string(),
            value: String::new(),
        });
    }
    Ok(value)
}

/// Parses a stage-1 reply. Required keys are `Character`, `Difficulty` and
/// `Query_Length`; extra keys are ignored.
pub fn parse_config_reply(reply: &str) -> Result<GenerationConfig, ParseFailure> {
    let map = reply_object(reply)?;
    let character = non_empty(&map, "Character")?.to_string();
    let difficulty_raw = string_field(&map, "Difficulty")?;
    let difficulty = difficulty_raw.parse().map_err(|_| ParseFailure::InvalidValue {
        field: "Difficulty".into(),
        value: difficulty_raw.into(),
    })?;
    let length_raw = string_field(&map, "Query_Length")?;
    let query_length = length_raw.parse().map_err(|_| ParseFailure::InvalidValue {
        field: "Query_Length".into(),
        value: length_raw.into(),
    })?;
    Ok(GenerationConfig {
        character,
        difficulty,
        query_length,
    })
}

/// Query, answer and reasoning from a stage-2 reply. `reasoning` may be
/// absent; `query` and `answer` must be non-empty strings.
pub fn parse_query_reply(reply: &str) -> Result<(String, String, String), ParseFailure> {
    let map = reply_object(reply)?;
    let query = non_empty(&map, "query")?.to_string();
    let answer = non_empty(&map, "answer")?.to_string();
    let reasoning = map
        .get("reasoning")
        .and_then(Value::as_str)
        .unwrap_or_default()
        .to_string();
    Ok((query, answer, reasoning))
}

/// Persona texts with one embedding each.
#[derive(Clone, Debug)]
pub struct PersonaPool {
    personas: Vec<String>,
    embeddings: Vec<EmbeddingVector>,
}

#[derive(Serialize, Deserialize)]
struct SidecarEntry {
    hash: String,
    vector: EmbeddingVector,
}

impl PersonaPool {
    pub fn new(personas: Vec<String>, embeddings: Vec<EmbeddingVector>) -> Result<Self, QueryGenError> {
        if personas.len() != embeddings.len() {
            return Err(QueryGenError::Pool(format!(
                "{} personas but {} embeddings",
                personas.len(),
                embeddings.len()
            )));
        }
        if let Some(first) = embeddings.first() {
            if embeddings.iter().any(|e| e.dim() != first.dim()) {
                return Err(QueryGenError::Pool("persona embeddings differ in dimension".into()));
            }
        }
        Ok(Self { personas, embeddings })
    }

    /// Reads one persona per non-blank line.
    pub fn read_personas(path: &Path) -> Result<Vec<String>, QueryGenError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| QueryGenError::Pool(format!("{}: {e}", path.display())))?;
        Ok(text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_string)
            .collect())
    }

    /// Embeds `personas`, reusing vectors from the JSONL `sidecar` (keyed by
    /// SHA-256 of the persona text) and rewriting it when anything was new.
    pub fn embed(
        personas: Vec<String>,
        client: &dyn EmbeddingClient,
        sidecar: Option<&Path>,
    ) -> Result<Self, QueryGenError> {
        let mut known: HashMap<String, EmbeddingVector> = HashMap::new();
        if let Some(path) = sidecar.filter(|p| p.exists()) {
            for entry in jsonl::read_jsonl::<SidecarEntry>(path)? {
                known.insert(entry.hash, entry.vector);
            }
        }
        let hashes: Vec<String> = personas.iter().map(|p| sha256_hex(p.as_bytes())).collect();
        let missing: Vec<String> = personas
            .iter()
            .zip(&hashes)
            .filter(|(_, h)| !known.contains_key(*h))
            .map(|(p, _)| p.clone())
            .collect();
        if !missing.is_empty() {
            let vectors = client.embed(&missing)?;
            for (p, v) in missing.iter().zip(vectors) {
                known.insert(sha256_hex(p.as_bytes()), v);
            }
            if let Some(path) = sidecar {
                let entries: Vec<SidecarEntry> = hashes
                    .iter()
                    .map(|h| SidecarEntry {
                        hash: h.clone(),
                        vector: known[h].clone(),
                    })
                    .collect();
                jsonl::write_jsonl(path, &entries)?;
            }
        }
        let embeddings = hashes.iter().map(|h| known[h].clone()).collect();
        Self::new(personas, embeddings)
    }

    pub fn len(&self) -> usize {
        self.personas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.personas.is_empty()
    }

    pub fn personas(&self) -> &[String] {
        &self.personas
    }

    pub fn embeddings(&self) -> &[EmbeddingVector] {
        &self.embeddings
    }
}

/// Indices and cosines of the `k` pool vectors closest to `query`, highest
/// first, ties broken by lower pool index.
pub fn rank_by_cosine(
    query: &EmbeddingVector,
    pool: &[EmbeddingVector],
    k: usize,
) -> Result<Vec<(usize, f64)>, QueryGenError> {
    let mut scored = pool
        .iter()
        .enumerate()
        .map(|(i, v)| {
            cosine(query.values(), v.values())
                .map(|c| (i, c))
                .map_err(|e| QueryGenError::Pool(e.to_string()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(k);
    Ok(scored)
}

/// Text embedded for persona retrieval: the whole document, or its first
/// `truncate_chars` characters.
pub fn retrieval_text(doc: &Document, truncate_chars: Option<usize>) -> String {
    match truncate_chars {
        Some(n) if n < doc.char_len => doc.text.chars().take(n).collect(),
        _ => doc.text.clone(),
    }
}

pub fn retrieve_personas(
    doc: &Document,
    pool: &PersonaPool,
    embed: &dyn EmbeddingClient,
    k: usize,
    truncate_chars: Option<usize>,
) -> Result<Vec<String>, QueryGenError> {
    if k > pool.len() {
        return Err(QueryGenError::Pool(format!(
            "requested {k} personas from a pool of {}",
            pool.len()
        )));
    }
    let vectors = embed.embed(&[retrieval_text(doc, truncate_chars)])?;
    let doc_vec = vectors
        .into_iter()
        .next()
        .ok_or_else(|| QueryGenError::Pool("embedding service returned no vector".into()))?;
    Ok(rank_by_cosine(&doc_vec, pool.embeddings(), k)?
        .into_iter()
        .map(|(i, _)| pool.personas()[i].clone())
        .collect())
}

pub fn select_config(
    doc: &Document,
    personas: &[String],
    chat: &dyn ChatClient,
    prompts: &PromptSet,
) -> Result<GenerationConfig, QueryGenError> {
    if personas.is_empty() {
        return Err(QueryGenError::Pool("no candidate personas".into()));
    }
    let characters = personas.join("\n");
    let messages = prompts
        .stage1
        .render(&[("PASSAGE", &doc.text), ("CHARACTERS", &characters)]);
    let reply = chat.chat(&messages)?;
    parse_config_reply(&reply).map_err(QueryGenError::Parse)
}

/// Candidates produced for one document plus the positions whose replies
/// could not be parsed.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CandidateBatch {
    pub candidates: Vec<QueryCandidate>,
    pub failures: Vec<(Position, ParseFailure)>,
}

pub fn generate_candidates(
    doc: &Document,
    config: &GenerationConfig,
    chat: &dyn ChatClient,
    prompts: &PromptSet,
) -> Result<CandidateBatch, QueryGenError> {
    let segments = thirds(doc)?;
    let mut batch = CandidateBatch::default();
    for position in Position::ALL {
        let messages = prompts.stage2.render(&[
            ("CHARACTER", &config.character),
            ("FULL_DOCUMENT", &doc.text),
            ("POSITION", position.prompt_word()),
            ("TARGET_SEGMENT", segments[position.index()]),
            ("DIFFICULTY", config.difficulty.as_str()),
            ("QUERY_LENGTH", config.query_length.as_str()),
        ]);
        let reply = chat.chat(&messages)?;
        match parse_query_reply(&reply) {
            Ok((query, answer, reasoning)) => batch.candidates.push(QueryCandidate {
                candidate_id: QueryCandidate::make_id(&doc.doc_id, position),
                doc_id: doc.doc_id.clone(),
                length_bin: doc.length_bin,
                target_position: position,
                query,
                answer,
                reasoning,
                config: config.clone(),
            }),
            Err(failure) => batch.failures.push((position, failure)),
        }
    }
    Ok(batch)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationSettings {
    pub persona_k: usize,
    pub truncate_chars: Option<usize>,
    pub workers: usize,
}

impl Default for GenerationSettings {
    fn default() -> Self {
        Self {
            persona_k: 20,
            truncate_chars: None,
            workers: 4,
        }
    }
}

/// Counters shared by concurrent generation workers.
#[derive(Debug, Default)]
pub struct GenerationStats {
    documents: AtomicUsize,
    config_failures: AtomicUsize,
    candidates: AtomicUsize,
    candidate_failures: AtomicUsize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub documents: usize,
    pub excluded_config_parse: usize,
    pub candidates_generated: usize,
    pub candidate_parse_failures: usize,
}

impl GenerationStats {
    pub fn record(&self, outcome: &DocOutcome) {
        self.documents.fetch_add(1, Ordering::Relaxed);
        match &outcome.status {
            DocStatus::Generated => {}
            DocStatus::ConfigParseFailure { .. } => {
                self.config_failures.fetch_add(1, Ordering::Relaxed);
            }
        }
        self.candidates
            .fetch_add(outcome.candidates.len(), Ordering::Relaxed);
        self.candidate_failures
            .fetch_add(outcome.failures.len(), Ordering::Relaxed);
    }

    pub fn report(&self) -> GenerationReport {
        GenerationReport {
            documents: self.documents.load(Ordering::Relaxed),
            excluded_config_parse: self.config_failures.load(Ordering::Relaxed),
            candidates_generated: self.candidates.load(Ordering::Relaxed),
            candidate_parse_failures: self.candidate_failures.load(Ordering::Relaxed),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum DocStatus {
    Generated,
    ConfigParseFailure { failure: ParseFailure },
}

/// Everything the generation stage produced for one document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DocOutcome {
    pub doc_id: String,
    #[serde(flatten)]
    pub status: DocStatus,
    #[serde(skip)]
    pub candidates: Vec<QueryCandidate>,
    #[serde(default)]
    pub failures: Vec<(Position, ParseFailure)>,
    #[serde(default)]
    pub candidate_count: usize,
}

/// Runs both stages for one document. Parse failures are recorded in the
/// outcome; client failures abort with the error.
pub fn generate_for_document(
    doc: &Document,
    pool: &PersonaPool,
    embed: &dyn EmbeddingClient,
    chat: &dyn ChatClient,
    prompts: &PromptSet,
    settings: &GenerationSettings,
) -> Result<DocOutcome, QueryGenError> {
    let k = settings.persona_k.min(pool.len());
    let personas = retrieve_personas(doc, pool, embed, k, settings.truncate_chars)?;
    let config = match select_config(doc, &personas, chat, prompts) {
        Ok(c) => c,
        Err(QueryGenError::Parse(failure)) => {
            return Ok(DocOutcome {
                doc_id: doc.doc_id.clone(),
                status: DocStatus::ConfigParseFailure { failure },
                candidates: Vec::new(),
                failures: Vec::new(),
                candidate_count: 0,
            })
        }
        Err(e) => return Err(e),
    };
    let batch = generate_candidates(doc, &config, chat, prompts)?;
    Ok(DocOutcome {
        doc_id: doc.doc_id.clone(),
        status: DocStatus::Generated,
        candidate_count: batch.candidates.len(),
        candidates: batch.candidates,
        failures: batch.failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clients::ChatMessage;
    use crate::mock::MockEmbedder;

    fn doc() -> Document {
        Document::new("d1", "Alpha beta gamma. Delta epsilon zeta. Eta theta iota.")
    }

    #[test]
    fn extracts_first_balanced_object() {
        assert_eq!(
            extract_json_object(r#"Sure! {"a": "}{", "b": {"c": 1}} trailing {"d":2}"#),
            Some(r#"{"a": "}{", "b": {"c": 1}}"#)
        );
        assert_eq!(extract_json_object(r#"{"a": "\"}"}"#), Some(r#"{"a": "\"}"}"#));
        assert_eq!(extract_json_object("no json"), None);
        assert_eq!(extract_json_object("{unbalanced"), None);
    }

    #[test]
    fn config_reply_parsing() {
        let ok = parse_config_reply(
            r#"Here you go: {"Character": "A nurse", "Difficulty": "university", "Query_Length": "short (under 10 words)", "extra": 1}"#,
        )
        .unwrap();
        assert_eq!(ok.character, "A nurse");
        assert_eq!(ok.difficulty, Difficulty::University);
        assert_eq!(ok.query_length, QueryLength::Short);

        assert_eq!(
            parse_config_reply(r#"{"Character": "x", "Query_Length": "short"}"#),
            Err(ParseFailure::MissingField { field: "Difficulty".into() })
        );
        assert_eq!(
            parse_config_reply(r#"{"Character": "x", "Difficulty": "college", "Query_Length": "short"}"#),
            Err(ParseFailure::InvalidValue { field: "Difficulty".into(), value: "college".into() })
        );
        assert!(matches!(
            parse_config_reply(r#"{"Character": "", "Difficulty": "phd", "Query_Length": "long"}"#),
            Err(ParseFailure::InvalidValue { .. })
        ));
        assert_eq!(parse_config_reply("nope"), Err(ParseFailure::NoJson));
        assert_eq!(
            "High School".parse::<Difficulty>(),
            Ok(Difficulty::HighSchool)
        );
    }

    #[test]
    fn query_reply_parsing() {
        let (q, a, r) = parse_query_reply(r#"{"query": "q?", "answer": "a", "reasoning": "r"}"#).unwrap();
        assert_eq!((q.as_str(), a.as_str(), r.as_str()), ("q?", "a", "r"));
        let (_, _, r) = parse_query_reply(r#"{"query": "q?", "answer": "a"}"#).unwrap();
        assert!(r.is_empty());
        assert!(parse_query_reply(r#"{"query": "  ", "answer": "a"}"#).is_err());
    }

    #[test]
    fn single_persona_pool() {
        let e = MockEmbedder::new(1, 8);
        let pool = PersonaPool::embed(vec!["a chemist".into()], &e, None).unwrap();
        let got = retrieve_personas(&doc(), &pool, &e, 1, None).unwrap();
        assert_eq!(got, vec!["a chemist".to_string()]);
        assert!(retrieve_personas(&doc(), &pool, &e, 2, None).is_err());
    }

    #[test]
    fn orthogonal_personas_rank_exact_match_first() {
        let basis = |i: usize| {
            let mut v = vec![0.0; 5];
            v[i] = 1.0;
            EmbeddingVector::new(v).unwrap()
        };
        let pool: Vec<EmbeddingVector> = (0..5).map(basis).collect();
        let ranked = rank_by_cosine(&basis(3), &pool, 5).unwrap();
        assert_eq!(ranked[0], (3, 1.0));
        // Remaining ties (cosine 0) keep pool order.
        assert_eq!(ranked[1..].iter().map(|r| r.0).collect::<Vec<_>>(), vec![0, 1, 2, 4]);
    }

    #[test]
    fn ranking_matches_brute_force() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let vec = |rng: &mut rand_chacha::ChaCha8Rng| {
                EmbeddingVector::new((0..8).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
            };
            let pool: Vec<EmbeddingVector> = (0..20).map(|_| vec(&mut rng)).collect();
            let q = vec(&mut rng);
            let got: Vec<usize> = rank_by_cosine(&q, &pool, 5).unwrap().into_iter().map(|r| r.0).collect();
            // Oracle: repeatedly pick the unused index with the largest cosine.
            let cos = |v: &EmbeddingVector| {
                let dot: f64 = q.values().iter().zip(v.values()).map(|(a, b)| a * b).sum();
                let n = |x: &EmbeddingVector| x.values().iter().map(|a| a * a).sum::<f64>().sqrt();
                dot / (n(&q) * n(v))
            };
            let mut used = vec![false; 20];
            let mut oracle = Vec::new();
            for _ in 0..5 {
                let mut best = None;
                for i in 0..20 {
                    if !used[i] && best.map_or(true, |b: usize| cos(&pool[i]) > cos(&pool[b])) {
                        best = Some(i);
                    }
                }
                used[best.unwrap()] = true;
                oracle.push(best.unwrap());
            }
            assert_eq!(got, oracle);
        }
    }

    #[test]
    fn retrieval_text_truncates_by_chars() {
        let d = Document::new("x", "héllo world");
        assert_eq!(retrieval_text(&d, Some(2)), "hé");
        assert_eq!(retrieval_text(&d, Some(100)), d.text);
        assert_eq!(retrieval_text(&d, None), d.text);
    }

    fn scripted(middle_reply: &'static str) -> impl Fn(&[ChatMessage]) -> Result<String, ClientError> {
        move |msgs: &[ChatMessage]| {
            let p = &msgs[0].content;
            Ok(if p.contains("position=\"middle\"") {
                middle_reply.to_string()
            } else if p.contains("position=\"beginning\"") {
                r#"{"query": "begin q", "answer": "alpha", "reasoning": "r"}"#.to_string()
            } else {
                r#"{"query": "end q", "answer": "iota", "reasoning": "r"}"#.to_string()
            })
        }
    }

    #[test]
    fn per_position_parse_failures_are_independent() {
        let cfg = GenerationConfig {
            character: "a student".into(),
            difficulty: Difficulty::HighSchool,
            query_length: QueryLength::Short,
        };
        let chat = scripted(r#"{"query": "mid q", "answer": "delta"}"#);
        let batch = generate_candidates(&doc(), &cfg, &chat, &PromptSet::default()).unwrap();
        assert_eq!(batch.candidates.len(), 3);
        assert!(batch.candidates.iter().all(|c| c.config == cfg));

        let chat = scripted("I refuse.");
        let batch = generate_candidates(&doc(), &cfg, &chat, &PromptSet::default()).unwrap();
        let positions: Vec<Position> = batch.candidates.iter().map(|c| c.target_position).collect();
        assert_eq!(positions, vec![Position::Begin, Position::End]);
        assert_eq!(batch.failures, vec![(Position::Middle, ParseFailure::NoJson)]);

        let again = generate_candidates(&doc(), &cfg, &chat, &PromptSet::default()).unwrap();
        assert_eq!(again, batch);
    }

    #[test]
    fn config_failure_excludes_document() {
        let e = MockEmbedder::new(1, 8);
        let pool = PersonaPool::embed(vec!["p1".into(), "p2".into()], &e, None).unwrap();
        let chat = |_: &[ChatMessage]| -> Result<String, ClientError> {
            Ok(r#"{"Character": "p1", "Query_Length": "short"}"#.into())
        };
        let out = generate_for_document(&doc(), &pool, &e, &chat, &PromptSet::default(), &GenerationSettings::default())
            .unwrap();
        assert!(out.candidates.is_empty());
        assert!(matches!(out.status, DocStatus::ConfigParseFailure { .. }));
        let stats = GenerationStats::default();
        stats.record(&out);
        assert_eq!(stats.report().excluded_config_parse, 1);
    }

    #[test]
    fn sidecar_avoids_reembedding() {
        use std::sync::atomic::AtomicUsize;
        struct Counting(AtomicUsize, MockEmbedder);
        impl EmbeddingClient for Counting {
            fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ClientError> {
                self.0.fetch_add(texts.len(), Ordering::SeqCst);
                self.1.embed(texts)
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let sidecar = dir.path().join("personas.emb.jsonl");
        let client = Counting(AtomicUsize::new(0), MockEmbedder::new(2, 8));
        let personas = vec!["a".to_string(), "b".to_string()];
        let first = PersonaPool::embed(personas.clone(), &client, Some(&sidecar)).unwrap();
        assert_eq!(client.0.load(Ordering::SeqCst), 2);
        let second = PersonaPool::embed(personas, &client, Some(&sidecar)).unwrap();
        assert_eq!(client.0.load(Ordering::SeqCst), 2);
        assert_eq!(first.embeddings(), second.embeddings());
    }
}
