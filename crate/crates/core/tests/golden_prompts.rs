//! Rendered prompts compared byte-for-byte with stored golden files.

use std::sync::Mutex;

use posforge::clients::{ChatMessage, ClientError};
use posforge::corpus::Document;
use posforge::prompts::PromptSet;
use posforge::querygen::{generate_candidates, select_config, Difficulty, GenerationConfig, QueryLength};
use posforge::verify::render_audit_prompt;

fn golden(name: &str) -> Vec<ChatMessage> {
    let path = format!("{}/tests/golden/{name}.json", env!("CARGO_MANIFEST_DIR"));
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

const DOC: &str = "Rivers carve valleys over millennia. Sediment settles in deltas. Floods reshape banks each spring.";

#[test]
fn audit_prompts() {
    let set = PromptSet::default();
    let cases = [
        ("Who founded the abbey in 1132?", "The abbey was founded in 1132 by monks from Clairvaux."),
        (
            "What is the boiling point of ethanol at sea level?",
            "Ethanol boils at 78.37 °C under standard atmospheric pressure; it is miscible with water.",
        ),
        (
            "Which {brace} token survives?",
            "Text with {braces} and \"quotes\" inside.\nSecond line.",
        ),
    ];
    for (i, (q, s)) in cases.iter().enumerate() {
        assert_eq!(render_audit_prompt(&set.audit, q, s), golden(&format!("audit_{}", i + 1)), "case {}", i + 1);
    }
}

#[test]
fn stage1_prompt() {
    let seen = Mutex::new(Vec::new());
    let chat = |m: &[ChatMessage]| -> Result<String, ClientError> {
        seen.lock().unwrap().push(m.to_vec());
        Ok(r#"{"Character": "A hydrologist", "Difficulty": "university", "Query_Length": "medium"}"#.into())
    };
    let doc = Document::new("d", DOC);
    let personas = vec!["A hydrologist".to_string(), "A geography teacher".to_string()];
    let cfg = select_config(&doc, &personas, &chat, &PromptSet::default()).unwrap();
    assert_eq!(cfg.character, "A hydrologist");
    assert_eq!(seen.lock().unwrap()[0], golden("stage1"));
}

#[test]
fn stage2_prompts() {
    let seen = Mutex::new(Vec::new());
    let chat = |m: &[ChatMessage]| -> Result<String, ClientError> {
        seen.lock().unwrap().push(m.to_vec());
        Ok(r#"{"query": "q", "answer": "a"}"#.into())
    };
    let cfg = GenerationConfig {
        character: "A hydrologist".into(),
        difficulty: Difficulty::University,
        query_length: QueryLength::Medium,
    };
    let batch = generate_candidates(&Document::new("d", DOC), &cfg, &chat, &PromptSet::default()).unwrap();
    assert_eq!(batch.candidates.len(), 3);
    let seen = seen.lock().unwrap();
    for (i, pos) in ["begin", "middle", "end"].iter().enumerate() {
        assert_eq!(seen[i], golden(&format!("stage2_{pos}")), "{pos}");
    }
}
