//! Fixtures shared by the CLI test targets.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use posforge::corpus::LengthBin;

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_posforge"))
}

/// Runs `posforge` with `args` and the given config.
pub fn run(config: &Path, args: &[&str]) -> Output {
    let out = bin()
        .arg("--config")
        .arg(config)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn posforge");
    out
}

pub fn ok(config: &Path, args: &[&str]) {
    let out = run(config, args);
    assert!(
        out.status.success(),
        "posforge {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Small deterministic generator so fixtures need no RNG crate.
pub struct Lcg(u64);

impl Lcg {
    pub fn new(seed: u64) -> Self {
        Self(seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407))
    }

    pub fn next(&mut self) -> u64 {
        self.0 = self.0.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        self.0 >> 33
    }

    pub fn below(&mut self, n: u64) -> u64 {
        self.next() % n
    }
}

/// Text of roughly `chars` characters drawn from a vocabulary of `vocab`
/// pseudo-words. Small vocabularies make segments share terms.
pub fn words_text(rng: &mut Lcg, chars: usize, vocab: u64) -> String {
    const SYL: [&str; 16] = [
        "ka", "lo", "mi", "ne", "ru", "ta", "vo", "zi", "pe", "su", "do", "fa", "gu", "hi", "jo", "be",
    ];
    let word = |mut i: u64| {
        let mut w = String::new();
        loop {
            w.push_str(SYL[(i % 16) as usize]);
            i /= 16;
            if i == 0 {
                break;
            }
        }
        w
    };
    let mut s = String::new();
    while s.chars().count() < chars {
        if !s.is_empty() {
            s.push(' ');
        }
        s.push_str(&word(16 + rng.below(vocab)));
    }
    s.chars().take(chars).collect()
}

/// Writes `docs_per_bin` documents into every canonical length bin.
pub fn write_corpus(path: &Path, docs_per_bin: usize, seed: u64, vocab: u64) {
    let mut rng = Lcg::new(seed);
    let mut lines = String::new();
    for (b, bin) in LengthBin::CANONICAL.iter().enumerate() {
        for i in 0..docs_per_bin {
            let span = (bin.hi() - bin.lo()) as u64;
            let len = bin.lo() + 8 + rng.below(span / 4) as usize;
            let text = words_text(&mut rng, len, vocab);
            lines.push_str(&serde_json::json!({"doc_id": format!("b{b}-{i:03}"), "text": text}).to_string());
            lines.push('\n');
        }
    }
    std::fs::write(path, lines).unwrap();
}

pub const PERSONAS: &str = "A field hydrologist\nA museum archivist\nA high-school chemistry teacher\nA marathon coach\nA patent attorney\nA birdwatcher\n";

/// Writes corpus, personas and a mock-backed config into `dir`.
pub fn setup(dir: &Path, docs_per_bin: usize, extra: &str) -> PathBuf {
    write_corpus(&dir.join("corpus.jsonl"), docs_per_bin, 5, 400);
    std::fs::write(dir.join("personas.txt"), PERSONAS).unwrap();
    let config = dir.join("posforge.toml");
    std::fs::write(
        &config,
        format!(
            r#"
corpus = "corpus.jsonl"
personas = "personas.txt"
output_dir = "out"
persona_k = 3
chunk_size = 7
{extra}

[endpoints.chat]
id = "gen"
base_url = "mock://7"

[endpoints.embed]
id = "emb"
base_url = "mock://3"

[[endpoints.rerankers]]
id = "r1"
base_url = "mock://11"

[[endpoints.rerankers]]
id = "r2"
base_url = "mock://12"

[[endpoints.rerankers]]
id = "r3"
base_url = "mock://13"
"#
        ),
    )
    .unwrap();
    config
}

/// Relative path to contents for every file under `dir`, skipping the
/// response cache.
pub fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(base: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            let rel = p.strip_prefix(base).unwrap().to_string_lossy().into_owned();
            if rel.starts_with(".cache") {
                continue;
            }
            if p.is_dir() {
                walk(base, &p, out);
            } else {
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

pub const PIPELINE: [&[&str]; 7] = [
    &["bin"],
    &["generate"],
    &["verify"],
    &["funnel-report"],
    &["audit", "--limit", "40"],
    &["sample"],
    &["export-manifest"],
];

pub fn run_pipeline(config: &Path, out: &Path) {
    let out = out.to_str().unwrap();
    for step in PIPELINE {
        let mut args: Vec<&str> = step.to_vec();
        args.extend(["--out", out]);
        ok(config, &args);
    }
}
