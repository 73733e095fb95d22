//! Budgeted sampling of training sets from the retained pool.
//!
//! The pool is split into 15 cells (five length bins by three target
//! positions). The budget is the smallest cell; each ratio configuration
//! takes `floor(B * r_p / sum(r))` examples per bin from position `p`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{LengthBin, Position};
use crate::jsonl::{self, JsonlError};
use crate::verify::ConsensusVerdict;

pub const HEADER_FILE: &str = "manifest_header.json";
pub const EXAMPLES_FILE: &str = "examples.jsonl";

#[derive(Debug, Error)]
pub enum SampleError {
    #[error("cell {bin}/{position} is empty")]
    EmptyCell { bin: LengthBin, position: Position },
    #[error("cell {bin}/{position} holds {available} examples, quota is {quota}")]
    InsufficientCell {
        bin: LengthBin,
        position: Position,
        available: usize,
        quota: usize,
    },
    #[error("candidate {0:?} has no length bin")]
    Unbinned(String),
    #[error("candidate {0:?} appears twice in the pool")]
    DuplicateCandidate(String),
    #[error("invalid ratio {0:?}: expected b:m:e with non-negative integers summing above zero")]
    BadRatio(String),
    #[error("no text for document {0:?}")]
    MissingDocument(String),
    #[error(transparent)]
    Io(#[from] JsonlError),
}

/// A retained candidate as the sampler sees it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub candidate_id: String,
    pub doc_id: String,
    pub query: String,
    pub target_position: Position,
    pub length_bin: LengthBin,
}

pub type Cell = (LengthBin, Position);

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RetainedPool {
    cells: BTreeMap<Cell, Vec<PoolEntry>>,
}

impl RetainedPool {
    /// Groups entries by (bin, verified target position); each cell is
    /// sorted by candidate id so the pool does not depend on input order.
    pub fn new(entries: impl IntoIterator<Item = PoolEntry>) -> Result<Self, SampleError> {
        let mut seen = HashSet::new();
        let mut cells: BTreeMap<Cell, Vec<PoolEntry>> = BTreeMap::new();
        for e in entries {
            if !seen.insert(e.candidate_id.clone()) {
                return Err(SampleError::DuplicateCandidate(e.candidate_id));
            }
            cells.entry((e.length_bin, e.target_position)).or_default().push(e);
        }
        for v in cells.values_mut() {
            v.sort_by(|a, b| a.candidate_id.cmp(&b.candidate_id));
        }
        Ok(Self { cells })
    }

    /// Builds the pool from the retained verdicts only.
    pub fn from_verdicts<'a>(verdicts: impl IntoIterator<Item = &'a ConsensusVerdict>) -> Result<Self, SampleError> {
        let entries = verdicts
            .into_iter()
            .filter(|v| v.retained)
            .map(|v| {
                let c = &v.candidate;
                Ok(PoolEntry {
                    candidate_id: c.candidate_id.clone(),
                    doc_id: c.doc_id.clone(),
                    query: c.query.clone(),
                    target_position: c.target_position,
                    length_bin: c.length_bin.ok_or_else(|| SampleError::Unbinned(c.candidate_id.clone()))?,
                })
            })
            .collect::<Result<Vec<_>, SampleError>>()?;
        Self::new(entries)
    }

    pub fn cell(&self, bin: LengthBin, position: Position) -> &[PoolEntry] {
        self.cells.get(&(bin, position)).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Sizes of all 15 canonical cells, zeros included.
    pub fn counts(&self) -> BTreeMap<Cell, usize> {
        canonical_cells()
            .map(|(b, p)| ((b, p), self.cell(b, p).len()))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.cells.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn canonical_cells() -> impl Iterator<Item = Cell> {
    LengthBin::CANONICAL
        .into_iter()
        .flat_map(|b| Position::ALL.into_iter().map(move |p| (b, p)))
}

/// Smallest canonical cell size.
pub fn compute_budget_from_counts(counts: &BTreeMap<Cell, usize>) -> Result<usize, SampleError> {
    let mut budget = usize::MAX;
    for (bin, position) in canonical_cells() {
        let n = counts.get(&(bin, position)).copied().unwrap_or(0);
        if n == 0 {
            return Err(SampleError::EmptyCell { bin, position });
        }
        budget = budget.min(n);
    }
    Ok(budget)
}

pub fn compute_budget(pool: &RetainedPool) -> Result<usize, SampleError> {
    compute_budget_from_counts(&pool.counts())
}

/// Begin:middle:end proportions of one training configuration.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatioConfig {
    pub name: String,
    pub ratio: [u32; 3],
}

impl RatioConfig {
    pub fn m_b() -> Self {
        Self::named("M_B", [100, 0, 0])
    }
    pub fn m_m() -> Self {
        Self::named("M_M", [0, 100, 0])
    }
    pub fn m_e() -> Self {
        Self::named("M_E", [0, 0, 100])
    }
    pub fn m_u() -> Self {
        Self::named("M_U", [33, 33, 33])
    }

    fn named(name: &str, ratio: [u32; 3]) -> Self {
        Self {
            name: name.into(),
            ratio,
        }
    }

    pub fn canonical() -> [RatioConfig; 4] {
        [Self::m_b(), Self::m_m(), Self::m_e(), Self::m_u()]
    }

    pub fn is_canonical(&self) -> bool {
        Self::canonical().iter().any(|c| c.ratio == self.ratio)
    }

    /// Per-bin quota for each position: `floor(B * r_p / sum(r))`.
    pub fn quotas(&self, budget: usize) -> BTreeMap<Position, usize> {
        let total: u128 = self.ratio.iter().map(|&r| u128::from(r)).sum();
        Position::ALL
            .into_iter()
            .map(|p| {
                let share = budget as u128 * u128::from(self.ratio[p.index()]) / total.max(1);
                (p, share as usize)
            })
            .collect()
    }
}

impl fmt::Display for RatioConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [b, m, e] = self.ratio;
        write!(f, "{} ({b}:{m}:{e})", self.name)
    }
}

impl FromStr for RatioConfig {
    type Err = SampleError;

    /// Accepts a configuration name (`M_B`, `mb`, ...) or a `b:m:e` ratio.
    fn from_str(s: &str) -> Result<Self, SampleError> {
        let key = s.trim().to_ascii_uppercase().replace('_', "");
        if let Some(c) = Self::canonical().into_iter().find(|c| c.name.replace('_', "") == key) {
            return Ok(c);
        }
        let bad = || SampleError::BadRatio(s.to_string());
        let parts: Vec<u32> = s
            .split(':')
            .map(|p| p.trim().parse::<u32>().map_err(|_| bad()))
            .collect::<Result<_, _>>()?;
        let ratio: [u32; 3] = parts.try_into().map_err(|_| bad())?;
        if ratio.iter().all(|&r| r == 0) {
            return Err(bad());
        }
        Ok(Self::canonical()
            .into_iter()
            .find(|c| c.ratio == ratio)
            .unwrap_or_else(|| Self::named(&format!("custom_{}_{}_{}", ratio[0], ratio[1], ratio[2]), ratio)))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub candidate_id: String,
    pub query: String,
    pub doc_id: String,
    pub target_position: Position,
    pub length_bin: LengthBin,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingConfigSet {
    pub config: RatioConfig,
    pub budget: usize,
    pub seed: u64,
    pub examples: Vec<TrainingExample>,
}

impl TrainingConfigSet {
    pub fn counts(&self) -> BTreeMap<Cell, usize> {
        let mut counts: BTreeMap<Cell, usize> = canonical_cells().map(|c| (c, 0)).collect();
        for e in &self.examples {
            *counts.entry((e.length_bin, e.target_position)).or_default() += 1;
        }
        counts
    }
}

/// `k` distinct indices from `0..n`, uniformly, via a partial Fisher-Yates
/// shuffle.
fn choose_indices(rng: &mut ChaCha20Rng, n: usize, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.gen_range(i..n);
        idx.swap(i, j);
    }
    idx.truncate(k);
    idx
}

/// Samples `config` from `pool` without replacement. Each canonical cell
/// draws from its own ChaCha20 stream of `seed`, so a cell's draw does not
/// depend on the quotas of other cells.
pub fn sample_config(
    pool: &RetainedPool,
    config: &RatioConfig,
    budget: usize,
    seed: u64,
) -> Result<TrainingConfigSet, SampleError> {
    let quotas = config.quotas(budget);
    let mut examples = Vec::new();
    for (stream, (bin, position)) in canonical_cells().enumerate() {
        let quota = quotas[&position];
        let cell = pool.cell(bin, position);
        if cell.len() < quota {
            return Err(SampleError::InsufficientCell {
                bin,
                position,
                available: cell.len(),
                quota,
            });
        }
        if quota == 0 {
            continue;
        }
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(stream as u64);
        for i in choose_indices(&mut rng, cell.len(), quota) {
            let e = &cell[i];
            examples.push(TrainingExample {
                candidate_id: e.candidate_id.clone(),
                query: e.query.clone(),
                doc_id: e.doc_id.clone(),
                target_position: e.target_position,
                length_bin: e.length_bin,
            });
        }
    }
    Ok(TrainingConfigSet {
        config: config.clone(),
        budget,
        seed,
        examples,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellCount {
    pub length_bin: LengthBin,
    pub position: Position,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchingRule {
    /// Every batch is drawn from a single length bin, so in-batch negatives
    /// share the positive's length stratum.
    pub in_batch_negatives: String,
    pub hard_negative_mining: bool,
}

impl Default for BatchingRule {
    fn default() -> Self {
        Self {
            in_batch_negatives: "same_length_bin".into(),
            hard_negative_mining: false,
        }
    }
}

/// Fine-tuning settings carried as metadata for downstream trainers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingHyperparameters {
    pub loss: String,
    pub optimizer: String,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_ratio: f64,
    pub similarity_scale: f64,
    pub temperature: f64,
    pub seed: u64,
    pub learning_rate_under_400m_params: f64,
    pub learning_rate_larger: f64,
    pub query_prefix_encoder: String,
    pub query_prefix_decoder: String,
    pub document_prefix: String,
}

impl Default for TrainingHyperparameters {
    fn default() -> Self {
        Self {
            loss: "InfoNCE (CachedMNRL)".into(),
            optimizer: "AdamW".into(),
            batch_size: 256,
            epochs: 3,
            warmup_ratio: 0.1,
            similarity_scale: 20.0,
            temperature: 0.05,
            seed: 42,
            learning_rate_under_400m_params: 4e-5,
            learning_rate_larger: 2e-5,
            query_prefix_encoder: "query: ".into(),
            query_prefix_decoder: "Retrieve a relevant passage: ".into(),
            document_prefix: String::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub config: String,
    pub ratio: [u32; 3],
    /// `canonical` for the four named configurations, otherwise
    /// `proportional_round_down`.
    pub ratio_rule: String,
    pub seed: u64,
    pub budget: usize,
    pub total: usize,
    pub counts: Vec<CellCount>,
    pub batching: BatchingRule,
    pub training: TrainingHyperparameters,
}

/// One manifest line: a query and its positive document text.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestExample {
    pub length_bin: LengthBin,
    pub candidate_id: String,
    pub doc_id: String,
    pub target_position: Position,
    pub query: String,
    pub positive: String,
}

pub fn manifest_header(set: &TrainingConfigSet) -> ManifestHeader {
    ManifestHeader {
        config: set.config.name.clone(),
        ratio: set.config.ratio,
        ratio_rule: if set.config.is_canonical() {
            "canonical".into()
        } else {
            "proportional_round_down".into()
        },
        seed: set.seed,
        budget: set.budget,
        total: set.examples.len(),
        counts: set
            .counts()
            .into_iter()
            .map(|((length_bin, position), count)| CellCount {
                length_bin,
                position,
                count,
            })
            .collect(),
        batching: BatchingRule::default(),
        training: TrainingHyperparameters::default(),
    }
}

/// Manifest lines grouped by length bin (ascending), keeping sample order
/// within a bin.
pub fn manifest_examples(
    set: &TrainingConfigSet,
    doc_texts: &HashMap<String, String>,
) -> Result<Vec<ManifestExample>, SampleError> {
    let mut by_bin: BTreeMap<LengthBin, Vec<ManifestExample>> = BTreeMap::new();
    for e in &set.examples {
        let text = doc_texts
            .get(&e.doc_id)
            .ok_or_else(|| SampleError::MissingDocument(e.doc_id.clone()))?;
        by_bin.entry(e.length_bin).or_default().push(ManifestExample {
            length_bin: e.length_bin,
            candidate_id: e.candidate_id.clone(),
            doc_id: e.doc_id.clone(),
            target_position: e.target_position,
            query: e.query.clone(),
            positive: text.clone(),
        });
    }
    Ok(by_bin.into_values().flatten().collect())
}

/// Writes `manifest_header.json` and `examples.jsonl` into `dir`.
pub fn export_manifest(
    set: &TrainingConfigSet,
    doc_texts: &HashMap<String, String>,
    dir: &Path,
) -> Result<ManifestHeader, SampleError> {
    let examples = manifest_examples(set, doc_texts)?;
    let header = manifest_header(set);
    std::fs::create_dir_all(dir).map_err(|source| JsonlError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    jsonl::write_json(&dir.join(HEADER_FILE), &header)?;
    jsonl::write_jsonl(&dir.join(EXAMPLES_FILE), &examples)?;
    Ok(header)
}

pub fn load_manifest(dir: &Path) -> Result<(ManifestHeader, Vec<ManifestExample>), SampleError> {
    let header = jsonl::read_json(&dir.join(HEADER_FILE))?;
    let examples = jsonl::read_jsonl(&dir.join(EXAMPLES_FILE))?;
    Ok((header, examples))
}
