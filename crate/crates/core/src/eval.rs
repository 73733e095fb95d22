//! Position-aware retrieval evaluation over TREC qrels and run files.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Position;

pub const DEFAULT_K: usize = 10;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("all positional scores are zero; PSI is undefined")]
    DegenerateScores,
    #[error("positional subset {0} has no scorable queries")]
    EmptySubset(Position),
    #[error("invalid bucket specification {0:?}")]
    BadBucket(String),
    #[error("unknown bucket preset {0:?}")]
    UnknownPreset(String),
    #[error("query {0:?}: document length is zero")]
    ZeroLengthDoc(String),
    #[error("query {qid:?}: evidence start {start} not below document length {doc_len}")]
    EvidenceOutOfRange { qid: String, start: usize, doc_len: usize },
    #[error("no evidence records")]
    NoEvidence,
    #[error("histogram needs at least one bin")]
    NoBins,
}

/// Relevance judgments: query id to (doc id to positive grade).
pub type Qrels = BTreeMap<String, BTreeMap<String, u32>>;
/// Ranked lists: query id to (doc id, score), highest score first.
pub type Run = BTreeMap<String, Vec<(String, f64)>>;

fn parse_err(line: usize, message: impl Into<String>) -> EvalError {
    EvalError::Parse {
        line,
        message: message.into(),
    }
}

/// Reads `qid iter docid grade` lines. Grades of zero or less are
/// non-relevant and dropped; a query left with no positive grade keeps an
/// empty entry so it can be reported as skipped.
pub fn parse_qrels(text: &str) -> Result<Qrels, EvalError> {
    let mut qrels = Qrels::new();
    for (i, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() != 4 {
            return Err(parse_err(i + 1, format!("expected 4 columns, found {}", fields.len())));
        }
        let grade: i64 = fields[3]
            .parse()
            .map_err(|_| parse_err(i + 1, format!("bad grade {:?}", fields[3])))?;
        let row = qrels.entry(fields[0].to_string()).or_default();
        if grade > 0 {
            row.insert(fields[2].to_string(), grade as u32);
        }
    }
    Ok(qrels)
}

/// Reads `qid Q0 docid rank score tag` lines and orders every query's list
/// by descending score, ties broken by doc id.
pub fn parse_run(text: &str) -> Result<Run, EvalError> {
    let mut run = Run::new();
    for (i, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() != 6 {
            return Err(parse_err(i + 1, format!("expected 6 columns, found {}", fields.len())));
        }
        let score: f64 = fields[4]
            .parse()
            .ok()
            .filter(|s: &f64| s.is_finite())
            .ok_or_else(|| parse_err(i + 1, format!("bad score {:?}", fields[4])))?;
        let row = run.entry(fields[0].to_string()).or_default();
        if row.iter().any(|(d, _)| d == fields[2]) {
            return Err(parse_err(i + 1, format!("duplicate document {:?} for query {:?}", fields[2], fields[0])));
        }
        row.push((fields[2].to_string(), score));
    }
    for row in run.values_mut() {
        sort_ranking(row);
    }
    Ok(run)
}

pub fn sort_ranking(row: &mut [(String, f64)]) {
    row.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
}

/// Writes a run in 6-column TREC format.
pub fn format_run(run: &Run, tag: &str) -> String {
    let mut out = String::new();
    for (qid, row) in run {
        for (rank, (doc, score)) in row.iter().enumerate() {
            let _ = writeln!(out, "{qid} Q0 {doc} {} {score} {tag}", rank + 1);
        }
    }
    out
}

fn dcg(grades: impl Iterator<Item = u32>) -> f64 {
    grades
        .enumerate()
        .map(|(i, g)| f64::from(g) / ((i + 2) as f64).log2())
        .sum()
}

/// nDCG@k with linear gain. `ranking` need not be sorted. Returns `None`
/// when the query has no relevant documents.
pub fn ndcg_at_k(ranking: &[(String, f64)], judged: &BTreeMap<String, u32>, k: usize) -> Option<f64> {
    if judged.is_empty() {
        return None;
    }
    let mut ranked = ranking.to_vec();
    sort_ranking(&mut ranked);
    let actual = dcg(ranked.iter().take(k).map(|(d, _)| judged.get(d).copied().unwrap_or(0)));
    let mut ideal: Vec<u32> = judged.values().copied().collect();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let ideal = dcg(ideal.into_iter().take(k));
    Some(actual / ideal)
}

/// Per-query nDCG@k for every query in `qrels`. Queries absent from the run
/// score zero; queries without relevant documents are returned separately.
pub fn per_query_ndcg(run: &Run, qrels: &Qrels, k: usize) -> (BTreeMap<String, f64>, Vec<String>) {
    let mut scores = BTreeMap::new();
    let mut skipped = Vec::new();
    for (qid, judged) in qrels {
        let ranking = run.get(qid).map(Vec::as_slice).unwrap_or(&[]);
        match ndcg_at_k(ranking, judged, k) {
            Some(s) => {
                scores.insert(qid.clone(), s);
            }
            None => skipped.push(qid.clone()),
        }
    }
    (scores, skipped)
}

pub fn psi(s_begin: f64, s_mid: f64, s_end: f64) -> Result<f64, EvalError> {
    let max = s_begin.max(s_mid).max(s_end);
    let min = s_begin.min(s_mid).min(s_end);
    if max <= 0.0 {
        return Err(EvalError::DegenerateScores);
    }
    Ok(1.0 - min / max)
}

fn mean(xs: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (sum, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetScore {
    pub ndcg: f64,
    pub queries: usize,
    pub skipped: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PositionedEvalResult {
    pub k: usize,
    pub s_begin: f64,
    pub s_mid: f64,
    pub s_end: f64,
    pub psi: f64,
    /// Mean of the three subset scores.
    pub mean: f64,
    /// Mean over all scored queries of the three subsets.
    pub micro_mean: f64,
    pub subsets: BTreeMap<Position, SubsetScore>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub buckets: Option<BucketCurve>,
}

/// Scores one run against the three positional qrel subsets.
pub fn evaluate_positioned(
    run: &Run,
    subsets: &BTreeMap<Position, Qrels>,
    k: usize,
) -> Result<PositionedEvalResult, EvalError> {
    let mut per = BTreeMap::new();
    let mut all = Vec::new();
    for p in Position::ALL {
        let empty = Qrels::new();
        let (scores, skipped) = per_query_ndcg(run, subsets.get(&p).unwrap_or(&empty), k);
        let ndcg = mean(scores.values().copied()).ok_or(EvalError::EmptySubset(p))?;
        all.extend(scores.values().copied());
        per.insert(
            p,
            SubsetScore {
                ndcg,
                queries: scores.len(),
                skipped: skipped.len(),
            },
        );
    }
    let s = |p: Position| per[&p].ndcg;
    let (b, m, e) = (s(Position::Begin), s(Position::Middle), s(Position::End));
    Ok(PositionedEvalResult {
        k,
        s_begin: b,
        s_mid: m,
        s_end: e,
        psi: psi(b, m, e)?,
        mean: (b + m + e) / 3.0,
        micro_mean: mean(all).unwrap_or(0.0),
        subsets: per,
        buckets: None,
    })
}

/// Aligned text block: nDCG columns, then PSI.
pub fn render_positioned_text(label: &str, r: &PositionedEvalResult) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<16} {:>8} {:>8} {:>8} {:>8} {:>8} | {:>6}",
        "model", "begin", "middle", "end", "mean", "micro", "PSI"
    );
    let _ = writeln!(
        out,
        "{:<16} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} | {:>6.3}",
        label, r.s_begin, r.s_mid, r.s_end, r.mean, r.micro_mean, r.psi
    );
    out
}

/// Evidence annotation sidecar line.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvidenceRecord {
    pub qid: String,
    pub docid: String,
    pub evidence_start: usize,
    pub doc_len: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evidence_end: Option<usize>,
}

impl EvidenceRecord {
    pub fn relative_start(&self) -> Result<f64, EvalError> {
        if self.doc_len == 0 {
            return Err(EvalError::ZeroLengthDoc(self.qid.clone()));
        }
        if self.evidence_start >= self.doc_len {
            return Err(EvalError::EvidenceOutOfRange {
                qid: self.qid.clone(),
                start: self.evidence_start,
                doc_len: self.doc_len,
            });
        }
        Ok(self.evidence_start as f64 / self.doc_len as f64)
    }
}

/// A position bucket over evidence start offsets.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub lo: usize,
    /// `None` means unbounded.
    pub hi: Option<usize>,
    pub hi_inclusive: bool,
}

impl Bucket {
    pub fn contains(&self, x: usize) -> bool {
        x >= self.lo
            && match self.hi {
                None => true,
                Some(h) if self.hi_inclusive => x <= h,
                Some(h) => x < h,
            }
    }
}

impl fmt::Display for Bucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.hi {
            None => write!(f, "[{},inf)", self.lo),
            Some(h) => write!(f, "[{},{}{}", self.lo, h, if self.hi_inclusive { ']' } else { ')' }),
        }
    }
}

impl FromStr for Bucket {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, EvalError> {
        let bad = || EvalError::BadBucket(s.to_string());
        let t = s.trim();
        let inner = t.strip_prefix('[').ok_or_else(bad)?;
        let (inner, hi_inclusive) = if let Some(x) = inner.strip_suffix(']') {
            (x, true)
        } else {
            (inner.strip_suffix(')').ok_or_else(bad)?, false)
        };
        let (lo, hi) = inner.split_once(',').ok_or_else(bad)?;
        let lo: usize = lo.trim().parse().map_err(|_| bad())?;
        let hi = match hi.trim() {
            "inf" | "∞" => None,
            h => Some(h.parse::<usize>().map_err(|_| bad())?),
        };
        match hi {
            None if hi_inclusive => Err(bad()),
            Some(h) if h < lo || (h == lo && !hi_inclusive) => Err(bad()),
            _ => Ok(Bucket { lo, hi, hi_inclusive }),
        }
    }
}

/// Parses a comma-joined list such as `[0,100),[100,200),[500,3120]`.
pub fn parse_buckets(spec: &str) -> Result<Vec<Bucket>, EvalError> {
    let mut out = Vec::new();
    let mut rest = spec.trim();
    while !rest.is_empty() {
        let end = rest
            .find([')', ']'])
            .ok_or_else(|| EvalError::BadBucket(spec.to_string()))?;
        out.push(rest[..=end].parse()?);
        rest = rest[end + 1..].trim_start().trim_start_matches(',').trim_start();
    }
    if out.is_empty() {
        return Err(EvalError::BadBucket(spec.to_string()));
    }
    Ok(out)
}

/// Named bucket layouts.
pub fn bucket_preset(name: &str) -> Result<Vec<Bucket>, EvalError> {
    match name {
        "squad-posq" => parse_buckets("[0,100),[100,200),[200,300),[300,400),[400,500),[500,3120]"),
        other => Err(EvalError::UnknownPreset(other.to_string())),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketScore {
    pub bucket: String,
    pub queries: usize,
    pub ndcg: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketCurve {
    pub buckets: Vec<BucketScore>,
    /// Scored queries whose offset fell in no bucket.
    pub dropped: usize,
    /// Scored queries with no evidence record.
    pub missing_evidence: usize,
}

/// First evidence record per query id.
pub fn evidence_by_query(records: &[EvidenceRecord]) -> BTreeMap<String, &EvidenceRecord> {
    let mut map = BTreeMap::new();
    for r in records {
        map.entry(r.qid.clone()).or_insert(r);
    }
    map
}

/// Mean per-query score within each bucket of evidence start offsets. A
/// query is counted in the first bucket that contains its offset.
pub fn bucket_curve(
    per_query: &BTreeMap<String, f64>,
    evidence: &[EvidenceRecord],
    buckets: &[Bucket],
) -> BucketCurve {
    let ev = evidence_by_query(evidence);
    let mut sums = vec![(0.0, 0usize); buckets.len()];
    let (mut dropped, mut missing) = (0, 0);
    for (qid, score) in per_query {
        let Some(r) = ev.get(qid) else {
            missing += 1;
            continue;
        };
        match buckets.iter().position(|b| b.contains(r.evidence_start)) {
            Some(i) => {
                sums[i].0 += score;
                sums[i].1 += 1;
            }
            None => dropped += 1,
        }
    }
    BucketCurve {
        buckets: buckets
            .iter()
            .zip(sums)
            .map(|(b, (s, n))| BucketScore {
                bucket: b.to_string(),
                queries: n,
                ndcg: (n > 0).then(|| s / n as f64),
            })
            .collect(),
        dropped,
        missing_evidence: missing,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvidenceDistribution {
    pub n: usize,
    pub mean_relative_start: f64,
    pub histogram: Vec<HistogramBin>,
    /// Shares of relative starts in [0,1/3), [1/3,2/3), [2/3,1).
    pub thirds: [f64; 3],
}

/// Histogram of `evidence_start / doc_len` over `bins` equal-width bins of
/// [0,1).
pub fn evidence_start_distribution(records: &[EvidenceRecord], bins: usize) -> Result<EvidenceDistribution, EvalError> {
    if bins == 0 {
        return Err(EvalError::NoBins);
    }
    if records.is_empty() {
        return Err(EvalError::NoEvidence);
    }
    let rel: Vec<f64> = records.iter().map(EvidenceRecord::relative_start).collect::<Result<_, _>>()?;
    let mut counts = vec![0usize; bins];
    let mut thirds = [0usize; 3];
    for r in &rel {
        counts[((r * bins as f64) as usize).min(bins - 1)] += 1;
        thirds[((r * 3.0) as usize).min(2)] += 1;
    }
    let n = rel.len();
    Ok(EvidenceDistribution {
        n,
        mean_relative_start: rel.iter().sum::<f64>() / n as f64,
        histogram: counts
            .into_iter()
            .enumerate()
            .map(|(i, count)| HistogramBin {
                lo: i as f64 / bins as f64,
                hi: (i + 1) as f64 / bins as f64,
                count,
            })
            .collect(),
        thirds: thirds.map(|c| c as f64 / n as f64),
    })
}
