//! Multi-reranker position verification and the segment-wise audit.
//!
//! Every reranker scores the query against all three thirds of its source
//! document. The consensus margin is the smallest, over rerankers, of the
//! target score minus the best non-target score; a candidate is kept when
//! that margin reaches the threshold.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::clients::{ChatClient, ChatMessage, ClientError, RerankClient};
use crate::corpus::{thirds, CorpusError, Document, LengthBin, Position};
use crate::parallel::ordered_map;
use crate::prompts::PromptTemplate;
use crate::querygen::{extract_json_object, ParseFailure, QueryCandidate};

/// Thresholds of the cumulative funnel report.
pub const FUNNEL_THRESHOLDS: [f64; 4] = [0.0, 0.1, 0.2, 0.3];
pub const DEFAULT_DELTA: f64 = 0.3;

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("reranker {reranker} has no score for {position}")]
    MissingPosition { reranker: String, position: Position },
    #[error("reranker {reranker} returned a non-finite score")]
    NonFinite { reranker: String },
    #[error("no rerankers configured")]
    NoRerankers,
    #[error("reranker {reranker} returned {got} scores for 3 segments")]
    ScoreCount { reranker: String, got: usize },
    #[error("threshold must be finite and non-negative, got {0}")]
    BadThreshold(f64),
    #[error("no document {doc_id:?} for candidate {candidate_id:?}")]
    MissingDocument { doc_id: String, candidate_id: String },
    #[error("audit needs at least one judged candidate")]
    EmptyAudit,
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Client(#[from] ClientError),
}

/// One reranker's scores for the three segments of a document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RerankerScores {
    pub reranker_id: String,
    pub scores: BTreeMap<Position, f64>,
}

impl RerankerScores {
    pub fn new(reranker_id: impl Into<String>, begin: f64, middle: f64, end: f64) -> Self {
        Self {
            reranker_id: reranker_id.into(),
            scores: Position::ALL.into_iter().zip([begin, middle, end]).collect(),
        }
    }

    fn get(&self, position: Position) -> Result<f64, VerifyError> {
        let s = *self
            .scores
            .get(&position)
            .ok_or_else(|| VerifyError::MissingPosition {
                reranker: self.reranker_id.clone(),
                position,
            })?;
        if !s.is_finite() {
            return Err(VerifyError::NonFinite {
                reranker: self.reranker_id.clone(),
            });
        }
        Ok(s)
    }

    /// Target score minus the larger non-target score.
    pub fn margin(&self, target: Position) -> Result<f64, VerifyError> {
        let [u, v] = target.others();
        Ok(self.get(target)? - self.get(u)?.max(self.get(v)?))
    }
}

pub fn consensus_margin(per_reranker: &[RerankerScores], target: Position) -> Result<f64, VerifyError> {
    let mut min = f64::INFINITY;
    for r in per_reranker {
        min = min.min(r.margin(target)?);
    }
    if per_reranker.is_empty() {
        return Err(VerifyError::NoRerankers);
    }
    Ok(min)
}

fn check_delta(delta: f64) -> Result<(), VerifyError> {
    if delta.is_finite() && delta >= 0.0 {
        Ok(())
    } else {
        Err(VerifyError::BadThreshold(delta))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsensusVerdict {
    pub candidate: QueryCandidate,
    pub per_reranker: Vec<RerankerScores>,
    pub consensus_margin: f64,
    pub retained: bool,
    pub threshold: f64,
}

impl ConsensusVerdict {
    pub fn new(candidate: QueryCandidate, per_reranker: Vec<RerankerScores>, delta: f64) -> Result<Self, VerifyError> {
        check_delta(delta)?;
        let m = consensus_margin(&per_reranker, candidate.target_position)?;
        Ok(Self {
            candidate,
            per_reranker,
            consensus_margin: m,
            retained: m >= delta,
            threshold: delta,
        })
    }
}

/// Scores one candidate's query against the thirds of `doc` with every
/// reranker.
pub fn score_candidate(
    candidate: &QueryCandidate,
    doc: &Document,
    rerankers: &[&dyn RerankClient],
) -> Result<Vec<RerankerScores>, VerifyError> {
    if rerankers.is_empty() {
        return Err(VerifyError::NoRerankers);
    }
    let passages: Vec<String> = thirds(doc)?.iter().map(|s| s.to_string()).collect();
    rerankers
        .iter()
        .map(|r| {
            let scores = r.rerank(&candidate.query, &passages)?;
            if scores.len() != 3 {
                return Err(VerifyError::ScoreCount {
                    reranker: r.id().to_string(),
                    got: scores.len(),
                });
            }
            Ok(RerankerScores::new(r.id(), scores[0], scores[1], scores[2]))
        })
        .collect()
}

/// Scores and judges every candidate, preserving input order.
pub fn verify_candidates(
    candidates: &[QueryCandidate],
    docs: &HashMap<String, Document>,
    rerankers: &[&dyn RerankClient],
    delta: f64,
    workers: usize,
) -> Result<Vec<ConsensusVerdict>, VerifyError> {
    check_delta(delta)?;
    ordered_map(candidates, workers, |c| {
        let doc = docs.get(&c.doc_id).ok_or_else(|| VerifyError::MissingDocument {
            doc_id: c.doc_id.clone(),
            candidate_id: c.candidate_id.clone(),
        })?;
        ConsensusVerdict::new(c.clone(), score_candidate(c, doc, rerankers)?, delta)
    })
    .into_iter()
    .collect()
}

/// Retained count for one threshold, split by position and by
/// (length bin, position) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRow {
    pub delta: f64,
    pub retained: usize,
    pub pct_of_generated: f64,
    pub per_position: BTreeMap<Position, usize>,
    pub cells: BTreeMap<String, BTreeMap<Position, usize>>,
}

impl ThresholdRow {
    pub fn position_share(&self, p: Position) -> f64 {
        if self.retained == 0 {
            return 0.0;
        }
        100.0 * self.per_position.get(&p).copied().unwrap_or(0) as f64 / self.retained as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FunnelStats {
    pub generated: usize,
    pub failed_top_rank: usize,
    pub thresholds: Vec<ThresholdRow>,
}

fn pct(n: usize, d: usize) -> f64 {
    if d == 0 {
        0.0
    } else {
        100.0 * n as f64 / d as f64
    }
}

/// Funnel statistics over (margin, target, length bin) triples.
pub fn funnel_stats<'a>(
    items: impl IntoIterator<Item = (f64, Position, Option<&'a LengthBin>)>,
    thresholds: &[f64],
) -> FunnelStats {
    let items: Vec<_> = items.into_iter().collect();
    let generated = items.len();
    let failed_top_rank = items.iter().filter(|(m, _, _)| *m < 0.0).count();
    let thresholds = thresholds
        .iter()
        .map(|&delta| {
            let mut per_position: BTreeMap<Position, usize> = Position::ALL.into_iter().map(|p| (p, 0)).collect();
            let mut cells: BTreeMap<String, BTreeMap<Position, usize>> = BTreeMap::new();
            let mut retained = 0;
            for (m, p, bin) in &items {
                if *m >= delta {
                    retained += 1;
                    *per_position.entry(*p).or_default() += 1;
                    let label = bin.map(LengthBin::label).unwrap_or_else(|| "unbinned".into());
                    *cells.entry(label).or_default().entry(*p).or_default() += 1;
                }
            }
            ThresholdRow {
                delta,
                retained,
                pct_of_generated: pct(retained, generated),
                per_position,
                cells,
            }
        })
        .collect();
    FunnelStats {
        generated,
        failed_top_rank,
        thresholds,
    }
}

pub fn verdict_funnel(verdicts: &[ConsensusVerdict], thresholds: &[f64]) -> FunnelStats {
    funnel_stats(
        verdicts.iter().map(|v| {
            (
                v.consensus_margin,
                v.candidate.target_position,
                v.candidate.length_bin.as_ref(),
            )
        }),
        thresholds,
    )
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Partition {
    pub retained: Vec<ConsensusVerdict>,
    pub rejected: Vec<ConsensusVerdict>,
}

/// Re-applies the retention rule at `delta`, keeping input order within
/// each side, and reports the funnel at that threshold.
pub fn apply_retention(verdicts: Vec<ConsensusVerdict>, delta: f64) -> Result<(Partition, FunnelStats), VerifyError> {
    check_delta(delta)?;
    let stats = verdict_funnel(&verdicts, &[delta]);
    let mut part = Partition::default();
    for mut v in verdicts {
        v.threshold = delta;
        v.retained = v.consensus_margin >= delta;
        if v.retained {
            part.retained.push(v);
        } else {
            part.rejected.push(v);
        }
    }
    Ok((part, stats))
}

/// Aligned-column table: all generated, failed top-rank, then one row per
/// threshold with per-position counts and shares.
pub fn render_funnel_text(stats: &FunnelStats) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<18} {:>12} {:>8}  {:>20} {:>20} {:>20}",
        "stage", "count", "% gen", "begin (share)", "middle (share)", "end (share)"
    );
    let _ = writeln!(out, "{:<18} {:>12} {:>8.2}", "all generated", stats.generated, pct(stats.generated, stats.generated));
    let _ = writeln!(
        out,
        "{:<18} {:>12} {:>8.2}",
        "failed top-rank",
        stats.failed_top_rank,
        pct(stats.failed_top_rank, stats.generated)
    );
    for row in &stats.thresholds {
        let cell = |p: Position| format!("{} ({:.2})", row.per_position.get(&p).copied().unwrap_or(0), row.position_share(p));
        let _ = writeln!(
            out,
            "{:<18} {:>12} {:>8.2}  {:>20} {:>20} {:>20}",
            format!("m_cons >= {:.1}", row.delta),
            row.retained,
            row.pct_of_generated,
            cell(Position::Begin),
            cell(Position::Middle),
            cell(Position::End)
        );
    }
    out
}

/// Binary audit judgments for one candidate, 1 meaning "contains the
/// answer".
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditJudgments {
    pub candidate_id: String,
    pub target: Position,
    pub judgments: BTreeMap<Position, u8>,
}

impl AuditJudgments {
    pub fn new(candidate_id: impl Into<String>, target: Position, begin: u8, middle: u8, end: u8) -> Self {
        Self {
            candidate_id: candidate_id.into(),
            target,
            judgments: Position::ALL.into_iter().zip([begin, middle, end]).collect(),
        }
    }

    fn j(&self, p: Position) -> u8 {
        self.judgments.get(&p).copied().unwrap_or(0).min(1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditMetrics {
    pub n: usize,
    pub target_yes: f64,
    pub distractor_no: f64,
    pub exclusive: f64,
    pub target_yes_count: usize,
    pub distractor_no_count: usize,
    pub exclusive_count: usize,
}

pub fn audit_metrics(all: &[AuditJudgments]) -> Result<AuditMetrics, VerifyError> {
    if all.is_empty() {
        return Err(VerifyError::EmptyAudit);
    }
    let (mut ty, mut dn, mut ex) = (0, 0, 0);
    for a in all {
        let t = a.j(a.target);
        let nos = a.target.others().iter().filter(|&&u| a.j(u) == 0).count();
        ty += usize::from(t);
        dn += nos;
        if t == 1 && nos == 2 {
            ex += 1;
        }
    }
    let n = all.len();
    Ok(AuditMetrics {
        n,
        target_yes: ty as f64 / n as f64,
        distractor_no: dn as f64 / (2 * n) as f64,
        exclusive: ex as f64 / n as f64,
        target_yes_count: ty,
        distractor_no_count: dn,
        exclusive_count: ex,
    })
}

/// Audit metrics for disjoint margin strata `[edges[i], edges[i+1])`, the
/// last stratum unbounded above. Empty strata are omitted.
pub fn audit_by_margin(
    judged: &[(AuditJudgments, f64)],
    edges: &[f64],
) -> Vec<(String, AuditMetrics)> {
    let mut out = Vec::new();
    for (i, lo) in edges.iter().enumerate() {
        let hi = edges.get(i + 1).copied().unwrap_or(f64::INFINITY);
        let members: Vec<AuditJudgments> = judged
            .iter()
            .filter(|(_, m)| *m >= *lo && *m < hi)
            .map(|(a, _)| a.clone())
            .collect();
        if let Ok(m) = audit_metrics(&members) {
            let label = if hi.is_infinite() {
                format!("[{lo},inf)")
            } else {
                format!("[{lo},{hi})")
            };
            out.push((label, m));
        }
    }
    out
}

/// The audit prompt for one (query, segment) pair. The target position is
/// not part of the template.
pub fn render_audit_prompt(template: &PromptTemplate, query: &str, segment_text: &str) -> Vec<ChatMessage> {
    template.render(&[("question", query), ("segment_text", segment_text)])
}

pub fn parse_audit_reply(reply: &str) -> Result<bool, ParseFailure> {
    let raw = extract_json_object(reply).ok_or(ParseFailure::NoJson)?;
    let value: Value = serde_json::from_str(raw).map_err(|e| ParseFailure::InvalidJson { message: e.to_string() })?;
    let answer = value
        .get("answer")
        .and_then(Value::as_str)
        .ok_or_else(|| ParseFailure::MissingField { field: "answer".into() })?;
    match answer.trim().to_ascii_lowercase().as_str() {
        "yes" => Ok(true),
        "no" => Ok(false),
        other => Err(ParseFailure::InvalidValue {
            field: "answer".into(),
            value: other.into(),
        }),
    }
}

/// Audit result for one candidate: judgments, or the first position whose
/// reply could not be parsed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum AuditOutcome {
    Judged {
        #[serde(flatten)]
        judgments: AuditJudgments,
        consensus_margin: Option<f64>,
    },
    ParseFailure {
        candidate_id: String,
        position: Position,
        failure: ParseFailure,
    },
}

pub fn audit_candidate(
    candidate: &QueryCandidate,
    doc: &Document,
    chat: &dyn ChatClient,
    template: &PromptTemplate,
    consensus_margin: Option<f64>,
) -> Result<AuditOutcome, VerifyError> {
    let segments = thirds(doc)?;
    let mut judgments = BTreeMap::new();
    for p in Position::ALL {
        let reply = chat.chat(&render_audit_prompt(template, &candidate.query, segments[p.index()]))?;
        match parse_audit_reply(&reply) {
            Ok(yes) => {
                judgments.insert(p, u8::from(yes));
            }
            Err(failure) => {
                return Ok(AuditOutcome::ParseFailure {
                    candidate_id: candidate.candidate_id.clone(),
                    position: p,
                    failure,
                })
            }
        }
    }
    Ok(AuditOutcome::Judged {
        judgments: AuditJudgments {
            candidate_id: candidate.candidate_id.clone(),
            target: candidate.target_position,
            judgments,
        },
        consensus_margin,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mock::MockChat;
    use crate::prompts::PromptSet;
    use crate::querygen::{Difficulty, GenerationConfig, QueryLength};
    use proptest::prelude::*;

    fn cand(id: &str, target: Position) -> QueryCandidate {
        QueryCandidate {
            candidate_id: id.into(),
            doc_id: "d".into(),
            length_bin: None,
            target_position: target,
            query: "q".into(),
            answer: "a".into(),
            reasoning: String::new(),
            config: GenerationConfig {
                character: "c".into(),
                difficulty: Difficulty::Phd,
                query_length: QueryLength::Long,
            },
        }
    }

    #[test]
    fn margin_examples() {
        let one = [RerankerScores::new("r", 0.9, 0.5, 0.4)];
        assert!((consensus_margin(&one, Position::Begin).unwrap() - 0.4).abs() < 1e-12);
        let three = [
            RerankerScores::new("a", 0.9, 0.5, 0.4),
            RerankerScores::new("b", 0.85, 0.5, 0.3),
            RerankerScores::new("c", 0.6, 0.5, 0.2),
        ];
        assert!((consensus_margin(&three, Position::Begin).unwrap() - 0.1).abs() < 1e-12);
        let flat = [RerankerScores::new("r", 0.5, 0.5, 0.5)];
        assert_eq!(consensus_margin(&flat, Position::Middle).unwrap(), 0.0);
        assert!(matches!(consensus_margin(&[], Position::End), Err(VerifyError::NoRerankers)));
        let mut missing = RerankerScores::new("r", 0.1, 0.2, 0.3);
        missing.scores.remove(&Position::End);
        assert!(matches!(
            consensus_margin(&[missing], Position::Begin),
            Err(VerifyError::MissingPosition { .. })
        ));
    }

    fn verdict_with_margin(id: &str, m: f64) -> ConsensusVerdict {
        ConsensusVerdict::new(cand(id, Position::Begin), vec![RerankerScores::new("r", 0.5 + m / 2.0, 0.5 - m / 2.0, 0.0)], 0.0)
            .unwrap()
    }

    #[test]
    fn retention_boundary_inclusive() {
        let vs = vec![verdict_with_margin("a", 0.4), verdict_with_margin("b", 0.31), verdict_with_margin("c", -0.05)];
        let (part, stats) = apply_retention(vs, 0.3).unwrap();
        assert_eq!(part.retained.len(), 2);
        assert_eq!(part.rejected.len(), 1);
        assert_eq!(stats.failed_top_rank, 1);
        // A margin of exactly 0.3 built from representable scores.
        let exact = ConsensusVerdict::new(cand("x", Position::End), vec![RerankerScores::new("r", 0.0, 0.5, 0.8)], 0.3).unwrap();
        assert_eq!(exact.consensus_margin, 0.8 - 0.5);
        assert_eq!(exact.retained, exact.consensus_margin >= 0.3);
        assert!(apply_retention(vec![], -0.1).is_err());
    }

    #[test]
    fn funnel_counts_and_text() {
        let bin = LengthBin::CANONICAL[0];
        let items = [
            (0.5, Position::Begin, Some(&bin)),
            (0.15, Position::Middle, Some(&bin)),
            (-0.2, Position::End, Some(&bin)),
            (0.0, Position::End, None),
        ];
        let stats = funnel_stats(items, &FUNNEL_THRESHOLDS);
        assert_eq!(stats.generated, 4);
        assert_eq!(stats.failed_top_rank, 1);
        let counts: Vec<usize> = stats.thresholds.iter().map(|r| r.retained).collect();
        assert_eq!(counts, vec![3, 2, 1, 1]);
        assert_eq!(stats.thresholds[0].cells["unbinned"][&Position::End], 1);
        let text = render_funnel_text(&stats);
        assert!(text.contains("failed top-rank"));
        assert!(text.contains("m_cons >= 0.3"));
    }

    #[test]
    fn audit_examples() {
        let m = audit_metrics(&[AuditJudgments::new("a", Position::Begin, 1, 0, 0)]).unwrap();
        assert_eq!((m.target_yes, m.distractor_no, m.exclusive), (1.0, 1.0, 1.0));
        let m = audit_metrics(&[AuditJudgments::new("a", Position::Begin, 1, 1, 0)]).unwrap();
        assert_eq!((m.target_yes, m.distractor_no, m.exclusive), (1.0, 0.5, 0.0));
        assert!(audit_metrics(&[]).is_err());
    }

    #[test]
    fn audit_strata_are_disjoint() {
        let judged = vec![
            (AuditJudgments::new("a", Position::Begin, 1, 0, 0), 0.05),
            (AuditJudgments::new("b", Position::Begin, 0, 0, 0), 0.35),
            (AuditJudgments::new("c", Position::Begin, 1, 0, 0), 0.3),
        ];
        let strata = audit_by_margin(&judged, &[0.0, 0.1, 0.2, 0.3]);
        assert_eq!(strata.len(), 2);
        assert_eq!(strata[0].0, "[0,0.1)");
        assert_eq!(strata[1].0, "[0.3,inf)");
        assert_eq!(strata[1].1.n, 2);
        assert_eq!(strata[1].1.exclusive, 0.5);
    }

    #[test]
    fn audit_reply_parsing() {
        assert_eq!(parse_audit_reply(r#"{"reasoning": "x", "answer": "Yes"}"#), Ok(true));
        assert_eq!(parse_audit_reply(r#"{"answer": "no"}"#), Ok(false));
        assert!(parse_audit_reply(r#"{"answer": "maybe"}"#).is_err());
        assert!(parse_audit_reply("yes").is_err());
    }

    #[test]
    fn audit_prompt_hides_target() {
        let set = PromptSet::default();
        let msgs = render_audit_prompt(&set.audit, "Who?", "Some text.");
        let user = &msgs[1].content;
        assert!(user.starts_with("Question: Who?\n\nText:\nSome text.\n\nDoes the text above"));
        for word in ["begin", "middle", "end", "target"] {
            assert!(!user.to_lowercase().contains(word), "{word}");
        }
    }

    #[test]
    fn mock_audit_round_trip() {
        let doc = Document::new("d", "alpha beta gamma delta. epsilon zeta eta theta. iota kappa lambda mu.");
        let mut c = cand("d#end", Position::End);
        c.query = "iota kappa lambda".into();
        let out = audit_candidate(&c, &doc, &MockChat::new(1), &PromptSet::default().audit, Some(0.4)).unwrap();
        match out {
            AuditOutcome::Judged { judgments, .. } => {
                assert_eq!(judgments.judgments.values().copied().collect::<Vec<_>>(), vec![0, 0, 1]);
            }
            other => panic!("{other:?}"),
        }
    }

    proptest! {
        #[test]
        fn raising_nontarget_never_increases_margin(
            s in proptest::collection::vec(0.0f64..1.0, 9),
            bump in 0.0f64..0.5,
            t in 0usize..3, r in 0usize..3, u in 0usize..2,
        ) {
            let target = Position::from_index(t).unwrap();
            let mut rs: Vec<RerankerScores> = s.chunks(3).enumerate()
                .map(|(i, c)| RerankerScores::new(format!("r{i}"), c[0], c[1], c[2])).collect();
            let before = consensus_margin(&rs, target).unwrap();
            let other = target.others()[u];
            *rs[r].scores.get_mut(&other).unwrap() += bump;
            prop_assert!(consensus_margin(&rs, target).unwrap() <= before);
        }

        #[test]
        fn raising_target_of_minimal_reranker_never_decreases(
            s in proptest::collection::vec(0.0f64..1.0, 9),
            bump in 0.0f64..0.5,
            t in 0usize..3,
        ) {
            let target = Position::from_index(t).unwrap();
            let mut rs: Vec<RerankerScores> = s.chunks(3).enumerate()
                .map(|(i, c)| RerankerScores::new(format!("r{i}"), c[0], c[1], c[2])).collect();
            let before = consensus_margin(&rs, target).unwrap();
            let argmin = (0..3).min_by(|&a, &b| rs[a].margin(target).unwrap().total_cmp(&rs[b].margin(target).unwrap())).unwrap();
            *rs[argmin].scores.get_mut(&target).unwrap() += bump;
            prop_assert!(consensus_margin(&rs, target).unwrap() >= before);
        }

        #[test]
        fn exclusive_bounded(js in proptest::collection::vec((0usize..3, 0u8..2, 0u8..2, 0u8..2), 1..50)) {
            let all: Vec<AuditJudgments> = js.iter().enumerate()
                .map(|(i, (t, b, m, e))| AuditJudgments::new(i.to_string(), Position::from_index(*t).unwrap(), *b, *m, *e))
                .collect();
            let m = audit_metrics(&all).unwrap();
            let both_no = all.iter().filter(|a| a.target.others().iter().all(|&u| a.j(u) == 0)).count() as f64 / all.len() as f64;
            prop_assert!(m.exclusive <= m.target_yes.min(both_no) + 1e-15);
        }
    }
}
