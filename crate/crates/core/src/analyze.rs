//! Representation-level positional diagnostics.
//!
//! * evidence moving: relocate an evidence span to ten evenly spaced slots
//!   and track query/document cosine per slot;
//! * segment profile: cosine between a full document and each of its tenths;
//! * mirror reversal: front/back gap between original and fifth-reversed
//!   corpora.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clients::{ClientError, EmbeddingClient, EmbeddingVector};
use crate::corpus::{char_slice, segment, CorpusError, Document, Span, Stratum};
use crate::parallel::ordered_map;

pub const SLOTS: usize = 10;

#[derive(Debug, Error)]
pub enum AnalyzeError {
    #[error("vector dimensions differ: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("cosine undefined for a zero-norm vector")]
    ZeroNorm,
    #[error("slot {0} outside 1..=10")]
    BadSlot(usize),
    #[error("expected {expected} values, got {got}")]
    WrongLength { expected: usize, got: usize },
    #[error("no input pairs")]
    Empty,
    #[error("stratum {0} has no queries")]
    EmptyStratum(&'static str),
    #[error("query {0:?} has no score in the {1} run")]
    MissingQuery(String, &'static str),
    #[error("embedding service returned {got} vectors for {expected} texts")]
    VectorCount { expected: usize, got: usize },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Client(#[from] ClientError),
}

pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64, AnalyzeError> {
    if u.len() != v.len() {
        return Err(AnalyzeError::DimensionMismatch {
            left: u.len(),
            right: v.len(),
        });
    }
    let (mut dot, mut nu, mut nv) = (0.0, 0.0, 0.0);
    for (a, b) in u.iter().zip(v) {
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu == 0.0 || nv == 0.0 {
        return Err(AnalyzeError::ZeroNorm);
    }
    Ok((dot / (nu.sqrt() * nv.sqrt())).clamp(-1.0, 1.0))
}

/// Neumaier-compensated running sum.
#[derive(Clone, Copy, Debug, Default)]
struct Accumulator {
    sum: f64,
    comp: f64,
    n: usize,
}

impl Accumulator {
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
        self.n += 1;
    }

    fn mean(&self) -> f64 {
        (self.sum + self.comp) / self.n as f64
    }
}

/// Character offset at which slot `slot` (1-based) inserts into a remainder
/// of `remainder_len` characters: `round((slot-1)/9 * remainder_len)`, with
/// halves rounded up.
pub fn insertion_offset(slot: usize, remainder_len: usize) -> Result<usize, AnalyzeError> {
    if !(1..=SLOTS).contains(&slot) {
        return Err(AnalyzeError::BadSlot(slot));
    }
    let denom = (SLOTS - 1) * 2;
    Ok(((slot - 1) * remainder_len * 2 + (SLOTS - 1)) / denom)
}

/// Removes `evidence` from `doc` and reinserts it at `slot`. With a
/// non-empty `joiner`, it separates the evidence from any adjacent text.
pub fn move_evidence(doc: &Document, evidence: Span, slot: usize, joiner: &str) -> Result<Document, AnalyzeError> {
    let ev = char_slice(&doc.text, evidence)?;
    let before = char_slice(&doc.text, Span::new(0, evidence.start))?;
    let after = char_slice(&doc.text, Span::new(evidence.end, doc.char_len))?;
    let remainder_len = doc.char_len - evidence.len();
    let at = insertion_offset(slot, remainder_len)?;
    let remainder = format!("{before}{after}");
    let split = crate::corpus::char_to_byte(&remainder, at).expect("offset within remainder");
    let (left, right) = remainder.split_at(split);
    let mut text = String::with_capacity(doc.text.len() + 2 * joiner.len());
    text.push_str(left);
    if !left.is_empty() {
        text.push_str(joiner);
    }
    text.push_str(ev);
    if !right.is_empty() {
        text.push_str(joiner);
    }
    text.push_str(right);
    Ok(Document::new(doc.doc_id.clone(), text))
}

/// One (query, document, evidence span) analysis input.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvidenceTriple {
    #[serde(default)]
    pub id: Option<String>,
    pub query: String,
    pub text: String,
    pub evidence: Span,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvidenceMoveResult {
    pub slot_means: Vec<f64>,
    pub peak_slot: usize,
    pub lowest_slot: usize,
    pub range_x1000: f64,
    pub pairs: usize,
}

/// Earliest index of the max and min of `values`.
fn arg_extremes(values: &[f64]) -> (usize, usize) {
    let (mut hi, mut lo) = (0, 0);
    for (i, v) in values.iter().enumerate() {
        if *v > values[hi] {
            hi = i;
        }
        if *v < values[lo] {
            lo = i;
        }
    }
    (hi, lo)
}

impl EvidenceMoveResult {
    /// Builds the summary from ten per-slot means.
    pub fn from_slot_means(slot_means: Vec<f64>, pairs: usize) -> Result<Self, AnalyzeError> {
        if slot_means.len() != SLOTS {
            return Err(AnalyzeError::WrongLength {
                expected: SLOTS,
                got: slot_means.len(),
            });
        }
        let (hi, lo) = arg_extremes(&slot_means);
        Ok(Self {
            range_x1000: (slot_means[hi] - slot_means[lo]) * 1000.0,
            peak_slot: hi + 1,
            lowest_slot: lo + 1,
            slot_means,
            pairs,
        })
    }

    /// Comma-separated `slot,mean_cosine` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("slot,mean_cosine\n");
        for (i, m) in self.slot_means.iter().enumerate() {
            let _ = writeln!(out, "{},{m:.6}", i + 1);
        }
        out
    }
}

fn embed_exact(embed: &dyn EmbeddingClient, texts: &[String]) -> Result<Vec<EmbeddingVector>, AnalyzeError> {
    let vectors = embed.embed(texts)?;
    if vectors.len() != texts.len() {
        return Err(AnalyzeError::VectorCount {
            expected: texts.len(),
            got: vectors.len(),
        });
    }
    Ok(vectors)
}

/// Slot-wise cosines for one triple.
pub fn evidence_move_cosines(
    triple: &EvidenceTriple,
    embed: &dyn EmbeddingClient,
    joiner: &str,
) -> Result<Vec<f64>, AnalyzeError> {
    let doc = Document::new(triple.id.clone().unwrap_or_default(), triple.text.clone());
    let mut texts = vec![triple.query.clone()];
    for slot in 1..=SLOTS {
        texts.push(move_evidence(&doc, triple.evidence, slot, joiner)?.text);
    }
    let vectors = embed_exact(embed, &texts)?;
    vectors[1..]
        .iter()
        .map(|d| cosine(vectors[0].values(), d.values()))
        .collect()
}

pub fn evidence_moving_analysis(
    triples: &[EvidenceTriple],
    embed: &dyn EmbeddingClient,
    joiner: &str,
    workers: usize,
) -> Result<EvidenceMoveResult, AnalyzeError> {
    if triples.is_empty() {
        return Err(AnalyzeError::Empty);
    }
    let per_pair = ordered_map(triples, workers, |t| evidence_move_cosines(t, embed, joiner));
    let mut acc = [Accumulator::default(); SLOTS];
    for cosines in per_pair {
        for (a, c) in acc.iter_mut().zip(cosines?) {
            a.add(c);
        }
    }
    EvidenceMoveResult::from_slot_means(acc.iter().map(Accumulator::mean).collect(), triples.len())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentProfile {
    pub segment_means: Vec<f64>,
    pub range: f64,
    /// Range over segments 1 to 9, leaving out the final segment.
    pub range_first9: f64,
    pub docs: usize,
}

impl SegmentProfile {
    pub fn from_means(segment_means: Vec<f64>, docs: usize) -> Result<Self, AnalyzeError> {
        if segment_means.len() != SLOTS {
            return Err(AnalyzeError::WrongLength {
                expected: SLOTS,
                got: segment_means.len(),
            });
        }
        let spread = |xs: &[f64]| {
            let (hi, lo) = arg_extremes(xs);
            xs[hi] - xs[lo]
        };
        Ok(Self {
            range: spread(&segment_means),
            range_first9: spread(&segment_means[..SLOTS - 1]),
            segment_means,
            docs,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("segment,mean_cosine\n");
        for (i, m) in self.segment_means.iter().enumerate() {
            let _ = writeln!(out, "{},{m:.6}", i + 1);
        }
        out
    }
}

/// Cosines between a document and each of its tenths.
pub fn segment_cosines(doc: &Document, embed: &dyn EmbeddingClient) -> Result<Vec<f64>, AnalyzeError> {
    let seg = segment(doc, SLOTS)?;
    let mut texts = vec![doc.text.clone()];
    texts.extend(seg.texts(doc)?.into_iter().map(str::to_string));
    let vectors = embed_exact(embed, &texts)?;
    vectors[1..]
        .iter()
        .map(|s| cosine(vectors[0].values(), s.values()))
        .collect()
}

pub fn segment_profile(
    docs: &[Document],
    embed: &dyn EmbeddingClient,
    workers: usize,
) -> Result<SegmentProfile, AnalyzeError> {
    if docs.is_empty() {
        return Err(AnalyzeError::Empty);
    }
    let mut acc = [Accumulator::default(); SLOTS];
    for cosines in ordered_map(docs, workers, |d| segment_cosines(d, embed)) {
        for (a, c) in acc.iter_mut().zip(cosines?) {
            a.add(c);
        }
    }
    SegmentProfile::from_means(acc.iter().map(Accumulator::mean).collect(), docs.len())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReversalResult {
    pub orig_front: f64,
    pub rev_f_to_b: f64,
    pub orig_back: f64,
    pub rev_b_to_f: f64,
    pub delta_rev: f64,
    pub front_queries: usize,
    pub back_queries: usize,
}

impl ReversalResult {
    pub fn from_means(orig_front: f64, rev_f_to_b: f64, orig_back: f64, rev_b_to_f: f64) -> Self {
        Self {
            orig_front,
            rev_f_to_b,
            orig_back,
            rev_b_to_f,
            delta_rev: rev_b_to_f - rev_f_to_b,
            front_queries: 0,
            back_queries: 0,
        }
    }
}

/// Front- and back-origin means of per-query scores on the original and
/// reversed corpora. Mid-origin queries are ignored.
pub fn reversal_analysis(
    orig: &BTreeMap<String, f64>,
    rev: &BTreeMap<String, f64>,
    strata: &BTreeMap<String, Stratum>,
) -> Result<ReversalResult, AnalyzeError> {
    let mut acc: BTreeMap<(Stratum, bool), Accumulator> = BTreeMap::new();
    for (qid, stratum) in strata {
        if *stratum == Stratum::Mid {
            continue;
        }
        let o = orig
            .get(qid)
            .ok_or_else(|| AnalyzeError::MissingQuery(qid.clone(), "original"))?;
        let r = rev
            .get(qid)
            .ok_or_else(|| AnalyzeError::MissingQuery(qid.clone(), "reversed"))?;
        acc.entry((*stratum, false)).or_default().add(*o);
        acc.entry((*stratum, true)).or_default().add(*r);
    }
    let mean = |s: Stratum, reversed: bool, name: &'static str| {
        acc.get(&(s, reversed))
            .map(|a| (a.mean(), a.n))
            .ok_or(AnalyzeError::EmptyStratum(name))
    };
    let (orig_front, front_queries) = mean(Stratum::Front, false, "front")?;
    let (rev_f_to_b, _) = mean(Stratum::Front, true, "front")?;
    let (orig_back, back_queries) = mean(Stratum::Back, false, "back")?;
    let (rev_b_to_f, _) = mean(Stratum::Back, true, "back")?;
    Ok(ReversalResult {
        front_queries,
        back_queries,
        ..ReversalResult::from_means(orig_front, rev_f_to_b, orig_back, rev_b_to_f)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mock::MockEmbedder;
    use proptest::prelude::*;

    #[test]
    fn cosine_basics() {
        assert_eq!(cosine(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!(matches!(cosine(&[0.0, 0.0], &[1.0, 0.0]), Err(AnalyzeError::ZeroNorm)));
        assert!(matches!(
            cosine(&[1.0], &[1.0, 0.0]),
            Err(AnalyzeError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn cosine_matches_extended_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let u: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let v: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
            // Oracle: sums of exact products collected in sorted order.
            let sorted_sum = |mut xs: Vec<f64>| {
                xs.sort_by(|a, b| a.abs().total_cmp(&b.abs()));
                xs.iter().sum::<f64>()
            };
            let dot = sorted_sum(u.iter().zip(&v).map(|(a, b)| a * b).collect());
            let nu = sorted_sum(u.iter().map(|a| a * a).collect()).sqrt();
            let nv = sorted_sum(v.iter().map(|a| a * a).collect()).sqrt();
            assert!((cosine(&u, &v).unwrap() - dot / (nu * nv)).abs() < 1e-9);
        }
    }

    #[test]
    fn insertion_offsets() {
        assert_eq!(insertion_offset(1, 90).unwrap(), 0);
        assert_eq!(insertion_offset(10, 90).unwrap(), 90);
        assert_eq!(insertion_offset(5, 90).unwrap(), 40);
        assert_eq!(insertion_offset(5, 10).unwrap(), 4);
        assert_eq!(insertion_offset(2, 9).unwrap(), 1);
        assert!(insertion_offset(0, 9).is_err());
        assert!(insertion_offset(11, 9).is_err());
        for slot in 1..=10 {
            for rem in 0..200usize {
                let oracle = ((slot - 1) as f64 / 9.0 * rem as f64).round() as usize;
                // Skip exact halves, where f64 error could tip the oracle.
                let exact2 = (slot - 1) * rem * 2;
                if exact2 % 9 != 0 || (exact2 / 9) % 2 == 0 {
                    assert_eq!(insertion_offset(slot, rem).unwrap(), oracle, "slot {slot} rem {rem}");
                }
            }
        }
    }

    #[test]
    fn move_evidence_anchors() {
        let doc = Document::new("d", "aaaaEVbbbb");
        let ev = Span::new(4, 6);
        assert_eq!(move_evidence(&doc, ev, 1, "").unwrap().text, "EVaaaabbbb");
        assert_eq!(move_evidence(&doc, ev, 10, "").unwrap().text, "aaaabbbbEV");
        assert_eq!(move_evidence(&doc, ev, 1, " ").unwrap().text, "EV aaaabbbb");
        assert_eq!(move_evidence(&doc, ev, 5, " ").unwrap().text, "aaaa EV bbbb");
        assert!(move_evidence(&doc, Span::new(8, 12), 1, "").is_err());
    }

    proptest! {
        #[test]
        fn move_preserves_characters(text in "\\PC{1,60}", a in 0usize..60, b in 0usize..60, slot in 1usize..=10) {
            let doc = Document::new("d", text);
            let (s, e) = (a.min(b) % (doc.char_len + 1), a.max(b) % (doc.char_len + 1));
            let (s, e) = (s.min(e), s.max(e));
            let moved = move_evidence(&doc, Span::new(s, e), slot, "").unwrap();
            prop_assert_eq!(moved.char_len, doc.char_len);
            let mut x: Vec<char> = doc.text.chars().collect();
            let mut y: Vec<char> = moved.text.chars().collect();
            x.sort();
            y.sort();
            prop_assert_eq!(x, y);
            let ev: String = doc.text.chars().skip(s).take(e - s).collect();
            if slot == 1 { prop_assert!(moved.text.starts_with(&ev)); }
            if slot == 10 { prop_assert!(moved.text.ends_with(&ev)); }
        }

        #[test]
        fn range_shift_invariant(means in proptest::collection::vec(-0.5f64..0.5, 10), c in -0.4f64..0.4) {
            let a = EvidenceMoveResult::from_slot_means(means.clone(), 1).unwrap();
            let b = EvidenceMoveResult::from_slot_means(means.iter().map(|m| m + c).collect(), 1).unwrap();
            prop_assert!((a.range_x1000 - b.range_x1000).abs() < 1e-9);
            prop_assert!(a.range_x1000 >= 0.0);
        }

        #[test]
        fn extremes_match_scan(means in proptest::collection::vec(-1.0f64..1.0, 10)) {
            let r = EvidenceMoveResult::from_slot_means(means.clone(), 1).unwrap();
            let max = means.iter().cloned().fold(f64::MIN, f64::max);
            let min = means.iter().cloned().fold(f64::MAX, f64::min);
            prop_assert_eq!(r.peak_slot, means.iter().position(|m| *m == max).unwrap() + 1);
            prop_assert_eq!(r.lowest_slot, means.iter().position(|m| *m == min).unwrap() + 1);
            prop_assert_eq!(r.range_x1000, (max - min) * 1000.0);
        }
    }

    #[test]
    fn constant_embedder_gives_zero_range() {
        let constant = |texts: &[String]| -> Result<Vec<EmbeddingVector>, ClientError> {
            Ok(texts.iter().map(|_| EmbeddingVector::new(vec![1.0, 2.0]).unwrap()).collect())
        };
        struct C<F>(F);
        impl<F: Fn(&[String]) -> Result<Vec<EmbeddingVector>, ClientError> + Send + Sync> EmbeddingClient for C<F> {
            fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ClientError> {
                (self.0)(texts)
            }
        }
        let t = EvidenceTriple {
            id: None,
            query: "q".into(),
            text: "some document text here".into(),
            evidence: Span::new(5, 13),
        };
        let r = evidence_moving_analysis(&[t], &C(constant), "", 1).unwrap();
        assert_eq!(r.range_x1000, 0.0);
        assert_eq!(r.peak_slot, 1);
        assert_eq!(r.lowest_slot, 1);

        let doc = Document::new("d", "abcdefghijklmnopqrstuvwxyz");
        let p = segment_profile(&[doc], &C(constant), 1).unwrap();
        assert!(p.segment_means.iter().all(|m| (m - 1.0).abs() < 1e-12));
        assert_eq!(p.range, 0.0);
    }

    #[test]
    fn spike_at_last_segment() {
        let mut means = vec![0.5; 10];
        means[9] = 0.8;
        let p = SegmentProfile::from_means(means, 1).unwrap();
        assert_eq!(p.range_first9, 0.0);
        assert!((p.range - 0.3).abs() < 1e-12);
    }

    #[test]
    fn segment_profile_matches_oracle_average() {
        let e = MockEmbedder::new(3, 32);
        let docs: Vec<Document> = (0..20)
            .map(|i| Document::new(format!("d{i}"), format!("word{i} ").repeat(10 + i) + "tail words end"))
            .collect();
        let p = segment_profile(&docs, &e, 3).unwrap();
        let mut oracle = [0.0f64; 10];
        for d in &docs {
            let full = e.embed_one(&d.text);
            for (j, s) in segment(d, 10).unwrap().texts(d).unwrap().iter().enumerate() {
                oracle[j] += cosine(full.values(), e.embed_one(s).values()).unwrap() / docs.len() as f64;
            }
        }
        for (a, b) in p.segment_means.iter().zip(oracle) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn reversal_toy() {
        let orig: BTreeMap<String, f64> = [("a", 0.5), ("b", 0.3), ("c", 0.2), ("m", 0.9)]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        let rev: BTreeMap<String, f64> = [("a", 0.1), ("b", 0.2), ("c", 0.6), ("m", 0.0)]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        let strata: BTreeMap<String, Stratum> = [
            ("a", Stratum::Front),
            ("b", Stratum::Front),
            ("c", Stratum::Back),
            ("m", Stratum::Mid),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        let r = reversal_analysis(&orig, &rev, &strata).unwrap();
        assert!((r.orig_front - 0.4).abs() < 1e-12);
        assert!((r.rev_f_to_b - 0.15).abs() < 1e-12);
        assert!((r.delta_rev - 0.45).abs() < 1e-12);
        let swapped = reversal_analysis(&rev, &orig, &strata).unwrap();
        assert!((swapped.rev_b_to_f - swapped.rev_f_to_b - (0.2 - 0.4)).abs() < 1e-12);

        let only_front: BTreeMap<String, Stratum> = [("a".to_string(), Stratum::Front)].into_iter().collect();
        assert!(matches!(
            reversal_analysis(&orig, &rev, &only_front),
            Err(AnalyzeError::EmptyStratum("back"))
        ));
    }

    #[test]
    fn delta_antisymmetric() {
        let a = ReversalResult::from_means(0.4, 0.2, 0.3, 0.5);
        let b = ReversalResult::from_means(0.4, 0.5, 0.3, 0.2);
        assert_eq!(a.delta_rev, -b.delta_rev);
    }
}
