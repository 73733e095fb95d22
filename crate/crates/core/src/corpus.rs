//! Document ingestion, character-length binning and positional segmentation.
//!
//! All offsets in this module are counted in Unicode scalar values (Rust
//! `char`s), never bytes. A [`Span`] is a half-open `[start, end)` range of
//! character offsets.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CorpusError {
    #[error("document length {char_len} is outside the binned range [256, 8192)")]
    OutOfRange { char_len: usize },
    #[error("invalid length bin [{lo}, {hi})")]
    InvalidBin { lo: usize, hi: usize },
    #[error("cannot parse length bin label {0:?}")]
    BadBinLabel(String),
    #[error("text of {char_len} characters is too short for {parts} segments")]
    TooShort { char_len: usize, parts: usize },
    #[error("unsupported segment count {0}; expected 3, 5 or 10")]
    UnsupportedGranularity(usize),
    #[error("span [{start}, {end}) lies outside a document of {char_len} characters")]
    SpanOutsideDocument {
        start: usize,
        end: usize,
        char_len: usize,
    },
    #[error("duplicate doc_id {0:?}")]
    DuplicateDocId(String),
    #[error("unknown position {0:?}")]
    UnknownPosition(String),
}

/// Half-open character-count stratum `[lo, hi)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LengthBin {
    lo: usize,
    hi: usize,
}

impl LengthBin {
    /// The five strata used for corpus preparation.
    pub const CANONICAL: [LengthBin; 5] = [
        LengthBin { lo: 256, hi: 512 },
        LengthBin { lo: 512, hi: 1024 },
        LengthBin { lo: 1024, hi: 2048 },
        LengthBin { lo: 2048, hi: 4096 },
        LengthBin { lo: 4096, hi: 8192 },
    ];

    pub fn new(lo: usize, hi: usize) -> Result<Self, CorpusError> {
        if lo >= hi {
            return Err(CorpusError::InvalidBin { lo, hi });
        }
        Ok(Self { lo, hi })
    }

    pub fn lo(&self) -> usize {
        self.lo
    }

    pub fn hi(&self) -> usize {
        self.hi
    }

    pub fn contains(&self, char_len: usize) -> bool {
        self.lo <= char_len && char_len < self.hi
    }

    /// Label of the form `"512-1024"`, used in every serialized artifact.
    pub fn label(&self) -> String {
        format!("{}-{}", self.lo, self.hi)
    }
}

impl fmt::Display for LengthBin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.lo, self.hi)
    }
}

impl FromStr for LengthBin {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || CorpusError::BadBinLabel(s.to_string());
        let (lo, hi) = s.split_once('-').ok_or_else(bad)?;
        let lo = lo.trim().parse().map_err(|_| bad())?;
        let hi = hi.trim().parse().map_err(|_| bad())?;
        LengthBin::new(lo, hi)
    }
}

impl Serialize for LengthBin {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.label())
    }
}

impl<'de> Deserialize<'de> for LengthBin {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Returns the canonical bin containing `char_len`.
pub fn assign_length_bin(char_len: usize) -> Result<LengthBin, CorpusError> {
    LengthBin::CANONICAL
        .iter()
        .copied()
        .find(|bin| bin.contains(char_len))
        .ok_or(CorpusError::OutOfRange { char_len })
}

/// One of the three positional thirds of a document.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Position {
    Begin,
    Middle,
    End,
}

impl Position {
    pub const ALL: [Position; 3] = [Position::Begin, Position::Middle, Position::End];

    pub fn index(self) -> usize {
        match self {
            Position::Begin => 0,
            Position::Middle => 1,
            Position::End => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Position> {
        Position::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Position::Begin => "begin",
            Position::Middle => "middle",
            Position::End => "end",
        }
    }

    /// Word substituted for `{POSITION}` in the generation prompt.
    pub fn prompt_word(self) -> &'static str {
        match self {
            Position::Begin => "beginning",
            Position::Middle => "middle",
            Position::End => "end",
        }
    }

    /// The two positions other than `self`, in canonical order.
    pub fn others(self) -> [Position; 2] {
        match self {
            Position::Begin => [Position::Middle, Position::End],
            Position::Middle => [Position::Begin, Position::End],
            Position::End => [Position::Begin, Position::Middle],
        }
    }
}

impl fmt::Display for Position {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Position {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "begin" | "beginning" | "b" => Ok(Position::Begin),
            "middle" | "mid" | "m" => Ok(Position::Middle),
            "end" | "e" => Ok(Position::End),
            _ => Err(CorpusError::UnknownPosition(s.to_string())),
        }
    }
}

/// Half-open `[start, end)` range of character offsets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Serialize for Span {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        [self.start, self.end].serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Span {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let [start, end] = <[usize; 2]>::deserialize(deserializer)?;
        if start > end {
            return Err(serde::de::Error::custom(format!(
                "span start {start} exceeds end {end}"
            )));
        }
        Ok(Span { start, end })
    }
}

/// Raw corpus unit. `length_bin` is `None` for texts outside the canonical
/// strata (analysis inputs are not required to be binnable).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub text: String,
    pub char_len: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub length_bin: Option<LengthBin>,
}

impl Document {
    pub fn new(doc_id: impl Into<String>, text: impl Into<String>) -> Self {
        let text = text.into();
        let char_len = text.chars().count();
        Self {
            doc_id: doc_id.into(),
            length_bin: assign_length_bin(char_len).ok(),
            char_len,
            text,
        }
    }

    /// Like [`Document::new`] but rejects texts outside the canonical bins.
    pub fn binned(doc_id: impl Into<String>, text: impl Into<String>) -> Result<Self, CorpusError> {
        let doc = Self::new(doc_id, text);
        match doc.length_bin {
            Some(_) => Ok(doc),
            None => Err(CorpusError::OutOfRange {
                char_len: doc.char_len,
            }),
        }
    }

    /// Text covered by a character span.
    pub fn slice(&self, span: Span) -> Result<&str, CorpusError> {
        char_slice(&self.text, span)
    }
}

/// Returns the substring covering the character span `span`.
pub fn char_slice(text: &str, span: Span) -> Result<&str, CorpusError> {
    let outside = || CorpusError::SpanOutsideDocument {
        start: span.start,
        end: span.end,
        char_len: text.chars().count(),
    };
    if span.start > span.end {
        return Err(outside());
    }
    let start = char_to_byte(text, span.start).ok_or_else(outside)?;
    let end = char_to_byte(text, span.end).ok_or_else(outside)?;
    Ok(&text[start..end])
}

/// Byte offset of character index `idx`; `idx == char count` maps to `text.len()`.
pub fn char_to_byte(text: &str, idx: usize) -> Option<usize> {
    if idx == 0 {
        return Some(0);
    }
    let mut count = 0;
    for (byte, _) in text.char_indices() {
        if count == idx {
            return Some(byte);
        }
        count += 1;
    }
    (count == idx).then_some(text.len())
}

/// Ordered partition of a document into `granularity` near-equal spans.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segmentation {
    pub doc_id: String,
    pub granularity: usize,
    pub parts: Vec<Span>,
}

impl Segmentation {
    pub fn texts<'a>(&self, doc: &'a Document) -> Result<Vec<&'a str>, CorpusError> {
        self.parts.iter().map(|span| doc.slice(*span)).collect()
    }

    /// Index of the part containing character offset `offset`.
    pub fn part_of(&self, offset: usize) -> Option<usize> {
        self.parts
            .iter()
            .position(|span| span.start <= offset && offset < span.end)
    }
}

/// Splits `char_len` characters into `parts` contiguous spans whose lengths
/// differ by at most one, longer spans first.
pub fn split_spans(char_len: usize, parts: usize) -> Result<Vec<Span>, CorpusError> {
    if parts == 0 || char_len < parts {
        return Err(CorpusError::TooShort { char_len, parts });
    }
    let base = char_len / parts;
    let extra = char_len % parts;
    let mut spans = Vec::with_capacity(parts);
    let mut start = 0;
    for i in 0..parts {
        let len = base + usize::from(i < extra);
        spans.push(Span::new(start, start + len));
        start += len;
    }
    Ok(spans)
}

/// Segments a document into `k` ∈ {3, 5, 10} equal-length parts.
pub fn segment(doc: &Document, k: usize) -> Result<Segmentation, CorpusError> {
    if !matches!(k, 3 | 5 | 10) {
        return Err(CorpusError::UnsupportedGranularity(k));
    }
    Ok(Segmentation {
        doc_id: doc.doc_id.clone(),
        granularity: k,
        parts: split_spans(doc.char_len, k)?,
    })
}

/// Begin/middle/end thirds of a document as text slices.
pub fn thirds(doc: &Document) -> Result<[&str; 3], CorpusError> {
    let seg = segment(doc, 3)?;
    let texts = seg.texts(doc)?;
    Ok([texts[0], texts[1], texts[2]])
}

/// Reorders the five fifths of a document from 1,2,3,4,5 to 5,4,3,2,1.
pub fn mirror_reverse(doc: &Document) -> Result<Document, CorpusError> {
    let seg = segment(doc, 5)?;
    let parts = seg.texts(doc)?;
    let text: String = parts.iter().rev().copied().collect();
    Ok(Document::new(doc.doc_id.clone(), text))
}

/// Where a query's evidence originally sits, in fifths.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stratum {
    Front,
    Mid,
    Back,
}

/// Classifies an evidence span by the fifth containing its midpoint:
/// fifths 1-2 are front, 3 is mid, 4-5 are back. A midpoint exactly on a
/// boundary belongs to the later fifth.
pub fn evidence_origin_stratum(evidence: Span, seg5: &Segmentation) -> Result<Stratum, CorpusError> {
    let char_len = seg5.parts.last().map_or(0, |s| s.end);
    let outside = CorpusError::SpanOutsideDocument {
        start: evidence.start,
        end: evidence.end,
        char_len,
    };
    if seg5.granularity != 5 || seg5.parts.len() != 5 {
        return Err(CorpusError::UnsupportedGranularity(seg5.parts.len()));
    }
    if evidence.start > evidence.end || evidence.end > char_len {
        return Err(outside);
    }
    // Compare in doubled units so a half-character midpoint stays exact.
    let twice_mid = evidence.start + evidence.end;
    let fifth = seg5
        .parts
        .iter()
        .position(|span| 2 * span.start <= twice_mid && twice_mid < 2 * span.end)
        .ok_or(outside)?;
    Ok(match fifth {
        0 | 1 => Stratum::Front,
        2 => Stratum::Mid,
        _ => Stratum::Back,
    })
}

/// Input corpus line.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub doc_id: String,
    pub text: String,
}

/// Output corpus line: the document plus optional segment offsets.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinnedDocument {
    #[serde(flatten)]
    pub doc: Document,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segments: Option<Vec<Span>>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExcludedDocument {
    pub doc_id: String,
    pub char_len: usize,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinStats {
    pub total: usize,
    pub binned: usize,
    pub out_of_range: usize,
    pub per_bin: BTreeMap<LengthBin, usize>,
    pub excluded: Vec<ExcludedDocument>,
}

/// Bins every record, optionally attaching `segments`-way spans. Records
/// outside the canonical strata are excluded and listed in the stats.
pub fn bin_corpus(
    records: impl IntoIterator<Item = CorpusRecord>,
    segments: Option<usize>,
) -> Result<(Vec<BinnedDocument>, BinStats), CorpusError> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    let mut stats = BinStats::default();
    for bin in LengthBin::CANONICAL {
        stats.per_bin.insert(bin, 0);
    }
    for record in records {
        if !seen.insert(record.doc_id.clone()) {
            return Err(CorpusError::DuplicateDocId(record.doc_id));
        }
        stats.total += 1;
        let doc = Document::new(record.doc_id, record.text);
        let Some(bin) = doc.length_bin else {
            stats.out_of_range += 1;
            stats.excluded.push(ExcludedDocument {
                doc_id: doc.doc_id,
                char_len: doc.char_len,
                reason: "out_of_range".to_string(),
            });
            continue;
        };
        *stats.per_bin.entry(bin).or_default() += 1;
        stats.binned += 1;
        let segments = match segments {
            Some(k) => Some(segment(&doc, k)?.parts),
            None => None,
        };
        out.push(BinnedDocument { doc, segments });
    }
    Ok((out, stats))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lens(spans: &[Span]) -> Vec<usize> {
        spans.iter().map(Span::len).collect()
    }

    #[test]
    fn bins_interior_and_boundaries() {
        assert_eq!(assign_length_bin(700).unwrap(), LengthBin::new(512, 1024).unwrap());
        assert_eq!(assign_length_bin(512).unwrap(), LengthBin::new(512, 1024).unwrap());
        assert_eq!(assign_length_bin(256).unwrap(), LengthBin::new(256, 512).unwrap());
        assert_eq!(assign_length_bin(8191).unwrap(), LengthBin::new(4096, 8192).unwrap());
        assert_eq!(
            assign_length_bin(8192),
            Err(CorpusError::OutOfRange { char_len: 8192 })
        );
        assert!(assign_length_bin(255).is_err());
        assert!(assign_length_bin(0).is_err());
    }

    #[test]
    fn bin_label_round_trips() {
        let bin: LengthBin = "1024-2048".parse().unwrap();
        assert_eq!(bin.label(), "1024-2048");
        assert!("2048-1024".parse::<LengthBin>().is_err());
        assert!("nonsense".parse::<LengthBin>().is_err());
        let json = serde_json::to_string(&bin).unwrap();
        assert_eq!(json, "\"1024-2048\"");
    }

    #[test]
    fn segment_examples() {
        let d9 = Document::new("a", "abcdefghi");
        assert_eq!(lens(&segment(&d9, 3).unwrap().parts), vec![3, 3, 3]);
        let d10 = Document::new("a", "abcdefghij");
        assert_eq!(lens(&segment(&d10, 3).unwrap().parts), vec![4, 3, 3]);
        let d17 = Document::new("a", "a".repeat(17));
        assert_eq!(lens(&segment(&d17, 5).unwrap().parts), vec![4, 4, 3, 3, 3]);
    }

    #[test]
    fn segment_rejects_short_and_odd_granularity() {
        let d = Document::new("a", "ab");
        assert_eq!(
            segment(&d, 3),
            Err(CorpusError::TooShort { char_len: 2, parts: 3 })
        );
        assert_eq!(segment(&d, 4), Err(CorpusError::UnsupportedGranularity(4)));
    }

    #[test]
    fn segments_are_character_based() {
        let d = Document::new("u", "ééé漢字漢🙂🙂🙂");
        let seg = segment(&d, 3).unwrap();
        assert_eq!(seg.texts(&d).unwrap(), vec!["ééé", "漢字漢", "🙂🙂🙂"]);
    }

    #[test]
    fn mirror_examples() {
        let d = Document::new("m", "aabbccddee");
        let r = mirror_reverse(&d).unwrap();
        assert_eq!(r.text, "eeddccbbaa");
        assert_eq!(mirror_reverse(&r).unwrap().text, d.text);

        let d11 = Document::new("m", "abcdefghijk");
        // fifths: abc|de|fg|hi|jk
        assert_eq!(mirror_reverse(&d11).unwrap().text, "jkhifgdeabc");
        assert!(mirror_reverse(&Document::new("m", "abcd")).is_err());
    }

    #[test]
    fn stratum_by_midpoint() {
        let d = Document::new("s", "a".repeat(100));
        let seg5 = segment(&d, 5).unwrap();
        assert_eq!(evidence_origin_stratum(Span::new(2, 8), &seg5), Ok(Stratum::Front));
        assert_eq!(evidence_origin_stratum(Span::new(30, 40), &seg5), Ok(Stratum::Front));
        assert_eq!(evidence_origin_stratum(Span::new(45, 55), &seg5), Ok(Stratum::Mid));
        assert_eq!(evidence_origin_stratum(Span::new(90, 100), &seg5), Ok(Stratum::Back));
        // Midpoint 40 is the start of the third fifth.
        assert_eq!(evidence_origin_stratum(Span::new(35, 45), &seg5), Ok(Stratum::Mid));
        assert!(evidence_origin_stratum(Span::new(90, 101), &seg5).is_err());
        assert!(evidence_origin_stratum(Span::new(100, 100), &seg5).is_err());
    }

    #[test]
    fn binning_records_out_of_range() {
        let records = vec![
            CorpusRecord { doc_id: "short".into(), text: "x".repeat(10) },
            CorpusRecord { doc_id: "ok".into(), text: "x".repeat(300) },
            CorpusRecord { doc_id: "long".into(), text: "x".repeat(9000) },
        ];
        let (docs, stats) = bin_corpus(records, Some(3)).unwrap();
        assert_eq!(docs.len(), 1);
        assert_eq!(stats.out_of_range, 2);
        assert_eq!(stats.per_bin[&LengthBin::new(256, 512).unwrap()], 1);
        assert_eq!(docs[0].segments.as_ref().unwrap().len(), 3);
    }

    #[test]
    fn duplicate_doc_ids_rejected() {
        let records = vec![
            CorpusRecord { doc_id: "d".into(), text: "x".repeat(300) },
            CorpusRecord { doc_id: "d".into(), text: "y".repeat(300) },
        ];
        assert!(matches!(bin_corpus(records, None), Err(CorpusError::DuplicateDocId(_))));
    }

    #[test]
    fn char_to_byte_handles_end() {
        assert_eq!(char_to_byte("aé", 2), Some(3));
        assert_eq!(char_to_byte("aé", 3), None);
        assert_eq!(char_to_byte("", 0), Some(0));
    }
}
