//! Verb vocabulary and the conversion of raw annotation votes into label
//! vectors.
//!
//! Three labelling schemes are supported, all indexed over one ordered verb
//! vocabulary:
//!
//! * **SL** — single-verb label, a one-hot vector at the majority-voted verb;
//! * **ML** — multi-verb label, a binary vector marking every verb selected by
//!   at least half of the annotators (threshold configurable);
//! * **SAML** — soft-assigned multi-label, the fraction of annotators that
//!   selected each verb.
//!
//! All operations here are pure; the resulting values are immutable and safe
//! to share across threads.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default threshold for the ML builder: a verb counts when at least half the
/// annotators selected it. The comparison is inclusive.
pub const DEFAULT_ML_THRESHOLD: f64 = 0.5;

/// The ordered verb set over which all label vectors are indexed.
///
/// Index `j` identifies verb `v_j`; the order is significant and preserved
/// from the input file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerbVocabulary {
    verbs: Vec<String>,
}

impl VerbVocabulary {
    /// Build a vocabulary from an ordered list of verbs.
    ///
    /// Verbs must be unique, non-empty, free of whitespace, and there must be
    /// at least two of them.
    pub fn new(verbs: Vec<String>) -> Result<Self> {
        if verbs.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "vocabulary needs at least 2 verbs, got {}",
                verbs.len()
            )));
        }
        let mut seen = BTreeSet::new();
        for verb in &verbs {
            if verb.is_empty() {
                return Err(Error::InvalidInput("empty verb in vocabulary".into()));
            }
            if verb.chars().any(char::is_whitespace) || verb.contains(':') {
                return Err(Error::InvalidInput(format!(
                    "verb '{verb}' contains whitespace or ':'"
                )));
            }
            if !seen.insert(verb.clone()) {
                return Err(Error::InvalidInput(format!(
                    "duplicate verb '{verb}' in vocabulary"
                )));
            }
        }
        Ok(Self { verbs })
    }

    /// Number of verbs, `D`.
    pub fn len(&self) -> usize {
        self.verbs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.verbs.is_empty()
    }

    /// Verb string at index `j`, if in range.
    pub fn verb(&self, j: usize) -> Option<&str> {
        self.verbs.get(j).map(String::as_str)
    }

    /// Index of a verb string, if present.
    pub fn index_of(&self, verb: &str) -> Option<usize> {
        self.verbs.iter().position(|v| v == verb)
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.verbs.iter().map(String::as_str)
    }

    /// Read a vocabulary file: one verb per line, order-significant.
    /// Blank lines and `#` comments are skipped.
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let reader = BufReader::new(File::open(path)?);
        Self::from_reader(reader).map_err(|e| e.with_path(path.display().to_string()))
    }

    pub fn from_reader(reader: impl BufRead) -> Result<Self> {
        let mut verbs = Vec::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            if trimmed.chars().any(char::is_whitespace) {
                return Err(Error::malformed(
                    lineno + 1,
                    format!("expected a single verb, got '{trimmed}'"),
                ));
            }
            verbs.push(trimmed.to_string());
        }
        Self::new(verbs)
    }

    /// Write the vocabulary, one verb per line.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for verb in &self.verbs {
            writeln!(w, "{verb}")?;
        }
        w.flush()?;
        Ok(())
    }

    /// 64-bit FNV-1a digest of the ordered verb list, hex encoded.
    ///
    /// Stored in model files so a model trained against one vocabulary is not
    /// silently applied to another.
    pub fn fingerprint(&self) -> String {
        const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
        const PRIME: u64 = 0x0000_0100_0000_01b3;
        let mut hash = OFFSET;
        for verb in &self.verbs {
            for byte in verb.as_bytes() {
                hash ^= u64::from(*byte);
                hash = hash.wrapping_mul(PRIME);
            }
            hash ^= u64::from(b'\n');
            hash = hash.wrapping_mul(PRIME);
        }
        format!("{hash:016x}")
    }
}

/// Per-class crowdsourced verb selection counts.
///
/// Annotations are collected per class: every video of the class shares the
/// vote record, and therefore the label built from it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteRecord {
    pub class_id: String,
    /// Verb string -> number of annotators that selected it.
    pub verb_counts: BTreeMap<String, u32>,
    pub annotator_count: u32,
}

impl VoteRecord {
    pub fn new(
        class_id: impl Into<String>,
        verb_counts: BTreeMap<String, u32>,
        annotator_count: u32,
    ) -> Result<Self> {
        let record = Self {
            class_id: class_id.into(),
            verb_counts,
            annotator_count,
        };
        record.validate()?;
        Ok(record)
    }

    /// Check the count invariants: at least one annotator, and no verb counted
    /// more often than there are annotators.
    pub fn validate(&self) -> Result<()> {
        if self.class_id.is_empty() {
            return Err(Error::InvalidInput("empty class_id in vote record".into()));
        }
        if self.annotator_count == 0 {
            return Err(Error::InvalidInput(format!(
                "class '{}': annotator_count must be positive",
                self.class_id
            )));
        }
        for (verb, count) in &self.verb_counts {
            if *count > self.annotator_count {
                return Err(Error::InvalidInput(format!(
                    "class '{}': verb '{verb}' has count {count} > annotator_count {}",
                    self.class_id, self.annotator_count
                )));
            }
        }
        Ok(())
    }

    /// Drop any verb keys not present in `vocab`. Used by the lenient
    /// ingestion path; the builders themselves stay strict.
    pub fn retain_known(&mut self, vocab: &VerbVocabulary) -> Vec<String> {
        let mut dropped = Vec::new();
        self.verb_counts.retain(|verb, _| {
            let known = vocab.index_of(verb).is_some();
            if !known {
                dropped.push(verb.clone());
            }
            known
        });
        dropped
    }
}

/// Which labelling scheme a vector belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LabelScheme {
    Sl,
    Ml,
    Saml,
    Predicted,
}

impl LabelScheme {
    /// The three ground-truth schemes, in reporting order.
    pub const GROUND_TRUTH: [LabelScheme; 3] =
        [LabelScheme::Sl, LabelScheme::Ml, LabelScheme::Saml];

    pub fn name(self) -> &'static str {
        match self {
            LabelScheme::Sl => "SL",
            LabelScheme::Ml => "ML",
            LabelScheme::Saml => "SAML",
            LabelScheme::Predicted => "PREDICTED",
        }
    }
}

impl fmt::Display for LabelScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LabelScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "SL" => Ok(LabelScheme::Sl),
            "ML" => Ok(LabelScheme::Ml),
            "SAML" => Ok(LabelScheme::Saml),
            "PREDICTED" => Ok(LabelScheme::Predicted),
            other => Err(Error::InvalidInput(format!(
                "unknown label scheme '{other}' (expected SL, ML, SAML or PREDICTED)"
            ))),
        }
    }
}

/// A length-`D` vector in `[0,1]^D`, tagged with its scheme.
///
/// Construction validates the scheme invariants, so a held `LabelVector` is
/// always well-formed:
///
/// * SL: exactly one component is 1, the rest 0;
/// * ML: every component is 0 or 1, at least one is 1;
/// * SAML: every component in `[0,1]`, at least one positive;
/// * PREDICTED: every component in `[0,1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelVector {
    scheme: LabelScheme,
    values: Vec<f64>,
}

impl LabelVector {
    pub fn new(scheme: LabelScheme, values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidLabel {
                scheme: scheme.to_string(),
                reason: "empty value vector".into(),
            });
        }
        let invalid = |reason: String| Error::InvalidLabel {
            scheme: scheme.to_string(),
            reason,
        };
        for (j, &v) in values.iter().enumerate() {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(invalid(format!("component {j} = {v} is outside [0,1]")));
            }
        }
        match scheme {
            LabelScheme::Sl => {
                let ones = values.iter().filter(|&&v| v == 1.0).count();
                let valid = ones == 1 && values.iter().all(|&v| v == 0.0 || v == 1.0);
                if !valid {
                    return Err(invalid("not a one-hot vector".into()));
                }
            }
            LabelScheme::Ml => {
                if !values.iter().all(|&v| v == 0.0 || v == 1.0) {
                    return Err(invalid("components must be 0 or 1".into()));
                }
                if !values.contains(&1.0) {
                    return Err(invalid("no component set".into()));
                }
            }
            LabelScheme::Saml => {
                if !values.iter().any(|&v| v > 0.0) {
                    return Err(invalid("no positive component".into()));
                }
            }
            LabelScheme::Predicted => {}
        }
        Ok(Self { scheme, values })
    }

    pub fn scheme(&self) -> LabelScheme {
        self.scheme
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, j: usize) -> Option<f64> {
        self.values.get(j).copied()
    }

    /// Index of the single hot component of an SL vector.
    ///
    /// Returns an error for other schemes.
    pub fn hot_index(&self) -> Result<usize> {
        if self.scheme != LabelScheme::Sl {
            return Err(Error::InvalidLabel {
                scheme: self.scheme.to_string(),
                reason: "hot_index is only defined for SL vectors".into(),
            });
        }
        // invariant guarantees exactly one 1.0
        Ok(self
            .values
            .iter()
            .position(|&v| v == 1.0)
            .expect("SL invariant"))
    }
}

/// Resolve a vote record's counts onto vocabulary order.
///
/// Fails on an unknown verb key or when every count is zero.
fn resolve_counts(votes: &VoteRecord, vocab: &VerbVocabulary) -> Result<Vec<u32>> {
    votes.validate()?;
    let mut counts = vec![0u32; vocab.len()];
    for (verb, &count) in &votes.verb_counts {
        let j = vocab.index_of(verb).ok_or_else(|| Error::UnknownVerb {
            class_id: votes.class_id.clone(),
            verb: verb.clone(),
        })?;
        counts[j] = count;
    }
    if counts.iter().all(|&c| c == 0) {
        return Err(Error::EmptyVotes {
            class_id: votes.class_id.clone(),
        });
    }
    Ok(counts)
}

/// Build a single-verb label by majority vote.
///
/// Ties are broken by the lowest vocabulary index, which makes the result
/// deterministic and independent of vote-record iteration order.
pub fn build_sl(votes: &VoteRecord, vocab: &VerbVocabulary) -> Result<LabelVector> {
    let counts = resolve_counts(votes, vocab)?;
    let mut best = 0usize;
    for (j, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = j;
        }
    }
    let mut values = vec![0.0; vocab.len()];
    values[best] = 1.0;
    LabelVector::new(LabelScheme::Sl, values)
}

/// Build a multi-verb binary label: component `j` is 1 iff
/// `count(v_j) / annotator_count >= threshold`.
///
/// An empty result is an error rather than an all-zero vector; the caller may
/// lower the threshold or fall back to SL.
pub fn build_ml(votes: &VoteRecord, vocab: &VerbVocabulary, threshold: f64) -> Result<LabelVector> {
    if !threshold.is_finite() || !(0.0 < threshold && threshold <= 1.0) {
        return Err(Error::InvalidInput(format!(
            "ML threshold must be in (0,1], got {threshold}"
        )));
    }
    let counts = resolve_counts(votes, vocab)?;
    let denom = f64::from(votes.annotator_count);
    let values: Vec<f64> = counts
        .iter()
        .map(|&c| {
            if f64::from(c) / denom >= threshold {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    if !values.contains(&1.0) {
        return Err(Error::EmptyLabel {
            class_id: votes.class_id.clone(),
            threshold,
        });
    }
    LabelVector::new(LabelScheme::Ml, values)
}

/// Build a soft-assigned multi-label: component `j` is
/// `count(v_j) / annotator_count`.
///
/// More commonly used verbs get strictly larger scores, so the vector ranks
/// verbs by how well they describe the action.
pub fn build_saml(votes: &VoteRecord, vocab: &VerbVocabulary) -> Result<LabelVector> {
    let counts = resolve_counts(votes, vocab)?;
    let denom = f64::from(votes.annotator_count);
    let values: Vec<f64> = counts.iter().map(|&c| f64::from(c) / denom).collect();
    LabelVector::new(LabelScheme::Saml, values)
}

/// Build a ground-truth label with the given scheme's builder.
pub fn build_label(
    votes: &VoteRecord,
    vocab: &VerbVocabulary,
    scheme: LabelScheme,
    ml_threshold: f64,
) -> Result<LabelVector> {
    match scheme {
        LabelScheme::Sl => build_sl(votes, vocab),
        LabelScheme::Ml => build_ml(votes, vocab, ml_threshold),
        LabelScheme::Saml => build_saml(votes, vocab),
        LabelScheme::Predicted => Err(Error::InvalidInput(
            "PREDICTED is not a ground-truth scheme".into(),
        )),
    }
}

/// The relevance set `{j : y_j >= alpha}`.
///
/// `alpha` is expected in `(0,1]`; monotone in `alpha` (larger thresholds give
/// subsets).
pub fn relevant_verbs(label: &LabelVector, alpha: f64) -> BTreeSet<usize> {
    label
        .values()
        .iter()
        .enumerate()
        .filter(|(_, &v)| v >= alpha)
        .map(|(j, _)| j)
        .collect()
}

/// The one-hot vertex `e_j` in label space, the anchor point that identifies
/// verb `v_j` for distance-based rankings.
pub fn verb_vertex(j: usize, vocab: &VerbVocabulary) -> Result<LabelVector> {
    if j >= vocab.len() {
        return Err(Error::VerbIndexOutOfRange {
            index: j,
            size: vocab.len(),
        });
    }
    let mut values = vec![0.0; vocab.len()];
    values[j] = 1.0;
    LabelVector::new(LabelScheme::Predicted, values)
}

// ---------------------------------------------------------------------------
// Vote file ingestion
//
// Two serializations are accepted:
//   * delimited text, one record per line:
//         <class_id> <annotator_count> <verb>:<count> [<verb>:<count> ...]
//     with blank lines and `#` comments ignored;
//   * a JSON array of objects with fields `class_id`, `annotator_count`,
//     `verb_counts`.
// ---------------------------------------------------------------------------

/// Which on-disk serialization a vote file uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VoteFormat {
    Text,
    Json,
}

impl VoteFormat {
    /// Infer the format from a file extension; anything but `.json` is text.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("json") => VoteFormat::Json,
            _ => VoteFormat::Text,
        }
    }
}

/// Parse the delimited-text vote format.
pub fn parse_votes_text(reader: impl BufRead) -> Result<Vec<VoteRecord>> {
    let mut records = Vec::new();
    let mut seen_classes = BTreeSet::new();
    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut fields = trimmed.split_whitespace();
        let class_id = fields.next().expect("non-empty line").to_string();
        let annotator_count: u32 = fields
            .next()
            .ok_or_else(|| Error::malformed(lineno, "missing annotator count"))?
            .parse()
            .map_err(|_| Error::malformed(lineno, "annotator count is not an integer"))?;
        let mut verb_counts = BTreeMap::new();
        for pair in fields {
            let (verb, count) = pair.split_once(':').ok_or_else(|| {
                Error::malformed(lineno, format!("expected verb:count, got '{pair}'"))
            })?;
            let count: u32 = count.parse().map_err(|_| {
                Error::malformed(lineno, format!("count for '{verb}' is not an integer"))
            })?;
            if verb.is_empty() {
                return Err(Error::malformed(lineno, "empty verb name"));
            }
            if verb_counts.insert(verb.to_string(), count).is_some() {
                return Err(Error::malformed(
                    lineno,
                    format!("verb '{verb}' listed twice"),
                ));
            }
        }
        if !seen_classes.insert(class_id.clone()) {
            return Err(Error::malformed(
                lineno,
                format!("duplicate class '{class_id}'"),
            ));
        }
        let record = VoteRecord::new(class_id, verb_counts, annotator_count)
            .map_err(|e| Error::malformed(lineno, e.to_string()))?;
        records.push(record);
    }
    Ok(records)
}

/// Parse the JSON vote format (an array of records).
pub fn parse_votes_json(reader: impl Read) -> Result<Vec<VoteRecord>> {
    let records: Vec<VoteRecord> = serde_json::from_reader(reader)?;
    let mut seen = BTreeSet::new();
    for record in &records {
        record.validate()?;
        if !seen.insert(record.class_id.clone()) {
            return Err(Error::InvalidInput(format!(
                "duplicate class '{}' in vote file",
                record.class_id
            )));
        }
    }
    Ok(records)
}

/// Read a vote file and check every verb key against the vocabulary.
///
/// Unknown verbs fail the read unless `ignore_unknown` is set, in which case
/// they are dropped with a warning. The strict default catches typos.
pub fn read_votes(
    path: impl AsRef<Path>,
    vocab: &VerbVocabulary,
    ignore_unknown: bool,
) -> Result<Vec<VoteRecord>> {
    let path = path.as_ref();
    let file = File::open(path)?;
    let mut records = match VoteFormat::from_path(path) {
        VoteFormat::Text => parse_votes_text(BufReader::new(file)),
        VoteFormat::Json => parse_votes_json(BufReader::new(file)),
    }
    .map_err(|e| e.with_path(path.display().to_string()))?;

    for record in &mut records {
        if ignore_unknown {
            for verb in record.retain_known(vocab) {
                log::warn!(
                    "class '{}': dropping verb '{verb}' not in vocabulary",
                    record.class_id
                );
            }
        } else if let Some(verb) = record
            .verb_counts
            .keys()
            .find(|v| vocab.index_of(v).is_none())
        {
            return Err(Error::UnknownVerb {
                class_id: record.class_id.clone(),
                verb: verb.clone(),
            });
        }
    }
    Ok(records)
}

/// Write vote records in the delimited-text format.
pub fn write_votes_text(path: impl AsRef<Path>, records: &[VoteRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for record in records {
        write!(w, "{} {}", record.class_id, record.annotator_count)?;
        for (verb, count) in &record.verb_counts {
            write!(w, " {verb}:{count}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// Write vote records as a JSON array.
pub fn write_votes_json(path: impl AsRef<Path>, records: &[VoteRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, records)?;
    w.flush()?;
    Ok(())
}
