//! Evaluation of predicted label vectors: overlap accuracy, verb-vertex
//! rankings, video-to-text and text-to-video retrieval mAP, multi-verb query
//! enumeration, and cross-dataset video-to-video retrieval.
//!
//! The label space doubles as an embedding space: any verb is a one-hot
//! vertex, and retrieval ranks by plain L2 distance between vectors. Average
//! precision is the uninterpolated kind: the mean of precision at each
//! relevant rank, divided by the number of relevant items.
//!
//! All operations are pure; per-query work is independent and reduced in
//! deterministic query order.

use std::collections::BTreeSet;
use std::io::Write;

use itertools::Itertools;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label_space::{relevant_verbs, LabelVector};

/// A binary multi-verb query vector with `n` verbs set.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryVector {
    values: Vec<f64>,
    indices: Vec<usize>,
}

impl QueryVector {
    /// Build a query from the verb indices to set, over a `d`-dimensional
    /// vocabulary.
    pub fn from_indices(indices: &[usize], d: usize) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::InvalidInput(
                "query must set at least one verb".into(),
            ));
        }
        let unique: BTreeSet<usize> = indices.iter().copied().collect();
        if unique.len() != indices.len() {
            return Err(Error::InvalidInput("duplicate verb index in query".into()));
        }
        if let Some(&bad) = unique.iter().find(|&&j| j >= d) {
            return Err(Error::VerbIndexOutOfRange {
                index: bad,
                size: d,
            });
        }
        let mut values = vec![0.0; d];
        for &j in &unique {
            values[j] = 1.0;
        }
        Ok(Self {
            values,
            indices: unique.into_iter().collect(),
        })
    }

    /// Validate a raw binary vector as a query.
    pub fn from_values(values: Vec<f64>) -> Result<Self> {
        if !values.iter().all(|&v| v == 0.0 || v == 1.0) {
            return Err(Error::InvalidInput(
                "query components must be 0 or 1".into(),
            ));
        }
        let indices: Vec<usize> = values
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == 1.0)
            .map(|(j, _)| j)
            .collect();
        if indices.is_empty() {
            return Err(Error::InvalidInput(
                "query must set at least one verb".into(),
            ));
        }
        Ok(Self { values, indices })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Indices of the set verbs, ascending.
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    /// Number of verbs set.
    pub fn n(&self) -> usize {
        self.indices.len()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Stable identifier, e.g. `2+5+7` for verbs {2,5,7}.
    pub fn id(&self) -> String {
        self.indices.iter().map(usize::to_string).join("+")
    }
}

/// A retrieval result: items ordered from closest to furthest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub query_id: String,
    entries: Vec<(String, f64)>,
}

impl RankedList {
    pub fn new(query_id: impl Into<String>, entries: Vec<(String, f64)>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for pair in entries.windows(2) {
            if pair[1].1 < pair[0].1 {
                return Err(Error::InvalidInput(
                    "ranked list distances must be non-decreasing".into(),
                ));
            }
        }
        for (id, distance) in &entries {
            if !distance.is_finite() || *distance < 0.0 {
                return Err(Error::InvalidInput(format!(
                    "distance {distance} for '{id}' is not a finite non-negative value"
                )));
            }
            if !seen.insert(id) {
                return Err(Error::InvalidInput(format!(
                    "duplicate item '{id}' in ranking"
                )));
            }
        }
        Ok(Self {
            query_id: query_id.into(),
            entries,
        })
    }

    pub fn entries(&self) -> &[(String, f64)] {
        &self.entries
    }

    /// Keep only the closest `max_len` entries.
    pub fn truncate(&mut self, max_len: usize) {
        self.entries.truncate(max_len);
    }

    pub fn write_tsv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "# query\t{}", self.query_id)?;
        writeln!(w, "rank\titem\tdistance")?;
        for (rank, (id, distance)) in self.entries.iter().enumerate() {
            writeln!(w, "{}\t{id}\t{distance}", rank + 1)?;
        }
        Ok(())
    }
}

/// Aggregated metric report: per-query scores plus their mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Metric name: `overlap_accuracy`, `v2t_map` or `t2v_map`.
    pub metric: String,
    /// Scheme of the ground truth that defined relevance.
    pub scheme: String,
    pub alpha: Option<f64>,
    /// Verbs per query, for t2v reports with uniform query size.
    pub n: Option<usize>,
    pub per_query: Vec<QueryScore>,
    /// Mean of the per-query scores.
    pub aggregate: f64,
    pub query_count: usize,
    /// Queries or videos dropped because their relevance set was empty.
    pub excluded_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryScore {
    pub id: String,
    pub score: f64,
}

impl EvalReport {
    fn from_scores(
        metric: &str,
        scheme: String,
        alpha: Option<f64>,
        n: Option<usize>,
        per_query: Vec<QueryScore>,
        excluded_count: usize,
    ) -> Result<Self> {
        if per_query.is_empty() {
            return Err(Error::UndefinedMetric {
                reason: format!("{metric}: every query was excluded"),
            });
        }
        let aggregate = per_query.iter().map(|q| q.score).sum::<f64>() / per_query.len() as f64;
        Ok(Self {
            metric: metric.to_string(),
            scheme,
            alpha,
            n,
            query_count: per_query.len(),
            per_query,
            aggregate,
            excluded_count,
        })
    }

    /// Delimited-text serialization: header comments, one query per row, and
    /// a final aggregate row.
    pub fn write_tsv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "# metric\t{}", self.metric)?;
        writeln!(w, "# scheme\t{}", self.scheme)?;
        if let Some(alpha) = self.alpha {
            writeln!(w, "# alpha\t{alpha}")?;
        }
        if let Some(n) = self.n {
            writeln!(w, "# n\t{n}")?;
        }
        writeln!(w, "# query_count\t{}", self.query_count)?;
        writeln!(w, "# excluded\t{}", self.excluded_count)?;
        writeln!(w, "query\tscore")?;
        for q in &self.per_query {
            writeln!(w, "{}\t{}", q.id, q.score)?;
        }
        writeln!(w, "aggregate\t{}", self.aggregate)?;
        Ok(())
    }
}

fn check_aligned(ground_truth: &[LabelVector], predicted: &[LabelVector]) -> Result<usize> {
    if ground_truth.is_empty() {
        return Err(Error::InvalidInput("no videos to evaluate".into()));
    }
    if ground_truth.len() != predicted.len() {
        return Err(Error::DimensionMismatch {
            context: "ground truth vs predictions".into(),
            expected: ground_truth.len(),
            actual: predicted.len(),
        });
    }
    let d = ground_truth[0].len();
    for label in ground_truth.iter().chain(predicted) {
        if label.len() != d {
            return Err(Error::DimensionMismatch {
                context: "label vector length".into(),
                expected: d,
                actual: label.len(),
            });
        }
    }
    Ok(d)
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !alpha.is_finite() || !(0.0 < alpha && alpha <= 1.0) {
        return Err(Error::InvalidInput(format!(
            "alpha must be in (0,1], got {alpha}"
        )));
    }
    Ok(())
}

/// Indices `0..d` ordered by descending value, ties broken by lower index.
fn indices_by_value_desc(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        values[b]
            .partial_cmp(&values[a])
            .expect("label values are finite")
            .then(a.cmp(&b))
    });
    order
}

/// Overlap accuracy: the mean, over videos, of the fraction of the
/// ground-truth relevance set recovered among the top-`k` predicted verbs,
/// with `k` the relevance set size.
///
/// Videos whose relevance set is empty at `alpha` are excluded from the mean;
/// if every video is excluded the metric is undefined. For one-hot ground
/// truth this equals top-1 classification accuracy for any `alpha`.
pub fn overlap_accuracy(
    ground_truth: &[LabelVector],
    predicted: &[LabelVector],
    alpha: f64,
) -> Result<f64> {
    overlap_accuracy_report(ground_truth, predicted, alpha).map(|r| r.aggregate)
}

/// As [`overlap_accuracy`], returning per-video scores.
pub fn overlap_accuracy_report(
    ground_truth: &[LabelVector],
    predicted: &[LabelVector],
    alpha: f64,
) -> Result<EvalReport> {
    check_alpha(alpha)?;
    check_aligned(ground_truth, predicted)?;
    let mut per_query = Vec::with_capacity(ground_truth.len());
    let mut excluded = 0usize;
    for (i, (gt, pred)) in ground_truth.iter().zip(predicted).enumerate() {
        let relevant = relevant_verbs(gt, alpha);
        if relevant.is_empty() {
            excluded += 1;
            continue;
        }
        let k = relevant.len();
        let top_k = &indices_by_value_desc(pred.values())[..k];
        let hits = top_k.iter().filter(|j| relevant.contains(j)).count();
        per_query.push(QueryScore {
            id: i.to_string(),
            score: hits as f64 / k as f64,
        });
    }
    if excluded > 0 {
        log::warn!(
            "overlap_accuracy: {excluded} video(s) with empty relevance set at alpha {alpha}"
        );
    }
    EvalReport::from_scores(
        "overlap_accuracy",
        ground_truth[0].scheme().to_string(),
        Some(alpha),
        None,
        per_query,
        excluded,
    )
}

/// L2 distance between a label vector and the verb vertex `e_j`.
fn vertex_distance(values: &[f64], j: usize) -> f64 {
    values
        .iter()
        .enumerate()
        .map(|(k, &v)| {
            let target = if k == j { 1.0 } else { 0.0 };
            (v - target) * (v - target)
        })
        .sum::<f64>()
        .sqrt()
}

fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Rank all verbs from closest to furthest vertex of the predicted vector.
/// Ties are broken by verb index.
pub fn rank_verbs(predicted: &LabelVector) -> Vec<(usize, f64)> {
    let values = predicted.values();
    let mut ranked: Vec<(usize, f64)> = (0..values.len())
        .map(|j| (j, vertex_distance(values, j)))
        .collect();
    ranked.sort_by(|a, b| {
        a.1.partial_cmp(&b.1)
            .expect("finite distances")
            .then(a.0.cmp(&b.0))
    });
    ranked
}

/// Uninterpolated average precision of a ranked list against a relevance
/// pattern: the mean of precision at each relevant rank, divided by the
/// total number of relevant items.
///
/// `flags[r]` marks whether the item at rank `r` (0-based) is relevant;
/// `total_relevant` counts all relevant items, ranked or not. Returns `None`
/// when nothing is relevant.
pub fn average_precision(flags: &[bool], total_relevant: usize) -> Option<f64> {
    if total_relevant == 0 {
        return None;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &relevant) in flags.iter().enumerate() {
        if relevant {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(sum / total_relevant as f64)
}

/// Video-to-text retrieval mAP.
///
/// For each video, verbs are ranked by vertex distance from the prediction
/// and scored against the relevance set of the passed ground truth at
/// `alpha`. Pass SL ground truth for single-verb relevance, SAML ground
/// truth for threshold relevance; the report records which was used.
pub fn v2t_map(
    ground_truth: &[LabelVector],
    predicted: &[LabelVector],
    alpha: f64,
) -> Result<EvalReport> {
    check_alpha(alpha)?;
    check_aligned(ground_truth, predicted)?;
    let mut per_query = Vec::with_capacity(ground_truth.len());
    let mut excluded = 0usize;
    for (i, (gt, pred)) in ground_truth.iter().zip(predicted).enumerate() {
        let relevant = relevant_verbs(gt, alpha);
        if relevant.is_empty() {
            excluded += 1;
            log::warn!("v2t_map: video {i} has no relevant verbs at alpha {alpha}, excluded");
            continue;
        }
        let flags: Vec<bool> = rank_verbs(pred)
            .iter()
            .map(|(j, _)| relevant.contains(j))
            .collect();
        let ap = average_precision(&flags, relevant.len()).expect("non-empty relevance");
        per_query.push(QueryScore {
            id: i.to_string(),
            score: ap,
        });
    }
    EvalReport::from_scores(
        "v2t_map",
        ground_truth[0].scheme().to_string(),
        Some(alpha),
        None,
        per_query,
        excluded,
    )
}

/// Enumerate every size-`n` verb combination that co-occurs in some video's
/// ground truth at `alpha`, in lexicographic order.
///
/// Restricting queries to co-occurring sets keeps antonym pairs out without
/// any curated list: `open` and `close` never pass the threshold together.
pub fn enumerate_queries(
    ground_truth: &[LabelVector],
    n: usize,
    alpha: f64,
) -> Result<Vec<QueryVector>> {
    if n == 0 {
        return Err(Error::InvalidInput("query size n must be >= 1".into()));
    }
    check_alpha(alpha)?;
    if ground_truth.is_empty() {
        return Err(Error::InvalidInput("no ground truth labels".into()));
    }
    let d = ground_truth[0].len();
    let mut sets: BTreeSet<Vec<usize>> = BTreeSet::new();
    for gt in ground_truth {
        let relevant: Vec<usize> = relevant_verbs(gt, alpha).into_iter().collect();
        if relevant.len() < n {
            continue;
        }
        for combo in relevant.into_iter().combinations(n) {
            sets.insert(combo);
        }
    }
    sets.into_iter()
        .map(|indices| QueryVector::from_indices(&indices, d))
        .collect()
}

/// Text-to-video retrieval mAP over multi-verb queries.
///
/// Videos are ranked by L2 distance between their predicted vector and the
/// query; a video is relevant when its ground truth reaches `alpha` on every
/// queried verb. Queries with no relevant video are excluded with a warning.
pub fn t2v_map(
    queries: &[QueryVector],
    predicted: &[LabelVector],
    ground_truth: &[LabelVector],
    alpha: f64,
) -> Result<EvalReport> {
    check_alpha(alpha)?;
    let d = check_aligned(ground_truth, predicted)?;
    if queries.is_empty() {
        return Err(Error::UndefinedMetric {
            reason: "t2v_map: no queries".into(),
        });
    }
    for query in queries {
        if query.len() != d {
            return Err(Error::DimensionMismatch {
                context: "query vector length".into(),
                expected: d,
                actual: query.len(),
            });
        }
    }
    let mut per_query = Vec::with_capacity(queries.len());
    let mut excluded = 0usize;
    for query in queries {
        let relevant: Vec<bool> = ground_truth
            .iter()
            .map(|gt| query.indices().iter().all(|&j| gt.values()[j] >= alpha))
            .collect();
        let total_relevant = relevant.iter().filter(|&&r| r).count();
        if total_relevant == 0 {
            excluded += 1;
            log::warn!(
                "t2v_map: query {} has no relevant videos, excluded",
                query.id()
            );
            continue;
        }
        // stable sort keeps ingestion order on distance ties
        let mut order: Vec<usize> = (0..predicted.len()).collect();
        let distances: Vec<f64> = predicted
            .iter()
            .map(|p| l2_distance(p.values(), query.values()))
            .collect();
        order.sort_by(|&a, &b| distances[a].partial_cmp(&distances[b]).expect("finite"));
        let flags: Vec<bool> = order.iter().map(|&i| relevant[i]).collect();
        let ap = average_precision(&flags, total_relevant).expect("non-empty relevance");
        per_query.push(QueryScore {
            id: query.id(),
            score: ap,
        });
    }
    let n = queries
        .first()
        .map(QueryVector::n)
        .filter(|&n| queries.iter().all(|q| q.n() == n));
    EvalReport::from_scores(
        "t2v_map",
        ground_truth[0].scheme().to_string(),
        Some(alpha),
        n,
        per_query,
        excluded,
    )
}

/// A video represented by its predicted label vector, as stored in a
/// retrieval corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedVideo {
    pub video_id: String,
    pub dataset_tag: String,
    pub label: LabelVector,
}

/// Rank corpus videos by L2 distance to a query video's predicted label.
///
/// With `exclude_tag` set to the query's own dataset tag this performs
/// cross-dataset retrieval. Ties keep corpus order.
pub fn v2v_retrieve(
    query_id: &str,
    query_label: &LabelVector,
    corpus: &[EmbeddedVideo],
    exclude_tag: Option<&str>,
) -> Result<RankedList> {
    let candidates: Vec<&EmbeddedVideo> = corpus
        .iter()
        .filter(|v| exclude_tag != Some(v.dataset_tag.as_str()))
        .collect();
    if candidates.is_empty() {
        return Err(Error::EmptyCorpus {
            excluded_tag: exclude_tag.unwrap_or("").to_string(),
        });
    }
    for video in &candidates {
        if video.label.len() != query_label.len() {
            return Err(Error::DimensionMismatch {
                context: format!("label of corpus video '{}'", video.video_id),
                expected: query_label.len(),
                actual: video.label.len(),
            });
        }
    }
    let mut entries: Vec<(String, f64)> = candidates
        .iter()
        .map(|v| {
            (
                v.video_id.clone(),
                l2_distance(v.label.values(), query_label.values()),
            )
        })
        .collect();
    entries.sort_by(|a, b| a.1.partial_cmp(&b.1).expect("finite distances"));
    RankedList::new(query_id, entries)
}
