//! The cross-validated experiment pipeline behind `multiverb run`.
//!
//! For every fold, one model per requested scheme is trained on the
//! out-of-fold videos and evaluated on the held-out fold: overlap accuracy at
//! each alpha, video-to-text mAP for each relevance row, and text-to-video
//! mAP for query sizes `1..=t2v_n_max`. Fold metrics are averaged into the
//! aggregate table and everything is persisted under the output directory:
//!
//! * `manifest.json` — config snapshot, seed, per-fold and aggregate metrics;
//! * `reports.json`  — every per-query evaluation report;
//! * `accuracy.txt`, `v2t.txt` — aligned human-readable tables;
//! * `t2v.tsv`       — `n / scheme / mAP` rows for plotting;
//! * `folds.txt`     — the fold assignment;
//! * `logs/`         — per-epoch training logs (wall times live here, not in
//!   the manifest, which is byte-identical across reruns).
//!
//! A `STALE` marker is written at the start of a run and removed on success,
//! so partial outputs of an aborted run are flagged.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use multiverb_core::dataset::{attach_labels, ingest_features, stratified_folds};
use multiverb_core::evaluation::{
    enumerate_queries, overlap_accuracy_report, t2v_map, v2t_map, EvalReport,
};
use multiverb_core::label_space::read_votes;
use multiverb_core::regressor::{forward, train, EpochStats, TrainConfig, TrainOutcome};
use multiverb_core::{
    Error as CoreError, LabelScheme, LabelVector, LossKind, VerbVocabulary, VideoInstance,
    VoteRecord,
};

use crate::config::{stage_seed, ExperimentConfig};

pub const STALE_MARKER: &str = "STALE";

/// Relevance definition of one video-to-text ranking row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct V2tRow {
    /// Scheme whose labels define relevant verbs.
    pub gt_scheme: LabelScheme,
    pub alpha: f64,
}

impl V2tRow {
    pub fn id(&self) -> String {
        match self.gt_scheme {
            LabelScheme::Sl => "single_verb".to_string(),
            _ => format!("alpha_{}", self.alpha),
        }
    }
}

/// The v2t rows for a config: single-verb relevance, then one thresholded
/// SAML row per alpha.
pub fn v2t_rows(config: &ExperimentConfig) -> Vec<V2tRow> {
    let mut rows = vec![V2tRow {
        gt_scheme: LabelScheme::Sl,
        alpha: 1.0,
    }];
    rows.extend(config.alphas.iter().map(|&alpha| V2tRow {
        gt_scheme: LabelScheme::Saml,
        alpha,
    }));
    rows
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyCell {
    pub phi: String,
    pub alpha: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct V2tCell {
    pub relevance: String,
    pub alpha: f64,
    pub phi: String,
    pub map: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct V2tAvgCell {
    pub phi: String,
    pub map: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct T2vCell {
    pub n: usize,
    pub phi: String,
    /// `None` when no query of this size had any relevant video.
    pub map: Option<f64>,
}

/// One fold's (or the aggregate's) metric values.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricTable {
    pub accuracy: Vec<AccuracyCell>,
    pub v2t: Vec<V2tCell>,
    pub v2t_avg: Vec<V2tAvgCell>,
    pub t2v: Vec<T2vCell>,
}

impl MetricTable {
    pub fn accuracy_of(&self, phi: LabelScheme, alpha: f64) -> Option<f64> {
        self.accuracy
            .iter()
            .find(|c| c.phi == phi.name() && c.alpha == alpha)
            .map(|c| c.value)
    }

    pub fn v2t_avg_of(&self, phi: LabelScheme) -> Option<f64> {
        self.v2t_avg
            .iter()
            .find(|c| c.phi == phi.name())
            .map(|c| c.map)
    }

    pub fn t2v_of(&self, phi: LabelScheme, n: usize) -> Option<f64> {
        self.t2v
            .iter()
            .find(|c| c.phi == phi.name() && c.n == n)
            .and_then(|c| c.map)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub fold: usize,
    pub train_count: usize,
    pub test_count: usize,
    /// Id-set disjointness check between the training and held-out videos.
    pub train_test_disjoint: bool,
    pub metrics: MetricTable,
}

/// Everything a run produces besides the per-query reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub folds: Vec<FoldSummary>,
    pub aggregate: MetricTable,
}

/// A per-query evaluation report in the context of one fold and model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportEntry {
    pub fold: usize,
    /// Scheme of the model that produced the predictions.
    pub phi: String,
    pub report: EvalReport,
}

struct FoldOutcome {
    summary: FoldSummary,
    reports: Vec<ReportEntry>,
}

/// Ground-truth labels of one video set, keyed by scheme.
type GroundTruth = BTreeMap<&'static str, Vec<LabelVector>>;

fn scheme_key(scheme: LabelScheme) -> &'static str {
    scheme.name()
}

/// Schemes whose ground truth the evaluation needs: every trained scheme plus
/// SL and SAML, which define the v2t relevance rows and t2v queries.
fn gt_schemes(config: &ExperimentConfig) -> Vec<LabelScheme> {
    let mut schemes = vec![LabelScheme::Sl, LabelScheme::Saml];
    for scheme in &config.schemes {
        if !schemes.contains(scheme) {
            schemes.push(*scheme);
        }
    }
    schemes
}

fn build_ground_truth(
    instances: &[VideoInstance],
    votes: &[VoteRecord],
    vocab: &VerbVocabulary,
    schemes: &[LabelScheme],
    ml_threshold: f64,
) -> Result<GroundTruth, CoreError> {
    let mut gt = GroundTruth::new();
    for &scheme in schemes {
        let labelled = attach_labels(instances.to_vec(), votes, vocab, scheme, ml_threshold)?;
        gt.insert(
            scheme_key(scheme),
            labelled.into_iter().map(|(_, label)| label).collect(),
        );
    }
    Ok(gt)
}

fn write_train_log(path: &Path, history: &[EpochStats]) -> Result<()> {
    let mut w = fs::File::create(path)?;
    writeln!(w, "epoch\tmean_loss\twall_secs")?;
    for stats in history {
        writeln!(
            w,
            "{}\t{}\t{:.6}",
            stats.epoch, stats.mean_loss, stats.wall_secs
        )?;
    }
    Ok(())
}

fn run_fold(
    config: &ExperimentConfig,
    fold: usize,
    train_instances: &[VideoInstance],
    test_instances: &[VideoInstance],
    votes: &[VoteRecord],
    vocab: &VerbVocabulary,
    logs_dir: &Path,
) -> Result<FoldOutcome> {
    if train_instances.is_empty() || test_instances.is_empty() {
        bail!(
            "fold {fold} has {} training and {} test videos; reduce the fold count",
            train_instances.len(),
            test_instances.len()
        );
    }
    let disjoint = {
        let test_ids: std::collections::BTreeSet<&str> =
            test_instances.iter().map(|i| i.video_id.as_str()).collect();
        train_instances
            .iter()
            .all(|i| !test_ids.contains(i.video_id.as_str()))
    };
    if !disjoint {
        bail!("fold {fold}: training and test video ids overlap");
    }

    let test_gt = build_ground_truth(
        test_instances,
        votes,
        vocab,
        &gt_schemes(config),
        config.ml_threshold,
    )
    .context("building held-out ground truth")?;

    // one model per scheme, trained on the out-of-fold videos
    let mut predictions: BTreeMap<&'static str, Vec<LabelVector>> = BTreeMap::new();
    for &scheme in &config.schemes {
        let labelled = attach_labels(
            train_instances.to_vec(),
            votes,
            vocab,
            scheme,
            config.ml_threshold,
        )
        .with_context(|| format!("building {scheme} training labels"))?;
        let samples: Vec<(Vec<f64>, LabelVector)> = labelled
            .into_iter()
            .map(|(instance, label)| (instance.features, label))
            .collect();
        let train_config = TrainConfig {
            epochs: config.epochs,
            batch_size: config.batch_size,
            learning_rate: config.learning_rate,
            momentum: config.momentum,
            seed: stage_seed(config.seed, &format!("train/{scheme}/fold{fold}")),
            loss: LossKind::for_scheme(scheme)?,
            hidden_dims: config.hidden_dims.clone(),
        };
        let TrainOutcome { params, history } = train(&samples, &train_config)
            .with_context(|| format!("training {scheme} on fold {fold}"))?;
        write_train_log(
            &logs_dir.join(format!(
                "train_{}_fold{fold}.log",
                scheme.name().to_lowercase()
            )),
            &history,
        )?;
        let preds: Vec<LabelVector> = test_instances
            .iter()
            .map(|instance| forward(&params, &instance.features))
            .collect::<Result<_, _>>()
            .with_context(|| format!("predicting fold {fold} with {scheme}"))?;
        predictions.insert(scheme_key(scheme), preds);
    }

    let mut metrics = MetricTable::default();
    let mut reports = Vec::new();

    // overlap accuracy of each model against its own scheme's ground truth
    for &scheme in &config.schemes {
        let gt = &test_gt[scheme_key(scheme)];
        let preds = &predictions[scheme_key(scheme)];
        for &alpha in &config.alphas {
            let report = overlap_accuracy_report(gt, preds, alpha)
                .with_context(|| format!("overlap accuracy for {scheme} at alpha {alpha}"))?;
            metrics.accuracy.push(AccuracyCell {
                phi: scheme.name().to_string(),
                alpha,
                value: report.aggregate,
            });
            reports.push(ReportEntry {
                fold,
                phi: scheme.name().to_string(),
                report,
            });
        }
    }

    // video-to-text rows: every model ranked against every relevance row
    for row in v2t_rows(config) {
        let gt = &test_gt[scheme_key(row.gt_scheme)];
        for &scheme in &config.schemes {
            let preds = &predictions[scheme_key(scheme)];
            let report = v2t_map(gt, preds, row.alpha)
                .with_context(|| format!("v2t row {} for {scheme}", row.id()))?;
            metrics.v2t.push(V2tCell {
                relevance: row.id(),
                alpha: row.alpha,
                phi: scheme.name().to_string(),
                map: report.aggregate,
            });
            reports.push(ReportEntry {
                fold,
                phi: scheme.name().to_string(),
                report,
            });
        }
    }
    for &scheme in &config.schemes {
        let rows: Vec<f64> = metrics
            .v2t
            .iter()
            .filter(|c| c.phi == scheme.name())
            .map(|c| c.map)
            .collect();
        metrics.v2t_avg.push(V2tAvgCell {
            phi: scheme.name().to_string(),
            map: rows.iter().sum::<f64>() / rows.len() as f64,
        });
    }

    // text-to-video: queries of co-occurring verbs from the held-out SAML
    // ground truth
    let saml_gt = &test_gt[scheme_key(LabelScheme::Saml)];
    for n in 1..=config.t2v_n_max {
        let queries = enumerate_queries(saml_gt, n, config.t2v_alpha)
            .with_context(|| format!("enumerating {n}-verb queries"))?;
        for &scheme in &config.schemes {
            let preds = &predictions[scheme_key(scheme)];
            let map = if queries.is_empty() {
                None
            } else {
                match t2v_map(&queries, preds, saml_gt, config.t2v_alpha) {
                    Ok(report) => {
                        let aggregate = report.aggregate;
                        reports.push(ReportEntry {
                            fold,
                            phi: scheme.name().to_string(),
                            report,
                        });
                        Some(aggregate)
                    }
                    Err(CoreError::UndefinedMetric { .. }) => None,
                    Err(e) => {
                        return Err(e).with_context(|| format!("t2v mAP for {scheme} at n={n}"));
                    }
                }
            };
            metrics.t2v.push(T2vCell {
                n,
                phi: scheme.name().to_string(),
                map,
            });
        }
    }

    Ok(FoldOutcome {
        summary: FoldSummary {
            fold,
            train_count: train_instances.len(),
            test_count: test_instances.len(),
            train_test_disjoint: disjoint,
            metrics,
        },
        reports,
    })
}

/// Mean of each metric cell over the folds; t2v cells average over the folds
/// where the value was defined.
fn aggregate_metrics(config: &ExperimentConfig, folds: &[FoldSummary]) -> MetricTable {
    let mut aggregate = MetricTable::default();
    for &scheme in &config.schemes {
        for &alpha in &config.alphas {
            let values: Vec<f64> = folds
                .iter()
                .filter_map(|f| f.metrics.accuracy_of(scheme, alpha))
                .collect();
            aggregate.accuracy.push(AccuracyCell {
                phi: scheme.name().to_string(),
                alpha,
                value: mean(&values),
            });
        }
    }
    for row in v2t_rows(config) {
        for &scheme in &config.schemes {
            let values: Vec<f64> = folds
                .iter()
                .flat_map(|f| {
                    f.metrics
                        .v2t
                        .iter()
                        .filter(|c| c.relevance == row.id() && c.phi == scheme.name())
                        .map(|c| c.map)
                })
                .collect();
            aggregate.v2t.push(V2tCell {
                relevance: row.id(),
                alpha: row.alpha,
                phi: scheme.name().to_string(),
                map: mean(&values),
            });
        }
    }
    for &scheme in &config.schemes {
        let rows: Vec<f64> = aggregate
            .v2t
            .iter()
            .filter(|c| c.phi == scheme.name())
            .map(|c| c.map)
            .collect();
        aggregate.v2t_avg.push(V2tAvgCell {
            phi: scheme.name().to_string(),
            map: mean(&rows),
        });
    }
    for n in 1..=config.t2v_n_max {
        for &scheme in &config.schemes {
            let values: Vec<f64> = folds
                .iter()
                .filter_map(|f| f.metrics.t2v_of(scheme, n))
                .collect();
            aggregate.t2v.push(T2vCell {
                n,
                phi: scheme.name().to_string(),
                map: if values.is_empty() {
                    None
                } else {
                    Some(mean(&values))
                },
            });
        }
    }
    aggregate
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn write_accuracy_table(path: &Path, config: &ExperimentConfig, table: &MetricTable) -> Result<()> {
    let mut w = fs::File::create(path)?;
    writeln!(w, "overlap accuracy, mean over {} folds", config.fold_count)?;
    write!(w, "{:<8}", "scheme")?;
    for alpha in &config.alphas {
        write!(w, "{:>12}", format!("alpha={alpha}"))?;
    }
    writeln!(w)?;
    for &scheme in &config.schemes {
        write!(w, "{:<8}", scheme.name())?;
        for &alpha in &config.alphas {
            let value = table.accuracy_of(scheme, alpha).unwrap_or(f64::NAN);
            write!(w, "{:>12.4}", value)?;
        }
        writeln!(w)?;
    }
    Ok(())
}

fn write_v2t_table(path: &Path, config: &ExperimentConfig, table: &MetricTable) -> Result<()> {
    let mut w = fs::File::create(path)?;
    writeln!(
        w,
        "video-to-text retrieval mAP, mean over {} folds",
        config.fold_count
    )?;
    write!(w, "{:<14}", "relevance")?;
    for scheme in &config.schemes {
        write!(w, "{:>10}", scheme.name())?;
    }
    writeln!(w)?;
    for row in v2t_rows(config) {
        write!(w, "{:<14}", row.id())?;
        for &scheme in &config.schemes {
            let value = table
                .v2t
                .iter()
                .find(|c| c.relevance == row.id() && c.phi == scheme.name())
                .map_or(f64::NAN, |c| c.map);
            write!(w, "{:>10.4}", value)?;
        }
        writeln!(w)?;
    }
    write!(w, "{:<14}", "avg")?;
    for &scheme in &config.schemes {
        let value = table.v2t_avg_of(scheme).unwrap_or(f64::NAN);
        write!(w, "{:>10.4}", value)?;
    }
    writeln!(w)?;
    Ok(())
}

/// Plot-data export: one `(n, scheme, mAP)` row per point.
fn write_t2v_tsv(path: &Path, table: &MetricTable) -> Result<()> {
    let mut w = fs::File::create(path)?;
    writeln!(w, "n\tscheme\tmap")?;
    for cell in &table.t2v {
        match cell.map {
            Some(map) => writeln!(w, "{}\t{}\t{}", cell.n, cell.phi, map)?,
            None => writeln!(w, "{}\t{}\t", cell.n, cell.phi)?,
        }
    }
    Ok(())
}

/// Execute the full cross-validated experiment described by `config`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunManifest> {
    config.validate()?;
    fs::create_dir_all(&config.out)
        .with_context(|| format!("creating output directory '{}'", config.out.display()))?;
    let stale = config.out.join(STALE_MARKER);
    fs::write(&stale, "run in progress or aborted\n").context("writing stale marker")?;
    let logs_dir = config.out.join("logs");
    fs::create_dir_all(&logs_dir)?;

    let vocab = VerbVocabulary::read(&config.vocab).context("stage ingest: vocabulary")?;
    let votes =
        read_votes(&config.votes, &vocab, config.ignore_unknown).context("stage ingest: votes")?;
    let (instances, _dim) = ingest_features(&config.features).context("stage ingest: features")?;

    let folds = stratified_folds(
        &instances,
        config.fold_count,
        stage_seed(config.seed, "folds"),
    )
    .context("stage split")?;
    folds
        .write(config.out.join("folds.txt"))
        .context("stage split: writing folds")?;

    let mut summaries = Vec::with_capacity(config.fold_count);
    let mut reports = Vec::new();
    for fold in 0..config.fold_count {
        let (test_instances, train_instances): (Vec<VideoInstance>, Vec<VideoInstance>) = instances
            .iter()
            .cloned()
            .partition(|i| folds.fold_of(&i.video_id) == Some(fold));
        let outcome = run_fold(
            config,
            fold,
            &train_instances,
            &test_instances,
            &votes,
            &vocab,
            &logs_dir,
        )
        .with_context(|| format!("stage fold {fold}"))?;
        summaries.push(outcome.summary);
        reports.extend(outcome.reports);
    }

    let aggregate = aggregate_metrics(config, &summaries);
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        seed: config.seed,
        config: config.clone(),
        folds: summaries,
        aggregate,
    };

    let manifest_json = serde_json::to_string_pretty(&manifest).context("stage report")?;
    fs::write(config.out.join("manifest.json"), manifest_json + "\n").context("stage report")?;
    let reports_json = serde_json::to_string_pretty(&reports).context("stage report")?;
    fs::write(config.out.join("reports.json"), reports_json + "\n").context("stage report")?;
    write_accuracy_table(
        &config.out.join("accuracy.txt"),
        config,
        &manifest.aggregate,
    )
    .context("stage report")?;
    write_v2t_table(&config.out.join("v2t.txt"), config, &manifest.aggregate)
        .context("stage report")?;
    write_t2v_tsv(&config.out.join("t2v.tsv"), &manifest.aggregate).context("stage report")?;

    fs::remove_file(&stale).context("removing stale marker")?;
    Ok(manifest)
}
