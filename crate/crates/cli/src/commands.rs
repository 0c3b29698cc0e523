//! Single-step subcommands: synth, build-labels, split, train, eval and
//! retrieve. The cross-validated pipeline lives in [`crate::pipeline`].

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};

use multiverb_core::dataset::{
    attach_labels, generate_synthetic, ingest_features, stratified_folds, write_features,
    FoldAssignment, SyntheticSpec,
};
use multiverb_core::evaluation::{
    enumerate_queries, overlap_accuracy_report, rank_verbs, t2v_map, v2t_map, v2v_retrieve,
    EmbeddedVideo, EvalReport, QueryVector, RankedList,
};
use multiverb_core::label_space::{build_label, read_votes, write_votes_text};
use multiverb_core::regressor::{forward, load_model, save_model, train, ModelParams, TrainConfig};
use multiverb_core::{LabelScheme, LabelVector, LossKind, VerbVocabulary, VideoInstance};

use crate::pipeline::V2tRow;

/// Output paths produced by `multiverb synth`.
#[derive(Debug, Clone)]
pub struct SynthPaths {
    pub features: PathBuf,
    pub votes: PathBuf,
    pub vocab: PathBuf,
}

/// Generate a synthetic dataset: features, votes and vocabulary files, all
/// deterministic per spec seed and immediately consumable by the other
/// subcommands.
pub fn cmd_synth(spec_path: &Path, out_dir: &Path) -> Result<SynthPaths> {
    let spec = SyntheticSpec::read(spec_path)
        .with_context(|| format!("reading synthetic spec '{}'", spec_path.display()))?;
    let vocab = spec.vocabulary().context("deriving vocabulary")?;
    let (instances, votes) = generate_synthetic(&spec).context("generating dataset")?;
    fs::create_dir_all(out_dir)?;
    let paths = SynthPaths {
        features: out_dir.join("features.txt"),
        votes: out_dir.join("votes.txt"),
        vocab: out_dir.join("vocab.txt"),
    };
    write_features(&paths.features, &instances).context("writing features")?;
    write_votes_text(&paths.votes, &votes).context("writing votes")?;
    vocab.write(&paths.vocab).context("writing vocabulary")?;
    log::info!(
        "wrote {} videos of {} classes to {}",
        instances.len(),
        spec.class_count,
        out_dir.display()
    );
    Ok(paths)
}

/// Build one label file per scheme from a vote file.
pub fn cmd_build_labels(
    vocab_path: &Path,
    votes_path: &Path,
    schemes: &[LabelScheme],
    ml_threshold: f64,
    ignore_unknown: bool,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let vocab = VerbVocabulary::read(vocab_path).context("reading vocabulary")?;
    let votes = read_votes(votes_path, &vocab, ignore_unknown).context("reading votes")?;
    if votes.is_empty() {
        bail!("vote file '{}' has no records", votes_path.display());
    }
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    for &scheme in schemes {
        let path = out_dir.join(format!("labels_{}.txt", scheme.name().to_lowercase()));
        let mut w = fs::File::create(&path)?;
        writeln!(
            w,
            "# scheme={} d={} classes={}",
            scheme.name(),
            vocab.len(),
            votes.len()
        )?;
        for record in &votes {
            let label = build_label(record, &vocab, scheme, ml_threshold)
                .with_context(|| format!("class '{}'", record.class_id))?;
            write!(w, "{}", record.class_id)?;
            for value in label.values() {
                write!(w, " {value}")?;
            }
            writeln!(w)?;
        }
        written.push(path);
    }
    Ok(written)
}

/// Split a feature file into stratified folds and write the assignment.
pub fn cmd_split(features_path: &Path, fold_count: usize, seed: u64, out: &Path) -> Result<()> {
    let (instances, _) = ingest_features(features_path).context("reading features")?;
    let folds = stratified_folds(&instances, fold_count, seed).context("splitting")?;
    folds.write(out).context("writing fold file")?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub features: PathBuf,
    pub vocab: PathBuf,
    pub votes: PathBuf,
    pub scheme: LabelScheme,
    pub ml_threshold: f64,
    pub ignore_unknown: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub hidden_dims: Vec<usize>,
    pub seed: u64,
    /// Exclude the videos of this fold from training.
    pub folds_file: Option<PathBuf>,
    pub holdout: Option<usize>,
    pub out: PathBuf,
}

/// Train one model and write it (plus a per-epoch log) to disk.
pub fn cmd_train(opts: &TrainOptions) -> Result<PathBuf> {
    let vocab = VerbVocabulary::read(&opts.vocab).context("reading vocabulary")?;
    let votes = read_votes(&opts.votes, &vocab, opts.ignore_unknown).context("reading votes")?;
    let (mut instances, _) = ingest_features(&opts.features).context("reading features")?;

    match (&opts.folds_file, opts.holdout) {
        (Some(folds_file), Some(holdout)) => {
            let folds = FoldAssignment::read(folds_file).context("reading fold file")?;
            if holdout >= folds.fold_count {
                bail!(
                    "holdout fold {holdout} out of range (fold count {})",
                    folds.fold_count
                );
            }
            instances.retain(|i| folds.fold_of(&i.video_id) != Some(holdout));
            if instances.is_empty() {
                bail!("no training videos left after holding out fold {holdout}");
            }
        }
        (None, None) => {}
        _ => bail!("--folds-file and --holdout must be given together"),
    }

    let labelled = attach_labels(instances, &votes, &vocab, opts.scheme, opts.ml_threshold)
        .context("building training labels")?;
    let samples: Vec<(Vec<f64>, LabelVector)> = labelled
        .into_iter()
        .map(|(instance, label)| (instance.features, label))
        .collect();
    let config = TrainConfig {
        epochs: opts.epochs,
        batch_size: opts.batch_size,
        learning_rate: opts.learning_rate,
        momentum: opts.momentum,
        seed: opts.seed,
        loss: LossKind::for_scheme(opts.scheme)?,
        hidden_dims: opts.hidden_dims.clone(),
    };
    let outcome = train(&samples, &config).context("training")?;

    if let Some(parent) = opts.out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    save_model(&opts.out, &outcome.params, &vocab.fingerprint()).context("writing model")?;
    let log_path = opts.out.with_extension("log");
    let mut w = fs::File::create(&log_path)?;
    writeln!(w, "epoch\tmean_loss\twall_secs")?;
    for stats in &outcome.history {
        writeln!(
            w,
            "{}\t{}\t{:.6}",
            stats.epoch, stats.mean_loss, stats.wall_secs
        )?;
    }
    Ok(opts.out.clone())
}

/// Load a model and verify it against the vocabulary it is about to be used
/// with.
fn load_checked_model(model_path: &Path, vocab: &VerbVocabulary) -> Result<ModelParams> {
    let (params, fingerprint) = load_model(model_path).context("reading model")?;
    if params.output_dim() != vocab.len() {
        bail!(
            "model predicts {} verbs but the vocabulary has {}",
            params.output_dim(),
            vocab.len()
        );
    }
    if fingerprint != vocab.fingerprint() {
        bail!(
            "model was trained against a different vocabulary \
             (fingerprint {fingerprint} != {})",
            vocab.fingerprint()
        );
    }
    Ok(params)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricKind {
    Overlap,
    V2t,
    T2v,
}

impl std::str::FromStr for MetricKind {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "overlap" => Ok(MetricKind::Overlap),
            "v2t" => Ok(MetricKind::V2t),
            "t2v" => Ok(MetricKind::T2v),
            other => bail!("unknown metric '{other}' (expected overlap, v2t or t2v)"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub model: PathBuf,
    pub features: PathBuf,
    pub vocab: PathBuf,
    pub votes: PathBuf,
    /// Scheme the model was trained for; defines the accuracy ground truth.
    pub scheme: LabelScheme,
    pub ml_threshold: f64,
    pub ignore_unknown: bool,
    pub metrics: Vec<MetricKind>,
    pub alphas: Vec<f64>,
    pub t2v_n_max: usize,
    pub t2v_alpha: f64,
    pub out: PathBuf,
}

fn write_report(out_dir: &Path, stem: &str, report: &EvalReport) -> Result<()> {
    let tsv = fs::File::create(out_dir.join(format!("{stem}.tsv")))?;
    report.write_tsv(tsv)?;
    let json = serde_json::to_string_pretty(report)?;
    fs::write(out_dir.join(format!("{stem}.json")), json + "\n")?;
    Ok(())
}

/// Evaluate a saved model on a feature file, writing one report (TSV + JSON)
/// per metric. Returns `(stem, aggregate)` pairs in output order.
pub fn cmd_eval(opts: &EvalOptions) -> Result<Vec<(String, f64)>> {
    let vocab = VerbVocabulary::read(&opts.vocab).context("reading vocabulary")?;
    let votes = read_votes(&opts.votes, &vocab, opts.ignore_unknown).context("reading votes")?;
    let (instances, _) = ingest_features(&opts.features).context("reading features")?;
    let params = load_checked_model(&opts.model, &vocab)?;

    let predictions: Vec<LabelVector> = instances
        .iter()
        .map(|i| forward(&params, &i.features))
        .collect::<Result<_, _>>()
        .context("predicting")?;

    let gt_for = |scheme: LabelScheme| -> Result<Vec<LabelVector>> {
        Ok(
            attach_labels(instances.clone(), &votes, &vocab, scheme, opts.ml_threshold)
                .with_context(|| format!("building {scheme} ground truth"))?
                .into_iter()
                .map(|(_, label)| label)
                .collect(),
        )
    };

    fs::create_dir_all(&opts.out)?;
    let mut aggregates = Vec::new();
    for &metric in &opts.metrics {
        match metric {
            MetricKind::Overlap => {
                let gt = gt_for(opts.scheme)?;
                for &alpha in &opts.alphas {
                    let report = overlap_accuracy_report(&gt, &predictions, alpha)
                        .with_context(|| format!("overlap accuracy at alpha {alpha}"))?;
                    let stem =
                        format!("overlap_{}_alpha{alpha}", opts.scheme.name().to_lowercase());
                    aggregates.push((stem.clone(), report.aggregate));
                    write_report(&opts.out, &stem, &report)?;
                }
            }
            MetricKind::V2t => {
                let rows: Vec<V2tRow> = {
                    let mut rows = vec![V2tRow {
                        gt_scheme: LabelScheme::Sl,
                        alpha: 1.0,
                    }];
                    rows.extend(opts.alphas.iter().map(|&alpha| V2tRow {
                        gt_scheme: LabelScheme::Saml,
                        alpha,
                    }));
                    rows
                };
                for row in rows {
                    let gt = gt_for(row.gt_scheme)?;
                    let report = v2t_map(&gt, &predictions, row.alpha)
                        .with_context(|| format!("v2t row {}", row.id()))?;
                    let stem = format!("v2t_{}_{}", row.id(), opts.scheme.name().to_lowercase());
                    aggregates.push((stem.clone(), report.aggregate));
                    write_report(&opts.out, &stem, &report)?;
                }
            }
            MetricKind::T2v => {
                let gt = gt_for(LabelScheme::Saml)?;
                for n in 1..=opts.t2v_n_max {
                    let queries = enumerate_queries(&gt, n, opts.t2v_alpha)?;
                    if queries.is_empty() {
                        log::warn!("no {n}-verb queries co-occur at alpha {}", opts.t2v_alpha);
                        continue;
                    }
                    let report = t2v_map(&queries, &predictions, &gt, opts.t2v_alpha)
                        .with_context(|| format!("t2v at n={n}"))?;
                    let stem = format!("t2v_n{n}_{}", opts.scheme.name().to_lowercase());
                    aggregates.push((stem.clone(), report.aggregate));
                    write_report(&opts.out, &stem, &report)?;
                }
            }
        }
    }
    Ok(aggregates)
}

/// What to rank in `multiverb retrieve`.
#[derive(Debug, Clone)]
pub enum RetrieveMode {
    /// Rank verbs for one video's prediction.
    V2t { video_id: String },
    /// Rank videos against a multi-verb text query.
    T2v { query: String },
    /// Rank corpus videos against a query video, optionally excluding the
    /// query's own dataset.
    V2v {
        video_id: String,
        exclude_tag: Option<String>,
        cross_dataset: bool,
    },
}

#[derive(Debug, Clone)]
pub struct RetrieveOptions {
    pub model: PathBuf,
    pub features: PathBuf,
    pub vocab: PathBuf,
    pub mode: RetrieveMode,
    pub limit: Option<usize>,
    /// Output file; stdout when absent.
    pub out: Option<PathBuf>,
}

/// Parse a comma-separated verb query like `turn-on,rotate` into a binary
/// query vector.
fn parse_verb_query(query: &str, vocab: &VerbVocabulary) -> Result<QueryVector> {
    let mut indices = Vec::new();
    for verb in query.split(',').map(str::trim).filter(|v| !v.is_empty()) {
        let index = vocab
            .index_of(verb)
            .ok_or_else(|| anyhow!("verb '{verb}' is not in the vocabulary"))?;
        indices.push(index);
    }
    QueryVector::from_indices(&indices, vocab.len()).map_err(Into::into)
}

/// Run a retrieval query and write the ranked list as TSV.
pub fn cmd_retrieve(opts: &RetrieveOptions) -> Result<RankedList> {
    let vocab = VerbVocabulary::read(&opts.vocab).context("reading vocabulary")?;
    let (instances, _) = ingest_features(&opts.features).context("reading features")?;
    let params = load_checked_model(&opts.model, &vocab)?;

    let predict = |instance: &VideoInstance| forward(&params, &instance.features);
    let find = |video_id: &str| -> Result<&VideoInstance> {
        instances
            .iter()
            .find(|i| i.video_id == video_id)
            .ok_or_else(|| {
                anyhow!(
                    "video '{video_id}' not found in '{}'",
                    opts.features.display()
                )
            })
    };

    let mut ranked = match &opts.mode {
        RetrieveMode::V2t { video_id } => {
            let video = find(video_id)?;
            let prediction = predict(video)?;
            let entries = rank_verbs(&prediction)
                .into_iter()
                .map(|(j, distance)| {
                    (
                        vocab.verb(j).expect("index within vocabulary").to_string(),
                        distance,
                    )
                })
                .collect();
            RankedList::new(video_id.clone(), entries)?
        }
        RetrieveMode::T2v { query } => {
            let query_vector = parse_verb_query(query, &vocab)?;
            let query_label =
                LabelVector::new(LabelScheme::Predicted, query_vector.values().to_vec())?;
            let corpus = embedded_corpus(&instances, predict)?;
            v2v_retrieve(query, &query_label, &corpus, None)?
        }
        RetrieveMode::V2v {
            video_id,
            exclude_tag,
            cross_dataset,
        } => {
            let video = find(video_id)?;
            let exclude = if *cross_dataset {
                Some(video.dataset_tag.clone())
            } else {
                exclude_tag.clone()
            };
            let prediction = predict(video)?;
            let corpus = embedded_corpus(&instances, predict)?;
            v2v_retrieve(video_id, &prediction, &corpus, exclude.as_deref())?
        }
    };

    if let Some(limit) = opts.limit {
        ranked.truncate(limit);
    }
    match &opts.out {
        Some(path) => {
            let file =
                fs::File::create(path).with_context(|| format!("creating '{}'", path.display()))?;
            ranked.write_tsv(file)?;
        }
        None => {
            let stdout = std::io::stdout();
            ranked.write_tsv(stdout.lock())?;
        }
    }
    Ok(ranked)
}

fn embedded_corpus<F>(instances: &[VideoInstance], mut predict: F) -> Result<Vec<EmbeddedVideo>>
where
    F: FnMut(&VideoInstance) -> multiverb_core::Result<LabelVector>,
{
    instances
        .iter()
        .map(|instance| {
            Ok(EmbeddedVideo {
                video_id: instance.video_id.clone(),
                dataset_tag: instance.dataset_tag.clone(),
                label: predict(instance)?,
            })
        })
        .collect()
}
