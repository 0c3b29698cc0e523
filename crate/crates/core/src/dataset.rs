//! Video instances with feature vectors, synthetic dataset generation, and
//! stratified cross-validation folds.
//!
//! Feature files are full-precision decimal text so they diff cleanly and
//! round-trip exactly:
//!
//! ```text
//! d=<int> n=<int>
//! <video_id> <dataset_tag> <class_id> <v1> ... <vd>
//! ```
//!
//! Fold files are one `video_id fold_index` pair per line.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label_space::{build_label, LabelScheme, LabelVector, VerbVocabulary, VoteRecord};

/// Default size guard for feature files.
pub const DEFAULT_MAX_FEATURE_FILE_BYTES: u64 = 256 * 1024 * 1024;

/// One video segment: identity, provenance, class, and its fixed-dimensional
/// feature vector. Stands in for the output of a visual backbone.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoInstance {
    pub video_id: String,
    pub dataset_tag: String,
    pub class_id: String,
    pub features: Vec<f64>,
}

impl VideoInstance {
    pub fn new(
        video_id: impl Into<String>,
        dataset_tag: impl Into<String>,
        class_id: impl Into<String>,
        features: Vec<f64>,
    ) -> Result<Self> {
        let instance = Self {
            video_id: video_id.into(),
            dataset_tag: dataset_tag.into(),
            class_id: class_id.into(),
            features,
        };
        instance.validate()?;
        Ok(instance)
    }

    fn validate(&self) -> Result<()> {
        for field in [&self.video_id, &self.dataset_tag, &self.class_id] {
            if field.is_empty() || field.chars().any(char::is_whitespace) {
                return Err(Error::InvalidInput(format!(
                    "video field '{field}' is empty or contains whitespace"
                )));
            }
        }
        if self.features.is_empty() {
            return Err(Error::InvalidInput(format!(
                "video '{}' has no features",
                self.video_id
            )));
        }
        if let Some(v) = self.features.iter().find(|v| !v.is_finite()) {
            return Err(Error::NumericFailure {
                context: format!("feature value {v} of video '{}'", self.video_id),
            });
        }
        Ok(())
    }
}

/// Read a feature file. Returns the instances in file order together with the
/// feature dimension declared by the header.
pub fn ingest_features(path: impl AsRef<Path>) -> Result<(Vec<VideoInstance>, usize)> {
    ingest_features_with_limit(path, DEFAULT_MAX_FEATURE_FILE_BYTES)
}

/// As [`ingest_features`] with an explicit size guard.
pub fn ingest_features_with_limit(
    path: impl AsRef<Path>,
    max_bytes: u64,
) -> Result<(Vec<VideoInstance>, usize)> {
    let path = path.as_ref();
    let size = std::fs::metadata(path)?.len();
    if size > max_bytes {
        return Err(Error::FileTooLarge {
            path: path.display().to_string(),
            size,
            limit: max_bytes,
        });
    }
    let reader = BufReader::new(File::open(path)?);
    parse_features(reader).map_err(|e| e.with_path(path.display().to_string()))
}

fn parse_header_field(field: &str, key: &str, lineno: usize) -> Result<usize> {
    field
        .strip_prefix(key)
        .and_then(|rest| rest.strip_prefix('='))
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::malformed(lineno, format!("expected {key}=<int>, got '{field}'")))
}

fn parse_features(reader: impl BufRead) -> Result<(Vec<VideoInstance>, usize)> {
    let mut lines = reader.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::malformed(1, "empty feature file"))?;
    let header = header?;
    let mut fields = header.split_whitespace();
    let dim = parse_header_field(
        fields
            .next()
            .ok_or_else(|| Error::malformed(1, "missing d="))?,
        "d",
        1,
    )?;
    let count = parse_header_field(
        fields
            .next()
            .ok_or_else(|| Error::malformed(1, "missing n="))?,
        "n",
        1,
    )?;
    if dim == 0 {
        return Err(Error::malformed(1, "feature dimension must be positive"));
    }

    let mut instances = Vec::with_capacity(count);
    let mut seen_ids = BTreeSet::new();
    for (lineno, line) in lines {
        let lineno = lineno + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() != 3 + dim {
            return Err(Error::DimensionMismatch {
                context: format!("feature row at line {lineno}"),
                expected: 3 + dim,
                actual: fields.len(),
            });
        }
        let mut features = Vec::with_capacity(dim);
        for raw in &fields[3..] {
            let value: f64 = raw
                .parse()
                .map_err(|_| Error::malformed(lineno, format!("bad feature value '{raw}'")))?;
            if !value.is_finite() {
                return Err(Error::NumericFailure {
                    context: format!("feature value at line {lineno}"),
                });
            }
            features.push(value);
        }
        if !seen_ids.insert(fields[0].to_string()) {
            return Err(Error::DuplicateVideoId {
                video_id: fields[0].to_string(),
            });
        }
        instances.push(VideoInstance::new(
            fields[0], fields[1], fields[2], features,
        )?);
    }
    if instances.len() != count {
        return Err(Error::malformed(
            1,
            format!(
                "header declares n={count} but file has {} rows",
                instances.len()
            ),
        ));
    }
    Ok((instances, dim))
}

/// Write instances in the feature file format. Values are printed with the
/// shortest representation that parses back to the identical bits.
pub fn write_features(path: impl AsRef<Path>, instances: &[VideoInstance]) -> Result<()> {
    if instances.is_empty() {
        return Err(Error::InvalidInput("no instances to write".into()));
    }
    let dim = instances[0].features.len();
    let mut seen_ids = BTreeSet::new();
    for instance in instances {
        instance.validate()?;
        if instance.features.len() != dim {
            return Err(Error::DimensionMismatch {
                context: format!("features of video '{}'", instance.video_id),
                expected: dim,
                actual: instance.features.len(),
            });
        }
        if !seen_ids.insert(&instance.video_id) {
            return Err(Error::DuplicateVideoId {
                video_id: instance.video_id.clone(),
            });
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "d={dim} n={}", instances.len())?;
    for instance in instances {
        write!(
            w,
            "{} {} {}",
            instance.video_id, instance.dataset_tag, instance.class_id
        )?;
        for value in &instance.features {
            write!(w, " {value}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// Assignment of every video to exactly one cross-validation fold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub fold_count: usize,
    /// video_id -> fold index in `[0, fold_count)`.
    pub assignment: BTreeMap<String, usize>,
}

impl FoldAssignment {
    pub fn fold_of(&self, video_id: &str) -> Option<usize> {
        self.assignment.get(video_id).copied()
    }

    /// All video ids assigned to fold `k`, in id order.
    pub fn ids_in_fold(&self, k: usize) -> Vec<&str> {
        self.assignment
            .iter()
            .filter(|(_, &fold)| fold == k)
            .map(|(id, _)| id.as_str())
            .collect()
    }

    /// Write one `video_id fold_index` pair per line.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for (id, fold) in &self.assignment {
            writeln!(w, "{id} {fold}")?;
        }
        w.flush()?;
        Ok(())
    }

    /// Read a fold file. The fold count is inferred as `max index + 1`.
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let reader = BufReader::new(File::open(path)?);
        let mut assignment = BTreeMap::new();
        for (lineno, line) in reader.lines().enumerate() {
            let lineno = lineno + 1;
            let line = line?;
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let (id, fold) = trimmed
                .split_once(char::is_whitespace)
                .ok_or_else(|| Error::malformed(lineno, "expected 'video_id fold_index'"))
                .map_err(|e| e.with_path(path.display().to_string()))?;
            let fold: usize = fold
                .trim()
                .parse()
                .map_err(|_| Error::malformed(lineno, format!("bad fold index '{fold}'")))
                .map_err(|e| e.with_path(path.display().to_string()))?;
            if assignment.insert(id.to_string(), fold).is_some() {
                return Err(Error::DuplicateVideoId {
                    video_id: id.to_string(),
                });
            }
        }
        let fold_count = assignment.values().max().map_or(0, |m| m + 1);
        Ok(Self {
            fold_count,
            assignment,
        })
    }
}

/// Split videos into `fold_count` folds, stratified by class.
///
/// Within each class the videos are shuffled by the seeded generator and then
/// dealt round-robin, so per-class fold sizes differ by at most one. The
/// starting fold rotates across classes to spread remainders.
pub fn stratified_folds(
    instances: &[VideoInstance],
    fold_count: usize,
    seed: u64,
) -> Result<FoldAssignment> {
    if fold_count < 2 {
        return Err(Error::InvalidFoldCount { fold_count });
    }
    if instances.is_empty() {
        return Err(Error::InvalidInput("no instances to split".into()));
    }
    // classes in first-appearance order, videos in file order
    let mut class_order: Vec<&str> = Vec::new();
    let mut by_class: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    let mut seen_ids = BTreeSet::new();
    for instance in instances {
        if !seen_ids.insert(&instance.video_id) {
            return Err(Error::DuplicateVideoId {
                video_id: instance.video_id.clone(),
            });
        }
        let entry = by_class.entry(&instance.class_id).or_default();
        if entry.is_empty() {
            class_order.push(&instance.class_id);
        }
        entry.push(&instance.video_id);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = BTreeMap::new();
    for (class_index, class_id) in class_order.iter().enumerate() {
        let ids = by_class.get_mut(class_id).expect("class present");
        ids.shuffle(&mut rng);
        let start = class_index % fold_count;
        for (offset, id) in ids.iter().enumerate() {
            assignment.insert(id.to_string(), (start + offset) % fold_count);
        }
    }
    Ok(FoldAssignment {
        fold_count,
        assignment,
    })
}

/// Pair each instance with the ground-truth label of its class.
///
/// Labels are per-class: one vector is built per class and shared by all of
/// that class's videos.
pub fn attach_labels(
    instances: Vec<VideoInstance>,
    votes: &[VoteRecord],
    vocab: &VerbVocabulary,
    scheme: LabelScheme,
    ml_threshold: f64,
) -> Result<Vec<(VideoInstance, LabelVector)>> {
    let by_class: BTreeMap<&str, &VoteRecord> =
        votes.iter().map(|r| (r.class_id.as_str(), r)).collect();
    let mut cache: BTreeMap<String, LabelVector> = BTreeMap::new();
    let mut out = Vec::with_capacity(instances.len());
    for instance in instances {
        let label = match cache.get(&instance.class_id) {
            Some(label) => label.clone(),
            None => {
                let record = by_class.get(instance.class_id.as_str()).ok_or_else(|| {
                    Error::MissingVotes {
                        class_id: instance.class_id.clone(),
                    }
                })?;
                let label = build_label(record, vocab, scheme, ml_threshold)?;
                cache.insert(instance.class_id.clone(), label.clone());
                label
            }
        };
        out.push((instance, label));
    }
    Ok(out)
}

/// Recipe for a deterministic synthetic dataset.
///
/// Each class gets a random unit-norm centroid in feature space; every video
/// of the class is the centroid plus Gaussian noise of scale `noise_scale`.
/// Vote records are emitted verbatim from `vote_profiles`. The generator is a
/// seeded ChaCha8 stream, so identical specs produce identical output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub class_count: usize,
    pub videos_per_class: usize,
    pub feature_dim: usize,
    pub noise_scale: f64,
    pub seed: u64,
    #[serde(default = "default_dataset_tag")]
    pub dataset_tag: String,
    /// Optional explicit vocabulary; when empty, the sorted union of all
    /// profile verbs is used.
    #[serde(default)]
    pub vocabulary: Vec<String>,
    /// One vote record per class, in class order.
    pub vote_profiles: Vec<VoteRecord>,
}

fn default_dataset_tag() -> String {
    "synth".to_string()
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.class_count == 0 || self.videos_per_class == 0 || self.feature_dim == 0 {
            return Err(Error::InvalidInput(
                "class_count, videos_per_class and feature_dim must be positive".into(),
            ));
        }
        if !self.noise_scale.is_finite() || self.noise_scale < 0.0 {
            return Err(Error::InvalidInput(format!(
                "noise_scale must be finite and >= 0, got {}",
                self.noise_scale
            )));
        }
        if self.vote_profiles.len() != self.class_count {
            return Err(Error::InvalidInput(format!(
                "class_count is {} but {} vote profiles were given",
                self.class_count,
                self.vote_profiles.len()
            )));
        }
        let mut seen = BTreeSet::new();
        for profile in &self.vote_profiles {
            profile.validate()?;
            if !seen.insert(&profile.class_id) {
                return Err(Error::InvalidInput(format!(
                    "duplicate class '{}' in vote profiles",
                    profile.class_id
                )));
            }
        }
        if default_dataset_tag() != self.dataset_tag
            && self.dataset_tag.chars().any(char::is_whitespace)
        {
            return Err(Error::InvalidInput(
                "dataset_tag contains whitespace".into(),
            ));
        }
        Ok(())
    }

    /// The vocabulary this spec labels against: the explicit list when given,
    /// otherwise the sorted union of all profile verbs.
    pub fn vocabulary(&self) -> Result<VerbVocabulary> {
        if !self.vocabulary.is_empty() {
            return VerbVocabulary::new(self.vocabulary.clone());
        }
        let verbs: BTreeSet<String> = self
            .vote_profiles
            .iter()
            .flat_map(|p| p.verb_counts.keys().cloned())
            .collect();
        VerbVocabulary::new(verbs.into_iter().collect())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let spec: SyntheticSpec = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, self)?;
        w.flush()?;
        Ok(())
    }
}

/// Generate the synthetic dataset described by `spec`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(Vec<VideoInstance>, Vec<VoteRecord>)> {
    spec.validate()?;
    if spec.feature_dim < spec.class_count {
        log::warn!(
            "feature_dim {} < class_count {}: class centroids may be poorly separated",
            spec.feature_dim,
            spec.class_count
        );
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = StandardNormal;
    let mut instances = Vec::with_capacity(spec.class_count * spec.videos_per_class);
    for profile in &spec.vote_profiles {
        let mut centroid: Vec<f64> = (0..spec.feature_dim)
            .map(|_| normal.sample(&mut rng))
            .collect();
        let norm = centroid.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::NumericFailure {
                context: format!("degenerate centroid draw for class '{}'", profile.class_id),
            });
        }
        for v in &mut centroid {
            *v /= norm;
        }
        for video in 0..spec.videos_per_class {
            let features: Vec<f64> = centroid
                .iter()
                .map(|&c| {
                    let noise: f64 = normal.sample(&mut rng);
                    c + spec.noise_scale * noise
                })
                .collect();
            instances.push(VideoInstance::new(
                format!("{}_{video:03}", profile.class_id),
                spec.dataset_tag.clone(),
                profile.class_id.clone(),
                features,
            )?);
        }
    }
    Ok((instances, spec.vote_profiles.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap as Map;

    fn profile(class_id: &str, pairs: &[(&str, u32)], annotators: u32) -> VoteRecord {
        VoteRecord::new(
            class_id,
            pairs.iter().map(|(v, c)| (v.to_string(), *c)).collect(),
            annotators,
        )
        .unwrap()
    }

    fn small_spec(noise: f64, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            class_count: 2,
            videos_per_class: 5,
            feature_dim: 8,
            noise_scale: noise,
            seed,
            dataset_tag: "synth".into(),
            vocabulary: vec![],
            vote_profiles: vec![
                profile("open-jar", &[("open", 9), ("turn", 5)], 10),
                profile("pour-oil", &[("pour", 8), ("hold", 4)], 10),
            ],
        }
    }

    fn instance(id: &str, class: &str, features: Vec<f64>) -> VideoInstance {
        VideoInstance::new(id, "tag", class, features).unwrap()
    }

    #[test]
    fn generate_zero_noise_duplicates_centroid() {
        let (instances, votes) = generate_synthetic(&small_spec(0.0, 7)).unwrap();
        assert_eq!(instances.len(), 10);
        assert_eq!(votes.len(), 2);
        let class_a: Vec<_> = instances
            .iter()
            .filter(|i| i.class_id == "open-jar")
            .collect();
        assert_eq!(class_a.len(), 5);
        for v in &class_a[1..] {
            assert_eq!(v.features, class_a[0].features);
        }
        let class_b: Vec<_> = instances
            .iter()
            .filter(|i| i.class_id == "pour-oil")
            .collect();
        assert_ne!(class_a[0].features, class_b[0].features);
        // unit-norm centroids
        let norm: f64 = class_a[0]
            .features
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn generate_is_deterministic_per_seed() {
        let a = generate_synthetic(&small_spec(0.1, 7)).unwrap();
        let b = generate_synthetic(&small_spec(0.1, 7)).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&small_spec(0.1, 8)).unwrap();
        assert_ne!(a.0[0].features, c.0[0].features);
    }

    #[test]
    fn feature_file_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("features.txt");
        let (instances, _) = generate_synthetic(&small_spec(0.35, 99)).unwrap();
        write_features(&path, &instances).unwrap();
        let (back, dim) = ingest_features(&path).unwrap();
        assert_eq!(dim, 8);
        assert_eq!(back, instances);
    }

    #[test]
    fn ingest_rejects_defects() {
        let dir = tempfile::tempdir().unwrap();
        let write = |name: &str, body: &str| {
            let path = dir.path().join(name);
            std::fs::write(&path, body).unwrap();
            path
        };
        let ok = write("ok.txt", "d=2 n=1\nv1 t c 0.5 1.5\n");
        assert!(ingest_features(&ok).is_ok());

        let short_row = write("short.txt", "d=3 n=1\nv1 t c 0.5 1.5\n");
        assert!(matches!(
            ingest_features(&short_row),
            Err(Error::DimensionMismatch { .. })
        ));

        let dup = write("dup.txt", "d=1 n=2\nv1 t c 0.5\nv1 t c 0.7\n");
        assert!(matches!(
            ingest_features(&dup),
            Err(Error::DuplicateVideoId { .. })
        ));

        let nonfinite = write("inf.txt", "d=1 n=1\nv1 t c inf\n");
        assert!(matches!(
            ingest_features(&nonfinite),
            Err(Error::NumericFailure { .. })
        ));

        let bad_count = write("count.txt", "d=1 n=3\nv1 t c 0.5\n");
        assert!(ingest_features(&bad_count).is_err());

        let guarded = write("big.txt", "d=1 n=1\nv1 t c 0.5\n");
        assert!(matches!(
            ingest_features_with_limit(&guarded, 4),
            Err(Error::FileTooLarge { .. })
        ));
    }

    #[test]
    fn folds_balanced_within_class() {
        let mut instances = Vec::new();
        for i in 0..10 {
            instances.push(instance(&format!("a{i}"), "A", vec![0.0]));
        }
        let folds = stratified_folds(&instances, 5, 1).unwrap();
        let mut sizes = vec![0usize; 5];
        for fold in folds.assignment.values() {
            sizes[*fold] += 1;
        }
        assert_eq!(sizes, vec![2; 5]);
    }

    #[test]
    fn folds_pigeonhole_remainders() {
        let instances: Vec<_> = (0..7)
            .map(|i| instance(&format!("a{i}"), "A", vec![0.0]))
            .collect();
        let folds = stratified_folds(&instances, 5, 3).unwrap();
        let mut sizes = vec![0usize; 5];
        for fold in folds.assignment.values() {
            sizes[*fold] += 1;
        }
        sizes.sort_unstable();
        assert_eq!(sizes, vec![1, 1, 1, 2, 2]);
    }

    #[test]
    fn folds_stratify_each_class() {
        let mut instances = Vec::new();
        for i in 0..4 {
            instances.push(instance(&format!("a{i}"), "A", vec![0.0]));
        }
        for i in 0..6 {
            instances.push(instance(&format!("b{i}"), "B", vec![0.0]));
        }
        let folds = stratified_folds(&instances, 2, 11).unwrap();
        for class in ["A", "B"] {
            let mut per_fold = vec![0usize; 2];
            for instance in instances.iter().filter(|i| i.class_id == class) {
                per_fold[folds.fold_of(&instance.video_id).unwrap()] += 1;
            }
            let expected = if class == "A" { vec![2, 2] } else { vec![3, 3] };
            assert_eq!(per_fold, expected, "class {class}");
        }
    }

    #[test]
    fn folds_partition_all_videos() {
        let instances: Vec<_> = (0..23)
            .map(|i| {
                instance(
                    &format!("v{i}"),
                    if i % 3 == 0 { "A" } else { "B" },
                    vec![0.0],
                )
            })
            .collect();
        let folds = stratified_folds(&instances, 4, 5).unwrap();
        assert_eq!(folds.assignment.len(), instances.len());
        for instance in &instances {
            assert!(folds.fold_of(&instance.video_id).unwrap() < 4);
        }
    }

    #[test]
    fn folds_reject_bad_count_and_same_seed_repeats() {
        let instances: Vec<_> = (0..4)
            .map(|i| instance(&format!("v{i}"), "A", vec![0.0]))
            .collect();
        assert!(matches!(
            stratified_folds(&instances, 1, 0),
            Err(Error::InvalidFoldCount { fold_count: 1 })
        ));
        let a = stratified_folds(&instances, 2, 42).unwrap();
        let b = stratified_folds(&instances, 2, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fold_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("folds.txt");
        let instances: Vec<_> = (0..9)
            .map(|i| instance(&format!("v{i}"), "A", vec![0.0]))
            .collect();
        let folds = stratified_folds(&instances, 3, 17).unwrap();
        folds.write(&path).unwrap();
        let back = FoldAssignment::read(&path).unwrap();
        assert_eq!(back, folds);
    }

    #[test]
    fn attach_labels_broadcasts_per_class() {
        let vocab = VerbVocabulary::new(vec!["pour".into(), "fill".into(), "hold".into()]).unwrap();
        let votes = vec![profile(
            "pour-oil",
            &[("pour", 9), ("fill", 6), ("hold", 3)],
            9,
        )];
        let instances: Vec<_> = (0..3)
            .map(|i| instance(&format!("v{i}"), "pour-oil", vec![0.1 * f64::from(i)]))
            .collect();
        let labelled = attach_labels(instances, &votes, &vocab, LabelScheme::Saml, 0.5).unwrap();
        assert_eq!(labelled.len(), 3);
        for (_, label) in &labelled[1..] {
            assert_eq!(label, &labelled[0].1);
        }
        assert_eq!(labelled[0].1.values()[0], 1.0);
    }

    #[test]
    fn attach_labels_missing_class_errors() {
        let vocab = VerbVocabulary::new(vec!["pour".into(), "fill".into()]).unwrap();
        let votes = vec![profile("pour-oil", &[("pour", 9)], 9)];
        let instances = vec![instance("v0", "stir-pan", vec![0.0])];
        assert!(matches!(
            attach_labels(instances, &votes, &vocab, LabelScheme::Sl, 0.5),
            Err(Error::MissingVotes { .. })
        ));
    }

    #[test]
    fn synthetic_spec_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("spec.json");
        let spec = small_spec(0.25, 5);
        spec.write(&path).unwrap();
        assert_eq!(SyntheticSpec::read(&path).unwrap(), spec);
    }

    #[test]
    fn synthetic_spec_validation() {
        let mut spec = small_spec(0.0, 1);
        spec.class_count = 3;
        assert!(spec.validate().is_err());

        let mut spec = small_spec(0.0, 1);
        spec.noise_scale = -1.0;
        assert!(spec.validate().is_err());

        let mut spec = small_spec(0.0, 1);
        spec.vote_profiles[1].class_id = "open-jar".into();
        assert!(spec.validate().is_err());
    }

    #[test]
    fn derived_vocabulary_is_sorted_union() {
        let spec = small_spec(0.0, 1);
        let vocab = spec.vocabulary().unwrap();
        let verbs: Vec<_> = vocab.iter().collect();
        assert_eq!(verbs, vec!["hold", "open", "pour", "turn"]);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn stratified_fold_sizes_differ_by_at_most_one(
                class_sizes in proptest::collection::vec(1usize..12, 1..5),
                fold_count in 2usize..6,
                seed in 0u64..1000,
            ) {
                let mut instances = Vec::new();
                for (c, size) in class_sizes.iter().enumerate() {
                    for i in 0..*size {
                        instances.push(instance(&format!("c{c}v{i}"), &format!("class{c}"), vec![0.0]));
                    }
                }
                let folds = stratified_folds(&instances, fold_count, seed).unwrap();
                prop_assert_eq!(folds.assignment.len(), instances.len());
                for (c, _) in class_sizes.iter().enumerate() {
                    let class = format!("class{c}");
                    let mut per_fold = vec![0usize; fold_count];
                    for inst in instances.iter().filter(|i| i.class_id == class) {
                        per_fold[folds.fold_of(&inst.video_id).unwrap()] += 1;
                    }
                    let min = per_fold.iter().min().unwrap();
                    let max = per_fold.iter().max().unwrap();
                    prop_assert!(max - min <= 1, "class {} fold sizes {:?}", class, per_fold);
                }
            }

            #[test]
            fn feature_round_trip_exact(values in proptest::collection::vec(-1e6f64..1e6, 1..6)) {
                let dir = tempfile::tempdir().unwrap();
                let path = dir.path().join("f.txt");
                let inst = vec![VideoInstance::new("v0", "t", "c", values).unwrap()];
                write_features(&path, &inst).unwrap();
                let (back, _) = ingest_features(&path).unwrap();
                prop_assert_eq!(back, inst);
            }
        }
    }

    #[test]
    fn vote_record_map_type_is_ordered() {
        // BTreeMap keys iterate sorted, keeping text output deterministic
        let mut counts: Map<String, u32> = Map::new();
        counts.insert("z".into(), 1);
        counts.insert("a".into(), 2);
        let record = VoteRecord::new("c", counts, 5).unwrap();
        let keys: Vec<_> = record.verb_counts.keys().cloned().collect();
        assert_eq!(keys, vec!["a".to_string(), "z".to_string()]);
    }
}
