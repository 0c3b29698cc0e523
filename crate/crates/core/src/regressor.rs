//! The label regressor: a small feed-forward network mapping fixed-dimensional
//! video features onto verb-label predictions.
//!
//! The default architecture is a single affine layer (softmax or logistic
//! regression), optionally with rectifier hidden layers. One-hot targets are
//! learned with softmax cross entropy; binary and soft targets share the
//! sigmoid binary cross entropy, solved as multi-output regression. Training
//! is a single-threaded, seeded loop: identical data, config and seed produce
//! bitwise-identical parameters.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label_space::{LabelScheme, LabelVector};

/// Probabilities are clamped to `[EPSILON, 1 - EPSILON]` inside both losses to
/// keep the logarithms finite at saturation.
pub const EPSILON: f64 = 1e-7;

fn clamp_prob(p: f64) -> f64 {
    p.clamp(EPSILON, 1.0 - EPSILON)
}

/// Numerically stable logistic function.
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Activation applied to the final layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutputActivation {
    Softmax,
    Sigmoid,
}

impl OutputActivation {
    pub fn name(self) -> &'static str {
        match self {
            OutputActivation::Softmax => "softmax",
            OutputActivation::Sigmoid => "sigmoid",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "softmax" => Some(OutputActivation::Softmax),
            "sigmoid" => Some(OutputActivation::Sigmoid),
            _ => None,
        }
    }
}

/// Which training loss to use. The loss determines the output activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    SoftmaxCrossEntropy,
    SigmoidBce,
}

impl LossKind {
    pub fn output_activation(self) -> OutputActivation {
        match self {
            LossKind::SoftmaxCrossEntropy => OutputActivation::Softmax,
            LossKind::SigmoidBce => OutputActivation::Sigmoid,
        }
    }

    /// The loss that learns a given ground-truth scheme.
    pub fn for_scheme(scheme: LabelScheme) -> Result<Self> {
        match scheme {
            LabelScheme::Sl => Ok(LossKind::SoftmaxCrossEntropy),
            LabelScheme::Ml | LabelScheme::Saml => Ok(LossKind::SigmoidBce),
            LabelScheme::Predicted => Err(Error::InvalidInput(
                "PREDICTED labels cannot be training targets".into(),
            )),
        }
    }

    fn accepts(self, scheme: LabelScheme) -> bool {
        match self {
            LossKind::SoftmaxCrossEntropy => scheme == LabelScheme::Sl,
            LossKind::SigmoidBce => matches!(scheme, LabelScheme::Ml | LabelScheme::Saml),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LossKind::SoftmaxCrossEntropy => "softmax_ce",
            LossKind::SigmoidBce => "sigmoid_bce",
        }
    }
}

/// One affine layer: `out_dim x in_dim` weights (row-major) plus a bias per
/// output.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    fn affine(&self, input: &[f64]) -> Vec<f64> {
        let mut out = self.bias.clone();
        for (row, out_v) in out.iter_mut().enumerate() {
            let w = &self.weights[row * self.in_dim..(row + 1) * self.in_dim];
            let mut acc = 0.0;
            for (wi, xi) in w.iter().zip(input) {
                acc += wi * xi;
            }
            *out_v += acc;
        }
        out
    }
}

/// Parameters of the regressor `features -> R^D`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    layers: Vec<Layer>,
    output_activation: OutputActivation,
}

impl ModelParams {
    /// Initialize with weights drawn uniformly from
    /// `(-1/sqrt(fan_in), 1/sqrt(fan_in))` and zero biases, from a seeded
    /// ChaCha8 stream.
    pub fn init(
        layer_dims: &[usize],
        output_activation: OutputActivation,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::init_with_rng(layer_dims, output_activation, &mut rng)
    }

    pub(crate) fn init_with_rng(
        layer_dims: &[usize],
        output_activation: OutputActivation,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if layer_dims.len() < 2 {
            return Err(Error::InvalidInput(
                "layer_dims needs at least an input and an output dimension".into(),
            ));
        }
        if layer_dims.contains(&0) {
            return Err(Error::InvalidInput(
                "layer dimensions must be positive".into(),
            ));
        }
        let mut layers = Vec::with_capacity(layer_dims.len() - 1);
        for pair in layer_dims.windows(2) {
            let (in_dim, out_dim) = (pair[0], pair[1]);
            let scale = 1.0 / (in_dim as f64).sqrt();
            let mut layer = Layer::zeros(in_dim, out_dim);
            for w in &mut layer.weights {
                *w = rng.random_range(-scale..scale);
            }
            layers.push(layer);
        }
        Ok(Self {
            layers,
            output_activation,
        })
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.layers[0].in_dim];
        dims.extend(self.layers.iter().map(|l| l.out_dim));
        dims
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("at least one layer").out_dim
    }

    pub fn output_activation(&self) -> OutputActivation {
        self.output_activation
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Mutable parameter access, for external perturbation such as
    /// finite-difference probes. The caller keeps shapes intact.
    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    fn check_finite(&self) -> Result<()> {
        for (i, layer) in self.layers.iter().enumerate() {
            let finite = layer
                .weights
                .iter()
                .chain(&layer.bias)
                .all(|v| v.is_finite());
            if !finite {
                return Err(Error::NumericFailure {
                    context: format!("parameters of layer {i}"),
                });
            }
        }
        Ok(())
    }
}

/// Forward activations kept around for backpropagation: `post[0]` is the
/// input, `post[l]` the rectified output of layer `l`, and `pre[l]` the
/// pre-activation of layer `l`. The final entry of `post` holds
/// probabilities.
struct Trace {
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
}

fn forward_trace(params: &ModelParams, features: &[f64]) -> Result<Trace> {
    if features.len() != params.input_dim() {
        return Err(Error::DimensionMismatch {
            context: "forward input".into(),
            expected: params.input_dim(),
            actual: features.len(),
        });
    }
    let last = params.layers.len() - 1;
    let mut pre = Vec::with_capacity(params.layers.len());
    let mut post = Vec::with_capacity(params.layers.len() + 1);
    post.push(features.to_vec());
    for (l, layer) in params.layers.iter().enumerate() {
        let z = layer.affine(post.last().expect("input present"));
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericFailure {
                context: format!("pre-activation of layer {l}"),
            });
        }
        let a = if l == last {
            match params.output_activation {
                OutputActivation::Sigmoid => z.iter().map(|&v| sigmoid(v)).collect(),
                OutputActivation::Softmax => {
                    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = z.iter().map(|&v| (v - max).exp()).collect();
                    let sum: f64 = exps.iter().sum();
                    exps.iter().map(|&e| e / sum).collect()
                }
            }
        } else {
            z.iter().map(|&v| v.max(0.0)).collect()
        };
        pre.push(z);
        post.push(a);
    }
    Ok(Trace { pre, post })
}

/// Apply the model to one feature vector, yielding a `PREDICTED` label.
///
/// Softmax outputs sum to 1; sigmoid outputs are element-wise in (0,1).
pub fn forward(params: &ModelParams, features: &[f64]) -> Result<LabelVector> {
    let trace = forward_trace(params, features)?;
    let probs = trace.post.into_iter().next_back().expect("output layer");
    LabelVector::new(LabelScheme::Predicted, probs)
}

fn check_loss_pair(predicted: &LabelVector, target: &LabelVector, loss: LossKind) -> Result<()> {
    if predicted.len() != target.len() {
        return Err(Error::DimensionMismatch {
            context: "loss inputs".into(),
            expected: target.len(),
            actual: predicted.len(),
        });
    }
    if !loss.accepts(target.scheme()) {
        return Err(Error::LossSchemeMismatch {
            loss: loss.name().into(),
            scheme: target.scheme().to_string(),
        });
    }
    Ok(())
}

/// Cross entropy of softmax scores against a one-hot target:
/// `-ln p[j*]` at the hot index, with epsilon clamping.
pub fn loss_softmax_ce(predicted: &LabelVector, target: &LabelVector) -> Result<f64> {
    check_loss_pair(predicted, target, LossKind::SoftmaxCrossEntropy)?;
    let hot = target.hot_index()?;
    Ok(-clamp_prob(predicted.values()[hot]).ln())
}

/// Sigmoid binary cross entropy, averaged over components. Well-defined for
/// soft targets in `[0,1]`, so it learns ML and SAML alike.
pub fn loss_sigmoid_bce(predicted: &LabelVector, target: &LabelVector) -> Result<f64> {
    check_loss_pair(predicted, target, LossKind::SigmoidBce)?;
    let d = target.len() as f64;
    let mut total = 0.0;
    for (&p, &t) in predicted.values().iter().zip(target.values()) {
        let p = clamp_prob(p);
        total += -(t * p.ln() + (1.0 - t) * (1.0 - p).ln());
    }
    Ok(total / d)
}

/// Parameter-shaped gradient buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

impl Gradients {
    fn zeros_like(params: &ModelParams) -> Self {
        Self {
            layers: params
                .layers
                .iter()
                .map(|l| Layer::zeros(l.in_dim, l.out_dim))
                .collect(),
        }
    }

    pub fn norm(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias))
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    fn scale(&mut self, factor: f64) {
        for layer in &mut self.layers {
            for w in &mut layer.weights {
                *w *= factor;
            }
            for b in &mut layer.bias {
                *b *= factor;
            }
        }
    }
}

/// One training example: a feature vector and its target label.
pub type Sample = (Vec<f64>, LabelVector);

/// Exact analytic gradient of the mean batch loss with respect to every
/// parameter, computed by backpropagation.
pub fn grad(params: &ModelParams, batch: &[Sample], loss: LossKind) -> Result<Gradients> {
    grad_with_loss(params, batch, loss).map(|(g, _)| g)
}

/// Backpropagation that also reports the mean batch loss of the pass.
pub fn grad_with_loss(
    params: &ModelParams,
    batch: &[Sample],
    loss: LossKind,
) -> Result<(Gradients, f64)> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let d = params.output_dim();
    let mut grads = Gradients::zeros_like(params);
    let mut loss_sum = 0.0;
    for (features, target) in batch {
        if target.len() != d {
            return Err(Error::DimensionMismatch {
                context: "target length".into(),
                expected: d,
                actual: target.len(),
            });
        }
        if !loss.accepts(target.scheme()) {
            return Err(Error::LossSchemeMismatch {
                loss: loss.name().into(),
                scheme: target.scheme().to_string(),
            });
        }
        let trace = forward_trace(params, features)?;
        let probs = trace.post.last().expect("output layer");

        loss_sum += match loss {
            LossKind::SoftmaxCrossEntropy => {
                let hot = target.hot_index()?;
                -clamp_prob(probs[hot]).ln()
            }
            LossKind::SigmoidBce => {
                let mut total = 0.0;
                for (&p, &t) in probs.iter().zip(target.values()) {
                    let p = clamp_prob(p);
                    total += -(t * p.ln() + (1.0 - t) * (1.0 - p).ln());
                }
                total / d as f64
            }
        };

        // Output delta dL/dz for the final pre-activation. Both losses reduce
        // to (p - t), scaled by 1/D for the component-averaged BCE.
        let mut delta: Vec<f64> = match loss {
            LossKind::SoftmaxCrossEntropy => probs
                .iter()
                .zip(target.values())
                .map(|(&p, &t)| p - t)
                .collect(),
            LossKind::SigmoidBce => probs
                .iter()
                .zip(target.values())
                .map(|(&p, &t)| (p - t) / d as f64)
                .collect(),
        };

        for l in (0..params.layers.len()).rev() {
            let layer = &params.layers[l];
            let input = &trace.post[l];
            let grad_layer = &mut grads.layers[l];
            for (row, &dz) in delta.iter().enumerate() {
                grad_layer.bias[row] += dz;
                let w_row = &mut grad_layer.weights[row * layer.in_dim..(row + 1) * layer.in_dim];
                for (wg, &xi) in w_row.iter_mut().zip(input) {
                    *wg += dz * xi;
                }
            }
            if l > 0 {
                let mut prev = vec![0.0; layer.in_dim];
                for (row, &dz) in delta.iter().enumerate() {
                    let w_row = &layer.weights[row * layer.in_dim..(row + 1) * layer.in_dim];
                    for (p, &w) in prev.iter_mut().zip(w_row) {
                        *p += w * dz;
                    }
                }
                // rectifier derivative on the previous pre-activation
                for (p, &z) in prev.iter_mut().zip(&trace.pre[l - 1]) {
                    if z <= 0.0 {
                        *p = 0.0;
                    }
                }
                delta = prev;
            }
        }
    }
    let inv = 1.0 / batch.len() as f64;
    grads.scale(inv);
    Ok((grads, loss_sum * inv))
}

/// Training hyperparameters. The architecture is `[d, hidden_dims.., D]` with
/// rectifier hidden activations; `d` and `D` are inferred from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    pub loss: LossKind,
    pub hidden_dims: Vec<usize>,
}

impl TrainConfig {
    /// Documented defaults: 100 epochs, batch 16, learning rate 0.1,
    /// momentum 0.9, no hidden layer.
    pub fn new(loss: LossKind, seed: u64) -> Self {
        Self {
            epochs: 100,
            batch_size: 16,
            learning_rate: 0.1,
            momentum: 0.9,
            seed,
            loss,
            hidden_dims: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidInput("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidInput("batch_size must be >= 1".into()));
        }
        // learning_rate 0 is allowed: it leaves the initialization untouched,
        // which is a tested contract.
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::InvalidInput(format!(
                "learning_rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        if !self.momentum.is_finite() || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidInput(format!(
                "momentum must be in [0,1), got {}",
                self.momentum
            )));
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::InvalidInput(
                "hidden dimensions must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Per-epoch training statistics; the wall time is informational and not part
/// of any reproducibility contract.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub wall_secs: f64,
}

/// The result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub history: Vec<EpochStats>,
}

/// Train a model with seeded mini-batch gradient descent with momentum.
///
/// All targets must share one scheme compatible with the configured loss.
/// Initialization and epoch shuffling draw from a single ChaCha8 stream
/// seeded by `config.seed`, so identical inputs reproduce identical
/// parameters bit for bit.
pub fn train(data: &[Sample], config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidInput("no training data".into()));
    }
    let scheme = data[0].1.scheme();
    let input_dim = data[0].0.len();
    let output_dim = data[0].1.len();
    if input_dim == 0 {
        return Err(Error::InvalidInput("empty feature vectors".into()));
    }
    for (features, target) in data {
        if features.len() != input_dim {
            return Err(Error::DimensionMismatch {
                context: "training features".into(),
                expected: input_dim,
                actual: features.len(),
            });
        }
        if target.len() != output_dim {
            return Err(Error::DimensionMismatch {
                context: "training targets".into(),
                expected: output_dim,
                actual: target.len(),
            });
        }
        if target.scheme() != scheme {
            return Err(Error::InvalidInput(format!(
                "mixed target schemes: {} and {}",
                scheme,
                target.scheme()
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericFailure {
                context: "training features".into(),
            });
        }
    }
    if !config.loss.accepts(scheme) {
        return Err(Error::LossSchemeMismatch {
            loss: config.loss.name().into(),
            scheme: scheme.to_string(),
        });
    }

    let mut layer_dims = Vec::with_capacity(config.hidden_dims.len() + 2);
    layer_dims.push(input_dim);
    layer_dims.extend_from_slice(&config.hidden_dims);
    layer_dims.push(output_dim);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params =
        ModelParams::init_with_rng(&layer_dims, config.loss.output_activation(), &mut rng)?;
    let mut velocity = Gradients::zeros_like(&params);

    let mut indices: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut batch: Vec<Sample> = Vec::with_capacity(config.batch_size);

    for epoch in 0..config.epochs {
        let start = Instant::now();
        indices.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in indices.chunks(config.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| data[i].clone()));
            let (grads, batch_loss) = grad_with_loss(&params, &batch, config.loss)?;
            loss_sum += batch_loss * chunk.len() as f64;
            for (layer, (v, g)) in params
                .layers
                .iter_mut()
                .zip(velocity.layers.iter_mut().zip(&grads.layers))
            {
                for ((w, vw), &gw) in layer.weights.iter_mut().zip(&mut v.weights).zip(&g.weights) {
                    *vw = config.momentum * *vw + gw;
                    *w -= config.learning_rate * *vw;
                }
                for ((b, vb), &gb) in layer.bias.iter_mut().zip(&mut v.bias).zip(&g.bias) {
                    *vb = config.momentum * *vb + gb;
                    *b -= config.learning_rate * *vb;
                }
            }
        }
        let mean_loss = loss_sum / data.len() as f64;
        if !mean_loss.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        let stats = EpochStats {
            epoch,
            mean_loss,
            wall_secs: start.elapsed().as_secs_f64(),
        };
        log::debug!("epoch {} mean_loss {:.6}", stats.epoch, stats.mean_loss);
        history.push(stats);
    }
    params.check_finite()?;
    Ok(TrainOutcome { params, history })
}

// ---------------------------------------------------------------------------
// Model file
//
//   multiverb-model v1
//   dims <d> [<h>...] <D>
//   activation softmax|sigmoid
//   fingerprint <hex64>
//   layer <i>
//   <in_dim weights>        (out_dim rows)
//   bias <out_dim values>
//
// Values use the shortest decimal representation that parses back to the
// identical bits, so load(save(p)) == p exactly.
// ---------------------------------------------------------------------------

const MODEL_MAGIC: &str = "multiverb-model v1";

/// Serialize parameters together with the fingerprint of the vocabulary they
/// were trained against.
pub fn save_model(
    path: impl AsRef<Path>,
    params: &ModelParams,
    vocab_fingerprint: &str,
) -> Result<()> {
    params.check_finite()?;
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{MODEL_MAGIC}")?;
    write!(w, "dims")?;
    for dim in params.layer_dims() {
        write!(w, " {dim}")?;
    }
    writeln!(w)?;
    writeln!(w, "activation {}", params.output_activation.name())?;
    writeln!(w, "fingerprint {vocab_fingerprint}")?;
    for (i, layer) in params.layers.iter().enumerate() {
        writeln!(w, "layer {i}")?;
        for row in 0..layer.out_dim {
            let weights = &layer.weights[row * layer.in_dim..(row + 1) * layer.in_dim];
            let mut first = true;
            for value in weights {
                if !first {
                    write!(w, " ")?;
                }
                write!(w, "{value}")?;
                first = false;
            }
            writeln!(w)?;
        }
        write!(w, "bias")?;
        for value in &layer.bias {
            write!(w, " {value}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// Load a model file, returning the parameters and the vocabulary fingerprint
/// recorded at save time.
pub fn load_model(path: impl AsRef<Path>) -> Result<(ModelParams, String)> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    parse_model(reader).map_err(|e| e.with_path(path.display().to_string()))
}

fn parse_model(reader: impl BufRead) -> Result<(ModelParams, String)> {
    let mut lines = reader.lines().enumerate();
    let mut next_line = |expected: &str| -> Result<(usize, String)> {
        match lines.next() {
            Some((lineno, line)) => Ok((lineno + 1, line?)),
            None => Err(Error::malformed(
                0,
                format!("truncated file, expected {expected}"),
            )),
        }
    };

    let (lineno, magic) = next_line("header")?;
    if magic.trim() != MODEL_MAGIC {
        return Err(Error::malformed(
            lineno,
            format!("bad header '{}'", magic.trim()),
        ));
    }
    let (lineno, dims_line) = next_line("dims")?;
    let mut fields = dims_line.split_whitespace();
    if fields.next() != Some("dims") {
        return Err(Error::malformed(lineno, "expected 'dims'"));
    }
    let dims: Vec<usize> = fields
        .map(|f| {
            f.parse()
                .map_err(|_| Error::malformed(lineno, format!("bad dim '{f}'")))
        })
        .collect::<Result<_>>()?;
    if dims.len() < 2 || dims.contains(&0) {
        return Err(Error::malformed(
            lineno,
            "dims must list at least two positive sizes",
        ));
    }
    let (lineno, act_line) = next_line("activation")?;
    let activation = act_line
        .strip_prefix("activation ")
        .and_then(|s| OutputActivation::parse(s.trim()))
        .ok_or_else(|| Error::malformed(lineno, "expected 'activation softmax|sigmoid'"))?;
    let (lineno, fp_line) = next_line("fingerprint")?;
    let fingerprint = fp_line
        .strip_prefix("fingerprint ")
        .map(|s| s.trim().to_string())
        .ok_or_else(|| Error::malformed(lineno, "expected 'fingerprint <hex>'"))?;

    let mut layers = Vec::with_capacity(dims.len() - 1);
    for (i, pair) in dims.windows(2).enumerate() {
        let (in_dim, out_dim) = (pair[0], pair[1]);
        let (lineno, marker) = next_line("layer marker")?;
        if marker.trim() != format!("layer {i}") {
            return Err(Error::malformed(lineno, format!("expected 'layer {i}'")));
        }
        let mut layer = Layer::zeros(in_dim, out_dim);
        for row in 0..out_dim {
            let (lineno, line) = next_line("weight row")?;
            let values: Vec<f64> = line
                .split_whitespace()
                .map(|f| {
                    f.parse()
                        .map_err(|_| Error::malformed(lineno, format!("bad weight '{f}'")))
                })
                .collect::<Result<_>>()?;
            if values.len() != in_dim {
                return Err(Error::DimensionMismatch {
                    context: format!("weight row {row} of layer {i} at line {lineno}"),
                    expected: in_dim,
                    actual: values.len(),
                });
            }
            layer.weights[row * in_dim..(row + 1) * in_dim].copy_from_slice(&values);
        }
        let (lineno, bias_line) = next_line("bias row")?;
        let rest = bias_line
            .strip_prefix("bias")
            .ok_or_else(|| Error::malformed(lineno, "expected 'bias ...'"))?;
        let bias: Vec<f64> = rest
            .split_whitespace()
            .map(|f| {
                f.parse()
                    .map_err(|_| Error::malformed(lineno, format!("bad bias '{f}'")))
            })
            .collect::<Result<_>>()?;
        if bias.len() != out_dim {
            return Err(Error::DimensionMismatch {
                context: format!("bias of layer {i} at line {lineno}"),
                expected: out_dim,
                actual: bias.len(),
            });
        }
        layer.bias = bias;
        layers.push(layer);
    }
    for (lineno, line) in lines {
        if !line?.trim().is_empty() {
            return Err(Error::malformed(
                lineno + 1,
                "trailing content after last layer",
            ));
        }
    }
    let params = ModelParams {
        layers,
        output_activation: activation,
    };
    params.check_finite()?;
    Ok((params, fingerprint))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn predicted(values: Vec<f64>) -> LabelVector {
        LabelVector::new(LabelScheme::Predicted, values).unwrap()
    }

    fn sl(hot: usize, d: usize) -> LabelVector {
        let mut v = vec![0.0; d];
        v[hot] = 1.0;
        LabelVector::new(LabelScheme::Sl, v).unwrap()
    }

    fn zero_model(d_in: usize, d_out: usize, activation: OutputActivation) -> ModelParams {
        ModelParams {
            layers: vec![Layer::zeros(d_in, d_out)],
            output_activation: activation,
        }
    }

    #[test]
    fn forward_zero_params_sigmoid_is_half() {
        let params = zero_model(4, 3, OutputActivation::Sigmoid);
        let out = forward(&params, &[1.0, -2.0, 0.5, 3.0]).unwrap();
        assert_eq!(out.values(), &[0.5, 0.5, 0.5]);
    }

    #[test]
    fn forward_zero_params_softmax_is_uniform() {
        let params = zero_model(4, 3, OutputActivation::Softmax);
        let out = forward(&params, &[1.0, -2.0, 0.5, 3.0]).unwrap();
        for &v in out.values() {
            assert_relative_eq!(v, 1.0 / 3.0, max_relative = 1e-12);
        }
        let sum: f64 = out.values().iter().sum();
        assert_relative_eq!(sum, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn forward_identity_weights_sigmoid() {
        let mut params = zero_model(2, 2, OutputActivation::Sigmoid);
        params.layers[0].weights = vec![1.0, 0.0, 0.0, 1.0];
        let out = forward(&params, &[1.0, 0.0]).unwrap();
        assert_relative_eq!(out.values()[0], 0.7310585786300049, max_relative = 1e-12);
        assert_relative_eq!(out.values()[1], 0.5, max_relative = 1e-12);
    }

    #[test]
    fn forward_rejects_dimension_mismatch() {
        let params = zero_model(3, 2, OutputActivation::Sigmoid);
        assert!(matches!(
            forward(&params, &[1.0, 2.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn softmax_ce_examples() {
        let uniform = predicted(vec![1.0 / 3.0; 3]);
        for hot in 0..3 {
            let loss = loss_softmax_ce(&uniform, &sl(hot, 3)).unwrap();
            assert_relative_eq!(loss, 3f64.ln(), max_relative = 1e-12);
        }
        let perfect = predicted(vec![1.0, 0.0, 0.0]);
        let loss = loss_softmax_ce(&perfect, &sl(0, 3)).unwrap();
        assert!(loss.abs() < 1e-6, "clamped perfect prediction, got {loss}");
        let off = predicted(vec![0.7, 0.2, 0.1]);
        let loss = loss_softmax_ce(&off, &sl(1, 3)).unwrap();
        assert_relative_eq!(loss, -(0.2f64.ln()), max_relative = 1e-12);
    }

    #[test]
    fn sigmoid_bce_examples() {
        let half = predicted(vec![0.5, 0.5]);
        let target = LabelVector::new(LabelScheme::Saml, vec![0.5, 0.5]).unwrap();
        assert_relative_eq!(
            loss_sigmoid_bce(&half, &target).unwrap(),
            2f64.ln(),
            max_relative = 1e-12
        );

        let ml = LabelVector::new(LabelScheme::Ml, vec![1.0, 0.0]).unwrap();
        let match_exact = predicted(vec![1.0, 0.0]);
        assert!(loss_sigmoid_bce(&match_exact, &ml).unwrap() < 1e-5);

        let p = predicted(vec![0.8, 0.3]);
        let expected = (-(0.8f64.ln()) + -(0.7f64.ln())) / 2.0;
        assert_relative_eq!(
            loss_sigmoid_bce(&p, &ml).unwrap(),
            expected,
            max_relative = 1e-12
        );
        assert_relative_eq!(expected, 0.2899, epsilon = 1e-4);
    }

    #[test]
    fn bce_minimum_at_target() {
        let target = LabelVector::new(LabelScheme::Saml, vec![0.3, 0.8, 0.05]).unwrap();
        let at_target = predicted(target.values().to_vec());
        let base = loss_sigmoid_bce(&at_target, &target).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let candidate = predicted((0..3).map(|_| rng.random_range(0.0..1.0)).collect());
            assert!(loss_sigmoid_bce(&candidate, &target).unwrap() >= base);
        }
    }

    #[test]
    fn loss_scheme_mismatch_rejected() {
        let p = predicted(vec![0.5, 0.5]);
        let saml = LabelVector::new(LabelScheme::Saml, vec![0.5, 0.5]).unwrap();
        assert!(matches!(
            loss_softmax_ce(&p, &saml),
            Err(Error::LossSchemeMismatch { .. })
        ));
        let one_hot = sl(0, 2);
        assert!(matches!(
            loss_sigmoid_bce(&p, &one_hot),
            Err(Error::LossSchemeMismatch { .. })
        ));
        assert!(matches!(
            grad(
                &zero_model(2, 2, OutputActivation::Softmax),
                &[(vec![1.0, 0.0], saml)],
                LossKind::SoftmaxCrossEntropy
            ),
            Err(Error::LossSchemeMismatch { .. })
        ));
    }

    /// Central finite differences of the mean batch loss, the independent
    /// oracle for the analytic gradient.
    fn fd_gradient(params: &ModelParams, batch: &[Sample], loss: LossKind, step: f64) -> Gradients {
        let mut result = Gradients::zeros_like(params);
        let eval = |p: &ModelParams| -> f64 {
            let mut total = 0.0;
            for (features, target) in batch {
                let out = forward(p, features).unwrap();
                total += match loss {
                    LossKind::SoftmaxCrossEntropy => loss_softmax_ce(&out, target).unwrap(),
                    LossKind::SigmoidBce => loss_sigmoid_bce(&out, target).unwrap(),
                };
            }
            total / batch.len() as f64
        };
        for l in 0..params.layers.len() {
            for idx in 0..params.layers[l].weights.len() {
                let mut plus = params.clone();
                plus.layers[l].weights[idx] += step;
                let mut minus = params.clone();
                minus.layers[l].weights[idx] -= step;
                result.layers[l].weights[idx] = (eval(&plus) - eval(&minus)) / (2.0 * step);
            }
            for idx in 0..params.layers[l].bias.len() {
                let mut plus = params.clone();
                plus.layers[l].bias[idx] += step;
                let mut minus = params.clone();
                minus.layers[l].bias[idx] -= step;
                result.layers[l].bias[idx] = (eval(&plus) - eval(&minus)) / (2.0 * step);
            }
        }
        result
    }

    fn assert_grad_close(analytic: &Gradients, fd: &Gradients) {
        for (a_layer, f_layer) in analytic.layers.iter().zip(&fd.layers) {
            for (&a, &f) in a_layer
                .weights
                .iter()
                .chain(&a_layer.bias)
                .zip(f_layer.weights.iter().chain(&f_layer.bias))
            {
                let denom = a.abs().max(f.abs()).max(1e-4);
                let rel = (a - f).abs() / denom;
                assert!(
                    rel <= 1e-4,
                    "gradient mismatch: analytic {a} vs fd {f} (rel {rel})"
                );
            }
        }
    }

    fn random_batch(
        rng: &mut ChaCha8Rng,
        d_in: usize,
        d_out: usize,
        len: usize,
        loss: LossKind,
    ) -> Vec<Sample> {
        (0..len)
            .map(|_| {
                let features: Vec<f64> = (0..d_in).map(|_| rng.random_range(-1.5..1.5)).collect();
                let target = match loss {
                    LossKind::SoftmaxCrossEntropy => sl(rng.random_range(0..d_out), d_out),
                    LossKind::SigmoidBce => LabelVector::new(
                        LabelScheme::Saml,
                        (0..d_out)
                            .map(|j| {
                                if j == 0 {
                                    1.0
                                } else {
                                    rng.random_range(0.0..1.0)
                                }
                            })
                            .collect(),
                    )
                    .unwrap(),
                };
                (features, target)
            })
            .collect()
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for case in 0..8 {
            let d_in = rng.random_range(2..=6);
            let d_out = rng.random_range(2..=6);
            let hidden = if case % 2 == 0 {
                vec![]
            } else {
                vec![rng.random_range(2..=5)]
            };
            for loss in [LossKind::SoftmaxCrossEntropy, LossKind::SigmoidBce] {
                let mut dims = vec![d_in];
                dims.extend(&hidden);
                dims.push(d_out);
                let params =
                    ModelParams::init(&dims, loss.output_activation(), rng.random()).unwrap();
                let batch = random_batch(&mut rng, d_in, d_out, 3, loss);
                let analytic = grad(&params, &batch, loss).unwrap();
                let fd = fd_gradient(&params, &batch, loss, 1e-5);
                assert_grad_close(&analytic, &fd);
            }
        }
    }

    #[test]
    fn gradient_zero_when_prediction_matches_target() {
        // single layer, weights chosen so sigmoid output hits the target
        let mut params = zero_model(1, 2, OutputActivation::Sigmoid);
        params.layers[0].weights = vec![0.0, 0.0];
        params.layers[0].bias = vec![0.0, 0.0];
        let target = LabelVector::new(LabelScheme::Saml, vec![0.5, 0.5]).unwrap();
        let g = grad(&params, &[(vec![1.0], target)], LossKind::SigmoidBce).unwrap();
        assert!(g.norm() < 1e-12, "norm {}", g.norm());
    }

    #[test]
    fn gradient_of_duplicated_batch_matches() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let params = ModelParams::init(&[3, 4], OutputActivation::Sigmoid, 5).unwrap();
        let base = random_batch(&mut rng, 3, 4, 2, LossKind::SigmoidBce);
        let mut doubled = base.clone();
        doubled.extend(base.clone());
        let g1 = grad(&params, &base, LossKind::SigmoidBce).unwrap();
        let g2 = grad(&params, &doubled, LossKind::SigmoidBce).unwrap();
        for (a, b) in g1.layers.iter().zip(&g2.layers) {
            for (&x, &y) in a
                .weights
                .iter()
                .chain(&a.bias)
                .zip(b.weights.iter().chain(&b.bias))
            {
                assert_relative_eq!(x, y, max_relative = 1e-12, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn empty_batch_rejected() {
        let params = zero_model(2, 2, OutputActivation::Sigmoid);
        assert!(grad(&params, &[], LossKind::SigmoidBce).is_err());
    }

    fn separable_sl_data() -> Vec<Sample> {
        let mut data = Vec::new();
        for i in 0..10 {
            let wiggle = 0.01 * f64::from(i);
            data.push((vec![1.0 + wiggle, 0.0], sl(0, 2)));
            data.push((vec![0.0, 1.0 + wiggle], sl(1, 2)));
        }
        data
    }

    #[test]
    fn train_reaches_full_accuracy_on_separable_data() {
        let data = separable_sl_data();
        let config = TrainConfig::new(LossKind::SoftmaxCrossEntropy, 3);
        let outcome = train(&data, &config).unwrap();
        for (features, target) in &data {
            let out = forward(&outcome.params, features).unwrap();
            let argmax = out
                .values()
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(argmax, target.hot_index().unwrap());
        }
        assert_eq!(outcome.history.len(), 100);
    }

    #[test]
    fn train_zero_learning_rate_keeps_initialization() {
        let data = separable_sl_data();
        let mut config = TrainConfig::new(LossKind::SoftmaxCrossEntropy, 3);
        config.learning_rate = 0.0;
        config.epochs = 5;
        let outcome = train(&data, &config).unwrap();
        // reproduce the initialization: same seed, same draw sequence
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let init =
            ModelParams::init_with_rng(&[2, 2], OutputActivation::Softmax, &mut rng).unwrap();
        assert_eq!(outcome.params, init);
    }

    #[test]
    fn train_is_deterministic() {
        let data = separable_sl_data();
        let config = TrainConfig::new(LossKind::SoftmaxCrossEntropy, 11);
        let a = train(&data, &config).unwrap();
        let b = train(&data, &config).unwrap();
        assert_eq!(a.params, b.params);
        let other = TrainConfig::new(LossKind::SoftmaxCrossEntropy, 12);
        let c = train(&data, &other).unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn train_loss_non_increasing_for_small_lr_full_batch() {
        let data = separable_sl_data();
        let mut config = TrainConfig::new(LossKind::SoftmaxCrossEntropy, 7);
        config.learning_rate = 1e-3;
        config.momentum = 0.0;
        config.batch_size = data.len();
        config.epochs = 50;
        let outcome = train(&data, &config).unwrap();
        for pair in outcome.history.windows(2) {
            assert!(
                pair[1].mean_loss <= pair[0].mean_loss + 1e-12,
                "loss increased: {} -> {}",
                pair[0].mean_loss,
                pair[1].mean_loss
            );
        }
    }

    #[test]
    fn model_file_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.txt");
        let params = ModelParams::init(&[5, 4, 3], OutputActivation::Sigmoid, 21).unwrap();
        save_model(&path, &params, "deadbeefdeadbeef").unwrap();
        let (back, fp) = load_model(&path).unwrap();
        assert_eq!(back, params);
        assert_eq!(fp, "deadbeefdeadbeef");
    }

    #[test]
    fn model_file_rejects_truncation_and_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.txt");
        let params = ModelParams::init(&[3, 2], OutputActivation::Softmax, 1).unwrap();
        save_model(&path, &params, "00").unwrap();
        let full = std::fs::read_to_string(&path).unwrap();

        let truncated: String = full.lines().take(4).collect::<Vec<_>>().join("\n");
        std::fs::write(&path, truncated).unwrap();
        assert!(matches!(
            load_model(&path),
            Err(Error::MalformedFile { .. })
        ));

        std::fs::write(&path, format!("{full}unexpected\n")).unwrap();
        assert!(load_model(&path).is_err());

        std::fs::write(&path, "not a model\n").unwrap();
        assert!(matches!(
            load_model(&path),
            Err(Error::MalformedFile { .. })
        ));
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn forward_outputs_are_valid_probabilities(
                seed in 0u64..500,
                features in proptest::collection::vec(-3.0f64..3.0, 4),
            ) {
                let softmax =
                    ModelParams::init(&[4, 3], OutputActivation::Softmax, seed).unwrap();
                let out = forward(&softmax, &features).unwrap();
                let sum: f64 = out.values().iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-9);

                let sigmoid =
                    ModelParams::init(&[4, 3], OutputActivation::Sigmoid, seed).unwrap();
                let out = forward(&sigmoid, &features).unwrap();
                for &v in out.values() {
                    prop_assert!(v > 0.0 && v < 1.0);
                }
            }
        }
    }
}
