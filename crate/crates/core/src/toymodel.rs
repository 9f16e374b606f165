//! Small fully connected softmax classifier with analytic gradients.
//!
//! Stands in for a pretrained source model: it is trained once on the
//! source task, then either wrapped as a black-box oracle (forward only) or
//! used directly as the white-box gradient provider.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::LossConfig;

const MAGIC: &[u8; 8] = b"BARMLP01";
pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
struct Dense {
    inputs: usize,
    outputs: usize,
    /// Row-major `outputs × inputs`.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

/// Dot product with independent partial sums, which lets the compiler
/// vectorize it.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    acc.iter().sum::<f64>() + tail
}

impl Dense {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.inputs)
            .zip(&self.bias)
            .map(|(row, b)| b + dot(row, x))
            .collect()
    }

    /// `Wᵀ δ`.
    fn backward_input(&self, delta: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.inputs];
        for (row, &d) in self.weights.chunks_exact(self.inputs).zip(delta) {
            if d != 0.0 {
                for (o, w) in out.iter_mut().zip(row) {
                    *o += w * d;
                }
            }
        }
        out
    }
}

/// `d-h1-…-K` network with tanh hidden layers and a softmax output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct ModelHeader {
    format: String,
    version: u32,
    layers: Vec<usize>,
    hidden_activation: String,
    output: String,
}

/// Gradient of a loss with respect to every network parameter, in the same
/// layout as [`Mlp::parameters`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterGradient(pub Vec<f64>);

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

struct Trace {
    /// Input to each layer; `activations[0]` is the network input.
    activations: Vec<Vec<f64>>,
    scores: Vec<f64>,
}

impl Mlp {
    /// All-zero parameters; its output is uniform for every input.
    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        Self::check_sizes(sizes)?;
        Ok(Self {
            layers: sizes.windows(2).map(|p| Dense::zeros(p[0], p[1])).collect(),
        })
    }

    /// He-scaled Gaussian weights (`std = sqrt(2 / fan_in)`), zero biases.
    pub fn random(sizes: &[usize], seed: u64) -> Result<Self> {
        let mut model = Self::zeros(sizes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut model.layers {
            let std = (2.0 / layer.inputs as f64).sqrt();
            for w in &mut layer.weights {
                *w = std * rng.sample::<f64, _>(StandardNormal);
            }
        }
        Ok(model)
    }

    /// Builds a network from explicit `(weights, bias)` pairs, weights
    /// row-major `outputs × inputs`.
    pub fn from_layers(layers: Vec<(Vec<Vec<f64>>, Vec<f64>)>) -> Result<Self> {
        let mut out = Vec::with_capacity(layers.len());
        for (rows, bias) in layers {
            let outputs = rows.len();
            let inputs = rows.first().map(Vec::len).unwrap_or(0);
            if outputs == 0 || inputs == 0 || bias.len() != outputs || rows.iter().any(|r| r.len() != inputs) {
                return Err(Error::Input("malformed layer".into()));
            }
            out.push(Dense { inputs, outputs, weights: rows.concat(), bias });
        }
        let model = Self { layers: out };
        Self::check_sizes(&model.sizes())?;
        model.check_finite()?;
        Ok(model)
    }

    fn check_sizes(sizes: &[usize]) -> Result<()> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Input(format!("invalid layer sizes {sizes:?}")));
        }
        if sizes[sizes.len() - 1] < 2 {
            return Err(Error::Input("output layer needs at least two classes".into()));
        }
        Ok(())
    }

    fn check_finite(&self) -> Result<()> {
        if self.parameters().iter().all(|p| p.is_finite()) {
            Ok(())
        } else {
            Err(Error::Numeric("model has non-finite parameters".into()))
        }
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.layers[0].inputs];
        sizes.extend(self.layers.iter().map(|l| l.outputs));
        sizes
    }

    pub fn input_dims(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn classes(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    fn trace(&self, x: &[f64]) -> Trace {
        let mut activations = Vec::with_capacity(self.layers.len());
        let mut current = x.to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = layer.forward(&current);
            if i < last {
                z.iter_mut().for_each(|v| *v = v.tanh());
            }
            activations.push(std::mem::replace(&mut current, z));
        }
        Trace { activations, scores: softmax(&current) }
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        let mut current = x.to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            current = layer.forward(&current);
            if i < last {
                current.iter_mut().for_each(|v| *v = v.tanh());
            }
        }
        current
    }

    /// Class scores on the probability simplex.
    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.input_dims(), "input dimension mismatch");
        softmax(&self.logits(x))
    }

    pub fn predict_label(&self, x: &[f64]) -> usize {
        argmax(&self.forward(x))
    }

    /// Backpropagates `∂loss/∂scores` to the logits through the softmax
    /// Jacobian: `δ_k = s_k (g_k − Σ_i s_i g_i)`.
    fn softmax_backward(scores: &[f64], score_grad: &[f64]) -> Vec<f64> {
        let dot: f64 = scores.iter().zip(score_grad).map(|(s, g)| s * g).sum();
        scores.iter().zip(score_grad).map(|(s, g)| s * (g - dot)).collect()
    }

    /// Runs the backward pass from a logit gradient, optionally collecting
    /// parameter gradients; returns the input gradient.
    fn backward(&self, trace: &Trace, mut delta: Vec<f64>, mut params: Option<&mut [f64]>) -> Vec<f64> {
        let offsets = self.parameter_offsets();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = &trace.activations[i];
            if let Some(grad) = params.as_deref_mut() {
                let (w_off, b_off) = offsets[i];
                for (o, &d) in delta.iter().enumerate() {
                    let row = &mut grad[w_off + o * layer.inputs..w_off + (o + 1) * layer.inputs];
                    for (g, x) in row.iter_mut().zip(input) {
                        *g += d * x;
                    }
                    grad[b_off + o] += d;
                }
            }
            let mut upstream = layer.backward_input(&delta);
            if i > 0 {
                // input to layer i is tanh of the previous pre-activation
                for (u, a) in upstream.iter_mut().zip(input) {
                    *u *= 1.0 - a * a;
                }
            }
            delta = upstream;
        }
        delta
    }

    /// Vector-Jacobian product: `∂loss/∂x` given `∂loss/∂scores` at `x`.
    pub fn input_gradient_from_scores(&self, x: &[f64], score_grad: &[f64]) -> Vec<f64> {
        let trace = self.trace(x);
        let delta = Self::softmax_backward(&trace.scores, score_grad);
        self.backward(&trace, delta, None)
    }

    /// Scores and the input gradient for a loss on the scores, in one pass.
    pub fn forward_and_input_gradient<G>(&self, x: &[f64], loss_grad: G) -> (Vec<f64>, Vec<f64>)
    where
        G: FnOnce(&[f64]) -> Vec<f64>,
    {
        let trace = self.trace(x);
        let score_grad = loss_grad(&trace.scores);
        let delta = Self::softmax_backward(&trace.scores, &score_grad);
        let grad = self.backward(&trace, delta, None);
        (trace.scores, grad)
    }

    /// `∂loss/∂x` for the focal/CE loss of source label `label`.
    pub fn input_gradient(&self, x: &[f64], label: usize, loss: &LossConfig) -> Vec<f64> {
        let scores = self.forward(x);
        let mut score_grad = vec![0.0; scores.len()];
        score_grad[label] = loss.term_derivative(label, scores[label]);
        self.input_gradient_from_scores(x, &score_grad)
    }

    /// Loss value for source label `label`, matching [`Mlp::input_gradient`].
    pub fn loss(&self, x: &[f64], label: usize, loss: &LossConfig) -> f64 {
        loss.term(label, self.forward(x)[label])
    }

    /// Gradient of the cross-entropy of `label` with respect to all
    /// parameters.
    pub fn parameter_gradient(&self, x: &[f64], label: usize) -> ParameterGradient {
        let mut grad = vec![0.0; self.parameter_count()];
        self.accumulate_ce_gradient(x, label, &mut grad);
        ParameterGradient(grad)
    }

    fn accumulate_ce_gradient(&self, x: &[f64], label: usize, grad: &mut [f64]) {
        let trace = self.trace(x);
        // softmax + CE: δ = s − y
        let mut delta = trace.scores.clone();
        delta[label] -= 1.0;
        self.backward(&trace, delta, Some(grad));
    }

    fn parameter_offsets(&self) -> Vec<(usize, usize)> {
        let mut offset = 0;
        self.layers
            .iter()
            .map(|l| {
                let w = offset;
                let b = w + l.weights.len();
                offset = b + l.bias.len();
                (w, b)
            })
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Flat parameter vector: per layer, weights row-major then biases.
    pub fn parameters(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.parameter_count());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_parameters(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.parameter_count() {
            return Err(Error::Input("parameter vector has the wrong length".into()));
        }
        let mut rest = params;
        for l in &mut self.layers {
            let (w, tail) = rest.split_at(l.weights.len());
            let (b, tail) = tail.split_at(l.bias.len());
            l.weights.copy_from_slice(w);
            l.bias.copy_from_slice(b);
            rest = tail;
        }
        Ok(())
    }

    pub fn accuracy(&self, inputs: &[Vec<f64>], labels: &[usize]) -> f64 {
        if inputs.is_empty() {
            return 0.0;
        }
        let correct = inputs
            .iter()
            .zip(labels)
            .filter(|(x, &y)| self.predict_label(x) == y)
            .count();
        correct as f64 / inputs.len() as f64
    }

    /// Writes the model: 8-byte magic, little-endian u64 header length, JSON
    /// header, then parameters as little-endian f64.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let header = ModelHeader {
            format: "bar-mlp".into(),
            version: MODEL_FORMAT_VERSION,
            layers: self.sizes(),
            hidden_activation: "tanh".into(),
            output: "softmax".into(),
        };
        let header = serde_json::to_vec(&header)?;
        let mut buf = Vec::with_capacity(16 + header.len() + 8 * self.parameter_count());
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
        buf.extend_from_slice(&header);
        for p in self.parameters() {
            buf.extend_from_slice(&p.to_le_bytes());
        }
        fs::File::create(path)?.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        let bad = |msg: &str| Error::Input(format!("model file: {msg}"));
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic"));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let header_end = 16usize.checked_add(header_len).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
        let header: ModelHeader = serde_json::from_slice(&bytes[16..header_end])?;
        if header.format != "bar-mlp" || header.version != MODEL_FORMAT_VERSION {
            return Err(bad("unsupported format"));
        }
        let mut model = Self::zeros(&header.layers)?;
        let payload = &bytes[header_end..];
        if payload.len() != 8 * model.parameter_count() {
            return Err(bad("payload size does not match header"));
        }
        let params: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        model.set_parameters(&params)?;
        model.check_finite()?;
        Ok(model)
    }
}

/// Index of the largest entry; ties go to the smallest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SourceTraining {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch: usize,
    /// Training accuracy the run is expected to reach.
    pub target_accuracy: f64,
    pub seed: u64,
}

impl Default for SourceTraining {
    fn default() -> Self {
        Self { epochs: 30, learning_rate: 0.05, batch: 16, target_accuracy: 0.95, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceTrainingReport {
    pub epochs_run: usize,
    pub train_accuracy: f64,
    pub reached_target: bool,
    pub epoch_losses: Vec<f64>,
}

/// Minibatch SGD on cross-entropy. Stops early once an epoch ends at or
/// above the target accuracy; a shortfall is reported, not an error.
pub fn train_source(
    model: &mut Mlp,
    inputs: &[Vec<f64>],
    labels: &[usize],
    cfg: &SourceTraining,
) -> Result<SourceTrainingReport> {
    if inputs.len() != labels.len() {
        return Err(Error::Input("inputs and labels differ in length".into()));
    }
    if inputs.iter().any(|x| x.len() != model.input_dims()) {
        return Err(Error::Input("input dimension does not match the model".into()));
    }
    if let Some(l) = labels.iter().find(|&&l| l >= model.classes()) {
        return Err(Error::Input(format!("label {l} outside model classes")));
    }
    if cfg.batch == 0 || !(cfg.learning_rate > 0.0) {
        return Err(Error::Config("batch and learning rate must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut epoch_losses = Vec::new();
    let mut epochs_run = 0;
    let mut accuracy = model.accuracy(inputs, labels);
    if cfg.epochs == 0 || inputs.is_empty() {
        return Ok(SourceTrainingReport {
            epochs_run,
            train_accuracy: accuracy,
            reached_target: accuracy >= cfg.target_accuracy,
            epoch_losses,
        });
    }
    let mut grad = vec![0.0; model.parameter_count()];
    let mut params = model.parameters();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            for &i in batch {
                total -= model.forward(&inputs[i])[labels[i]].max(1e-300).ln();
                model.accumulate_ce_gradient(&inputs[i], labels[i], &mut grad);
            }
            let step = cfg.learning_rate / batch.len() as f64;
            for (p, g) in params.iter_mut().zip(&grad) {
                *p -= step * g;
            }
            model.set_parameters(&params)?;
        }
        model.check_finite()?;
        epochs_run += 1;
        epoch_losses.push(total / inputs.len() as f64);
        accuracy = model.accuracy(inputs, labels);
        if accuracy >= cfg.target_accuracy {
            break;
        }
    }
    Ok(SourceTrainingReport {
        epochs_run,
        train_accuracy: accuracy,
        reached_target: accuracy >= cfg.target_accuracy,
        epoch_losses,
    })
}
