//! Black-box reprogramming by zeroth-order SGD, the white-box ADAM baseline,
//! and evaluation metrics.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::loss::{balanced_class_weights, class_weights, focal_loss, LossConfig, OneHotBatch};
use crate::mapping::{aggregate, build_frequency_table, FrequencyTable, LabelMapping};
use crate::oracle::{LedgerSnapshot, Oracle};
use crate::program::{apply, embed, render, render_weights, AdversarialProgram, CenteredLayout, EmbeddingMask, HostCanvas};
use crate::toymodel::{argmax, Mlp};
use crate::zoo::{estimate_gradient, EstimatorConfig, GradientEstimate, DEFAULT_BETA};

/// Ledger tag for the `q + 1` loss evaluations of each training step.
pub const TAG_TRAIN: &str = "train";
/// Ledger tag for the pre-reprogramming pass behind frequency mapping.
pub const TAG_FREQUENCY: &str = "frequency_table";
/// Ledger tag for evaluation passes.
pub const TAG_EVALUATE: &str = "evaluate";

const EVAL_CHUNK: usize = 256;

/// How class weights `ω` are derived from the training labels.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassWeighting {
    /// `ω_j ∝ 1/n_j`, normalized so balanced data gets `ω_j = 1`.
    #[default]
    Balanced,
    /// `ω_j = 1/n_j`.
    Reciprocal,
    /// `ω_j = 1`.
    Uniform,
    Explicit(Vec<f64>),
}

impl ClassWeighting {
    pub fn weights(&self, labels: &[usize], classes: usize) -> Result<Vec<f64>> {
        match self {
            ClassWeighting::Balanced => balanced_class_weights(labels, classes),
            ClassWeighting::Reciprocal => class_weights(labels, classes),
            ClassWeighting::Uniform => Ok(vec![1.0; classes]),
            ClassWeighting::Explicit(w) if w.len() == classes => Ok(w.clone()),
            ClassWeighting::Explicit(w) => Err(Error::Config(format!(
                "{} explicit class weights for {classes} classes",
                w.len()
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Initial step size `η`.
    pub eta: f64,
    /// Iterations `T`.
    pub iterations: usize,
    pub batch: usize,
    /// Random directions `q` per gradient estimate.
    pub directions: usize,
    /// Smoothing parameter `β`.
    pub beta: f64,
    /// Estimator scale `b`; `None` uses the program dimension `d`.
    pub scale: Option<f64>,
    pub decay_rate: f64,
    /// Decay period; `None` uses `⌈T / 20⌉`.
    pub decay_every: Option<usize>,
    /// Focal-loss focusing parameter `γ`.
    pub gamma: f64,
    pub class_weighting: ClassWeighting,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            eta: 0.05,
            iterations: 200,
            batch: 20,
            directions: 25,
            beta: DEFAULT_BETA,
            scale: None,
            decay_rate: 0.96,
            decay_every: None,
            gamma: 2.0,
            class_weighting: ClassWeighting::Balanced,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!("step size {} must be positive", self.eta)));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.decay_rate > 0.0 && self.decay_rate <= 1.0) {
            return Err(Error::Config(format!("decay rate {} not in (0, 1]", self.decay_rate)));
        }
        if self.decay_every == Some(0) {
            return Err(Error::Config("decay period must be positive".into()));
        }
        Ok(())
    }

    pub fn decay_period(&self) -> usize {
        self.decay_every.unwrap_or_else(|| self.iterations.div_ceil(20).max(1))
    }

    pub fn loss_config(&self, labels: &[usize], classes: usize) -> Result<LossConfig> {
        LossConfig::new(self.gamma, self.class_weighting.weights(labels, classes)?)
    }

    fn estimator(&self, dims: usize, seed: u64, concurrent: bool) -> Result<EstimatorConfig> {
        let mut cfg = EstimatorConfig::new(self.directions, self.beta, self.scale.unwrap_or(dims as f64), seed)?;
        cfg.concurrent = concurrent;
        Ok(cfg)
    }
}

/// `α_t = η · rate^⌊(t − 1) / period⌋` for 1-based `t`.
pub fn lr_schedule(t: usize, cfg: &TrainConfig) -> f64 {
    let steps = t.saturating_sub(1) / cfg.decay_period();
    cfg.eta * cfg.decay_rate.powi(steps as i32)
}

/// Target samples embedded into host canvases under one mask.
#[derive(Debug, Clone)]
pub struct EmbeddedSet {
    mask: EmbeddingMask,
    canvases: Vec<HostCanvas>,
    labels: Vec<usize>,
    classes: usize,
}

impl EmbeddedSet {
    pub fn new(dataset: &Dataset, layout: &CenteredLayout) -> Result<Self> {
        if dataset.dims() != layout.patch_dims() {
            return Err(Error::Embedding(format!(
                "dataset samples have {} values, layout patch holds {}",
                dataset.dims(),
                layout.patch_dims()
            )));
        }
        let mask = layout.mask()?;
        let placement = layout.placement()?;
        let canvases = dataset
            .target_samples()
            .iter()
            .map(|s| embed(s, &mask, &placement))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { mask, canvases, labels: dataset.labels().to_vec(), classes: dataset.classes() })
    }

    pub fn mask(&self) -> &EmbeddingMask {
        &self.mask
    }

    pub fn canvases(&self) -> &[HostCanvas] {
        &self.canvases
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.canvases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.canvases.is_empty()
    }

    /// `canvas_i + P` for each index.
    pub fn transformed(&self, indices: &[usize], perturbation: &[f64]) -> Result<Vec<Vec<f64>>> {
        indices.iter().map(|&i| apply(&self.canvases[i], perturbation)).collect()
    }
}

/// Epoch-wise shuffled minibatches. A batch that runs past the end of an
/// epoch continues into the next reshuffled epoch, so every batch is full
/// and every epoch visits each sample once.
#[derive(Debug, Clone)]
pub struct MinibatchSampler {
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl MinibatchSampler {
    pub fn new(n: usize, rng: ChaCha8Rng) -> Self {
        Self { order: (0..n).collect(), cursor: n, rng }
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut batch = Vec::with_capacity(size);
        while batch.len() < size && !self.order.is_empty() {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            let take = (size - batch.len()).min(self.order.len() - self.cursor);
            batch.extend_from_slice(&self.order[self.cursor..self.cursor + take]);
            self.cursor += take;
        }
        batch
    }
}

/// Mean focal loss of the minibatch at perturbation `p`, queried through the
/// oracle. Costs `indices.len()` queries.
pub fn minibatch_loss(
    oracle: &Oracle,
    set: &EmbeddedSet,
    indices: &[usize],
    perturbation: &[f64],
    mapping: &LabelMapping,
    loss: &LossConfig,
) -> Result<f64> {
    let inputs = set.transformed(indices, perturbation)?;
    let scores = oracle.predict(&inputs, TAG_TRAIN)?;
    let h = scores
        .rows()
        .iter()
        .map(|row| aggregate(row, mapping))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = indices.iter().map(|&i| set.labels[i]).collect();
    let y = OneHotBatch::from_labels(&labels, set.classes)?;
    Ok(focal_loss(&h, &y, loss)? / indices.len() as f64)
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub program: AdversarialProgram,
    pub estimate: GradientEstimate,
}

/// One ZO-SGD update `W ← W − α ḡ(W)` on a minibatch. The loss at `W` and
/// at each `W + βU_j` is evaluated through the oracle; on error nothing is
/// updated.
#[allow(clippy::too_many_arguments)]
pub fn bar_step(
    program: &AdversarialProgram,
    indices: &[usize],
    set: &EmbeddedSet,
    oracle: &Oracle,
    mapping: &LabelMapping,
    loss: &LossConfig,
    estimator: &EstimatorConfig,
    step_size: f64,
) -> Result<StepOutcome> {
    if indices.is_empty() {
        return Err(Error::Input("empty minibatch".into()));
    }
    let mask = program.mask();
    let f = |weights: &[f64]| {
        let p = render_weights(weights, mask)?;
        minibatch_loss(oracle, set, indices, &p, mapping, loss)
    };
    let estimate = estimate_gradient(f, program.weights(), estimator)?;
    let updated: Vec<f64> = program
        .weights()
        .iter()
        .zip(&estimate.gradient)
        .map(|(w, g)| w - step_size * g)
        .collect();
    Ok(StepOutcome { program: program.with_weights(updated)?, estimate })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRates {
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    /// Binary tasks only, with class 1 as the positive class.
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    /// One-vs-rest rates per class.
    pub per_class: Vec<ClassRates>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<u64>>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Accuracy and rates from true and predicted labels.
pub fn metrics_from_predictions(truth: &[usize], predicted: &[usize], classes: usize) -> Result<Metrics> {
    if truth.is_empty() || truth.len() != predicted.len() {
        return Err(Error::Input("need equally many, non-zero truths and predictions".into()));
    }
    let mut confusion = vec![vec![0u64; classes]; classes];
    for (&t, &p) in truth.iter().zip(predicted) {
        if t >= classes || p >= classes {
            return Err(Error::Input(format!("label pair ({t}, {p}) out of range")));
        }
        confusion[t][p] += 1;
    }
    let total = truth.len() as u64;
    let correct: u64 = (0..classes).map(|c| confusion[c][c]).sum();
    let per_class: Vec<ClassRates> = (0..classes)
        .map(|c| {
            let tp = confusion[c][c];
            let actual: u64 = confusion[c].iter().sum();
            let predicted: u64 = confusion.iter().map(|row| row[c]).sum();
            let fp = predicted - tp;
            let tn = total - actual - fp;
            ClassRates { sensitivity: ratio(tp, actual), specificity: ratio(tn, total - actual) }
        })
        .collect();
    let (sensitivity, specificity) = if classes == 2 {
        (per_class[1].sensitivity, per_class[1].specificity)
    } else {
        (None, None)
    };
    Ok(Metrics { accuracy: correct as f64 / total as f64, sensitivity, specificity, per_class, confusion })
}

/// Predicts `argmax_j h_j(F(X̃))` for every sample and scores it.
pub fn evaluate(program: &AdversarialProgram, test: &EmbeddedSet, oracle: &Oracle, mapping: &LabelMapping) -> Result<Metrics> {
    if test.is_empty() {
        return Err(Error::Input("cannot evaluate on an empty set".into()));
    }
    let p = render(program)?;
    let mut predicted = Vec::with_capacity(test.len());
    let all: Vec<usize> = (0..test.len()).collect();
    for chunk in all.chunks(EVAL_CHUNK) {
        let scores = oracle.predict(&test.transformed(chunk, &p)?, TAG_EVALUATE)?;
        for row in scores.rows() {
            predicted.push(argmax(&aggregate(row, mapping)?));
        }
    }
    metrics_from_predictions(test.labels(), &predicted, test.classes())
}

/// Top-1 source predictions of the embedded, unprogrammed training data,
/// tallied per target class. Costs one query per sample.
pub fn frequency_table_pass(train: &EmbeddedSet, oracle: &Oracle) -> Result<FrequencyTable> {
    let zero = vec![0.0; train.mask.dims()];
    let all: Vec<usize> = (0..train.len()).collect();
    let mut top1 = Vec::with_capacity(train.len());
    for chunk in all.chunks(EVAL_CHUNK) {
        let scores = oracle.predict(&train.transformed(chunk, &zero)?, TAG_FREQUENCY)?;
        top1.extend(scores.rows().iter().map(|r| argmax(r)));
    }
    build_frequency_table(&top1, train.labels(), oracle.classes(), train.classes())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Blackbox,
    Whitebox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub mode: Mode,
    pub program: AdversarialProgram,
    /// Minibatch loss at the start of each completed iteration.
    pub loss_history: Vec<f64>,
    pub iterations_completed: usize,
    pub metrics: Option<Metrics>,
    pub ledger: LedgerSnapshot,
    pub mapping: LabelMapping,
    pub config: TrainConfig,
}

/// A run that stopped early; `partial` holds everything up to the failure.
#[derive(Debug)]
pub struct TrainAbort {
    pub partial: TrainReport,
    pub error: Error,
}

impl std::fmt::Display for TrainAbort {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "training aborted after {} iterations: {}", self.partial.iterations_completed, self.error)
    }
}

impl std::error::Error for TrainAbort {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

struct Streams {
    init: ChaCha8Rng,
    shuffle: ChaCha8Rng,
    directions: ChaCha8Rng,
}

fn streams(seed: u64) -> Streams {
    let stream = |k: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(k);
        rng
    };
    Streams { init: stream(0), shuffle: stream(1), directions: stream(2) }
}

fn check_inputs(train: &EmbeddedSet, mapping: &LabelMapping, source_dims: usize, source_classes: usize) -> Result<()> {
    if train.is_empty() {
        return Err(Error::Input("empty training set".into()));
    }
    if train.mask.dims() != source_dims {
        return Err(Error::Input(format!(
            "canvas has {} values, source model expects {source_dims}",
            train.mask.dims()
        )));
    }
    if mapping.source_labels() != source_classes || mapping.target_labels() != train.classes {
        return Err(Error::Input("mapping shape does not match the oracle and target task".into()));
    }
    Ok(())
}

/// Black-box reprogramming: `T` ZO-SGD steps over shuffled minibatches,
/// then an optional evaluation pass on `eval`.
///
/// Training costs exactly `T · batch · (q + 1)` queries, ledgered under
/// [`TAG_TRAIN`]; evaluation is ledgered under [`TAG_EVALUATE`].
pub fn train_bar(
    cfg: &TrainConfig,
    train: &EmbeddedSet,
    eval: Option<&EmbeddedSet>,
    oracle: &Oracle,
    mapping: &LabelMapping,
) -> std::result::Result<TrainReport, Box<TrainAbort>> {
    let mut rng = streams(cfg.seed);
    let mut program = AdversarialProgram::random(train.mask.clone(), &mut rng.init);
    let mut loss_history = Vec::with_capacity(cfg.iterations);

    let result = (|| -> Result<()> {
        cfg.validate()?;
        check_inputs(train, mapping, oracle.input_dims(), oracle.classes())?;
        let loss = cfg.loss_config(train.labels(), train.classes)?;
        let mut sampler = MinibatchSampler::new(train.len(), rng.shuffle.clone());
        for t in 1..=cfg.iterations {
            let batch = sampler.next_batch(cfg.batch);
            let estimator = cfg.estimator(program.dims(), rng.directions.random(), oracle.concurrent())?;
            let outcome = bar_step(&program, &batch, train, oracle, mapping, &loss, &estimator, lr_schedule(t, cfg))?;
            loss_history.push(outcome.estimate.base_value);
            program = outcome.program;
            log::debug!("iteration {t}: loss {:.6}", outcome.estimate.base_value);
        }
        Ok(())
    })();

    finish(Mode::Blackbox, cfg, program, loss_history, eval, oracle, mapping, result)
}

#[allow(clippy::too_many_arguments)]
fn finish(
    mode: Mode,
    cfg: &TrainConfig,
    program: AdversarialProgram,
    loss_history: Vec<f64>,
    eval: Option<&EmbeddedSet>,
    oracle: &Oracle,
    mapping: &LabelMapping,
    result: Result<()>,
) -> std::result::Result<TrainReport, Box<TrainAbort>> {
    let mut report = TrainReport {
        mode,
        iterations_completed: loss_history.len(),
        program,
        loss_history,
        metrics: None,
        ledger: oracle.ledger().snapshot(),
        mapping: mapping.clone(),
        config: cfg.clone(),
    };
    let result = result.and_then(|()| {
        if let Some(eval) = eval {
            report.metrics = Some(evaluate(&report.program, eval, oracle, mapping)?);
        }
        Ok(())
    });
    report.ledger = oracle.ledger().snapshot();
    match result {
        Ok(()) => Ok(report),
        Err(error) => Err(Box::new(TrainAbort { partial: report, error })),
    }
}

/// Loss and exact gradient `∂f/∂W` of the mean minibatch focal loss through
/// the white-box model: `(1 − P²) ⊙ M ⊙ Σ_i ∂f/∂X̃_i`.
pub fn whitebox_gradient(
    program: &AdversarialProgram,
    model: &Mlp,
    set: &EmbeddedSet,
    indices: &[usize],
    mapping: &LabelMapping,
    loss: &LossConfig,
) -> Result<(f64, Vec<f64>)> {
    if indices.is_empty() {
        return Err(Error::Input("empty minibatch".into()));
    }
    let p = render(program)?;
    let inv_batch = 1.0 / indices.len() as f64;
    let mut total = 0.0;
    let mut input_grad = vec![0.0; p.len()];
    for &i in indices {
        let x = apply(&set.canvases[i], &p)?;
        let label = set.labels[i];
        let mut value = 0.0;
        let (_, g) = model.forward_and_input_gradient(&x, |scores| {
            let h = aggregate(scores, mapping).expect("model scores lie on the simplex");
            value = loss.term(label, h[label]);
            let dh = loss.term_derivative(label, h[label]) * inv_batch;
            let subset = &mapping.subsets()[label];
            let mut score_grad = vec![0.0; scores.len()];
            for &k in subset {
                score_grad[k] = dh / subset.len() as f64;
            }
            score_grad
        });
        total += value * inv_batch;
        for (acc, gi) in input_grad.iter_mut().zip(g) {
            *acc += gi;
        }
    }
    let grad: Vec<f64> = input_grad
        .iter()
        .zip(&p)
        .zip(program.mask().bits())
        .map(|((g, pj), &m)| if m { (1.0 - pj * pj) * g } else { 0.0 })
        .collect();
    if grad.iter().any(|g| !g.is_finite()) || !total.is_finite() {
        return Err(Error::Numeric("non-finite white-box gradient".into()));
    }
    Ok((total, grad))
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// White-box reprogramming with exact gradients and ADAM, using the same
/// minibatch stream, initialization and step schedule as [`train_bar`].
/// Only evaluation touches the oracle.
pub fn train_ar_whitebox(
    cfg: &TrainConfig,
    train: &EmbeddedSet,
    eval: Option<&EmbeddedSet>,
    model: Arc<Mlp>,
    mapping: &LabelMapping,
) -> std::result::Result<TrainReport, Box<TrainAbort>> {
    let oracle = Oracle::local(Arc::clone(&model));
    let mut rng = streams(cfg.seed);
    let mut program = AdversarialProgram::random(train.mask.clone(), &mut rng.init);
    let mut loss_history = Vec::with_capacity(cfg.iterations);

    let result = (|| -> Result<()> {
        cfg.validate()?;
        check_inputs(train, mapping, model.input_dims(), model.classes())?;
        let loss = cfg.loss_config(train.labels(), train.classes)?;
        let mut sampler = MinibatchSampler::new(train.len(), rng.shuffle.clone());
        let dims = program.dims();
        let (mut m, mut v) = (vec![0.0; dims], vec![0.0; dims]);
        for t in 1..=cfg.iterations {
            let batch = sampler.next_batch(cfg.batch);
            let (value, grad) = whitebox_gradient(&program, &model, train, &batch, mapping, &loss)?;
            loss_history.push(value);
            let alpha = lr_schedule(t, cfg);
            let (c1, c2) = (1.0 - ADAM_BETA1.powi(t as i32), 1.0 - ADAM_BETA2.powi(t as i32));
            let weights = program.weights_mut();
            for j in 0..dims {
                m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * grad[j];
                v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * grad[j] * grad[j];
                weights[j] -= alpha * (m[j] / c1) / ((v[j] / c2).sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    })();

    finish(Mode::Whitebox, cfg, program, loss_history, eval, &oracle, mapping, result)
}
