//! Numerical checks of the gradient machinery: estimator unbiasedness and
//! smoothing accuracy on closed-form functions, white-box gradients against
//! finite differences, and estimator/white-box agreement as `q` grows.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::mapping::{random_mapping, LabelMapping};
use crate::oracle::Oracle;
use crate::program::{render_weights, AdversarialProgram, CenteredLayout, EmbeddingMask};
use crate::toymodel::Mlp;
use crate::trainer::{minibatch_loss, whitebox_gradient, EmbeddedSet};
use crate::zoo::{estimate_gradient, EstimatorConfig, DEFAULT_BETA};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradCheckConfig {
    pub seed: u64,
    pub linear_dims: usize,
    pub linear_samples: usize,
    pub linear_tolerance: f64,
    pub smoothing_dims: usize,
    pub smoothing_beta: f64,
    pub smoothing_directions: usize,
    pub smoothing_tolerance: f64,
    pub fd_instances: usize,
    pub fd_step: f64,
    pub fd_tolerance: f64,
    pub cosine_directions: Vec<usize>,
    pub cosine_seeds: usize,
    pub cosine_batch: usize,
    /// Negates every zeroth-order estimate. A negative control: the
    /// estimator checks must fail with it set.
    pub sign_flip: bool,
}

/// Tolerances sit above the estimator's relative RMS error,
/// `sqrt((d - 1) / N)`: 0.022 for the linear check and 0.030 for the
/// quadratic one.
impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            linear_dims: 50,
            linear_samples: 100_000,
            linear_tolerance: 0.03,
            smoothing_dims: 10,
            smoothing_beta: 1e-4,
            smoothing_directions: 10_000,
            smoothing_tolerance: 0.05,
            fd_instances: 20,
            fd_step: 1e-5,
            fd_tolerance: 1e-4,
            cosine_directions: vec![10, 100, 1000],
            cosine_seeds: 10,
            cosine_batch: 20,
            sign_flip: false,
        }
    }
}

/// Relative L2 error of an estimate against the exact vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorCheck {
    pub relative_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiniteDifferenceCheck {
    pub relative_errors: Vec<f64>,
    pub max_relative_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosinePoint {
    pub directions: usize,
    pub mean_cosine: f64,
    pub cosines: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosineTrendCheck {
    pub points: Vec<CosinePoint>,
    /// Mean cosine strictly increasing in `q`.
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub schema_version: u32,
    pub passed: bool,
    pub linear_unbiasedness: ErrorCheck,
    pub smoothing_accuracy: ErrorCheck,
    pub finite_differences: FiniteDifferenceCheck,
    pub cosine_trend: Option<CosineTrendCheck>,
    pub config: GradCheckConfig,
}

pub fn relative_error(estimate: &[f64], exact: &[f64]) -> f64 {
    let diff: f64 = estimate.iter().zip(exact).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let norm: f64 = exact.iter().map(|b| b * b).sum::<f64>().sqrt();
    diff / norm
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn gaussian_vector(dims: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..dims).map(|_| rng.sample(StandardNormal)).collect()
}

fn signed(mut gradient: Vec<f64>, flip: bool) -> Vec<f64> {
    if flip {
        gradient.iter_mut().for_each(|g| *g = -*g);
    }
    gradient
}

/// Mean of `samples` single-direction estimates of `f(w) = cᵀw` (with `b = d`)
/// against `c`, for Gaussian `c` and `w`.
pub fn linear_unbiasedness(dims: usize, samples: usize, seed: u64, tolerance: f64, sign_flip: bool) -> Result<ErrorCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = gaussian_vector(dims, &mut rng);
    let w = gaussian_vector(dims, &mut rng);
    let f = |x: &[f64]| Ok(c.iter().zip(x).map(|(a, b)| a * b).sum());
    let cfg = EstimatorConfig::for_dims(dims, samples, seed)?;
    let g = signed(estimate_gradient(f, &w, &cfg)?.gradient, sign_flip);
    let relative_error = relative_error(&g, &c);
    Ok(ErrorCheck { relative_error, tolerance, passed: relative_error <= tolerance })
}

/// `q`-direction estimate of `∇(½‖w‖²) = w` at a Gaussian `w`, with `b = d`.
pub fn smoothing_accuracy(
    dims: usize,
    beta: f64,
    directions: usize,
    seed: u64,
    tolerance: f64,
    sign_flip: bool,
) -> Result<ErrorCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = gaussian_vector(dims, &mut rng);
    let f = |x: &[f64]| Ok(0.5 * x.iter().map(|v| v * v).sum::<f64>());
    let cfg = EstimatorConfig::new(directions, beta, dims as f64, seed)?;
    let g = signed(estimate_gradient(f, &w, &cfg)?.gradient, sign_flip);
    let relative_error = relative_error(&g, &w);
    Ok(ErrorCheck { relative_error, tolerance, passed: relative_error <= tolerance })
}

/// A small random reprogramming problem with an exact white-box loss.
#[derive(Debug, Clone)]
pub struct SmallInstance {
    pub model: Mlp,
    pub set: EmbeddedSet,
    pub mapping: LabelMapping,
    pub loss: LossConfig,
    pub program: AdversarialProgram,
}

impl SmallInstance {
    /// 6 × 6 canvas around a 2 × 2 patch, a `36-8-6` network, three target
    /// classes with random weights and `γ ∈ [0, 3)`.
    pub fn random(seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = CenteredLayout::square(6, 2, 1);
        let model = Mlp::random(&[36, 8, 6], rng.random())?;
        let samples: Vec<Vec<f64>> = (0..4).map(|_| (0..4).map(|_| rng.random_range(-1.0..=1.0)).collect()).collect();
        let labels = vec![0, 1, 2, rng.random_range(0..3)];
        let set = EmbeddedSet::new(&Dataset::new(4, 3, samples, labels)?, &layout)?;
        let mapping = random_mapping(6, 3, 2, rng.random())?;
        let weights = (0..3).map(|_| rng.random_range(0.2..2.0)).collect();
        let loss = LossConfig::new(rng.random_range(0.0..3.0), weights)?;
        let mask = layout.mask()?;
        let w = mask.values().map(|_| rng.random_range(-1.5..1.5)).collect();
        let program = AdversarialProgram::new(w, mask)?;
        Ok(Self { model, set, mapping, loss, program })
    }

    pub fn loss_at(&self, weights: &[f64]) -> Result<f64> {
        let program = self.program.with_weights(weights.to_vec())?;
        Ok(self.gradient_at(&program)?.0)
    }

    fn gradient_at(&self, program: &AdversarialProgram) -> Result<(f64, Vec<f64>)> {
        let all: Vec<usize> = (0..self.set.len()).collect();
        whitebox_gradient(program, &self.model, &self.set, &all, &self.mapping, &self.loss)
    }

    /// Relative L2 error of the analytic gradient against central
    /// differences with step `h`.
    pub fn finite_difference_error(&self, h: f64) -> Result<f64> {
        let (_, analytic) = self.gradient_at(&self.program)?;
        let w = self.program.weights();
        let mut numeric = vec![0.0; w.len()];
        for (j, n) in numeric.iter_mut().enumerate() {
            let mut up = w.to_vec();
            let mut down = w.to_vec();
            up[j] += h;
            down[j] -= h;
            *n = (self.loss_at(&up)? - self.loss_at(&down)?) / (2.0 * h);
        }
        Ok(relative_error(&analytic, &numeric))
    }
}

pub fn finite_differences(instances: usize, step: f64, seed: u64, tolerance: f64) -> Result<FiniteDifferenceCheck> {
    let relative_errors = (0..instances as u64)
        .map(|i| SmallInstance::random(seed.wrapping_mul(1_000_003).wrapping_add(i))?.finite_difference_error(step))
        .collect::<Result<Vec<_>>>()?;
    let max_relative_error = relative_errors.iter().copied().fold(0.0, f64::max);
    Ok(FiniteDifferenceCheck {
        relative_errors,
        max_relative_error,
        tolerance,
        passed: max_relative_error < tolerance,
    })
}

/// The black-box loss of a reprogramming problem alongside its white-box
/// gradient.
pub struct ReprogrammingProblem<'a> {
    pub model: &'a Mlp,
    pub oracle: &'a Oracle,
    pub set: &'a EmbeddedSet,
    pub mapping: &'a LabelMapping,
    pub loss: &'a LossConfig,
}

fn masked(values: &[f64], mask: &EmbeddingMask) -> Vec<f64> {
    values.iter().zip(mask.bits()).filter(|(_, &m)| m).map(|(v, _)| *v).collect()
}

/// For each seed: a random program and minibatch, the white-box gradient,
/// and one estimate per `q`; cosines are taken over programmable
/// coordinates.
pub fn cosine_trend(
    problem: &ReprogrammingProblem<'_>,
    directions: &[usize],
    seeds: usize,
    batch: usize,
    seed: u64,
    sign_flip: bool,
) -> Result<CosineTrendCheck> {
    if problem.set.len() < batch || batch == 0 {
        return Err(Error::Input(format!("need a minibatch of {batch} from {} samples", problem.set.len())));
    }
    let mask = problem.set.mask();
    let mut per_q = vec![Vec::with_capacity(seeds); directions.len()];
    for s in 0..seeds as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(s));
        let program = AdversarialProgram::random(mask.clone(), &mut rng);
        let mut all: Vec<usize> = (0..problem.set.len()).collect();
        rand::seq::SliceRandom::shuffle(all.as_mut_slice(), &mut rng);
        let indices = &all[..batch];
        let (_, exact) = whitebox_gradient(&program, problem.model, problem.set, indices, problem.mapping, problem.loss)?;
        let exact = masked(&exact, mask);
        let f = |w: &[f64]| {
            let p = render_weights(w, mask)?;
            minibatch_loss(problem.oracle, problem.set, indices, &p, problem.mapping, problem.loss)
        };
        for (k, &q) in directions.iter().enumerate() {
            let mut cfg = EstimatorConfig::new(q, DEFAULT_BETA, program.dims() as f64, rng.random())?;
            cfg.concurrent = problem.oracle.concurrent();
            let estimate = signed(estimate_gradient(f, program.weights(), &cfg)?.gradient, sign_flip);
            per_q[k].push(cosine(&masked(&estimate, mask), &exact));
        }
    }
    let points: Vec<CosinePoint> = directions
        .iter()
        .zip(per_q)
        .map(|(&directions, cosines)| CosinePoint {
            directions,
            mean_cosine: cosines.iter().sum::<f64>() / cosines.len().max(1) as f64,
            cosines,
        })
        .collect();
    let passed = !points.is_empty() && points.windows(2).all(|w| w[1].mean_cosine > w[0].mean_cosine);
    Ok(CosineTrendCheck { points, passed })
}

/// Runs every check. The cosine trend needs a reprogramming problem and is
/// skipped without one.
pub fn run_grad_check(cfg: &GradCheckConfig, problem: Option<&ReprogrammingProblem<'_>>) -> Result<GradCheckReport> {
    let linear_unbiasedness =
        linear_unbiasedness(cfg.linear_dims, cfg.linear_samples, cfg.seed, cfg.linear_tolerance, cfg.sign_flip)?;
    let smoothing_accuracy = smoothing_accuracy(
        cfg.smoothing_dims,
        cfg.smoothing_beta,
        cfg.smoothing_directions,
        cfg.seed,
        cfg.smoothing_tolerance,
        cfg.sign_flip,
    )?;
    let finite_differences = finite_differences(cfg.fd_instances, cfg.fd_step, cfg.seed, cfg.fd_tolerance)?;
    let cosine_trend = problem
        .map(|p| cosine_trend(p, &cfg.cosine_directions, cfg.cosine_seeds, cfg.cosine_batch, cfg.seed, cfg.sign_flip))
        .transpose()?;
    let passed = linear_unbiasedness.passed
        && smoothing_accuracy.passed
        && finite_differences.passed
        && cosine_trend.as_ref().is_none_or(|c| c.passed);
    Ok(GradCheckReport {
        schema_version: REPORT_SCHEMA_VERSION,
        passed,
        linear_unbiasedness,
        smoothing_accuracy,
        finite_differences,
        cosine_trend,
        config: cfg.clone(),
    })
}
