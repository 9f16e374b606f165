//! Zeroth-order gradient estimation from loss evaluations alone.
//!
//! `ḡ(W) = (1/q) Σ_j b · (f(W + βU_j) − f(W)) / β · U_j` with `U_j` drawn
//! uniformly from the unit sphere. Each call costs exactly `q + 1`
//! evaluations of `f`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_BETA: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    /// Number of random directions `q`.
    pub directions: usize,
    /// Smoothing parameter `β`.
    pub beta: f64,
    /// Scale factor `b`.
    pub scale: f64,
    pub seed: u64,
    /// Evaluate the `q` perturbed points on the rayon pool.
    #[serde(default = "default_concurrent")]
    pub concurrent: bool,
}

fn default_concurrent() -> bool {
    true
}

impl EstimatorConfig {
    pub fn new(directions: usize, beta: f64, scale: f64, seed: u64) -> Result<Self> {
        let cfg = Self { directions, beta, scale, seed, concurrent: true };
        cfg.validate()?;
        Ok(cfg)
    }

    /// `b = d`, `β = 0.01`.
    pub fn for_dims(dims: usize, directions: usize, seed: u64) -> Result<Self> {
        Self::new(directions, DEFAULT_BETA, dims as f64, seed)
    }

    pub fn validate(&self) -> Result<()> {
        if self.directions == 0 {
            return Err(Error::Config("need at least one random direction".into()));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("smoothing parameter {} must be positive", self.beta)));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::Config(format!("scale factor {} must be positive", self.scale)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientEstimate {
    pub gradient: Vec<f64>,
    /// Per-direction difference quotients `(f(W + βU_j) − f(W)) / β`.
    pub quotients: Vec<f64>,
    /// Loss at the unperturbed point.
    pub base_value: f64,
    /// Evaluations of `f` consumed, always `q + 1`.
    pub evaluations: usize,
}

/// Draws a direction uniformly from the unit sphere in `dims` dimensions.
pub fn sample_unit_sphere<R: Rng + ?Sized>(dims: usize, rng: &mut R) -> Vec<f64> {
    assert!(dims >= 1, "sphere dimension must be positive");
    loop {
        let mut u: Vec<f64> = (0..dims).map(|_| rng.sample(StandardNormal)).collect();
        let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 && norm.is_finite() {
            u.iter_mut().for_each(|v| *v /= norm);
            return u;
        }
    }
}

/// Direction `j` of the estimator seeded with `seed`. Each direction has its
/// own ChaCha stream so directions can be regenerated independently.
pub fn direction(dims: usize, seed: u64, index: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    sample_unit_sphere(dims, &mut rng)
}

fn finite(value: f64, direction: Option<usize>) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFiniteLoss { direction })
    }
}

/// Averaged one-sided random gradient estimate of `f` at `w`.
///
/// `f(w)` is evaluated first; the `q` perturbed evaluations may run
/// concurrently but are reduced in direction order, so the result does not
/// depend on scheduling.
pub fn estimate_gradient<F>(f: F, w: &[f64], cfg: &EstimatorConfig) -> Result<GradientEstimate>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    cfg.validate()?;
    let dims = w.len();
    if dims == 0 {
        return Err(Error::Input("cannot estimate a gradient in zero dimensions".into()));
    }
    let base_value = finite(f(w)?, None)?;

    let perturbed = |j: usize| -> Result<f64> {
        let u = direction(dims, cfg.seed, j);
        let shifted: Vec<f64> = w.iter().zip(&u).map(|(wi, ui)| wi + cfg.beta * ui).collect();
        let value = finite(f(&shifted)?, Some(j))?;
        Ok((value - base_value) / cfg.beta)
    };
    let quotients: Vec<f64> = if cfg.concurrent {
        (0..cfg.directions).into_par_iter().map(perturbed).collect::<Result<_>>()?
    } else {
        (0..cfg.directions).map(perturbed).collect::<Result<_>>()?
    };

    let mut gradient = vec![0.0; dims];
    for (j, &quotient) in quotients.iter().enumerate() {
        let coeff = cfg.scale * quotient / cfg.directions as f64;
        for (g, u) in gradient.iter_mut().zip(direction(dims, cfg.seed, j)) {
            *g += coeff * u;
        }
    }
    Ok(GradientEstimate {
        gradient,
        quotients,
        base_value,
        evaluations: cfg.directions + 1,
    })
}
