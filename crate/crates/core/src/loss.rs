//! Focal loss over mapped target scores, with cross-entropy as the
//! `γ = 0, ω = 1` case.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_GAMMA: f64 = 2.0;
pub const DEFAULT_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub gamma: f64,
    pub weights: Vec<f64>,
    #[serde(default = "default_floor")]
    pub floor: f64,
}

fn default_floor() -> f64 {
    DEFAULT_FLOOR
}

impl LossConfig {
    pub fn new(gamma: f64, weights: Vec<f64>) -> Result<Self> {
        let cfg = Self { gamma, weights, floor: DEFAULT_FLOOR };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Plain cross-entropy over `classes` target labels.
    pub fn cross_entropy(classes: usize) -> Self {
        Self { gamma: 0.0, weights: vec![1.0; classes], floor: DEFAULT_FLOOR }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("focusing parameter {} must be >= 0", self.gamma)));
        }
        if self.weights.is_empty() || self.weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
            return Err(Error::Config("class weights must be positive".into()));
        }
        if !(self.floor > 0.0 && self.floor < 1.0) {
            return Err(Error::Config(format!("probability floor {} not in (0, 1)", self.floor)));
        }
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.weights.len()
    }

    /// Loss of one sample whose true-class score is `h`.
    pub fn term(&self, class: usize, h: f64) -> f64 {
        -self.weights[class] * (1.0 - h).powf(self.gamma) * h.max(self.floor).ln()
    }

    /// Derivative of [`LossConfig::term`] with respect to `h`.
    pub fn term_derivative(&self, class: usize, h: f64) -> f64 {
        let w = self.weights[class];
        let one_minus = 1.0 - h;
        let (log_h, dlog_h) = if h > self.floor { (h.ln(), 1.0 / h) } else { (self.floor.ln(), 0.0) };
        let focus = if self.gamma == 0.0 { 0.0 } else { self.gamma * one_minus.powf(self.gamma - 1.0) * log_h };
        w * (focus - one_minus.powf(self.gamma) * dlog_h)
    }
}

/// Rows of one-hot target labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OneHotBatch {
    labels: Vec<usize>,
    classes: usize,
}

impl OneHotBatch {
    pub fn from_labels(labels: &[usize], classes: usize) -> Result<Self> {
        if let Some(l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Input(format!("label {l} out of range for {classes} classes")));
        }
        Ok(Self { labels: labels.to_vec(), classes })
    }

    /// Builds from explicit 0/1 rows; each row must hold exactly one 1.
    pub fn from_rows(rows: &[Vec<u8>]) -> Result<Self> {
        let classes = rows.first().map(Vec::len).unwrap_or(0);
        let labels = rows
            .iter()
            .map(|row| {
                if row.len() != classes || row.iter().any(|&v| v > 1) || row.iter().filter(|&&v| v == 1).count() != 1 {
                    return Err(Error::Input("one-hot rows must contain a single 1".into()));
                }
                Ok(row.iter().position(|&v| v == 1).expect("checked"))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { labels, classes })
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn check_batch(h_batch: &[Vec<f64>], y: &OneHotBatch, cfg: &LossConfig) -> Result<()> {
    if h_batch.len() != y.len() {
        return Err(Error::Input(format!("{} score rows for {} labels", h_batch.len(), y.len())));
    }
    if y.classes() != cfg.classes() {
        return Err(Error::Input("label width and class weights disagree".into()));
    }
    for row in h_batch {
        if row.len() != y.classes() {
            return Err(Error::Input("score row width and label width disagree".into()));
        }
        if let Some(h) = row.iter().find(|h| !(0.0..=1.0).contains(*h)) {
            return Err(Error::Input(format!("target score {h} outside [0, 1]")));
        }
    }
    Ok(())
}

/// `−Σ_i Σ_j ω_j (1−h_ij)^γ y_ij log max(h_ij, ε)`, summed over the batch.
pub fn focal_loss(h_batch: &[Vec<f64>], y: &OneHotBatch, cfg: &LossConfig) -> Result<f64> {
    check_batch(h_batch, y, cfg)?;
    Ok(h_batch
        .iter()
        .zip(y.labels())
        .map(|(row, &j)| cfg.term(j, row[j]))
        .sum())
}

/// Per-row gradient of [`focal_loss`] with respect to the target scores.
pub fn focal_loss_grad(h_batch: &[Vec<f64>], y: &OneHotBatch, cfg: &LossConfig) -> Result<Vec<Vec<f64>>> {
    check_batch(h_batch, y, cfg)?;
    Ok(h_batch
        .iter()
        .zip(y.labels())
        .map(|(row, &j)| {
            let mut g = vec![0.0; row.len()];
            g[j] = cfg.term_derivative(j, row[j]);
            g
        })
        .collect())
}

fn class_counts(labels: &[usize], classes: usize) -> Result<Vec<usize>> {
    let mut counts = vec![0usize; classes];
    for &l in labels {
        *counts
            .get_mut(l)
            .ok_or_else(|| Error::Input(format!("label {l} out of range for {classes} classes")))? += 1;
    }
    if let Some(j) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Config(format!("class {j} has no samples; weight undefined")));
    }
    Ok(counts)
}

/// `ω_j = 1 / n_j`.
pub fn class_weights(labels: &[usize], classes: usize) -> Result<Vec<f64>> {
    Ok(class_counts(labels, classes)?.into_iter().map(|n| 1.0 / n as f64).collect())
}

/// `ω_j ∝ 1 / n_j`, scaled so a balanced training set gets `ω_j = 1`.
pub fn balanced_class_weights(labels: &[usize], classes: usize) -> Result<Vec<f64>> {
    let scale = labels.len() as f64 / classes as f64;
    Ok(class_weights(labels, classes)?.into_iter().map(|w| w * scale).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn single(h_true: f64, gamma: f64) -> f64 {
        let y = OneHotBatch::from_labels(&[0], 2).unwrap();
        let cfg = LossConfig::new(gamma, vec![1.0, 1.0]).unwrap();
        focal_loss(&[vec![h_true, 1.0 - h_true]], &y, &cfg).unwrap()
    }

    #[test]
    fn cross_entropy_special_case() {
        assert!((single(0.5, 0.0) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn focal_hand_value() {
        // (0.1)^2 * -ln 0.9 = 0.00105360515657826301... (40-digit oracle)
        assert!((single(0.9, 2.0) - 0.001_053_605_156_578_263).abs() < 1e-17);
    }

    #[test]
    fn confident_correct_sample_costs_nothing() {
        for gamma in [0.0, 0.5, 2.0, 5.0] {
            assert_eq!(single(1.0, gamma), 0.0);
        }
    }

    #[test]
    fn floor_keeps_zero_score_finite() {
        let v = single(0.0, 2.0);
        assert!((v - (-(1e-12f64).ln())).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let y = OneHotBatch::from_labels(&[0, 1], 2).unwrap();
        let cfg = LossConfig::cross_entropy(2);
        assert!(matches!(focal_loss(&[vec![0.5, 0.5]], &y, &cfg), Err(Error::Input(_))));
        assert!(matches!(
            focal_loss(&[vec![0.5, 0.5, 0.0], vec![0.5, 0.5, 0.0]], &y, &cfg),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn one_hot_rows_validated() {
        assert!(OneHotBatch::from_rows(&[vec![0, 1], vec![1, 0]]).is_ok());
        assert!(OneHotBatch::from_rows(&[vec![1, 1]]).is_err());
        assert!(OneHotBatch::from_rows(&[vec![0, 0]]).is_err());
    }

    #[test]
    fn reciprocal_class_weights() {
        let labels: Vec<usize> = std::iter::repeat_n(0, 10).chain(std::iter::repeat_n(1, 40)).collect();
        assert_eq!(class_weights(&labels, 2).unwrap(), vec![0.1, 0.025]);
        let balanced = [0, 1, 2].repeat(5);
        assert!(class_weights(&balanced, 3).unwrap().iter().all(|&w| w == 0.2));
        let skewed: Vec<usize> = std::iter::once(0).chain(std::iter::repeat_n(1, 99)).collect();
        let w = class_weights(&skewed, 2).unwrap();
        assert_eq!(w[0], 1.0);
        assert!((w[1] - 1.0 / 99.0).abs() < 1e-18);
        assert!(matches!(class_weights(&[0, 0], 2), Err(Error::Config(_))));
        assert_eq!(balanced_class_weights(&balanced, 3).unwrap(), vec![1.0; 3]);
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(LossConfig::new(-1.0, vec![1.0]).is_err());
        assert!(LossConfig::new(2.0, vec![0.0]).is_err());
    }

    #[test]
    fn derivative_matches_central_difference() {
        for gamma in [0.0, 1.0, 2.0, 3.5] {
            let cfg = LossConfig::new(gamma, vec![0.7, 1.3]).unwrap();
            for h in [0.05, 0.3, 0.5, 0.8, 0.97] {
                let step = 1e-6;
                let numeric = (cfg.term(1, h + step) - cfg.term(1, h - step)) / (2.0 * step);
                let analytic = cfg.term_derivative(1, h);
                assert!((numeric - analytic).abs() <= 1e-6 * analytic.abs().max(1.0), "γ={gamma} h={h}");
            }
        }
    }

    proptest! {
        #[test]
        fn monotone_in_true_class_score(a in 0.001f64..0.999, b in 0.001f64..0.999, gamma in 0.0f64..4.0) {
            prop_assume!((a - b).abs() > 1e-9);
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(single(lo, gamma) > single(hi, gamma));
        }

        #[test]
        fn focal_never_exceeds_cross_entropy(h in 0.0f64..=1.0, gamma in 0.0f64..5.0) {
            let focal = single(h, gamma);
            let ce = single(h, 0.0);
            prop_assert!(focal >= 0.0 && focal.is_finite());
            prop_assert!(focal <= ce);
        }
    }
}
