//! Adversarial program parametrization and target-sample embedding.
//!
//! A target sample of `d'` values is zero-padded into a host canvas of `d`
//! values. The program `P = tanh(W ⊙ M)` lives on the complement of the
//! embedding region and is added to every canvas unchanged.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Binary mask over the flattened canvas. `false` marks a coordinate that
/// holds embedded target data, `true` a programmable coordinate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<u8>", into = "Vec<u8>")]
pub struct EmbeddingMask {
    bits: Vec<bool>,
}

impl EmbeddingMask {
    pub fn new(bits: Vec<bool>) -> Result<Self> {
        if !bits.iter().any(|&b| !b) {
            return Err(Error::Embedding("mask has no embedding region".into()));
        }
        if !bits.iter().any(|&b| b) {
            return Err(Error::Embedding("mask has no programmable region".into()));
        }
        Ok(Self { bits })
    }

    /// Mask that is 0 exactly on `placement` and 1 elsewhere.
    pub fn from_placement(dims: usize, placement: &[usize]) -> Result<Self> {
        let mut bits = vec![true; dims];
        for &idx in placement {
            let slot = bits.get_mut(idx).ok_or_else(|| {
                Error::Embedding(format!("placement index {idx} outside canvas of {dims}"))
            })?;
            if !*slot {
                return Err(Error::Embedding(format!("placement index {idx} repeated")));
            }
            *slot = false;
        }
        Self::new(bits)
    }

    pub fn dims(&self) -> usize {
        self.bits.len()
    }

    pub fn is_programmable(&self, idx: usize) -> bool {
        self.bits[idx]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    /// Mask entries as 0.0 / 1.0.
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 })
    }

    pub fn programmable_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn embedded_indices(&self) -> Vec<usize> {
        (0..self.bits.len()).filter(|&i| !self.bits[i]).collect()
    }
}

impl TryFrom<Vec<u8>> for EmbeddingMask {
    type Error = Error;

    fn try_from(raw: Vec<u8>) -> Result<Self> {
        let bits = raw
            .into_iter()
            .map(|b| match b {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(Error::Embedding(format!("mask entry {other} is not 0 or 1"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(bits)
    }
}

impl From<EmbeddingMask> for Vec<u8> {
    fn from(mask: EmbeddingMask) -> Self {
        mask.bits.into_iter().map(u8::from).collect()
    }
}

/// A target-domain sample with values in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSample {
    pub values: Vec<f64>,
    pub label: usize,
}

impl TargetSample {
    pub fn new(values: Vec<f64>, label: usize) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::Input(format!("sample value {v} outside [-1, 1]")));
        }
        Ok(Self { values, label })
    }
}

/// Zero-padded canvas containing one embedded target sample.
#[derive(Debug, Clone, PartialEq)]
pub struct HostCanvas {
    values: Vec<f64>,
}

impl HostCanvas {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dims(&self) -> usize {
        self.values.len()
    }
}

/// Geometry of a rectangular patch centered in a larger image, both stored
/// row-major with channels last.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CenteredLayout {
    pub canvas_rows: usize,
    pub canvas_cols: usize,
    pub patch_rows: usize,
    pub patch_cols: usize,
    pub channels: usize,
}

impl CenteredLayout {
    pub fn square(canvas_side: usize, patch_side: usize, channels: usize) -> Self {
        Self {
            canvas_rows: canvas_side,
            canvas_cols: canvas_side,
            patch_rows: patch_side,
            patch_cols: patch_side,
            channels,
        }
    }

    pub fn canvas_dims(&self) -> usize {
        self.canvas_rows * self.canvas_cols * self.channels
    }

    pub fn patch_dims(&self) -> usize {
        self.patch_rows * self.patch_cols * self.channels
    }

    /// Flattened canvas indices of the centered block, in patch order.
    pub fn placement(&self) -> Result<Vec<usize>> {
        if self.patch_rows > self.canvas_rows || self.patch_cols > self.canvas_cols {
            return Err(Error::Embedding("patch larger than canvas".into()));
        }
        if self.patch_dims() >= self.canvas_dims() {
            return Err(Error::Embedding("patch must be strictly smaller than canvas".into()));
        }
        let top = (self.canvas_rows - self.patch_rows) / 2;
        let left = (self.canvas_cols - self.patch_cols) / 2;
        let mut out = Vec::with_capacity(self.patch_dims());
        for r in 0..self.patch_rows {
            for c in 0..self.patch_cols {
                let base = ((top + r) * self.canvas_cols + left + c) * self.channels;
                out.extend(base..base + self.channels);
            }
        }
        Ok(out)
    }

    pub fn mask(&self) -> Result<EmbeddingMask> {
        EmbeddingMask::from_placement(self.canvas_dims(), &self.placement()?)
    }
}

/// Zero-pads `sample` into a canvas, writing its values at `placement` in order.
pub fn embed(sample: &TargetSample, mask: &EmbeddingMask, placement: &[usize]) -> Result<HostCanvas> {
    let dims = mask.dims();
    if sample.values.len() != placement.len() {
        return Err(Error::Embedding(format!(
            "sample has {} values but placement lists {} indices",
            sample.values.len(),
            placement.len()
        )));
    }
    if placement.len() >= dims {
        return Err(Error::Embedding("sample must be strictly smaller than canvas".into()));
    }
    let mut values = vec![0.0; dims];
    let mut seen = vec![false; dims];
    for (&idx, &v) in placement.iter().zip(&sample.values) {
        if idx >= dims || seen[idx] {
            return Err(Error::Embedding(format!("invalid or repeated placement index {idx}")));
        }
        if mask.is_programmable(idx) {
            return Err(Error::Embedding(format!("mask is programmable at placement index {idx}")));
        }
        if !(-1.0..=1.0).contains(&v) {
            return Err(Error::Embedding(format!("sample value {v} outside [-1, 1]")));
        }
        seen[idx] = true;
        values[idx] = v;
    }
    if mask.programmable_count() != dims - placement.len() {
        return Err(Error::Embedding(
            "mask embedding region does not match the placement".into(),
        ));
    }
    Ok(HostCanvas { values })
}

/// `tanh(weights ⊙ mask)`; exactly zero on embedded coordinates.
fn masked_tanh(weights: impl Iterator<Item = f64>, mask: &EmbeddingMask) -> Vec<f64> {
    weights
        .zip(mask.bits())
        .map(|(w, &m)| if m { w.tanh() } else { 0.0 })
        .collect()
}

/// Trainable program parameters `W` together with the embedding mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdversarialProgram {
    weights: Vec<f64>,
    mask: EmbeddingMask,
}

impl AdversarialProgram {
    pub fn new(weights: Vec<f64>, mask: EmbeddingMask) -> Result<Self> {
        if weights.len() != mask.dims() {
            return Err(Error::Input(format!(
                "weights have {} entries, mask has {}",
                weights.len(),
                mask.dims()
            )));
        }
        Ok(Self { weights, mask })
    }

    pub fn zeros(mask: EmbeddingMask) -> Self {
        Self { weights: vec![0.0; mask.dims()], mask }
    }

    /// Uniform initialization in `[-0.01, 0.01]`.
    pub fn random<R: Rng + ?Sized>(mask: EmbeddingMask, rng: &mut R) -> Self {
        let weights = (0..mask.dims()).map(|_| rng.random_range(-0.01..=0.01)).collect();
        Self { weights, mask }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn mask(&self) -> &EmbeddingMask {
        &self.mask
    }

    pub fn dims(&self) -> usize {
        self.weights.len()
    }

    pub fn with_weights(&self, weights: Vec<f64>) -> Result<Self> {
        Self::new(weights, self.mask.clone())
    }
}

/// Renders `P = tanh(W ⊙ M)`.
pub fn render(program: &AdversarialProgram) -> Result<Vec<f64>> {
    render_weights(&program.weights, &program.mask)
}

/// Renders the program for an arbitrary weight vector under `mask`.
pub fn render_weights(weights: &[f64], mask: &EmbeddingMask) -> Result<Vec<f64>> {
    if weights.len() != mask.dims() {
        return Err(Error::Input("weights and mask differ in dimension".into()));
    }
    if let Some(i) = weights.iter().position(|w| !w.is_finite()) {
        return Err(Error::Numeric(format!("non-finite program weight at index {i}")));
    }
    Ok(masked_tanh(weights.iter().copied(), mask))
}

/// Renders `tanh((W + βU) ⊙ M)`.
pub fn render_perturbed(program: &AdversarialProgram, direction: &[f64], beta: f64) -> Result<Vec<f64>> {
    if direction.len() != program.dims() {
        return Err(Error::Input("direction and program differ in dimension".into()));
    }
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(Error::Numeric(format!("smoothing parameter {beta} must be finite and non-negative")));
    }
    if let Some(i) = direction.iter().position(|u| !u.is_finite()) {
        return Err(Error::Numeric(format!("non-finite direction entry at index {i}")));
    }
    let shifted: Vec<f64> = program
        .weights
        .iter()
        .zip(direction)
        .map(|(w, u)| w + beta * u)
        .collect();
    render_weights(&shifted, &program.mask)
}

/// `X̃ = X + P`. Coordinates where `P` is zero are copied bit-exactly.
pub fn apply(canvas: &HostCanvas, perturbation: &[f64]) -> Result<Vec<f64>> {
    if canvas.values.len() != perturbation.len() {
        return Err(Error::Input(format!(
            "canvas has {} values, perturbation {}",
            canvas.values.len(),
            perturbation.len()
        )));
    }
    Ok(canvas
        .values
        .iter()
        .zip(perturbation)
        .map(|(&x, &p)| if p == 0.0 { x } else { x + p })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layout_4x4() -> CenteredLayout {
        CenteredLayout::square(4, 2, 1)
    }

    #[test]
    fn embeds_patch_at_center() {
        let layout = layout_4x4();
        let placement = layout.placement().unwrap();
        assert_eq!(placement, vec![5, 6, 9, 10]);
        let mask = layout.mask().unwrap();
        let sample = TargetSample::new(vec![0.5, -0.5, 1.0, -1.0], 0).unwrap();
        let canvas = embed(&sample, &mask, &placement).unwrap();
        let mut expected = vec![0.0; 16];
        expected[5] = 0.5;
        expected[6] = -0.5;
        expected[9] = 1.0;
        expected[10] = -1.0;
        assert_eq!(canvas.values(), expected.as_slice());
    }

    #[test]
    fn zero_sample_gives_zero_canvas() {
        let layout = layout_4x4();
        let sample = TargetSample::new(vec![0.0; 4], 1).unwrap();
        let canvas = embed(&sample, &layout.mask().unwrap(), &layout.placement().unwrap()).unwrap();
        assert!(canvas.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn graph_into_large_canvas_is_centered_per_channel() {
        let layout = CenteredLayout::square(299, 200, 3);
        let placement = layout.placement().unwrap();
        assert_eq!(placement.len(), 200 * 200 * 3);
        // offset (299 - 200) / 2 = 49 rows and columns
        assert_eq!(placement[0], (49 * 299 + 49) * 3);
        assert_eq!(placement[1], (49 * 299 + 49) * 3 + 1);
        assert_eq!(placement[3], (49 * 299 + 50) * 3);
        assert_eq!(*placement.last().unwrap(), (248 * 299 + 248) * 3 + 2);
    }

    #[test]
    fn embedding_dimension_mismatch_is_rejected() {
        let layout = layout_4x4();
        let mask = layout.mask().unwrap();
        let sample = TargetSample::new(vec![0.0; 3], 0).unwrap();
        assert!(matches!(
            embed(&sample, &mask, &layout.placement().unwrap()),
            Err(Error::Embedding(_))
        ));
        // placement disagreeing with the mask
        let sample = TargetSample::new(vec![0.0; 4], 0).unwrap();
        assert!(matches!(embed(&sample, &mask, &[0, 1, 2, 3]), Err(Error::Embedding(_))));
    }

    #[test]
    fn mask_requires_both_regions() {
        assert!(EmbeddingMask::new(vec![true; 4]).is_err());
        assert!(EmbeddingMask::new(vec![false; 4]).is_err());
        assert!(EmbeddingMask::try_from(vec![0u8, 2]).is_err());
    }

    #[test]
    fn render_zero_weights_is_zero() {
        let program = AdversarialProgram::zeros(layout_4x4().mask().unwrap());
        assert!(render(&program).unwrap().iter().all(|&p| p == 0.0));
    }

    #[test]
    fn render_masks_embedded_coordinates() {
        let mask = layout_4x4().mask().unwrap();
        let mut weights = vec![0.0; 16];
        weights[5] = 7.3;
        weights[0] = 10.0;
        let p = render(&AdversarialProgram::new(weights, mask).unwrap()).unwrap();
        assert_eq!(p[5], 0.0);
        // tanh(10) = 0.99999999587769276361959283713827574105 (40-digit oracle)
        assert!((p[0] - 0.999_999_995_877_692_763_6).abs() < 1e-15);
        assert!(p[0] < 1.0);
    }

    #[test]
    fn render_rejects_non_finite_weights() {
        let mask = layout_4x4().mask().unwrap();
        let mut weights = vec![0.0; 16];
        weights[0] = f64::NAN;
        let program = AdversarialProgram::new(weights, mask).unwrap();
        assert!(matches!(render(&program), Err(Error::Numeric(_))));
    }

    #[test]
    fn apply_keeps_embedded_values() {
        let layout = layout_4x4();
        let mask = layout.mask().unwrap();
        let sample = TargetSample::new(vec![1.0, 0.0, -0.0, -1.0], 0).unwrap();
        let canvas = embed(&sample, &mask, &layout.placement().unwrap()).unwrap();
        let program = AdversarialProgram::new(vec![3.0; 16], mask).unwrap();
        let out = apply(&canvas, &render(&program).unwrap()).unwrap();
        assert_eq!(out[5].to_bits(), 1.0f64.to_bits());
        assert_eq!(out[9].to_bits(), (-0.0f64).to_bits());
        assert_eq!(out[0], 3.0f64.tanh());

        let zero = AdversarialProgram::zeros(layout.mask().unwrap());
        let blank = embed(&TargetSample::new(vec![0.0; 4], 0).unwrap(), zero.mask(), &layout.placement().unwrap()).unwrap();
        assert!(apply(&blank, &render(&zero).unwrap()).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn perturbed_render_matches_shifted_weights() {
        let mask = layout_4x4().mask().unwrap();
        let program = AdversarialProgram::zeros(mask);
        let base = render(&program).unwrap();
        assert_eq!(render_perturbed(&program, &[0.0; 16], 0.01).unwrap(), base);
        assert_eq!(render_perturbed(&program, &[1.0; 16], 0.0).unwrap(), base);

        let mut unit = vec![0.0; 16];
        unit[0] = 1.0;
        let p = render_perturbed(&program, &unit, 0.01).unwrap();
        // tanh(0.01) = 0.00999966667999946033932891970883949751 (40-digit oracle)
        assert!((p[0] - 0.009_999_666_679_999_460).abs() < 1e-17);
        assert!(p[1..].iter().all(|&v| v == 0.0));

        let mut bad = vec![0.0; 16];
        bad[3] = f64::INFINITY;
        assert!(matches!(render_perturbed(&program, &bad, 0.01), Err(Error::Numeric(_))));
    }

    #[test]
    fn random_init_is_small_and_seeded() {
        let mask = layout_4x4().mask().unwrap();
        let a = AdversarialProgram::random(mask.clone(), &mut ChaCha8Rng::seed_from_u64(3));
        let b = AdversarialProgram::random(mask, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
        assert!(a.weights().iter().all(|w| w.abs() <= 0.01));
    }

    proptest! {
        #[test]
        fn apply_stays_in_range_and_preserves_sample(
            weights in prop::collection::vec(-50.0f64..50.0, 36),
            values in prop::collection::vec(-1.0f64..=1.0, 16),
        ) {
            let layout = CenteredLayout::square(6, 4, 1);
            let mask = layout.mask().unwrap();
            let placement = layout.placement().unwrap();
            let sample = TargetSample::new(values.clone(), 0).unwrap();
            let canvas = embed(&sample, &mask, &placement).unwrap();
            let program = AdversarialProgram::new(weights, mask.clone()).unwrap();
            let p = render(&program).unwrap();
            let out = apply(&canvas, &p).unwrap();
            prop_assert!(out.iter().all(|v| v.abs() <= 1.0));
            for (&idx, &v) in placement.iter().zip(&values) {
                prop_assert_eq!(out[idx].to_bits(), v.to_bits());
                prop_assert_eq!(p[idx], 0.0);
            }
        }
    }
}
