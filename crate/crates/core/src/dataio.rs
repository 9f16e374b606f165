//! Datasets: seeded synthetic tasks, class balancing, k-fold splits and the
//! on-disk format (JSON manifest plus one raw little-endian f32 file per
//! sample).

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::program::TargetSample;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

/// Labeled samples of a fixed dimension, values in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    dims: usize,
    classes: usize,
    samples: Vec<Vec<f64>>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(dims: usize, classes: usize, samples: Vec<Vec<f64>>, labels: Vec<usize>) -> Result<Self> {
        if samples.len() != labels.len() {
            return Err(Error::Input("samples and labels differ in length".into()));
        }
        if dims == 0 || classes == 0 {
            return Err(Error::Input("dims and classes must be positive".into()));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Input(format!("label {l} out of range for {classes} classes")));
        }
        for s in &samples {
            if s.len() != dims {
                return Err(Error::Input(format!("sample has {} values, expected {dims}", s.len())));
            }
            if let Some(v) = s.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
                return Err(Error::Input(format!("sample value {v} outside [-1, 1]")));
            }
        }
        Ok(Self { dims, classes, samples, labels })
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Vec<f64>] {
        &self.samples
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn target_samples(&self) -> Vec<TargetSample> {
        self.samples
            .iter()
            .zip(&self.labels)
            .map(|(v, &label)| TargetSample { values: v.clone(), label })
            .collect()
    }

    /// Samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            dims: self.dims,
            classes: self.classes,
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Stratified split: the first `⌈fraction · n_j⌉` shuffled samples of
    /// each class go to the first part.
    pub fn split(&self, fraction: f64, seed: u64) -> Result<(Self, Self)> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::Input(format!("split fraction {fraction} not in [0, 1]")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut first, mut second) = (Vec::new(), Vec::new());
        for class in 0..self.classes {
            let mut idx: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == class).collect();
            idx.shuffle(&mut rng);
            let cut = (fraction * idx.len() as f64).ceil() as usize;
            first.extend_from_slice(&idx[..cut]);
            second.extend_from_slice(&idx[cut..]);
        }
        first.sort_unstable();
        second.sort_unstable();
        Ok((self.subset(&first), self.subset(&second)))
    }
}

/// One class of Gaussian-blob images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobClass {
    /// Blob center `(row, col)` in pixel coordinates.
    pub center: [f64; 2],
    /// Blob covariance in pixels².
    pub covariance: [[f64; 2]; 2],
    /// Peak height added to the zero background.
    pub amplitude: f64,
}

impl BlobClass {
    pub fn round(center: [f64; 2], sigma: f64, amplitude: f64) -> Self {
        Self { center, covariance: [[sigma * sigma, 0.0], [0.0, sigma * sigma]], amplitude }
    }

    pub fn elongated(center: [f64; 2], sigma_row: f64, sigma_col: f64, amplitude: f64) -> Self {
        Self {
            center,
            covariance: [[sigma_row * sigma_row, 0.0], [0.0, sigma_col * sigma_col]],
            amplitude,
        }
    }
}

/// Class-conditional Gaussian-blob renderings on a square grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    pub side: usize,
    pub classes: Vec<BlobClass>,
    pub samples_per_class: Vec<usize>,
    /// Standard deviation of the per-sample blob center shift, in pixels.
    pub jitter: f64,
    /// Standard deviation of per-sample amplitude scaling around 1.
    pub amplitude_spread: f64,
    /// Standard deviation of independent pixel noise.
    pub noise: f64,
    pub seed: u64,
}

impl SyntheticTaskSpec {
    /// Ten blobs on a ring near the border of a 16 × 16 canvas.
    pub fn source_task(samples_per_class: usize, seed: u64) -> Self {
        Self::source_task_on(16, samples_per_class, seed)
    }

    /// Ten blobs on a ring near the border of a `side × side` canvas,
    /// leaving the central half free. Positions scale with `side`.
    pub fn source_task_on(side: usize, samples_per_class: usize, seed: u64) -> Self {
        let c = (side as f64 - 1.0) / 2.0;
        let scale = side as f64 / 16.0;
        let classes = (0..10)
            .map(|k| {
                let angle = std::f64::consts::TAU * k as f64 / 10.0;
                let radius = scale * if k % 2 == 0 { 5.5 } else { 6.5 };
                BlobClass::round([c + radius * angle.sin(), c + radius * angle.cos()], 1.6 * scale, 0.9)
            })
            .collect();
        Self {
            side,
            classes,
            samples_per_class: vec![samples_per_class; 10],
            jitter: 0.6 * scale,
            amplitude_spread: 0.15,
            noise: 0.1,
            seed,
        }
    }

    /// Two-class 8 × 8 task: a wide horizontal bar against a tall vertical
    /// bar, both near the patch center. `difficulty` in `[0, 1]` scales the
    /// pixel noise and center jitter.
    pub fn target_task(samples_per_class: usize, difficulty: f64, seed: u64) -> Self {
        let side = 8;
        let c = (side as f64 - 1.0) / 2.0;
        let d = difficulty.clamp(0.0, 1.0);
        Self {
            side,
            classes: vec![
                BlobClass::elongated([c, c], 0.9, 2.6, 0.9),
                BlobClass::elongated([c, c], 2.6, 0.9, 0.9),
            ],
            samples_per_class: vec![samples_per_class; 2],
            jitter: 0.3 + 0.9 * d,
            amplitude_spread: 0.1 + 0.2 * d,
            noise: 0.05 + 0.25 * d,
            seed,
        }
    }

    pub fn dims(&self) -> usize {
        self.side * self.side
    }

    fn validate(&self) -> Result<()> {
        if self.side == 0 || self.classes.is_empty() {
            return Err(Error::Config("synthetic task needs a positive side and classes".into()));
        }
        if self.samples_per_class.len() != self.classes.len() {
            return Err(Error::Config("one sample count per class required".into()));
        }
        for class in &self.classes {
            let [[a, b], [c, d]] = class.covariance;
            if !(a > 0.0 && d > 0.0 && (b - c).abs() < 1e-12 && a * d - b * c > 0.0) {
                return Err(Error::Config("blob covariance must be symmetric positive definite".into()));
            }
        }
        if self.jitter < 0.0 || self.noise < 0.0 || self.amplitude_spread < 0.0 {
            return Err(Error::Config("noise parameters must be non-negative".into()));
        }
        Ok(())
    }
}

fn render_blob<R: Rng>(spec: &SyntheticTaskSpec, class: &BlobClass, rng: &mut R) -> Vec<f64> {
    let [[a, b], [_, d]] = class.covariance;
    let det = a * d - b * b;
    let (ia, ib, id) = (d / det, -b / det, a / det);
    let cr = class.center[0] + spec.jitter * rng.sample::<f64, _>(StandardNormal);
    let cc = class.center[1] + spec.jitter * rng.sample::<f64, _>(StandardNormal);
    let amp = class.amplitude * (1.0 + spec.amplitude_spread * rng.sample::<f64, _>(StandardNormal));
    let mut out = Vec::with_capacity(spec.side * spec.side);
    for r in 0..spec.side {
        for c in 0..spec.side {
            let (dr, dc) = (r as f64 - cr, c as f64 - cc);
            let quad = ia * dr * dr + 2.0 * ib * dr * dc + id * dc * dc;
            let v = amp * (-0.5 * quad).exp() + spec.noise * rng.sample::<f64, _>(StandardNormal);
            // stored as f32 on disk; keep values exactly representable
            out.push(v.clamp(-1.0, 1.0) as f32 as f64);
        }
    }
    out
}

/// Renders the task; samples are grouped by class in class order.
pub fn generate_synthetic(spec: &SyntheticTaskSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut samples = Vec::new();
    let mut labels = Vec::new();
    for (label, (class, &count)) in spec.classes.iter().zip(&spec.samples_per_class).enumerate() {
        for _ in 0..count {
            samples.push(render_blob(spec, class, &mut rng));
            labels.push(label);
        }
    }
    Dataset::new(spec.dims(), spec.classes.len(), samples, labels)
}

/// Upsamples every class with replacement to the largest class count.
pub fn resample_balanced(dataset: &Dataset, seed: u64) -> Result<Dataset> {
    let counts = dataset.class_counts();
    if let Some(j) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Input(format!("class {j} has no samples to resample")));
    }
    let target = counts.iter().copied().max().unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices: Vec<usize> = (0..dataset.len()).collect();
    for class in 0..dataset.classes() {
        let members: Vec<usize> = (0..dataset.len()).filter(|&i| dataset.labels[i] == class).collect();
        for _ in members.len()..target {
            indices.push(members[rng.random_range(0..members.len())]);
        }
    }
    Ok(dataset.subset(&indices))
}

/// Train/test index pair of one fold.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffled k-fold partition of `n` indices; fold sizes differ by at most one.
pub fn kfold_indices(n: usize, k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 {
        return Err(Error::Input("k-fold needs k >= 2".into()));
    }
    if k > n {
        return Err(Error::Input(format!("cannot split {n} samples into {k} folds")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (n / k, n % k);
    let mut start = 0;
    let mut folds = Vec::with_capacity(k);
    for f in 0..k {
        let len = base + usize::from(f < extra);
        let mut test = order[start..start + len].to_vec();
        let mut train: Vec<usize> = order[..start].iter().chain(&order[start + len..]).copied().collect();
        test.sort_unstable();
        train.sort_unstable();
        folds.push(Fold { train, test });
        start += len;
    }
    Ok(folds)
}

pub fn kfold_split(dataset: &Dataset, k: usize, seed: u64) -> Result<Vec<(Dataset, Dataset)>> {
    Ok(kfold_indices(dataset.len(), k, seed)?
        .into_iter()
        .map(|f| (dataset.subset(&f.train), dataset.subset(&f.test)))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub dims: usize,
    pub classes: usize,
    pub value_range: [f64; 2],
    pub samples: Vec<ManifestEntry>,
}

/// Writes `dir/manifest.json` and `dir/samples/NNNNNN.f32`.
pub fn save_dataset(dataset: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join("samples"))?;
    let mut entries = Vec::with_capacity(dataset.len());
    for (i, (sample, &label)) in dataset.samples.iter().zip(&dataset.labels).enumerate() {
        let rel = format!("samples/{i:06}.f32");
        let mut bytes = Vec::with_capacity(4 * sample.len());
        for &v in sample {
            let single = v as f32;
            if single as f64 != v {
                return Err(Error::Input(format!("sample {i} value {v} is not representable as f32")));
            }
            bytes.extend_from_slice(&single.to_le_bytes());
        }
        fs::write(dir.join(&rel), bytes)?;
        entries.push(ManifestEntry { path: rel, label });
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        dims: dataset.dims,
        classes: dataset.classes,
        value_range: [-1.0, 1.0],
        samples: entries,
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let manifest_path: PathBuf = dir.join(MANIFEST_FILE);
    let manifest: DatasetManifest = serde_json::from_slice(&fs::read(&manifest_path)?)?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Input(format!("unsupported manifest version {}", manifest.version)));
    }
    let mut samples = Vec::with_capacity(manifest.samples.len());
    let mut labels = Vec::with_capacity(manifest.samples.len());
    for entry in &manifest.samples {
        let bytes = fs::read(dir.join(&entry.path))?;
        if bytes.len() != 4 * manifest.dims {
            return Err(Error::Input(format!(
                "{} holds {} bytes, expected {}",
                entry.path,
                bytes.len(),
                4 * manifest.dims
            )));
        }
        samples.push(
            bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
        );
        labels.push(entry.label);
    }
    Dataset::new(manifest.dims, manifest.classes, samples, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toy(counts: &[usize]) -> Dataset {
        let mut samples = Vec::new();
        let mut labels = Vec::new();
        for (class, &n) in counts.iter().enumerate() {
            for i in 0..n {
                samples.push(vec![(i % 8) as f64 / 8.0, class as f64 / 8.0]);
                labels.push(class);
            }
        }
        Dataset::new(2, counts.len(), samples, labels).unwrap()
    }

    #[test]
    fn generation_is_seeded_and_sized() {
        let spec = SyntheticTaskSpec::target_task(30, 0.5, 4);
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.class_counts(), vec![30, 30]);
        assert_eq!(a.dims(), 64);
        assert!(a.samples().iter().flatten().all(|v| (-1.0..=1.0).contains(v)));

        let mut skewed = SyntheticTaskSpec::source_task(5, 1);
        skewed.samples_per_class[3] = 11;
        assert_eq!(generate_synthetic(&skewed).unwrap().class_counts()[3], 11);
    }

    #[test]
    fn easy_target_task_is_linearly_separable() {
        // least-squares linear probe on [x, 1] against ±1 targets
        let train = generate_synthetic(&SyntheticTaskSpec::target_task(200, 0.0, 1)).unwrap();
        let test = generate_synthetic(&SyntheticTaskSpec::target_task(200, 0.0, 2)).unwrap();
        let d = train.dims() + 1;
        let mut w = vec![0.0; d];
        // plain gradient descent on squared loss
        for _ in 0..300 {
            let mut g = vec![0.0; d];
            for (x, &y) in train.samples().iter().zip(train.labels()) {
                let t = if y == 1 { 1.0 } else { -1.0 };
                let pred: f64 = x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + w[d - 1];
                let err = pred - t;
                for (gi, xi) in g.iter_mut().zip(x.iter().chain(std::iter::once(&1.0))) {
                    *gi += err * xi / train.len() as f64;
                }
            }
            w.iter_mut().zip(&g).for_each(|(wi, gi)| *wi -= 0.05 * gi);
        }
        let correct = test
            .samples()
            .iter()
            .zip(test.labels())
            .filter(|(x, &y)| {
                let pred: f64 = x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + w[d - 1];
                (pred > 0.0) == (y == 1)
            })
            .count();
        assert!(correct as f64 / test.len() as f64 >= 0.9);
    }

    #[test]
    fn resampling_balances_with_replacement() {
        let ds = toy(&[70, 10, 20]);
        let balanced = resample_balanced(&ds, 3).unwrap();
        assert_eq!(balanced.class_counts(), vec![70, 70, 70]);
        // majority class untouched, originals kept
        assert_eq!(&balanced.samples()[..100], ds.samples());

        let even = toy(&[5, 5]);
        assert_eq!(resample_balanced(&even, 0).unwrap(), even);
        let single = toy(&[9]);
        assert_eq!(resample_balanced(&single, 0).unwrap(), single);

        let empty_class = Dataset::new(2, 2, vec![vec![0.0, 0.0]], vec![0]).unwrap();
        assert!(resample_balanced(&empty_class, 0).is_err());
    }

    #[test]
    fn kfold_sizes() {
        let folds = kfold_indices(10, 10, 1).unwrap();
        assert!(folds.iter().all(|f| f.test.len() == 1 && f.train.len() == 9));

        let folds = kfold_indices(1034, 10, 5).unwrap();
        assert!(folds.iter().all(|f| f.test.len() == 103 || f.test.len() == 104));
        let mean = folds.iter().map(|f| f.test.len()).sum::<usize>() as f64 / 10.0;
        assert!((mean - 103.4).abs() < 1e-12);

        assert!(kfold_indices(3, 4, 0).is_err());
        assert!(kfold_indices(3, 1, 0).is_err());
        assert_eq!(kfold_indices(50, 5, 8).unwrap(), kfold_indices(50, 5, 8).unwrap());
    }

    #[test]
    fn kfold_split_builds_datasets() {
        let ds = toy(&[6, 6]);
        let folds = kfold_split(&ds, 3, 2).unwrap();
        assert_eq!(folds.len(), 3);
        assert!(folds.iter().all(|(train, test)| train.len() + test.len() == 12));
    }

    proptest! {
        #[test]
        fn kfold_partitions(n in 2usize..300, k in 2usize..12, seed in any::<u64>()) {
            prop_assume!(k <= n);
            let folds = kfold_indices(n, k, seed).unwrap();
            let mut seen = vec![0usize; n];
            for f in &folds {
                for &i in &f.test {
                    seen[i] += 1;
                }
                prop_assert_eq!(f.test.len() + f.train.len(), n);
                prop_assert!(f.train.iter().all(|i| f.test.binary_search(i).is_err()));
            }
            prop_assert!(seen.iter().all(|&c| c == 1));
        }
    }

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_synthetic(&SyntheticTaskSpec::target_task(4, 1.0, 9)).unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.labels(), ds.labels());
        for (a, b) in back.samples().iter().flatten().zip(ds.samples().iter().flatten()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn load_rejects_short_sample_file() {
        let dir = tempfile::tempdir().unwrap();
        let ds = toy(&[1, 1]);
        save_dataset(&ds, dir.path()).unwrap();
        fs::write(dir.path().join("samples/000000.f32"), [0u8; 3]).unwrap();
        assert!(load_dataset(dir.path()).is_err());
        assert!(load_dataset(dir.path().join("missing")).is_err());
    }

    #[test]
    fn stratified_split() {
        let ds = toy(&[10, 30]);
        let (a, b) = ds.split(0.5, 1).unwrap();
        assert_eq!(a.class_counts(), vec![5, 15]);
        assert_eq!(b.class_counts(), vec![5, 15]);
    }
}
