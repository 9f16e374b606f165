//! Multi-label mapping from source-model scores to target-task scores.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on the simplex constraint of incoming score rows.
pub const SIMPLEX_TOLERANCE: f64 = 1e-6;

/// Disjoint, equally sized subsets of source labels, one per target label.
///
/// Serializes as `{"K": .., "Kp": .., "subsets": [[..], ..]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawMapping", into = "RawMapping")]
pub struct LabelMapping {
    source_labels: usize,
    subsets: Vec<Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
struct RawMapping {
    #[serde(rename = "K")]
    source_labels: usize,
    #[serde(rename = "Kp")]
    target_labels: usize,
    subsets: Vec<Vec<usize>>,
}

impl TryFrom<RawMapping> for LabelMapping {
    type Error = Error;

    fn try_from(raw: RawMapping) -> Result<Self> {
        if raw.subsets.len() != raw.target_labels {
            return Err(Error::Input(format!(
                "Kp = {} but {} subsets given",
                raw.target_labels,
                raw.subsets.len()
            )));
        }
        LabelMapping::new(raw.source_labels, raw.subsets)
    }
}

impl From<LabelMapping> for RawMapping {
    fn from(m: LabelMapping) -> Self {
        RawMapping {
            source_labels: m.source_labels,
            target_labels: m.subsets.len(),
            subsets: m.subsets,
        }
    }
}

impl LabelMapping {
    pub fn new(source_labels: usize, subsets: Vec<Vec<usize>>) -> Result<Self> {
        let size = subsets.first().map(Vec::len).unwrap_or(0);
        if subsets.is_empty() || size == 0 {
            return Err(Error::Input("mapping needs at least one non-empty subset".into()));
        }
        if subsets.iter().any(|s| s.len() != size) {
            return Err(Error::Input("mapping subsets must all have the same size".into()));
        }
        if subsets.len() * size > source_labels {
            return Err(Error::Capacity {
                source_labels,
                target_labels: subsets.len(),
                mapping_size: size,
            });
        }
        let mut used = vec![false; source_labels];
        for &k in subsets.iter().flatten() {
            if k >= source_labels {
                return Err(Error::Input(format!("source label {k} out of range")));
            }
            if std::mem::replace(&mut used[k], true) {
                return Err(Error::Input(format!("source label {k} assigned twice")));
            }
        }
        Ok(Self { source_labels, subsets })
    }

    pub fn source_labels(&self) -> usize {
        self.source_labels
    }

    pub fn target_labels(&self) -> usize {
        self.subsets.len()
    }

    /// Uniform subset size `m`.
    pub fn size(&self) -> usize {
        self.subsets[0].len()
    }

    pub fn subsets(&self) -> &[Vec<usize>] {
        &self.subsets
    }

    /// Target label that owns source label `k`, if any.
    pub fn owner_of(&self, k: usize) -> Option<usize> {
        self.subsets.iter().position(|s| s.contains(&k))
    }
}

/// Checks a score row lies on the probability simplex.
pub fn check_simplex(scores: &[f64]) -> Result<()> {
    if let Some(s) = scores.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
        return Err(Error::Contract(format!("score {s} is negative or non-finite")));
    }
    let total: f64 = scores.iter().sum();
    if (total - 1.0).abs() > SIMPLEX_TOLERANCE {
        return Err(Error::Contract(format!("scores sum to {total}, not 1")));
    }
    Ok(())
}

/// `h_j = mean of scores over S_j`.
pub fn aggregate(scores: &[f64], mapping: &LabelMapping) -> Result<Vec<f64>> {
    if scores.len() != mapping.source_labels {
        return Err(Error::Input(format!(
            "expected {} source scores, got {}",
            mapping.source_labels,
            scores.len()
        )));
    }
    check_simplex(scores)?;
    Ok(mapping
        .subsets
        .iter()
        .map(|s| s.iter().map(|&k| scores[k]).sum::<f64>() / s.len() as f64)
        .collect())
}

fn check_capacity(source_labels: usize, target_labels: usize, size: usize) -> Result<()> {
    if target_labels == 0 || size == 0 {
        return Err(Error::Input("mapping needs at least one target label and m >= 1".into()));
    }
    if target_labels * size > source_labels {
        return Err(Error::Capacity {
            source_labels,
            target_labels,
            mapping_size: size,
        });
    }
    Ok(())
}

/// Seeded uniform draw of `target_labels` disjoint subsets of size `size`.
pub fn random_mapping(source_labels: usize, target_labels: usize, size: usize, seed: u64) -> Result<LabelMapping> {
    check_capacity(source_labels, target_labels, size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<usize> = (0..source_labels).collect();
    labels.shuffle(&mut rng);
    let subsets = labels
        .chunks(size)
        .take(target_labels)
        .map(<[usize]>::to_vec)
        .collect();
    LabelMapping::new(source_labels, subsets)
}

/// Counts of top-1 source predictions per target class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrequencyTable {
    counts: Vec<Vec<u64>>,
}

impl FrequencyTable {
    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let width = counts.first().map(Vec::len).unwrap_or(0);
        if counts.is_empty() || width == 0 || counts.iter().any(|r| r.len() != width) {
            return Err(Error::Input("frequency table must be a non-empty rectangle".into()));
        }
        Ok(Self { counts })
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn target_labels(&self) -> usize {
        self.counts.len()
    }

    pub fn source_labels(&self) -> usize {
        self.counts[0].len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }
}

/// Tallies top-1 source predictions against target labels.
pub fn build_frequency_table(
    predictions: &[usize],
    labels: &[usize],
    source_labels: usize,
    target_labels: usize,
) -> Result<FrequencyTable> {
    if predictions.len() != labels.len() {
        return Err(Error::Input("predictions and labels differ in length".into()));
    }
    if source_labels == 0 || target_labels == 0 {
        return Err(Error::Input("label counts must be positive".into()));
    }
    let mut counts = vec![vec![0u64; source_labels]; target_labels];
    for (&k, &j) in predictions.iter().zip(labels) {
        if k >= source_labels || j >= target_labels {
            return Err(Error::Input(format!("label pair ({j}, {k}) out of range")));
        }
        counts[j][k] += 1;
    }
    FrequencyTable::from_counts(counts)
}

/// Greedy frequency-based mapping.
///
/// Repeatedly takes the largest remaining count among open target labels and
/// unassigned source labels, breaking ties by smaller source label then
/// smaller target label. Zero counts never drive an assignment; labels still
/// short once the positive counts run out take the lowest free source labels.
pub fn frequency_mapping(table: &FrequencyTable, size: usize) -> Result<LabelMapping> {
    let source_labels = table.source_labels();
    let target_labels = table.target_labels();
    check_capacity(source_labels, target_labels, size)?;

    let mut subsets: Vec<Vec<usize>> = vec![Vec::with_capacity(size); target_labels];
    let mut taken = vec![false; source_labels];
    loop {
        let mut best: Option<(u64, usize, usize)> = None;
        for k in 0..source_labels {
            if taken[k] {
                continue;
            }
            for (j, subset) in subsets.iter().enumerate() {
                if subset.len() >= size {
                    continue;
                }
                let c = table.counts[j][k];
                // strict > keeps the first (smallest k, then smallest j) maximum
                if c > 0 && best.is_none_or(|(bc, _, _)| c > bc) {
                    best = Some((c, k, j));
                }
            }
        }
        let Some((_, k, j)) = best else { break };
        subsets[j].push(k);
        taken[k] = true;
    }

    let mut free = (0..source_labels).filter(|&k| !taken[k]);
    for subset in &mut subsets {
        while subset.len() < size {
            subset.push(free.next().expect("capacity checked"));
        }
        subset.sort_unstable();
    }
    LabelMapping::new(source_labels, subsets)
}
