//! The synthetic reprogramming benchmark: a source model trained on the
//! 10-class blob task, and an embedded 2-class target task to reprogram it
//! for.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dataio::{generate_synthetic, Dataset, SyntheticTaskSpec};
use crate::error::{Error, Result};
use crate::mapping::{frequency_mapping, random_mapping, LabelMapping};
use crate::oracle::Oracle;
use crate::program::CenteredLayout;
use crate::toymodel::{train_source, Mlp, SourceTraining, SourceTrainingReport};
use crate::trainer::{frequency_table_pass, train_ar_whitebox, train_bar, EmbeddedSet, TrainConfig, TrainReport};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MappingKind {
    #[default]
    Random,
    Frequency,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyTaskConfig {
    pub source_per_class: usize,
    /// Hidden layer widths of the source model.
    pub hidden: Vec<usize>,
    pub source_training: SourceTraining,
    pub target_train_per_class: usize,
    pub target_test_per_class: usize,
    pub difficulty: f64,
    pub canvas_side: usize,
    pub patch_side: usize,
    pub seed: u64,
}

impl Default for ToyTaskConfig {
    fn default() -> Self {
        Self {
            source_per_class: 200,
            hidden: vec![256, 64],
            source_training: SourceTraining::default(),
            target_train_per_class: 200,
            target_test_per_class: 200,
            difficulty: 0.5,
            canvas_side: 16,
            patch_side: 8,
            seed: 0,
        }
    }
}

/// Source model plus embedded target train/test sets.
#[derive(Debug, Clone)]
pub struct ToyTask {
    pub model: Arc<Mlp>,
    pub source_report: SourceTrainingReport,
    pub layout: CenteredLayout,
    pub train: EmbeddedSet,
    pub test: EmbeddedSet,
}

impl ToyTask {
    pub fn build(cfg: &ToyTaskConfig) -> Result<Self> {
        let source = generate_synthetic(&SyntheticTaskSpec::source_task_on(cfg.canvas_side, cfg.source_per_class, cfg.seed))?;
        let mut sizes = vec![source.dims()];
        sizes.extend_from_slice(&cfg.hidden);
        sizes.push(source.classes());
        let mut model = Mlp::random(&sizes, cfg.seed)?;
        let source_report = train_source(&mut model, source.samples(), source.labels(), &cfg.source_training)?;
        let (train, test) = target_sets(cfg)?;
        Self::from_parts(Arc::new(model), source_report, cfg, &train, &test)
    }

    /// Reuses a trained source model.
    pub fn with_model(model: Arc<Mlp>, cfg: &ToyTaskConfig) -> Result<Self> {
        let (train, test) = target_sets(cfg)?;
        let report = SourceTrainingReport {
            epochs_run: 0,
            train_accuracy: f64::NAN,
            reached_target: false,
            epoch_losses: Vec::new(),
        };
        Self::from_parts(model, report, cfg, &train, &test)
    }

    fn from_parts(
        model: Arc<Mlp>,
        source_report: SourceTrainingReport,
        cfg: &ToyTaskConfig,
        train: &Dataset,
        test: &Dataset,
    ) -> Result<Self> {
        let layout = CenteredLayout::square(cfg.canvas_side, cfg.patch_side, 1);
        if layout.canvas_dims() != model.input_dims() {
            return Err(Error::Config(format!(
                "{}-value canvas for a model taking {} inputs",
                layout.canvas_dims(),
                model.input_dims()
            )));
        }
        Ok(Self {
            model,
            source_report,
            train: EmbeddedSet::new(train, &layout)?,
            test: EmbeddedSet::new(test, &layout)?,
            layout,
        })
    }

    pub fn oracle(&self) -> Oracle {
        Oracle::local(Arc::clone(&self.model))
    }

    /// Builds a mapping of size `m`; frequency mapping queries `oracle` once
    /// per training sample.
    pub fn mapping(&self, kind: MappingKind, size: usize, seed: u64, oracle: &Oracle) -> Result<LabelMapping> {
        match kind {
            MappingKind::Random => random_mapping(self.model.classes(), self.train.classes(), size, seed),
            MappingKind::Frequency => frequency_mapping(&frequency_table_pass(&self.train, oracle)?, size),
        }
    }

    /// Black-box run against a fresh free local oracle, evaluated on the test set.
    /// Aborted runs surface their error; use the trainer directly to keep
    /// partial reports.
    pub fn run_blackbox(&self, cfg: &TrainConfig, kind: MappingKind, size: usize) -> Result<TrainReport> {
        let oracle = self.oracle();
        let mapping = self.mapping(kind, size, cfg.seed, &oracle)?;
        train_bar(cfg, &self.train, Some(&self.test), &oracle, &mapping).map_err(|a| a.error)
    }

    pub fn run_whitebox(&self, cfg: &TrainConfig, kind: MappingKind, size: usize) -> Result<TrainReport> {
        let oracle = self.oracle();
        let mapping = self.mapping(kind, size, cfg.seed, &oracle)?;
        train_ar_whitebox(cfg, &self.train, Some(&self.test), Arc::clone(&self.model), &mapping).map_err(|a| a.error)
    }
}

fn target_sets(cfg: &ToyTaskConfig) -> Result<(Dataset, Dataset)> {
    let per_class = cfg.target_train_per_class + cfg.target_test_per_class;
    let target = generate_synthetic(&SyntheticTaskSpec::target_task(per_class, cfg.difficulty, cfg.seed.wrapping_add(1)))?;
    target.split(cfg.target_train_per_class as f64 / per_class as f64, cfg.seed.wrapping_add(2))
}
