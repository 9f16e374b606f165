//! The black-box boundary.
//!
//! Training code sees only [`Oracle::predict`]: a batch of inputs in, one
//! score row per input out. Every answered input is one query in the
//! [`QueryLedger`].

mod http;
mod ledger;
pub mod server;

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use http::{HttpBackend, HttpConfig, OracleInfo, PredictRequest, PredictResponse, ErrorBody, ENDPOINT_ENV};
pub use ledger::{budget_guard, Budget, LedgerItem, LedgerSnapshot, QueryLedger, Reservation};

use crate::error::{Error, Result};
use crate::mapping::check_simplex;
use crate::toymodel::{softmax, Mlp};

/// One score row per queried input, each on the probability simplex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreBatch {
    rows: Vec<Vec<f64>>,
}

impl ScoreBatch {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        for row in &rows {
            check_simplex(row)?;
        }
        Ok(Self { rows })
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn into_rows(self) -> Vec<Vec<f64>> {
        self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Stable softmax of a raw score row.
pub fn softmax_adapter(raw: &[f64]) -> Result<Vec<f64>> {
    if raw.is_empty() {
        return Err(Error::Input("empty score row".into()));
    }
    if let Some(v) = raw.iter().find(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite raw score {v}")));
    }
    Ok(softmax(raw))
}

/// How raw backend output becomes simplex scores.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreAdapter {
    /// Backend already returns probabilities.
    #[default]
    Identity,
    /// Backend returns logits.
    Softmax,
}

/// Something that answers prediction queries.
///
/// `answered` must be called with the number of inputs for which a response
/// was received, as soon as it is received, including responses that carry
/// an error.
pub trait Backend: Send + Sync {
    fn input_dims(&self) -> usize;
    fn classes(&self) -> usize;
    fn predict_raw(&self, inputs: &[Vec<f64>], answered: &mut dyn FnMut(usize)) -> Result<Vec<Vec<f64>>>;

    /// Whether `predict_raw` may be called from several threads at once.
    fn concurrent(&self) -> bool {
        true
    }
}

/// In-process backend wrapping the toy model's forward pass.
#[derive(Debug, Clone)]
pub struct LocalBackend {
    model: Arc<Mlp>,
}

impl LocalBackend {
    pub fn new(model: Arc<Mlp>) -> Self {
        Self { model }
    }
}

impl Backend for LocalBackend {
    fn input_dims(&self) -> usize {
        self.model.input_dims()
    }

    fn classes(&self) -> usize {
        self.model.classes()
    }

    fn predict_raw(&self, inputs: &[Vec<f64>], answered: &mut dyn FnMut(usize)) -> Result<Vec<Vec<f64>>> {
        if let Some(x) = inputs.iter().find(|x| x.len() != self.model.input_dims()) {
            return Err(Error::Input(format!("input has {} values, model expects {}", x.len(), self.model.input_dims())));
        }
        let rows = inputs.par_iter().map(|x| self.model.forward(x)).collect();
        answered(inputs.len());
        Ok(rows)
    }
}

/// A metered prediction oracle: backend, score adapter and query ledger.
pub struct Oracle {
    backend: Box<dyn Backend>,
    adapter: ScoreAdapter,
    ledger: QueryLedger,
}

impl std::fmt::Debug for Oracle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Oracle")
            .field("input_dims", &self.backend.input_dims())
            .field("classes", &self.backend.classes())
            .field("adapter", &self.adapter)
            .field("ledger", &self.ledger.snapshot())
            .finish()
    }
}

impl Oracle {
    pub fn new(backend: impl Backend + 'static, adapter: ScoreAdapter, ledger: QueryLedger) -> Self {
        Self { backend: Box::new(backend), adapter, ledger }
    }

    /// Free, unlimited oracle over an in-process model.
    pub fn local(model: Arc<Mlp>) -> Self {
        Self::new(LocalBackend::new(model), ScoreAdapter::Identity, QueryLedger::free())
    }

    pub fn input_dims(&self) -> usize {
        self.backend.input_dims()
    }

    pub fn classes(&self) -> usize {
        self.backend.classes()
    }

    pub fn concurrent(&self) -> bool {
        self.backend.concurrent()
    }

    pub fn ledger(&self) -> &QueryLedger {
        &self.ledger
    }

    /// Scores for each input, charging one query per input under `tag`.
    pub fn predict(&self, inputs: &[Vec<f64>], tag: &str) -> Result<ScoreBatch> {
        if inputs.is_empty() {
            return ScoreBatch::new(Vec::new());
        }
        let dims = self.input_dims();
        for x in inputs {
            if x.len() != dims {
                return Err(Error::Input(format!("input has {} values, oracle expects {dims}", x.len())));
            }
            if let Some(v) = x.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
                return Err(Error::Input(format!("input value {v} outside [-1, 1]")));
            }
        }
        let mut reservation = self.ledger.reserve(inputs.len() as u64)?;
        let raw = self
            .backend
            .predict_raw(inputs, &mut |n| reservation.answered(tag, n as u64))?;
        drop(reservation);
        if raw.len() != inputs.len() {
            return Err(Error::Contract(format!("{} score rows for {} inputs", raw.len(), inputs.len())));
        }
        let classes = self.classes();
        let rows = raw
            .into_iter()
            .map(|row| {
                if row.len() != classes {
                    return Err(Error::Contract(format!("score row has {} entries, expected {classes}", row.len())));
                }
                match self.adapter {
                    ScoreAdapter::Identity => Ok(row),
                    ScoreAdapter::Softmax => softmax_adapter(&row),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        ScoreBatch::new(rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> Arc<Mlp> {
        Arc::new(Mlp::random(&[6, 5, 4], 1).unwrap())
    }

    #[test]
    fn each_input_is_one_query() {
        let oracle = Oracle::local(model());
        let inputs = vec![vec![0.1; 6]; 7];
        oracle.predict(&inputs, "t").unwrap();
        assert_eq!(oracle.ledger().count(), 7);
        oracle.predict(&inputs[..2], "t").unwrap();
        assert_eq!(oracle.ledger().count(), 9);
    }

    #[test]
    fn local_backend_passes_model_scores_through() {
        let m = model();
        let oracle = Oracle::local(Arc::clone(&m));
        let x = vec![0.3, -0.2, 0.9, 0.0, -1.0, 1.0];
        let rows = oracle.predict(&[x.clone()], "t").unwrap();
        assert_eq!(rows.rows()[0], m.forward(&x));
    }

    #[test]
    fn softmax_adapter_cases() {
        assert_eq!(softmax_adapter(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        let s = softmax_adapter(&[1000.0, 0.0]).unwrap();
        assert!((s[0] - 1.0).abs() < 1e-12 && s[1].abs() < 1e-12);
        let s = softmax_adapter(&[1.0, 2.0, 3.0]).unwrap();
        // 40-digit oracle: e^k / (e + e^2 + e^3)
        let expected = [0.090_030_57, 0.244_728_47, 0.665_240_96];
        for (a, b) in s.iter().zip(expected) {
            assert!((a - b).abs() < 5e-9);
        }
        assert!(matches!(softmax_adapter(&[f64::NAN, 0.0]), Err(Error::Numeric(_))));
    }

    struct Raw(Vec<f64>);

    impl Backend for Raw {
        fn input_dims(&self) -> usize {
            2
        }
        fn classes(&self) -> usize {
            self.0.len()
        }
        fn predict_raw(&self, inputs: &[Vec<f64>], answered: &mut dyn FnMut(usize)) -> Result<Vec<Vec<f64>>> {
            answered(inputs.len());
            Ok(vec![self.0.clone(); inputs.len()])
        }
    }

    #[test]
    fn off_simplex_backend_is_a_contract_error() {
        let oracle = Oracle::new(Raw(vec![2.0, 3.0]), ScoreAdapter::Identity, QueryLedger::free());
        assert!(matches!(oracle.predict(&[vec![0.0; 2]], "t"), Err(Error::Contract(_))));
        // still charged: the backend answered
        assert_eq!(oracle.ledger().count(), 1);
        let adapted = Oracle::new(Raw(vec![2.0, 3.0]), ScoreAdapter::Softmax, QueryLedger::free());
        assert!(adapted.predict(&[vec![0.0; 2]], "t").is_ok());
    }

    #[test]
    fn out_of_range_inputs_rejected_before_charging() {
        let oracle = Oracle::local(model());
        assert!(matches!(oracle.predict(&[vec![1.5; 6]], "t"), Err(Error::Input(_))));
        assert!(matches!(oracle.predict(&[vec![0.0; 5]], "t"), Err(Error::Input(_))));
        assert_eq!(oracle.ledger().count(), 0);
    }

    #[test]
    fn budget_blocks_before_sending() {
        let ledger = QueryLedger::new(1.0, Budget::queries(5)).unwrap();
        let oracle = Oracle::new(LocalBackend::new(model()), ScoreAdapter::Identity, ledger);
        oracle.predict(&vec![vec![0.0; 6]; 4], "t").unwrap();
        assert!(matches!(
            oracle.predict(&vec![vec![0.0; 6]; 2], "t"),
            Err(Error::BudgetExceeded { .. })
        ));
        assert_eq!(oracle.ledger().count(), 4);
    }
}
