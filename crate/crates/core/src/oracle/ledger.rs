use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Query limits. `None` means unlimited.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Budget {
    pub max_queries: Option<u64>,
    pub max_dollars: Option<f64>,
}

impl Budget {
    pub fn unlimited() -> Self {
        Self::default()
    }

    pub fn queries(limit: u64) -> Self {
        Self { max_queries: Some(limit), max_dollars: None }
    }

    pub fn dollars(limit: f64) -> Self {
        Self { max_queries: None, max_dollars: Some(limit) }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(d) = self.max_dollars {
            if !(d >= 0.0) {
                return Err(Error::Config(format!("dollar limit {d} must be non-negative")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerItem {
    pub tag: String,
    pub count: u64,
}

/// Point-in-time copy of a [`QueryLedger`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerSnapshot {
    pub count: u64,
    pub unit_cost: f64,
    pub dollars: f64,
    pub itemized: Vec<LedgerItem>,
}

impl LedgerSnapshot {
    pub fn tagged(&self, tag: &str) -> u64 {
        self.itemized.iter().filter(|i| i.tag == tag).map(|i| i.count).sum()
    }
}

#[derive(Debug, Default)]
struct LedgerState {
    count: u64,
    in_flight: u64,
    itemized: Vec<LedgerItem>,
}

/// Monotone count of answered oracle queries with a per-query dollar cost.
#[derive(Debug)]
pub struct QueryLedger {
    unit_cost: f64,
    budget: Budget,
    state: Mutex<LedgerState>,
}

impl QueryLedger {
    pub fn new(unit_cost: f64, budget: Budget) -> Result<Self> {
        if !(unit_cost >= 0.0 && unit_cost.is_finite()) {
            return Err(Error::Config(format!("unit cost {unit_cost} must be non-negative")));
        }
        budget.validate()?;
        Ok(Self { unit_cost, budget, state: Mutex::new(LedgerState::default()) })
    }

    pub fn free() -> Self {
        Self::new(0.0, Budget::unlimited()).expect("valid")
    }

    pub fn unit_cost(&self) -> f64 {
        self.unit_cost
    }

    pub fn budget(&self) -> Budget {
        self.budget
    }

    pub fn count(&self) -> u64 {
        self.state.lock().expect("ledger poisoned").count
    }

    pub fn dollars(&self) -> f64 {
        self.count() as f64 * self.unit_cost
    }

    pub fn snapshot(&self) -> LedgerSnapshot {
        let state = self.state.lock().expect("ledger poisoned");
        LedgerSnapshot {
            count: state.count,
            unit_cost: self.unit_cost,
            dollars: state.count as f64 * self.unit_cost,
            itemized: state.itemized.clone(),
        }
    }

    /// Reserves `n` queries against the budget, failing before any of them
    /// is sent if the reservation would cross a limit.
    pub fn reserve(&self, n: u64) -> Result<Reservation<'_>> {
        let mut state = self.state.lock().expect("ledger poisoned");
        budget_guard(state.count + state.in_flight, n, self.unit_cost, &self.budget)?;
        state.in_flight += n;
        Ok(Reservation { ledger: self, remaining: n })
    }

    fn commit(&self, tag: &str, n: u64) {
        let mut state = self.state.lock().expect("ledger poisoned");
        state.in_flight -= n;
        state.count += n;
        match state.itemized.iter_mut().find(|i| i.tag == tag) {
            Some(item) => item.count += n,
            None => state.itemized.push(LedgerItem { tag: tag.to_string(), count: n }),
        }
    }

    fn release(&self, n: u64) {
        self.state.lock().expect("ledger poisoned").in_flight -= n;
    }
}

/// Checks that `requested` more queries on top of `spent` stay within
/// `budget`.
pub fn budget_guard(spent: u64, requested: u64, unit_cost: f64, budget: &Budget) -> Result<()> {
    let total = spent + requested;
    if let Some(limit) = budget.max_queries {
        if total > limit {
            return Err(Error::BudgetExceeded { spent, requested, limit: format!("{limit} queries") });
        }
    }
    if let Some(limit) = budget.max_dollars {
        if total as f64 * unit_cost > limit {
            return Err(Error::BudgetExceeded { spent, requested, limit: format!("${limit}") });
        }
    }
    Ok(())
}

/// Queries reserved but not yet answered. Unanswered queries are released
/// on drop and never counted.
#[derive(Debug)]
pub struct Reservation<'a> {
    ledger: &'a QueryLedger,
    remaining: u64,
}

impl Reservation<'_> {
    /// Records `n` answered queries under `tag`.
    pub fn answered(&mut self, tag: &str, n: u64) {
        let n = n.min(self.remaining);
        self.remaining -= n;
        self.ledger.commit(tag, n);
    }
}

impl Drop for Reservation<'_> {
    fn drop(&mut self) {
        if self.remaining > 0 {
            self.ledger.release(self.remaining);
        }
    }
}
