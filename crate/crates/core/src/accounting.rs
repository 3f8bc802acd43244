//! Privacy ledger with basic and strong (moments-accountant) composition.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mechanism::MechanismKind;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub kind: MechanismKind,
    pub epsilon: f64,
    pub delta: f64,
    pub round: usize,
    pub local_step: usize,
}

/// Per-step privacy records in execution order. One entry per `(t, e)`:
/// agents hold disjoint data, so a round's `P` parallel releases cost one step.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PrivacyLedger {
    entries: Vec<LedgerEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Composition {
    Basic,
    Strong,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyTotal {
    pub epsilon: f64,
    pub delta: f64,
}

impl PrivacyLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// `count` identical Gaussian or Laplace steps, numbered sequentially.
    pub fn homogeneous(kind: MechanismKind, epsilon: f64, delta: f64, count: usize) -> Self {
        let mut ledger = Self::new();
        for k in 0..count {
            ledger.record(LedgerEntry {
                kind,
                epsilon,
                delta,
                round: k + 1,
                local_step: 1,
            });
        }
        ledger
    }

    pub fn record(&mut self, entry: LedgerEntry) {
        self.entries.push(entry);
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Ledger restricted to the first `k` entries.
    pub fn prefix(&self, k: usize) -> PrivacyLedger {
        PrivacyLedger {
            entries: self.entries[..k.min(self.entries.len())].to_vec(),
        }
    }

    pub fn compose(&self, method: Composition) -> Result<PrivacyTotal> {
        compose(self, method)
    }
}

pub fn compose(ledger: &PrivacyLedger, method: Composition) -> Result<PrivacyTotal> {
    match method {
        Composition::Basic => Ok(PrivacyTotal {
            epsilon: ledger.entries.iter().map(|e| e.epsilon).sum(),
            delta: ledger.entries.iter().map(|e| e.delta).sum(),
        }),
        Composition::Strong => compose_strong(ledger),
    }
}

/// `(sqrt(TE ln(1/delta) / ln(1.25/delta)) * eps, delta)` for `TE`
/// identical Gaussian steps.
fn compose_strong(ledger: &PrivacyLedger) -> Result<PrivacyTotal> {
    let Some(first) = ledger.entries.first() else {
        return Ok(PrivacyTotal {
            epsilon: 0.0,
            delta: 0.0,
        });
    };
    for e in &ledger.entries {
        if e.kind != MechanismKind::Gaussian {
            return Err(Error::Accounting(format!(
                "strong composition needs Gaussian steps, found {}",
                e.kind
            )));
        }
        if e.epsilon != first.epsilon || e.delta != first.delta {
            return Err(Error::Accounting(format!(
                "strong composition needs identical steps, found ({}, {}) and ({}, {})",
                first.epsilon, first.delta, e.epsilon, e.delta
            )));
        }
    }
    let delta = first.delta;
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Accounting(format!(
            "strong composition needs delta in (0, 1), got {delta}"
        )));
    }
    let steps = ledger.entries.len() as f64;
    let factor = (steps * (1.0 / delta).ln() / (1.25 / delta).ln()).sqrt();
    Ok(PrivacyTotal {
        epsilon: factor * first.epsilon,
        delta,
    })
}

/// Log moment-generating-function bound of one Gaussian step,
/// `tau (tau + 1) eps^2 / (4 ln(1.25/delta))`.
pub fn moment_alpha(tau: u32, epsilon: f64, delta: f64) -> Result<f64> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Parameter(format!(
            "moment bound needs delta in (0, 1), got {delta}"
        )));
    }
    let tau = f64::from(tau);
    Ok(tau * (tau + 1.0) * epsilon * epsilon / (4.0 * (1.25 / delta).ln()))
}

/// Componentwise `compose(ledger) <= target`, inclusive up to rounding of
/// the summation.
pub fn verify_budget(ledger: &PrivacyLedger, target: PrivacyTotal, method: Composition) -> bool {
    let Ok(total) = compose(ledger, method) else {
        return false;
    };
    let within = |spent: f64, budget: f64| spent <= budget + 1e-12 * budget.abs();
    within(total.epsilon, target.epsilon) && within(total.delta, target.delta)
}
