//! Name-keyed registry of basis-pursuit strategies. New strategies plug in
//! by implementing [`BpStrategy`] and adding one entry to the table.

use super::operator::MeasurementOperator;
use super::{admm, pdhg, BpOptions, BpReport, CsError};

pub trait BpStrategy: Send + Sync {
    fn name(&self) -> &'static str;
    fn solve(
        &self,
        op: &dyn MeasurementOperator,
        y: &[f64],
        eps: f64,
        opts: &BpOptions,
    ) -> Result<(Vec<f64>, BpReport), CsError>;
}

struct Admm;

impl BpStrategy for Admm {
    fn name(&self) -> &'static str {
        "admm"
    }

    fn solve(
        &self,
        op: &dyn MeasurementOperator,
        y: &[f64],
        eps: f64,
        opts: &BpOptions,
    ) -> Result<(Vec<f64>, BpReport), CsError> {
        admm::solve(op, y, eps, opts)
    }
}

struct Pdhg;

impl BpStrategy for Pdhg {
    fn name(&self) -> &'static str {
        "pdhg"
    }

    fn solve(
        &self,
        op: &dyn MeasurementOperator,
        y: &[f64],
        eps: f64,
        opts: &BpOptions,
    ) -> Result<(Vec<f64>, BpReport), CsError> {
        pdhg::solve(op, y, eps, opts)
    }
}

static STRATEGIES: &[&dyn BpStrategy] = &[&Admm, &Pdhg];

/// Registered strategy names, default first.
pub fn strategy_names() -> Vec<&'static str> {
    STRATEGIES.iter().map(|s| s.name()).collect()
}

pub fn strategy(name: &str) -> Result<&'static dyn BpStrategy, CsError> {
    STRATEGIES
        .iter()
        .find(|s| s.name() == name)
        .copied()
        .ok_or_else(|| CsError::UnknownStrategy(name.into(), strategy_names().join(", ")))
}
