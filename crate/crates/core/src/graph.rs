//! The factor graph: variables, factors, and an adjacency index.
//!
//! Factor ids are stable across removals (slots are tombstoned, never
//! reused), which lets long-lived handles such as a landmark's regularizer
//! prior be removed later without disturbing anything else. All iteration
//! orders are deterministic: variables in insertion order, adjacency lists
//! in factor insertion order.
//!
//! The graph itself is single-writer; evaluation methods take `&self` and
//! are safe to call concurrently from multiple readers.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::factor::{EvalError, Factor};
use crate::values::{ValueKind, Values, VarId};

/// Stable handle to a factor in the graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FactorId(pub u32);

impl fmt::Display for FactorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "f{}", self.0)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("variable {0} already declared")]
    DuplicateVariable(VarId),
    #[error("factor references undeclared variable {0}")]
    UnknownVariable(VarId),
    #[error("variable {var} declared as {declared}, factor expects {expected}")]
    KindMismatch { var: VarId, declared: ValueKind, expected: ValueKind },
    #[error("no factor with id {0}")]
    UnknownFactor(FactorId),
    #[error("evaluation failed: {0}")]
    Eval(#[from] EvalError),
}

/// Variables plus factors plus the variable -> factors adjacency index.
#[derive(Clone, Debug, Default)]
pub struct FactorGraph {
    order: Vec<VarId>,
    kinds: BTreeMap<VarId, ValueKind>,
    factors: Vec<Option<Factor>>,
    adjacency: BTreeMap<VarId, Vec<FactorId>>,
    live: usize,
}

impl FactorGraph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Declare a variable and its manifold type.
    pub fn add_variable(&mut self, id: VarId, kind: ValueKind) -> Result<(), GraphError> {
        if self.kinds.contains_key(&id) {
            return Err(GraphError::DuplicateVariable(id));
        }
        self.kinds.insert(id, kind);
        self.order.push(id);
        self.adjacency.insert(id, Vec::new());
        Ok(())
    }

    /// Insert a factor after checking that every referenced variable exists
    /// with a compatible kind.
    pub fn add_factor(&mut self, factor: Factor) -> Result<FactorId, GraphError> {
        let vars = factor.vars();
        for (var, expected) in vars.iter().zip(factor.expected_kinds()) {
            let declared =
                *self.kinds.get(var).ok_or(GraphError::UnknownVariable(*var))?;
            if let Some(expected) = expected {
                if declared != expected {
                    return Err(GraphError::KindMismatch { var: *var, declared, expected });
                }
            }
        }
        let id = FactorId(self.factors.len() as u32);
        self.factors.push(Some(factor));
        for var in vars {
            self.adjacency.get_mut(&var).expect("declared above").push(id);
        }
        self.live += 1;
        Ok(id)
    }

    /// Remove a factor; its id is never reused.
    pub fn remove_factor(&mut self, id: FactorId) -> Result<Factor, GraphError> {
        let slot = self
            .factors
            .get_mut(id.0 as usize)
            .ok_or(GraphError::UnknownFactor(id))?;
        let factor = slot.take().ok_or(GraphError::UnknownFactor(id))?;
        for var in factor.vars() {
            if let Some(adj) = self.adjacency.get_mut(&var) {
                adj.retain(|f| *f != id);
            }
        }
        self.live -= 1;
        Ok(factor)
    }

    pub fn factor(&self, id: FactorId) -> Option<&Factor> {
        self.factors.get(id.0 as usize).and_then(|f| f.as_ref())
    }

    /// Live factors in insertion order.
    pub fn factors(&self) -> impl Iterator<Item = (FactorId, &Factor)> {
        self.factors
            .iter()
            .enumerate()
            .filter_map(|(i, f)| f.as_ref().map(|f| (FactorId(i as u32), f)))
    }

    pub fn num_factors(&self) -> usize {
        self.live
    }

    /// Variables in insertion order.
    pub fn variables(&self) -> &[VarId] {
        &self.order
    }

    pub fn num_variables(&self) -> usize {
        self.order.len()
    }

    pub fn var_kind(&self, id: VarId) -> Option<ValueKind> {
        self.kinds.get(&id).copied()
    }

    pub fn contains_variable(&self, id: VarId) -> bool {
        self.kinds.contains_key(&id)
    }

    /// Factors touching `var`, in insertion order.
    pub fn adjacent_factors(&self, var: VarId) -> &[FactorId] {
        self.adjacency.get(&var).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Total tangent dimension over all variables.
    pub fn tangent_dim(&self) -> usize {
        self.order.iter().map(|v| self.kinds[v].dim()).sum()
    }

    /// Sum of log-likelihoods of the given factors at the assignment.
    /// Negative infinity propagates (a zero-likelihood factor zeroes the
    /// product).
    pub fn log_potential(&self, ids: &[FactorId], values: &Values) -> Result<f64, GraphError> {
        let mut total = 0.0;
        for id in ids {
            let f = self.factor(*id).ok_or(GraphError::UnknownFactor(*id))?;
            total += f.log_likelihood(values)?;
        }
        Ok(total)
    }

    /// Sum of log-likelihoods of all live factors.
    pub fn log_posterior(&self, values: &Values) -> Result<f64, GraphError> {
        let mut total = 0.0;
        for (_, f) in self.factors() {
            total += f.log_likelihood(values)?;
        }
        Ok(total)
    }
}
