//! State, trajectory and observation containers.

use alloc::vec::Vec;
use core::ops::{Deref, Index};

use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};

/// A finite point in the system state space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct StateVector(Vec<f64>);

impl StateVector {
    /// Builds a state, rejecting empty or non-finite input.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Empty("state vector"));
        }
        ensure_finite(&values, "state vector")?;
        Ok(Self(values))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(alloc::vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Wraps values produced by internal arithmetic, checking finiteness.
    pub(crate) fn from_computed(values: Vec<f64>, context: &'static str) -> Result<Self> {
        ensure_finite(&values, context)?;
        Ok(Self(values))
    }
}

impl Deref for StateVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl Index<usize> for StateVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl TryFrom<Vec<f64>> for StateVector {
    type Error = Error;
    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<StateVector> for Vec<f64> {
    fn from(s: StateVector) -> Vec<f64> {
        s.0
    }
}

/// Time-indexed sequence of states sharing one dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    states: Vec<StateVector>,
    dt: f64,
}

impl Trajectory {
    /// At least one state is required; a single state is an initial
    /// condition with no transitions yet.
    pub fn new(states: Vec<StateVector>, dt: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidConfig(alloc::format!(
                "trajectory dt must be > 0, got {dt}"
            )));
        }
        let first = states.first().ok_or(Error::Empty("trajectory"))?;
        let dim = first.dim();
        for s in &states {
            crate::error::ensure_len(s.dim(), dim, "trajectory state")?;
        }
        Ok(Self { states, dt })
    }

    pub fn states(&self) -> &[StateVector] {
        &self.states
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn dim(&self) -> usize {
        self.states[0].dim()
    }

    /// Number of states (K + 1).
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Number of transitions K.
    pub fn transitions(&self) -> usize {
        self.states.len() - 1
    }

    pub fn push(&mut self, state: StateVector) -> Result<()> {
        crate::error::ensure_len(state.dim(), self.dim(), "trajectory state")?;
        self.states.push(state);
        Ok(())
    }

    /// States `range` as a new trajectory with the same `dt`.
    pub fn slice(&self, range: core::ops::Range<usize>) -> Result<Self> {
        Self::new(self.states[range].to_vec(), self.dt)
    }
}

/// Observations `y_k` for steps `first_index, first_index + 1, ...`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSeries {
    observations: Vec<Vec<f64>>,
    operator: crate::dynamics::ObservationOperator,
    gamma: f64,
    first_index: usize,
}

impl ObservationSeries {
    pub fn new(
        observations: Vec<Vec<f64>>,
        operator: crate::dynamics::ObservationOperator,
        gamma: f64,
        first_index: usize,
    ) -> Result<Self> {
        if !(gamma > 0.0) {
            return Err(Error::InvalidConfig(alloc::format!("gamma must be > 0, got {gamma}")));
        }
        if first_index < 1 {
            return Err(Error::InvalidConfig("first observed index must be >= 1".into()));
        }
        if let Some(first) = observations.first() {
            let m = first.len();
            for y in &observations {
                crate::error::ensure_len(y.len(), m, "observation")?;
                ensure_finite(y, "observation")?;
            }
        }
        Ok(Self {
            observations,
            operator,
            gamma,
            first_index,
        })
    }

    pub fn observations(&self) -> &[Vec<f64>] {
        &self.observations
    }

    pub fn operator(&self) -> &crate::dynamics::ObservationOperator {
        &self.operator
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn first_index(&self) -> usize {
        self.first_index
    }

    /// Observation at absolute step `k`, if recorded.
    pub fn at(&self, k: usize) -> Option<&[f64]> {
        k.checked_sub(self.first_index)
            .and_then(|i| self.observations.get(i))
            .map(Vec::as_slice)
    }

    /// Last step covered by the series.
    pub fn last_index(&self) -> Option<usize> {
        (!self.observations.is_empty()).then(|| self.first_index + self.observations.len() - 1)
    }
}
