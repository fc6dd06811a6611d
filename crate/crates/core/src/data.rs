//! Unit-level data model and imputation of control potential outcomes.

use alloc::format;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One study unit: covariates, observed outcome and treatment indicator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Unit {
    pub covariates: Vec<f64>,
    pub outcome: f64,
    pub treated: bool,
}

impl Unit {
    pub fn new(covariates: Vec<f64>, outcome: f64, treated: bool) -> Self {
        Self {
            covariates,
            outcome,
            treated,
        }
    }
}

/// The pre-matching pool of units.
///
/// Construction checks that every unit has the same covariate dimension and
/// that all values are finite. Treated/control availability is checked by
/// the matcher, since external samples may legitimately be one-armed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyData {
    units: Vec<Unit>,
    dim: usize,
}

impl StudyData {
    pub fn new(units: Vec<Unit>) -> Result<Self> {
        let first = units
            .first()
            .ok_or_else(|| Error::InvalidInput("study data has no units".into()))?;
        let dim = first.covariates.len();
        for (i, u) in units.iter().enumerate() {
            if u.covariates.len() != dim {
                return Err(Error::DimensionMismatch {
                    unit: i,
                    expected: dim,
                    found: u.covariates.len(),
                });
            }
            if !u.outcome.is_finite() || u.covariates.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "unit {i} has a non-finite value"
                )));
            }
        }
        Ok(Self { units, dim })
    }

    /// Build from parallel columns; `covariates[l]` is the row of unit `l`.
    pub fn from_columns(
        covariates: Vec<Vec<f64>>,
        outcome: &[f64],
        treated: &[bool],
    ) -> Result<Self> {
        if covariates.len() != outcome.len() || outcome.len() != treated.len() {
            return Err(Error::InvalidInput("column lengths differ".into()));
        }
        let units = covariates
            .into_iter()
            .zip(outcome.iter().zip(treated))
            .map(|(x, (&y, &z))| Unit::new(x, y, z))
            .collect();
        Self::new(units)
    }

    pub fn units(&self) -> &[Unit] {
        &self.units
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn unit(&self, index: usize) -> &Unit {
        &self.units[index]
    }

    pub fn covariates(&self, index: usize) -> &[f64] {
        &self.units[index].covariates
    }

    pub fn treated_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.units[i].treated).collect()
    }

    pub fn control_indices(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| !self.units[i].treated)
            .collect()
    }

    pub fn outcomes(&self) -> Vec<f64> {
        self.units.iter().map(|u| u.outcome).collect()
    }

    /// Copy with outcomes replaced; covariates and treatment untouched.
    pub fn with_outcomes(&self, outcomes: &[f64]) -> Result<Self> {
        if outcomes.len() != self.len() {
            return Err(Error::InvalidInput("outcome vector length differs".into()));
        }
        let units = self
            .units
            .iter()
            .zip(outcomes)
            .map(|(u, &y)| Unit::new(u.covariates.clone(), y, u.treated))
            .collect();
        Self::new(units)
    }
}

/// Sharp null `Y(1) - Y(0) = c` for every unit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SharpNull {
    pub effect: f64,
}

impl SharpNull {
    pub fn new(effect: f64) -> Result<Self> {
        if !effect.is_finite() {
            return Err(Error::InvalidInput("null effect must be finite".into()));
        }
        Ok(Self { effect })
    }

    /// Fisher's null of no effect.
    pub const fn no_effect() -> Self {
        Self { effect: 0.0 }
    }
}

/// Control potential outcomes imputed under a sharp null, aligned with the
/// unit order of the originating [`StudyData`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImputedControls {
    pub y0: Vec<f64>,
}

impl ImputedControls {
    pub fn get(&self, index: usize) -> f64 {
        self.y0[index]
    }

    pub fn len(&self) -> usize {
        self.y0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y0.is_empty()
    }
}

/// `y0 = y - c * z` for every unit.
pub fn impute_controls(data: &StudyData, null: SharpNull) -> ImputedControls {
    let y0 = data
        .units()
        .iter()
        .map(|u| {
            if u.treated {
                u.outcome - null.effect
            } else {
                u.outcome
            }
        })
        .collect();
    ImputedControls { y0 }
}
