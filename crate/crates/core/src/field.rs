use std::ops::{Deref, DerefMut};

use serde::{Deserialize, Serialize};

/// Nodal coefficients of a piecewise linear field on a mesh.
///
/// Used for absolute conductivities (S/m), conductivity changes and network
/// outputs alike.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(transparent)]
pub struct ConductivityField(pub Vec<f64>);

impl ConductivityField {
    pub fn constant(len: usize, value: f64) -> Self {
        Self(vec![value; len])
    }

    pub fn zeros(len: usize) -> Self {
        Self::constant(len, 0.0)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.0.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        Self(self.0.iter().map(|v| alpha * v).collect())
    }

    /// Nodewise `self - other`.
    pub fn difference(&self, other: &Self) -> Self {
        assert_eq!(self.len(), other.len(), "field length mismatch");
        Self(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl From<Vec<f64>> for ConductivityField {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

impl Deref for ConductivityField {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ConductivityField {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}
