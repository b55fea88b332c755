//! Complete electrode model: current patterns, forward solves, the adjoint
//! Jacobian and the homogeneous background fit.

mod fit;
mod forward;
mod jacobian;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::artifact::{self, FORMAT_VERSION};
use crate::error::{Error, Result};

pub use fit::{fit_homogeneous_sigma, misfit};
pub use forward::{solve_forward, CemSystem, ForwardSolution};
pub use jacobian::{compute_jacobian, Jacobian};
pub(crate) use forward::check_patterns;

/// Default contact impedance (Ohm m in 2D, Ohm m^2 in 3D).
pub const DEFAULT_CONTACT_IMPEDANCE: f64 = 1e-3;
/// Default drive amplitude (A).
pub const DEFAULT_CURRENT_AMPLITUDE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CurrentPatternSet {
    pub electrode_count: usize,
    pub amplitude: f64,
    /// Electrode currents (A), one row of length `electrode_count` per pattern.
    pub patterns: Vec<Vec<f64>>,
}

impl CurrentPatternSet {
    /// `L` adjacent pair drives `l -> l+1 (mod L)`.
    pub fn adjacent(electrode_count: usize, amplitude: f64) -> Self {
        let l = electrode_count;
        let patterns = (0..l)
            .map(|j| {
                let mut p = vec![0.0; l];
                p[j] = amplitude;
                p[(j + 1) % l] = -amplitude;
                p
            })
            .collect();
        Self {
            electrode_count,
            amplitude,
            patterns,
        }
    }

    /// `L - 1` drives from every other electrode against `reference`.
    pub fn against_reference(electrode_count: usize, reference: usize, amplitude: f64) -> Self {
        let patterns = (0..electrode_count)
            .filter(|&j| j != reference)
            .map(|j| {
                let mut p = vec![0.0; electrode_count];
                p[j] = amplitude;
                p[reference] = -amplitude;
                p
            })
            .collect();
        Self {
            electrode_count,
            amplitude,
            patterns,
        }
    }

    pub fn len(&self) -> usize {
        self.patterns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patterns.is_empty()
    }

    /// Number of measurements `P * L` in a frame.
    pub fn measurement_count(&self) -> usize {
        self.len() * self.electrode_count
    }

    pub fn validate(&self) -> Result<()> {
        if self.patterns.is_empty() {
            return Err(Error::Contract("current pattern set is empty".into()));
        }
        for (j, p) in self.patterns.iter().enumerate() {
            if p.len() != self.electrode_count {
                return Err(Error::Contract(format!(
                    "pattern {j} has {} entries for {} electrodes",
                    p.len(),
                    self.electrode_count
                )));
            }
            let scale = p.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let sum: f64 = p.iter().sum();
            if scale == 0.0 || !p.iter().all(|v| v.is_finite()) {
                return Err(Error::Contract(format!("pattern {j} is zero or not finite")));
            }
            if sum.abs() > 1e-12 * scale {
                return Err(Error::Contract(format!("pattern {j} injects net current {sum:e} A")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ContactImpedances(pub Vec<f64>);

impl ContactImpedances {
    pub fn uniform(electrode_count: usize, z: f64) -> Self {
        Self(vec![z; electrode_count])
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        Self(self.0.iter().map(|z| z * alpha).collect())
    }

    pub fn validate(&self, electrode_count: usize) -> Result<()> {
        if self.0.len() != electrode_count {
            return Err(Error::Contract(format!(
                "{} contact impedances for {} electrodes",
                self.0.len(),
                electrode_count
            )));
        }
        if let Some(z) = self.0.iter().find(|z| !(**z > 0.0 && z.is_finite())) {
            return Err(Error::Contract(format!("contact impedance {z} is not positive")));
        }
        Ok(())
    }
}

/// Electrode voltages for every pattern, ordered pattern-major then electrode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct VoltageFrame {
    pub mesh_id: String,
    pub pattern_set: CurrentPatternSet,
    pub voltages: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct VoltageFile {
    version: u32,
    #[serde(flatten)]
    frame: VoltageFrame,
}

impl VoltageFrame {
    pub fn pattern(&self, j: usize) -> &[f64] {
        let l = self.pattern_set.electrode_count;
        &self.voltages[j * l..(j + 1) * l]
    }

    pub fn max_abs(&self) -> f64 {
        self.voltages.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        artifact::write_json(
            path,
            &VoltageFile {
                version: FORMAT_VERSION,
                frame: self.clone(),
            },
        )
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f: VoltageFile = artifact::read_json(path)?;
        artifact::check_version("voltage frame", f.version)?;
        if f.frame.voltages.len() != f.frame.pattern_set.measurement_count() {
            return Err(Error::corrupt(path, "voltage count does not match the pattern set"));
        }
        Ok(f.frame)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pattern_sets_sum_to_zero() {
        let a = CurrentPatternSet::adjacent(16, 1e-3);
        assert_eq!(a.len(), 16);
        a.validate().unwrap();
        let r = CurrentPatternSet::against_reference(32, 0, 1e-3);
        assert_eq!(r.len(), 31);
        r.validate().unwrap();
        let mut bad = a.clone();
        bad.patterns[3][0] += 1e-4;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn impedances_must_be_positive() {
        assert!(ContactImpedances::uniform(4, 1e-3).validate(4).is_ok());
        assert!(ContactImpedances::uniform(4, 0.0).validate(4).is_err());
        assert!(ContactImpedances::uniform(3, 1e-3).validate(4).is_err());
    }
}
