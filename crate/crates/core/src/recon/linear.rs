//! One-step linearized difference imaging with a smoothness prior.
//!
//! Minimizes `||L_de (J dsigma - dV)||^2 + ||R dsigma||^2` where `R^T R` is the
//! inverse of a squared-exponential prior covariance on the nodes.

use std::path::Path;
use std::sync::OnceLock;
use std::time::Instant;

use faer::linalg::solvers::DenseSolveCore;
use faer::prelude::*;
use faer::{Accum, Mat, Par, Side};
use serde::{Deserialize, Serialize};

use crate::artifact::{self, FORMAT_VERSION};
use crate::datagen::MonitoringPair;
use crate::error::{Error, Result};
use crate::fem::{fit_homogeneous_sigma, CemSystem, ContactImpedances, CurrentPatternSet, Jacobian};
use crate::field::ConductivityField;
use crate::mesh::{norm, Mesh};

/// Prior marginal standard deviation (S/m).
pub const DEFAULT_MARGINAL_STD: f64 = 0.2;
/// Relative diagonal jitter added to the prior covariance.
pub const PRIOR_JITTER: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct LdParams {
    /// Distance (m) at which the prior correlation drops to 0.01.
    /// Defaults to a third of the mesh width.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub correlation_length: Option<f64>,
    pub marginal_std: f64,
}

impl Default for LdParams {
    fn default() -> Self {
        Self {
            correlation_length: None,
            marginal_std: DEFAULT_MARGINAL_STD,
        }
    }
}

impl LdParams {
    pub fn correlation_length_for(&self, mesh: &Mesh) -> f64 {
        self.correlation_length.unwrap_or_else(|| {
            let width = 2.0 * mesh.nodes().iter().map(norm).fold(0.0, f64::max);
            width / 3.0
        })
    }

    pub fn regularizer(&self, mesh: &Mesh) -> Result<CorrelationRegularizer> {
        build_correlation_regularizer(mesh, self.correlation_length_for(mesh), self.marginal_std)
    }
}

pub struct CorrelationRegularizer {
    pub correlation_length: f64,
    pub marginal_std: f64,
    covariance: Mat<f64>,
    precision: Mat<f64>,
    r: OnceLock<Mat<f64>>,
}

impl std::fmt::Debug for CorrelationRegularizer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CorrelationRegularizer")
            .field("correlation_length", &self.correlation_length)
            .field("marginal_std", &self.marginal_std)
            .field("nodes", &self.covariance.nrows())
            .finish()
    }
}

pub fn build_correlation_regularizer(
    mesh: &Mesh,
    correlation_length: f64,
    marginal_std: f64,
) -> Result<CorrelationRegularizer> {
    CorrelationRegularizer::from_points(mesh.nodes(), correlation_length, marginal_std)
}

impl CorrelationRegularizer {
    pub fn from_points(points: &[[f64; 3]], correlation_length: f64, marginal_std: f64) -> Result<Self> {
        if !(correlation_length > 0.0 && marginal_std > 0.0) {
            return Err(Error::Contract(
                "correlation length and marginal std must be positive".into(),
            ));
        }
        let n = points.len();
        let var = marginal_std * marginal_std;
        // exp(-c^2 / (2 b^2)) = 0.01 at c = correlation_length
        let b2 = correlation_length.powi(2) / (2.0 * 100f64.ln());
        let covariance = Mat::<f64>::from_fn(n, n, |i, j| {
            let d2: f64 = (0..3).map(|a| (points[i][a] - points[j][a]).powi(2)).sum();
            let k = var * (-d2 / (2.0 * b2)).exp();
            if i == j {
                k + PRIOR_JITTER * var
            } else {
                k
            }
        });
        let llt = covariance
            .llt(Side::Lower)
            .map_err(|_| Error::Conditioning("prior covariance is not positive definite after jitter".into()))?;
        let inv = llt.inverse();
        let precision = Mat::<f64>::from_fn(n, n, |i, j| 0.5 * (inv[(i, j)] + inv[(j, i)]));
        Ok(Self {
            correlation_length,
            marginal_std,
            covariance,
            precision,
            r: OnceLock::new(),
        })
    }

    pub fn node_count(&self) -> usize {
        self.covariance.nrows()
    }

    pub fn covariance(&self) -> MatRef<'_, f64> {
        self.covariance.as_ref()
    }

    /// `R^T R`.
    pub fn precision(&self) -> MatRef<'_, f64> {
        self.precision.as_ref()
    }

    /// Upper triangular `R` with `R^T R = Gamma^{-1}`, computed on first use.
    pub fn r_factor(&self) -> Result<MatRef<'_, f64>> {
        if self.r.get().is_none() {
            let llt = self
                .precision
                .llt(Side::Lower)
                .map_err(|_| Error::Conditioning("prior precision is not positive definite".into()))?;
            let r = llt.L().transpose().to_owned();
            let _ = self.r.set(r);
        }
        Ok(self.r.get().expect("initialized above").as_ref())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct LdResult {
    pub mesh_id: String,
    pub sigma0: f64,
    pub delta: ConductivityField,
    pub solve_time_seconds: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct LdFile {
    version: u32,
    #[serde(flatten)]
    result: LdResult,
}

impl LdResult {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        artifact::write_json(
            path,
            &LdFile {
                version: FORMAT_VERSION,
                result: self.clone(),
            },
        )
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f: LdFile = artifact::read_json(path)?;
        artifact::check_version("LD reconstruction", f.version)?;
        Ok(f.result)
    }
}

/// The linear map `dV -> dsigma` at a fixed linearization point.
pub struct LdSolver {
    mesh_id: String,
    sigma0: f64,
    jacobian: Jacobian,
    gain: Mat<f64>,
    setup_seconds: f64,
}

impl LdSolver {
    /// Linearizes at `sigma0 * 1` with channel noise std `noise_std` in each frame.
    pub fn prepare(
        mesh: &Mesh,
        z: &ContactImpedances,
        patterns: &CurrentPatternSet,
        reg: &CorrelationRegularizer,
        sigma0: f64,
        noise_std: f64,
    ) -> Result<Self> {
        let start = Instant::now();
        crate::fem::check_patterns(mesh, patterns)?;
        if reg.node_count() != mesh.node_count() {
            return Err(Error::Contract("regularizer was built for another mesh".into()));
        }
        if !(noise_std > 0.0) {
            return Err(Error::Contract("noise std must be positive for the data weighting".into()));
        }
        let sys = CemSystem::assemble(mesh, &ConductivityField::constant(mesh.node_count(), sigma0), z)?;
        let jacobian = sys.jacobian(mesh, patterns);
        let j = jacobian.matrix.as_ref();
        let n = mesh.node_count();
        // Gamma_de = Gamma_e1 + Gamma_e2 = 2 s^2 I
        let w = 1.0 / (2.0 * noise_std * noise_std);

        let mut h = reg.precision().to_owned();
        faer::linalg::matmul::matmul(h.as_mut(), Accum::Add, j.transpose(), j, w, Par::Seq);
        let llt = h.llt(Side::Lower).map_err(|_| {
            Error::Conditioning("LD normal matrix is singular; the regularization is too weak".into())
        })?;
        let mut gain = Mat::<f64>::zeros(n, j.nrows());
        gain.copy_from(j.transpose());
        llt.solve_in_place(gain.as_mut());
        gain *= Scale(w);
        Ok(Self {
            mesh_id: mesh.id().to_string(),
            sigma0,
            jacobian,
            gain,
            setup_seconds: start.elapsed().as_secs_f64(),
        })
    }

    /// Fits the background to `pair.v1` and prepares the linearization there.
    pub fn for_pair(
        pair: &MonitoringPair,
        mesh: &Mesh,
        z: &ContactImpedances,
        patterns: &CurrentPatternSet,
        reg: &CorrelationRegularizer,
    ) -> Result<Self> {
        let start = Instant::now();
        let sigma0 = fit_homogeneous_sigma(&pair.v1, mesh, z, patterns)?;
        let mut s = Self::prepare(mesh, z, patterns, reg, sigma0, pair.noise_std)?;
        s.setup_seconds = start.elapsed().as_secs_f64();
        Ok(s)
    }

    pub fn sigma0(&self) -> f64 {
        self.sigma0
    }

    pub fn jacobian(&self) -> &Jacobian {
        &self.jacobian
    }

    pub fn solve(&self, dv: &[f64]) -> Result<ConductivityField> {
        if dv.len() != self.gain.ncols() {
            return Err(Error::Contract(format!(
                "{} voltage differences for {} measurements",
                dv.len(),
                self.gain.ncols()
            )));
        }
        let g = &self.gain;
        let mut out = vec![0.0; g.nrows()];
        for (k, &d) in dv.iter().enumerate() {
            for (o, gk) in out.iter_mut().zip(g.col_as_slice(k)) {
                *o += gk * d;
            }
        }
        Ok(ConductivityField(out))
    }

    pub fn reconstruct(&self, pair: &MonitoringPair) -> Result<LdResult> {
        let start = Instant::now();
        let delta = self.solve(&pair.difference())?;
        if !delta.is_finite() {
            return Err(Error::Conditioning("LD reconstruction is not finite".into()));
        }
        Ok(LdResult {
            mesh_id: self.mesh_id.clone(),
            sigma0: self.sigma0,
            delta,
            solve_time_seconds: self.setup_seconds + start.elapsed().as_secs_f64(),
        })
    }
}

pub fn reconstruct_ld(
    pair: &MonitoringPair,
    inv_mesh: &Mesh,
    z: &ContactImpedances,
    patterns: &CurrentPatternSet,
    reg: &CorrelationRegularizer,
) -> Result<LdResult> {
    LdSolver::for_pair(pair, inv_mesh, z, patterns, reg)?.reconstruct(pair)
}
