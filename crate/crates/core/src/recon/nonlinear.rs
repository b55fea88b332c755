//! Joint nonlinear estimation of the baseline and the change of conductivity.
//!
//! Minimizes
//! `|V1 - U(s1)|^2/s^2 + |V2 - U(s1 + K ds)|^2/s^2 + WTV(s1) + TV(K ds)`
//! with a lagged-diffusivity Gauss-Newton iteration, a projected Armijo line
//! search and dense direct solves of the normal equations.

use std::path::Path;
use std::time::Instant;

use faer::prelude::*;
use faer::{Accum, Mat, Par, Side};
use serde::{Deserialize, Serialize};

use super::tv::TvTerm;
use crate::artifact::{self, FORMAT_VERSION};
use crate::datagen::MonitoringPair;
use crate::error::{Error, Result};
use crate::fem::{fit_homogeneous_sigma, CemSystem, ContactImpedances, CurrentPatternSet};
use crate::field::ConductivityField;
use crate::mesh::{LayerTag, Mesh};

const ARMIJO_C: f64 = 1e-4;
const MAX_HALVINGS: usize = 20;

/// Support of the conductivity change.
#[derive(Debug, Clone, PartialEq)]
pub enum RoiMap {
    /// The whole domain; `K` is the identity.
    Identity(usize),
    /// Sorted node subset; `K` zero-extends.
    Subset { node_count: usize, nodes: Vec<usize> },
}

impl RoiMap {
    /// Nodes of all brain elements.
    pub fn brain(mesh: &Mesh) -> Result<Self> {
        let mut nodes: Vec<usize> = (0..mesh.element_count())
            .filter(|&e| mesh.layer_tags()[e] == LayerTag::Brain)
            .flat_map(|e| mesh.element(e).iter().copied())
            .collect();
        nodes.sort_unstable();
        nodes.dedup();
        Self::subset(mesh.node_count(), nodes)
    }

    pub fn subset(node_count: usize, nodes: Vec<usize>) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::Contract("region of interest is empty".into()));
        }
        if nodes.windows(2).any(|w| w[0] >= w[1]) || nodes.last().is_some_and(|&n| n >= node_count) {
            return Err(Error::Contract("region of interest must be sorted, unique and in range".into()));
        }
        Ok(Self::Subset { node_count, nodes })
    }

    pub fn node_count(&self) -> usize {
        match self {
            RoiMap::Identity(n) => *n,
            RoiMap::Subset { node_count, .. } => *node_count,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            RoiMap::Identity(n) => *n,
            RoiMap::Subset { nodes, .. } => nodes.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Node index of ROI entry `k`.
    pub fn node(&self, k: usize) -> usize {
        match self {
            RoiMap::Identity(_) => k,
            RoiMap::Subset { nodes, .. } => nodes[k],
        }
    }

    /// `K x`.
    pub fn extend(&self, x: &[f64]) -> Vec<f64> {
        match self {
            RoiMap::Identity(_) => x.to_vec(),
            RoiMap::Subset { node_count, nodes } => {
                let mut out = vec![0.0; *node_count];
                for (&n, &v) in nodes.iter().zip(x) {
                    out[n] = v;
                }
                out
            }
        }
    }

    /// `K^T y`.
    pub fn restrict(&self, y: &[f64]) -> Vec<f64> {
        (0..self.len()).map(|k| y[self.node(k)]).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct MoParams {
    pub alpha_delta: f64,
    pub alpha_sigma1: f64,
    pub beta: f64,
    pub gamma: f64,
    pub max_iterations: usize,
    pub objective_tolerance: f64,
    pub positivity_floor: f64,
}

impl Default for MoParams {
    fn default() -> Self {
        Self {
            alpha_delta: 1e4,
            alpha_sigma1: 1e3,
            beta: 1e-4,
            gamma: 0.9,
            max_iterations: 50,
            objective_tolerance: 1e-6,
            positivity_floor: 1e-4,
        }
    }
}

impl MoParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.alpha_delta > 0.0
            && self.alpha_sigma1 > 0.0
            && self.beta > 0.0
            && (0.0..1.0).contains(&self.gamma)
            && self.positivity_floor > 0.0
            && self.objective_tolerance >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Contract(
                "MO parameters need alpha > 0, beta > 0, 0 <= gamma < 1 and a positive floor".into(),
            ))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct MoResult {
    pub mesh_id: String,
    pub sigma1: ConductivityField,
    /// Change zero-extended to the whole mesh.
    pub delta: ConductivityField,
    pub objective_trace: Vec<f64>,
    pub iteration_count: usize,
    /// Set when the line search found no decrease and the iteration stopped early.
    pub line_search_failed: bool,
    pub solve_time_seconds: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct MoFile {
    version: u32,
    #[serde(flatten)]
    result: MoResult,
}

impl MoResult {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        artifact::write_json(
            path,
            &MoFile {
                version: FORMAT_VERSION,
                result: self.clone(),
            },
        )
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f: MoFile = artifact::read_json(path)?;
        artifact::check_version("MO reconstruction", f.version)?;
        Ok(f.result)
    }
}

struct Problem<'a> {
    mesh: &'a Mesh,
    z: &'a ContactImpedances,
    patterns: &'a CurrentPatternSet,
    roi: &'a RoiMap,
    v1: &'a [f64],
    v2: &'a [f64],
    weight: f64,
    tv_sigma1: TvTerm,
    tv_delta: TvTerm,
    floor: f64,
}

struct State {
    sigma1: Vec<f64>,
    delta: Vec<f64>,
    objective: f64,
}

impl Problem<'_> {
    fn sigma2(&self, sigma1: &[f64], delta: &[f64]) -> Vec<f64> {
        let k = self.roi.extend(delta);
        sigma1.iter().zip(&k).map(|(a, b)| a + b).collect()
    }

    fn misfit(&self, u: &[f64], v: &[f64]) -> f64 {
        self.weight * u.iter().zip(v).map(|(a, b)| (b - a).powi(2)).sum::<f64>()
    }

    fn objective(&self, sigma1: &[f64], delta: &[f64]) -> Result<f64> {
        let s2 = self.sigma2(sigma1, delta);
        let u1 = CemSystem::assemble(self.mesh, &ConductivityField(sigma1.to_vec()), self.z)?.voltages(self.patterns);
        let u2 = CemSystem::assemble(self.mesh, &ConductivityField(s2), self.z)?.voltages(self.patterns);
        Ok(self.misfit(&u1, self.v1)
            + self.misfit(&u2, self.v2)
            + self.tv_sigma1.value(self.mesh, sigma1)
            + self.tv_delta.value(self.mesh, &self.roi.extend(delta)))
    }

    /// Projects onto `sigma1 >= floor` and `sigma1 + K delta >= floor`.
    fn project(&self, sigma1: &mut [f64], delta: &mut [f64]) {
        for s in sigma1.iter_mut() {
            *s = s.max(self.floor);
        }
        for (k, d) in delta.iter_mut().enumerate() {
            *d = d.max(self.floor - sigma1[self.roi.node(k)]);
        }
    }

    /// Gradient and Gauss-Newton step at `state`.
    fn step(&self, state: &State) -> Result<(Vec<f64>, Vec<f64>)> {
        let n = self.mesh.node_count();
        let m = self.roi.len();
        let s2 = self.sigma2(&state.sigma1, &state.delta);
        let sys1 = CemSystem::assemble(self.mesh, &ConductivityField(state.sigma1.clone()), self.z)?;
        let sys2 = CemSystem::assemble(self.mesh, &ConductivityField(s2.clone()), self.z)?;
        let r1: Vec<f64> = sys1.voltages(self.patterns).iter().zip(self.v1).map(|(u, v)| v - u).collect();
        let r2: Vec<f64> = sys2.voltages(self.patterns).iter().zip(self.v2).map(|(u, v)| v - u).collect();
        let j1 = sys1.jacobian(self.mesh, self.patterns).matrix;
        let j2 = sys2.jacobian(self.mesh, self.patterns).matrix;
        let rows = j1.nrows();

        // Stacked Jacobian [[J1, 0], [J2, J2 K]] over unknowns [sigma1; delta].
        let mut jt = Mat::<f64>::zeros(2 * rows, n + m);
        for h in 0..n {
            jt.col_as_slice_mut(h)[..rows].copy_from_slice(j1.col_as_slice(h));
            jt.col_as_slice_mut(h)[rows..].copy_from_slice(j2.col_as_slice(h));
        }
        for k in 0..m {
            jt.col_as_slice_mut(n + k)[rows..].copy_from_slice(j2.col_as_slice(self.roi.node(k)));
        }
        let r: Vec<f64> = r1.iter().chain(&r2).copied().collect();

        let mut grad = vec![0.0; n + m];
        for (c, g) in grad.iter_mut().enumerate() {
            let col = jt.col_as_slice(c);
            *g = -2.0 * self.weight * col.iter().zip(&r).map(|(a, b)| a * b).sum::<f64>();
        }
        let (_, g1) = self.tv_sigma1.value_and_gradient(self.mesh, &state.sigma1);
        let kd = self.roi.extend(&state.delta);
        let (_, gd) = self.tv_delta.value_and_gradient(self.mesh, &kd);
        for h in 0..n {
            grad[h] += g1[h];
        }
        for (k, g) in self.roi.restrict(&gd).into_iter().enumerate() {
            grad[n + k] += g;
        }

        let mut hess = Mat::<f64>::zeros(n + m, n + m);
        faer::linalg::matmul::matmul(
            hess.as_mut(),
            Accum::Replace,
            jt.transpose(),
            jt.as_ref(),
            2.0 * self.weight,
            Par::Seq,
        );
        let index1: Vec<Option<usize>> = (0..n).map(Some).collect();
        self.tv_sigma1.add_lagged_hessian(self.mesh, &state.sigma1, &index1, hess.as_mut());
        let mut index_d = vec![None; n];
        for k in 0..m {
            index_d[self.roi.node(k)] = Some(n + k);
        }
        self.tv_delta.add_lagged_hessian(self.mesh, &kd, &index_d, hess.as_mut());

        // Variables on their bound whose gradient points further out are held
        // fixed; projecting a Newton step through them need not descend.
        let tol = 1e-12 * self.floor;
        let mut active = vec![false; n + m];
        for h in 0..n {
            active[h] = state.sigma1[h] <= self.floor + tol && grad[h] > 0.0;
        }
        for k in 0..m {
            let bound = self.floor - state.sigma1[self.roi.node(k)];
            active[n + k] = state.delta[k] <= bound + tol && grad[n + k] > 0.0;
        }
        for i in (0..n + m).filter(|&i| active[i]) {
            for j in 0..n + m {
                hess[(i, j)] = 0.0;
                hess[(j, i)] = 0.0;
            }
            hess[(i, i)] = 1.0;
        }

        let llt = hess
            .llt(Side::Lower)
            .map_err(|_| Error::Conditioning("Gauss-Newton normal matrix is not positive definite".into()))?;
        let rhs = Mat::<f64>::from_fn(n + m, 1, |i, _| if active[i] { 0.0 } else { -grad[i] });
        let dir = llt.solve(&rhs);
        Ok((grad, dir.col_as_slice(0).to_vec()))
    }
}

pub fn reconstruct_mo(
    pair: &MonitoringPair,
    inv_mesh: &Mesh,
    z: &ContactImpedances,
    patterns: &CurrentPatternSet,
    roi: &RoiMap,
    kappa: &ConductivityField,
    params: &MoParams,
) -> Result<MoResult> {
    let start = Instant::now();
    params.validate()?;
    crate::fem::check_patterns(inv_mesh, patterns)?;
    if roi.node_count() != inv_mesh.node_count() || kappa.len() != inv_mesh.node_count() {
        return Err(Error::Contract("ROI and reference image must live on the inversion mesh".into()));
    }
    if !(pair.noise_std > 0.0) {
        return Err(Error::Contract("noise std must be positive for the data weighting".into()));
    }
    let sigma0 = fit_homogeneous_sigma(&pair.v1, inv_mesh, z, patterns)?;
    let problem = Problem {
        mesh: inv_mesh,
        z,
        patterns,
        roi,
        v1: &pair.v1.voltages,
        v2: &pair.v2.voltages,
        weight: 1.0 / (pair.noise_std * pair.noise_std),
        tv_sigma1: TvTerm::weighted(inv_mesh, kappa, params.alpha_sigma1, params.beta, params.gamma),
        tv_delta: TvTerm::smoothed(params.alpha_delta, params.beta),
        floor: params.positivity_floor,
    };
    let n = inv_mesh.node_count();
    let mut sigma1 = vec![sigma0; n];
    let mut delta = vec![0.0; roi.len()];
    problem.project(&mut sigma1, &mut delta);
    let objective = problem.objective(&sigma1, &delta)?;
    let mut state = State {
        sigma1,
        delta,
        objective,
    };
    let mut trace = vec![state.objective];
    let mut failed = false;
    let mut iterations = 0;

    while iterations < params.max_iterations {
        let (grad, dir) = problem.step(&state)?;
        let slope: f64 = grad.iter().zip(&dir).map(|(g, d)| g * d).sum();
        if !(slope < 0.0) {
            // zero or ascent direction: the current point is stationary
            break;
        }
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let mut s1: Vec<f64> = state.sigma1.iter().zip(&dir).map(|(s, d)| s + t * d).collect();
            let mut dl: Vec<f64> = state.delta.iter().zip(&dir[n..]).map(|(s, d)| s + t * d).collect();
            problem.project(&mut s1, &mut dl);
            // sufficient decrease along the projected step actually taken
            let taken: f64 = s1
                .iter()
                .zip(&state.sigma1)
                .chain(dl.iter().zip(&state.delta))
                .zip(&grad)
                .map(|((a, b), g)| g * (a - b))
                .sum();
            if !(taken < 0.0) {
                t *= 0.5;
                continue;
            }
            let f = problem.objective(&s1, &dl)?;
            if f <= state.objective + ARMIJO_C * taken {
                accepted = Some(State {
                    sigma1: s1,
                    delta: dl,
                    objective: f,
                });
                break;
            }
            t *= 0.5;
        }
        let Some(next) = accepted else {
            failed = true;
            break;
        };
        iterations += 1;
        let decrease = (state.objective - next.objective) / state.objective.abs().max(f64::MIN_POSITIVE);
        state = next;
        trace.push(state.objective);
        if decrease < params.objective_tolerance {
            break;
        }
    }

    Ok(MoResult {
        mesh_id: inv_mesh.id().to_string(),
        sigma1: ConductivityField(state.sigma1),
        delta: ConductivityField(roi.extend(&state.delta)),
        objective_trace: trace,
        iteration_count: iterations,
        line_search_failed: failed,
        solve_time_seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{generate_head_mesh, HeadGeometrySpec, MeshDensity};

    #[test]
    fn roi_extension_and_restriction() {
        let roi = RoiMap::subset(5, vec![1, 3]).unwrap();
        assert_eq!(roi.extend(&[2.0, 4.0]), vec![0.0, 2.0, 0.0, 4.0, 0.0]);
        assert_eq!(roi.restrict(&[9.0, 2.0, 9.0, 4.0, 9.0]), vec![2.0, 4.0]);
        assert!(RoiMap::subset(5, vec![]).is_err());
        assert!(RoiMap::subset(5, vec![3, 1]).is_err());
        assert!(RoiMap::subset(5, vec![5]).is_err());
    }

    #[test]
    fn brain_roi_excludes_scalp_nodes() {
        let m = generate_head_mesh(&HeadGeometrySpec::default_2d(), 2, MeshDensity::Coarse).unwrap();
        let roi = RoiMap::brain(&m).unwrap();
        assert!(roi.len() < m.node_count());
        for k in 0..roi.len() {
            let p = m.node(roi.node(k));
            assert!(p[0].hypot(p[1]) <= 0.080 + 1e-9);
        }
    }

    #[test]
    fn params_are_validated() {
        assert!(MoParams::default().validate().is_ok());
        let bad = MoParams {
            gamma: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
