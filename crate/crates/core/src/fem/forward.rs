//! Assembly and solution of the discrete complete electrode model.
//!
//! The CEM system
//!
//! ```text
//! [ B    -C ] [u]   [0]
//! [ -C^T  D ] [U] = [I]
//! ```
//!
//! is reduced to the electrodes: with `X = B^{-1} C` the electrode voltages
//! solve `(D - C^T X) U = I`. The Schur complement is singular along the
//! constant vector, so its pseudo-inverse `Z` maps any net-zero current vector
//! to the zero-mean (grounded) electrode voltages, and `W = X Z` maps electrode
//! currents to nodal potentials.

use faer::linalg::solvers::DenseSolveCore;
use faer::prelude::*;
use faer::sparse::{SparseColMat, Triplet};
use faer::{Accum, Par, Side};

use super::{ContactImpedances, CurrentPatternSet, VoltageFrame};
use crate::error::{Error, Result};
use crate::field::ConductivityField;
use crate::mesh::Mesh;

/// Largest acceptable relative residual of the interior solve.
const RESIDUAL_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardSolution {
    /// Nodal potentials, one vector per pattern.
    pub potentials: Vec<Vec<f64>>,
    /// Electrode potentials, one vector per pattern.
    pub electrode_potentials: Vec<Vec<f64>>,
}

/// A factored CEM system for one conductivity.
pub struct CemSystem {
    mesh_id: String,
    transfer: Mat<f64>,
    fields: Mat<f64>,
}

fn check_inputs(mesh: &Mesh, sigma: &ConductivityField, z: &ContactImpedances) -> Result<()> {
    if sigma.len() != mesh.node_count() {
        return Err(Error::Assembly(format!(
            "conductivity has {} values for {} nodes",
            sigma.len(),
            mesh.node_count()
        )));
    }
    if let Some((i, s)) = sigma.iter().enumerate().find(|(_, s)| !(**s > 0.0 && s.is_finite())) {
        return Err(Error::Assembly(format!("conductivity {s} at node {i} is not positive")));
    }
    z.validate(mesh.electrode_count())
        .map_err(|e| Error::Assembly(e.to_string()))
}

/// Sums duplicate triplets, ordering entries column-major.
fn merge(mut t: Vec<(usize, usize, f64)>) -> Vec<(usize, usize, f64)> {
    t.sort_unstable_by_key(|&(i, j, _)| (j, i));
    let mut out: Vec<(usize, usize, f64)> = Vec::with_capacity(t.len() / 4);
    for (i, j, v) in t {
        match out.last_mut() {
            Some(last) if last.0 == i && last.1 == j => last.2 += v,
            _ => out.push((i, j, v)),
        }
    }
    out
}

impl CemSystem {
    pub fn assemble(mesh: &Mesh, sigma: &ConductivityField, z: &ContactImpedances) -> Result<Self> {
        check_inputs(mesh, sigma, z)?;
        let n = mesh.node_count();
        let l = mesh.electrode_count();
        let d = mesh.dimension();

        let mut trip = Vec::with_capacity(mesh.element_count() * (d + 1) * (d + 1));
        for e in 0..mesh.element_count() {
            let el = mesh.element(e);
            let g = mesh.basis_gradients(e);
            let s = el.iter().map(|&k| sigma[k]).sum::<f64>() / el.len() as f64 * mesh.measure(e);
            for a in 0..el.len() {
                for b in 0..el.len() {
                    let v = s * (g[a][0] * g[b][0] + g[a][1] * g[b][1] + g[a][2] * g[b][2]);
                    trip.push((el[a], el[b], v));
                }
            }
        }
        let mut c = Mat::<f64>::zeros(n, l);
        let mut dvec = vec![0.0; l];
        let k = d - 1;
        let mass = 1.0 / ((k + 1) * (k + 2)) as f64;
        for (li, facets) in mesh.electrodes().iter().enumerate() {
            let inv_z = 1.0 / z.0[li];
            for &f in facets {
                let nodes = mesh.facet(f);
                let area = mesh.facet_measure(f);
                dvec[li] += area * inv_z;
                for &a in nodes {
                    c[(a, li)] += inv_z * area / d as f64;
                    for &b in nodes {
                        let m = if a == b { 2.0 } else { 1.0 } * mass * area * inv_z;
                        trip.push((a, b, m));
                    }
                }
            }
        }
        let merged = merge(trip);
        let triplets: Vec<Triplet<usize, usize, f64>> =
            merged.iter().map(|&(i, j, v)| Triplet::new(i, j, v)).collect();
        let b = SparseColMat::<usize, f64>::try_new_from_triplets(n, n, &triplets)
            .map_err(|e| Error::Assembly(format!("sparse matrix construction: {e:?}")))?;
        let llt = b
            .sp_cholesky(Side::Lower)
            .map_err(|e| Error::Assembly(format!("stiffness matrix is not positive definite ({e:?})")))?;
        let x = llt.solve(&c);

        let mut r = -c.clone();
        for &(i, j, v) in &merged {
            for col in 0..l {
                r[(i, col)] += v * x[(j, col)];
            }
        }
        let residual = r.norm_l2() / c.norm_l2();
        if !(residual <= RESIDUAL_TOLERANCE) {
            return Err(Error::Numeric {
                context: "interior CEM solve".into(),
                residual,
            });
        }

        let mut s = Mat::<f64>::zeros(l, l);
        faer::linalg::matmul::matmul(s.as_mut(), Accum::Replace, c.transpose(), x.as_ref(), -1.0, Par::Seq);
        for i in 0..l {
            s[(i, i)] += dvec[i];
        }
        let trace: f64 = (0..l).map(|i| s[(i, i)]).sum();
        let shift = trace / (l * l) as f64;
        let mut m = Mat::<f64>::from_fn(l, l, |i, j| 0.5 * (s[(i, j)] + s[(j, i)]) + shift);
        let llt = m
            .llt(Side::Lower)
            .map_err(|_| Error::Assembly("electrode Schur complement is singular".into()))?;
        m = llt.inverse();
        let ground = 1.0 / (shift * (l * l) as f64);
        let transfer = Mat::<f64>::from_fn(l, l, |i, j| 0.5 * (m[(i, j)] + m[(j, i)]) - ground);

        let mut fields = Mat::<f64>::zeros(n, l);
        faer::linalg::matmul::matmul(fields.as_mut(), Accum::Replace, x.as_ref(), transfer.as_ref(), 1.0, Par::Seq);
        Ok(Self {
            mesh_id: mesh.id().to_string(),
            transfer,
            fields,
        })
    }

    pub fn electrode_count(&self) -> usize {
        self.transfer.nrows()
    }

    /// Symmetric map from net-zero electrode currents to grounded electrode voltages.
    pub fn transfer(&self) -> MatRef<'_, f64> {
        self.transfer.as_ref()
    }

    /// Nodal potentials due to unit current at each electrode (`N x L`).
    pub fn electrode_fields(&self) -> MatRef<'_, f64> {
        self.fields.as_ref()
    }

    pub fn electrode_voltages(&self, current: &[f64]) -> Vec<f64> {
        let l = self.electrode_count();
        (0..l)
            .map(|i| (0..l).map(|j| self.transfer[(i, j)] * current[j]).sum())
            .collect()
    }

    pub fn potentials(&self, current: &[f64]) -> Vec<f64> {
        let l = self.electrode_count();
        (0..self.fields.nrows())
            .map(|i| (0..l).map(|j| self.fields[(i, j)] * current[j]).sum())
            .collect()
    }

    /// Stacked electrode voltages for all patterns.
    pub fn voltages(&self, patterns: &CurrentPatternSet) -> Vec<f64> {
        patterns.patterns.iter().flat_map(|p| self.electrode_voltages(p)).collect()
    }

    pub fn frame(&self, patterns: &CurrentPatternSet) -> VoltageFrame {
        VoltageFrame {
            mesh_id: self.mesh_id.clone(),
            pattern_set: patterns.clone(),
            voltages: self.voltages(patterns),
        }
    }
}

pub(crate) fn check_patterns(mesh: &Mesh, patterns: &CurrentPatternSet) -> Result<()> {
    patterns.validate()?;
    if patterns.electrode_count != mesh.electrode_count() {
        return Err(Error::Contract(format!(
            "patterns drive {} electrodes but the mesh has {}",
            patterns.electrode_count,
            mesh.electrode_count()
        )));
    }
    Ok(())
}

pub fn solve_forward(
    mesh: &Mesh,
    sigma: &ConductivityField,
    z: &ContactImpedances,
    patterns: &CurrentPatternSet,
) -> Result<(ForwardSolution, VoltageFrame)> {
    check_patterns(mesh, patterns)?;
    let sys = CemSystem::assemble(mesh, sigma, z)?;
    let solution = ForwardSolution {
        potentials: patterns.patterns.iter().map(|p| sys.potentials(p)).collect(),
        electrode_potentials: patterns.patterns.iter().map(|p| sys.electrode_voltages(p)).collect(),
    };
    Ok((solution, sys.frame(patterns)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::DEFAULT_CONTACT_IMPEDANCE;
    use crate::mesh::{generate_head_mesh, HeadGeometrySpec, MeshDensity};

    fn disk() -> Mesh {
        generate_head_mesh(&HeadGeometrySpec::default_2d(), 2, MeshDensity::Coarse).unwrap()
    }

    #[test]
    fn grounded_and_reciprocal() {
        let m = disk();
        let z = ContactImpedances::uniform(16, DEFAULT_CONTACT_IMPEDANCE);
        let p = CurrentPatternSet::adjacent(16, 1e-3);
        let sigma = ConductivityField::constant(m.node_count(), 0.06948);
        let (sol, frame) = solve_forward(&m, &sigma, &z, &p).unwrap();
        let scale = frame.max_abs();
        for j in 0..16 {
            let s: f64 = frame.pattern(j).iter().sum();
            assert!(s.abs() < 1e-12 * scale);
            assert_eq!(sol.electrode_potentials[j], frame.pattern(j));
        }
        // drive (0->1) measured on (2,3) vs drive (2->3) measured on (0,1)
        let a = frame.pattern(0)[2] - frame.pattern(0)[3];
        let b = frame.pattern(2)[0] - frame.pattern(2)[1];
        assert!((a - b).abs() < 1e-10 * scale);
    }

    #[test]
    fn conductivity_and_impedance_scaling() {
        let m = disk();
        let z = ContactImpedances::uniform(16, DEFAULT_CONTACT_IMPEDANCE);
        let p = CurrentPatternSet::adjacent(16, 1e-3);
        let sigma = ConductivityField((0..m.node_count()).map(|i| 0.05 + 0.01 * ((i % 7) as f64)).collect());
        let (_, f1) = solve_forward(&m, &sigma, &z, &p).unwrap();
        let (_, f2) = solve_forward(&m, &sigma.scaled(2.0), &z.scaled(0.5), &p).unwrap();
        for (a, b) in f1.voltages.iter().zip(&f2.voltages) {
            assert!((0.5 * a - b).abs() < 1e-10 * f1.max_abs());
        }
    }

    #[test]
    fn nonpositive_sigma_is_assembly_error() {
        let m = disk();
        let z = ContactImpedances::uniform(16, DEFAULT_CONTACT_IMPEDANCE);
        let p = CurrentPatternSet::adjacent(16, 1e-3);
        let mut sigma = ConductivityField::constant(m.node_count(), 0.07);
        sigma[5] = 0.0;
        assert!(matches!(solve_forward(&m, &sigma, &z, &p), Err(Error::Assembly(_))));
    }
}
