//! Sensitivity of the electrode voltages to nodal conductivities.

use faer::Mat;

use super::forward::check_patterns;
use super::{CemSystem, ContactImpedances, CurrentPatternSet};
use crate::error::Result;
use crate::field::ConductivityField;
use crate::mesh::Mesh;

/// `dU / dsigma`, rows ordered pattern-major then electrode, one column per node.
#[derive(Debug, Clone)]
pub struct Jacobian {
    pub matrix: Mat<f64>,
}

impl Jacobian {
    pub fn rows(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn cols(&self) -> usize {
        self.matrix.ncols()
    }

    /// `J d` for a nodal direction `d`.
    pub fn apply(&self, d: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.rows()];
        for (h, &dh) in d.iter().enumerate() {
            if dh != 0.0 {
                for (o, j) in out.iter_mut().zip(self.matrix.col_as_slice(h)) {
                    *o += j * dh;
                }
            }
        }
        out
    }
}

impl CemSystem {
    /// Adjoint Jacobian at the conductivity this system was assembled for.
    ///
    /// The voltage on electrode `l` is read by the measurement field `W e_l`, so
    /// `J_{(j,l),h} = -sum_{T ni h} |T|/(d+1) grad(W I^j) . grad(W e_l)` for
    /// nodal P1 conductivity entering the stiffness through its element mean.
    pub fn jacobian(&self, mesh: &Mesh, patterns: &CurrentPatternSet) -> Jacobian {
        let w = self.electrode_fields();
        let l = self.electrode_count();
        let p = patterns.len();
        let n = mesh.node_count();
        let d = mesh.dimension();
        let fields: Vec<Vec<f64>> = patterns.patterns.iter().map(|c| self.potentials(c)).collect();

        let mut j = Mat::<f64>::zeros(p * l, n);
        let mut gu = vec![[0.0; 3]; p];
        let mut gw = vec![[0.0; 3]; l];
        let mut block = vec![0.0; p * l];
        for e in 0..mesh.element_count() {
            let el = mesh.element(e);
            let g = mesh.basis_gradients(e);
            for (pi, f) in fields.iter().enumerate() {
                gu[pi] = [0.0; 3];
                for (k, &node) in el.iter().enumerate() {
                    for a in 0..d {
                        gu[pi][a] += f[node] * g[k][a];
                    }
                }
            }
            for (li, gl) in gw.iter_mut().enumerate() {
                *gl = [0.0; 3];
                for (k, &node) in el.iter().enumerate() {
                    let v = w[(node, li)];
                    for a in 0..d {
                        gl[a] += v * g[k][a];
                    }
                }
            }
            let scale = -mesh.measure(e) / (d + 1) as f64;
            for pi in 0..p {
                for li in 0..l {
                    block[pi * l + li] = scale * (gu[pi][0] * gw[li][0] + gu[pi][1] * gw[li][1] + gu[pi][2] * gw[li][2]);
                }
            }
            for &node in el {
                for (dst, src) in j.col_as_slice_mut(node).iter_mut().zip(&block) {
                    *dst += src;
                }
            }
        }
        Jacobian { matrix: j }
    }
}

pub fn compute_jacobian(
    mesh: &Mesh,
    sigma0: &ConductivityField,
    z: &ContactImpedances,
    patterns: &CurrentPatternSet,
) -> Result<Jacobian> {
    check_patterns(mesh, patterns)?;
    let sys = CemSystem::assemble(mesh, sigma0, z)?;
    Ok(sys.jacobian(mesh, patterns))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::{solve_forward, DEFAULT_CONTACT_IMPEDANCE};
    use crate::mesh::{generate_head_mesh, HeadGeometrySpec, MeshDensity};

    #[test]
    fn matches_central_differences() {
        let m = generate_head_mesh(&HeadGeometrySpec::default_2d(), 2, MeshDensity::Coarse).unwrap();
        let z = ContactImpedances::uniform(16, DEFAULT_CONTACT_IMPEDANCE);
        let p = CurrentPatternSet::adjacent(16, 1e-3);
        let sigma = ConductivityField((0..m.node_count()).map(|i| 0.06 + 0.02 * ((i * 37 % 11) as f64 / 11.0)).collect());
        let jac = compute_jacobian(&m, &sigma, &z, &p).unwrap();
        assert_eq!((jac.rows(), jac.cols()), (256, m.node_count()));
        let dir: Vec<f64> = (0..m.node_count()).map(|i| (i * 7919 % 101) as f64 / 101.0 - 0.5).collect();
        let t = 1e-6 * 0.06;
        let shifted = |s: f64| {
            let f = ConductivityField(sigma.iter().zip(&dir).map(|(a, b)| a + s * b).collect());
            solve_forward(&m, &f, &z, &p).unwrap().1.voltages
        };
        let (up, dn) = (shifted(t), shifted(-t));
        let fd: Vec<f64> = up.iter().zip(&dn).map(|(a, b)| (a - b) / (2.0 * t)).collect();
        let jd = jac.apply(&dir);
        let err = fd.iter().zip(&jd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let nrm = jd.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(err / nrm < 1e-5, "relative error {}", err / nrm);
    }
}
