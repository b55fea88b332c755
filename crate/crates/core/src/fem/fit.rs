//! Best-fitting spatially constant conductivity.

use super::forward::check_patterns;
use super::{CemSystem, ContactImpedances, CurrentPatternSet, VoltageFrame};
use crate::error::{Error, Result};
use crate::field::ConductivityField;
use crate::mesh::Mesh;

const RELATIVE_TOLERANCE: f64 = 1e-6;
const MAX_EXPANSIONS: usize = 60;

/// `||V - U(c 1)||^2`.
pub fn misfit(v: &VoltageFrame, mesh: &Mesh, z: &ContactImpedances, patterns: &CurrentPatternSet, c: f64) -> Result<f64> {
    let sys = CemSystem::assemble(mesh, &ConductivityField::constant(mesh.node_count(), c), z)?;
    Ok(sys
        .voltages(patterns)
        .iter()
        .zip(&v.voltages)
        .map(|(u, v)| (u - v).powi(2))
        .sum())
}

/// Minimizes the misfit over `c > 0` by bracketing and golden-section search in `ln c`.
pub fn fit_homogeneous_sigma(
    v1: &VoltageFrame,
    mesh: &Mesh,
    z: &ContactImpedances,
    patterns: &CurrentPatternSet,
) -> Result<f64> {
    check_patterns(mesh, patterns)?;
    if v1.voltages.len() != patterns.measurement_count() {
        return Err(Error::Contract(format!(
            "frame has {} voltages, patterns expect {}",
            v1.voltages.len(),
            patterns.measurement_count()
        )));
    }
    if !v1.voltages.iter().all(|v| v.is_finite()) {
        return Err(Error::Fit("voltage frame contains non-finite values".into()));
    }
    let f = |t: f64| misfit(v1, mesh, z, patterns, t.exp());

    // For z -> 0 voltages scale like 1/c, which gives the starting guess.
    let unit = CemSystem::assemble(mesh, &ConductivityField::constant(mesh.node_count(), 1.0), z)?.voltages(patterns);
    let uu: f64 = unit.iter().map(|u| u * u).sum();
    let uv: f64 = unit.iter().zip(&v1.voltages).map(|(u, v)| u * v).sum();
    if !(uv > 0.0) {
        return Err(Error::Fit("measured voltages are not positively correlated with any homogeneous model".into()));
    }
    let t0 = (uu / uv).ln();

    let step = 0.5f64;
    let (mut a, mut b, mut c) = (t0 - step, t0, t0 + step);
    let (mut fa, mut fb, mut fc) = (f(a)?, f(b)?, f(c)?);
    let mut expansions = 0;
    while !(fb <= fa && fb <= fc) {
        expansions += 1;
        if expansions > MAX_EXPANSIONS {
            return Err(Error::Fit("could not bracket the misfit minimum".into()));
        }
        if fa < fc {
            let na = a - 2.0 * (b - a);
            (c, fc) = (b, fb);
            (b, fb) = (a, fa);
            (a, fa) = (na, f(na)?);
        } else {
            let nc = c + 2.0 * (c - b);
            (a, fa) = (b, fb);
            (b, fb) = (c, fc);
            (c, fc) = (nc, f(nc)?);
        }
    }
    let _ = (fa, fc);

    let ratio = (5.0f64.sqrt() - 1.0) / 2.0;
    let (mut lo, mut hi) = (a, c);
    let mut x1 = hi - ratio * (hi - lo);
    let mut x2 = lo + ratio * (hi - lo);
    let (mut f1, mut f2) = (f(x1)?, f(x2)?);
    // ln-width below the tolerance bounds the relative error of c
    while hi - lo > RELATIVE_TOLERANCE {
        if f1 <= f2 {
            hi = x2;
            (x2, f2) = (x1, f1);
            x1 = hi - ratio * (hi - lo);
            f1 = f(x1)?;
        } else {
            lo = x1;
            (x1, f1) = (x2, f2);
            x2 = lo + ratio * (hi - lo);
            f2 = f(x2)?;
        }
    }
    let best = if f1 <= f2 { x1 } else { x2 };
    let sigma = best.exp();
    if !sigma.is_finite() {
        return Err(Error::Fit(format!("fitted conductivity {sigma} is not finite")));
    }
    Ok(sigma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::{solve_forward, DEFAULT_CONTACT_IMPEDANCE};
    use crate::mesh::{generate_head_mesh, HeadGeometrySpec, MeshDensity};

    #[test]
    fn recovers_constant_conductivity() {
        let m = generate_head_mesh(&HeadGeometrySpec::default_2d(), 2, MeshDensity::Coarse).unwrap();
        let z = ContactImpedances::uniform(16, DEFAULT_CONTACT_IMPEDANCE);
        let p = CurrentPatternSet::adjacent(16, 1e-3);
        let (_, v) = solve_forward(&m, &ConductivityField::constant(m.node_count(), 0.06948), &z, &p).unwrap();
        let s = fit_homogeneous_sigma(&v, &m, &z, &p).unwrap();
        assert!((s - 0.06948).abs() < 1e-4, "{s}");
    }

    #[test]
    fn anticorrelated_data_fails() {
        let m = generate_head_mesh(&HeadGeometrySpec::default_2d(), 2, MeshDensity::Coarse).unwrap();
        let z = ContactImpedances::uniform(16, DEFAULT_CONTACT_IMPEDANCE);
        let p = CurrentPatternSet::adjacent(16, 1e-3);
        let (_, mut v) = solve_forward(&m, &ConductivityField::constant(m.node_count(), 0.07), &z, &p).unwrap();
        v.voltages.iter_mut().for_each(|x| *x = -*x);
        assert!(matches!(fit_homogeneous_sigma(&v, &m, &z, &p), Err(Error::Fit(_))));
    }
}
