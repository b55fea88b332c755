//! Image quality figures: nodal MSE, PSNR, centre-of-mass distance and the
//! signed volume error of half-maximum masks.
//!
//! Masks are the exact superlevel sets `{f >= t}` of the P1 interpolant, so
//! their measure and centroid come from clipping every simplex at the level
//! `t` rather than from counting nodes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::ConductivityField;
use crate::mesh::{distance, signed_measure, Mesh};

/// Fraction of the maximum used as the mask threshold.
pub const HALF_MAX: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct MetricsRecord {
    pub mse: f64,
    pub psnr: Option<f64>,
    pub com_error: Option<f64>,
    /// Mask measure of the reconstruction minus that of the truth (m^2 or m^3).
    pub volume_error: f64,
    /// Fraction of each field's own maximum used for its mask.
    pub threshold_used: f64,
}

/// Measure and centroid of a thresholded region.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskStats {
    pub measure: f64,
    pub centroid: Option<[f64; 3]>,
}

pub fn evaluate(recon: &ConductivityField, truth: &ConductivityField, mesh: &Mesh) -> Result<MetricsRecord> {
    let n = mesh.node_count();
    if recon.len() != n || truth.len() != n {
        return Err(Error::Contract(format!(
            "fields of length {} and {} on a mesh with {n} nodes",
            recon.len(),
            truth.len()
        )));
    }
    let mse = recon.iter().zip(truth.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n as f64;
    let tmax = truth.max();
    let psnr = (tmax > 0.0).then(|| 10.0 * (tmax * tmax / mse).log10());
    let mr = half_max_mask(recon, mesh);
    let mt = half_max_mask(truth, mesh);
    let com_error = match (mr.centroid, mt.centroid) {
        (Some(a), Some(b)) => Some(distance(&a, &b)),
        _ => None,
    };
    Ok(MetricsRecord {
        mse,
        psnr,
        com_error,
        volume_error: mr.measure - mt.measure,
        threshold_used: HALF_MAX,
    })
}

/// Mask `{f >= 0.5 max f}`; empty when `max f <= 0`.
pub fn half_max_mask(f: &[f64], mesh: &Mesh) -> MaskStats {
    let max = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(max > 0.0) {
        return MaskStats {
            measure: 0.0,
            centroid: None,
        };
    }
    superlevel_set(f, mesh, HALF_MAX * max)
}

pub fn superlevel_set(f: &[f64], mesh: &Mesh, t: f64) -> MaskStats {
    let mut measure = 0.0;
    let mut moment = [0.0; 3];
    let d = mesh.dimension();
    for e in 0..mesh.element_count() {
        let el = mesh.element(e);
        let pts: Vec<[f64; 3]> = el.iter().map(|&k| mesh.node(k)).collect();
        let vals: Vec<f64> = el.iter().map(|&k| f[k]).collect();
        for (m, c) in clip_simplex(d, &pts, &vals, t) {
            measure += m;
            for a in 0..3 {
                moment[a] += m * c[a];
            }
        }
    }
    MaskStats {
        measure,
        centroid: (measure > 0.0).then(|| moment.map(|x| x / measure)),
    }
}

fn lerp(a: &[f64; 3], b: &[f64; 3], fa: f64, fb: f64, t: f64) -> [f64; 3] {
    let s = (fa - t) / (fa - fb);
    [0, 1, 2].map(|i| a[i] + s * (b[i] - a[i]))
}

fn piece(d: usize, p: &[[f64; 3]]) -> (f64, [f64; 3]) {
    let m = signed_measure(d, p).abs();
    let mut c = [0.0; 3];
    for q in p {
        for a in 0..3 {
            c[a] += q[a] / p.len() as f64;
        }
    }
    (m, c)
}

/// Complement of a small corner simplex within the full simplex.
fn complement(full: (f64, [f64; 3]), corner: (f64, [f64; 3])) -> (f64, [f64; 3]) {
    let m = (full.0 - corner.0).max(0.0);
    if m == 0.0 {
        return (0.0, full.1);
    }
    (m, [0, 1, 2].map(|a| (full.0 * full.1[a] - corner.0 * corner.1[a]) / m))
}

/// Measure-weighted pieces of `{f >= t}` inside one simplex.
fn clip_simplex(d: usize, p: &[[f64; 3]], f: &[f64], t: f64) -> Vec<(f64, [f64; 3])> {
    let above: Vec<usize> = (0..=d).filter(|&i| f[i] >= t).collect();
    let below: Vec<usize> = (0..=d).filter(|&i| f[i] < t).collect();
    if above.is_empty() {
        return Vec::new();
    }
    if below.is_empty() {
        return vec![piece(d, p)];
    }
    let cut = |a: usize, b: usize| lerp(&p[a], &p[b], f[a], f[b], t);
    match (d, above.len()) {
        (2, 1) | (3, 1) => {
            let a = above[0];
            let mut q = vec![p[a]];
            q.extend(below.iter().map(|&b| cut(a, b)));
            vec![piece(d, &q)]
        }
        (2, 2) | (3, 3) => {
            let b = below[0];
            let mut q = vec![p[b]];
            q.extend(above.iter().map(|&a| cut(a, b)));
            vec![complement(piece(d, p), piece(d, &q))]
        }
        (3, 2) => {
            let (a1, a2) = (above[0], above[1]);
            let (b1, b2) = (below[0], below[1]);
            let ta = [p[a1], cut(a1, b1), cut(a1, b2)];
            let tb = [p[a2], cut(a2, b1), cut(a2, b2)];
            vec![
                piece(3, &[ta[0], ta[1], ta[2], tb[2]]),
                piece(3, &[ta[0], ta[1], tb[1], tb[2]]),
                piece(3, &[ta[0], tb[0], tb[1], tb[2]]),
            ]
        }
        _ => unreachable!("simplex of dimension {d}"),
    }
}

/// CSV row; absent values are written as `n/a`.
pub fn csv_row(case_id: &str, method: &str, m: &MetricsRecord) -> String {
    let opt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:e}"));
    format!(
        "{case_id},{method},{:e},{},{},{:e}",
        m.mse,
        opt(m.psnr),
        opt(m.com_error),
        m.volume_error
    )
}

pub const CSV_HEADER: &str = "caseId,method,mse,psnr,comError,volumeError";

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::tests::unit_triangle;
    use crate::mesh::{generate_head_mesh, HeadGeometrySpec, MeshDensity};

    #[test]
    fn identical_fields() {
        let m = generate_head_mesh(&HeadGeometrySpec::default_2d(), 2, MeshDensity::Coarse).unwrap();
        let f = ConductivityField(m.nodes().iter().map(|p| (-(p[0] * p[0] + p[1] * p[1]) / 1e-3).exp()).collect());
        let r = evaluate(&f, &f, &m).unwrap();
        assert_eq!(r.mse, 0.0);
        assert_eq!(r.com_error, Some(0.0));
        assert_eq!(r.volume_error, 0.0);
    }

    #[test]
    fn zero_change_has_no_psnr_or_com() {
        let m = generate_head_mesh(&HeadGeometrySpec::default_2d(), 2, MeshDensity::Coarse).unwrap();
        let truth = ConductivityField::zeros(m.node_count());
        let recon = ConductivityField::zeros(m.node_count());
        let r = evaluate(&recon, &truth, &m).unwrap();
        assert_eq!(r.psnr, None);
        assert_eq!(r.com_error, None);
        assert_eq!(r.volume_error, 0.0);
        let line = csv_row("20-20", "ld", &r);
        assert!(line.contains(",n/a,n/a,"));
    }

    #[test]
    fn triangle_clipping_is_exact() {
        let m = unit_triangle();
        // f = x; {x >= 0.5} in the unit right triangle has area 1/8, centroid (2/3, 1/6)
        let s = superlevel_set(&[0.0, 1.0, 0.0], &m, 0.5);
        assert!((s.measure - 0.125).abs() < 1e-15);
        let c = s.centroid.unwrap();
        assert!((c[0] - 2.0 / 3.0).abs() < 1e-12 && (c[1] - 1.0 / 6.0).abs() < 1e-12);
        // complement case: {x <= 0.5} has area 3/8
        let s = superlevel_set(&[0.0, -1.0, 0.0], &m, -0.5);
        assert!((s.measure - 0.375).abs() < 1e-15);
    }

    #[test]
    fn tet_clipping_matches_integral() {
        // {x >= t} in the unit tet has volume (1-t)^3/6 for every split pattern
        let p = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        for t in [0.1, 0.5, 0.9] {
            let pieces = clip_simplex(3, &p, &[0.0, 1.0, 0.0, 0.0], t);
            let v: f64 = pieces.iter().map(|x| x.0).sum();
            assert!((v - (1.0 - t).powi(3) / 6.0).abs() < 1e-15);
        }
        // f = x + y gives the 2-2 split: volume of {x + y >= t} is 1/6 - (t^2/2 - t^3/3)
        for t in [0.3, 0.8] {
            let pieces = clip_simplex(3, &p, &[0.0, 1.0, 1.0, 0.0], t);
            let v: f64 = pieces.iter().map(|x| x.0).sum();
            let want = 1.0 / 6.0 - (t * t / 2.0 - t * t * t / 3.0);
            assert!((v - want).abs() < 1e-14, "{v} {want}");
        }
    }

    #[test]
    fn masks_are_scale_invariant() {
        let m = generate_head_mesh(&HeadGeometrySpec::default_2d(), 2, MeshDensity::Coarse).unwrap();
        let truth = ConductivityField(m.nodes().iter().map(|p| (-(p[0] * p[0]) / 2e-4).exp()).collect());
        let recon = ConductivityField(m.nodes().iter().map(|p| (-((p[0] - 0.01).powi(2) + p[1] * p[1]) / 5e-4).exp()).collect());
        let a = evaluate(&recon, &truth, &m).unwrap();
        let b = evaluate(&recon.scaled(3.7), &truth, &m).unwrap();
        assert!((a.com_error.unwrap() - b.com_error.unwrap()).abs() < 1e-12);
        assert!((a.volume_error - b.volume_error).abs() < 1e-12);
        let c = evaluate(&truth, &recon, &m).unwrap();
        assert_eq!(a.mse, c.mse);
    }
}
