//! Point location in simplicial meshes with a uniform bin grid.

use super::{distance, Mesh};
use crate::error::{Error, Result};

/// Barycentric slack accepted as "inside" an element.
const INSIDE_EPS: f64 = 1e-10;

pub struct PointLocator<'a> {
    mesh: &'a Mesh,
    lo: [f64; 3],
    cell: [f64; 3],
    dims: [usize; 3],
    bins: Vec<Vec<usize>>,
}

impl<'a> PointLocator<'a> {
    pub fn new(mesh: &'a Mesh) -> Self {
        let d = mesh.dimension();
        let mut lo = [0.0; 3];
        let mut hi = [0.0; 3];
        for a in 0..d {
            lo[a] = mesh.nodes().iter().map(|p| p[a]).fold(f64::INFINITY, f64::min);
            hi[a] = mesh.nodes().iter().map(|p| p[a]).fold(f64::NEG_INFINITY, f64::max);
        }
        let per_axis = ((mesh.element_count() as f64).powf(1.0 / d as f64).ceil() as usize).max(1);
        let mut dims = [1; 3];
        let mut cell = [1.0; 3];
        for a in 0..d {
            dims[a] = per_axis;
            cell[a] = ((hi[a] - lo[a]) / per_axis as f64).max(f64::MIN_POSITIVE);
        }
        let mut loc = Self {
            mesh,
            lo,
            cell,
            dims,
            bins: vec![Vec::new(); dims[0] * dims[1] * dims[2]],
        };
        for e in 0..mesh.element_count() {
            let (bl, bh) = loc.element_box(e);
            loc.for_bins(bl, bh, |bins, b| bins[b].push(e));
        }
        loc
    }

    pub fn mesh(&self) -> &Mesh {
        self.mesh
    }

    fn element_box(&self, e: usize) -> ([f64; 3], [f64; 3]) {
        let mut bl = [f64::INFINITY; 3];
        let mut bh = [f64::NEG_INFINITY; 3];
        for &n in self.mesh.element(e) {
            let p = self.mesh.node(n);
            for a in 0..3 {
                bl[a] = bl[a].min(p[a]);
                bh[a] = bh[a].max(p[a]);
            }
        }
        (bl, bh)
    }

    fn bin_range(&self, a: usize, lo: f64, hi: f64) -> (usize, usize) {
        let clamp = |x: f64| {
            let k = ((x - self.lo[a]) / self.cell[a]).floor();
            k.clamp(0.0, (self.dims[a] - 1) as f64) as usize
        };
        (clamp(lo), clamp(hi))
    }

    fn for_bins(&mut self, lo: [f64; 3], hi: [f64; 3], mut f: impl FnMut(&mut Vec<Vec<usize>>, usize)) {
        let d = self.mesh.dimension();
        let mut r = [(0, 0); 3];
        for a in 0..d {
            r[a] = self.bin_range(a, lo[a], hi[a]);
        }
        for i in r[0].0..=r[0].1 {
            for j in r[1].0..=r[1].1 {
                for k in r[2].0..=r[2].1 {
                    let b = (i * self.dims[1] + j) * self.dims[2] + k;
                    f(&mut self.bins, b);
                }
            }
        }
    }

    fn candidates(&self, lo: [f64; 3], hi: [f64; 3]) -> Vec<usize> {
        let d = self.mesh.dimension();
        let mut r = [(0, 0); 3];
        for a in 0..d {
            if hi[a] < self.lo[a] - self.cell[a] || lo[a] > self.lo[a] + self.cell[a] * (self.dims[a] as f64 + 1.0) {
                return Vec::new();
            }
            r[a] = self.bin_range(a, lo[a], hi[a]);
        }
        let mut out = Vec::new();
        for i in r[0].0..=r[0].1 {
            for j in r[1].0..=r[1].1 {
                for k in r[2].0..=r[2].1 {
                    out.extend_from_slice(&self.bins[(i * self.dims[1] + j) * self.dims[2] + k]);
                }
            }
        }
        out.sort_unstable();
        out.dedup();
        out
    }

    /// Barycentric coordinates of `p` with respect to element `e`.
    pub fn barycentric(&self, e: usize, p: &[f64; 3]) -> [f64; 4] {
        let el = self.mesh.element(e);
        let x0 = self.mesh.node(el[0]);
        let g = self.mesh.basis_gradients(e);
        let mut lam = [0.0; 4];
        for i in 0..el.len() {
            lam[i] = if i == 0 { 1.0 } else { 0.0 } + (0..3).map(|a| g[i][a] * (p[a] - x0[a])).sum::<f64>();
        }
        lam
    }

    /// Element containing `p`, with its barycentric coordinates.
    pub fn locate(&self, p: &[f64; 3]) -> Option<(usize, [f64; 4])> {
        let n = self.mesh.dimension() + 1;
        self.candidates(*p, *p).into_iter().find_map(|e| {
            let lam = self.barycentric(e, p);
            lam[..n].iter().all(|&l| l >= -INSIDE_EPS).then_some((e, lam))
        })
    }

    /// Like [`locate`](Self::locate), but falls back to the nearest element
    /// within `tolerance`, returning coordinates of the closest point found by
    /// clamping the barycentric coordinates onto the element.
    pub fn locate_with_tolerance(&self, p: &[f64; 3], tolerance: f64) -> Result<(usize, [f64; 4])> {
        if let Some(hit) = self.locate(p) {
            return Ok(hit);
        }
        let lo = p.map(|v| v - tolerance);
        let hi = p.map(|v| v + tolerance);
        let mut best: Option<(f64, usize, [f64; 4])> = None;
        let mut consider = |e: usize| {
            let (lam, dist) = self.clamped(e, p);
            if best.map_or(true, |(bd, be, _)| dist < bd || (dist == bd && e < be)) {
                best = Some((dist, e, lam));
            }
        };
        for e in self.candidates(lo, hi) {
            consider(e);
        }
        match best {
            Some((dist, e, lam)) if dist <= tolerance => Ok((e, lam)),
            _ => {
                let dist = (0..self.mesh.element_count())
                    .map(|e| self.clamped(e, p).1)
                    .fold(f64::INFINITY, f64::min);
                Err(Error::OutOfDomain {
                    point: *p,
                    distance: dist,
                    tolerance,
                })
            }
        }
    }

    fn clamped(&self, e: usize, p: &[f64; 3]) -> ([f64; 4], f64) {
        let n = self.mesh.dimension() + 1;
        let mut lam = self.barycentric(e, p);
        let mut s = 0.0;
        for l in &mut lam[..n] {
            *l = l.max(0.0);
            s += *l;
        }
        for l in &mut lam[..n] {
            *l /= s;
        }
        let el = self.mesh.element(e);
        let mut q = [0.0; 3];
        for i in 0..n {
            let x = self.mesh.node(el[i]);
            for a in 0..3 {
                q[a] += lam[i] * x[a];
            }
        }
        (lam, distance(&q, p))
    }

    /// P1 evaluation of nodal values at `p`.
    pub fn evaluate(&self, values: &[f64], e: usize, lam: &[f64; 4]) -> f64 {
        self.mesh
            .element(e)
            .iter()
            .zip(lam)
            .map(|(&n, l)| l * values[n])
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{generate_head_mesh, HeadGeometrySpec, MeshDensity};

    #[test]
    fn locates_interior_points_and_rejects_far_ones() {
        let m = generate_head_mesh(&HeadGeometrySpec::default_2d(), 2, MeshDensity::Coarse).unwrap();
        let loc = PointLocator::new(&m);
        for p in [[0.0, 0.0, 0.0], [0.05, -0.03, 0.0], [-0.09, 0.001, 0.0]] {
            let (e, lam) = loc.locate(&p).expect("inside");
            assert!(lam[..3].iter().all(|&l| l >= -1e-10));
            let x: f64 = m.element(e).iter().zip(&lam).map(|(&n, l)| l * m.node(n)[0]).sum();
            assert!((x - p[0]).abs() < 1e-12);
        }
        assert!(loc.locate(&[0.2, 0.0, 0.0]).is_none());
        assert!(matches!(
            loc.locate_with_tolerance(&[0.2, 0.0, 0.0], 1e-3),
            Err(Error::OutOfDomain { .. })
        ));
        assert!(loc.locate_with_tolerance(&[0.0955, 0.0, 0.0], 1e-3).is_ok());
    }
}
