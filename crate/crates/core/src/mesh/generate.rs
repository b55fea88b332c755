//! Layered disk (2D) and ball (3D) head phantom meshes.
//!
//! The disk is meshed with concentric rings whose radii include the
//! skin/skull/brain interfaces. Dense disks shrink their elements toward the
//! skin surface: the current density is singular at electrode edges and a
//! uniform mesh converges only at first order there. The ball is a Kuhn-split cube lattice mapped
//! onto the sphere by `x -> R x |x|_inf / |x|_2`, which sends every cube shell
//! to a sphere, so lattice shells at the interface radii land exactly on the
//! layer boundaries.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{extract_boundary_facets, norm, signed_measure, LayerTag, Mesh};
use crate::error::{Error, Result};

/// Boundary fraction covered by electrodes in the default layouts.
const DEFAULT_COVERAGE: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct HeadGeometrySpec {
    pub outer_radius: f64,
    pub skin_thickness: f64,
    pub skull_thickness: f64,
    pub electrode_count: usize,
    /// Arc length of an electrode in 2D, cap diameter (arc length) in 3D.
    pub electrode_width: f64,
    /// Element size of the dense mesh; coarse meshes use twice this size.
    pub target_element_size: f64,
    /// Dense 2D meshes grade down to `target_element_size / boundary_refinement`
    /// at the outer surface. Coarse meshes and balls are uniform.
    #[serde(default = "unit_refinement")]
    pub boundary_refinement: f64,
}

fn unit_refinement() -> f64 {
    1.0
}

/// Growth rate of the element size with depth below the surface.
const GRADING: f64 = 0.3;

/// Element size as a function of depth `d` below the outer surface:
/// `min(h, hb + GRADING d)`.
#[derive(Debug, Clone, Copy)]
struct Sizing {
    h: f64,
    hb: f64,
}

impl Sizing {
    fn uniform(h: f64) -> Self {
        Self { h, hb: h }
    }

    fn graded(&self) -> bool {
        self.hb < self.h
    }

    fn at_depth(&self, d: f64) -> f64 {
        (self.hb + GRADING * d).min(self.h)
    }

    fn knee(&self) -> f64 {
        (self.h - self.hb) / GRADING
    }

    /// Number of elements between the surface and depth `d`, `int_0^d 1/size`.
    fn steps(&self, d: f64) -> f64 {
        let k = self.knee();
        let graded = |x: f64| (1.0 + GRADING * x / self.hb).ln() / GRADING;
        if d <= k {
            graded(d)
        } else {
            graded(k) + (d - k) / self.h
        }
    }

    fn depth_at_steps(&self, t: f64) -> f64 {
        let k = self.knee();
        let tk = self.steps(k);
        if t <= tk {
            self.hb * ((GRADING * t).exp() - 1.0) / GRADING
        } else {
            k + (t - tk) * self.h
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MeshDensity {
    Dense,
    Coarse,
}

impl HeadGeometrySpec {
    /// 16-electrode disk used for training data.
    pub fn default_2d() -> Self {
        let r = 0.095;
        let l = 16;
        Self {
            outer_radius: r,
            skin_thickness: 0.007,
            skull_thickness: 0.008,
            electrode_count: l,
            electrode_width: DEFAULT_COVERAGE * 2.0 * PI * r / l as f64,
            target_element_size: 0.004,
            boundary_refinement: 16.0,
        }
    }

    /// 32-electrode ball used for the cross-dimension test cases.
    pub fn default_3d() -> Self {
        let r = 0.095;
        let l = 32;
        Self {
            outer_radius: r,
            skin_thickness: 0.007,
            skull_thickness: 0.008,
            electrode_count: l,
            electrode_width: cap_width_for_coverage(r, l, DEFAULT_COVERAGE),
            target_element_size: 0.008,
            boundary_refinement: 1.0,
        }
    }

    pub fn brain_radius(&self) -> f64 {
        self.outer_radius - self.skin_thickness - self.skull_thickness
    }

    pub fn skull_outer_radius(&self) -> f64 {
        self.outer_radius - self.skin_thickness
    }

    /// Head width used to derive the prior correlation length.
    pub fn width(&self) -> f64 {
        2.0 * self.outer_radius
    }

    pub fn element_size(&self, density: MeshDensity) -> f64 {
        match density {
            MeshDensity::Dense => self.target_element_size,
            MeshDensity::Coarse => 2.0 * self.target_element_size,
        }
    }

    /// Tissue at radial position `r`.
    pub fn layer_at(&self, r: f64) -> LayerTag {
        if r <= self.brain_radius() {
            LayerTag::Brain
        } else if r <= self.skull_outer_radius() {
            LayerTag::Skull
        } else if r <= self.outer_radius * (1.0 + 1e-9) {
            LayerTag::Skin
        } else {
            LayerTag::None
        }
    }

    pub fn validate(&self, dimension: usize) -> Result<()> {
        let inner = self.skin_thickness + self.skull_thickness;
        if !(self.skin_thickness > 0.0 && self.skull_thickness > 0.0 && self.outer_radius > inner) {
            return Err(Error::InvalidSpec(
                "outer radius must exceed skin + skull thickness, both positive".into(),
            ));
        }
        if self.electrode_count < 2 {
            return Err(Error::InvalidSpec("at least two electrodes are required".into()));
        }
        if !(self.target_element_size > 0.0 && self.electrode_width > 0.0) {
            return Err(Error::InvalidSpec("element size and electrode width must be positive".into()));
        }
        if !(self.boundary_refinement >= 1.0 && self.boundary_refinement.is_finite()) {
            return Err(Error::InvalidSpec("boundary refinement must be at least 1".into()));
        }
        match dimension {
            2 => {
                let pitch = 2.0 * PI * self.outer_radius / self.electrode_count as f64;
                if self.electrode_width >= pitch {
                    return Err(Error::InvalidSpec(format!(
                        "electrodes of width {:.4} m overlap at pitch {:.4} m",
                        self.electrode_width, pitch
                    )));
                }
            }
            3 => {
                let half_angle = self.electrode_width / (2.0 * self.outer_radius);
                let sep = min_separation(&electrode_directions(self.electrode_count));
                if 2.0 * half_angle >= sep {
                    return Err(Error::InvalidSpec(format!(
                        "electrode caps of angular diameter {:.3} rad overlap (closest centres {:.3} rad)",
                        2.0 * half_angle,
                        sep
                    )));
                }
            }
            d => return Err(Error::InvalidSpec(format!("dimension {d} not in {{2, 3}}"))),
        }
        Ok(())
    }
}

fn cap_width_for_coverage(radius: f64, count: usize, coverage: f64) -> f64 {
    // 2 pi R^2 (1 - cos a) = coverage * 4 pi R^2 / count
    let half_angle = (1.0 - 2.0 * coverage / count as f64).acos();
    2.0 * radius * half_angle
}

/// Near-uniform electrode centre directions on the unit sphere (Fibonacci lattice).
fn electrode_directions(count: usize) -> Vec<[f64; 3]> {
    let golden = PI * (3.0 - 5.0f64.sqrt());
    (0..count)
        .map(|i| {
            let z = 1.0 - (2.0 * i as f64 + 1.0) / count as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = golden * i as f64;
            [r * phi.cos(), r * phi.sin(), z]
        })
        .collect()
}

fn min_separation(dirs: &[[f64; 3]]) -> f64 {
    let mut best = PI;
    for i in 0..dirs.len() {
        for j in i + 1..dirs.len() {
            let c: f64 = (0..3).map(|k| dirs[i][k] * dirs[j][k]).sum();
            best = best.min(c.clamp(-1.0, 1.0).acos());
        }
    }
    best
}

/// Radial break points of the layered head, interfaces included.
fn radial_grid(spec: &HeadGeometrySpec, size: Sizing) -> Vec<f64> {
    let r_out = spec.outer_radius;
    let bounds = [
        0.0,
        spec.brain_radius(),
        spec.skull_outer_radius(),
        r_out,
    ];
    let mut radii = vec![0.0];
    for w in bounds.windows(2) {
        if size.graded() {
            // equal steps in the stretched coordinate
            let (ta, tb) = (size.steps(r_out - w[0]), size.steps(r_out - w[1]));
            let n = ((ta - tb) - 1e-9).ceil().max(1.0) as usize;
            for k in 1..n {
                radii.push(r_out - size.depth_at_steps(ta + (tb - ta) * k as f64 / n as f64));
            }
            radii.push(w[1]);
        } else {
            let h = size.h;
            let n = (((w[1] - w[0]) / h) - 1e-9).ceil().max(1.0) as usize;
            for k in 1..=n {
                radii.push(w[0] + (w[1] - w[0]) * k as f64 / n as f64);
            }
        }
    }
    radii
}

pub fn generate_head_mesh(spec: &HeadGeometrySpec, dimension: usize, density: MeshDensity) -> Result<Mesh> {
    spec.validate(dimension)?;
    let h = spec.element_size(density);
    match (dimension, density) {
        (2, MeshDensity::Dense) => disk_mesh(
            spec,
            Sizing {
                h,
                hb: h / spec.boundary_refinement,
            },
        ),
        (2, MeshDensity::Coarse) => disk_mesh(spec, Sizing::uniform(h)),
        _ => ball_mesh(spec, h),
    }
}

fn tag_elements(spec: &HeadGeometrySpec, dimension: usize, nodes: &[[f64; 3]], elements: &[usize]) -> Vec<LayerTag> {
    elements
        .chunks_exact(dimension + 1)
        .map(|el| {
            let mut c = [0.0; 3];
            for &n in el {
                for i in 0..3 {
                    c[i] += nodes[n][i] / el.len() as f64;
                }
            }
            spec.layer_at(norm(&c))
        })
        .collect()
}

fn disk_mesh(spec: &HeadGeometrySpec, size: Sizing) -> Result<Mesh> {
    let l = spec.electrode_count;
    let r_out = spec.outer_radius;
    let radii = radial_grid(spec, size);

    // Outer ring: `per` facets per electrode pitch, `span` of them under the electrode.
    // An even count keeps the default half-pitch electrodes exact on every density.
    let per = 2 * ((PI * r_out / (l as f64 * size.hb)).ceil() as usize).max(1);
    let dphi = 2.0 * PI / (l * per) as f64;
    let span = ((spec.electrode_width / (r_out * dphi)).round() as usize).clamp(1, per - 1);
    let offset = -(span as f64) * dphi / 2.0;

    let mut nodes = vec![[0.0, 0.0, 0.0]];
    let mut rings: Vec<(usize, usize)> = vec![(0, 1)];
    let last = radii.len() - 1;
    for (k, &r) in radii.iter().enumerate().skip(1) {
        let n = if k == last {
            l * per
        } else {
            ((2.0 * PI * r / size.at_depth(r_out - r)).ceil() as usize).max(6)
        };
        let start = nodes.len();
        for j in 0..n {
            let phi = offset + 2.0 * PI * j as f64 / n as f64;
            nodes.push([r * phi.cos(), r * phi.sin(), 0.0]);
        }
        rings.push((start, n));
    }

    let mut elements = Vec::new();
    let mut push_tri = |a: usize, b: usize, c: usize, nodes: &[[f64; 3]]| {
        if signed_measure(2, &[nodes[a], nodes[b], nodes[c]]) > 0.0 {
            elements.extend([a, b, c]);
        } else {
            elements.extend([a, c, b]);
        }
    };
    for w in rings.windows(2) {
        let (sa, na) = w[0];
        let (sb, nb) = w[1];
        if na == 1 {
            for j in 0..nb {
                push_tri(sa, sb + j, sb + (j + 1) % nb, &nodes);
            }
            continue;
        }
        let (mut i, mut j) = (0usize, 0usize);
        while i < na || j < nb {
            let advance_inner = if i == na {
                false
            } else if j == nb {
                true
            } else {
                (i + 1) as f64 / na as f64 <= (j + 1) as f64 / nb as f64
            };
            if advance_inner {
                push_tri(sa + i % na, sa + (i + 1) % na, sb + j % nb, &nodes);
                i += 1;
            } else {
                push_tri(sa + i % na, sb + (j + 1) % nb, sb + j % nb, &nodes);
                j += 1;
            }
        }
    }

    let facets = extract_boundary_facets(2, &nodes, &elements);
    let half = span as f64 * dphi / 2.0;
    let mut electrodes = vec![Vec::new(); l];
    for f in 0..facets.len() / 2 {
        let a = nodes[facets[2 * f]];
        let b = nodes[facets[2 * f + 1]];
        let phi = (a[1] + b[1]).atan2(a[0] + b[0]);
        for (e, list) in electrodes.iter_mut().enumerate() {
            let centre = 2.0 * PI * e as f64 / l as f64;
            let d = wrap_angle(phi - centre).abs();
            if d < half {
                list.push(f);
            }
        }
    }
    let tags = tag_elements(spec, 2, &nodes, &elements);
    Mesh::new(2, nodes, elements, facets, electrodes, tags)
}

fn wrap_angle(a: f64) -> f64 {
    let mut a = a % (2.0 * PI);
    if a > PI {
        a -= 2.0 * PI;
    } else if a < -PI {
        a += 2.0 * PI;
    }
    a
}

const KUHN_PERMUTATIONS: [[usize; 3]; 6] = [
    [0, 1, 2],
    [0, 2, 1],
    [1, 0, 2],
    [1, 2, 0],
    [2, 0, 1],
    [2, 1, 0],
];

fn ball_mesh(spec: &HeadGeometrySpec, h: f64) -> Result<Mesh> {
    let r_out = spec.outer_radius;
    let half: Vec<f64> = radial_grid(spec, Sizing::uniform(h)).iter().map(|r| r / r_out).collect();
    let mut grid: Vec<f64> = half.iter().skip(1).rev().map(|t| -t).collect();
    grid.extend(&half);
    let g = grid.len();
    let index = |i: usize, j: usize, k: usize| (i * g + j) * g + k;

    let mut reference = Vec::with_capacity(g * g * g);
    let mut nodes = Vec::with_capacity(g * g * g);
    for &x in &grid {
        for &y in &grid {
            for &z in &grid {
                let p = [x, y, z];
                reference.push(p);
                let inf = x.abs().max(y.abs()).max(z.abs());
                let two = norm(&p);
                let s = if two > 0.0 { r_out * inf / two } else { 0.0 };
                nodes.push(p.map(|v| v * s));
            }
        }
    }

    let mut elements = Vec::with_capacity(6 * 4 * (g - 1).pow(3));
    for ci in 0..g - 1 {
        for cj in 0..g - 1 {
            for ck in 0..g - 1 {
                let cell = [ci, cj, ck];
                // Split each octant's cells along the diagonal pointing away from the origin.
                let mut base = [0usize; 3];
                let mut step = [0isize; 3];
                for a in 0..3 {
                    let c = cell[a];
                    if grid[c] + grid[c + 1] >= 0.0 {
                        base[a] = c;
                        step[a] = 1;
                    } else {
                        base[a] = c + 1;
                        step[a] = -1;
                    }
                }
                for perm in KUHN_PERMUTATIONS {
                    let mut v = base;
                    let mut tet = [index(v[0], v[1], v[2]); 4];
                    for (s, &axis) in perm.iter().enumerate() {
                        v[axis] = (v[axis] as isize + step[axis]) as usize;
                        tet[s + 1] = index(v[0], v[1], v[2]);
                    }
                    let ref_vol = signed_measure(3, &tet.map(|n| reference[n]));
                    let vol = signed_measure(3, &tet.map(|n| nodes[n]));
                    if ref_vol * vol <= 0.0 {
                        return Err(Error::InvalidMesh(format!(
                            "lattice cell {cell:?} inverted by the spherical mapping"
                        )));
                    }
                    if vol < 0.0 {
                        tet.swap(2, 3);
                    }
                    elements.extend(tet);
                }
            }
        }
    }

    // Drop lattice nodes that no element references (none for a full lattice, kept for safety of indices).
    let facets = extract_boundary_facets(3, &nodes, &elements);
    let centres = electrode_directions(spec.electrode_count);
    let half_angle = spec.electrode_width / (2.0 * r_out);
    let mut electrodes = vec![Vec::new(); spec.electrode_count];
    for f in 0..facets.len() / 3 {
        let mut c = [0.0; 3];
        for &n in &facets[3 * f..3 * f + 3] {
            for i in 0..3 {
                c[i] += nodes[n][i];
            }
        }
        let len = norm(&c);
        for (e, dir) in centres.iter().enumerate() {
            let cosang: f64 = (0..3).map(|i| c[i] * dir[i]).sum::<f64>() / len;
            if cosang.clamp(-1.0, 1.0).acos() <= half_angle {
                electrodes[e].push(f);
            }
        }
    }
    if let Some(e) = electrodes.iter().position(Vec::is_empty) {
        return Err(Error::InvalidSpec(format!(
            "electrode {e} covers no boundary facet at element size {h} m"
        )));
    }
    let tags = tag_elements(spec, 3, &nodes, &elements);
    Mesh::new(3, nodes, elements, facets, electrodes, tags)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn disk_layers_and_electrodes() {
        let spec = HeadGeometrySpec::default_2d();
        let m = generate_head_mesh(&spec, 2, MeshDensity::Dense).unwrap();
        let tags: HashSet<_> = m.layer_tags().iter().copied().collect();
        assert_eq!(tags.len(), 3);
        assert!(!tags.contains(&LayerTag::None));
        assert_eq!(m.electrode_count(), 16);
        let mut seen = HashSet::new();
        for e in m.electrodes() {
            assert!(!e.is_empty());
            for &f in e {
                assert!(seen.insert(f));
            }
        }
        // equal electrodes, about half the boundary covered
        let lens: Vec<f64> = (0..16).map(|l| m.electrode_measure(l)).collect();
        for w in lens.windows(2) {
            assert!((w[0] - w[1]).abs() < 1e-12);
        }
        let coverage = lens.iter().sum::<f64>() / (2.0 * PI * spec.outer_radius);
        assert!((coverage - 0.5).abs() < 0.1, "coverage {coverage}");
    }

    #[test]
    fn coarse_has_at_most_half_the_elements() {
        for (spec, d) in [(HeadGeometrySpec::default_2d(), 2), (HeadGeometrySpec::default_3d(), 3)] {
            let dense = generate_head_mesh(&spec, d, MeshDensity::Dense).unwrap();
            let coarse = generate_head_mesh(&spec, d, MeshDensity::Coarse).unwrap();
            assert!(2 * coarse.element_count() <= dense.element_count());
            assert_ne!(dense.id(), coarse.id());
        }
    }

    #[test]
    fn disk_area_matches_circle() {
        let spec = HeadGeometrySpec::default_2d();
        let m = generate_head_mesh(&spec, 2, MeshDensity::Dense).unwrap();
        let exact = PI * spec.outer_radius.powi(2);
        assert!((m.total_measure() - exact).abs() / exact < 0.02);
    }

    #[test]
    fn ball_volume_and_electrode_radius() {
        let spec = HeadGeometrySpec::default_3d();
        let m = generate_head_mesh(&spec, 3, MeshDensity::Dense).unwrap();
        let exact = 4.0 / 3.0 * PI * spec.outer_radius.powi(3);
        assert!((m.total_measure() - exact).abs() / exact < 0.05);
        assert_eq!(m.electrode_count(), 32);
        for l in 0..32 {
            for n in m.electrode_nodes(l) {
                let r = norm(&m.node(n));
                assert!((r - spec.outer_radius).abs() < 1e-12, "electrode node radius {r}");
            }
        }
        let tags: HashSet<_> = m.layer_tags().iter().copied().collect();
        assert_eq!(tags.len(), 3);
    }

    #[test]
    fn overlapping_electrodes_rejected() {
        let mut spec = HeadGeometrySpec::default_2d();
        spec.electrode_width = 2.0 * PI * spec.outer_radius / 16.0 * 1.01;
        assert!(matches!(
            generate_head_mesh(&spec, 2, MeshDensity::Dense),
            Err(Error::InvalidSpec(_))
        ));
        let mut spec = HeadGeometrySpec::default_3d();
        spec.electrode_width *= 3.0;
        assert!(matches!(
            generate_head_mesh(&spec, 3, MeshDensity::Coarse),
            Err(Error::InvalidSpec(_))
        ));
    }

    #[test]
    fn invalid_thickness_rejected() {
        let mut spec = HeadGeometrySpec::default_2d();
        spec.skull_thickness = 0.1;
        assert!(spec.validate(2).is_err());
        assert!(spec.validate(4).is_err());
    }
}
