//! Simplicial finite element meshes of layered head phantoms.
//!
//! A [`Mesh`] is immutable once built: construction validates connectivity,
//! orientation and electrode layout, and caches per-element measures and the
//! gradients of the barycentric basis functions used by every assembly loop.

mod generate;
mod graph;
mod interpolate;
mod locate;

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::artifact::{self, FORMAT_VERSION};
use crate::error::{Error, Result};

pub use generate::{generate_head_mesh, HeadGeometrySpec, MeshDensity};
pub use graph::{extract_graph, Graph, NormalizedAdjacency};
pub use interpolate::{interpolate_field, interpolate_field_with_tolerance, DEFAULT_INTERPOLATION_TOLERANCE};
pub use locate::PointLocator;

/// Tissue label of an element.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerTag {
    Skin,
    Skull,
    Brain,
    None,
}

#[derive(Debug, Clone)]
pub struct Mesh {
    id: String,
    dimension: usize,
    nodes: Vec<[f64; 3]>,
    elements: Vec<usize>,
    boundary_facets: Vec<usize>,
    electrodes: Vec<Vec<usize>>,
    layer_tags: Vec<LayerTag>,
    measures: Vec<f64>,
    grads: Vec<[f64; 3]>,
}

impl Mesh {
    /// Builds and validates a mesh.
    ///
    /// `elements` is a flat list with `dimension + 1` node indices per simplex,
    /// `boundary_facets` a flat list with `dimension` indices per facet, and
    /// each electrode a set of indices into the boundary facet list.
    pub fn new(
        dimension: usize,
        nodes: Vec<[f64; 3]>,
        elements: Vec<usize>,
        boundary_facets: Vec<usize>,
        electrodes: Vec<Vec<usize>>,
        layer_tags: Vec<LayerTag>,
    ) -> Result<Self> {
        if dimension != 2 && dimension != 3 {
            return Err(Error::InvalidMesh(format!("dimension {dimension} not in {{2, 3}}")));
        }
        let k = dimension + 1;
        if elements.is_empty() || elements.len() % k != 0 {
            return Err(Error::InvalidMesh("element list is empty or ragged".into()));
        }
        if boundary_facets.len() % dimension != 0 {
            return Err(Error::InvalidMesh("boundary facet list is ragged".into()));
        }
        let ne = elements.len() / k;
        if layer_tags.len() != ne {
            return Err(Error::InvalidMesh(format!(
                "{} layer tags for {} elements",
                layer_tags.len(),
                ne
            )));
        }
        if let Some(&bad) = elements.iter().chain(&boundary_facets).find(|&&i| i >= nodes.len()) {
            return Err(Error::InvalidMesh(format!("node index {bad} out of range")));
        }

        let (measures, grads) = element_geometry(dimension, &nodes, &elements)?;

        let mut mesh = Mesh {
            id: String::new(),
            dimension,
            nodes,
            elements,
            boundary_facets,
            electrodes,
            layer_tags,
            measures,
            grads,
        };
        mesh.validate_boundary()?;
        mesh.validate_electrodes()?;
        mesh.id = format!("{}d-{}", dimension, artifact::hash_of(&mesh.to_file_body()));
        Ok(mesh)
    }

    fn validate_boundary(&self) -> Result<()> {
        let d = self.dimension;
        let owners = facet_owners(d, &self.elements);
        for f in 0..self.facet_count() {
            let facet = self.facet(f);
            let key = facet_key(facet);
            let Some(&(count, elem, opposite)) = owners.get(&key) else {
                return Err(Error::InvalidMesh(format!("boundary facet {f} is not an element facet")));
            };
            if count != 1 {
                return Err(Error::InvalidMesh(format!("facet {f} is interior")));
            }
            let normal = facet_normal(d, &self.nodes, facet);
            let p0 = self.nodes[facet[0]];
            let q = self.nodes[self.element(elem)[opposite]];
            let s: f64 = (0..d).map(|i| (q[i] - p0[i]) * normal[i]).sum();
            if s >= 0.0 {
                return Err(Error::InvalidMesh(format!("boundary facet {f} is not outward oriented")));
            }
        }
        Ok(())
    }

    fn validate_electrodes(&self) -> Result<()> {
        if self.electrodes.len() < 2 {
            return Err(Error::InvalidMesh("at least two electrodes are required".into()));
        }
        let mut owner = vec![usize::MAX; self.facet_count()];
        for (l, facets) in self.electrodes.iter().enumerate() {
            if facets.is_empty() {
                return Err(Error::InvalidMesh(format!("electrode {l} covers no facet")));
            }
            for &f in facets {
                if f >= self.facet_count() {
                    return Err(Error::InvalidMesh(format!("electrode {l} references facet {f}")));
                }
                if owner[f] != usize::MAX {
                    return Err(Error::InvalidMesh(format!(
                        "electrodes {} and {l} share facet {f}",
                        owner[f]
                    )));
                }
                owner[f] = l;
            }
        }
        Ok(())
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn element_count(&self) -> usize {
        self.measures.len()
    }

    pub fn facet_count(&self) -> usize {
        self.boundary_facets.len() / self.dimension
    }

    pub fn electrode_count(&self) -> usize {
        self.electrodes.len()
    }

    pub fn nodes(&self) -> &[[f64; 3]] {
        &self.nodes
    }

    pub fn node(&self, i: usize) -> [f64; 3] {
        self.nodes[i]
    }

    pub fn element(&self, e: usize) -> &[usize] {
        let k = self.dimension + 1;
        &self.elements[e * k..(e + 1) * k]
    }

    pub fn elements(&self) -> impl Iterator<Item = &[usize]> {
        self.elements.chunks_exact(self.dimension + 1)
    }

    pub fn facet(&self, f: usize) -> &[usize] {
        let d = self.dimension;
        &self.boundary_facets[f * d..(f + 1) * d]
    }

    pub fn electrodes(&self) -> &[Vec<usize>] {
        &self.electrodes
    }

    pub fn layer_tags(&self) -> &[LayerTag] {
        &self.layer_tags
    }

    /// Length, area or volume of element `e`.
    pub fn measure(&self, e: usize) -> f64 {
        self.measures[e]
    }

    /// Gradients of the `dimension + 1` barycentric basis functions on element `e`.
    pub fn basis_gradients(&self, e: usize) -> &[[f64; 3]] {
        let k = self.dimension + 1;
        &self.grads[e * k..(e + 1) * k]
    }

    pub fn total_measure(&self) -> f64 {
        self.measures.iter().sum()
    }

    pub fn centroid(&self, e: usize) -> [f64; 3] {
        let el = self.element(e);
        let mut c = [0.0; 3];
        for &n in el {
            for i in 0..3 {
                c[i] += self.nodes[n][i];
            }
        }
        c.map(|v| v / el.len() as f64)
    }

    /// Measure of boundary facet `f` (edge length in 2D, triangle area in 3D).
    pub fn facet_measure(&self, f: usize) -> f64 {
        let n = facet_normal(self.dimension, &self.nodes, self.facet(f));
        let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
        if self.dimension == 3 {
            0.5 * len
        } else {
            len
        }
    }

    pub fn electrode_measure(&self, l: usize) -> f64 {
        self.electrodes[l].iter().map(|&f| self.facet_measure(f)).sum()
    }

    /// Distinct nodes lying on facets of electrode `l`.
    pub fn electrode_nodes(&self, l: usize) -> Vec<usize> {
        let mut nodes: Vec<usize> = self.electrodes[l]
            .iter()
            .flat_map(|&f| self.facet(f).iter().copied())
            .collect();
        nodes.sort_unstable();
        nodes.dedup();
        nodes
    }

    /// For every node, the elements that contain it.
    pub fn node_elements(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.node_count()];
        for (e, el) in self.elements().enumerate() {
            for &n in el {
                out[n].push(e);
            }
        }
        out
    }

    /// Nodes incident to at least one element carrying `tag`.
    pub fn nodes_with_layer(&self, tag: LayerTag) -> Vec<usize> {
        let mut mark = vec![false; self.node_count()];
        for (e, el) in self.elements().enumerate() {
            if self.layer_tags[e] == tag {
                for &n in el {
                    mark[n] = true;
                }
            }
        }
        (0..self.node_count()).filter(|&i| mark[i]).collect()
    }

    /// Largest edge length over all elements.
    pub fn max_edge_length(&self) -> f64 {
        let mut h: f64 = 0.0;
        for el in self.elements() {
            for a in 0..el.len() {
                for b in a + 1..el.len() {
                    h = h.max(distance(&self.nodes[el[a]], &self.nodes[el[b]]));
                }
            }
        }
        h
    }

    fn to_file_body(&self) -> MeshBody {
        let d = self.dimension;
        MeshBody {
            dimension: d,
            nodes: self.nodes.iter().map(|p| p[..d].to_vec()).collect(),
            elements: self.elements().map(<[usize]>::to_vec).collect(),
            boundary_facets: self.boundary_facets.chunks_exact(d).map(<[usize]>::to_vec).collect(),
            electrodes: self.electrodes.clone(),
            layer_tags: self.layer_tags.clone(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = MeshFile {
            version: FORMAT_VERSION,
            mesh_id: self.id.clone(),
            body: self.to_file_body(),
        };
        artifact::write_json(path, &file)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file: MeshFile = artifact::read_json(path)?;
        artifact::check_version("mesh", file.version)?;
        let b = file.body;
        let d = b.dimension;
        let mut nodes = Vec::with_capacity(b.nodes.len());
        for p in &b.nodes {
            if p.len() != d {
                return Err(Error::corrupt(path, "node coordinate count differs from dimension"));
            }
            let mut q = [0.0; 3];
            q[..d].copy_from_slice(p);
            nodes.push(q);
        }
        if b.elements.iter().any(|e| e.len() != d + 1) || b.boundary_facets.iter().any(|f| f.len() != d) {
            return Err(Error::corrupt(path, "simplex arity differs from dimension"));
        }
        let mesh = Mesh::new(
            d,
            nodes,
            b.elements.concat(),
            b.boundary_facets.concat(),
            b.electrodes,
            b.layer_tags,
        )?;
        if mesh.id != file.mesh_id {
            return Err(Error::corrupt(path, "mesh id does not match content"));
        }
        Ok(mesh)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct MeshBody {
    dimension: usize,
    nodes: Vec<Vec<f64>>,
    elements: Vec<Vec<usize>>,
    boundary_facets: Vec<Vec<usize>>,
    electrodes: Vec<Vec<usize>>,
    layer_tags: Vec<LayerTag>,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct MeshFile {
    version: u32,
    mesh_id: String,
    #[serde(flatten)]
    body: MeshBody,
}

pub(crate) fn distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

pub(crate) fn norm(a: &[f64; 3]) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

fn sub(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn dot(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Signed measure of a simplex (positive for counter-clockwise / right-handed order).
pub(crate) fn signed_measure(dimension: usize, p: &[[f64; 3]]) -> f64 {
    let e1 = sub(&p[1], &p[0]);
    let e2 = sub(&p[2], &p[0]);
    if dimension == 2 {
        0.5 * (e1[0] * e2[1] - e2[0] * e1[1])
    } else {
        let e3 = sub(&p[3], &p[0]);
        dot(&e1, &cross(&e2, &e3)) / 6.0
    }
}

fn element_geometry(
    dimension: usize,
    nodes: &[[f64; 3]],
    elements: &[usize],
) -> Result<(Vec<f64>, Vec<[f64; 3]>)> {
    let k = dimension + 1;
    let ne = elements.len() / k;
    let mut measures = Vec::with_capacity(ne);
    let mut grads = Vec::with_capacity(elements.len());
    for (e, el) in elements.chunks_exact(k).enumerate() {
        let p0 = nodes[el[0]];
        let e1 = sub(&nodes[el[1]], &p0);
        let e2 = sub(&nodes[el[2]], &p0);
        let (det, g) = if dimension == 2 {
            let det = e1[0] * e2[1] - e2[0] * e1[1];
            let g1 = [e2[1] / det, -e2[0] / det, 0.0];
            let g2 = [-e1[1] / det, e1[0] / det, 0.0];
            (det / 2.0, vec![g1, g2])
        } else {
            let e3 = sub(&nodes[el[3]], &p0);
            let c23 = cross(&e2, &e3);
            let det = dot(&e1, &c23);
            let c31 = cross(&e3, &e1);
            let c12 = cross(&e1, &e2);
            (
                det / 6.0,
                vec![c23.map(|v| v / det), c31.map(|v| v / det), c12.map(|v| v / det)],
            )
        };
        if !(det > 0.0) || !det.is_finite() {
            return Err(Error::InvalidMesh(format!(
                "element {e} has non-positive measure {det:e}"
            )));
        }
        let mut g0 = [0.0; 3];
        for gi in &g {
            for c in 0..3 {
                g0[c] -= gi[c];
            }
        }
        measures.push(det);
        grads.push(g0);
        grads.extend(g);
    }
    Ok((measures, grads))
}

fn facet_key(facet: &[usize]) -> [usize; 3] {
    let mut key = [usize::MAX; 3];
    key[..facet.len()].copy_from_slice(facet);
    key[..facet.len()].sort_unstable();
    key
}

/// Non-normalized facet normal following the right-hand rule on the node order.
pub(crate) fn facet_normal(dimension: usize, nodes: &[[f64; 3]], facet: &[usize]) -> [f64; 3] {
    let a = nodes[facet[0]];
    let b = nodes[facet[1]];
    if dimension == 2 {
        [b[1] - a[1], -(b[0] - a[0]), 0.0]
    } else {
        let c = nodes[facet[2]];
        cross(&sub(&b, &a), &sub(&c, &a))
    }
}

/// Facet key -> (number of incident elements, one owner, local index of the opposite vertex).
fn facet_owners(dimension: usize, elements: &[usize]) -> HashMap<[usize; 3], (usize, usize, usize)> {
    let k = dimension + 1;
    let mut owners: HashMap<[usize; 3], (usize, usize, usize)> = HashMap::new();
    let mut facet = Vec::with_capacity(dimension);
    for (e, el) in elements.chunks_exact(k).enumerate() {
        for skip in 0..k {
            facet.clear();
            facet.extend((0..k).filter(|&i| i != skip).map(|i| el[i]));
            owners
                .entry(facet_key(&facet))
                .and_modify(|v| v.0 += 1)
                .or_insert((1, e, skip));
        }
    }
    owners
}

/// Outward-oriented boundary facets of a simplex complex, sorted by node key.
pub(crate) fn extract_boundary_facets(
    dimension: usize,
    nodes: &[[f64; 3]],
    elements: &[usize],
) -> Vec<usize> {
    let k = dimension + 1;
    let mut boundary: Vec<([usize; 3], usize, usize)> = facet_owners(dimension, elements)
        .into_iter()
        .filter(|(_, v)| v.0 == 1)
        .map(|(key, v)| (key, v.1, v.2))
        .collect();
    boundary.sort_unstable();
    let mut out = Vec::with_capacity(boundary.len() * dimension);
    for (_, e, skip) in boundary {
        let el = &elements[e * k..(e + 1) * k];
        let mut facet: Vec<usize> = (0..k).filter(|&i| i != skip).map(|i| el[i]).collect();
        let n = facet_normal(dimension, nodes, &facet);
        let q = nodes[el[skip]];
        let p0 = nodes[facet[0]];
        let s: f64 = (0..dimension).map(|i| (q[i] - p0[i]) * n[i]).sum();
        if s > 0.0 {
            facet.swap(0, 1);
        }
        out.extend(facet);
    }
    out
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn unit_triangle() -> Mesh {
        let nodes = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let elements = vec![0, 1, 2];
        let facets = extract_boundary_facets(2, &nodes, &elements);
        Mesh::new(2, nodes, elements, facets, vec![vec![0], vec![1]], vec![LayerTag::Brain]).unwrap()
    }

    #[test]
    fn triangle_geometry() {
        let m = unit_triangle();
        assert_eq!(m.facet_count(), 3);
        assert!((m.measure(0) - 0.5).abs() < 1e-15);
        let g = m.basis_gradients(0);
        assert_eq!(g[1], [1.0, 0.0, 0.0]);
        assert_eq!(g[2], [0.0, 1.0, 0.0]);
        assert_eq!(g[0], [-1.0, -1.0, 0.0]);
    }

    #[test]
    fn rejects_inverted_element() {
        let nodes = vec![[0.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 0.0, 0.0]];
        let err = Mesh::new(2, nodes, vec![0, 1, 2], vec![], vec![], vec![LayerTag::Brain]).unwrap_err();
        assert!(matches!(err, Error::InvalidMesh(_)));
    }

    #[test]
    fn rejects_overlapping_electrodes() {
        let nodes = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let facets = extract_boundary_facets(2, &nodes, &[0, 1, 2]);
        let err = Mesh::new(2, nodes, vec![0, 1, 2], facets, vec![vec![0, 1], vec![1]], vec![LayerTag::Brain])
            .unwrap_err();
        assert!(matches!(err, Error::InvalidMesh(_)));
    }

    #[test]
    fn rejects_single_electrode_and_bad_index() {
        let nodes = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let facets = extract_boundary_facets(2, &nodes, &[0, 1, 2]);
        assert!(Mesh::new(2, nodes.clone(), vec![0, 1, 2], facets.clone(), vec![vec![0]], vec![LayerTag::Brain]).is_err());
        assert!(Mesh::new(2, nodes, vec![0, 1, 3], facets, vec![vec![0], vec![1]], vec![LayerTag::Brain]).is_err());
    }

    #[test]
    fn tetrahedron_gradients_partition_unity() {
        let nodes = vec![
            [0.0, 0.0, 0.0],
            [2.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 3.0],
        ];
        let elements = vec![0, 1, 2, 3];
        let facets = extract_boundary_facets(3, &nodes, &elements);
        let m = Mesh::new(3, nodes, elements, facets, vec![vec![0], vec![1]], vec![LayerTag::Brain]).unwrap();
        assert!((m.measure(0) - 1.0).abs() < 1e-14);
        let g = m.basis_gradients(0);
        for c in 0..3 {
            let s: f64 = g.iter().map(|v| v[c]).sum();
            assert!(s.abs() < 1e-14);
        }
        // grad of lambda_1 = x / 2
        assert!((g[1][0] - 0.5).abs() < 1e-15);
        let area: f64 = (0..4).map(|f| m.facet_measure(f)).sum();
        let expected = 1.0 + 3.0 + 1.5 + 0.5 * (9.0f64 + 36.0 + 4.0).sqrt();
        assert!((area - expected).abs() < 1e-12);
    }

    #[test]
    fn save_load_round_trip() {
        let m = unit_triangle();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mesh.json");
        m.save(&path).unwrap();
        let back = Mesh::load(&path).unwrap();
        assert_eq!(back.id(), m.id());
        assert_eq!(back.nodes(), m.nodes());
    }
}
