//! Graph view of a mesh: nodes and element-connectivity edges, plus the
//! symmetric normalized adjacency used by graph convolutions.

use serde::{Deserialize, Serialize};

use super::Mesh;

/// `D^{-1/2} (A + I) D^{-1/2}` in compressed sparse row form.
///
/// Columns within a row are sorted, and the diagonal is always present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedAdjacency {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl NormalizedAdjacency {
    /// Builds the normalized adjacency of an undirected graph. Each edge may be
    /// given in either orientation; duplicates and self-loops are ignored.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Self {
        let mut lists = vec![Vec::new(); n];
        for &(a, b) in edges {
            if a != b {
                lists[a].push(b);
                lists[b].push(a);
            }
        }
        for (i, l) in lists.iter_mut().enumerate() {
            l.push(i);
            l.sort_unstable();
            l.dedup();
        }
        let scale: Vec<f64> = lists.iter().map(|l| 1.0 / (l.len() as f64).sqrt()).collect();
        let mut row_ptr = Vec::with_capacity(n + 1);
        row_ptr.push(0);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        for (i, l) in lists.iter().enumerate() {
            for &j in l {
                cols.push(j);
                vals.push(scale[i] * scale[j]);
            }
            row_ptr.push(cols.len());
        }
        Self { n, row_ptr, cols, vals }
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    /// Column indices and values of row `i`.
    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        (&self.cols[r.clone()], &self.vals[r])
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (c, v) = self.row(i);
        c.binary_search(&j).map(|k| v[k]).unwrap_or(0.0)
    }

    /// Neighbours of `i`, excluding `i` itself.
    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.row(i).0.iter().copied().filter(move |&j| j != i)
    }

    /// `out = Â x` for a row-major `n x channels` matrix `x`.
    pub fn multiply(&self, x: &[f64], channels: usize, out: &mut [f64]) {
        assert_eq!(x.len(), self.n * channels);
        assert_eq!(out.len(), self.n * channels);
        for i in 0..self.n {
            let o = &mut out[i * channels..(i + 1) * channels];
            o.fill(0.0);
            let (c, v) = self.row(i);
            for (&j, &a) in c.iter().zip(v) {
                let xr = &x[j * channels..(j + 1) * channels];
                for (ok, xk) in o.iter_mut().zip(xr) {
                    *ok += a * xk;
                }
            }
        }
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.n * self.n];
        for i in 0..self.n {
            let (c, v) = self.row(i);
            for (&j, &a) in c.iter().zip(v) {
                d[i * self.n + j] = a;
            }
        }
        d
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Graph {
    pub node_count: usize,
    /// Undirected edges `(i, j)` with `i < j`, sorted.
    pub edges: Vec<(usize, usize)>,
    pub adjacency: NormalizedAdjacency,
    /// Diagnostics only; the network never reads them.
    pub coordinates: Vec<[f64; 3]>,
}

impl Graph {
    pub fn from_edges(node_count: usize, edges: &[(usize, usize)], coordinates: Vec<[f64; 3]>) -> Self {
        let mut e: Vec<(usize, usize)> = edges
            .iter()
            .filter(|(a, b)| a != b)
            .map(|&(a, b)| (a.min(b), a.max(b)))
            .collect();
        e.sort_unstable();
        e.dedup();
        let adjacency = NormalizedAdjacency::from_edges(node_count, &e);
        Self {
            node_count,
            edges: e,
            adjacency,
            coordinates,
        }
    }

    /// Node degrees without the self-loop.
    pub fn degrees(&self) -> Vec<usize> {
        let mut d = vec![0; self.node_count];
        for &(a, b) in &self.edges {
            d[a] += 1;
            d[b] += 1;
        }
        d
    }

    pub fn is_connected(&self) -> bool {
        if self.node_count == 0 {
            return true;
        }
        let mut seen = vec![false; self.node_count];
        let mut stack = vec![0];
        seen[0] = true;
        let mut count = 1;
        while let Some(i) = stack.pop() {
            for j in self.adjacency.neighbors(i) {
                if !seen[j] {
                    seen[j] = true;
                    count += 1;
                    stack.push(j);
                }
            }
        }
        count == self.node_count
    }
}

pub fn extract_graph(mesh: &Mesh) -> Graph {
    let mut edges = Vec::new();
    for el in mesh.elements() {
        for a in 0..el.len() {
            for b in a + 1..el.len() {
                edges.push((el[a], el[b]));
            }
        }
    }
    Graph::from_edges(mesh.node_count(), &edges, mesh.nodes().to_vec())
}
