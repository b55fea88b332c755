//! Graph layers: convolution, top-k pooling and clone-cluster unpooling.
//!
//! Features are row-major `nodes x channels` slices throughout.

use faer::{Accum, MatMut, MatRef, Par};

use crate::error::{Error, Result};
use crate::mesh::NormalizedAdjacency;

/// Negative slope of the hidden-layer activation.
pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    LeakyRelu,
    Identity,
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::LeakyRelu if z < 0.0 => LEAKY_SLOPE * z,
            _ => z,
        }
    }

    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::LeakyRelu if z < 0.0 => LEAKY_SLOPE,
            _ => 1.0,
        }
    }
}

/// `out (+)= a b` for row-major `a: m x k`, `b: k x n`.
pub(crate) fn gemm(a: &[f64], m: usize, k: usize, b: &[f64], n: usize, out: &mut [f64], accumulate: bool) {
    let a = MatRef::from_row_major_slice(a, m, k);
    let b = MatRef::from_row_major_slice(b, k, n);
    let out = MatMut::from_row_major_slice_mut(out, m, n);
    let acc = if accumulate { Accum::Add } else { Accum::Replace };
    faer::linalg::matmul::matmul(out, acc, a, b, 1.0, Par::Seq);
}

/// `out += a^T b` for row-major `a: m x k`, `b: m x n`.
pub(crate) fn gemm_tn(a: &[f64], m: usize, k: usize, b: &[f64], n: usize, out: &mut [f64]) {
    let a = MatRef::from_row_major_slice(a, m, k);
    let b = MatRef::from_row_major_slice(b, m, n);
    let out = MatMut::from_row_major_slice_mut(out, k, n);
    faer::linalg::matmul::matmul(out, Accum::Add, a.transpose(), b, 1.0, Par::Seq);
}

/// `out = a b^T` for row-major `a: m x n`, `b: k x n`.
pub(crate) fn gemm_nt(a: &[f64], m: usize, n: usize, b: &[f64], k: usize, out: &mut [f64]) {
    let a = MatRef::from_row_major_slice(a, m, n);
    let b = MatRef::from_row_major_slice(b, k, n);
    let out = MatMut::from_row_major_slice_mut(out, m, k);
    faer::linalg::matmul::matmul(out, Accum::Replace, a, b.transpose(), 1.0, Par::Seq);
}

/// Pre-activation `Â X W + b`, applying `Â` on whichever side has fewer channels.
pub(crate) fn gcn_preactivation(x: &[f64], cin: usize, adj: &NormalizedAdjacency, w: &[f64], b: &[f64]) -> Vec<f64> {
    let n = adj.node_count();
    let cout = b.len();
    let mut z = vec![0.0; n * cout];
    if cin <= cout {
        let mut ax = vec![0.0; n * cin];
        adj.multiply(x, cin, &mut ax);
        gemm(&ax, n, cin, w, cout, &mut z, false);
    } else {
        let mut xw = vec![0.0; n * cout];
        gemm(x, n, cin, w, cout, &mut xw, false);
        adj.multiply(&xw, cout, &mut z);
    }
    for row in z.chunks_exact_mut(cout) {
        for (v, bias) in row.iter_mut().zip(b) {
            *v += bias;
        }
    }
    z
}

/// One graph convolution `act(Â X W + b)`; `w` is row-major `cin x cout`.
pub fn gcn_layer_forward(
    x: &[f64],
    cin: usize,
    adj: &NormalizedAdjacency,
    w: &[f64],
    b: &[f64],
    activation: Activation,
) -> Result<Vec<f64>> {
    let n = adj.node_count();
    if x.len() != n * cin || w.len() != cin * b.len() {
        return Err(Error::Contract(format!(
            "graph convolution shapes: {} features for {n} nodes x {cin} channels, {} weights for {cin} x {}",
            x.len(),
            w.len(),
            b.len()
        )));
    }
    let mut z = gcn_preactivation(x, cin, adj, w, b);
    for v in &mut z {
        *v = activation.apply(*v);
    }
    Ok(z)
}

#[derive(Debug, Clone)]
pub struct PoolOutput {
    /// Gated features of the kept nodes, in pooled order.
    pub features: Vec<f64>,
    pub adjacency: NormalizedAdjacency,
    /// Original index of each pooled node, by descending score.
    pub kept: Vec<usize>,
    /// Pooled index each original node is represented by.
    pub assignment: Vec<usize>,
    /// Projection scores of the kept nodes.
    pub scores: Vec<f64>,
}

/// Number of nodes kept out of `n`.
pub fn pooled_size(n: usize, keep_fraction: f64) -> usize {
    ((keep_fraction * n as f64).ceil() as usize).clamp(1.min(n), n)
}

/// Top-k pooling on the projection scores `X p / |p|`.
///
/// The pooled graph links kept nodes within two hops of each other, and also
/// any two kept nodes whose clusters touch, so it stays connected whenever the
/// input graph is.
pub fn kmax_pool(
    x: &[f64],
    channels: usize,
    adj: &NormalizedAdjacency,
    p: &[f64],
    keep_fraction: f64,
) -> Result<PoolOutput> {
    let n = adj.node_count();
    if x.len() != n * channels || p.len() != channels {
        return Err(Error::Contract(format!(
            "pooling shapes: {} features for {n} nodes x {channels} channels, projection of length {}",
            x.len(),
            p.len()
        )));
    }
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::Contract(format!("keep fraction {keep_fraction} outside (0, 1]")));
    }
    let y = projection_scores(x, channels, p)?;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| y[b].total_cmp(&y[a]).then(a.cmp(&b)));
    let k = pooled_size(n, keep_fraction);
    let kept: Vec<usize> = order[..k].to_vec();

    let assignment = nearest_kept(adj, &kept)?;
    let mut pos = vec![usize::MAX; n];
    for (a, &v) in kept.iter().enumerate() {
        pos[v] = a;
    }

    let mut edges = Vec::new();
    for (a, &v) in kept.iter().enumerate() {
        for u in adj.neighbors(v) {
            if pos[u] != usize::MAX {
                edges.push((a, pos[u]));
            }
            for w in adj.neighbors(u) {
                if pos[w] != usize::MAX {
                    edges.push((a, pos[w]));
                }
            }
        }
    }
    for v in 0..n {
        for u in adj.neighbors(v) {
            if assignment[u] != assignment[v] {
                edges.push((assignment[v], assignment[u]));
            }
        }
    }

    let (features, scores) = gate_rows(x, channels, p, &kept)?;
    Ok(PoolOutput {
        features,
        adjacency: NormalizedAdjacency::from_edges(k, &edges),
        kept,
        assignment,
        scores,
    })
}

fn projection_scores(x: &[f64], channels: usize, p: &[f64]) -> Result<Vec<f64>> {
    let pn = p.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(pn > 0.0) {
        return Err(Error::DegenerateProjection);
    }
    Ok(x.chunks_exact(channels)
        .map(|row| row.iter().zip(p).map(|(a, b)| a * b).sum::<f64>() / pn)
        .collect())
}

/// Rows `kept` of `x`, each scaled by `tanh` of its projection score.
pub(crate) fn gate_rows(x: &[f64], channels: usize, p: &[f64], kept: &[usize]) -> Result<(Vec<f64>, Vec<f64>)> {
    let pn = p.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(pn > 0.0) {
        return Err(Error::DegenerateProjection);
    }
    let mut features = Vec::with_capacity(kept.len() * channels);
    let mut scores = Vec::with_capacity(kept.len());
    for &v in kept {
        let row = &x[v * channels..(v + 1) * channels];
        let y = row.iter().zip(p).map(|(a, b)| a * b).sum::<f64>() / pn;
        let gate = y.tanh();
        features.extend(row.iter().map(|f| f * gate));
        scores.push(y);
    }
    Ok((features, scores))
}

/// Multi-source breadth-first search from the kept nodes. Ties between
/// equally near kept nodes go to the lowest pooled index.
fn nearest_kept(adj: &NormalizedAdjacency, kept: &[usize]) -> Result<Vec<usize>> {
    let n = adj.node_count();
    let mut label = vec![usize::MAX; n];
    let mut frontier: Vec<usize> = Vec::with_capacity(kept.len());
    for (a, &v) in kept.iter().enumerate() {
        label[v] = a;
        frontier.push(v);
    }
    let mut reached = kept.len();
    while !frontier.is_empty() {
        let mut next = Vec::new();
        let mut candidate: Vec<(usize, usize)> = Vec::new();
        for &u in &frontier {
            for v in adj.neighbors(u) {
                if label[v] == usize::MAX {
                    candidate.push((v, label[u]));
                }
            }
        }
        candidate.sort_unstable();
        for (v, l) in candidate {
            // sorted, so the first label seen for v is the smallest
            if label[v] == usize::MAX {
                label[v] = l;
                next.push(v);
            }
        }
        reached += next.len();
        frontier = next;
    }
    if reached != n {
        return Err(Error::Contract(format!(
            "{} nodes cannot reach any kept node; the graph is disconnected",
            n - reached
        )));
    }
    Ok(label)
}

/// Restores the original node set: every node receives the row of the pooled
/// node it is assigned to (kept nodes are assigned to themselves).
pub fn clone_cluster_unpool(
    pooled: &[f64],
    channels: usize,
    original: &NormalizedAdjacency,
    kept: &[usize],
    assignment: &[usize],
) -> Result<Vec<f64>> {
    let n = original.node_count();
    let k = kept.len();
    if pooled.len() != k * channels {
        return Err(Error::Contract(format!(
            "{} pooled features for {k} nodes x {channels} channels",
            pooled.len()
        )));
    }
    if assignment.len() != n || assignment.iter().any(|&a| a >= k) {
        return Err(Error::Contract("cluster assignment does not cover the original graph".into()));
    }
    if kept.iter().enumerate().any(|(a, &v)| v >= n || assignment[v] != a) {
        return Err(Error::Contract("kept nodes must be assigned to themselves".into()));
    }
    let mut out = Vec::with_capacity(n * channels);
    for &a in assignment {
        out.extend_from_slice(&pooled[a * channels..(a + 1) * channels]);
    }
    Ok(out)
}

/// Pulls an unpooled gradient back onto the pooled nodes.
pub(crate) fn unpool_backward(g: &[f64], channels: usize, assignment: &[usize], k: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * channels];
    for (v, &a) in assignment.iter().enumerate() {
        let dst = &mut out[a * channels..(a + 1) * channels];
        for (d, s) in dst.iter_mut().zip(&g[v * channels..(v + 1) * channels]) {
            *d += s;
        }
    }
    out
}
