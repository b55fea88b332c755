//! Network parameters, forward pass and backpropagation.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ops::{
    clone_cluster_unpool, gate_rows, gcn_preactivation, gemm_nt, gemm_tn, kmax_pool, unpool_backward, Activation,
    PoolOutput,
};
use crate::artifact::{self, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::mesh::NormalizedAdjacency;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ArchitectureDescriptor {
    pub levels: usize,
    pub convs_per_level: usize,
    /// Hidden channels per level, top to bottom.
    pub channels: Vec<usize>,
    pub pool_keep_fraction: f64,
}

impl Default for ArchitectureDescriptor {
    fn default() -> Self {
        Self {
            levels: 4,
            convs_per_level: 3,
            channels: vec![32, 64, 128, 256],
            pool_keep_fraction: 0.125,
        }
    }
}

impl ArchitectureDescriptor {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.convs_per_level == 0 {
            return Err(Error::Contract("a network needs at least one level and one conv per level".into()));
        }
        if self.channels.len() != self.levels || self.channels.contains(&0) {
            return Err(Error::Contract(format!(
                "{} levels need {} positive channel counts, got {:?}",
                self.levels, self.levels, self.channels
            )));
        }
        if !(self.pool_keep_fraction > 0.0 && self.pool_keep_fraction <= 1.0) {
            return Err(Error::Contract(format!(
                "pool keep fraction {} outside (0, 1]",
                self.pool_keep_fraction
            )));
        }
        Ok(())
    }

    /// Analytic number of scalar parameters.
    pub fn parameter_count(&self) -> usize {
        Layout::new(self).total
    }
}

/// How node values are scaled before entering the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum NormalizationMode {
    /// Values enter and leave in S/m.
    #[default]
    Raw,
    /// Input divided by its max magnitude, output multiplied back.
    PerSampleMaxAbs,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvSlot {
    w: usize,
    b: usize,
    cin: usize,
    cout: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    enc: Vec<Vec<ConvSlot>>,
    pools: Vec<(usize, usize)>,
    /// `dec[l]` produces the level-`l` decoder features.
    dec: Vec<Vec<ConvSlot>>,
    out: ConvSlot,
    /// Block names, offsets and shapes in storage order.
    blocks: Vec<(String, usize, Vec<usize>)>,
    total: usize,
}

impl Layout {
    fn new(d: &ArchitectureDescriptor) -> Self {
        let mut blocks = Vec::new();
        let mut total = 0;
        let mut conv = |name: String, cin: usize, cout: usize, blocks: &mut Vec<_>| {
            let w = total;
            blocks.push((format!("{name}.weight"), w, vec![cin, cout]));
            let b = w + cin * cout;
            blocks.push((format!("{name}.bias"), b, vec![cout]));
            total = b + cout;
            ConvSlot { w, b, cin, cout }
        };
        let ch = &d.channels;
        let mut enc = Vec::new();
        for l in 0..d.levels {
            let mut convs = Vec::new();
            for c in 0..d.convs_per_level {
                let cin = match (l, c) {
                    (0, 0) => 1,
                    (_, 0) => ch[l - 1],
                    _ => ch[l],
                };
                convs.push(conv(format!("encoder.{l}.conv{c}"), cin, ch[l], &mut blocks));
            }
            enc.push(convs);
        }
        let mut dec = Vec::new();
        for l in 0..d.levels.saturating_sub(1) {
            let mut convs = Vec::new();
            for c in 0..d.convs_per_level {
                let cin = if c == 0 { ch[l + 1] + ch[l] } else { ch[l] };
                convs.push(conv(format!("decoder.{l}.conv{c}"), cin, ch[l], &mut blocks));
            }
            dec.push(convs);
        }
        let out = conv("output".into(), ch.first().copied().unwrap_or(1), 1, &mut blocks);
        let mut pools = Vec::new();
        for (l, &c) in ch.iter().enumerate().take(d.levels.saturating_sub(1)) {
            blocks.push((format!("pool.{l}.projection"), total, vec![c]));
            pools.push((total, c));
            total += c;
        }
        Self {
            enc,
            pools,
            dec,
            out,
            blocks,
            total,
        }
    }
}

/// Graph U-net weights. Nothing here depends on the node count or the
/// spatial dimension of the mesh the graph came from.
#[derive(Debug, Clone)]
pub struct GUNetModel {
    descriptor: ArchitectureDescriptor,
    pub normalization: NormalizationMode,
    layout: Layout,
    params: Vec<f64>,
}

impl PartialEq for GUNetModel {
    fn eq(&self, other: &Self) -> bool {
        self.descriptor == other.descriptor
            && self.normalization == other.normalization
            && self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Node features with the graph they live on.
#[derive(Debug, Clone)]
pub struct GraphSignal<'g> {
    pub features: Vec<f64>,
    pub channels: usize,
    pub adjacency: &'g NormalizedAdjacency,
}

impl<'g> GraphSignal<'g> {
    pub fn new(features: Vec<f64>, channels: usize, adjacency: &'g NormalizedAdjacency) -> Result<Self> {
        if channels == 0 || features.len() != adjacency.node_count() * channels {
            return Err(Error::Contract(format!(
                "{} features for {} nodes x {channels} channels",
                features.len(),
                adjacency.node_count()
            )));
        }
        Ok(Self {
            features,
            channels,
            adjacency,
        })
    }
}

struct ConvTape {
    input: Vec<f64>,
    z: Vec<f64>,
    act: Activation,
}

struct PoolTape {
    input: Vec<f64>,
    kept: Vec<usize>,
    assignment: Vec<usize>,
    scores: Vec<f64>,
}

/// Intermediate values recorded by the forward pass for backpropagation.
pub(crate) struct Tape {
    /// Pooled graphs, `graphs[l - 1]` for level `l >= 1`.
    graphs: Vec<NormalizedAdjacency>,
    enc: Vec<Vec<ConvTape>>,
    pools: Vec<PoolTape>,
    dec: Vec<Vec<ConvTape>>,
    out: Option<ConvTape>,
    scale: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct ParameterBlock {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct ModelFile {
    version: u32,
    descriptor: ArchitectureDescriptor,
    normalization: NormalizationMode,
    parameter_count: usize,
    blocks: Vec<ParameterBlock>,
}

impl GUNetModel {
    /// Weights drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, biases zero;
    /// projection vectors use their own length as fan-in.
    pub fn new(descriptor: ArchitectureDescriptor, seed: u64) -> Result<Self> {
        descriptor.validate()?;
        let layout = Layout::new(&descriptor);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; layout.total];
        let mut fill = |range: std::ops::Range<usize>, fan_in: usize, params: &mut Vec<f64>| {
            let s = 1.0 / (fan_in as f64).sqrt();
            for v in &mut params[range] {
                *v = rng.random_range(-s..s);
            }
        };
        let convs: Vec<ConvSlot> = layout
            .enc
            .iter()
            .chain(&layout.dec)
            .flatten()
            .copied()
            .chain(std::iter::once(layout.out))
            .collect();
        // biases start at zero so the input, not a random offset, drives the
        // first updates
        for s in convs {
            fill(s.w..s.b, s.cin, &mut params);
        }
        for &(off, c) in &layout.pools {
            fill(off..off + c, c, &mut params);
        }
        Ok(Self {
            descriptor,
            normalization: NormalizationMode::Raw,
            layout,
            params,
        })
    }

    pub fn descriptor(&self) -> &ArchitectureDescriptor {
        &self.descriptor
    }

    pub fn parameter_count(&self) -> usize {
        self.params.len()
    }

    pub fn parameters(&self) -> &[f64] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Names, offsets and shapes of the parameter blocks in storage order.
    pub fn blocks(&self) -> impl Iterator<Item = (&str, std::ops::Range<usize>, &[usize])> {
        self.layout.blocks.iter().map(|(name, off, shape)| {
            let len: usize = shape.iter().product();
            (name.as_str(), *off..*off + len, shape.as_slice())
        })
    }

    /// Sets the output projection to zero, making the network output
    /// identically zero.
    pub fn zero_output_projection(&mut self) {
        let s = self.layout.out;
        self.params[s.w..s.b + s.cout].fill(0.0);
    }

    pub fn forward(&self, signal: &GraphSignal<'_>) -> Result<Vec<f64>> {
        if signal.channels != 1 {
            return Err(Error::Contract(format!(
                "the network takes one input channel, got {}",
                signal.channels
            )));
        }
        Ok(self.run(signal.adjacency, &signal.features, false)?.0)
    }

    pub(crate) fn run(
        &self,
        adj: &NormalizedAdjacency,
        input: &[f64],
        record: bool,
    ) -> Result<(Vec<f64>, Option<Tape>)> {
        self.run_on_branch(adj, input, record, None)
    }

    /// With `frozen`, every activation slope and pooling selection is taken
    /// from that earlier pass, so the output is a smooth function of the
    /// parameters around it.
    pub(crate) fn run_on_branch(
        &self,
        adj: &NormalizedAdjacency,
        input: &[f64],
        record: bool,
        frozen: Option<&Tape>,
    ) -> Result<(Vec<f64>, Option<Tape>)> {
        let n0 = adj.node_count();
        if input.len() != n0 {
            return Err(Error::Contract(format!("{} input values for {n0} nodes", input.len())));
        }
        if n0 == 0 {
            return Err(Error::Contract("cannot run the network on an empty graph".into()));
        }
        let scale = match self.normalization {
            NormalizationMode::Raw => 1.0,
            NormalizationMode::PerSampleMaxAbs => {
                let m = input.iter().fold(0.0f64, |a, v| a.max(v.abs()));
                if m > 0.0 {
                    m
                } else {
                    1.0
                }
            }
        };
        let d = &self.descriptor;
        let lay = &self.layout;
        let p = &self.params;
        let mut tape = Tape {
            graphs: Vec::new(),
            enc: Vec::new(),
            pools: Vec::new(),
            dec: Vec::new(),
            out: None,
            scale,
        };

        let conv = |h: Vec<f64>, s: &ConvSlot, g: &NormalizedAdjacency, act: Activation, t: &mut Vec<ConvTape>, branch: Option<&ConvTape>| {
            let z = gcn_preactivation(&h, s.cin, g, &p[s.w..s.b], &p[s.b..s.b + s.cout]);
            let out: Vec<f64> = match branch {
                None => z.iter().map(|&v| act.apply(v)).collect(),
                Some(b) => z.iter().zip(&b.z).map(|(&v, &v0)| v * act.derivative(v0)).collect(),
            };
            if record {
                t.push(ConvTape { input: h, z, act });
            }
            out
        };

        let mut h: Vec<f64> = input.iter().map(|v| v / scale).collect();
        let mut skips = Vec::new();
        for l in 0..d.levels {
            if l > 0 {
                let g = if l == 1 { adj } else { &tape.graphs[l - 2] };
                let (off, c) = lay.pools[l - 1];
                let pooled = match frozen {
                    None => kmax_pool(&h, c, g, &p[off..off + c], d.pool_keep_fraction)?,
                    Some(f) => {
                        let ft = &f.pools[l - 1];
                        let (features, scores) = gate_rows(&h, c, &p[off..off + c], &ft.kept)?;
                        PoolOutput {
                            features,
                            adjacency: f.graphs[l - 1].clone(),
                            kept: ft.kept.clone(),
                            assignment: ft.assignment.clone(),
                            scores,
                        }
                    }
                };
                skips.push(std::mem::take(&mut h));
                h = pooled.features;
                tape.graphs.push(pooled.adjacency);
                tape.pools.push(PoolTape {
                    input: if record { skips.last().cloned().unwrap_or_default() } else { Vec::new() },
                    kept: pooled.kept,
                    assignment: pooled.assignment,
                    scores: pooled.scores,
                });
            }
            let g = if l == 0 { adj } else { &tape.graphs[l - 1] };
            let mut t = Vec::new();
            for (c, s) in lay.enc[l].iter().enumerate() {
                h = conv(h, s, g, Activation::LeakyRelu, &mut t, frozen.map(|f| &f.enc[l][c]));
            }
            tape.enc.push(t);
        }
        // the level-l encoder output was stashed in skips[l] when pooling to l + 1
        let mut dec_tapes: Vec<Vec<ConvTape>> = (0..d.levels.saturating_sub(1)).map(|_| Vec::new()).collect();
        for l in (0..d.levels.saturating_sub(1)).rev() {
            let g = if l == 0 { adj } else { &tape.graphs[l - 1] };
            let cu = d.channels[l + 1];
            let cs = d.channels[l];
            let pt = &tape.pools[l];
            let up = clone_cluster_unpool(&h, cu, g, &pt.kept, &pt.assignment)?;
            let skip = &skips[l];
            let n = g.node_count();
            let mut cat = Vec::with_capacity(n * (cu + cs));
            for v in 0..n {
                cat.extend_from_slice(&up[v * cu..(v + 1) * cu]);
                cat.extend_from_slice(&skip[v * cs..(v + 1) * cs]);
            }
            h = cat;
            for (c, s) in lay.dec[l].iter().enumerate() {
                h = conv(h, s, g, Activation::LeakyRelu, &mut dec_tapes[l], frozen.map(|f| &f.dec[l][c]));
            }
        }
        tape.dec = dec_tapes;
        let mut t = Vec::new();
        h = conv(h, &lay.out, adj, Activation::Identity, &mut t, frozen.and_then(|f| f.out.as_ref()));
        tape.out = t.pop();
        for v in &mut h {
            *v *= scale;
        }
        Ok((h, record.then_some(tape)))
    }

    /// Accumulates into `grad` the gradient of `<d_out, output>` and returns
    /// the gradient with respect to the input values.
    pub(crate) fn backward(&self, adj: &NormalizedAdjacency, tape: &Tape, d_out: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let d = &self.descriptor;
        let lay = &self.layout;
        let p = &self.params;
        let conv_back = |g_out: Vec<f64>, s: &ConvSlot, t: &ConvTape, a: &NormalizedAdjacency, grad: &mut [f64]| {
            let n = a.node_count();
            let dz: Vec<f64> = g_out.iter().zip(&t.z).map(|(g, &z)| g * t.act.derivative(z)).collect();
            let mut ag = vec![0.0; n * s.cout];
            a.multiply(&dz, s.cout, &mut ag);
            gemm_tn(&t.input, n, s.cin, &ag, s.cout, &mut grad[s.w..s.b]);
            for row in dz.chunks_exact(s.cout) {
                for (gb, v) in grad[s.b..s.b + s.cout].iter_mut().zip(row) {
                    *gb += v;
                }
            }
            let mut dx = vec![0.0; n * s.cin];
            gemm_nt(&ag, n, s.cout, &p[s.w..s.b], s.cin, &mut dx);
            dx
        };
        let graph = |l: usize| if l == 0 { adj } else { &tape.graphs[l - 1] };

        let out_tape = tape.out.as_ref().expect("tape records the output layer");
        let mut g: Vec<f64> = d_out.iter().map(|v| v * tape.scale).collect();
        g = conv_back(g, &lay.out, out_tape, adj, grad);

        let mut skip_grads: Vec<Vec<f64>> = Vec::new();
        for l in 0..d.levels.saturating_sub(1) {
            let a = graph(l);
            for (s, t) in lay.dec[l].iter().zip(&tape.dec[l]).rev() {
                g = conv_back(g, s, t, a, grad);
            }
            let cu = d.channels[l + 1];
            let cs = d.channels[l];
            let n = a.node_count();
            let mut g_up = Vec::with_capacity(n * cu);
            let mut g_skip = Vec::with_capacity(n * cs);
            for row in g.chunks_exact(cu + cs) {
                g_up.extend_from_slice(&row[..cu]);
                g_skip.extend_from_slice(&row[cu..]);
            }
            skip_grads.push(g_skip);
            g = unpool_backward(&g_up, cu, &tape.pools[l].assignment, tape.pools[l].kept.len());
        }

        for l in (0..d.levels).rev() {
            if l + 1 < d.levels {
                for (a, b) in g.iter_mut().zip(&skip_grads[l]) {
                    *a += b;
                }
            }
            let a = graph(l);
            for (s, t) in lay.enc[l].iter().zip(&tape.enc[l]).rev() {
                g = conv_back(g, s, t, a, grad);
            }
            if l > 0 {
                g = pool_backward(&tape.pools[l - 1], lay.pools[l - 1], p, &g, graph(l - 1).node_count(), grad);
            }
        }
        g.iter().map(|v| v / tape.scale).collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let blocks = self
            .blocks()
            .map(|(name, range, shape)| ParameterBlock {
                name: name.to_string(),
                shape: shape.to_vec(),
                data: self.params[range].to_vec(),
            })
            .collect();
        artifact::write_json(
            path,
            &ModelFile {
                version: FORMAT_VERSION,
                descriptor: self.descriptor.clone(),
                normalization: self.normalization,
                parameter_count: self.params.len(),
                blocks,
            },
        )
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f: ModelFile = artifact::read_json(path)?;
        artifact::check_version("model", f.version)?;
        f.descriptor.validate().map_err(|e| Error::corrupt(path, e))?;
        let layout = Layout::new(&f.descriptor);
        if f.parameter_count != layout.total {
            return Err(Error::corrupt(
                path,
                format!("{} parameters declared, descriptor implies {}", f.parameter_count, layout.total),
            ));
        }
        if f.blocks.len() != layout.blocks.len() {
            return Err(Error::corrupt(path, "parameter block count does not match the descriptor"));
        }
        let mut params = vec![0.0; layout.total];
        for (b, (name, off, shape)) in f.blocks.iter().zip(&layout.blocks) {
            let len: usize = shape.iter().product();
            if &b.name != name || &b.shape != shape || b.data.len() != len {
                return Err(Error::corrupt(path, format!("unexpected parameter block {}", b.name)));
            }
            if !b.data.iter().all(|v| v.is_finite()) {
                return Err(Error::corrupt(path, format!("non-finite values in block {name}")));
            }
            params[*off..off + len].copy_from_slice(&b.data);
        }
        Ok(Self {
            descriptor: f.descriptor,
            normalization: f.normalization,
            layout,
            params,
        })
    }
}

fn pool_backward(
    t: &PoolTape,
    (off, c): (usize, usize),
    params: &[f64],
    g_out: &[f64],
    n: usize,
    grad: &mut [f64],
) -> Vec<f64> {
    let p = &params[off..off + c];
    let pn = p.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut dx = vec![0.0; n * c];
    let mut dp = vec![0.0; c];
    for (i, &v) in t.kept.iter().enumerate() {
        let x = &t.input[v * c..(v + 1) * c];
        let go = &g_out[i * c..(i + 1) * c];
        let gate = t.scores[i].tanh();
        let s: f64 = go.iter().zip(x).map(|(a, b)| a * b).sum();
        let gy = s * (1.0 - gate * gate);
        let row = &mut dx[v * c..(v + 1) * c];
        for k in 0..c {
            row[k] += go[k] * gate + gy * p[k] / pn;
            dp[k] += gy * (x[k] / pn - t.scores[i] * p[k] / (pn * pn));
        }
    }
    for (a, b) in grad[off..off + c].iter_mut().zip(&dp) {
        *a += b;
    }
    dx
}

/// Runs the network on `signal`; the output lives on the same graph.
pub fn gunet_forward<'g>(model: &GUNetModel, signal: &GraphSignal<'g>) -> Result<GraphSignal<'g>> {
    let features = model.forward(signal)?;
    GraphSignal::new(features, 1, signal.adjacency)
}

pub fn save_model(model: &GUNetModel, path: impl AsRef<Path>) -> Result<()> {
    model.save(path)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<GUNetModel> {
    GUNetModel::load(path)
}
