use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::train::branch_mse;
use super::*;
use crate::error::Error;
use crate::mesh::{extract_graph, generate_head_mesh, HeadGeometrySpec, MeshDensity, NormalizedAdjacency};

fn random_graph(n: usize, extra: usize, seed: u64) -> NormalizedAdjacency {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut e: Vec<(usize, usize)> = (1..n).map(|i| (rng.random_range(0..i), i)).collect();
    e.extend((0..extra).map(|_| (rng.random_range(0..n), rng.random_range(0..n))));
    NormalizedAdjacency::from_edges(n, &e)
}

fn random_values(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn small() -> ArchitectureDescriptor {
    ArchitectureDescriptor {
        levels: 3,
        convs_per_level: 2,
        channels: vec![6, 8, 10],
        pool_keep_fraction: 0.4,
    }
}

#[test]
fn default_parameter_count() {
    let d = ArchitectureDescriptor::default();
    assert_eq!(d.parameter_count(), 327_009);
    let m = GUNetModel::new(d, 1).unwrap();
    assert_eq!(m.parameter_count(), 327_009);
    let blocks: usize = m.blocks().map(|(_, r, _)| r.len()).sum();
    assert_eq!(blocks, 327_009);
}

#[test]
fn zero_output_projection_gives_zero() {
    let adj = random_graph(40, 30, 1);
    let mut m = GUNetModel::new(ArchitectureDescriptor::default(), 2).unwrap();
    m.zero_output_projection();
    let s = GraphSignal::new(random_values(40, 3), 1, &adj).unwrap();
    assert!(gunet_forward(&m, &s).unwrap().features.iter().all(|&v| v == 0.0));
}

#[test]
fn runs_on_2d_and_3d_mesh_graphs() {
    let m = GUNetModel::new(ArchitectureDescriptor::default(), 4).unwrap();
    for dim in [2, 3] {
        let spec = if dim == 2 { HeadGeometrySpec::default_2d() } else { HeadGeometrySpec::default_3d() };
        let mesh = generate_head_mesh(&spec, dim, MeshDensity::Coarse).unwrap();
        let g = extract_graph(&mesh);
        let s = GraphSignal::new(random_values(g.node_count, 5), 1, &g.adjacency).unwrap();
        let out = gunet_forward(&m, &s).unwrap();
        assert_eq!(out.features.len(), g.node_count);
        assert!(out.features.iter().all(|v| v.is_finite()));
    }
}

fn block_gradient_check(descriptor: ArchitectureDescriptor, n: usize, normalization: NormalizationMode) {
    let adj = random_graph(n, n / 2, 11);
    let mut model = GUNetModel::new(descriptor, 12).unwrap();
    model.normalization = normalization;
    // biases start at zero; move them off it so no block sits in a dead region
    let mut brng = ChaCha8Rng::seed_from_u64(16);
    let biases: Vec<_> = model.blocks().filter(|(n, _, _)| n.ends_with("bias")).map(|(_, r, _)| r).collect();
    for r in biases {
        for p in &mut model.parameters_mut()[r] {
            *p = brng.random_range(-0.1..0.1);
        }
    }
    let sample = TrainingSample {
        input: random_values(n, 13),
        target: random_values(n, 14).iter().map(|v| 0.3 * v).collect(),
    };
    let (_, grad) = loss_and_gradient(&model, &adj, &sample).unwrap();
    let blocks: Vec<(String, std::ops::Range<usize>)> =
        model.blocks().map(|(name, r, _)| (name.to_string(), r)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for (name, range) in blocks {
        let dir: Vec<f64> = range.clone().map(|_| rng.random_range(-1.0..1.0)).collect();
        let analytic: f64 = grad[range.clone()].iter().zip(&dir).map(|(a, b)| a * b).sum();
        // Fourth-order central stencil on the smooth branch through the base
        // point, so no step straddles an activation kink. Blocks differ in
        // curvature and gradient size, so the best of a few steps is used.
        // Deep blocks can have directional derivatives near 1e-10, below what
        // the stencil resolves, so the denominator is floored at 1e-9.
        let loss_at = |s: f64| {
            let mut m = model.clone();
            for (p, d) in m.parameters_mut()[range.clone()].iter_mut().zip(&dir) {
                *p += s * d;
            }
            branch_mse(&m, &model, &adj, &sample).unwrap()
        };
        let rel = [1e-2, 1e-3, 1e-4]
            .iter()
            .map(|&h| {
                let fd = (8.0 * (loss_at(h) - loss_at(-h)) - (loss_at(2.0 * h) - loss_at(-2.0 * h))) / (12.0 * h);
                (fd - analytic).abs() / analytic.abs().max(1e-9)
            })
            .fold(f64::INFINITY, f64::min);
        assert!(rel < 1e-5, "block {name}: analytic {analytic:e}, rel {rel:e}");
    }
}

#[test]
fn parameter_gradients_match_finite_differences() {
    block_gradient_check(small(), 30, NormalizationMode::Raw);
    block_gradient_check(small(), 30, NormalizationMode::PerSampleMaxAbs);
}

#[test]
fn default_network_gradients_match_finite_differences() {
    block_gradient_check(ArchitectureDescriptor::default(), 50, NormalizationMode::Raw);
}

#[test]
fn input_jacobian_matches_finite_differences() {
    let n = 30;
    let adj = random_graph(n, 20, 21);
    let model = GUNetModel::new(ArchitectureDescriptor::default(), 22).unwrap();
    let x = random_values(n, 23);
    let v = random_values(n, 24);
    let mut jv = vec![0.0; n];
    for (i, out) in jv.iter_mut().enumerate() {
        let mut e = vec![0.0; n];
        e[i] = 1.0;
        let row = input_vjp(&model, &adj, &x, &e).unwrap();
        *out = row.iter().zip(&v).map(|(a, b)| a * b).sum();
    }
    let eps = 1e-6;
    let eval = |s: f64| {
        let xs: Vec<f64> = x.iter().zip(&v).map(|(a, b)| a + s * b).collect();
        model.forward(&GraphSignal::new(xs, 1, &adj).unwrap()).unwrap()
    };
    let (up, dn) = (eval(eps), eval(-eps));
    let fd: Vec<f64> = up.iter().zip(&dn).map(|(a, b)| (a - b) / (2.0 * eps)).collect();
    let err = fd.iter().zip(&jv).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let nrm = jv.iter().map(|a| a * a).sum::<f64>().sqrt();
    assert!(err / nrm < 1e-5, "relative error {}", err / nrm);
}

#[test]
fn permutation_equivariance() {
    let n = 60;
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut edges: Vec<(usize, usize)> = (1..n).map(|i| (rng.random_range(0..i), i)).collect();
    edges.extend((0..40).map(|_| (rng.random_range(0..n), rng.random_range(0..n))));
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        perm.swap(i, rng.random_range(0..=i));
    }
    let adj = NormalizedAdjacency::from_edges(n, &edges);
    let pedges: Vec<(usize, usize)> = edges.iter().map(|&(a, b)| (perm[a], perm[b])).collect();
    let padj = NormalizedAdjacency::from_edges(n, &pedges);
    let x = random_values(n, 32);
    let mut px = vec![0.0; n];
    for i in 0..n {
        px[perm[i]] = x[i];
    }
    let model = GUNetModel::new(ArchitectureDescriptor::default(), 33).unwrap();
    let y = model.forward(&GraphSignal::new(x, 1, &adj).unwrap()).unwrap();
    let py = model.forward(&GraphSignal::new(px, 1, &padj).unwrap()).unwrap();
    for i in 0..n {
        assert!((py[perm[i]] - y[i]).abs() < 1e-12, "node {i}");
    }
}

#[test]
fn save_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    let mut m = GUNetModel::new(ArchitectureDescriptor::default(), 41).unwrap();
    m.normalization = NormalizationMode::PerSampleMaxAbs;
    save_model(&m, &path).unwrap();
    let back = load_model(&path).unwrap();
    assert_eq!(back, m);
    let adj = random_graph(50, 20, 42);
    let x = random_values(50, 43);
    let a = m.forward(&GraphSignal::new(x.clone(), 1, &adj).unwrap()).unwrap();
    let b = back.forward(&GraphSignal::new(x, 1, &adj).unwrap()).unwrap();
    assert!(a.iter().zip(&b).all(|(p, q)| p.to_bits() == q.to_bits()));

    let text = std::fs::read_to_string(&path).unwrap();
    let json: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(json["parameterCount"], 327_009);

    std::fs::write(&path, &text[..text.len() / 2]).unwrap();
    assert!(matches!(load_model(&path), Err(Error::Corrupt { .. })));
}

#[test]
fn zero_learning_rate_keeps_weights() {
    let adj = random_graph(24, 10, 51);
    let model = GUNetModel::new(small(), 52).unwrap();
    let set: Vec<TrainingSample> = (0..5)
        .map(|k| TrainingSample {
            input: random_values(24, 60 + k),
            target: random_values(24, 70 + k),
        })
        .collect();
    let cfg = TrainConfig {
        learning_rate: 0.0,
        max_epochs: 4,
        ..TrainConfig::default()
    };
    let (out, hist) = train(&model, &adj, &set[..3], &set[3..], &cfg).unwrap();
    assert_eq!(out, model);
    assert_eq!(hist.epochs.len(), 4);
    assert!(hist.epochs.iter().all(|e| e.val_mse == hist.initial_val_mse));
    assert!(hist.epochs.windows(2).all(|w| w[0].train_mse == w[1].train_mse));
    assert_eq!(hist.best_epoch, 0);
}

#[test]
fn single_sample_overfits() {
    let adj = random_graph(30, 15, 81);
    let d = ArchitectureDescriptor {
        levels: 3,
        convs_per_level: 2,
        channels: vec![16, 32, 32],
        pool_keep_fraction: 0.5,
    };
    let model = GUNetModel::new(d.clone(), 82).unwrap();
    // the target comes from a network of the same shape, so a perfect fit exists
    let teacher = GUNetModel::new(d, 7).unwrap();
    let input = random_values(30, 83);
    let target = teacher.forward(&GraphSignal::new(input.clone(), 1, &adj).unwrap()).unwrap();
    let sample = TrainingSample { input, target };
    let initial = sample_mse(&model, &adj, &sample).unwrap();
    let cfg = TrainConfig {
        max_epochs: 2000,
        patience_epochs: usize::MAX,
        ..TrainConfig::default()
    };
    let set = [sample];
    let (best, _) = train(&model, &adj, &set, &set, &cfg).unwrap();
    let fin = sample_mse(&best, &adj, &set[0]).unwrap();
    assert!(fin < 1e-3 * initial, "{fin:e} vs {initial:e}");
}

#[test]
fn returned_weights_are_best_seen() {
    let adj = random_graph(30, 15, 91);
    let model = GUNetModel::new(small(), 92).unwrap();
    let set: Vec<TrainingSample> = (0..6)
        .map(|k| TrainingSample {
            input: random_values(30, 100 + k),
            target: random_values(30, 110 + k),
        })
        .collect();
    let cfg = TrainConfig {
        learning_rate: 3e-2,
        max_epochs: 40,
        patience_epochs: 5,
        ..TrainConfig::default()
    };
    let (best, hist) = train(&model, &adj, &set[..4], &set[4..], &cfg).unwrap();
    let val: f64 = set[4..].iter().map(|s| sample_mse(&best, &adj, s).unwrap()).sum::<f64>() / 2.0;
    assert_eq!(val, hist.best_val_mse);
    for e in hist.epochs.iter().filter(|e| e.epoch > hist.best_epoch) {
        assert!(hist.best_val_mse <= e.val_mse);
    }
}

#[test]
fn empty_split_is_rejected() {
    let adj = random_graph(10, 3, 1);
    let model = GUNetModel::new(small(), 1).unwrap();
    let s = TrainingSample {
        input: vec![0.0; 10],
        target: vec![0.0; 10],
    };
    assert!(matches!(
        train(&model, &adj, &[], &[s], &TrainConfig::default()),
        Err(Error::Contract(_))
    ));
}

