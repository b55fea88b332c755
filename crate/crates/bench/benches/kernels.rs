use criterion::{criterion_group, criterion_main, Criterion};
use eitmon_bench::Fixture;
use eitmon_core::datagen::MonitoringPair;
use eitmon_core::fem::{compute_jacobian, solve_forward, CemSystem};
use eitmon_core::gunet::{ArchitectureDescriptor, GUNetModel, GraphSignal};
use eitmon_core::recon::{LdParams, LdSolver};
use eitmon_core::{extract_graph, ConductivityField, MeshDensity};

fn forward(c: &mut Criterion) {
    let mut g = c.benchmark_group("forward");
    g.sample_size(10);
    for (name, dim, density) in [
        ("2d-dense", 2, MeshDensity::Dense),
        ("3d-coarse", 3, MeshDensity::Coarse),
        ("3d-dense", 3, MeshDensity::Dense),
    ] {
        let f = Fixture::new(dim, density);
        g.bench_function(name, |b| b.iter(|| solve_forward(&f.mesh, &f.sigma, &f.z, &f.patterns).unwrap()));
    }
    g.finish();
}

fn jacobian(c: &mut Criterion) {
    let mut g = c.benchmark_group("jacobian");
    g.sample_size(10);
    for (name, dim) in [("2d-coarse", 2), ("3d-coarse", 3)] {
        let f = Fixture::new(dim, MeshDensity::Coarse);
        g.bench_function(name, |b| b.iter(|| compute_jacobian(&f.mesh, &f.sigma, &f.z, &f.patterns).unwrap()));
    }
    g.finish();
}

fn ld(c: &mut Criterion) {
    let mut g = c.benchmark_group("ld");
    g.sample_size(10);
    for (name, dim) in [("2d-coarse", 2), ("3d-coarse", 3)] {
        let f = Fixture::new(dim, MeshDensity::Coarse);
        let reg = LdParams::default().regularizer(&f.mesh).unwrap();
        let sigma0 = 0.2;
        let solver = LdSolver::prepare(&f.mesh, &f.z, &f.patterns, &reg, sigma0, 1e-6).unwrap();
        let sys = CemSystem::assemble(&f.mesh, &ConductivityField::constant(f.mesh.node_count(), sigma0), &f.z).unwrap();
        let v1 = sys.frame(&f.patterns);
        let pair = MonitoringPair::from_frames(v1.clone(), sys.frame(&f.patterns), 1e-6).unwrap();
        g.bench_function(format!("{name}/prepare"), |b| {
            b.iter(|| LdSolver::prepare(&f.mesh, &f.z, &f.patterns, &reg, sigma0, 1e-6).unwrap())
        });
        g.bench_function(format!("{name}/apply"), |b| b.iter(|| solver.reconstruct(&pair).unwrap()));
    }
    g.finish();
}

fn gunet(c: &mut Criterion) {
    let mut g = c.benchmark_group("gunet-forward");
    g.sample_size(20);
    let model = GUNetModel::new(ArchitectureDescriptor::default(), 1).unwrap();
    for (name, dim) in [("2d-coarse", 2), ("3d-coarse", 3)] {
        let f = Fixture::new(dim, MeshDensity::Coarse);
        let graph = extract_graph(&f.mesh);
        let x: Vec<f64> = f.mesh.nodes().iter().map(|p| p[0]).collect();
        g.bench_function(name, |b| {
            b.iter(|| model.forward(&GraphSignal::new(x.clone(), 1, &graph.adjacency).unwrap()).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, forward, jacobian, ld, gunet);
criterion_main!(benches);
