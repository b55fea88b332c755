//! Dataset generation and a short training run on it.

use eitmon_core::datagen::{build_dataset, DatasetManifest, DatasetSpec, NoiseModel, Split, SplitCounts, TargetFile};
use eitmon_core::fem::{DEFAULT_CONTACT_IMPEDANCE, DEFAULT_CURRENT_AMPLITUDE};
use eitmon_core::gunet::{train, ArchitectureDescriptor, GUNetModel, TrainConfig, TrainingSample};
use eitmon_core::phantom::PhantomRecipe;
use eitmon_core::recon::{LdParams, LdResult};
use eitmon_core::{extract_graph, generate_head_mesh, HeadGeometrySpec, Mesh, MeshDensity};

fn spec(train: usize, val: usize, test: usize) -> DatasetSpec {
    DatasetSpec {
        splits: SplitCounts { train, val, test },
        recipe: PhantomRecipe::default(),
        noise: NoiseModel::default(),
        contact_impedance: DEFAULT_CONTACT_IMPEDANCE,
        current_amplitude: DEFAULT_CURRENT_AMPLITUDE,
        ld: LdParams::default(),
        seed_base: 77_000,
        record_timings: false,
    }
}

fn meshes() -> (Mesh, Mesh) {
    let s = HeadGeometrySpec::default_2d();
    (
        generate_head_mesh(&s, 2, MeshDensity::Dense).unwrap(),
        generate_head_mesh(&s, 2, MeshDensity::Coarse).unwrap(),
    )
}

fn tree(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn datasets_are_reproducible_and_self_consistent() {
    let (dense, coarse) = meshes();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let sp = spec(3, 1, 2);
    let m = build_dataset(a.path(), &sp, &dense, &coarse).unwrap();
    build_dataset(b.path(), &sp, &dense, &coarse).unwrap();
    assert_eq!(tree(a.path()), tree(b.path()));

    let loaded = DatasetManifest::load(a.path()).unwrap();
    assert_eq!(loaded, m);
    loaded.verify(a.path()).unwrap();
    assert_eq!(loaded.records(Split::Train).count(), 3);
    assert_eq!(loaded.records(Split::Val).count(), 1);
    assert_eq!(loaded.records(Split::Test).count(), 2);
    let seeds: std::collections::HashSet<u64> = loaded.sample_records.iter().map(|r| r.seed).collect();
    assert_eq!(seeds.len(), 6);
    for r in &loaded.sample_records {
        assert!(r.noise_std > 0.0);
        let ld = LdResult::load(a.path().join(&r.ld_file)).unwrap();
        let t = TargetFile::load(a.path().join(&r.target_file)).unwrap();
        assert_eq!(ld.mesh_id, coarse.id());
        assert_eq!(ld.delta.len(), coarse.node_count());
        assert_eq!(t.delta.len(), coarse.node_count());
        assert_eq!(ld.solve_time_seconds, 0.0);
    }
}

#[test]
fn truncated_files_fail_verification() {
    let (dense, coarse) = meshes();
    let dir = tempfile::tempdir().unwrap();
    let m = build_dataset(dir.path(), &spec(1, 1, 1), &dense, &coarse).unwrap();
    let path = dir.path().join(&m.sample_records[0].ld_file);
    let text = std::fs::read_to_string(&path).unwrap();
    std::fs::write(&path, &text[..text.len() / 2]).unwrap();
    assert!(m.verify(dir.path()).is_err());
}

#[test]
fn short_training_lowers_validation_error() {
    let (dense, coarse) = meshes();
    let dir = tempfile::tempdir().unwrap();
    let m = build_dataset(dir.path(), &spec(8, 3, 0), &dense, &coarse).unwrap();
    let load = |split| -> Vec<TrainingSample> {
        m.records(split)
            .map(|r| TrainingSample {
                input: LdResult::load(dir.path().join(&r.ld_file)).unwrap().delta.into_inner(),
                target: TargetFile::load(dir.path().join(&r.target_file)).unwrap().delta.into_inner(),
            })
            .collect()
    };
    let (tr, va) = (load(Split::Train), load(Split::Val));
    let graph = extract_graph(&coarse);
    let arch = ArchitectureDescriptor {
        levels: 2,
        convs_per_level: 2,
        channels: vec![8, 16],
        pool_keep_fraction: 0.25,
    };
    let model = GUNetModel::new(arch, 3).unwrap();
    let cfg = TrainConfig { max_epochs: 30, ..TrainConfig::default() };
    let (best, hist) = train(&model, &graph.adjacency, &tr, &va, &cfg).unwrap();
    assert!(hist.best_val_mse < hist.initial_val_mse, "{hist:?}");
    assert!(hist.best_epoch > 0);
    assert_eq!(best.parameter_count(), model.parameter_count());
    assert!(hist.epochs.iter().all(|e| e.train_mse.is_finite() && e.val_mse.is_finite()));
}
