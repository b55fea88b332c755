//! Noisy measurement pairs and on-disk datasets.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifact::{self, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::fem::{CemSystem, ContactImpedances, CurrentPatternSet, VoltageFrame};
use crate::field::ConductivityField;
use crate::mesh::{interpolate_field, Mesh};
use crate::phantom::{sample_phantom_pair, PhantomPair, PhantomRecipe};
use crate::recon::{LdParams, LdResult, LdSolver};

/// Relative noise level of the default data model (fraction of max |U|).
pub const DEFAULT_RELATIVE_NOISE: f64 = 0.00067;

/// Independent zero-mean Gaussian channel noise, `Gamma_e = std^2 I`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct NoiseModel {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub std_absolute: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub std_relative_to_max: Option<f64>,
    /// Skip the noise draw but keep the standard deviation for weighting.
    #[serde(default)]
    pub noiseless: bool,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self::relative(DEFAULT_RELATIVE_NOISE)
    }
}

impl NoiseModel {
    pub fn absolute(std: f64) -> Self {
        Self {
            std_absolute: Some(std),
            std_relative_to_max: None,
            noiseless: false,
        }
    }

    pub fn relative(fraction: f64) -> Self {
        Self {
            std_absolute: None,
            std_relative_to_max: Some(fraction),
            noiseless: false,
        }
    }

    pub fn without_noise(mut self) -> Self {
        self.noiseless = true;
        self
    }

    pub fn validate(&self) -> Result<()> {
        match (self.std_absolute, self.std_relative_to_max) {
            (Some(s), None) | (None, Some(s)) if s > 0.0 && s.is_finite() => Ok(()),
            _ => Err(Error::Contract(
                "noise model needs exactly one positive standard deviation".into(),
            )),
        }
    }

    /// Standard deviation for data whose noiseless maximum amplitude is `max_abs`.
    pub fn std_for(&self, max_abs: f64) -> f64 {
        match (self.std_absolute, self.std_relative_to_max) {
            (Some(s), _) => s,
            (None, Some(f)) => f * max_abs,
            (None, None) => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct MonitoringPair {
    pub v1: VoltageFrame,
    pub v2: VoltageFrame,
    pub noise_model: NoiseModel,
    /// Channel standard deviation (V) realized from the noise model.
    pub noise_std: f64,
}

impl MonitoringPair {
    /// Pair of frames without noise; `noise_std` is still used for weighting.
    pub fn from_frames(v1: VoltageFrame, v2: VoltageFrame, noise_std: f64) -> Result<Self> {
        if v1.pattern_set != v2.pattern_set || v1.mesh_id != v2.mesh_id {
            return Err(Error::Contract("frames differ in pattern set or mesh".into()));
        }
        Ok(Self {
            v1,
            v2,
            noise_model: NoiseModel::absolute(noise_std).without_noise(),
            noise_std,
        })
    }

    /// `V2 - V1`.
    pub fn difference(&self) -> Vec<f64> {
        self.v2.voltages.iter().zip(&self.v1.voltages).map(|(b, a)| b - a).collect()
    }
}

pub fn simulate_pair(
    pair: &PhantomPair,
    dense: &Mesh,
    z: &ContactImpedances,
    patterns: &CurrentPatternSet,
    noise: &NoiseModel,
    seed: u64,
) -> Result<MonitoringPair> {
    noise.validate()?;
    if pair.mesh_id != dense.id() {
        return Err(Error::Contract(format!(
            "phantom lives on mesh {} but simulation mesh is {}",
            pair.mesh_id,
            dense.id()
        )));
    }
    crate::fem::check_patterns(dense, patterns)?;
    let mut v1 = CemSystem::assemble(dense, &pair.sigma1, z)?.frame(patterns);
    let mut v2 = CemSystem::assemble(dense, &pair.sigma2, z)?.frame(patterns);
    let std = noise.std_for(v1.max_abs().max(v2.max_abs()));
    if !noise.noiseless {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // keep noise draws apart from the phantom stream of the same seed
        rng.set_stream(1);
        for frame in [&mut v1, &mut v2] {
            for v in frame.voltages.iter_mut() {
                let e: f64 = StandardNormal.sample(&mut rng);
                *v += std * e;
            }
        }
    }
    Ok(MonitoringPair {
        v1,
        v2,
        noise_model: noise.clone(),
        noise_std: std,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }

    pub fn split_of(&self, index: usize) -> Split {
        if index < self.train {
            Split::Train
        } else if index < self.train + self.val {
            Split::Val
        } else {
            Split::Test
        }
    }
}

/// Everything needed to regenerate a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DatasetSpec {
    pub splits: SplitCounts,
    pub recipe: PhantomRecipe,
    pub noise: NoiseModel,
    pub contact_impedance: f64,
    pub current_amplitude: f64,
    pub ld: LdParams,
    pub seed_base: u64,
    /// Keep LD solve times in the written files; off for byte-reproducible output.
    #[serde(default = "default_true")]
    pub record_timings: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SampleRecord {
    pub index: usize,
    pub split: Split,
    pub seed: u64,
    /// Channel noise std realized for this pair (V).
    pub noise_std: f64,
    pub phantom_file: String,
    pub voltage_files: [String; 2],
    pub ld_file: String,
    /// Change of conductivity interpolated to the reconstruction mesh.
    pub target_file: String,
    pub graph_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DatasetManifest {
    pub version: u32,
    pub dimension: usize,
    pub dense_mesh_id: String,
    pub coarse_mesh_id: String,
    pub mesh_files: [String; 2],
    pub splits: SplitCounts,
    pub sample_records: Vec<SampleRecord>,
}

/// Nodal target field stored next to the LD reconstruction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TargetFile {
    pub version: u32,
    pub mesh_id: String,
    pub delta: ConductivityField,
}

impl TargetFile {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let t: TargetFile = artifact::read_json(path)?;
        artifact::check_version("target", t.version)?;
        Ok(t)
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl DatasetManifest {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let m: DatasetManifest = artifact::read_json(dir.as_ref().join(MANIFEST_FILE))?;
        artifact::check_version("dataset manifest", m.version)?;
        Ok(m)
    }

    pub fn records(&self, split: Split) -> impl Iterator<Item = &SampleRecord> {
        self.sample_records.iter().filter(move |r| r.split == split)
    }

    /// Re-opens every referenced file, checking versions and sizes.
    pub fn verify(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let dense = Mesh::load(dir.join(&self.mesh_files[0]))?;
        let coarse = Mesh::load(dir.join(&self.mesh_files[1]))?;
        if dense.id() == coarse.id() {
            return Err(Error::corrupt(dir, "simulation and reconstruction meshes coincide"));
        }
        for r in &self.sample_records {
            let ph = PhantomPair::load(dir.join(&r.phantom_file))?;
            let v1 = VoltageFrame::load(dir.join(&r.voltage_files[0]))?;
            let v2 = VoltageFrame::load(dir.join(&r.voltage_files[1]))?;
            let ld = LdResult::load(dir.join(&r.ld_file))?;
            let t = TargetFile::load(dir.join(&r.target_file))?;
            let ok = ph.sigma1.len() == dense.node_count()
                && v1.voltages.len() == v2.voltages.len()
                && ld.delta.len() == coarse.node_count()
                && t.delta.len() == coarse.node_count()
                && r.graph_id == coarse.id();
            if !ok {
                return Err(Error::corrupt(dir.join(&r.ld_file), format!("sample {} is inconsistent", r.index)));
            }
        }
        Ok(())
    }
}

/// Simulates, reconstructs and writes `spec.splits.total()` samples under `out`.
///
/// Every sample uses seed `seed_base + index`, so the output does not depend
/// on the number of worker threads.
pub fn build_dataset(out: impl AsRef<Path>, spec: &DatasetSpec, dense: &Mesh, coarse: &Mesh) -> Result<DatasetManifest> {
    let out = out.as_ref();
    if dense.id() == coarse.id() {
        return Err(Error::Contract(
            "data must be simulated on a different mesh than the reconstruction mesh".into(),
        ));
    }
    if dense.dimension() != coarse.dimension() || dense.electrode_count() != coarse.electrode_count() {
        return Err(Error::Contract("dense and coarse meshes describe different setups".into()));
    }
    spec.noise.validate()?;
    let l = dense.electrode_count();
    let z = ContactImpedances::uniform(l, spec.contact_impedance);
    let patterns = default_patterns(dense.dimension(), l, spec.current_amplitude);
    let mesh_files = ["mesh_dense.json".to_string(), "mesh_coarse.json".to_string()];
    dense.save(out.join(&mesh_files[0]))?;
    coarse.save(out.join(&mesh_files[1]))?;
    let reg = spec.ld.regularizer(coarse)?;

    let records = (0..spec.splits.total())
        .into_par_iter()
        .map(|i| -> Result<SampleRecord> {
            let seed = spec.seed_base + i as u64;
            let phantom = sample_phantom_pair(seed, dense, &spec.recipe)?;
            let pair = simulate_pair(&phantom, dense, &z, &patterns, &spec.noise, seed)?;
            let solver = LdSolver::for_pair(&pair, coarse, &z, &patterns, &reg)?;
            let mut ld = solver.reconstruct(&pair)?;
            if !spec.record_timings {
                ld.solve_time_seconds = 0.0;
            }
            let target = interpolate_field(dense, &phantom.delta_true, coarse)?;

            let rel = |name: &str| format!("samples/{i:05}/{name}");
            let record = SampleRecord {
                index: i,
                split: spec.splits.split_of(i),
                seed,
                noise_std: pair.noise_std,
                phantom_file: rel("phantom.json"),
                voltage_files: [rel("v1.json"), rel("v2.json")],
                ld_file: rel("ld.json"),
                target_file: rel("target.json"),
                graph_id: coarse.id().to_string(),
            };
            phantom.save(out.join(&record.phantom_file))?;
            pair.v1.save(out.join(&record.voltage_files[0]))?;
            pair.v2.save(out.join(&record.voltage_files[1]))?;
            ld.save(out.join(&record.ld_file))?;
            artifact::write_json(
                out.join(&record.target_file),
                &TargetFile {
                    version: FORMAT_VERSION,
                    mesh_id: coarse.id().to_string(),
                    delta: target,
                },
            )?;
            Ok(record)
        })
        .collect::<Result<Vec<_>>>()?;

    let manifest = DatasetManifest {
        version: FORMAT_VERSION,
        dimension: dense.dimension(),
        dense_mesh_id: dense.id().to_string(),
        coarse_mesh_id: coarse.id().to_string(),
        mesh_files,
        splits: spec.splits.clone(),
        sample_records: records,
    };
    artifact::write_json(out.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// Adjacent drives in 2D, drives against the first electrode in 3D.
pub fn default_patterns(dimension: usize, electrode_count: usize, amplitude: f64) -> CurrentPatternSet {
    if dimension == 2 {
        CurrentPatternSet::adjacent(electrode_count, amplitude)
    } else {
        CurrentPatternSet::against_reference(electrode_count, 0, amplitude)
    }
}

/// Paths of a record's LD input and target, resolved against the dataset directory.
pub fn sample_paths(dir: &Path, r: &SampleRecord) -> (PathBuf, PathBuf) {
    (dir.join(&r.ld_file), dir.join(&r.target_file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::DEFAULT_CONTACT_IMPEDANCE;
    use crate::mesh::{generate_head_mesh, HeadGeometrySpec, MeshDensity};

    fn setup() -> (Mesh, ContactImpedances, CurrentPatternSet) {
        let m = generate_head_mesh(&HeadGeometrySpec::default_2d(), 2, MeshDensity::Coarse).unwrap();
        (m, ContactImpedances::uniform(16, DEFAULT_CONTACT_IMPEDANCE), CurrentPatternSet::adjacent(16, 1e-3))
    }

    #[test]
    fn identical_noiseless_frames_cancel() {
        let (m, z, p) = setup();
        let mut ph = sample_phantom_pair(4, &m, &PhantomRecipe::default()).unwrap();
        ph.sigma2 = ph.sigma1.clone();
        let pair = simulate_pair(&ph, &m, &z, &p, &NoiseModel::default().without_noise(), 1).unwrap();
        assert!(pair.difference().iter().all(|&d| d == 0.0));
        assert!(pair.noise_std > 0.0);
    }

    #[test]
    fn noise_is_seeded() {
        let (m, z, p) = setup();
        let ph = sample_phantom_pair(4, &m, &PhantomRecipe::default()).unwrap();
        let a = simulate_pair(&ph, &m, &z, &p, &NoiseModel::default(), 9).unwrap();
        let b = simulate_pair(&ph, &m, &z, &p, &NoiseModel::default(), 9).unwrap();
        let c = simulate_pair(&ph, &m, &z, &p, &NoiseModel::default(), 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.v1.voltages, c.v1.voltages);
    }

    #[test]
    fn noise_model_validation() {
        assert!(NoiseModel::default().validate().is_ok());
        assert!(NoiseModel::absolute(0.0).validate().is_err());
        let both = NoiseModel {
            std_absolute: Some(1.0),
            std_relative_to_max: Some(0.1),
            noiseless: false,
        };
        assert!(both.validate().is_err());
    }
}
