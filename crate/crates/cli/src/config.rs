//! Declarative pipeline configuration.
//!
//! One JSON file describes a whole run. Every key has a default, so `{}` is a
//! valid configuration. The output directory is not part of the hash: two
//! runs that differ only in where they write produce identical artifacts.

use std::path::{Path, PathBuf};

use eitmon_core::datagen::{NoiseModel, SplitCounts};
use eitmon_core::fem::{DEFAULT_CONTACT_IMPEDANCE, DEFAULT_CURRENT_AMPLITUDE};
use eitmon_core::gunet::{ArchitectureDescriptor, TrainConfig};
use eitmon_core::phantom::PhantomRecipe;
use eitmon_core::recon::{LdParams, MoParams};
use eitmon_core::{artifact, HeadGeometrySpec};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const CONFIG_VERSION: u32 = 1;

/// Concentric spherical growth between two diameters, in millimetres.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct GrowthCase {
    pub d1_mm: f64,
    pub d2_mm: f64,
}

impl GrowthCase {
    pub fn id(&self) -> String {
        format!("3d-{}-{}", self.d1_mm, self.d2_mm)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub version: u32,
    /// Master seed. Dataset sample `i` uses `seed * 1_000_000 + i`; the
    /// network is initialized from `seed`.
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    pub mesh_2d: HeadGeometrySpec,
    pub mesh_3d: HeadGeometrySpec,
    pub recipe: PhantomRecipe,
    pub noise: NoiseModel,
    pub contact_impedance: f64,
    pub current_amplitude: f64,
    pub splits: SplitCounts,
    pub ld: LdParams,
    pub mo: MoParams,
    /// MO runs on the first `mo_cases` test samples with a nonzero change.
    pub mo_cases: usize,
    pub architecture: ArchitectureDescriptor,
    pub train: TrainConfig,
    pub growth_suite: Vec<GrowthCase>,
    /// Centre of the spherical growth cases (m).
    pub growth_center: [f64; 3],
    /// Keep wall-clock times inside artifacts. Off by default so reruns are
    /// byte-identical; timings always go to the run log.
    pub embed_timings: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 1,
            out_dir: None,
            mesh_2d: HeadGeometrySpec::default_2d(),
            mesh_3d: HeadGeometrySpec::default_3d(),
            recipe: PhantomRecipe::default(),
            noise: NoiseModel::default(),
            contact_impedance: DEFAULT_CONTACT_IMPEDANCE,
            current_amplitude: DEFAULT_CURRENT_AMPLITUDE,
            splits: SplitCounts {
                train: 200,
                val: 40,
                test: 40,
            },
            ld: LdParams::default(),
            mo: MoParams::default(),
            mo_cases: 10,
            architecture: ArchitectureDescriptor::default(),
            train: TrainConfig::default(),
            growth_suite: [(15.0, 20.0), (20.0, 25.0), (25.0, 30.0), (20.0, 20.0)]
                .into_iter()
                .map(|(d1_mm, d2_mm)| GrowthCase { d1_mm, d2_mm })
                .collect(),
            growth_center: [0.03, 0.0, 0.01],
            embed_timings: false,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let c: Self = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("invalid config {}: {e}", path.display())))?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.version != CONFIG_VERSION {
            return bad(format!("config version {} is not supported", self.version));
        }
        if self.seed > u64::MAX / 1_000_000 - 1 {
            return bad(format!("seed {} is too large", self.seed));
        }
        self.mesh_2d.validate(2).map_err(CliError::Core)?;
        self.mesh_3d.validate(3).map_err(CliError::Core)?;
        self.noise.validate().map_err(CliError::Core)?;
        self.mo.validate().map_err(CliError::Core)?;
        self.architecture.validate().map_err(CliError::Core)?;
        self.train.validate().map_err(CliError::Core)?;
        if !(self.contact_impedance > 0.0 && self.current_amplitude > 0.0) {
            return bad("contact impedance and current amplitude must be positive".into());
        }
        if self.mo_cases > self.splits.test {
            return bad(format!("{} MO cases but only {} test samples", self.mo_cases, self.splits.test));
        }
        for g in &self.growth_suite {
            if !(g.d1_mm > 0.0 && g.d2_mm >= g.d1_mm) {
                return bad(format!("growth case {} -> {} mm is not a growth", g.d1_mm, g.d2_mm));
            }
        }
        Ok(())
    }

    pub fn data_seed_base(&self) -> u64 {
        self.seed * 1_000_000
    }

    /// Hash of everything that influences numerical results.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = None;
        artifact::hash_of(&c)
    }
}
