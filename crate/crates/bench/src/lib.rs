//! Shared fixtures for the benchmarks: the default head meshes with their
//! electrode setup and a background conductivity.

use eitmon_core::datagen::default_patterns;
use eitmon_core::fem::{ContactImpedances, CurrentPatternSet, DEFAULT_CONTACT_IMPEDANCE, DEFAULT_CURRENT_AMPLITUDE};
use eitmon_core::phantom::{layered_reference, PhantomRecipe};
use eitmon_core::{generate_head_mesh, ConductivityField, HeadGeometrySpec, Mesh, MeshDensity};

pub struct Fixture {
    pub mesh: Mesh,
    pub sigma: ConductivityField,
    pub z: ContactImpedances,
    pub patterns: CurrentPatternSet,
}

impl Fixture {
    pub fn new(dimension: usize, density: MeshDensity) -> Self {
        let spec = if dimension == 2 { HeadGeometrySpec::default_2d() } else { HeadGeometrySpec::default_3d() };
        let mesh = generate_head_mesh(&spec, dimension, density).expect("default geometry meshes");
        let sigma = layered_reference(&mesh, &PhantomRecipe::default()).expect("layers are tagged");
        let z = ContactImpedances::uniform(mesh.electrode_count(), DEFAULT_CONTACT_IMPEDANCE);
        let patterns = default_patterns(dimension, mesh.electrode_count(), DEFAULT_CURRENT_AMPLITUDE);
        Self { mesh, sigma, z, patterns }
    }
}
