//! Randomized layered head phantoms with an initial and an expanded hemorrhage.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::artifact::{self, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::field::ConductivityField;
use crate::mesh::{norm, LayerTag, Mesh};

pub const SKIN_CONDUCTIVITY: f64 = 0.06948;
pub const SKULL_CONDUCTIVITY: f64 = 0.009;
pub const BRAIN_CONDUCTIVITY: f64 = 0.06948;
pub const HEMORRHAGE_CONDUCTIVITY: f64 = 0.312;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct PhantomRecipe {
    /// Initial hemorrhage radius range (m).
    pub radius_range: [f64; 2],
    /// Range of the expansion main-axis length, measured from the centre (m).
    pub axis_length_range: [f64; 2],
    /// When false the hemorrhage does not grow and the change is zero.
    pub expansion: bool,
    pub skin: f64,
    pub skull: f64,
    pub brain: f64,
    pub hemorrhage: f64,
    /// Relative tissue perturbation; factors are drawn from `1 +- perturbation`.
    pub perturbation: f64,
    pub max_tries: usize,
}

impl Default for PhantomRecipe {
    fn default() -> Self {
        Self {
            radius_range: [0.01, 0.0233],
            axis_length_range: [0.015, 0.0747],
            expansion: true,
            skin: SKIN_CONDUCTIVITY,
            skull: SKULL_CONDUCTIVITY,
            brain: BRAIN_CONDUCTIVITY,
            hemorrhage: HEMORRHAGE_CONDUCTIVITY,
            perturbation: 0.25,
            max_tries: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct HemorrhageDescriptor {
    pub center: [f64; 3],
    /// Radius of the initial bleed (m).
    pub radius: f64,
    /// Unit expansion direction.
    pub axis: [f64; 3],
    /// Main semi-axis of the half-ellipse(oid), from the centre (m).
    pub axis_length: f64,
    /// Radius of the expanded sphere for spherical growth cases (m).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expanded_radius: Option<f64>,
}

impl HemorrhageDescriptor {
    fn in_initial(&self, p: &[f64; 3]) -> bool {
        let d = sub(p, &self.center);
        norm(&d) <= self.radius
    }

    fn in_expanded(&self, p: &[f64; 3]) -> bool {
        if let Some(r2) = self.expanded_radius {
            return norm(&sub(p, &self.center)) <= r2;
        }
        if self.in_initial(p) {
            return true;
        }
        if self.axis_length <= 0.0 {
            return false;
        }
        let d = sub(p, &self.center);
        let along: f64 = (0..3).map(|i| d[i] * self.axis[i]).sum();
        if along < 0.0 {
            return false;
        }
        let perp2 = norm(&d).powi(2) - along * along;
        (along / self.axis_length).powi(2) + perp2.max(0.0) / self.radius.powi(2) <= 1.0
    }

    /// Largest distance from the origin reached by the expanded shape, with
    /// the half-ellipse(oid) boundary sampled densely.
    fn max_extent(&self, dimension: usize) -> f64 {
        if let Some(r2) = self.expanded_radius {
            return norm(&self.center) + r2;
        }
        let mut best = norm(&self.center) + self.radius;
        if self.axis_length <= 0.0 {
            return best;
        }
        let perps = perpendiculars(&self.axis, dimension);
        const THETA_STEPS: usize = 64;
        const PSI_STEPS: usize = 64;
        for t in 0..=THETA_STEPS {
            let theta = 0.5 * PI * t as f64 / THETA_STEPS as f64;
            let (ca, sr) = (self.axis_length * theta.cos(), self.radius * theta.sin());
            let psi_count = if dimension == 2 { 2 } else { PSI_STEPS };
            for k in 0..psi_count {
                let v = if dimension == 2 {
                    perps[0].map(|x| if k == 0 { x } else { -x })
                } else {
                    let psi = 2.0 * PI * k as f64 / PSI_STEPS as f64;
                    [0, 1, 2].map(|i| psi.cos() * perps[0][i] + psi.sin() * perps[1][i])
                };
                let q = [0, 1, 2].map(|i| self.center[i] + ca * self.axis[i] + sr * v[i]);
                best = best.max(norm(&q));
            }
        }
        best
    }
}

fn sub(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn perpendiculars(u: &[f64; 3], dimension: usize) -> [[f64; 3]; 2] {
    if dimension == 2 {
        return [[-u[1], u[0], 0.0], [0.0; 3]];
    }
    let helper = if u[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
    let dot: f64 = (0..3).map(|i| helper[i] * u[i]).sum();
    let mut v = [0, 1, 2].map(|i| helper[i] - dot * u[i]);
    let n = norm(&v);
    v.iter_mut().for_each(|x| *x /= n);
    let w = [
        u[1] * v[2] - u[2] * v[1],
        u[2] * v[0] - u[0] * v[2],
        u[0] * v[1] - u[1] * v[0],
    ];
    [v, w]
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomPair {
    pub mesh_id: String,
    pub sigma1: ConductivityField,
    pub sigma2: ConductivityField,
    pub delta_true: ConductivityField,
    pub descriptor: HemorrhageDescriptor,
    /// Multiplicative factors for skin, skull and brain.
    pub layer_perturbations: [f64; 3],
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct PhantomFile {
    version: u32,
    mesh_id: String,
    sigma1: ConductivityField,
    sigma2: ConductivityField,
    descriptor: HemorrhageDescriptor,
    layer_perturbations: [f64; 3],
}

impl PhantomPair {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        artifact::write_json(
            path,
            &PhantomFile {
                version: FORMAT_VERSION,
                mesh_id: self.mesh_id.clone(),
                sigma1: self.sigma1.clone(),
                sigma2: self.sigma2.clone(),
                descriptor: self.descriptor.clone(),
                layer_perturbations: self.layer_perturbations,
            },
        )
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f: PhantomFile = artifact::read_json(path)?;
        artifact::check_version("phantom", f.version)?;
        if f.sigma1.len() != f.sigma2.len() {
            return Err(Error::corrupt(path, "frames have different lengths"));
        }
        Ok(Self {
            mesh_id: f.mesh_id,
            delta_true: f.sigma2.difference(&f.sigma1),
            sigma1: f.sigma1,
            sigma2: f.sigma2,
            descriptor: f.descriptor,
            layer_perturbations: f.layer_perturbations,
        })
    }
}

/// Radii of the brain/skull and skull/skin interfaces recovered from the layer tags.
pub fn layer_radii(mesh: &Mesh) -> Result<(f64, f64)> {
    let max_radius = |tag: LayerTag| {
        (0..mesh.element_count())
            .filter(|&e| mesh.layer_tags()[e] == tag)
            .flat_map(|e| mesh.element(e).iter().map(|&n| norm(&mesh.node(n))))
            .fold(f64::NEG_INFINITY, f64::max)
    };
    let brain = max_radius(LayerTag::Brain);
    let skull = max_radius(LayerTag::Skull);
    if !brain.is_finite() {
        return Err(Error::Contract("mesh has no brain elements".into()));
    }
    Ok((brain, if skull.is_finite() { skull } else { brain }))
}

/// Layer of a node; nodes on an interface belong to the outer layer.
fn node_layers(mesh: &Mesh) -> Result<Vec<LayerTag>> {
    let (rb, rs) = layer_radii(mesh)?;
    let eps = 1e-9 * rs;
    Ok(mesh
        .nodes()
        .iter()
        .map(|p| {
            let r = norm(p);
            if r < rb - eps {
                LayerTag::Brain
            } else if r < rs - eps {
                LayerTag::Skull
            } else {
                LayerTag::Skin
            }
        })
        .collect())
}

/// Nominal layered conductivity without any bleed, used as the structural
/// reference image for weighted regularization.
pub fn layered_reference(mesh: &Mesh, recipe: &PhantomRecipe) -> Result<ConductivityField> {
    Ok(ConductivityField(
        node_layers(mesh)?
            .iter()
            .map(|t| match t {
                LayerTag::Skin | LayerTag::None => recipe.skin,
                LayerTag::Skull => recipe.skull,
                LayerTag::Brain => recipe.brain,
            })
            .collect(),
    ))
}

fn build_pair(
    mesh: &Mesh,
    recipe: &PhantomRecipe,
    factors: [f64; 3],
    descriptor: HemorrhageDescriptor,
) -> Result<PhantomPair> {
    let layers = node_layers(mesh)?;
    let base: Vec<f64> = layers
        .iter()
        .map(|t| match t {
            LayerTag::Skin | LayerTag::None => recipe.skin * factors[0],
            LayerTag::Skull => recipe.skull * factors[1],
            LayerTag::Brain => recipe.brain * factors[2],
        })
        .collect();
    let mut s1 = base.clone();
    let mut s2 = base;
    for (i, p) in mesh.nodes().iter().enumerate() {
        if layers[i] != LayerTag::Brain {
            continue;
        }
        if descriptor.in_initial(p) {
            s1[i] = recipe.hemorrhage;
        }
        if descriptor.in_expanded(p) {
            s2[i] = recipe.hemorrhage;
        }
    }
    let sigma1 = ConductivityField(s1);
    let sigma2 = ConductivityField(s2);
    Ok(PhantomPair {
        mesh_id: mesh.id().to_string(),
        delta_true: sigma2.difference(&sigma1),
        sigma1,
        sigma2,
        descriptor,
        layer_perturbations: factors,
    })
}

fn unit_direction(rng: &mut ChaCha8Rng, dimension: usize) -> [f64; 3] {
    loop {
        let mut v = [0.0; 3];
        for x in v.iter_mut().take(dimension) {
            *x = rng.random_range(-1.0..1.0);
        }
        let n = norm(&v);
        if n > 1e-3 && n <= 1.0 {
            return v.map(|x| x / n);
        }
    }
}

pub fn sample_phantom_pair(seed: u64, mesh: &Mesh, recipe: &PhantomRecipe) -> Result<PhantomPair> {
    let d = mesh.dimension();
    let (rb, _) = layer_radii(mesh)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = recipe.perturbation;
    let mut factor = || if p > 0.0 { rng.random_range(1.0 - p..=1.0 + p) } else { 1.0 };
    let factors = [factor(), factor(), factor()];

    for _ in 0..recipe.max_tries {
        let radius = rng.random_range(recipe.radius_range[0]..=recipe.radius_range[1]);
        let center = unit_direction(&mut rng, d).map(|x| x * rb * rng.random::<f64>().powf(1.0 / d as f64));
        let axis = unit_direction(&mut rng, d);
        let len = rng.random_range(recipe.axis_length_range[0]..=recipe.axis_length_range[1]);
        let descriptor = HemorrhageDescriptor {
            center,
            radius,
            axis,
            axis_length: if recipe.expansion { len } else { 0.0 },
            expanded_radius: None,
        };
        if descriptor.max_extent(d) <= rb {
            return build_pair(mesh, recipe, factors, descriptor);
        }
    }
    Err(Error::RecipeInfeasible {
        tries: recipe.max_tries,
    })
}

/// Concentric spherical bleed growing from diameter `d1` to `d2` (m), nominal tissue values.
pub fn spherical_growth_pair(mesh: &Mesh, d1: f64, d2: f64, center: [f64; 3]) -> Result<PhantomPair> {
    if !(d1 > 0.0 && d2 >= d1) {
        return Err(Error::Contract(format!("diameters must satisfy 0 < d1 <= d2, got {d1} and {d2}")));
    }
    let (rb, _) = layer_radii(mesh)?;
    let descriptor = HemorrhageDescriptor {
        center,
        radius: d1 / 2.0,
        axis: [0.0; 3],
        axis_length: 0.0,
        expanded_radius: Some(d2 / 2.0),
    };
    if descriptor.max_extent(mesh.dimension()) > rb {
        return Err(Error::Containment(format!(
            "sphere of diameter {d2} m at {center:?} leaves the brain of radius {rb:.4} m"
        )));
    }
    build_pair(mesh, &PhantomRecipe::default(), [1.0; 3], descriptor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{generate_head_mesh, HeadGeometrySpec, MeshDensity};

    fn disk() -> Mesh {
        generate_head_mesh(&HeadGeometrySpec::default_2d(), 2, MeshDensity::Coarse).unwrap()
    }

    #[test]
    fn values_come_from_the_recipe() {
        let m = disk();
        let recipe = PhantomRecipe::default();
        for seed in 0..20 {
            let ph = sample_phantom_pair(seed, &m, &recipe).unwrap();
            let f = ph.layer_perturbations;
            let allowed = [recipe.skin * f[0], recipe.skull * f[1], recipe.brain * f[2], recipe.hemorrhage];
            for s in ph.sigma1.iter().chain(ph.sigma2.iter()) {
                assert!(allowed.contains(s), "{s}");
            }
            assert!(ph.delta_true.iter().all(|&d| d >= 0.0));
            assert!(f.iter().all(|&x| (0.75..=1.25).contains(&x)));
        }
    }

    #[test]
    fn deterministic_and_no_growth_toggle() {
        let m = disk();
        let a = sample_phantom_pair(7, &m, &PhantomRecipe::default()).unwrap();
        let b = sample_phantom_pair(7, &m, &PhantomRecipe::default()).unwrap();
        assert_eq!(a, b);
        let still = PhantomRecipe {
            expansion: false,
            ..Default::default()
        };
        let c = sample_phantom_pair(7, &m, &still).unwrap();
        assert!(c.delta_true.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn centres_contained() {
        let m = disk();
        let (rb, _) = layer_radii(&m).unwrap();
        for seed in 0..1000 {
            let ph = sample_phantom_pair(seed, &m, &PhantomRecipe::default()).unwrap();
            let d = &ph.descriptor;
            assert!(norm(&d.center) < rb - d.radius + 1e-15);
        }
    }

    #[test]
    fn infeasible_recipe_is_reported() {
        let m = disk();
        let r = PhantomRecipe {
            radius_range: [0.2, 0.3],
            max_tries: 10,
            ..Default::default()
        };
        assert!(matches!(
            sample_phantom_pair(1, &m, &r),
            Err(Error::RecipeInfeasible { tries: 10 })
        ));
    }

    #[test]
    fn spherical_growth_cases() {
        let m = disk();
        let same = spherical_growth_pair(&m, 0.02, 0.02, [0.03, 0.0, 0.0]).unwrap();
        assert!(same.delta_true.iter().all(|&d| d == 0.0));
        let grow = spherical_growth_pair(&m, 0.015, 0.02, [0.03, 0.0, 0.0]).unwrap();
        assert!(grow.delta_true.iter().any(|&d| d > 0.0));
        assert!(matches!(
            spherical_growth_pair(&m, 0.02, 0.03, [0.07, 0.0, 0.0]),
            Err(Error::Containment(_))
        ));
    }

    #[test]
    fn file_round_trip() {
        let m = disk();
        let ph = sample_phantom_pair(3, &m, &PhantomRecipe::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ph.json");
        ph.save(&p).unwrap();
        assert_eq!(PhantomPair::load(&p).unwrap(), ph);
    }
}
