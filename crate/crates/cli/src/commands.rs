//! Pipeline stages. Artifacts live at fixed paths under the output directory
//! so every stage can find what the previous ones wrote.

use std::path::{Path, PathBuf};
use std::time::Instant;

use eitmon_core::artifact::{self, FORMAT_VERSION};
use eitmon_core::datagen::{
    build_dataset, default_patterns, simulate_pair, DatasetManifest, DatasetSpec, MonitoringPair, SampleRecord, Split,
    TargetFile,
};
use eitmon_core::fem::{ContactImpedances, VoltageFrame};
use eitmon_core::gunet::{self, load_model, save_model, GUNetModel, GraphSignal, TrainHistory, TrainingSample};
use eitmon_core::mesh::{interpolate_field, MeshDensity};
use eitmon_core::metrics::{csv_row, evaluate as evaluate_metrics, CSV_HEADER};
use eitmon_core::phantom::{layered_reference, spherical_growth_pair};
use eitmon_core::recon::{reconstruct_mo, LdResult, LdSolver, MoResult, RoiMap};
use eitmon_core::{extract_graph, generate_head_mesh, ConductivityField, Mesh};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::config::PipelineConfig;
use crate::image::render;
use crate::CliError;

type Result<T> = std::result::Result<T, CliError>;

/// Offset of the growth-suite noise seeds above the dataset seeds.
const SUITE_SEED_OFFSET: u64 = 900_000;

const MESHES: [(&str, usize, MeshDensity); 4] = [
    ("2d-dense", 2, MeshDensity::Dense),
    ("2d-coarse", 2, MeshDensity::Coarse),
    ("3d-dense", 3, MeshDensity::Dense),
    ("3d-coarse", 3, MeshDensity::Coarse),
];

pub struct Context {
    pub cfg: PipelineConfig,
    pub out: PathBuf,
    /// Per-stage details for the run log.
    pub details: Map<String, Value>,
}

impl Context {
    pub fn new(cfg: PipelineConfig, out: PathBuf) -> Self {
        Self {
            cfg,
            out,
            details: Map::new(),
        }
    }

    fn mesh_path(&self, name: &str) -> PathBuf {
        self.out.join("meshes").join(format!("{name}.json"))
    }

    fn mesh(&self, name: &str) -> Result<Mesh> {
        Ok(Mesh::load(self.mesh_path(name))?)
    }

    fn data_dir(&self) -> PathBuf {
        self.out.join("data2d")
    }

    fn suite_dir(&self, id: &str) -> PathBuf {
        self.out.join("suite3d").join(id)
    }

    fn model_path(&self) -> PathBuf {
        self.out.join("model").join("model.json")
    }

    fn mo_path(&self, case: &str) -> PathBuf {
        self.out.join("mo").join(format!("{case}.json"))
    }

    fn post_path(&self, case: &str) -> PathBuf {
        self.out.join("post").join(format!("{case}.json"))
    }

    fn setup(&self, mesh: &Mesh) -> (ContactImpedances, eitmon_core::fem::CurrentPatternSet) {
        let l = mesh.electrode_count();
        (
            ContactImpedances::uniform(l, self.cfg.contact_impedance),
            default_patterns(mesh.dimension(), l, self.cfg.current_amplitude),
        )
    }

    fn timing(&self, seconds: f64) -> f64 {
        if self.cfg.embed_timings {
            seconds
        } else {
            0.0
        }
    }

    fn record(&mut self, stage: &str, value: Value) {
        self.details.insert(stage.to_string(), value);
    }
}

fn case_id(r: &SampleRecord) -> String {
    format!("2d-{:05}", r.index)
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct PairFile {
    version: u32,
    #[serde(flatten)]
    pair: MonitoringPair,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct HistoryFile {
    version: u32,
    #[serde(flatten)]
    history: TrainHistory,
}

/// Network output on the mesh of its LD input.
#[derive(Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PostprocessFile {
    pub version: u32,
    pub mesh_id: String,
    pub delta: ConductivityField,
}

impl PostprocessFile {
    fn load(path: &Path) -> Result<Self> {
        let f: Self = artifact::read_json(path)?;
        artifact::check_version("post-processed image", f.version)?;
        Ok(f)
    }
}

pub fn gen_mesh(ctx: &mut Context) -> Result<()> {
    let mut info = Map::new();
    for (name, dim, density) in MESHES {
        let start = Instant::now();
        let spec = if dim == 2 { &ctx.cfg.mesh_2d } else { &ctx.cfg.mesh_3d };
        let mesh = generate_head_mesh(spec, dim, density)?;
        mesh.save(ctx.mesh_path(name))?;
        info.insert(
            name.into(),
            json!({
                "id": mesh.id(),
                "nodes": mesh.node_count(),
                "elements": mesh.element_count(),
                "seconds": start.elapsed().as_secs_f64(),
            }),
        );
    }
    ctx.record("gen-mesh", Value::Object(info));
    Ok(())
}

pub fn gen_data(ctx: &mut Context) -> Result<()> {
    let cfg = &ctx.cfg;
    let start = Instant::now();
    let spec = DatasetSpec {
        splits: cfg.splits.clone(),
        recipe: cfg.recipe.clone(),
        noise: cfg.noise.clone(),
        contact_impedance: cfg.contact_impedance,
        current_amplitude: cfg.current_amplitude,
        ld: cfg.ld.clone(),
        seed_base: cfg.data_seed_base(),
        record_timings: cfg.embed_timings,
    };
    if spec.splits.total() as u64 >= SUITE_SEED_OFFSET {
        return Err(CliError::Config(format!("at most {SUITE_SEED_OFFSET} dataset samples are supported")));
    }
    let manifest = build_dataset(ctx.data_dir(), &spec, &ctx.mesh("2d-dense")?, &ctx.mesh("2d-coarse")?)?;
    let data_seconds = start.elapsed().as_secs_f64();

    let start = Instant::now();
    let dense = ctx.mesh("3d-dense")?;
    let coarse = ctx.mesh("3d-coarse")?;
    let (z, patterns) = ctx.setup(&dense);
    let seed_base = cfg.data_seed_base() + SUITE_SEED_OFFSET;
    cfg.growth_suite
        .par_iter()
        .enumerate()
        .map(|(k, g)| -> Result<()> {
            let dir = ctx.suite_dir(&g.id());
            let phantom = spherical_growth_pair(&dense, g.d1_mm / 1e3, g.d2_mm / 1e3, cfg.growth_center)?;
            let pair = simulate_pair(&phantom, &dense, &z, &patterns, &cfg.noise, seed_base + k as u64)?;
            let target = interpolate_field(&dense, &phantom.delta_true, &coarse)?;
            phantom.save(dir.join("phantom.json"))?;
            artifact::write_json(
                dir.join("pair.json"),
                &PairFile {
                    version: FORMAT_VERSION,
                    pair,
                },
            )?;
            artifact::write_json(
                dir.join("target.json"),
                &TargetFile {
                    version: FORMAT_VERSION,
                    mesh_id: coarse.id().to_string(),
                    delta: target,
                },
            )?;
            Ok(())
        })
        .collect::<Result<Vec<()>>>()?;
    ctx.record(
        "gen-data",
        json!({
            "samples": manifest.sample_records.len(),
            "datasetSeconds": data_seconds,
            "suiteCases": cfg.growth_suite.len(),
            "suiteSeconds": start.elapsed().as_secs_f64(),
        }),
    );
    Ok(())
}

pub fn recon_ld(ctx: &mut Context) -> Result<()> {
    let coarse = ctx.mesh("3d-coarse")?;
    let (z, patterns) = ctx.setup(&coarse);
    let reg = ctx.cfg.ld.regularizer(&coarse)?;
    let times = ctx
        .cfg
        .growth_suite
        .par_iter()
        .map(|g| -> Result<(String, f64)> {
            let dir = ctx.suite_dir(&g.id());
            let f: PairFile = artifact::read_json(dir.join("pair.json"))?;
            artifact::check_version("monitoring pair", f.version)?;
            let start = Instant::now();
            let mut ld = LdSolver::for_pair(&f.pair, &coarse, &z, &patterns, &reg)?.reconstruct(&f.pair)?;
            let seconds = start.elapsed().as_secs_f64();
            ld.solve_time_seconds = ctx.timing(ld.solve_time_seconds);
            ld.save(dir.join("ld.json"))?;
            Ok((g.id(), seconds))
        })
        .collect::<Result<Vec<_>>>()?;
    let info: Map<String, Value> = times.into_iter().map(|(id, s)| (id, json!({ "seconds": s }))).collect();
    ctx.record("recon-ld", Value::Object(info));
    Ok(())
}

fn test_records(manifest: &DatasetManifest) -> Vec<&SampleRecord> {
    manifest.records(Split::Test).collect()
}

pub fn recon_mo(ctx: &mut Context) -> Result<()> {
    let dir = ctx.data_dir();
    let manifest = DatasetManifest::load(&dir)?;
    let coarse = Mesh::load(dir.join(&manifest.mesh_files[1]))?;
    let (z, patterns) = ctx.setup(&coarse);
    let roi = RoiMap::brain(&coarse)?;
    let kappa = layered_reference(&coarse, &ctx.cfg.recipe)?;
    // CoM is undefined without a change, so only growing cases are compared
    let mut records = Vec::new();
    for r in test_records(&manifest) {
        if records.len() == ctx.cfg.mo_cases {
            break;
        }
        if TargetFile::load(dir.join(&r.target_file))?.delta.max() > 0.0 {
            records.push(r);
        }
    }
    let runs = records
        .par_iter()
        .map(|r| -> Result<(String, Value)> {
            let v1 = VoltageFrame::load(dir.join(&r.voltage_files[0]))?;
            let v2 = VoltageFrame::load(dir.join(&r.voltage_files[1]))?;
            let pair = MonitoringPair::from_frames(v1, v2, r.noise_std)?;
            let mut mo = reconstruct_mo(&pair, &coarse, &z, &patterns, &roi, &kappa, &ctx.cfg.mo)?;
            let info = json!({
                "iterations": mo.iteration_count,
                "lineSearchFailed": mo.line_search_failed,
                "seconds": mo.solve_time_seconds,
            });
            mo.solve_time_seconds = ctx.timing(mo.solve_time_seconds);
            mo.save(ctx.mo_path(&case_id(r)))?;
            Ok((case_id(r), info))
        })
        .collect::<Result<Vec<_>>>()?;
    ctx.record("recon-mo", Value::Object(runs.into_iter().collect()));
    Ok(())
}

fn load_samples(dir: &Path, manifest: &DatasetManifest, split: Split) -> Result<Vec<TrainingSample>> {
    manifest
        .records(split)
        .map(|r| {
            Ok(TrainingSample {
                input: LdResult::load(dir.join(&r.ld_file))?.delta.into_inner(),
                target: TargetFile::load(dir.join(&r.target_file))?.delta.into_inner(),
            })
        })
        .collect()
}

pub fn train(ctx: &mut Context) -> Result<()> {
    let dir = ctx.data_dir();
    let manifest = DatasetManifest::load(&dir)?;
    let coarse = Mesh::load(dir.join(&manifest.mesh_files[1]))?;
    let graph = extract_graph(&coarse);
    let train_set = load_samples(&dir, &manifest, Split::Train)?;
    let val_set = load_samples(&dir, &manifest, Split::Val)?;
    let model = GUNetModel::new(ctx.cfg.architecture.clone(), ctx.cfg.seed)?;
    let (best, mut history) = gunet::train(&model, &graph.adjacency, &train_set, &val_set, &ctx.cfg.train)?;
    save_model(&best, ctx.model_path())?;
    let info = json!({
        "parameterCount": best.parameter_count(),
        "epochs": history.epochs.len(),
        "bestEpoch": history.best_epoch,
        "initialValMse": history.initial_val_mse,
        "bestValMse": history.best_val_mse,
        "stoppedEarly": history.stopped_early,
        "seconds": history.seconds,
    });
    history.seconds = ctx.timing(history.seconds);
    artifact::write_json(
        ctx.out.join("model").join("history.json"),
        &HistoryFile {
            version: FORMAT_VERSION,
            history,
        },
    )?;
    ctx.record("train", info);
    Ok(())
}

#[derive(clap::Args, Debug, Default)]
pub struct PostprocessArgs {
    /// Single LD file to post-process instead of the whole pipeline output.
    #[arg(long, requires_all = ["mesh", "output"])]
    pub input: Option<PathBuf>,
    /// Mesh of the single LD file.
    #[arg(long)]
    pub mesh: Option<PathBuf>,
    /// Model file; defaults to the one written by `train`.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Where to write the single output.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

fn apply(model: &GUNetModel, graph: &eitmon_core::Graph, ld: &LdResult, mesh: &Mesh) -> Result<PostprocessFile> {
    if ld.mesh_id != mesh.id() {
        return Err(CliError::Config(format!(
            "LD image lives on mesh {} but the graph comes from mesh {}",
            ld.mesh_id,
            mesh.id()
        )));
    }
    let out = model.forward(&GraphSignal::new(ld.delta.0.clone(), 1, &graph.adjacency)?)?;
    Ok(PostprocessFile {
        version: FORMAT_VERSION,
        mesh_id: mesh.id().to_string(),
        delta: ConductivityField(out),
    })
}

pub fn postprocess(ctx: &mut Context, args: &PostprocessArgs) -> Result<()> {
    let start = Instant::now();
    let model_path = args.model.clone().unwrap_or_else(|| ctx.model_path());
    let model = load_model(&model_path)?;
    if let Some(input) = &args.input {
        let (mesh_path, output) = args.mesh.as_ref().zip(args.output.as_ref()).expect("clap enforces both");
        let mesh = Mesh::load(mesh_path)?;
        let ld = LdResult::load(input)?;
        let graph = extract_graph(&mesh);
        let forward = Instant::now();
        let post = apply(&model, &graph, &ld, &mesh)?;
        let forward_seconds = forward.elapsed().as_secs_f64();
        artifact::write_json(output, &post)?;
        ctx.record(
            "postprocess",
            json!({
                "nodes": mesh.node_count(),
                "forwardSeconds": forward_seconds,
                "seconds": start.elapsed().as_secs_f64(),
            }),
        );
        return Ok(());
    }

    let dir = ctx.data_dir();
    let manifest = DatasetManifest::load(&dir)?;
    let coarse2 = Mesh::load(dir.join(&manifest.mesh_files[1]))?;
    let graph2 = extract_graph(&coarse2);
    let mut jobs: Vec<(String, PathBuf, bool)> =
        test_records(&manifest).into_iter().map(|r| (case_id(r), dir.join(&r.ld_file), false)).collect();
    let suite: Vec<_> = ctx.cfg.growth_suite.iter().map(|g| g.id()).collect();
    let coarse3 = if suite.is_empty() { None } else { Some(ctx.mesh("3d-coarse")?) };
    let graph3 = coarse3.as_ref().map(extract_graph);
    jobs.extend(suite.iter().map(|id| (id.clone(), ctx.suite_dir(id).join("ld.json"), true)));
    let times = jobs
        .par_iter()
        .map(|(id, ld_path, three_d)| -> Result<(String, Value)> {
            let ld = LdResult::load(ld_path)?;
            let (graph, mesh) = if *three_d {
                (graph3.as_ref().expect("3D cases need the 3D mesh"), coarse3.as_ref().expect("loaded above"))
            } else {
                (&graph2, &coarse2)
            };
            let t = Instant::now();
            let post = apply(&model, graph, &ld, mesh)?;
            let seconds = t.elapsed().as_secs_f64();
            artifact::write_json(ctx.post_path(id), &post)?;
            Ok((id.clone(), json!(seconds)))
        })
        .collect::<Result<Vec<_>>>()?;
    ctx.record(
        "postprocess",
        json!({ "forwardSeconds": Value::Object(times.into_iter().collect()), "seconds": start.elapsed().as_secs_f64() }),
    );
    Ok(())
}

/// One evaluated case: truth and whichever reconstructions exist.
struct Case {
    id: String,
    three_d: bool,
    truth: ConductivityField,
    recons: Vec<(&'static str, ConductivityField)>,
}

fn collect_cases(ctx: &Context) -> Result<(Vec<Case>, Mesh, Option<Mesh>)> {
    let dir = ctx.data_dir();
    let manifest = DatasetManifest::load(&dir)?;
    let coarse2 = Mesh::load(dir.join(&manifest.mesh_files[1]))?;
    let mut cases = Vec::new();
    let optional = |path: PathBuf, load: &dyn Fn(&Path) -> Result<ConductivityField>| -> Result<Option<ConductivityField>> {
        if path.exists() {
            load(&path).map(Some)
        } else {
            Ok(None)
        }
    };
    let post = |p: &Path| PostprocessFile::load(p).map(|f| f.delta);
    let mo = |p: &Path| Ok(MoResult::load(p)?.delta);
    for r in test_records(&manifest) {
        let id = case_id(r);
        let mut recons = vec![("ld", LdResult::load(dir.join(&r.ld_file))?.delta)];
        if let Some(f) = optional(ctx.post_path(&id), &post)? {
            recons.push(("gunet", f));
        }
        if let Some(f) = optional(ctx.mo_path(&id), &mo)? {
            recons.push(("mo", f));
        }
        cases.push(Case {
            id,
            three_d: false,
            truth: TargetFile::load(dir.join(&r.target_file))?.delta,
            recons,
        });
    }
    let coarse3 = if ctx.cfg.growth_suite.is_empty() { None } else { Some(ctx.mesh("3d-coarse")?) };
    for g in &ctx.cfg.growth_suite {
        let id = g.id();
        let sd = ctx.suite_dir(&id);
        let mut recons = vec![("ld", LdResult::load(sd.join("ld.json"))?.delta)];
        if let Some(f) = optional(ctx.post_path(&id), &post)? {
            recons.push(("gunet", f));
        }
        cases.push(Case {
            id,
            three_d: true,
            truth: TargetFile::load(sd.join("target.json"))?.delta,
            recons,
        });
    }
    Ok((cases, coarse2, coarse3))
}

fn metrics_csv(cases: &[Case], coarse2: &Mesh, coarse3: Option<&Mesh>) -> Result<String> {
    let rows = cases
        .par_iter()
        .map(|c| -> Result<Vec<String>> {
            let mesh = if c.three_d { coarse3.expect("3D cases need the 3D mesh") } else { coarse2 };
            c.recons
                .iter()
                .map(|(method, f)| Ok(csv_row(&c.id, method, &evaluate_metrics(f, &c.truth, mesh)?)))
                .collect()
        })
        .collect::<Result<Vec<_>>>()?;
    let mut csv = format!("{CSV_HEADER}\n");
    for row in rows.into_iter().flatten() {
        csv.push_str(&row);
        csv.push('\n');
    }
    Ok(csv)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn evaluate(ctx: &mut Context) -> Result<()> {
    let (cases, coarse2, coarse3) = collect_cases(ctx)?;
    let csv = metrics_csv(&cases, &coarse2, coarse3.as_ref())?;
    write_text(&ctx.out.join("metrics.csv"), &csv)?;
    ctx.record("evaluate", json!({ "cases": cases.len(), "rows": csv.lines().count() - 1 }));
    Ok(())
}

pub fn report(ctx: &mut Context) -> Result<()> {
    let (cases, coarse2, coarse3) = collect_cases(ctx)?;
    let dir = ctx.out.join("report");
    std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    let images = cases
        .par_iter()
        .map(|c| -> Result<usize> {
            let mesh = if c.three_d { coarse3.as_ref().expect("3D cases need the 3D mesh") } else { &coarse2 };
            // one scale per case so panels are comparable
            let limit = c.recons.iter().map(|(_, f)| f.max_abs()).fold(c.truth.max_abs(), f64::max);
            let panels = std::iter::once(("truth", &c.truth)).chain(c.recons.iter().map(|(m, f)| (*m, f)));
            let mut n = 0;
            for (method, field) in panels {
                render(mesh, field, limit).save(&dir.join(format!("{}_{method}.ppm", c.id)))?;
                n += 1;
            }
            Ok(n)
        })
        .collect::<Result<Vec<_>>>()?;
    let csv = metrics_csv(&cases, &coarse2, coarse3.as_ref())?;
    write_text(&dir.join("metrics.csv"), &csv)?;
    ctx.record("report", json!({ "cases": cases.len(), "images": images.iter().sum::<usize>() }));
    Ok(())
}

pub fn run_all(ctx: &mut Context) -> Result<()> {
    gen_mesh(ctx)?;
    gen_data(ctx)?;
    recon_ld(ctx)?;
    recon_mo(ctx)?;
    train(ctx)?;
    postprocess(ctx, &PostprocessArgs::default())?;
    evaluate(ctx)?;
    report(ctx)
}
