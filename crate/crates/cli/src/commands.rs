//! One function per subcommand. Stages communicate only through files.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use birdplan_core::config::PipelineConfig;
use birdplan_core::decomposition::Partition;
use birdplan_core::fixture::{Fixture, FixtureSpec};
use birdplan_core::ground::{fit_plane, FootprintIndex};
use birdplan_core::orchestration::{
    build_training_jobs, render, run_jobs, EngineKind, ExternalRenderer, ExternalTrainer, JobStatus, Manifest,
    ManifestWriter, RenderEngine, RenderRequest, RunOptions, SyntheticEngine, SyntheticTrainer, Trainer,
    TrainingConfig,
};
use birdplan_core::raster::RasterImage;
use birdplan_core::registration::{register_query, IndexedSubScene, PlanMode, PlanSet, QuerySet, UnplannedQuery};
use birdplan_core::sparse_io::{load_reconstruction, Reconstruction};
use birdplan_core::stitching::{compute_psnr, compute_ssim, stitch, StitchReport};
use birdplan_core::{read_json, write_json, SCHEMA_VERSION};
use serde::{Deserialize, Serialize};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const RENDERS_FILE: &str = "renders.json";
pub const STITCH_REPORT_FILE: &str = "stitch_report.json";

/// Wall time per named phase, printed to stderr when the stage ends.
pub struct Timings {
    stage: &'static str,
    start: Instant,
    last: Instant,
    phases: Vec<(&'static str, f64)>,
}

impl Timings {
    pub fn new(stage: &'static str) -> Self {
        let now = Instant::now();
        Self {
            stage,
            start: now,
            last: now,
            phases: Vec::new(),
        }
    }

    pub fn mark(&mut self, phase: &'static str) {
        let now = Instant::now();
        self.phases.push((phase, (now - self.last).as_secs_f64()));
        self.last = now;
    }

    pub fn report(&self) {
        for (phase, secs) in &self.phases {
            eprintln!("[timing] {}/{phase}: {secs:.3}s", self.stage);
        }
        eprintln!("[timing] {} total: {:.3}s", self.stage, self.start.elapsed().as_secs_f64());
    }
}

fn check_hash(kind: &str, path: &Path, found: &str, expected: &str) -> Result<()> {
    if found != expected {
        bail!(
            "StaleArtifact: {kind} {} was written with config {found:.12}, current config is {expected:.12}; rerun the stage that produced it",
            path.display()
        );
    }
    Ok(())
}

fn load_recon(dir: &Path) -> Result<Reconstruction> {
    load_reconstruction(dir).with_context(|| format!("loading reconstruction from {}", dir.display()))
}

fn load_partition(path: &Path, hash: &str) -> Result<Partition> {
    let p = Partition::load(path).with_context(|| format!("loading partition {}", path.display()))?;
    check_hash("partition", path, &p.config_hash, hash)?;
    Ok(p)
}

fn load_index(path: &Path, hash: &str) -> Result<FootprintIndex> {
    let index = FootprintIndex::load(path).with_context(|| format!("loading index {}", path.display()))?;
    check_hash("index", path, &index.config_hash, hash)?;
    Ok(index)
}

fn load_plans(path: &Path, hash: &str) -> Result<PlanSet> {
    let plans = PlanSet::load(path).with_context(|| format!("loading plans {}", path.display()))?;
    check_hash("plans", path, &plans.config_hash, hash)?;
    Ok(plans)
}

fn load_queries(path: &Path) -> Result<QuerySet> {
    QuerySet::load(path).with_context(|| format!("loading queries {}", path.display()))
}

/// File name of a query's stitched output.
fn output_name(query: &str) -> PathBuf {
    let p = PathBuf::from(query);
    if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
        p
    } else {
        p.with_extension("png")
    }
}

pub fn decompose(config: &PipelineConfig, recon_dir: &Path, out: &Path) -> Result<()> {
    let mut t = Timings::new("decompose");
    let recon = load_recon(recon_dir)?;
    t.mark("load");
    let partition = birdplan_core::decomposition::decompose(&recon, &config.decomposition(), &config.config_hash())?;
    t.mark("cluster");
    partition.save(out)?;
    t.mark("write");

    let n = recon.views.len();
    let memberships: usize = partition.subscenes.iter().map(|s| s.member_image_ids.len()).sum();
    println!("K = {} sub-scenes over {n} views", partition.subscenes.len());
    for s in &partition.subscenes {
        println!(
            "  sub-scene {:>3}: {:>4} views, radius {:.3} -> {:.3}",
            s.id,
            s.member_image_ids.len(),
            s.base_radius,
            s.expanded_radius
        );
    }
    println!(
        "overlap: {} views shared by more than one sub-scene, {:.3} memberships per view",
        partition.shared_camera_count(),
        memberships as f64 / n as f64
    );
    t.report();
    Ok(())
}

pub fn index(config: &PipelineConfig, recon_dir: &Path, partition: &Path, out: &Path) -> Result<()> {
    let mut t = Timings::new("index");
    let hash = config.config_hash();
    let recon = load_recon(recon_dir)?;
    let partition = load_partition(partition, &hash)?;
    t.mark("load");
    let plane = fit_plane(&recon.cloud, config.trim_fraction)?;
    t.mark("fit_plane");
    let index = FootprintIndex::build(&recon, &partition.subscenes, plane, &hash)?;
    t.mark("footprints");
    index.save(out)?;
    t.mark("write");

    let n = index.plane.normal;
    println!("ground plane: normal ({:.6}, {:.6}, {:.6}), offset {:.6}", n.x, n.y, n.z, index.plane.offset);
    for (id, r) in index.subscene_footprints() {
        println!(
            "  sub-scene {id:>3}: u [{:.3}, {:.3}] v [{:.3}, {:.3}]",
            r.min_u, r.max_u, r.min_v, r.max_v
        );
    }
    t.report();
    Ok(())
}

pub fn plan(config: &PipelineConfig, index: &Path, queries: &Path, out: &Path) -> Result<()> {
    let mut t = Timings::new("plan");
    let hash = config.config_hash();
    let index = load_index(index, &hash)?;
    let queries = load_queries(queries)?;
    t.mark("load");
    let indexed = IndexedSubScene::from_index(&index);
    let mut plans = Vec::new();
    let mut unplanned = Vec::new();
    for q in &queries.queries {
        let Some(pose) = q.pose() else {
            unplanned.push(UnplannedQuery {
                query_image_id: q.name.clone(),
                reason: "invalid pose".into(),
            });
            continue;
        };
        match register_query(&q.name, &q.intrinsics, &pose, &index.plane, &indexed) {
            Ok(p) => plans.push(p),
            Err(e) => unplanned.push(UnplannedQuery {
                query_image_id: q.name.clone(),
                reason: e.to_string(),
            }),
        }
    }
    t.mark("register");
    let set = PlanSet {
        schema_version: SCHEMA_VERSION,
        config_hash: hash,
        plans,
        unplanned,
    };
    set.save(out)?;
    t.mark("write");

    let free = set.plans.iter().filter(|p| p.mode == PlanMode::StitchFree).count();
    println!(
        "{} queries: {free} stitch-free, {} stitch-required, {} unplanned",
        queries.queries.len(),
        set.plans.len() - free,
        set.unplanned.len()
    );
    for u in &set.unplanned {
        println!("  unplanned {}: {}", u.query_image_id, u.reason);
    }
    t.report();
    Ok(())
}

pub struct TrainArgs<'a> {
    pub recon_dir: &'a Path,
    pub partition: &'a Path,
    pub index: &'a Path,
    pub out: &'a Path,
    pub scene: Option<&'a Path>,
    pub images: Option<&'a Path>,
}

pub fn train(config: &PipelineConfig, args: &TrainArgs<'_>) -> Result<()> {
    let mut t = Timings::new("train");
    let hash = config.config_hash();
    let recon = load_recon(args.recon_dir)?;
    let partition = load_partition(args.partition, &hash)?;
    let index = load_index(args.index, &hash)?;
    t.mark("load");

    let training = TrainingConfig {
        iterations: config.iterations,
        engine: config.engine,
        artifact_dir: args.out.join("models"),
    };
    let jobs = build_training_jobs(&recon, &partition.subscenes, &index.subscene_footprints(), &training)?;
    let manifest_path = args.out.join(MANIFEST_FILE);
    let previous = match Manifest::load(&manifest_path) {
        Ok(m) if m.config_hash == hash => Some(m),
        _ => None,
    };
    let jobs = Manifest::resume(jobs, previous.as_ref());
    let reused = jobs.iter().filter(|j| j.is_ready()).count();

    let trainer: Box<dyn Trainer> = match config.engine {
        EngineKind::Synthetic => {
            let scene = args
                .scene
                .context("the synthetic engine needs --scene (the fixture's scene.json)")?;
            Box::new(SyntheticTrainer {
                scene_file: scene.to_path_buf(),
                blur_radius: config.synthetic_blur_radius,
            })
        }
        EngineKind::External => Box::new(ExternalTrainer {
            command: config.engine_cmd.clone(),
            recon,
            image_dir: args.images.map(Path::to_path_buf),
            work_dir: args.out.join("datasets"),
        }),
    };
    let writer = ManifestWriter::create(&manifest_path, Manifest::new(&hash, jobs.clone()))?;
    t.mark("prepare");
    let done = run_jobs(
        jobs,
        trainer.as_ref(),
        &RunOptions {
            parallelism: config.parallelism,
            manifest: Some(&writer),
            observer: None,
        },
    )?;
    t.mark("run_jobs");

    let trained = done.iter().filter(|m| m.status == JobStatus::Trained).count();
    println!(
        "{} jobs: {trained} trained ({reused} reused), {} failed; manifest {}",
        done.len(),
        done.len() - trained,
        manifest_path.display()
    );
    for m in done.iter().filter(|m| m.status == JobStatus::Failed) {
        println!(
            "  sub-scene {:>3} failed: {}",
            m.subscene_id,
            m.error.as_deref().unwrap_or("unknown error")
        );
    }
    t.report();
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderRecord {
    pub query_image_id: String,
    pub subscene_id: u32,
    /// Relative to the renders directory.
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderSet {
    pub schema_version: u32,
    pub config_hash: String,
    pub renders: Vec<RenderRecord>,
}

pub fn render_stage(config: &PipelineConfig, manifest: &Path, plans: &Path, queries: &Path, out: &Path) -> Result<()> {
    let mut t = Timings::new("render");
    let hash = config.config_hash();
    let manifest_doc = Manifest::load(manifest).with_context(|| format!("loading manifest {}", manifest.display()))?;
    check_hash("manifest", manifest, &manifest_doc.config_hash, &hash)?;
    let plans = load_plans(plans, &hash)?;
    let queries = load_queries(queries)?;
    t.mark("load");

    let synthetic = SyntheticEngine::new();
    let external = config.render_cmd.as_ref().map(|cmd| ExternalRenderer {
        command: cmd.clone(),
        work_dir: out.join("work"),
    });
    let mut records = Vec::new();
    for plan in &plans.plans {
        let q = queries
            .queries
            .iter()
            .find(|q| q.name == plan.query_image_id)
            .with_context(|| format!("query {} is not in the queries file", plan.query_image_id))?;
        let pose = q.pose().with_context(|| format!("query {} has an invalid pose", q.name))?;
        let req = RenderRequest::for_camera(q.intrinsics, pose);
        let stem = PathBuf::from(&q.name).with_extension("");
        for &id in &plan.subscene_ids {
            let Some(model) = manifest_doc.model(id) else {
                bail!(
                    "StaleArtifact: plan for {} references sub-scene {id}, which has no model in {}",
                    q.name,
                    manifest.display()
                );
            };
            let engine: &dyn RenderEngine = match model.engine_kind {
                EngineKind::Synthetic => &synthetic,
                EngineKind::External => external
                    .as_ref()
                    .context("external models need a render command (--render-cmd or render_cmd)")?,
            };
            let image = render(engine, model, &req).with_context(|| format!("rendering {} from sub-scene {id}", q.name))?;
            let rel = stem.join(format!("subscene_{id:04}.png"));
            image.save_png(&out.join(&rel))?;
            records.push(RenderRecord {
                query_image_id: q.name.clone(),
                subscene_id: id,
                path: rel,
            });
        }
    }
    t.mark("render");
    let count = records.len();
    write_json(
        &out.join(RENDERS_FILE),
        &RenderSet {
            schema_version: SCHEMA_VERSION,
            config_hash: hash,
            renders: records,
        },
    )?;
    t.mark("write");
    println!("{count} partial renders for {} queries in {}", plans.plans.len(), out.display());
    t.report();
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryStitchReport {
    pub query_image_id: String,
    pub output: PathBuf,
    pub mode: PlanMode,
    pub report: StitchReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StitchReportSet {
    pub schema_version: u32,
    pub config_hash: String,
    pub queries: Vec<QueryStitchReport>,
}

pub fn stitch_stage(config: &PipelineConfig, plans: &Path, renders: &Path, out: &Path) -> Result<()> {
    let mut t = Timings::new("stitch");
    let hash = config.config_hash();
    let plans = load_plans(plans, &hash)?;
    let renders_file = renders.join(RENDERS_FILE);
    let render_set: RenderSet =
        read_json(&renders_file).with_context(|| format!("loading {}", renders_file.display()))?;
    check_hash("renders", &renders_file, &render_set.config_hash, &hash)?;
    t.mark("load");

    let stitch_config = config.stitch();
    let mut reports = Vec::new();
    for plan in &plans.plans {
        let mut images = HashMap::new();
        for r in render_set.renders.iter().filter(|r| r.query_image_id == plan.query_image_id) {
            images.insert(r.subscene_id, RasterImage::load_png(&renders.join(&r.path))?);
        }
        let (image, report) = stitch(plan, &images, &stitch_config).map_err(|e| match e {
            birdplan_core::stitching::StitchError::IncompletePlan { .. } => {
                anyhow::anyhow!("StaleArtifact: {e}; rerun the render stage")
            }
            other => other.into(),
        })?;
        let name = output_name(&plan.query_image_id);
        image.save_png(&out.join(&name))?;
        println!(
            "  {}: {:?}, {} input(s), {} hole pixel(s)",
            plan.query_image_id,
            plan.mode,
            report.inputs.len(),
            report.hole_pixels
        );
        reports.push(QueryStitchReport {
            query_image_id: plan.query_image_id.clone(),
            output: name,
            mode: plan.mode,
            report,
        });
    }
    t.mark("stitch");
    let count = reports.len();
    write_json(
        &out.join(STITCH_REPORT_FILE),
        &StitchReportSet {
            schema_version: SCHEMA_VERSION,
            config_hash: hash,
            queries: reports,
        },
    )?;
    t.mark("write");
    println!("{count} images stitched into {}", out.display());
    t.report();
    Ok(())
}

/// Per-image metrics. An infinite PSNR (identical images) is stored as null.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub image: String,
    pub psnr_db: Option<f64>,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub min: Option<f64>,
    pub max: Option<f64>,
    pub average: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub rows: Vec<MetricRow>,
    pub psnr_db: MetricSummary,
    pub ssim: MetricSummary,
}

fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

fn fmt_metric(x: f64, precision: usize) -> String {
    if x.is_finite() {
        format!("{x:.precision$}")
    } else {
        "inf".into()
    }
}

/// `(min, max, average)`; any infinite value makes the average infinite.
fn summarize(values: &[f64]) -> (f64, f64, f64) {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let avg = values.iter().sum::<f64>() / values.len() as f64;
    (min, max, avg)
}

pub fn eval(rendered: &Path, ground_truth: &Path, out: Option<&Path>) -> Result<()> {
    let mut t = Timings::new("eval");
    let mut names: Vec<String> = std::fs::read_dir(rendered)
        .with_context(|| format!("listing {}", rendered.display()))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.to_ascii_lowercase().ends_with(".png"))
        .collect();
    names.sort();
    if names.is_empty() {
        bail!("no PNG images in {}", rendered.display());
    }

    let mut psnrs = Vec::with_capacity(names.len());
    let mut ssims = Vec::with_capacity(names.len());
    for name in &names {
        let a = RasterImage::load_png(&rendered.join(name))?;
        let truth_path = ground_truth.join(name);
        let b = RasterImage::load_png(&truth_path)
            .with_context(|| format!("ground truth for {name} ({})", truth_path.display()))?;
        psnrs.push(compute_psnr(&a, &b).with_context(|| name.clone())?);
        ssims.push(compute_ssim(&a, &b).with_context(|| name.clone())?);
    }
    t.mark("metrics");

    let width = names.iter().map(String::len).max().unwrap_or(5).max(5);
    println!("{:<width$}  {:>10}  {:>8}", "image", "PSNR (dB)", "SSIM");
    for ((name, p), s) in names.iter().zip(&psnrs).zip(&ssims) {
        println!("{name:<width$}  {:>10}  {:>8}", fmt_metric(*p, 2), fmt_metric(*s, 4));
    }
    let (pmin, pmax, pavg) = summarize(&psnrs);
    let (smin, smax, savg) = summarize(&ssims);
    println!();
    println!("{:<10}  {:>8}  {:>8}  {:>8}", "", "Min", "Max", "Average");
    println!(
        "{:<10}  {:>8}  {:>8}  {:>8}",
        "PSNR (dB)",
        fmt_metric(pmin, 2),
        fmt_metric(pmax, 2),
        fmt_metric(pavg, 2)
    );
    println!(
        "{:<10}  {:>8}  {:>8}  {:>8}",
        "SSIM",
        fmt_metric(smin, 4),
        fmt_metric(smax, 4),
        fmt_metric(savg, 4)
    );

    if let Some(out) = out {
        let report = MetricsReport {
            schema_version: SCHEMA_VERSION,
            rows: names
                .iter()
                .zip(&psnrs)
                .zip(&ssims)
                .map(|((image, p), s)| MetricRow {
                    image: image.clone(),
                    psnr_db: finite(*p),
                    ssim: *s,
                })
                .collect(),
            psnr_db: MetricSummary {
                min: finite(pmin),
                max: finite(pmax),
                average: finite(pavg),
            },
            ssim: MetricSummary {
                min: Some(smin),
                max: Some(smax),
                average: Some(savg),
            },
        };
        write_json(out, &report)?;
        t.mark("write");
    }
    t.report();
    Ok(())
}

pub struct FixtureArgs<'a> {
    pub out: &'a Path,
    pub spec: Option<&'a Path>,
    pub queries: Option<usize>,
    pub noise_seed: Option<u64>,
    pub jitter_seed: Option<u64>,
    pub no_images: bool,
}

pub fn make_fixture(args: &FixtureArgs<'_>) -> Result<()> {
    let mut t = Timings::new("make-fixture");
    let mut spec: FixtureSpec = match args.spec {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("toml")) {
                toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
            } else {
                serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
            }
        }
        None => FixtureSpec::default(),
    };
    if let Some(n) = args.queries {
        spec.queries = n;
    }
    if let Some(seed) = args.noise_seed {
        spec.noise_seed = seed;
    }
    if args.jitter_seed.is_some() {
        spec.jitter_seed = args.jitter_seed;
    }
    if args.no_images {
        spec.write_images = false;
    }
    let fixture = Fixture::generate(&spec)?;
    t.mark("generate");
    let scene = fixture.write(args.out)?;
    write_json(&args.out.join("fixture_spec.json"), &spec)?;
    t.mark("write");
    println!(
        "{} views ({}x{} grid at altitude {}, focal {:.3}), {} queries; scene {}",
        fixture.recon.views.len(),
        spec.grid[0],
        spec.grid[1],
        spec.altitude,
        spec.focal(),
        fixture.queries.len(),
        scene.display()
    );
    t.report();
    Ok(())
}
