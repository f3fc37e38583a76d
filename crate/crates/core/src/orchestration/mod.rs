//! Per-sub-scene model lifecycle: training jobs, manifests and rendering.
//!
//! Training is delegated to a [`Trainer`], rendering to a [`RenderEngine`].
//! [`run_jobs`] drives pending jobs through a bounded worker pool and
//! rewrites the manifest after every status change, so a killed run can be
//! resumed without retraining finished sub-scenes.

pub mod external;
pub mod synthetic;

use std::collections::{BTreeMap, VecDeque};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decomposition::SubScene;
use crate::ground::FootprintRect;
use crate::raster::RasterImage;
use crate::sparse_io::{CameraPose, PinholeIntrinsics, Reconstruction};

pub use external::{ExternalRenderer, ExternalTrainer};
pub use synthetic::{synthetic_render, SyntheticEngine, SyntheticTrainer};

pub const DEFAULT_ITERATIONS: u32 = 5000;
pub const DEFAULT_PARALLELISM: usize = 1;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("engine unavailable: {0}")]
    EngineUnavailable(String),
    #[error("engine failed: {0}")]
    Failed(String),
    #[error("model for sub-scene {0} is not trained")]
    ModelNotReady(u32),
    #[error("invalid render request: {0}")]
    InvalidRequest(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum OrchestrationError {
    #[error("sub-scene {0} has no members")]
    EmptySubScene(u32),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("sub-scene {0} has no footprint")]
    MissingFootprint(u32),
    #[error("manifest I/O error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EngineKind {
    External,
    Synthetic,
}

impl std::str::FromStr for EngineKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "external" => Ok(EngineKind::External),
            "synthetic" => Ok(EngineKind::Synthetic),
            other => Err(format!("unknown engine `{other}` (external|synthetic)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobStatus {
    Pending,
    Trained,
    Failed,
}

/// Manifest record of one sub-scene model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubSceneModel {
    pub subscene_id: u32,
    pub engine_kind: EngineKind,
    /// Engine-defined; treated as opaque here.
    pub artifact_path: PathBuf,
    pub training_iterations: u32,
    pub image_ids: Vec<u32>,
    pub footprint: FootprintRect,
    pub status: JobStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl SubSceneModel {
    /// Trained with its artifact still on disk.
    pub fn is_ready(&self) -> bool {
        self.status == JobStatus::Trained && self.artifact_path.is_file()
    }
}

/// A camera to render at.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderRequest {
    pub intrinsics: PinholeIntrinsics,
    pub pose: CameraPose,
    pub width: u32,
    pub height: u32,
}

impl RenderRequest {
    pub fn for_camera(intrinsics: PinholeIntrinsics, pose: CameraPose) -> Self {
        Self {
            width: intrinsics.width,
            height: intrinsics.height,
            intrinsics,
            pose,
        }
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        if (self.width, self.height) != (self.intrinsics.width, self.intrinsics.height) {
            return Err(EngineError::InvalidRequest(format!(
                "output {}x{} does not match intrinsics {}x{}",
                self.width, self.height, self.intrinsics.width, self.intrinsics.height
            )));
        }
        self.intrinsics.validate().map_err(EngineError::InvalidRequest)
    }
}

/// Produces a trained artifact for one job, writing to `job.artifact_path`.
pub trait Trainer: Sync {
    fn train(&self, job: &SubSceneModel) -> Result<(), EngineError>;
}

pub trait RenderEngine: Sync {
    fn render(&self, model: &SubSceneModel, req: &RenderRequest) -> Result<RasterImage, EngineError>;
}

/// Hooks called around each job; used for instrumentation.
pub trait JobObserver: Sync {
    fn job_started(&self, _subscene_id: u32) {}
    fn job_finished(&self, _model: &SubSceneModel) {}
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    pub iterations: u32,
    pub engine: EngineKind,
    pub artifact_dir: PathBuf,
}

impl TrainingConfig {
    pub fn new(engine: EngineKind, artifact_dir: impl Into<PathBuf>) -> Self {
        Self {
            iterations: DEFAULT_ITERATIONS,
            engine,
            artifact_dir: artifact_dir.into(),
        }
    }
}

pub fn artifact_path(dir: &Path, engine: EngineKind, subscene_id: u32) -> PathBuf {
    let ext = match engine {
        EngineKind::Synthetic => "json",
        EngineKind::External => "model",
    };
    dir.join(format!("subscene_{subscene_id:04}.{ext}"))
}

/// One pending job per sub-scene, restricted to the sub-scene's members.
pub fn build_training_jobs(
    recon: &Reconstruction,
    subscenes: &[SubScene],
    footprints: &BTreeMap<u32, FootprintRect>,
    config: &TrainingConfig,
) -> Result<Vec<SubSceneModel>, OrchestrationError> {
    if config.iterations == 0 {
        return Err(OrchestrationError::InvalidConfig("iterations must be >= 1".into()));
    }
    subscenes
        .iter()
        .map(|s| {
            if s.member_image_ids.is_empty() {
                return Err(OrchestrationError::EmptySubScene(s.id));
            }
            if let Some(id) = s.member_image_ids.iter().find(|id| recon.view(**id).is_none()) {
                return Err(OrchestrationError::InvalidConfig(format!(
                    "sub-scene {} references unknown image {id}",
                    s.id
                )));
            }
            let footprint = *footprints.get(&s.id).ok_or(OrchestrationError::MissingFootprint(s.id))?;
            Ok(SubSceneModel {
                subscene_id: s.id,
                engine_kind: config.engine,
                artifact_path: artifact_path(&config.artifact_dir, config.engine, s.id),
                training_iterations: config.iterations,
                image_ids: s.member_image_ids.clone(),
                footprint,
                status: JobStatus::Pending,
                error: None,
            })
        })
        .collect()
}

/// Manifest document: all models of a pipeline run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub config_hash: String,
    pub models: Vec<SubSceneModel>,
}

impl Manifest {
    pub fn new(config_hash: &str, models: Vec<SubSceneModel>) -> Self {
        Self {
            schema_version: crate::SCHEMA_VERSION,
            config_hash: config_hash.to_string(),
            models,
        }
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        crate::read_json(path)
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        crate::write_json(path, self)
    }

    pub fn model(&self, subscene_id: u32) -> Option<&SubSceneModel> {
        self.models.iter().find(|m| m.subscene_id == subscene_id)
    }

    /// Carries over trained status from a previous manifest for jobs whose
    /// definition is unchanged and whose artifact still exists.
    pub fn resume(jobs: Vec<SubSceneModel>, previous: Option<&Manifest>) -> Vec<SubSceneModel> {
        jobs.into_iter()
            .map(|job| match previous.and_then(|m| m.model(job.subscene_id)) {
                Some(old)
                    if old.is_ready()
                        && old.artifact_path == job.artifact_path
                        && old.image_ids == job.image_ids
                        && old.footprint == job.footprint
                        && old.engine_kind == job.engine_kind
                        && old.training_iterations == job.training_iterations =>
                {
                    old.clone()
                }
                _ => job,
            })
            .collect()
    }
}

/// Single writer for a manifest file. Every update rewrites the file
/// atomically (temp file + rename).
pub struct ManifestWriter {
    path: PathBuf,
    state: Mutex<Manifest>,
}

impl ManifestWriter {
    pub fn create(path: impl Into<PathBuf>, manifest: Manifest) -> std::io::Result<Self> {
        let path = path.into();
        manifest.save(&path)?;
        Ok(Self {
            path,
            state: Mutex::new(manifest),
        })
    }

    pub fn update(&self, model: &SubSceneModel) -> std::io::Result<()> {
        let mut state = self.state.lock().expect("manifest writer poisoned");
        match state.models.iter_mut().find(|m| m.subscene_id == model.subscene_id) {
            Some(slot) => *slot = model.clone(),
            None => state.models.push(model.clone()),
        }
        state.save(&self.path)
    }

    pub fn snapshot(&self) -> Manifest {
        self.state.lock().expect("manifest writer poisoned").clone()
    }
}

pub struct RunOptions<'a> {
    pub parallelism: usize,
    pub manifest: Option<&'a ManifestWriter>,
    pub observer: Option<&'a dyn JobObserver>,
}

impl Default for RunOptions<'_> {
    fn default() -> Self {
        Self {
            parallelism: DEFAULT_PARALLELISM,
            manifest: None,
            observer: None,
        }
    }
}

/// Trains every job that is not already ready, with at most
/// `options.parallelism` jobs in flight. Job failures are recorded on the
/// job and never abort the others. Returns the jobs in input order.
pub fn run_jobs(
    jobs: Vec<SubSceneModel>,
    trainer: &dyn Trainer,
    options: &RunOptions<'_>,
) -> Result<Vec<SubSceneModel>, OrchestrationError> {
    if options.parallelism == 0 {
        return Err(OrchestrationError::InvalidConfig("parallelism must be >= 1".into()));
    }
    let queue: Mutex<VecDeque<usize>> = Mutex::new((0..jobs.len()).filter(|&i| !jobs[i].is_ready()).collect());
    let workers = options.parallelism.min(queue.lock().unwrap().len());
    let results = Mutex::new(jobs);
    let io_error: Mutex<Option<std::io::Error>> = Mutex::new(None);

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let Some(i) = queue.lock().unwrap().pop_front() else {
                    break;
                };
                let mut job = results.lock().unwrap()[i].clone();
                if let Some(obs) = options.observer {
                    obs.job_started(job.subscene_id);
                }
                match trainer.train(&job) {
                    Ok(()) if job.artifact_path.is_file() => {
                        job.status = JobStatus::Trained;
                        job.error = None;
                    }
                    Ok(()) => {
                        job.status = JobStatus::Failed;
                        job.error = Some(format!("engine produced no artifact at {}", job.artifact_path.display()));
                    }
                    Err(e) => {
                        job.status = JobStatus::Failed;
                        job.error = Some(e.to_string());
                    }
                }
                if let Some(writer) = options.manifest {
                    if let Err(e) = writer.update(&job) {
                        io_error.lock().unwrap().get_or_insert(e);
                    }
                }
                if let Some(obs) = options.observer {
                    obs.job_finished(&job);
                }
                results.lock().unwrap()[i] = job;
            });
        }
    });

    if let Some(e) = io_error.into_inner().unwrap() {
        return Err(e.into());
    }
    Ok(results.into_inner().unwrap())
}

/// Renders a trained model through `engine`.
pub fn render(engine: &dyn RenderEngine, model: &SubSceneModel, req: &RenderRequest) -> Result<RasterImage, EngineError> {
    if model.status != JobStatus::Trained {
        return Err(EngineError::ModelNotReady(model.subscene_id));
    }
    req.validate()?;
    engine.render(model, req)
}
