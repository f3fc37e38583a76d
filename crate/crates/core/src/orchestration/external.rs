//! Adapter for an out-of-process trainer/renderer driven by a command template.
//!
//! Templates are split into arguments with POSIX shell quoting rules and
//! `{placeholder}` tokens are substituted per argument, so substituted paths
//! never need escaping. The program is executed directly, without a shell.

use std::fs::File;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

use nalgebra::Matrix4;
use serde_json::{json, Value};

use super::{EngineError, RenderEngine, RenderRequest, SubSceneModel, Trainer};
use crate::raster::RasterImage;
use crate::sparse_io::{CameraPose, PinholeIntrinsics, Reconstruction};

pub const TRANSFORMS_FILE: &str = "transforms.json";
pub const TRAIN_LOG: &str = "train.log";

/// Splits `template` and substitutes `{key}` placeholders in every argument.
pub fn expand_template(template: &str, vars: &[(&str, String)]) -> Result<Vec<String>, EngineError> {
    let tokens = shlex::split(template)
        .ok_or_else(|| EngineError::InvalidRequest(format!("unbalanced quoting in command `{template}`")))?;
    if tokens.is_empty() {
        return Err(EngineError::EngineUnavailable("empty engine command".into()));
    }
    Ok(tokens
        .into_iter()
        .map(|mut tok| {
            for (key, value) in vars {
                tok = tok.replace(&format!("{{{key}}}"), value);
            }
            tok
        })
        .collect())
}

/// Runs `argv` with stdout and stderr appended to `log`. A missing program
/// maps to [`EngineError::EngineUnavailable`], a nonzero exit to
/// [`EngineError::Failed`].
fn run_logged(argv: &[String], log: &Path) -> Result<(), EngineError> {
    if let Some(parent) = log.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let out = File::create(log)?;
    let err = out.try_clone()?;
    let status = Command::new(&argv[0])
        .args(&argv[1..])
        .stdin(Stdio::null())
        .stdout(out)
        .stderr(err)
        .status()
        .map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound | std::io::ErrorKind::PermissionDenied => {
                EngineError::EngineUnavailable(format!("{}: {e}", argv[0]))
            }
            _ => EngineError::Io(e),
        })?;
    if status.success() {
        Ok(())
    } else {
        Err(EngineError::Failed(format!("{} exited with {status}; see {}", argv[0], log.display())))
    }
}

/// Camera-to-world 4x4 in the OpenGL camera convention (x right, y up,
/// looking down -z) used by NeRF transforms files.
pub fn opengl_camera_to_world(pose: &CameraPose) -> Matrix4<f64> {
    let mut m = Matrix4::identity();
    let flipped = pose.rotation * nalgebra::Matrix3::from_diagonal(&nalgebra::Vector3::new(1.0, -1.0, -1.0));
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&flipped);
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(&pose.center);
    m
}

fn matrix_rows(m: &Matrix4<f64>) -> Value {
    json!((0..4).map(|r| (0..4).map(|c| m[(r, c)]).collect::<Vec<_>>()).collect::<Vec<_>>())
}

fn intrinsics_block(intr: &PinholeIntrinsics) -> serde_json::Map<String, Value> {
    let mut block = serde_json::Map::new();
    block.insert("w".into(), json!(intr.width));
    block.insert("h".into(), json!(intr.height));
    block.insert("fl_x".into(), json!(intr.fx));
    block.insert("fl_y".into(), json!(intr.fy));
    block.insert("cx".into(), json!(intr.cx));
    block.insert("cy".into(), json!(intr.cy));
    block.insert(
        "camera_angle_x".into(),
        json!(2.0 * (f64::from(intr.width) / (2.0 * intr.fx)).atan()),
    );
    block.insert(
        "camera_angle_y".into(),
        json!(2.0 * (f64::from(intr.height) / (2.0 * intr.fy)).atan()),
    );
    block
}

/// Transforms document for a set of views. The top-level intrinsics come
/// from the first frame; every frame also carries its own.
pub fn transforms_document(recon: &Reconstruction, image_ids: &[u32]) -> Result<Value, EngineError> {
    let mut frames = Vec::with_capacity(image_ids.len());
    let mut top = None;
    for &id in image_ids {
        let view = recon
            .view(id)
            .ok_or_else(|| EngineError::InvalidRequest(format!("unknown image id {id}")))?;
        let intr = recon.intrinsics_of(view);
        let mut frame = intrinsics_block(intr);
        frame.insert("file_path".into(), json!(format!("images/{}", view.name)));
        frame.insert("transform_matrix".into(), matrix_rows(&opengl_camera_to_world(&view.pose)));
        frames.push(Value::Object(frame));
        top.get_or_insert_with(|| intrinsics_block(intr));
    }
    let mut doc = top.unwrap_or_default();
    doc.insert("frames".into(), Value::Array(frames));
    Ok(Value::Object(doc))
}

/// Trainer that writes a per-sub-scene dataset and invokes a command.
///
/// Placeholders: `{dataset_dir}`, `{artifact_path}`, `{iterations}`.
#[derive(Debug, Clone)]
pub struct ExternalTrainer {
    pub command: String,
    pub recon: Reconstruction,
    /// Source images, looked up by view name. Without it the dataset holds
    /// only the transforms file.
    pub image_dir: Option<PathBuf>,
    pub work_dir: PathBuf,
}

impl ExternalTrainer {
    pub fn dataset_dir(&self, subscene_id: u32) -> PathBuf {
        self.work_dir.join(format!("subscene_{subscene_id:04}"))
    }

    pub fn write_dataset(&self, job: &SubSceneModel) -> Result<PathBuf, EngineError> {
        let dir = self.dataset_dir(job.subscene_id);
        let images = dir.join("images");
        std::fs::create_dir_all(&images)?;
        if let Some(src) = &self.image_dir {
            for &id in &job.image_ids {
                if let Some(view) = self.recon.view(id) {
                    let dst = images.join(&view.name);
                    if let Some(parent) = dst.parent() {
                        std::fs::create_dir_all(parent)?;
                    }
                    std::fs::copy(src.join(&view.name), dst)?;
                }
            }
        }
        let doc = transforms_document(&self.recon, &job.image_ids)?;
        crate::write_json(&dir.join(TRANSFORMS_FILE), &doc)?;
        Ok(dir)
    }
}

impl Trainer for ExternalTrainer {
    fn train(&self, job: &SubSceneModel) -> Result<(), EngineError> {
        let dataset = self.write_dataset(job)?;
        if let Some(parent) = job.artifact_path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let argv = expand_template(
            &self.command,
            &[
                ("dataset_dir", dataset.display().to_string()),
                ("artifact_path", job.artifact_path.display().to_string()),
                ("iterations", job.training_iterations.to_string()),
            ],
        )?;
        run_logged(&argv, &dataset.join(TRAIN_LOG))?;
        if !job.artifact_path.is_file() {
            return Err(EngineError::Failed(format!(
                "engine exited successfully but wrote no artifact at {}",
                job.artifact_path.display()
            )));
        }
        Ok(())
    }
}

/// Renderer that invokes a command per request.
///
/// Placeholders: `{artifact_path}`, `{camera_path}` (a single-frame
/// transforms file), `{output_path}` (PNG the command must write).
#[derive(Debug, Clone)]
pub struct ExternalRenderer {
    pub command: String,
    pub work_dir: PathBuf,
}

impl RenderEngine for ExternalRenderer {
    fn render(&self, model: &SubSceneModel, req: &RenderRequest) -> Result<RasterImage, EngineError> {
        let dir = tempfile::Builder::new()
            .prefix(&format!("render_{:04}_", model.subscene_id))
            .tempdir_in({
                std::fs::create_dir_all(&self.work_dir)?;
                &self.work_dir
            })?;
        let camera_path = dir.path().join("camera.json");
        let output_path = dir.path().join("render.png");
        let mut frame = intrinsics_block(&req.intrinsics);
        frame.insert("transform_matrix".into(), matrix_rows(&opengl_camera_to_world(&req.pose)));
        let mut doc = intrinsics_block(&req.intrinsics);
        doc.insert("frames".into(), json!([Value::Object(frame)]));
        crate::write_json(&camera_path, &Value::Object(doc))?;
        let argv = expand_template(
            &self.command,
            &[
                ("artifact_path", model.artifact_path.display().to_string()),
                ("camera_path", camera_path.display().to_string()),
                ("output_path", output_path.display().to_string()),
            ],
        )?;
        run_logged(&argv, &dir.path().join("render.log"))?;
        let image = RasterImage::load_png(&output_path).map_err(|e| EngineError::Failed(format!("render output: {e}")))?;
        if (image.width, image.height) != (req.width, req.height) {
            return Err(EngineError::Failed(format!(
                "engine rendered {}x{}, expected {}x{}",
                image.width, image.height, req.width, req.height
            )));
        }
        Ok(image)
    }
}
