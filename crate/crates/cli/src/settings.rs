//! Config file loading and flag overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use birdplan_core::config::PipelineConfig;
use birdplan_core::orchestration::EngineKind;
use birdplan_core::stitching::BlendMode;
use clap::Args;

/// Pipeline options shared by every subcommand. Flags override the config file.
#[derive(Debug, Default, Args)]
pub struct ConfigArgs {
    /// TOML or JSON config file.
    #[arg(long, global = true, env = "BIRDPLAN_CONFIG")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub sigma: Option<f64>,
    #[arg(long = "max-n", global = true)]
    pub max_n: Option<usize>,
    #[arg(long = "target-n", global = true)]
    pub target_n: Option<usize>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub iterations: Option<u32>,
    /// Training engine: external or synthetic.
    #[arg(long, global = true)]
    pub engine: Option<EngineKind>,
    /// Training command; placeholders {dataset_dir} {artifact_path} {iterations}.
    #[arg(long = "engine-cmd", global = true)]
    pub engine_cmd: Option<String>,
    /// Render command; placeholders {artifact_path} {camera_path} {output_path}.
    #[arg(long = "render-cmd", global = true)]
    pub render_cmd: Option<String>,
    #[arg(long, global = true)]
    pub parallelism: Option<usize>,
    #[arg(long = "trim-fraction", global = true)]
    pub trim_fraction: Option<f64>,
    #[arg(long, global = true)]
    pub blend: Option<BlendMode>,
    #[arg(long, global = true)]
    pub bands: Option<usize>,
    /// Blur detection tile size in pixels.
    #[arg(long, global = true)]
    pub tile: Option<u32>,
    /// Variance-of-Laplacian threshold below which a tile counts as blurred.
    #[arg(long = "blur-threshold", global = true)]
    pub blur_threshold: Option<f64>,
}

pub fn read_config_file(path: &Path) -> Result<PipelineConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let is_toml = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("toml"));
    let config = if is_toml {
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
    } else {
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
    };
    Ok(config)
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<PipelineConfig> {
        let mut c = match &self.config {
            Some(path) => read_config_file(path)?,
            None => PipelineConfig::default(),
        };
        macro_rules! apply {
            ($($flag:ident => $($field:ident).+),* $(,)?) => {
                $(if let Some(v) = &self.$flag { c.$($field).+ = v.clone(); })*
            };
        }
        apply!(
            sigma => sigma,
            max_n => max_n,
            target_n => target_per_scene,
            seed => seed,
            iterations => iterations,
            engine => engine,
            engine_cmd => engine_cmd,
            parallelism => parallelism,
            trim_fraction => trim_fraction,
            blend => blend,
            bands => bands,
            tile => blur.tile,
            blur_threshold => blur.threshold,
        );
        if let Some(cmd) = &self.render_cmd {
            c.render_cmd = Some(cmd.clone());
        }
        if let Err(e) = c.validate() {
            bail!("{e}");
        }
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "sigma = 1.3\nmaxN = 60\ntarget_per_scene = 50\n[blur]\ntile = 16\n").unwrap();
        let args = ConfigArgs {
            config: Some(path),
            sigma: Some(1.5),
            ..Default::default()
        };
        let c = args.resolve().unwrap();
        assert_eq!((c.sigma, c.max_n, c.target_per_scene, c.blur.tile), (1.5, 60, 50, 16));
        assert_eq!(c.blur.threshold, PipelineConfig::default().blur.threshold);
    }

    #[test]
    fn json_config_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"sigma": 0.5}"#).unwrap();
        let args = ConfigArgs {
            config: Some(path),
            ..Default::default()
        };
        assert!(args.resolve().unwrap_err().to_string().contains("sigma"));
    }
}
