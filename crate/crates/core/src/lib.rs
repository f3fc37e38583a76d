//! Non-neural core of a bird-view large-scene reconstruction pipeline.
//!
//! The crate splits a large aerial camera set into overlapping sub-scenes,
//! indexes cameras and sub-scenes by their footprint on a fitted ground
//! plane, registers novel query views against that index, and composites
//! partial renders from several sub-scene models into one image. Neural
//! rendering sits behind [`orchestration::RenderEngine`]; a deterministic
//! textured-plane engine stands in for it during verification.

pub mod config;
pub mod decomposition;
pub mod fixture;
pub mod ground;
pub mod kmeans;
pub mod orchestration;
pub mod raster;
pub mod registration;
pub mod sparse_io;
pub mod stitching;

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

/// Version stamped into every JSON artifact.
pub const SCHEMA_VERSION: u32 = 1;

/// Writes pretty JSON with a trailing newline, atomically via a sibling temp file.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> std::io::Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(std::io::Error::other)?;
    text.push('\n');
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    std::fs::write(&tmp, text)?;
    std::fs::rename(&tmp, path)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> std::io::Result<T> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| {
        std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            format!("{}: {e}", path.display()),
        )
    })
}
