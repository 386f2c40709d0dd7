//! Point cloud and dataset I/O.

mod cloud;
mod manifest;
mod ply;

pub use cloud::{bounding_box, BoundingBox, Point3, PointCloud};
pub(crate) use cloud::{dist2, dot, sub};
pub use manifest::{
    load_manifest, load_manifest_with, parse_manifest, DatasetManifest, ManifestEntry,
};
pub use ply::{parse_ply, parse_ply_named, write_ply, PlyFormat};

use std::path::Path;

use crate::error::{Error, Result};

/// Reads and parses a PLY file, naming the cloud after its file stem.
pub fn read_ply_file(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_ply_named(&bytes, &name).map_err(|e| e.in_cloud(path))
}
