//! Cloud to graph: features, clustering and graph construction, with an
//! on-disk cache keyed by cloud content and graph settings.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::clustering::{kmeans, ClusterSet};
use crate::config::{ClusterSpace, GraphSettings};
use crate::error::{Error, Result};
use crate::features::{extract_features, FeatureSet, PERCEPTUAL_CHANNELS};
use crate::graph::{build_pcw_graph, point_feature_matrix, PcwGraph};
use crate::io::{parse_ply_named, PointCloud};
use crate::nn::Tensor2;

/// Every intermediate of the cloud-to-graph pipeline.
#[derive(Debug, Clone)]
pub struct Stages {
    pub features: FeatureSet,
    pub clusters: ClusterSet,
    pub graph: PcwGraph,
}

pub fn run_stages(cloud: &PointCloud, settings: &GraphSettings) -> Result<Stages> {
    let features = extract_features(cloud, &settings.feature)?;
    let points = point_feature_matrix(&features, cloud);
    let space = match settings.clustering.cluster_space {
        ClusterSpace::Full => points,
        ClusterSpace::FeaturesOnly => {
            let mut x = Tensor2::zeros(points.rows, PERCEPTUAL_CHANNELS);
            for r in 0..points.rows {
                x.row_mut(r).copy_from_slice(&points.row(r)[..PERCEPTUAL_CHANNELS]);
            }
            x
        }
    };
    let c = &settings.clustering;
    let clusters = kmeans(&space, c.k, c.seed, c.max_iter)?;
    let graph = build_pcw_graph(&features, cloud, &clusters, &settings.graph)?;
    Ok(Stages {
        features,
        clusters,
        graph,
    })
}

pub fn cloud_to_graph(cloud: &PointCloud, settings: &GraphSettings) -> Result<PcwGraph> {
    Ok(run_stages(cloud, settings)?.graph)
}

/// Directory from the flag, else `PCQA_CACHE_DIR`, else a temp subdirectory.
pub fn default_cache_dir(flag: Option<&Path>) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| std::env::var_os("PCQA_CACHE_DIR").map(PathBuf::from))
        .unwrap_or_else(|| std::env::temp_dir().join("pcqa-cache"))
}

#[derive(Debug, Clone)]
pub struct GraphCache {
    dir: Option<PathBuf>,
}

impl GraphCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        GraphCache {
            dir: Some(dir.into()),
        }
    }

    /// A cache that always rebuilds.
    pub fn disabled() -> Self {
        GraphCache { dir: None }
    }

    pub fn key(bytes: &[u8], settings: &GraphSettings) -> String {
        let mut h = Sha256::new();
        h.update(bytes);
        h.update(serde_json::to_vec(settings).expect("settings serialize"));
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Graph for the cloud at `path`, from cache when available.
    pub fn graph_for(&self, path: &Path, settings: &GraphSettings) -> Result<PcwGraph> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let key = Self::key(&bytes, settings);
        let entry = self.dir.as_ref().map(|d| d.join(format!("{key}.json")));
        if let Some(entry) = &entry {
            if let Ok(text) = std::fs::read(entry) {
                match serde_json::from_slice::<PcwGraph>(&text) {
                    Ok(g) if g.validate().is_ok() => return Ok(g),
                    _ => log::warn!("ignoring unreadable cache entry {}", entry.display()),
                }
            }
        }
        let name = path.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
        let graph = parse_ply_named(&bytes, &name)
            .and_then(|cloud| cloud_to_graph(&cloud, settings))
            .map_err(|e| e.in_cloud(path))?;
        if let (Some(dir), Some(entry)) = (&self.dir, &entry) {
            if let Err(e) = write_entry(dir, entry, &graph) {
                log::warn!("could not write cache entry {}: {e}", entry.display());
            }
        }
        Ok(graph)
    }
}

fn write_entry(dir: &Path, entry: &Path, graph: &PcwGraph) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tmp = entry.with_extension(format!("tmp{}", std::process::id()));
    std::fs::write(&tmp, serde_json::to_vec(graph)?).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, entry).map_err(|e| Error::io(entry, e))
}
