//! On-disk dataset layout: `clouds/NNNNN.xyz` plus `manifest.json`.

use std::fs;
use std::path::Path;

use cotp_core::cloud::{build_dataset_with_blocks, load_cloud, write_cloud, BlockRecord, DatasetSpec};
use cotp_core::training::dataset_digest;
use cotp_core::{Error, PointCloud, Result};
use serde::{Deserialize, Serialize};

pub const MANIFEST: &str = "manifest.json";
pub const CLOUD_DIR: &str = "clouds";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CloudEntry {
    pub file: String,
    pub source: String,
    pub points: usize,
    pub digest: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: DatasetSpec,
    pub seed: u64,
    pub clouds: Vec<CloudEntry>,
    pub dataset_digest: String,
    /// Every occupied block of every source scene, kept or not.
    pub blocks: Vec<BlockRecord>,
}

#[derive(Serialize)]
pub struct Summary {
    pub clouds: usize,
    pub points_per_cloud: usize,
    pub dataset_digest: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source_points: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub blocks_kept: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub blocks_dropped: Option<usize>,
}

impl Manifest {
    pub fn summary(&self) -> Summary {
        let from_files = !self.blocks.is_empty();
        Summary {
            clouds: self.clouds.len(),
            points_per_cloud: self.spec.points_per_block,
            dataset_digest: self.dataset_digest.clone(),
            source_points: from_files.then(|| self.blocks.iter().map(|b| b.points).sum()),
            blocks_kept: from_files.then(|| self.blocks.iter().filter(|b| b.kept).count()),
            blocks_dropped: from_files.then(|| self.blocks.iter().filter(|b| !b.kept).count()),
        }
    }
}

pub fn prepare(spec: &DatasetSpec, out: &Path) -> Result<Manifest> {
    let (clouds, blocks) = build_dataset_with_blocks(spec)?;
    let dir = out.join(CLOUD_DIR);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut entries = Vec::with_capacity(clouds.len());
    for (i, c) in clouds.iter().enumerate() {
        let file = format!("{CLOUD_DIR}/{i:05}.xyz");
        write_cloud(out.join(&file), c)?;
        entries.push(CloudEntry {
            file,
            source: c.source_id.clone().unwrap_or_default(),
            points: c.len(),
            digest: dataset_digest(std::slice::from_ref(c)),
        });
    }
    let manifest = Manifest {
        spec: spec.clone(),
        seed: spec.seed,
        clouds: entries,
        dataset_digest: dataset_digest(&clouds),
        blocks,
    };
    let path = out.join(MANIFEST);
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e.to_string()))
}

/// Loads every cloud listed in the manifest, checking each digest and the
/// digest of the whole set. A path to a single cloud file loads just that.
pub fn load(path: &Path) -> Result<Vec<PointCloud>> {
    if path.is_file() {
        return Ok(vec![load_cloud(path)?]);
    }
    let manifest = read_manifest(path)?;
    let mut clouds = Vec::with_capacity(manifest.clouds.len());
    for e in &manifest.clouds {
        let c = load_cloud(path.join(&e.file))?;
        let found = dataset_digest(std::slice::from_ref(&c));
        if found != e.digest {
            return Err(Error::DigestMismatch {
                expected: format!("{} {}", e.file, e.digest),
                found,
            });
        }
        clouds.push(c);
    }
    let found = dataset_digest(&clouds);
    if found != manifest.dataset_digest {
        return Err(Error::DigestMismatch {
            expected: manifest.dataset_digest,
            found,
        });
    }
    if clouds.is_empty() {
        return Err(Error::Degenerate(format!("{} lists no clouds", path.display())));
    }
    Ok(clouds)
}
