//! Synthetic block datasets: parametric surfaces sampled uniformly by area,
//! then thinned with a density-skewed sampler and normalized to `[-1, 1]^3`.

use std::f64::consts::PI;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{load_cloud, partition_blocks, Point, PointCloud};
use crate::error::{Error, Result};
use crate::seed::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurfaceKind {
    Sphere,
    Box,
    Torus,
    RidgedPlane,
}

impl SurfaceKind {
    pub fn all() -> [SurfaceKind; 4] {
        [
            SurfaceKind::Sphere,
            SurfaceKind::Box,
            SurfaceKind::Torus,
            SurfaceKind::RidgedPlane,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Files(Vec<PathBuf>),
    Synthetic {
        shapes: Vec<SurfaceKind>,
        blocks_per_shape: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub source: DataSource,
    /// Scene cube edge used before block partitioning (file sources only).
    pub cube_edge: f64,
    pub block_edge: f64,
    pub points_per_block: usize,
    pub nonuniformity: f64,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn synthetic(shapes: Vec<SurfaceKind>, blocks_per_shape: usize, n: usize, nonuniformity: f64, seed: u64) -> Self {
        DatasetSpec {
            source: DataSource::Synthetic {
                shapes,
                blocks_per_shape,
            },
            cube_edge: 100.0,
            block_edge: 12.0,
            points_per_block: n,
            nonuniformity,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.points_per_block < 8 {
            return Err(Error::InvalidArgument("points_per_block must be at least 8".into()));
        }
        if !(0.0..=1.0).contains(&self.nonuniformity) {
            return Err(Error::InvalidArgument("nonuniformity must lie in [0, 1]".into()));
        }
        if !(self.block_edge > 0.0 && self.cube_edge > self.block_edge) {
            return Err(Error::InvalidArgument("need cube_edge > block_edge > 0".into()));
        }
        if let DataSource::Synthetic { shapes, blocks_per_shape } = &self.source {
            if shapes.is_empty() || *blocks_per_shape == 0 {
                return Err(Error::InvalidArgument("synthetic source needs shapes and blocks".into()));
            }
        }
        Ok(())
    }
}

/// Oversampling factor of the uniform pool before density-skewed thinning.
const POOL_FACTOR: usize = 8;

/// Generates `blocks_per_shape` clouds per listed surface, each with
/// `points_per_block` points in `[-1, 1]^3`. Deterministic in `spec.seed`.
pub fn synth_dataset(spec: &DatasetSpec) -> Result<Vec<PointCloud>> {
    spec.validate()?;
    let DataSource::Synthetic { shapes, blocks_per_shape } = &spec.source else {
        return Err(Error::InvalidArgument("synth_dataset needs a synthetic source".into()));
    };
    let n = spec.points_per_block;
    let mut out = Vec::with_capacity(shapes.len() * blocks_per_shape);
    for (si, &shape) in shapes.iter().enumerate() {
        for b in 0..*blocks_per_shape {
            let seed = derive_seed(spec.seed, &[si as u64, b as u64]);
            let pool = sample_surface(shape, n * POOL_FACTOR, seed)?;
            let thinned = nonuniform_sample(&pool, n, spec.nonuniformity, derive_seed(seed, &[1]))?;
            let cloud = normalize_unit(&thinned)?.with_source(format!("{shape:?}-{b}"));
            out.push(cloud);
        }
    }
    Ok(out)
}

/// One grid cell of a file scene and how many of its points it held.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockRecord {
    pub scene: PathBuf,
    pub index: [i64; 3],
    pub points: usize,
    /// Whether the block was large enough to enter the dataset.
    pub kept: bool,
}

/// Builds training clouds from either source. File scenes are partitioned
/// into blocks; blocks with fewer than `points_per_block` points are dropped.
pub fn build_dataset(spec: &DatasetSpec) -> Result<Vec<PointCloud>> {
    Ok(build_dataset_with_blocks(spec)?.0)
}

/// [`build_dataset`] plus one record per occupied block of every file scene
/// (empty for synthetic sources).
pub fn build_dataset_with_blocks(spec: &DatasetSpec) -> Result<(Vec<PointCloud>, Vec<BlockRecord>)> {
    spec.validate()?;
    match &spec.source {
        DataSource::Synthetic { .. } => Ok((synth_dataset(spec)?, Vec::new())),
        DataSource::Files(paths) => {
            let mut out = Vec::new();
            let mut records = Vec::new();
            for (fi, path) in paths.iter().enumerate() {
                let scene = load_cloud(path)?;
                let blocks = partition_blocks(&scene, spec.cube_edge, spec.block_edge)?;
                for (bi, block) in blocks.iter().enumerate() {
                    let kept = block.cloud.len() >= spec.points_per_block;
                    records.push(BlockRecord {
                        scene: path.clone(),
                        index: block.index,
                        points: block.cloud.len(),
                        kept,
                    });
                    if !kept {
                        continue;
                    }
                    let seed = derive_seed(spec.seed, &[fi as u64, bi as u64]);
                    let c = nonuniform_sample(&block.cloud, spec.points_per_block, spec.nonuniformity, seed)?;
                    out.push(c.with_source(format!("{}#{:?}", path.display(), block.index)));
                }
            }
            if out.is_empty() {
                return Err(Error::Degenerate("no block holds enough points".into()));
            }
            Ok((out, records))
        }
    }
}

/// Centers on the bounding-box center and divides by the largest half-extent.
pub fn normalize_unit(cloud: &PointCloud) -> Result<PointCloud> {
    let (lo, hi) = cloud.bounds();
    let center = [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0, (lo[2] + hi[2]) / 2.0];
    let half = (0..3).map(|a| (hi[a] - lo[a]) / 2.0).fold(0.0, f64::max);
    if half <= 0.0 {
        return Err(Error::Degenerate("cloud has zero extent".into()));
    }
    let pts = cloud
        .points()
        .iter()
        .map(|p| {
            [
                ((p[0] - center[0]) / half).clamp(-1.0, 1.0),
                ((p[1] - center[1]) / half).clamp(-1.0, 1.0),
                ((p[2] - center[2]) / half).clamp(-1.0, 1.0),
            ]
        })
        .collect();
    PointCloud::new(pts)
}

/// Draws `n` points without replacement; point `i` enters with weight
/// `1 - strength + strength * w_i`, where `w` is a linear ramp along a seeded
/// random direction rescaled to `[0, 1]`. Output keeps input order.
pub fn nonuniform_sample(cloud: &PointCloud, n: usize, strength: f64, seed: u64) -> Result<PointCloud> {
    if n > cloud.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot draw {n} points from a cloud of {}",
            cloud.len()
        )));
    }
    if !(0.0..=1.0).contains(&strength) {
        return Err(Error::InvalidArgument(format!("strength must lie in [0, 1], got {strength}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let axis = random_unit(&mut rng);
    let proj: Vec<f64> = cloud
        .points()
        .iter()
        .map(|p| p[0] * axis[0] + p[1] * axis[1] + p[2] * axis[2])
        .collect();
    let (lo, hi) = proj
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let span = hi - lo;

    // Efraimidis-Spirakis: keep the n largest ln(u)/weight keys.
    let mut keyed: Vec<(f64, usize)> = proj
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let w = if span > 0.0 { (v - lo) / span } else { 0.5 };
            let weight = 1.0 - strength + strength * w;
            let u: f64 = 1.0 - rng.gen::<f64>(); // (0, 1]
            let key = if weight > 0.0 { u.ln() / weight } else { f64::NEG_INFINITY };
            (key, i)
        })
        .collect();
    keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut idx: Vec<usize> = keyed[..n].iter().map(|&(_, i)| i).collect();
    idx.sort_unstable();
    cloud.select(&idx)
}

fn random_unit(rng: &mut ChaCha8Rng) -> Point {
    loop {
        let v: Point = [
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        ];
        let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if norm > 1e-9 {
            return [v[0] / norm, v[1] / norm, v[2] / norm];
        }
    }
}

/// Random rotation from a uniformly distributed unit quaternion.
fn random_rotation(rng: &mut ChaCha8Rng) -> [[f64; 3]; 3] {
    let q: [f64; 4] = loop {
        let v: [f64; 4] = [
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        ];
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            break [v[0] / n, v[1] / n, v[2] / n, v[3] / n];
        }
    };
    let [w, x, y, z] = q;
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - z * w), 2.0 * (x * z + y * w)],
        [2.0 * (x * y + z * w), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - x * w)],
        [2.0 * (x * z - y * w), 2.0 * (y * z + x * w), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

fn rotate(r: &[[f64; 3]; 3], p: Point) -> Point {
    [
        r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2],
        r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2],
        r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2],
    ]
}

/// Uniform-by-area samples of one randomly parameterized, randomly rotated
/// surface. Not normalized; the sphere is the unit sphere.
pub fn sample_surface(kind: SurfaceKind, count: usize, seed: u64) -> Result<PointCloud> {
    if count == 0 {
        return Err(Error::InvalidArgument("count must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rot = random_rotation(&mut rng);
    let mut pts = Vec::with_capacity(count);
    match kind {
        SurfaceKind::Sphere => {
            for _ in 0..count {
                pts.push(random_unit(&mut rng));
            }
            // rotation-invariant distribution, skip the rotation
            return PointCloud::new(pts);
        }
        SurfaceKind::Box => {
            let dims = [
                rng.gen_range(0.5..1.5),
                rng.gen_range(0.5..1.5),
                rng.gen_range(0.5..1.5),
            ];
            let areas = [dims[1] * dims[2], dims[0] * dims[2], dims[0] * dims[1]];
            let total: f64 = areas.iter().sum();
            for _ in 0..count {
                let mut t = rng.gen::<f64>() * total;
                let mut axis = 0;
                while axis < 2 && t > areas[axis] {
                    t -= areas[axis];
                    axis += 1;
                }
                let side = if rng.gen::<bool>() { 0.5 } else { -0.5 };
                let mut p = [0.0; 3];
                for a in 0..3 {
                    p[a] = if a == axis {
                        side * dims[a]
                    } else {
                        (rng.gen::<f64>() - 0.5) * dims[a]
                    };
                }
                pts.push(rotate(&rot, p));
            }
        }
        SurfaceKind::Torus => {
            let major = rng.gen_range(0.6..1.0);
            let minor = rng.gen_range(0.15..0.35);
            while pts.len() < count {
                let u = rng.gen::<f64>() * 2.0 * PI;
                let v = rng.gen::<f64>() * 2.0 * PI;
                // area element is proportional to (R + r cos v)
                if rng.gen::<f64>() * (major + minor) > major + minor * v.cos() {
                    continue;
                }
                let ring = major + minor * v.cos();
                pts.push(rotate(&rot, [ring * u.cos(), ring * u.sin(), minor * v.sin()]));
            }
        }
        SurfaceKind::RidgedPlane => {
            let amp = rng.gen_range(0.05..0.2);
            let freq = rng.gen_range(2.0..6.0);
            let phase = rng.gen::<f64>() * 2.0 * PI;
            let max_slope = amp * freq * PI;
            let max_jac = (1.0 + max_slope * max_slope).sqrt();
            while pts.len() < count {
                let x = rng.gen::<f64>() * 2.0 - 1.0;
                let y = rng.gen::<f64>() * 2.0 - 1.0;
                let slope = amp * freq * PI * (freq * PI * x + phase).cos();
                if rng.gen::<f64>() * max_jac > (1.0 + slope * slope).sqrt() {
                    continue;
                }
                let z = amp * (freq * PI * x + phase).sin();
                pts.push(rotate(&rot, [x, y, z]));
            }
        }
    }
    PointCloud::new(pts)
}
