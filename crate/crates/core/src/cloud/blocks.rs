use std::collections::BTreeMap;

use super::{Point, PointCloud};
use crate::error::{Error, Result};

/// Uniform scale + translation that maps a scene into `[0, cube_edge]^3`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CubeTransform {
    pub min_corner: Point,
    pub scale: f64,
}

impl CubeTransform {
    pub fn apply(&self, p: &Point) -> Point {
        [
            (p[0] - self.min_corner[0]) * self.scale,
            (p[1] - self.min_corner[1]) * self.scale,
            (p[2] - self.min_corner[2]) * self.scale,
        ]
    }
}

/// One occupied grid cell of a partitioned scene. `cloud` is already mapped
/// into `[-1, 1]^3` via `(p - offset) * scale`.
#[derive(Debug, Clone)]
pub struct Block {
    pub cloud: PointCloud,
    pub index: [i64; 3],
    pub origin: Point,
    pub edge_length: f64,
    pub offset: Point,
    pub scale: f64,
}

impl Block {
    pub fn denormalize_point(&self, q: &Point) -> Point {
        [
            self.offset[0] + q[0] / self.scale,
            self.offset[1] + q[1] / self.scale,
            self.offset[2] + q[2] / self.scale,
        ]
    }

    /// Maps the normalized block cloud back into scaled-scene coordinates.
    pub fn denormalize(&self) -> PointCloud {
        let pts = self
            .cloud
            .points()
            .iter()
            .map(|q| self.denormalize_point(q))
            .collect();
        PointCloud::new(pts).expect("block clouds are non-empty")
    }
}

/// Moves a scene so its minimum corner sits at the origin and shrinks it
/// uniformly when its largest extent exceeds `cube_edge`. Scenes that already
/// fit keep their metric scale.
pub fn scale_to_cube(scene: &PointCloud, cube_edge: f64) -> Result<(PointCloud, CubeTransform)> {
    if !(cube_edge > 0.0) {
        return Err(Error::InvalidArgument(format!("cube_edge must be positive, got {cube_edge}")));
    }
    let (lo, hi) = scene.bounds();
    let extent = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max);
    if extent <= 0.0 {
        return Err(Error::Degenerate("scene has zero extent on all axes".into()));
    }
    let t = CubeTransform {
        min_corner: lo,
        scale: (cube_edge / extent).min(1.0),
    };
    let pts = scene.points().iter().map(|p| t.apply(p)).collect();
    Ok((PointCloud::new(pts)?, t))
}

/// Splits a scene into occupied, non-overlapping axis-aligned blocks on a
/// grid anchored at the cube origin. Points on the far cube face land in the
/// last cell along that axis. Blocks come out in grid-index order, points in
/// scene order.
pub fn partition_blocks(scene: &PointCloud, cube_edge: f64, block_edge: f64) -> Result<Vec<Block>> {
    if !(block_edge > 0.0 && cube_edge > block_edge) {
        return Err(Error::InvalidArgument(format!(
            "need cube_edge > block_edge > 0, got cube_edge={cube_edge} block_edge={block_edge}"
        )));
    }
    let (scaled, _) = scale_to_cube(scene, cube_edge)?;
    let cells = (cube_edge / block_edge).ceil() as i64;

    let mut groups: BTreeMap<[i64; 3], Vec<Point>> = BTreeMap::new();
    for p in scaled.points() {
        let mut key = [0i64; 3];
        for a in 0..3 {
            key[a] = ((p[a] / block_edge).floor() as i64).clamp(0, cells - 1);
        }
        groups.entry(key).or_default().push(*p);
    }

    let scale = 2.0 / block_edge;
    groups
        .into_iter()
        .map(|(index, pts)| {
            let origin = [
                index[0] as f64 * block_edge,
                index[1] as f64 * block_edge,
                index[2] as f64 * block_edge,
            ];
            let offset = [
                origin[0] + block_edge / 2.0,
                origin[1] + block_edge / 2.0,
                origin[2] + block_edge / 2.0,
            ];
            let normalized = pts
                .iter()
                .map(|p| {
                    [
                        (p[0] - offset[0]) * scale,
                        (p[1] - offset[1]) * scale,
                        (p[2] - offset[2]) * scale,
                    ]
                })
                .collect();
            Ok(Block {
                cloud: PointCloud::new(normalized)?,
                index,
                origin,
                edge_length: block_edge,
                offset,
                scale,
            })
        })
        .collect()
}
