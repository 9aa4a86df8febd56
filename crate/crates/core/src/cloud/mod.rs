//! Point-cloud data model and the data-preparation stages that feed the codec:
//! file I/O, scene partitioning into normalized blocks, synthetic surfaces,
//! density-skewed subsampling and the farthest-point baseline sampler.

mod blocks;
mod fps;
mod io;
mod synth;

pub use blocks::{partition_blocks, scale_to_cube, Block, CubeTransform};
pub use fps::fps;
pub use io::{load_cloud, write_cloud, write_ply, PlyEncoding};
pub use synth::{
    build_dataset, build_dataset_with_blocks, nonuniform_sample, normalize_unit, sample_surface, synth_dataset, BlockRecord, DataSource,
    DatasetSpec, SurfaceKind,
};

use crate::error::{Error, Result};

pub type Point = [f64; 3];

/// An ordered set of 3D points. Order is meaningful: every stage of the
/// pipeline keeps file order unless it explicitly subsamples.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Point>,
    pub source_id: Option<String>,
}

impl PointCloud {
    /// Validating constructor: at least one point, all coordinates finite.
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidArgument("point cloud must contain at least one point".into()));
        }
        if let Some(i) = points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::NonFinite(format!("point {i} has a non-finite coordinate")));
        }
        Ok(Self {
            points,
            source_id: None,
        })
    }

    pub fn with_source(mut self, id: impl Into<String>) -> Self {
        self.source_id = Some(id.into());
        self
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Point> {
        self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Axis-aligned bounds as (min, max).
    pub fn bounds(&self) -> (Point, Point) {
        bounds(&self.points)
    }

    /// Gathers the given rows into a new cloud.
    pub fn select(&self, indices: &[usize]) -> Result<PointCloud> {
        let pts = indices
            .iter()
            .map(|&i| {
                self.points
                    .get(i)
                    .copied()
                    .ok_or_else(|| Error::InvalidArgument(format!("index {i} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut out = PointCloud::new(pts)?;
        out.source_id = self.source_id.clone();
        Ok(out)
    }

    pub fn in_unit_box(&self, tol: f64) -> bool {
        self.points
            .iter()
            .all(|p| p.iter().all(|c| c.abs() <= 1.0 + tol))
    }
}

pub(crate) fn bounds(points: &[Point]) -> (Point, Point) {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in points {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    (lo, hi)
}

#[inline]
pub(crate) fn dist2(a: &Point, b: &Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_empty_and_non_finite() {
        assert!(PointCloud::new(vec![]).is_err());
        assert!(PointCloud::new(vec![[0.0, f64::NAN, 0.0]]).is_err());
        assert!(PointCloud::new(vec![[0.0, 1.0, 2.0]]).is_ok());
    }

    #[test]
    fn select_keeps_order() {
        let c = PointCloud::new(vec![[0.0; 3], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]]).unwrap();
        let s = c.select(&[2, 0]).unwrap();
        assert_eq!(s.points(), &[[2.0, 0.0, 0.0], [0.0; 3]]);
        assert!(c.select(&[3]).is_err());
    }
}
