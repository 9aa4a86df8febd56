//! Geometry metrics: symmetric L2 Chamfer distance, PCA normals,
//! point-to-plane PSNR and bits-per-point accounting.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::cloud::{Point, PointCloud};
use crate::error::{Error, Result};
use crate::knn::KdTree;

pub const PSNR_CAP_DB: f64 = 100.0;
pub const DEFAULT_NORMAL_K: usize = 16;

/// Sum of the two directed mean squared nearest-neighbour distances.
pub fn chamfer_l2(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    chamfer_points(a.points(), b.points())
}

pub(crate) fn chamfer_points(a: &[Point], b: &[Point]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidArgument("chamfer distance of an empty cloud".into()));
    }
    Ok(directed_mean(a, b) + directed_mean(b, a))
}

fn directed_mean(from: &[Point], to: &[Point]) -> f64 {
    let tree = KdTree::new(to);
    from.iter().map(|p| tree.nearest(p).1).sum::<f64>() / from.len() as f64
}

#[derive(Debug, Clone)]
pub struct Normals {
    pub normals: Vec<Point>,
    /// Set where the neighbourhood covariance had rank < 2; such normals are +z.
    pub degenerate: Vec<bool>,
}

/// Per-point unit normal: eigenvector of the smallest eigenvalue of the
/// covariance of the point's `k` nearest neighbours (the point included).
pub fn estimate_normals(cloud: &PointCloud, k: usize) -> Result<Normals> {
    let pts = cloud.points();
    if k < 3 || k >= pts.len() {
        return Err(Error::InvalidArgument(format!(
            "normal estimation needs 3 <= k < N, got k={k}, N={}",
            pts.len()
        )));
    }
    let tree = KdTree::new(pts);
    let mut normals = Vec::with_capacity(pts.len());
    let mut degenerate = Vec::with_capacity(pts.len());
    for p in pts {
        let nb = tree.knn(p, k);
        let mut mean = Vector3::zeros();
        for &(i, _) in &nb {
            mean += Vector3::from(pts[i]);
        }
        mean /= nb.len() as f64;
        let mut cov = Matrix3::zeros();
        for &(i, _) in &nb {
            let d = Vector3::from(pts[i]) - mean;
            cov += d * d.transpose();
        }
        cov /= nb.len() as f64;
        let eig = SymmetricEigen::new(cov);
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let largest = eig.eigenvalues[order[2]];
        let middle = eig.eigenvalues[order[1]];
        if !(largest > 0.0) || middle <= 1e-12 * largest {
            normals.push([0.0, 0.0, 1.0]);
            degenerate.push(true);
            continue;
        }
        let v = eig.eigenvectors.column(order[0]).normalize();
        normals.push([v[0], v[1], v[2]]);
        degenerate.push(false);
    }
    Ok(Normals { normals, degenerate })
}

/// Rotation-invariant peak: diameter of the centroid-centred bounding sphere.
/// Equals the bounding-box diagonal for centrally symmetric boxes and grids.
pub fn psnr_peak(reference: &PointCloud) -> f64 {
    let pts = reference.points();
    let n = pts.len() as f64;
    let mut c = [0.0; 3];
    for p in pts {
        for a in 0..3 {
            c[a] += p[a] / n;
        }
    }
    2.0 * pts
        .iter()
        .map(|p| crate::cloud::dist2(p, &c))
        .fold(0.0, f64::max)
        .sqrt()
}

/// Symmetric point-to-plane PSNR using normals estimated on `reference`.
pub fn psnr_point_to_plane(reference: &PointCloud, reconstruction: &PointCloud, k: usize) -> Result<f64> {
    let r = reference.points();
    let q = reconstruction.points();
    if r.is_empty() || q.is_empty() {
        return Err(Error::InvalidArgument("PSNR of an empty cloud".into()));
    }
    let normals = estimate_normals(reference, k)?.normals;
    let proj = |d: Point, n: &Point| {
        let s = d[0] * n[0] + d[1] * n[1] + d[2] * n[2];
        s * s
    };
    let rec_tree = KdTree::new(q);
    let fwd = r
        .iter()
        .zip(&normals)
        .map(|(p, n)| {
            let j = rec_tree.nearest(p).0;
            proj([p[0] - q[j][0], p[1] - q[j][1], p[2] - q[j][2]], n)
        })
        .sum::<f64>()
        / r.len() as f64;
    let ref_tree = KdTree::new(r);
    let bwd = q
        .iter()
        .map(|p| {
            let i = ref_tree.nearest(p).0;
            proj([p[0] - r[i][0], p[1] - r[i][1], p[2] - r[i][2]], &normals[i])
        })
        .sum::<f64>()
        / q.len() as f64;
    let mse = (fwd + bwd) / 2.0;
    let peak = psnr_peak(reference);
    if mse <= 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB))
}

/// Payload bits (coordinate + feature streams, header excluded) per source point.
pub fn compute_bpp(payload_bits: u64, n_source_points: usize) -> Result<f64> {
    if n_source_points == 0 {
        return Err(Error::InvalidArgument("n_source_points must be at least 1".into()));
    }
    Ok(payload_bits as f64 / n_source_points as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub cd: f64,
    pub psnr_db: f64,
    pub bpp: f64,
    pub n_source_points: usize,
    pub payload_bits: u64,
    pub header_bits: u64,
}

impl MetricReport {
    pub fn evaluate(
        source: &PointCloud,
        reconstruction: &PointCloud,
        payload_bits: u64,
        header_bits: u64,
        normal_k: usize,
    ) -> Result<Self> {
        Ok(MetricReport {
            cd: chamfer_l2(source, reconstruction)?,
            psnr_db: psnr_point_to_plane(source, reconstruction, normal_k)?,
            bpp: compute_bpp(payload_bits, source.len())?,
            n_source_points: source.len(),
            payload_bits,
            header_bits,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::{sample_surface, SurfaceKind};
    use proptest::prelude::*;

    fn cloud(p: Vec<Point>) -> PointCloud {
        PointCloud::new(p).unwrap()
    }

    fn brute_chamfer(a: &[Point], b: &[Point]) -> f64 {
        let d = |x: &[Point], y: &[Point]| {
            x.iter()
                .map(|p| {
                    y.iter()
                        .map(|q| (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2))
                        .fold(f64::INFINITY, f64::min)
                })
                .sum::<f64>()
                / x.len() as f64
        };
        d(a, b) + d(b, a)
    }

    #[test]
    fn chamfer_examples() {
        let a = cloud(vec![[0.0; 3]]);
        let b = cloud(vec![[1.0, 0.0, 0.0]]);
        assert_eq!(chamfer_l2(&a, &b).unwrap(), 2.0);
        let a2 = cloud(vec![[0.0; 3], [2.0, 0.0, 0.0]]);
        assert_eq!(chamfer_l2(&a2, &b).unwrap(), 2.0);
        assert_eq!(chamfer_l2(&a2, &a2).unwrap(), 0.0);
    }

    #[test]
    fn plane_normals_are_z() {
        let pts: Vec<Point> = (0..100).map(|i| [(i % 10) as f64 * 0.1, (i / 10) as f64 * 0.1 + 0.013 * (i % 3) as f64, 0.0]).collect();
        let n = estimate_normals(&cloud(pts), 8).unwrap();
        for v in &n.normals {
            assert!(v[0].abs() < 1e-6 && v[1].abs() < 1e-6 && (v[2].abs() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn sphere_normals_follow_radius() {
        let c = sample_surface(SurfaceKind::Sphere, 2048, 5).unwrap();
        let n = estimate_normals(&c, 16).unwrap();
        for (p, v) in c.points().iter().zip(&n.normals) {
            let cos = (p[0] * v[0] + p[1] * v[1] + p[2] * v[2]).abs();
            assert!(cos >= 5f64.to_radians().cos(), "angle too large: cos={cos}");
            assert!(((v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn normals_reject_large_k_and_flag_lines() {
        let line = cloud((0..10).map(|i| [i as f64, 0.0, 0.0]).collect());
        assert!(estimate_normals(&line, 10).is_err());
        let n = estimate_normals(&line, 4).unwrap();
        assert!(n.degenerate.iter().all(|&d| d));
        assert!(n.normals.iter().all(|v| *v == [0.0, 0.0, 1.0]));
    }

    fn grid(z: f64) -> PointCloud {
        cloud((0..100).map(|i| [(i % 10) as f64, (i / 10) as f64, z]).collect())
    }

    #[test]
    fn psnr_grid_shift() {
        let v = psnr_point_to_plane(&grid(0.0), &grid(0.1), DEFAULT_NORMAL_K).unwrap();
        // MSE = 0.01, peak^2 = 162
        let expected = 10.0 * (162.0f64 / 0.01).log10();
        assert!((v - expected).abs() < 1e-9, "{v} vs {expected}");
        assert!((v - 42.0952).abs() < 1e-3);
        assert_eq!(psnr_point_to_plane(&grid(0.0), &grid(0.0), 16).unwrap(), PSNR_CAP_DB);
    }

    #[test]
    fn psnr_scale_invariant() {
        let a = sample_surface(SurfaceKind::Torus, 400, 2).unwrap();
        let b = sample_surface(SurfaceKind::Torus, 300, 2).unwrap();
        let s = 3.7;
        let scale = |c: &PointCloud| cloud(c.points().iter().map(|p| [p[0] * s, p[1] * s, p[2] * s]).collect());
        let v1 = psnr_point_to_plane(&a, &b, 16).unwrap();
        let v2 = psnr_point_to_plane(&scale(&a), &scale(&b), 16).unwrap();
        assert!((v1 - v2).abs() < 1e-9);
    }

    #[test]
    fn psnr_rotation_invariant() {
        let a = sample_surface(SurfaceKind::Box, 500, 9).unwrap();
        let b = cloud(a.points().iter().map(|p| [p[0] + 0.01 * p[1].sin(), p[1], p[2] - 0.02 * p[0]]).collect());
        let (s, c) = (0.7f64.sin(), 0.7f64.cos());
        let rot = |cl: &PointCloud| cloud(cl.points().iter().map(|p| [c * p[0] - s * p[2], p[1], s * p[0] + c * p[2]]).collect());
        let v1 = psnr_point_to_plane(&a, &b, 16).unwrap();
        let v2 = psnr_point_to_plane(&rot(&a), &rot(&b), 16).unwrap();
        assert!((v1 - v2).abs() < 1e-6, "{v1} vs {v2}");
    }

    #[test]
    fn bpp_accounting() {
        assert_eq!(compute_bpp(1963, 1000).unwrap(), 1.963);
        assert_eq!(compute_bpp(0, 10).unwrap(), 0.0);
        assert_eq!(compute_bpp(2 * 1963, 1000).unwrap(), 2.0 * 1.963);
        assert!(compute_bpp(1, 0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn chamfer_matches_brute_force_and_is_symmetric(
            a in prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), 1..128),
            b in prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), 1..128),
        ) {
            let (ca, cb) = (cloud(a.clone()), cloud(b.clone()));
            let fast = chamfer_l2(&ca, &cb).unwrap();
            let slow = brute_chamfer(&a, &b);
            prop_assert!((fast - slow).abs() <= 1e-9 * slow.max(1e-300));
            prop_assert_eq!(fast, chamfer_l2(&cb, &ca).unwrap());
        }
    }
}
