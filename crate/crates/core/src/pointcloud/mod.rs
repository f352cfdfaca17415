//! Colored point clouds: ingestion, transformation, merging and exact
//! nearest-neighbor search.

mod kdtree;
mod ply;

use std::collections::HashSet;

use thiserror::Error;

use crate::geometry::{RigidTransform, Vec3};

pub use kdtree::SpatialIndex;
pub use ply::{load_ply, read_ply, save_ply, write_ply};

#[derive(Debug, Error)]
pub enum PointCloudError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("ply parse error: {0}")]
    Parse(String),
    #[error("ply vertex element lacks property `{0}`")]
    MissingProperty(String),
    #[error("{clouds} clouds but {transforms} transforms")]
    LengthMismatch { clouds: usize, transforms: usize },
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("spatial index is empty")]
    EmptyIndex,
    #[error("non-finite coordinate at point {0}")]
    NonFinite(usize),
    #[error("{positions} positions but {colors} colors")]
    SizeMismatch { positions: usize, colors: usize },
}

/// Point positions in meters with one 8-bit RGB color per point.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ColorPointCloud {
    positions: Vec<Vec3>,
    colors: Vec<[u8; 3]>,
}

impl ColorPointCloud {
    pub fn new(positions: Vec<Vec3>, colors: Vec<[u8; 3]>) -> Result<Self, PointCloudError> {
        if positions.len() != colors.len() {
            return Err(PointCloudError::SizeMismatch {
                positions: positions.len(),
                colors: colors.len(),
            });
        }
        if let Some(i) = positions.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(PointCloudError::NonFinite(i));
        }
        Ok(Self { positions, colors })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[Vec3] {
        &self.positions
    }

    pub fn colors(&self) -> &[[u8; 3]] {
        &self.colors
    }

    pub fn transformed(&self, t: &RigidTransform) -> Self {
        Self {
            positions: self.positions.iter().map(|p| t.apply(p)).collect(),
            colors: self.colors.clone(),
        }
    }

    pub fn into_parts(self) -> (Vec<Vec3>, Vec<[u8; 3]>) {
        (self.positions, self.colors)
    }
}

/// Concatenates clouds after applying each one's transform to its positions.
/// Identity transforms copy coordinates untouched.
pub fn merge(clouds: &[ColorPointCloud], transforms: &[RigidTransform]) -> Result<ColorPointCloud, PointCloudError> {
    if clouds.len() != transforms.len() {
        return Err(PointCloudError::LengthMismatch {
            clouds: clouds.len(),
            transforms: transforms.len(),
        });
    }
    let total = clouds.iter().map(ColorPointCloud::len).sum();
    let mut positions = Vec::with_capacity(total);
    let mut colors = Vec::with_capacity(total);
    for (cloud, t) in clouds.iter().zip(transforms) {
        if *t == RigidTransform::identity() {
            positions.extend_from_slice(&cloud.positions);
        } else {
            positions.extend(cloud.positions.iter().map(|p| t.apply(p)));
        }
        colors.extend_from_slice(&cloud.colors);
    }
    Ok(ColorPointCloud { positions, colors })
}

pub fn bounding_box(cloud: &ColorPointCloud) -> Result<(Vec3, Vec3), PointCloudError> {
    let first = cloud.positions.first().ok_or(PointCloudError::EmptyCloud)?;
    Ok(cloud.positions.iter().fold((*first, *first), |(lo, hi), p| (lo.inf(p), hi.sup(p))))
}

/// Keeps the first point falling in each cubic voxel of side `voxel` meters.
pub fn voxel_downsample(cloud: &ColorPointCloud, voxel: f64) -> ColorPointCloud {
    assert!(voxel > 0.0, "voxel size must be positive");
    let mut seen: HashSet<[i64; 3]> = HashSet::with_capacity(cloud.len());
    let mut out = ColorPointCloud::empty();
    for (p, c) in cloud.positions.iter().zip(&cloud.colors) {
        let key = [
            (p.x / voxel).floor() as i64,
            (p.y / voxel).floor() as i64,
            (p.z / voxel).floor() as i64,
        ];
        if seen.insert(key) {
            out.positions.push(*p);
            out.colors.push(*c);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Rotation;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> ColorPointCloud {
        let positions = (0..n)
            .map(|_| Vec3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(0.0..3.0)))
            .collect();
        let colors = (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        ColorPointCloud::new(positions, colors).unwrap()
    }

    fn random_transform(rng: &mut ChaCha8Rng) -> RigidTransform {
        let axis = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        RigidTransform::new(
            Rotation::from_axis_angle(&axis, rng.random_range(-3.0..3.0)),
            Vec3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)),
        )
    }

    #[test]
    fn construction_checks() {
        assert!(matches!(
            ColorPointCloud::new(vec![Vec3::zeros()], vec![]),
            Err(PointCloudError::SizeMismatch { .. })
        ));
        assert!(matches!(
            ColorPointCloud::new(vec![Vec3::new(f64::NAN, 0.0, 0.0)], vec![[0; 3]]),
            Err(PointCloudError::NonFinite(0))
        ));
    }

    #[test]
    fn merge_single_identity_is_noop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = random_cloud(&mut rng, 50);
        assert_eq!(merge(std::slice::from_ref(&c), &[RigidTransform::identity()]).unwrap(), c);
    }

    #[test]
    fn merge_concatenates() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (a, b) = (random_cloud(&mut rng, 30), random_cloud(&mut rng, 20));
        let m = merge(&[a.clone(), b.clone()], &[RigidTransform::identity(); 2]).unwrap();
        assert_eq!(m.len(), 50);
        assert_eq!(&m.positions()[..30], a.positions());
        assert_eq!(&m.positions()[30..], b.positions());
        assert_eq!(&m.colors()[30..], b.colors());
    }

    #[test]
    fn merge_applies_transforms_per_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let clouds = [random_cloud(&mut rng, 100), random_cloud(&mut rng, 100)];
        let ts = [random_transform(&mut rng), random_transform(&mut rng)];
        let m = merge(&clouds, &ts).unwrap();
        for (k, (cloud, t)) in clouds.iter().zip(&ts).enumerate() {
            let r = t.rotation.matrix();
            for (i, p) in cloud.positions().iter().enumerate() {
                let oracle = r * p + t.translation;
                assert!((m.positions()[k * 100 + i] - oracle).norm() < 1e-12);
                assert_eq!(m.colors()[k * 100 + i], cloud.colors()[i]);
            }
        }
    }

    #[test]
    fn merge_length_mismatch() {
        assert!(matches!(
            merge(&[ColorPointCloud::empty()], &[]),
            Err(PointCloudError::LengthMismatch { clouds: 1, transforms: 0 })
        ));
    }

    #[test]
    fn bounding_box_cases() {
        let p = Vec3::new(1.0, -2.0, 0.5);
        let single = ColorPointCloud::new(vec![p], vec![[0; 3]]).unwrap();
        assert_eq!(bounding_box(&single).unwrap(), (p, p));
        let two = ColorPointCloud::new(vec![Vec3::zeros(), Vec3::new(1.0, 2.0, 3.0)], vec![[0; 3]; 2]).unwrap();
        assert_eq!(bounding_box(&two).unwrap(), (Vec3::zeros(), Vec3::new(1.0, 2.0, 3.0)));
        assert!(matches!(bounding_box(&ColorPointCloud::empty()), Err(PointCloudError::EmptyCloud)));

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = random_cloud(&mut rng, 1000);
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in c.positions() {
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        let (blo, bhi) = bounding_box(&c).unwrap();
        assert_eq!(blo, Vec3::from(lo));
        assert_eq!(bhi, Vec3::from(hi));
    }

    #[test]
    fn voxel_downsample_keeps_first() {
        let c = ColorPointCloud::new(
            vec![Vec3::new(0.001, 0.001, 0.001), Vec3::new(0.002, 0.002, 0.002), Vec3::new(0.011, 0.0, 0.0)],
            vec![[1, 1, 1], [2, 2, 2], [3, 3, 3]],
        )
        .unwrap();
        let d = voxel_downsample(&c, 0.005);
        assert_eq!(d.len(), 2);
        assert_eq!(d.colors(), &[[1, 1, 1], [3, 3, 3]]);
    }
}
