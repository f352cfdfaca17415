//! Rigid alignment: closed-form least squares on corresponding points and
//! point-to-point ICP.

use nalgebra::{Matrix3, SVD};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{compose, RigidTransform, Rotation, Vec3};
use crate::pointcloud::{ColorPointCloud, SpatialIndex};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RegistrationError {
    #[error("need at least 3 point pairs, got {0}")]
    TooFewPoints(usize),
    #[error("{src} source points but {dst} destination points")]
    LengthMismatch { src: usize, dst: usize },
    #[error("source points are degenerate (rank of centered set < 2)")]
    DegenerateConfiguration,
    #[error("no correspondences within {max_distance} m at iteration {iteration}")]
    NoCorrespondences { iteration: usize, max_distance: f64 },
    #[error("empty point cloud")]
    EmptyCloud,
    #[error("invalid icp configuration: {0}")]
    InvalidConfig(String),
}

/// Least-squares rigid transform (no scale) with `dst ≈ R src + t`.
pub fn umeyama_rigid(src: &[Vec3], dst: &[Vec3]) -> Result<RigidTransform, RegistrationError> {
    if src.len() != dst.len() {
        return Err(RegistrationError::LengthMismatch { src: src.len(), dst: dst.len() });
    }
    if src.len() < 3 {
        return Err(RegistrationError::TooFewPoints(src.len()));
    }
    let n = src.len() as f64;
    let mu_s = src.iter().sum::<Vec3>() / n;
    let mu_d = dst.iter().sum::<Vec3>() / n;

    let mut cov = Matrix3::zeros();
    let mut spread = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        let (sc, dc) = (s - mu_s, d - mu_d);
        cov += dc * sc.transpose();
        spread += sc * sc.transpose();
    }

    let sv = spread.symmetric_eigenvalues();
    let mut sv: Vec<f64> = sv.iter().map(|v| v.max(0.0)).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    if sv[0] <= f64::MIN_POSITIVE || sv[1] <= 1e-12 * sv[0] {
        return Err(RegistrationError::DegenerateConfiguration);
    }

    let svd = SVD::new(cov, true, true);
    let u = svd.u.expect("svd computes u");
    let v_t = svd.v_t.expect("svd computes v_t");
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = u * d * v_t;
    let rotation = Rotation::from_matrix(&r);
    let translation = mu_d - rotation.rotate(&mu_s);
    Ok(RigidTransform::new(rotation, translation))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IcpConfig {
    pub max_iterations: usize,
    /// Stop once the per-iteration RMS change drops below this (meters).
    pub convergence: f64,
    pub max_correspondence_distance: f64,
    pub seed: u64,
}

impl Default for IcpConfig {
    fn default() -> Self {
        Self { max_iterations: 50, convergence: 1e-6, max_correspondence_distance: 0.5, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcpResult {
    /// Transform mapping `src` onto `dst`.
    pub transform: RigidTransform,
    pub rms: f64,
    pub iterations: usize,
    /// RMS over the matched pairs after each iteration's update.
    pub rms_history: Vec<f64>,
}

/// Point-to-point ICP of `src` onto `dst` starting from `init`.
///
/// Every iteration matches transformed source points to their nearest
/// destination point within the correspondence distance, solves the
/// closed-form alignment on those pairs and composes it onto the estimate.
/// Iteration stops when the RMS improvement of an update falls below the
/// convergence threshold.
pub fn icp(
    src: &ColorPointCloud,
    dst: &ColorPointCloud,
    dst_index: &SpatialIndex,
    init: &RigidTransform,
    cfg: &IcpConfig,
) -> Result<IcpResult, RegistrationError> {
    if src.is_empty() || dst.is_empty() || dst_index.is_empty() {
        return Err(RegistrationError::EmptyCloud);
    }
    if !(cfg.convergence > 0.0 && cfg.max_correspondence_distance > 0.0 && cfg.max_iterations > 0) {
        return Err(RegistrationError::InvalidConfig(format!("{cfg:?}")));
    }
    let max_d2 = cfg.max_correspondence_distance.powi(2);
    let mut transform = *init;
    let mut history = Vec::new();

    for iteration in 1..=cfg.max_iterations {
        let moved: Vec<Vec3> = src.positions().iter().map(|p| transform.apply(p)).collect();
        let matches: Vec<Option<usize>> = moved
            .par_iter()
            .map(|p| {
                let (j, d2) = dst_index.nearest_neighbor(p).expect("index is non-empty");
                (d2 <= max_d2).then_some(j)
            })
            .collect();
        let (from, to): (Vec<Vec3>, Vec<Vec3>) = moved
            .iter()
            .zip(&matches)
            .filter_map(|(p, m)| m.map(|j| (*p, *dst_index.point(j))))
            .unzip();
        if from.is_empty() {
            return Err(RegistrationError::NoCorrespondences {
                iteration,
                max_distance: cfg.max_correspondence_distance,
            });
        }
        let before = rms(&from, &to, &RigidTransform::identity());
        let step = match umeyama_rigid(&from, &to) {
            Ok(step) => step,
            // too few or degenerate matches: nothing further to solve
            Err(_) => {
                history.push(before);
                return Ok(IcpResult { transform, rms: before, iterations: iteration, rms_history: history });
            }
        };
        let after = rms(&from, &to, &step);
        // closed-form optimum on fixed pairs; guard against round-off
        let (after, step) = if after <= before { (after, step) } else { (before, RigidTransform::identity()) };
        transform = compose(&step, &transform);
        history.push(after);
        if before - after < cfg.convergence {
            return Ok(IcpResult { transform, rms: after, iterations: iteration, rms_history: history });
        }
    }
    let rms = *history.last().expect("at least one iteration ran");
    Ok(IcpResult { transform, rms, iterations: cfg.max_iterations, rms_history: history })
}

fn rms(from: &[Vec3], to: &[Vec3], t: &RigidTransform) -> f64 {
    let sum: f64 = from.iter().zip(to).map(|(a, b)| (t.apply(a) - b).norm_squared()).sum();
    (sum / from.len() as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_transform(rng: &mut ChaCha8Rng, max_angle: f64, max_t: f64) -> RigidTransform {
        let axis = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        RigidTransform::new(
            Rotation::from_axis_angle(&axis, rng.random_range(-max_angle..max_angle)),
            Vec3::new(rng.random_range(-max_t..max_t), rng.random_range(-max_t..max_t), rng.random_range(-max_t..max_t)),
        )
    }

    fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec3> {
        (0..n)
            .map(|_| Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect()
    }

    fn max_diff(a: &RigidTransform, b: &RigidTransform) -> f64 {
        (a.to_matrix() - b.to_matrix()).abs().max()
    }

    #[test]
    fn identity_on_equal_sets() {
        let src = vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 2.0, 0.0), Vec3::new(0.3, 0.1, 1.0)];
        let t = umeyama_rigid(&src, &src).unwrap();
        assert!(max_diff(&t, &RigidTransform::identity()) < 1e-9);
    }

    #[test]
    fn recovers_forward_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..50 {
            let t0 = random_transform(&mut rng, 3.1, 5.0);
            let src = random_points(&mut rng, 10);
            let dst: Vec<Vec3> = src.iter().map(|p| t0.rotation.matrix() * p + t0.translation).collect();
            let t = umeyama_rigid(&src, &dst).unwrap();
            assert!(max_diff(&t, &t0) < 1e-9);
        }
    }

    #[test]
    fn error_cases() {
        let p = vec![Vec3::zeros(), Vec3::x()];
        assert_eq!(umeyama_rigid(&p, &p), Err(RegistrationError::TooFewPoints(2)));
        let line: Vec<Vec3> = (0..5).map(|i| Vec3::new(i as f64, 2.0 * i as f64, 0.0)).collect();
        assert_eq!(umeyama_rigid(&line, &line), Err(RegistrationError::DegenerateConfiguration));
        let same = vec![Vec3::new(1.0, 1.0, 1.0); 4];
        assert_eq!(umeyama_rigid(&same, &same), Err(RegistrationError::DegenerateConfiguration));
        assert!(matches!(umeyama_rigid(&line, &line[..4]), Err(RegistrationError::LengthMismatch { .. })));
    }

    #[test]
    fn planar_sets_are_fine() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let src: Vec<Vec3> = (0..6).map(|_| Vec3::new(rng.random(), rng.random(), 0.0)).collect();
        let t0 = random_transform(&mut rng, 2.0, 1.0);
        let dst: Vec<Vec3> = src.iter().map(|p| t0.apply(p)).collect();
        assert!(max_diff(&umeyama_rigid(&src, &dst).unwrap(), &t0) < 1e-9);
    }

    fn cloud(points: Vec<Vec3>) -> ColorPointCloud {
        let n = points.len();
        ColorPointCloud::new(points, vec![[0; 3]; n]).unwrap()
    }

    #[test]
    fn icp_self_alignment() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let c = cloud(random_points(&mut rng, 200));
        let idx = SpatialIndex::new(&c);
        let r = icp(&c, &c, &idx, &RigidTransform::identity(), &IcpConfig::default()).unwrap();
        assert_eq!(r.iterations, 1);
        assert_eq!(r.rms, 0.0);
        assert!(max_diff(&r.transform, &RigidTransform::identity()) < 1e-12);
    }

    #[test]
    fn icp_recovers_perturbation() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let src = cloud(random_points(&mut rng, 1000));
        let t0 = random_transform(&mut rng, 0.5, 1.0);
        let dst = src.transformed(&t0);
        let idx = SpatialIndex::new(&dst);
        let noise = RigidTransform::new(
            Rotation::from_axis_angle(&Vec3::new(0.3, -1.0, 0.2), 8f64.to_radians()),
            Vec3::new(0.05, -0.04, 0.06),
        );
        let r = icp(&src, &dst, &idx, &compose(&noise, &t0), &IcpConfig::default()).unwrap();
        assert!(r.rms < 1e-3, "rms {}", r.rms);
        assert!(r.iterations <= 50);
        assert!(r.rms_history.windows(2).all(|w| w[1] <= w[0]));
        assert!(max_diff(&r.transform, &t0) < 1e-6);
    }

    #[test]
    fn icp_without_overlap() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let a = cloud(random_points(&mut rng, 50));
        let far = RigidTransform::new(Rotation::identity(), Vec3::new(100.0, 0.0, 0.0));
        let b = a.transformed(&far);
        let idx = SpatialIndex::new(&b);
        assert_eq!(
            icp(&a, &b, &idx, &RigidTransform::identity(), &IcpConfig::default()),
            Err(RegistrationError::NoCorrespondences { iteration: 1, max_distance: 0.5 })
        );
        let empty = ColorPointCloud::empty();
        assert_eq!(
            icp(&empty, &b, &idx, &RigidTransform::identity(), &IcpConfig::default()),
            Err(RegistrationError::EmptyCloud)
        );
    }

    proptest! {
        #[test]
        fn rotation_is_proper_and_left_equivariant(seed in any::<u64>(), n in 3usize..30) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let src = random_points(&mut rng, n);
            let dst: Vec<Vec3> = src.iter().map(|p| p + Vec3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3))).collect();
            let Ok(t) = umeyama_rigid(&src, &dst) else { return Ok(()) };
            let r = t.rotation.matrix();
            prop_assert!((r.transpose() * r - Matrix3::identity()).abs().max() < 1e-9);
            prop_assert!((r.determinant() - 1.0).abs() < 1e-9);

            let r1 = RigidTransform::new(Rotation::from_axis_angle(&Vec3::new(rng.random(), rng.random(), 1.0), rng.random_range(-3.0..3.0)), Vec3::zeros());
            let rotated: Vec<Vec3> = src.iter().map(|p| r1.apply(p)).collect();
            let t1 = umeyama_rigid(&rotated, &dst).unwrap();
            prop_assert!(max_diff(&compose(&t1, &r1), &t) < 1e-9);
        }
    }
}
