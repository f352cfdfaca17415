//! Camera pose from 2D–3D correspondences: P3P hypotheses inside an
//! adaptive RANSAC loop, followed by Gauss-Newton refinement on inliers.

mod p3p;
mod refine;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{project, CameraIntrinsics, RigidTransform, Vec3};
use crate::scm::SceneCoordMap;

pub use p3p::{p3p_solve, real_polynomial_roots, P3P_TOLERANCE_PX};
pub use refine::{refine_pose, reprojection_rms};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PnpError {
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    #[error("no real solution")]
    NoRealSolution,
    #[error("need at least 4 correspondences, got {0}")]
    TooFewCorrespondences(usize),
    #[error("invalid ransac configuration: {0}")]
    InvalidConfig(String),
}

/// Pixel `(u, v)` in continuous image coordinates and its world point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub pixel: [f64; 2],
    pub world: Vec3,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RansacConfig {
    /// Inlier reprojection threshold in pixels.
    pub threshold: f64,
    pub confidence: f64,
    pub max_iterations: usize,
    pub min_inliers: usize,
    pub refine_iterations: usize,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            threshold: 10.0,
            confidence: 0.99,
            max_iterations: 1000,
            min_inliers: 12,
            refine_iterations: 20,
            seed: 0,
        }
    }
}

impl RansacConfig {
    pub fn validate(&self) -> Result<(), PnpError> {
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(PnpError::InvalidConfig(format!("confidence {} not in (0, 1)", self.confidence)));
        }
        if !(self.threshold > 0.0) {
            return Err(PnpError::InvalidConfig(format!("threshold {} must be positive", self.threshold)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseEstimate {
    pub pose: RigidTransform,
    pub inlier_count: usize,
    pub inlier_mask: Vec<bool>,
    /// Reprojection RMS over inliers, pixels.
    pub rms: f64,
    pub valid: bool,
}

impl PoseEstimate {
    pub fn invalid(n: usize) -> Self {
        Self {
            pose: RigidTransform::identity(),
            inlier_count: 0,
            inlier_mask: vec![false; n],
            rms: f64::INFINITY,
            valid: false,
        }
    }
}

fn reprojection_error(intr: &CameraIntrinsics, pose: &RigidTransform, c: &Correspondence) -> f64 {
    match project(intr, &pose.apply(&c.world)) {
        Ok((u, v, _)) => ((u - c.pixel[0]).powi(2) + (v - c.pixel[1]).powi(2)).sqrt(),
        Err(_) => f64::INFINITY,
    }
}

struct Scored {
    pose: RigidTransform,
    mask: Vec<bool>,
    count: usize,
    rms: f64,
}

fn score(intr: &CameraIntrinsics, pose: &RigidTransform, corrs: &[Correspondence], threshold: f64) -> Scored {
    let mut mask = Vec::with_capacity(corrs.len());
    let mut count = 0;
    let mut sq = 0.0;
    for c in corrs {
        let e = reprojection_error(intr, pose, c);
        let inlier = e < threshold;
        if inlier {
            count += 1;
            sq += e * e;
        }
        mask.push(inlier);
    }
    let rms = if count > 0 { (sq / count as f64).sqrt() } else { f64::INFINITY };
    Scored { pose: *pose, mask, count, rms }
}

fn better(a: &Scored, b: &Scored) -> bool {
    a.count > b.count || (a.count == b.count && a.rms < b.rms)
}

/// Adaptive RANSAC iteration bound `log(1 − p) / log(1 − w⁴)`.
pub fn required_iterations(confidence: f64, inlier_ratio: f64, cap: usize) -> usize {
    let w4 = inlier_ratio.clamp(0.0, 1.0).powi(4);
    if w4 <= 0.0 {
        return cap;
    }
    if w4 >= 1.0 {
        return 1;
    }
    let n = (1.0 - confidence).ln() / (1.0 - w4).ln();
    if !n.is_finite() {
        return cap;
    }
    (n.ceil().max(1.0) as usize).min(cap)
}

/// Robust pose estimation from correspondences.
///
/// Each hypothesis solves P3P on three sampled correspondences and keeps
/// the solution that best reprojects a fourth. The best hypothesis (most
/// inliers, then lowest inlier RMS) is refined on its inliers, inliers are
/// re-classified and the pose re-refined twice.
pub fn pnp_ransac(corrs: &[Correspondence], intr: &CameraIntrinsics, cfg: &RansacConfig) -> Result<PoseEstimate, PnpError> {
    if corrs.len() < 4 {
        return Err(PnpError::TooFewCorrespondences(corrs.len()));
    }
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<Scored> = None;
    let mut bound = cfg.max_iterations;
    let mut iteration = 0;
    while iteration < bound {
        iteration += 1;
        let pick = index::sample(&mut rng, corrs.len(), 4);
        let minimal = [corrs[pick.index(0)], corrs[pick.index(1)], corrs[pick.index(2)]];
        let check = &corrs[pick.index(3)];
        let Ok(solutions) = p3p_solve(&minimal, intr) else { continue };
        let pose = solutions
            .iter()
            .min_by(|a, b| reprojection_error(intr, a, check).total_cmp(&reprojection_error(intr, b, check)))
            .expect("p3p returns at least one solution");
        let scored = score(intr, pose, corrs, cfg.threshold);
        if best.as_ref().is_none_or(|b| better(&scored, b)) {
            let ratio = scored.count as f64 / corrs.len() as f64;
            bound = required_iterations(cfg.confidence, ratio, cfg.max_iterations);
            best = Some(scored);
        }
    }
    let Some(best) = best else {
        return Ok(PoseEstimate::invalid(corrs.len()));
    };

    let mut current = best;
    for _ in 0..3 {
        if current.count < 3 {
            break;
        }
        let inliers: Vec<&Correspondence> = corrs.iter().zip(&current.mask).filter(|(_, m)| **m).map(|(c, _)| c).collect();
        let refined = refine_pose(intr, &current.pose, &inliers, cfg.refine_iterations);
        let rescored = score(intr, &refined, corrs, cfg.threshold);
        if rescored.count < current.count {
            break;
        }
        current = rescored;
    }

    let valid = current.count >= cfg.min_inliers;
    Ok(PoseEstimate {
        pose: current.pose,
        inlier_count: current.count,
        inlier_mask: current.mask,
        rms: current.rms,
        valid,
    })
}

/// One correspondence per valid cell of a `stride`-pixel grid over a
/// full-resolution map. Cell `(i, j)` samples pixel
/// `(stride·i + stride/2, stride·j + stride/2)` and reports its center.
pub fn sample_correspondences(map: &SceneCoordMap, stride: u32) -> Vec<Correspondence> {
    let stride = stride.max(1);
    let mut out = Vec::new();
    for j in 0..map.height() / stride {
        for i in 0..map.width() / stride {
            let (x, y) = (stride * i + stride / 2, stride * j + stride / 2);
            if let Some(w) = map.get(x, y) {
                out.push(Correspondence {
                    pixel: [x as f64 + 0.5, y as f64 + 0.5],
                    world: Vec3::new(w[0] as f64, w[1] as f64, w[2] as f64),
                });
            }
        }
    }
    out
}

/// Correspondences from a stride-`stride` prediction grid. Cell `(i, j)`
/// stands for the pixel `(stride·i + stride/2, stride·j + stride/2)`, the
/// same pixel [`sample_correspondences`] reads on a full-resolution map.
pub fn grid_correspondences(map: &SceneCoordMap, stride: u32) -> Vec<Correspondence> {
    let stride = stride.max(1);
    map.valid_pixels()
        .map(|(i, j, w)| Correspondence {
            pixel: [(stride * i + stride / 2) as f64 + 0.5, (stride * j + stride / 2) as f64 + 0.5],
            world: Vec3::new(w[0] as f64, w[1] as f64, w[2] as f64),
        })
        .collect()
}
