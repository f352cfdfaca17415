//! Procedural toy scene and the end-to-end relocalization run on it.
//!
//! The scene is an axis-aligned room (floor at z = 0) whose six faces are
//! sampled uniformly by area, each face carrying its own color gradient.
//! The end-to-end run renders test frames, feeds their rendered scene
//! coordinates (the oracle a perfect regressor would produce) to
//! PnP-RANSAC, and reports pose errors, once clean and once with a fraction
//! of coordinates replaced by uniform noise.

use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{aggregate, markdown_table, EvalError, EvalReport, PercentilePolicy, PoseError};
use crate::geometry::{CameraIntrinsics, Vec3};
use crate::parallel::worker_pool;
use crate::pnp::{pnp_ransac, sample_correspondences, PnpError, PoseEstimate, RansacConfig};
use crate::pointcloud::{bounding_box, ColorPointCloud};
use crate::renderer::{render_dataset, render_frame_with_retries, PoseSamplerConfig, RenderError, SplatConfig};
use crate::scm::SceneCoordMap;

#[derive(Debug, Error)]
pub enum ToyError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Pnp(#[from] PnpError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoomSpec {
    /// Extent along x, y, z in meters.
    pub size: [f64; 3],
    pub points: usize,
}

impl Default for RoomSpec {
    fn default() -> Self {
        Self { size: [6.0, 14.0, 3.0], points: 200_000 }
    }
}

impl RoomSpec {
    /// A compact room for quick tests.
    pub fn small() -> Self {
        Self { size: [3.0, 4.0, 3.0], points: 20_000 }
    }
}

/// Samples a colored box room with corners `(0, 0, 0)` and `size`.
pub fn box_room(spec: &RoomSpec, seed: u64) -> ColorPointCloud {
    let [sx, sy, sz] = spec.size;
    // (fixed axis, fixed value, in-plane axes, base color)
    let faces: [(usize, f64, [usize; 2], [f64; 3]); 6] = [
        (2, 0.0, [0, 1], [150.0, 110.0, 70.0]),
        (2, sz, [0, 1], [230.0, 230.0, 220.0]),
        (0, 0.0, [1, 2], [200.0, 60.0, 60.0]),
        (0, sx, [1, 2], [60.0, 170.0, 80.0]),
        (1, 0.0, [0, 2], [60.0, 90.0, 200.0]),
        (1, sy, [0, 2], [210.0, 190.0, 50.0]),
    ];
    let area = |f: &(usize, f64, [usize; 2], [f64; 3])| spec.size[f.2[0]] * spec.size[f.2[1]];
    let total: f64 = faces.iter().map(area).sum();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut positions = Vec::with_capacity(spec.points);
    let mut colors = Vec::with_capacity(spec.points);
    let mut assigned = 0;
    for (k, face) in faces.iter().enumerate() {
        let n = if k == faces.len() - 1 {
            spec.points - assigned
        } else {
            ((spec.points as f64) * area(face) / total).round() as usize
        }
        .min(spec.points - assigned);
        assigned += n;
        let (axis, value, [a, b], base) = *face;
        for _ in 0..n {
            let mut p = Vec3::zeros();
            p[axis] = value;
            p[a] = rng.random_range(0.0..spec.size[a]);
            p[b] = rng.random_range(0.0..spec.size[b]);
            let (ua, ub) = (p[a] / spec.size[a], p[b] / spec.size[b]);
            let stripe = if ((p[a] * 2.0).floor() as i64 + (p[b] * 2.0).floor() as i64) % 2 == 0 { 18.0 } else { -18.0 };
            let c = |ch: usize, ga: f64, gb: f64| (base[ch] + ga * (ua - 0.5) + gb * (ub - 0.5) + stripe).clamp(0.0, 255.0) as u8;
            positions.push(p);
            colors.push([c(0, 60.0, -30.0), c(1, -40.0, 50.0), c(2, 30.0, 40.0)]);
        }
    }
    ColorPointCloud::new(positions, colors).expect("room points are finite")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub room: RoomSpec,
    pub room_seed: u64,
    pub intrinsics: CameraIntrinsics,
    pub splat: SplatConfig,
    pub train_sampler: PoseSamplerConfig,
    pub test_sampler: PoseSamplerConfig,
    /// Training frames written to disk for an external trainer (only when
    /// an output directory is given).
    pub n_train: usize,
    pub n_test: usize,
    pub stride: u32,
    /// Fraction of valid test coordinates replaced by uniform noise in the
    /// corrupted variant.
    pub corruption: f64,
    pub corruption_seed: u64,
    pub ransac: RansacConfig,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            room: RoomSpec::default(),
            room_seed: 0,
            intrinsics: CameraIntrinsics { fx: 500.0, fy: 500.0, cx: 320.0, cy: 180.0, width: 640, height: 360 },
            splat: SplatConfig::default(),
            train_sampler: PoseSamplerConfig { seed: 1, ..Default::default() },
            test_sampler: PoseSamplerConfig { seed: 2, ..Default::default() },
            n_train: 20,
            n_test: 200,
            stride: 8,
            corruption: 0.4,
            corruption_seed: 3,
            ransac: RansacConfig::default(),
        }
    }
}

impl ToyConfig {
    /// Applies one seed to every stochastic stage, keeping stages distinct.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.room_seed = seed;
        self.train_sampler.seed = seed.wrapping_add(1);
        self.test_sampler.seed = seed.wrapping_add(2);
        self.corruption_seed = seed.wrapping_add(3);
        self.ransac.seed = seed.wrapping_add(4);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyReport {
    pub rows: Vec<EvalReport>,
    /// Re-sampling count per test frame.
    pub test_retries: Vec<u32>,
}

impl ToyReport {
    pub fn markdown(&self) -> String {
        markdown_table(&self.rows)
    }
}

/// Replaces `fraction` of the valid coordinates with points drawn uniformly
/// from the box `[lo, hi]`.
pub fn corrupt_map(map: &SceneCoordMap, fraction: f64, lo: &Vec3, hi: &Vec3, rng: &mut ChaCha8Rng) -> SceneCoordMap {
    let valid: Vec<(u32, u32)> = map.valid_pixels().map(|(x, y, _)| (x, y)).collect();
    let k = ((valid.len() as f64) * fraction.clamp(0.0, 1.0)).round() as usize;
    let mut out = map.clone();
    for i in index::sample(rng, valid.len(), k).into_iter() {
        let (x, y) = valid[i];
        let mut p = [0f32; 3];
        for (c, v) in p.iter_mut().enumerate() {
            *v = if hi[c] > lo[c] { rng.random_range(lo[c]..hi[c]) as f32 } else { lo[c] as f32 };
        }
        out.set(x, y, p);
    }
    out
}

fn solve(map: &SceneCoordMap, cfg: &ToyConfig, frame: usize) -> Result<PoseEstimate, PnpError> {
    let corrs = sample_correspondences(map, cfg.stride);
    if corrs.len() < 4 {
        return Ok(PoseEstimate::invalid(corrs.len()));
    }
    let ransac = RansacConfig { seed: cfg.ransac.seed.wrapping_add(frame as u64), ..cfg.ransac };
    pnp_ransac(&corrs, &cfg.intrinsics, &ransac)
}

/// Runs the oracle-coordinate pipeline; when `out_dir` is given, also
/// writes train/test datasets and `report.json` / `report.md` there.
pub fn run_e2e_toy(cfg: &ToyConfig, out_dir: Option<&Path>) -> Result<ToyReport, ToyError> {
    let room = box_room(&cfg.room, cfg.room_seed);
    let (lo, hi) = bounding_box(&room).map_err(|e| RenderError::InvalidSampler(e.to_string()))?;
    let test_sampler = cfg.test_sampler.with_cloud_bounds(&room)?;

    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        render_dataset(&room, &cfg.train_sampler, &cfg.intrinsics, &cfg.splat, cfg.n_train, dir.join("train"))?;
        render_dataset(&room, &test_sampler, &cfg.intrinsics, &cfg.splat, cfg.n_test, dir.join("test"))?;
    }

    type FrameResult = Result<(PoseError, PoseError, u32), ToyError>;
    let per_frame: Vec<FrameResult> = worker_pool().install(|| {
        (0..cfg.n_test)
            .into_par_iter()
            .map(|i| {
                let (frame, retries) = render_frame_with_retries(&room, &test_sampler, &cfg.intrinsics, &cfg.splat, i)?;
                let clean = solve(&frame.scmap, cfg, i)?;
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.corruption_seed);
                rng.set_stream(i as u64);
                let noisy_map = corrupt_map(&frame.scmap, cfg.corruption, &lo, &hi, &mut rng);
                let noisy = solve(&noisy_map, cfg, i)?;
                Ok((
                    PoseError::between(&frame.pose, &clean.pose, clean.valid),
                    PoseError::between(&frame.pose, &noisy.pose, noisy.valid),
                    retries,
                ))
            })
            .collect()
    });
    let mut clean = Vec::with_capacity(cfg.n_test);
    let mut noisy = Vec::with_capacity(cfg.n_test);
    let mut test_retries = Vec::with_capacity(cfg.n_test);
    for r in per_frame {
        let (c, n, k) = r?;
        clean.push(c);
        noisy.push(n);
        test_retries.push(k);
    }
    let pct = (cfg.corruption * 100.0).round();
    let report = ToyReport {
        rows: vec![
            aggregate(&clean, PercentilePolicy::Exclude)?.with_method("oracle scene coordinates"),
            aggregate(&noisy, PercentilePolicy::Exclude)?.with_method(format!("oracle + {pct}% corrupted")),
        ],
        test_retries,
    };
    if let Some(dir) = out_dir {
        fs::write(dir.join("report.json"), serde_json::to_string_pretty(&report)?)?;
        fs::write(dir.join("report.md"), report.markdown())?;
    }
    Ok(report)
}
