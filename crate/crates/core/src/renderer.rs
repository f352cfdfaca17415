//! Point-splatting renderer producing labeled scene-coordinate frames.
//!
//! Each point in front of the camera is drawn as a fronto-parallel disc at
//! its depth, with radius `max(1, round(k * fx / z))` pixels. A hard z-buffer
//! keeps the nearest disc per pixel. The scene coordinate written for a
//! pixel is the world position of the winning disc surface along that
//! pixel's center ray, so every valid pixel reprojects onto its own center.
//!
//! The world frame is z-up; sampled cameras look horizontally along their
//! yaw heading before pitch and roll are applied.

use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{project, unproject, CameraIntrinsics, RigidTransform, Rotation, Vec3};
use crate::manifest::{self, FrameRecord, ManifestError, PoseRecord};
use crate::parallel::worker_pool;
use crate::pointcloud::{bounding_box, ColorPointCloud};
use crate::scm::{SceneCoordMap, ScmError};

/// Minimum valid-pixel fraction for a rendered dataset frame.
pub const MIN_VALID_FRACTION: f64 = 0.05;
/// Re-sampling attempts allowed after the first pose of a frame.
pub const MAX_RETRIES: u32 = 10;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("image encoding failed: {0}")]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Scm(#[from] ScmError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error("invalid pose sampler configuration: {0}")]
    InvalidSampler(String),
    #[error("frame {frame}: no pose reached {min_fraction} valid pixels after {retries} retries")]
    SamplingExhausted { frame: usize, retries: u32, min_fraction: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplatConfig {
    /// Physical point size in meters.
    pub point_size: f64,
}

impl Default for SplatConfig {
    fn default() -> Self {
        Self { point_size: 0.01 }
    }
}

impl SplatConfig {
    pub fn radius_px(&self, focal: f64, depth: f64, cap: i64) -> i64 {
        let r = (self.point_size * focal / depth).round();
        if r.is_finite() {
            (r as i64).clamp(1, cap.max(1))
        } else {
            cap.max(1)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoseSamplerConfig {
    /// Camera-center box `[min, max]`; `None` means the cloud bounding box
    /// shrunk by `margin` on every side.
    pub aabb: Option<[[f64; 3]; 2]>,
    pub margin: f64,
    /// Camera height (world z) range in meters.
    pub height_range: [f64; 2],
    pub yaw_range_deg: [f64; 2],
    pub pitch_range_deg: [f64; 2],
    pub roll_range_deg: [f64; 2],
    pub seed: u64,
}

impl Default for PoseSamplerConfig {
    fn default() -> Self {
        Self {
            aabb: None,
            margin: 0.5,
            height_range: [1.0, 1.6],
            yaw_range_deg: [0.0, 360.0],
            pitch_range_deg: [-15.0, 15.0],
            roll_range_deg: [-5.0, 5.0],
            seed: 0,
        }
    }
}

impl PoseSamplerConfig {
    /// Fills in the default camera box from the cloud's bounds.
    pub fn with_cloud_bounds(mut self, cloud: &ColorPointCloud) -> Result<Self, RenderError> {
        if self.aabb.is_none() {
            let (lo, hi) = bounding_box(cloud).map_err(|e| RenderError::InvalidSampler(e.to_string()))?;
            let m = Vec3::repeat(self.margin);
            let (lo, hi) = (lo + m, hi - m);
            self.aabb = Some([[lo.x, lo.y, lo.z], [hi.x, hi.y, hi.z]]);
        }
        Ok(self)
    }

    fn resolved(&self) -> Result<ResolvedSampler, RenderError> {
        let bad = |m: String| Err(RenderError::InvalidSampler(m));
        let Some([lo, hi]) = self.aabb else {
            return bad("camera box is unset; call with_cloud_bounds first".into());
        };
        for k in 0..3 {
            if !(lo[k] <= hi[k]) {
                return bad(format!("camera box is empty along axis {k}: [{}, {}]", lo[k], hi[k]));
            }
        }
        let z_lo = self.height_range[0].max(lo[2]);
        let z_hi = self.height_range[1].min(hi[2]);
        if !(z_lo <= z_hi) {
            return bad(format!(
                "height range {:?} does not intersect camera box z-range [{}, {}]",
                self.height_range, lo[2], hi[2]
            ));
        }
        for (name, r) in [("yaw", self.yaw_range_deg), ("pitch", self.pitch_range_deg), ("roll", self.roll_range_deg)] {
            if !(r[0] <= r[1]) {
                return bad(format!("{name} range {r:?} is inverted"));
            }
        }
        Ok(ResolvedSampler {
            x: [lo[0], hi[0]],
            y: [lo[1], hi[1]],
            z: [z_lo, z_hi],
            yaw: self.yaw_range_deg,
            pitch: self.pitch_range_deg,
            roll: self.roll_range_deg,
            seed: self.seed,
        })
    }
}

#[derive(Debug, Clone, Copy)]
struct ResolvedSampler {
    x: [f64; 2],
    y: [f64; 2],
    z: [f64; 2],
    yaw: [f64; 2],
    pitch: [f64; 2],
    roll: [f64; 2],
    seed: u64,
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        // still consume a draw so streams stay aligned
        let _: f64 = rng.random();
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

/// Camera-to-world rotation for a z-up world: yaw about world z, then pitch
/// about the camera x axis, then roll about the optical axis.
pub fn camera_orientation(yaw_deg: f64, pitch_deg: f64, roll_deg: f64) -> Rotation {
    let base = nalgebra::Matrix3::new(0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0);
    Rotation::from_axis_angle(&Vec3::z(), yaw_deg.to_radians())
        .compose(&Rotation::from_matrix(&base))
        .compose(&Rotation::from_axis_angle(&Vec3::x(), pitch_deg.to_radians()))
        .compose(&Rotation::from_axis_angle(&Vec3::z(), roll_deg.to_radians()))
}

/// Deterministic per-frame pose stream; frame `i` always draws from ChaCha
/// stream `i` of the configured seed, independent of worker scheduling.
struct PoseStream {
    cfg: ResolvedSampler,
    rng: ChaCha8Rng,
}

impl PoseStream {
    fn new(cfg: ResolvedSampler, frame: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(frame as u64);
        Self { cfg, rng }
    }

    fn next_pose(&mut self) -> RigidTransform {
        let c = self.cfg;
        let rng = &mut self.rng;
        let center = Vec3::new(uniform(rng, c.x), uniform(rng, c.y), uniform(rng, c.z));
        let yaw = uniform(rng, c.yaw);
        let pitch = uniform(rng, c.pitch);
        let roll = uniform(rng, c.roll);
        RigidTransform::from_camera_center(&camera_orientation(yaw, pitch, roll), &center)
    }
}

pub fn sample_poses(cfg: &PoseSamplerConfig, n: usize) -> Result<Vec<RigidTransform>, RenderError> {
    let resolved = cfg.resolved()?;
    Ok((0..n).map(|i| PoseStream::new(resolved, i).next_pose()).collect())
}

/// A rendered RGB image with its dense scene-coordinate labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneCoordFrame {
    pub rgb: RgbImage,
    pub scmap: SceneCoordMap,
    pub pose: RigidTransform,
    pub intrinsics: CameraIntrinsics,
}

impl SceneCoordFrame {
    /// Largest distance in pixels between a valid pixel's center and the
    /// projection of its scene coordinate. Infinite if any labeled point
    /// is not in front of the camera; `None` without valid pixels.
    pub fn max_reprojection_error(&self) -> Option<f64> {
        let mut worst: Option<f64> = None;
        for (x, y, w) in self.scmap.valid_pixels() {
            let world = Vec3::new(w[0] as f64, w[1] as f64, w[2] as f64);
            let err = match project(&self.intrinsics, &self.pose.apply(&world)) {
                Ok((u, v, _)) => ((u - (x as f64 + 0.5)).powi(2) + (v - (y as f64 + 0.5)).powi(2)).sqrt(),
                Err(_) => f64::INFINITY,
            };
            worst = Some(worst.map_or(err, |e| e.max(err)));
        }
        worst
    }
}

pub fn render(
    cloud: &ColorPointCloud,
    pose: &RigidTransform,
    intr: &CameraIntrinsics,
    cfg: &SplatConfig,
) -> SceneCoordFrame {
    let (w, h) = (intr.width as i64, intr.height as i64);
    let n = (w * h) as usize;
    let mut depth = vec![f64::INFINITY; n];
    let mut winner = vec![usize::MAX; n];
    let cap = w.max(h);

    for (i, p) in cloud.positions().iter().enumerate() {
        let pc = pose.apply(p);
        let Ok((u, v, z)) = project(intr, &pc) else { continue };
        if !(u.is_finite() && v.is_finite()) {
            continue;
        }
        let r = cfg.radius_px(intr.fx, z, cap);
        let (px, py) = (u.floor(), v.floor());
        if px + (r as f64) < 0.0 || py + (r as f64) < 0.0 || px - (r as f64) >= w as f64 || py - (r as f64) >= h as f64 {
            continue;
        }
        let (px, py) = (px as i64, py as i64);
        let r2 = r * r;
        for y in (py - r).max(0)..=(py + r).min(h - 1) {
            let dy = y - py;
            let rem = r2 - dy * dy;
            if rem < 0 {
                continue;
            }
            let half = (rem as f64).sqrt().floor() as i64;
            for x in (px - half).max(0)..=(px + half).min(w - 1) {
                let k = (y * w + x) as usize;
                if z < depth[k] {
                    depth[k] = z;
                    winner[k] = i;
                }
            }
        }
    }

    let mut rgb = RgbImage::new(intr.width, intr.height);
    let mut scmap = SceneCoordMap::new(intr.width, intr.height);
    let cam_to_world = pose.inverse();
    for y in 0..intr.height {
        for x in 0..intr.width {
            let k = y as usize * intr.width as usize + x as usize;
            let i = winner[k];
            if i == usize::MAX {
                continue;
            }
            let ray = unproject(intr, x as f64 + 0.5, y as f64 + 0.5, depth[k]).expect("z-buffer depth is positive");
            let world = cam_to_world.apply(&ray);
            scmap.set(x, y, [world.x as f32, world.y as f32, world.z as f32]);
            rgb.put_pixel(x, y, image::Rgb(cloud.colors()[i]));
        }
    }
    SceneCoordFrame { rgb, scmap, pose: *pose, intrinsics: *intr }
}

/// Result of [`render_dataset`].
#[derive(Debug, Clone)]
pub struct RenderedDataset {
    pub manifest: PathBuf,
    /// Re-sampling count per frame.
    pub retries: Vec<u32>,
}

pub fn frame_id(i: usize) -> String {
    format!("{i:06}")
}

/// Renders one frame, re-sampling its pose until it has enough valid pixels.
pub fn render_frame_with_retries(
    cloud: &ColorPointCloud,
    sampler: &PoseSamplerConfig,
    intr: &CameraIntrinsics,
    splat: &SplatConfig,
    frame: usize,
) -> Result<(SceneCoordFrame, u32), RenderError> {
    let mut stream = PoseStream::new(sampler.resolved()?, frame);
    for attempt in 0..=MAX_RETRIES {
        let pose = stream.next_pose();
        let rendered = render(cloud, &pose, intr, splat);
        if rendered.scmap.valid_fraction() >= MIN_VALID_FRACTION {
            return Ok((rendered, attempt));
        }
    }
    Err(RenderError::SamplingExhausted { frame, retries: MAX_RETRIES, min_fraction: MIN_VALID_FRACTION })
}

/// Renders `n` frames into `out_dir` (`rgb/*.png`, `scmap/*.scm`) and writes
/// `out_dir/manifest.jsonl` in frame order.
pub fn render_dataset(
    cloud: &ColorPointCloud,
    sampler: &PoseSamplerConfig,
    intr: &CameraIntrinsics,
    splat: &SplatConfig,
    n: usize,
    out_dir: impl AsRef<Path>,
) -> Result<RenderedDataset, RenderError> {
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir.join("rgb"))?;
    fs::create_dir_all(out_dir.join("scmap"))?;
    let sampler = sampler.with_cloud_bounds(cloud)?;
    sampler.resolved()?;

    let results: Vec<Result<(FrameRecord, u32), RenderError>> = worker_pool().install(|| {
        (0..n)
            .into_par_iter()
            .map(|i| {
                let (frame, retries) = render_frame_with_retries(cloud, &sampler, intr, splat, i)?;
                let id = frame_id(i);
                let rgb = format!("rgb/{id}.png");
                let scmap = format!("scmap/{id}.scm");
                frame.rgb.save(out_dir.join(&rgb))?;
                frame.scmap.save(out_dir.join(&scmap))?;
                Ok((
                    FrameRecord {
                        id,
                        rgb,
                        scmap: Some(scmap),
                        pose: Some(PoseRecord::from(&frame.pose)),
                        intrinsics: *intr,
                    },
                    retries,
                ))
            })
            .collect()
    });

    let mut records = Vec::with_capacity(n);
    let mut retries = Vec::with_capacity(n);
    for r in results {
        let (rec, k) = r?;
        if k > 0 {
            log::info!("frame {} re-sampled {k} time(s)", rec.id);
        }
        records.push(rec);
        retries.push(k);
    }
    log::info!("rendered {n} frames, {} re-samples in total", retries.iter().sum::<u32>());
    let manifest_path = out_dir.join("manifest.jsonl");
    manifest::save_records(&records, &manifest_path)?;
    Ok(RenderedDataset { manifest: manifest_path, retries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::DatasetManifest;
    use crate::toy::{box_room, RoomSpec};

    fn intr() -> CameraIntrinsics {
        CameraIntrinsics::new(500.0, 500.0, 320.0, 180.0, 640, 360).unwrap()
    }

    fn small_intr() -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, 100.0, 32.0, 24.0, 64, 48).unwrap()
    }

    fn single(p: Vec3, c: [u8; 3]) -> ColorPointCloud {
        ColorPointCloud::new(vec![p], vec![c]).unwrap()
    }

    #[test]
    fn empty_cloud_renders_nothing() {
        let f = render(&ColorPointCloud::empty(), &RigidTransform::identity(), &intr(), &SplatConfig::default());
        assert_eq!(f.scmap.valid_count(), 0);
        assert!(f.rgb.pixels().all(|p| p.0 == [0, 0, 0]));
        assert_eq!(f.max_reprojection_error(), None);
    }

    #[test]
    fn single_point_draws_expected_disc() {
        let k = small_intr();
        // pixel (10, 7) center at depth 2 -> radius round(0.01 * 100 / 2) = 1 -> clamp 1
        let p = unproject(&k, 10.5, 7.5, 2.0).unwrap();
        let f = render(&single(p, [9, 8, 7]), &RigidTransform::identity(), &k, &SplatConfig::default());
        let mut expected = Vec::new();
        for y in 0..k.height as i64 {
            for x in 0..k.width as i64 {
                if (x - 10).pow(2) + (y - 7).pow(2) <= 1 {
                    expected.push((x as u32, y as u32));
                }
            }
        }
        let got: Vec<(u32, u32)> = f.scmap.valid_pixels().map(|(x, y, _)| (x, y)).collect();
        assert_eq!(got, expected);
        let center = f.scmap.get(10, 7).unwrap();
        for k in 0..3 {
            assert!((center[k] as f64 - p[k]).abs() < 1e-6);
        }
        assert_eq!(f.rgb.get_pixel(10, 7).0, [9, 8, 7]);

        // larger splat: radius round(0.05 * 100 / 2) = 3 (2.5 rounds away from zero)
        let cfg = SplatConfig { point_size: 0.05 };
        let f = render(&single(p, [1, 1, 1]), &RigidTransform::identity(), &k, &cfg);
        let disc = (-3i64..=3).flat_map(|dy| (-3i64..=3).map(move |dx| (dx, dy))).filter(|(dx, dy)| dx * dx + dy * dy <= 9).count();
        assert_eq!(f.scmap.valid_count(), disc);
        assert!(f.max_reprojection_error().unwrap() < 1e-4);
    }

    #[test]
    fn nearest_point_wins() {
        let k = small_intr();
        let near = unproject(&k, 20.5, 20.5, 1.0).unwrap();
        let far = near * 2.0;
        let cloud = ColorPointCloud::new(vec![far, near], vec![[0, 0, 255], [255, 0, 0]]).unwrap();
        let f = render(&cloud, &RigidTransform::identity(), &k, &SplatConfig::default());
        assert_eq!(f.rgb.get_pixel(20, 20).0, [255, 0, 0]);
        let w = f.scmap.get(20, 20).unwrap();
        assert!((w[2] as f64 - 1.0).abs() < 1e-6);
    }

    #[test]
    fn points_behind_winner_change_nothing() {
        let k = small_intr();
        let room = box_room(&RoomSpec { points: 5000, ..RoomSpec::small() }, 3);
        let pose = sample_poses(&PoseSamplerConfig::default().with_cloud_bounds(&room).unwrap(), 1).unwrap()[0];
        let base = render(&room, &pose, &k, &SplatConfig::default());
        // push every point strictly further along its camera ray
        let cam_to_world = pose.inverse();
        let behind: Vec<Vec3> = room
            .positions()
            .iter()
            .map(|p| cam_to_world.apply(&(pose.apply(p) * 1.5)))
            .collect();
        let (mut pos, mut col) = room.clone().into_parts();
        pos.extend(behind);
        col.extend(std::iter::repeat_n([1, 2, 3], room.len()));
        let more = render(&ColorPointCloud::new(pos, col).unwrap(), &pose, &k, &SplatConfig::default());
        for (x, y, w) in base.scmap.valid_pixels() {
            assert_eq!(more.scmap.get(x, y), Some(w));
            assert_eq!(more.rgb.get_pixel(x, y), base.rgb.get_pixel(x, y));
        }
    }

    #[test]
    fn sampler_is_deterministic_and_bounded() {
        let room = box_room(&RoomSpec::small(), 1);
        let cfg = PoseSamplerConfig { seed: 99, ..Default::default() }.with_cloud_bounds(&room).unwrap();
        assert!(sample_poses(&cfg, 0).unwrap().is_empty());
        let a = sample_poses(&cfg, 50).unwrap();
        assert_eq!(a, sample_poses(&cfg, 50).unwrap());
        let [lo, hi] = cfg.aabb.unwrap();
        for p in &a {
            let c = p.camera_center();
            for k in 0..3 {
                assert!(c[k] >= lo[k] - 1e-9 && c[k] <= hi[k] + 1e-9);
            }
            assert!(c.z >= 1.0 - 1e-9 && c.z <= 1.6 + 1e-9);
        }
        assert!(matches!(sample_poses(&PoseSamplerConfig::default(), 1), Err(RenderError::InvalidSampler(_))));
    }

    #[test]
    fn yaw_is_uniform() {
        let cfg = PoseSamplerConfig { aabb: Some([[0.0; 3], [1.0, 1.0, 2.0]]), seed: 7, ..Default::default() };
        let n = 10_000;
        let mut bins = [0usize; 36];
        for p in sample_poses(&cfg, n).unwrap() {
            let fwd = p.rotation.inverse().rotate(&Vec3::z());
            let yaw = fwd.y.atan2(fwd.x).to_degrees().rem_euclid(360.0);
            bins[((yaw / 10.0) as usize).min(35)] += 1;
        }
        let pbin = 1.0 / 36.0;
        let mean = n as f64 * pbin;
        let sigma = (n as f64 * pbin * (1.0 - pbin)).sqrt();
        for (i, &b) in bins.iter().enumerate() {
            assert!((b as f64 - mean).abs() <= 3.0 * sigma, "bin {i}: {b} vs {mean} ± {sigma}");
        }
    }

    #[test]
    fn orientation_yaw_zero_looks_along_x() {
        let r = camera_orientation(0.0, 0.0, 0.0);
        assert!((r.rotate(&Vec3::z()) - Vec3::x()).norm() < 1e-12);
        assert!((r.rotate(&Vec3::y()) + Vec3::z()).norm() < 1e-12);
        let up = camera_orientation(90.0, 10.0, 0.0).rotate(&Vec3::z());
        assert!(up.z > 0.17 && up.y > 0.98);
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let room = box_room(&RoomSpec::small(), 2);
        let k = small_intr();
        let cfg = PoseSamplerConfig { seed: 5, ..Default::default() };
        let empty = render_dataset(&room, &cfg, &k, &SplatConfig::default(), 0, dir.path().join("empty")).unwrap();
        assert_eq!(fs::read_to_string(empty.manifest).unwrap(), "");

        let out = render_dataset(&room, &cfg, &k, &SplatConfig::default(), 3, dir.path().join("ds")).unwrap();
        let m = DatasetManifest::load(&out.manifest).unwrap();
        assert_eq!(m.frames.len(), 3);
        let poses = sample_poses(&cfg.with_cloud_bounds(&room).unwrap(), 3).unwrap();
        for (i, rec) in m.frames.iter().enumerate() {
            assert_eq!(rec.intrinsics, k);
            let scmap = SceneCoordMap::load(m.resolve(rec.scmap.as_ref().unwrap())).unwrap();
            let rgb = image::open(m.resolve(&rec.rgb)).unwrap().to_rgb8();
            let pose = rec.transform().unwrap().unwrap();
            if out.retries[i] == 0 {
                assert_eq!(pose, poses[i]);
            }
            let frame = SceneCoordFrame { rgb, scmap, pose, intrinsics: rec.intrinsics };
            assert!(frame.scmap.valid_fraction() >= MIN_VALID_FRACTION);
            assert!(frame.max_reprojection_error().unwrap() <= 0.5);
            let again = render(&room, &pose, &k, &SplatConfig::default());
            assert_eq!(again, frame);
        }
    }

    #[test]
    fn exhausted_sampling() {
        // cameras far outside a tiny cloud never see enough of it
        let cloud = single(Vec3::new(100.0, 0.0, 0.0), [1, 1, 1]);
        let cfg = PoseSamplerConfig { aabb: Some([[0.0; 3], [1.0, 1.0, 2.0]]), ..Default::default() };
        let dir = tempfile::tempdir().unwrap();
        let err = render_dataset(&cloud, &cfg, &small_intr(), &SplatConfig::default(), 1, dir.path()).unwrap_err();
        assert!(matches!(err, RenderError::SamplingExhausted { frame: 0, retries: 10, .. }));
    }
}
