//! JSONL dataset manifests: one frame record per line.
//!
//! ```json
//! {"id":"000000","rgb":"rgb/000000.png","scmap":"scmap/000000.scm",
//!  "pose":{"q":[w,x,y,z],"t":[tx,ty,tz]},
//!  "intrinsics":{"fx":..,"fy":..,"cx":..,"cy":..,"width":..,"height":..}}
//! ```
//!
//! Paths are relative to the manifest's directory. A `null` pose marks an
//! unlabeled photo; unlabeled photos usually carry a `null` scmap too.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{CameraIntrinsics, RigidTransform, Rotation, Vec3};

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Json { line: usize, source: serde_json::Error },
    #[error("line {line}: {msg}")]
    Invalid { line: usize, msg: String },
}

/// Pose as stored on disk: world-to-camera quaternion `[w, x, y, z]` and
/// translation in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub q: [f64; 4],
    pub t: [f64; 3],
}

impl From<&RigidTransform> for PoseRecord {
    fn from(t: &RigidTransform) -> Self {
        PoseRecord {
            q: t.rotation.wxyz(),
            t: [t.translation.x, t.translation.y, t.translation.z],
        }
    }
}

impl PoseRecord {
    pub fn to_transform(&self) -> Result<RigidTransform, String> {
        let [w, x, y, z] = self.q;
        let norm = (w * w + x * x + y * y + z * z).sqrt();
        if !((norm - 1.0).abs() <= 1e-6) {
            return Err(format!("quaternion norm {norm} is not 1"));
        }
        if !self.t.iter().all(|v| v.is_finite()) {
            return Err("non-finite translation".into());
        }
        let rotation = Rotation::from_wxyz(w, x, y, z).map_err(|e| e.to_string())?;
        Ok(RigidTransform::new(rotation, Vec3::from(self.t)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameRecord {
    pub id: String,
    pub rgb: String,
    #[serde(default)]
    pub scmap: Option<String>,
    pub pose: Option<PoseRecord>,
    pub intrinsics: CameraIntrinsics,
}

impl FrameRecord {
    pub fn transform(&self) -> Option<Result<RigidTransform, String>> {
        self.pose.as_ref().map(PoseRecord::to_transform)
    }
}

/// A loaded manifest, with the directory its relative paths resolve against.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub frames: Vec<FrameRecord>,
}

impl DatasetManifest {
    pub fn resolve(&self, relative: &str) -> PathBuf {
        self.root.join(relative)
    }

    /// Reads and validates a manifest: referenced files must exist,
    /// quaternions must be unit within 1e-6 and intrinsics well-formed.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ManifestError> {
        let path = path.as_ref();
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let frames = read_records(BufReader::new(File::open(path)?))?;
        let manifest = Self { root, frames };
        for (i, f) in manifest.frames.iter().enumerate() {
            let line = i + 1;
            let invalid = |msg: String| ManifestError::Invalid { line, msg };
            f.intrinsics.validate().map_err(|e| invalid(e.to_string()))?;
            if let Some(Err(e)) = f.transform() {
                return Err(invalid(e));
            }
            for rel in std::iter::once(&f.rgb).chain(f.scmap.as_ref()) {
                if !manifest.resolve(rel).is_file() {
                    return Err(invalid(format!("referenced file `{rel}` does not exist")));
                }
            }
        }
        Ok(manifest)
    }
}

/// Parses JSONL records without touching the filesystem.
pub fn read_records<R: BufRead>(reader: R) -> Result<Vec<FrameRecord>, ManifestError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| ManifestError::Json { line: line_no, source })?);
    }
    Ok(out)
}

pub fn write_records<W: Write>(records: &[FrameRecord], mut w: W) -> Result<(), ManifestError> {
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|source| ManifestError::Json { line: 0, source })?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_records(records: &[FrameRecord], path: impl AsRef<Path>) -> Result<(), ManifestError> {
    write_records(records, BufWriter::new(File::create(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn intr() -> CameraIntrinsics {
        CameraIntrinsics::new(500.0, 500.0, 320.0, 180.0, 640, 360).unwrap()
    }

    #[test]
    fn null_pose_and_scmap() {
        let line = r#"{"id":"p1","rgb":"a.png","pose":null,"intrinsics":{"fx":1.0,"fy":1.0,"cx":0.5,"cy":0.5,"width":1,"height":1}}"#;
        let recs = read_records(line.as_bytes()).unwrap();
        assert_eq!(recs[0].pose, None);
        assert_eq!(recs[0].scmap, None);
        assert!(recs[0].transform().is_none());
    }

    #[test]
    fn unknown_fields_rejected() {
        let line = r#"{"id":"p1","rgb":"a.png","pose":null,"bogus":1,"intrinsics":{"fx":1.0,"fy":1.0,"cx":0.5,"cy":0.5,"width":1,"height":1}}"#;
        assert!(matches!(read_records(line.as_bytes()), Err(ManifestError::Json { line: 1, .. })));
    }

    #[test]
    fn load_validates() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.png"), b"x").unwrap();
        let good = FrameRecord {
            id: "0".into(),
            rgb: "a.png".into(),
            scmap: None,
            pose: Some(PoseRecord { q: [1.0, 0.0, 0.0, 0.0], t: [0.0; 3] }),
            intrinsics: intr(),
        };
        let path = dir.path().join("m.jsonl");
        save_records(std::slice::from_ref(&good), &path).unwrap();
        assert_eq!(DatasetManifest::load(&path).unwrap().frames, vec![good.clone()]);

        let mut missing = good.clone();
        missing.scmap = Some("nope.scm".into());
        save_records(&[good.clone(), missing], &path).unwrap();
        assert!(matches!(DatasetManifest::load(&path), Err(ManifestError::Invalid { line: 2, .. })));

        let mut bad_q = good.clone();
        bad_q.pose = Some(PoseRecord { q: [1.0, 0.01, 0.0, 0.0], t: [0.0; 3] });
        save_records(&[bad_q], &path).unwrap();
        assert!(matches!(DatasetManifest::load(&path), Err(ManifestError::Invalid { line: 1, .. })));

        let mut bad_k = good;
        bad_k.intrinsics.fx = -1.0;
        save_records(&[bad_k], &path).unwrap();
        assert!(matches!(DatasetManifest::load(&path), Err(ManifestError::Invalid { line: 1, .. })));
    }

    proptest! {
        #[test]
        fn pose_and_intrinsics_round_trip_bit_exact(
            q in (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64),
            t in (-1e3..1e3f64, -1e3..1e3f64, -1e3..1e3f64),
            fx in 1.0..5000.0f64, cx in 0.0..639.0f64,
        ) {
            let rot = Rotation::from_wxyz(q.0, q.1, q.2, q.3 + 0.1).unwrap();
            let pose = RigidTransform::new(rot, Vec3::new(t.0, t.1, t.2));
            let rec = FrameRecord {
                id: "x".into(),
                rgb: "x.png".into(),
                scmap: Some("x.scm".into()),
                pose: Some(PoseRecord::from(&pose)),
                intrinsics: CameraIntrinsics { fx, fy: fx * 1.01, cx, cy: 100.5, width: 640, height: 360 },
            };
            let mut buf = Vec::new();
            write_records(std::slice::from_ref(&rec), &mut buf).unwrap();
            let back = read_records(&buf[..]).unwrap().pop().unwrap();
            prop_assert_eq!(&back, &rec);
            let bt = back.transform().unwrap().unwrap();
            for (a, b) in bt.rotation.wxyz().iter().zip(pose.rotation.wxyz()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
            for k in 0..3 {
                prop_assert_eq!(bt.translation[k].to_bits(), pose.translation[k].to_bits());
            }
        }
    }
}
