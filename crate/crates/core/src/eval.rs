//! Pose-error metrics and aggregate reports (median / 95th percentile /
//! mean per metric, plus the fraction of frames without a valid pose).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{rotation_angle_deg, RigidTransform};
use crate::pnp::PoseEstimate;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("no pose errors to aggregate")]
    EmptyList,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseError {
    pub rotation_deg: f64,
    /// Camera-center distance in meters.
    pub translation_m: f64,
    pub valid: bool,
}

impl PoseError {
    pub fn between(gt: &RigidTransform, est: &RigidTransform, valid: bool) -> Self {
        Self {
            rotation_deg: rotation_angle_deg(&gt.rotation, &est.rotation),
            translation_m: (gt.camera_center() - est.camera_center()).norm(),
            valid,
        }
    }
}

pub fn pose_error(gt: &RigidTransform, est: &PoseEstimate) -> PoseError {
    PoseError::between(gt, &est.pose, est.valid)
}

/// How invalid frames enter the statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PercentilePolicy {
    /// Statistics over valid frames only; invalid frames show up in the
    /// invalid fraction.
    #[default]
    Exclude,
    /// Invalid frames count as infinite error.
    Penalize,
}

/// Linear interpolation between order statistics of sorted data at
/// quantile `p ∈ [0, 1]`. Infinite neighbors saturate.
pub fn percentile(sorted: &[f64], p: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let h = p.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    if frac == 0.0 || lo + 1 >= sorted.len() {
        return Some(sorted[lo]);
    }
    let (a, b) = (sorted[lo], sorted[lo + 1]);
    if b.is_infinite() {
        return Some(f64::INFINITY);
    }
    Some(a + frac * (b - a))
}

/// Serializes optional statistics: `null` when undefined, `"inf"` when
/// saturated.
mod stat {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            None => s.serialize_none(),
            Some(x) if x.is_infinite() && *x > 0.0 => s.serialize_str("inf"),
            Some(x) => s.serialize_f64(*x),
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        match Option::<Raw>::deserialize(d)? {
            None => Ok(None),
            Some(Raw::Num(x)) => Ok(Some(x)),
            Some(Raw::Text(t)) if t == "inf" => Ok(Some(f64::INFINITY)),
            Some(Raw::Text(t)) => Err(de::Error::custom(format!("unexpected statistic `{t}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    #[serde(with = "stat")]
    pub median: Option<f64>,
    #[serde(with = "stat")]
    pub p95: Option<f64>,
    #[serde(with = "stat")]
    pub mean: Option<f64>,
}

impl MetricSummary {
    fn from_values(mut values: Vec<f64>) -> Self {
        values.sort_by(f64::total_cmp);
        let mean = (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64);
        Self { median: percentile(&values, 0.5), p95: percentile(&values, 0.95), mean }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub policy: PercentilePolicy,
    pub frame_count: usize,
    pub valid_count: usize,
    pub invalid_fraction: f64,
    pub rotation_deg: MetricSummary,
    pub translation_m: MetricSummary,
}

pub fn aggregate(errors: &[PoseError], policy: PercentilePolicy) -> Result<EvalReport, EvalError> {
    if errors.is_empty() {
        return Err(EvalError::EmptyList);
    }
    let valid_count = errors.iter().filter(|e| e.valid).count();
    let pick = |f: fn(&PoseError) -> f64| -> Vec<f64> {
        errors
            .iter()
            .filter_map(|e| match (e.valid, policy) {
                (true, _) => Some(f(e)),
                (false, PercentilePolicy::Penalize) => Some(f64::INFINITY),
                (false, PercentilePolicy::Exclude) => None,
            })
            .collect()
    };
    Ok(EvalReport {
        method: String::new(),
        policy,
        frame_count: errors.len(),
        valid_count,
        invalid_fraction: (errors.len() - valid_count) as f64 / errors.len() as f64,
        rotation_deg: MetricSummary::from_values(pick(|e| e.rotation_deg)),
        translation_m: MetricSummary::from_values(pick(|e| e.translation_m)),
    })
}

impl EvalReport {
    pub fn with_method(mut self, method: impl Into<String>) -> Self {
        self.method = method.into();
        self
    }
}

fn fmt_pair(rot: Option<f64>, trans: Option<f64>) -> String {
    let f = |v: Option<f64>, prec: usize, unit: &str| match v {
        None => "n/a".to_string(),
        Some(x) if x.is_infinite() => "inf".to_string(),
        Some(x) => format!("{x:.prec$}{unit}"),
    };
    format!("{}, {}", f(rot, 1, "°"), f(trans, 2, " m"))
}

/// Markdown table with one row per report.
pub fn markdown_table(reports: &[EvalReport]) -> String {
    let rows: Vec<[String; 4]> = reports
        .iter()
        .map(|r| {
            [
                r.method.clone(),
                fmt_pair(r.rotation_deg.median, r.translation_m.median),
                fmt_pair(r.rotation_deg.p95, r.translation_m.p95),
                format!("{:.1}%", 100.0 * r.invalid_fraction),
            ]
        })
        .collect();
    let header = ["Method", "Median error", "95%-tile error", "Invalid"];
    let mut widths = header.map(|h| h.chars().count());
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: &[String]| {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
            .collect();
        format!("| {} |\n", padded.join(" | "))
    };
    let mut out = line(&header.map(String::from));
    out.push_str(&line(&widths.map(|w| "-".repeat(w))));
    for row in &rows {
        out.push_str(&line(row));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{compose, Rotation, Vec3};
    use proptest::prelude::*;

    fn err(r: f64, t: f64) -> PoseError {
        PoseError { rotation_deg: r, translation_m: t, valid: true }
    }

    fn sort_oracle(values: &[f64], p: f64) -> f64 {
        // independent route: rank-based interpolation written out explicitly
        let mut v = values.to_vec();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = v.len();
        if n == 1 {
            return v[0];
        }
        let rank = p * (n as f64 - 1.0);
        let below = rank as usize;
        let above = if below + 1 < n { below + 1 } else { below };
        let w = rank - below as f64;
        v[below] * (1.0 - w) + v[above] * w
    }

    #[test]
    fn identical_poses() {
        let gt = RigidTransform::new(Rotation::from_axis_angle(&Vec3::new(1.0, 2.0, 3.0), 0.4), Vec3::new(1.0, -2.0, 0.5));
        let est = PoseEstimate { pose: gt, inlier_count: 10, inlier_mask: vec![], rms: 0.0, valid: true };
        let e = pose_error(&gt, &est);
        assert_eq!((e.rotation_deg, e.valid), (0.0, true));
        assert!(e.translation_m < 1e-12);
        let invalid = PoseEstimate { valid: false, ..est };
        assert!(!pose_error(&gt, &invalid).valid);
    }

    #[test]
    fn rotation_about_camera_center() {
        let gt = RigidTransform::from_camera_center(&Rotation::from_axis_angle(&Vec3::new(0.3, 1.0, 0.0), 1.0), &Vec3::new(2.0, 3.0, 1.5));
        // rotating in the camera frame keeps the camera center fixed
        let est = compose(&RigidTransform::new(Rotation::rz_deg(5.0), Vec3::zeros()), &gt);
        let e = PoseError::between(&gt, &est, true);
        assert!((e.rotation_deg - 5.0).abs() < 1e-9);
        assert!(e.translation_m < 1e-12);
    }

    #[test]
    fn odd_median_and_invalid_fraction() {
        let r = aggregate(&[err(1.0, 0.1), err(2.0, 0.2), err(3.0, 0.3)], PercentilePolicy::Exclude).unwrap();
        assert_eq!(r.rotation_deg.median, Some(2.0));
        assert_eq!(r.translation_m.median, Some(0.2));

        let mut ten: Vec<PoseError> = (0..10).map(|i| err(i as f64, i as f64)).collect();
        ten[3].valid = false;
        let r = aggregate(&ten, PercentilePolicy::Exclude).unwrap();
        assert_eq!(r.invalid_fraction, 0.1);
        assert_eq!(r.valid_count, 9);
        assert_eq!(aggregate(&[], PercentilePolicy::Exclude), Err(EvalError::EmptyList));
    }

    #[test]
    fn penalize_saturates() {
        let mut v: Vec<PoseError> = (0..10).map(|i| err(i as f64, 0.1 * i as f64)).collect();
        v[0].valid = false;
        let r = aggregate(&v, PercentilePolicy::Penalize).unwrap();
        assert_eq!(r.rotation_deg.p95, Some(f64::INFINITY));
        assert_eq!(r.rotation_deg.mean, Some(f64::INFINITY));
        assert!(r.rotation_deg.median.unwrap().is_finite());
        let all_bad: Vec<PoseError> = v.iter().map(|e| PoseError { valid: false, ..*e }).collect();
        let r = aggregate(&all_bad, PercentilePolicy::Exclude).unwrap();
        assert_eq!(r.rotation_deg.median, None);
        assert_eq!(r.invalid_fraction, 1.0);
    }

    #[test]
    fn report_json_round_trip() {
        let mut v: Vec<PoseError> = (0..7).map(|i| err(i as f64 * 1.37, 0.013 * i as f64)).collect();
        v[2].valid = false;
        for policy in [PercentilePolicy::Exclude, PercentilePolicy::Penalize] {
            let r = aggregate(&v, policy).unwrap().with_method("toy");
            let json = serde_json::to_string(&r).unwrap();
            assert_eq!(serde_json::from_str::<EvalReport>(&json).unwrap(), r);
        }
        let none = aggregate(&[PoseError { valid: false, ..err(1.0, 1.0) }], PercentilePolicy::Exclude).unwrap();
        let json = serde_json::to_string(&none).unwrap();
        assert!(json.contains("\"median\":null"));
        assert_eq!(serde_json::from_str::<EvalReport>(&json).unwrap(), none);
    }

    #[test]
    fn markdown_layout() {
        let r = aggregate(&[err(2.9, 0.17)], PercentilePolicy::Exclude).unwrap().with_method("oracle");
        let md = markdown_table(&[r]);
        let lines: Vec<&str> = md.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("| Method"));
        assert!(lines[2].contains("2.9°, 0.17 m"));
        let widths: Vec<usize> = lines.iter().map(|l| l.chars().count()).collect();
        assert!(widths.windows(2).all(|w| w[0] == w[1]));
    }

    proptest! {
        #[test]
        fn matches_sort_oracle(values in prop::collection::vec(0.0..180.0f64, 1..200)) {
            let errors: Vec<PoseError> = values.iter().map(|&v| err(v, v / 100.0)).collect();
            let r = aggregate(&errors, PercentilePolicy::Exclude).unwrap();
            let med = sort_oracle(&values, 0.5);
            let p95 = sort_oracle(&values, 0.95);
            prop_assert!((r.rotation_deg.median.unwrap() - med).abs() <= 1e-9 * (1.0 + med));
            prop_assert!((r.rotation_deg.p95.unwrap() - p95).abs() <= 1e-9 * (1.0 + p95));
            prop_assert!(r.rotation_deg.median.unwrap() <= r.rotation_deg.p95.unwrap());
        }

        #[test]
        fn invariant_to_common_world_transform(seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut rt = || RigidTransform::new(
                Rotation::from_axis_angle(&Vec3::new(rng.random(), rng.random(), rng.random::<f64>() + 0.1), rng.random_range(-3.0..3.0)),
                Vec3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)),
            );
            let (gt, est, world) = (rt(), rt(), rt());
            // re-expressing the world frame: poses become T ∘ W⁻¹
            let a = PoseError::between(&gt, &est, true);
            let b = PoseError::between(&compose(&gt, &world.inverse()), &compose(&est, &world.inverse()), true);
            prop_assert!((a.rotation_deg - b.rotation_deg).abs() < 1e-6);
            prop_assert!((a.translation_m - b.translation_m).abs() < 1e-9);
        }
    }
}
