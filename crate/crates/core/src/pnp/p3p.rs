//! Minimal three-point pose solver.
//!
//! The distances `s1, s2, s3` from the camera center to the three world
//! points satisfy the law of cosines on each pair of bearing rays. With
//! `s2 = u s1` and `s3 = v s1` the system reduces to a quartic in `v`
//! (Grunert's elimination). Real roots come from the eigenvalues of the
//! quartic's companion matrix, are polished with Newton steps on the full
//! three-distance system, and each distance triple is turned into a pose by
//! aligning the camera-frame triangle onto the world triangle.

use nalgebra::{DMatrix, Matrix3};

use super::{Correspondence, PnpError};
use crate::geometry::{project, CameraIntrinsics, RigidTransform, Vec3};
use crate::registration::umeyama_rigid;

/// Maximum reprojection error (pixels) of a returned solution on its own
/// three correspondences.
pub const P3P_TOLERANCE_PX: f64 = 1e-6;

pub(crate) fn bearing(intr: &CameraIntrinsics, u: f64, v: f64) -> Vec3 {
    Vec3::new((u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, 1.0).normalize()
}

/// Real roots of `Σ coeffs[k] x^k` via companion-matrix eigenvalues,
/// each refined by a few Newton iterations.
pub fn real_polynomial_roots(coeffs: &[f64]) -> Vec<f64> {
    let scale = coeffs.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    if scale == 0.0 {
        return Vec::new();
    }
    let mut degree = coeffs.len() - 1;
    while degree > 0 && coeffs[degree].abs() <= 1e-14 * scale {
        degree -= 1;
    }
    if degree == 0 {
        return Vec::new();
    }
    let lead = coeffs[degree];
    let mut companion = DMatrix::<f64>::zeros(degree, degree);
    for i in 1..degree {
        companion[(i, i - 1)] = 1.0;
    }
    for i in 0..degree {
        companion[(i, degree - 1)] = -coeffs[i] / lead;
    }
    let eig = companion.complex_eigenvalues();

    let eval = |x: f64| -> (f64, f64) {
        let mut p = 0.0;
        let mut dp = 0.0;
        for &c in coeffs[..=degree].iter().rev() {
            dp = dp * x + p;
            p = p * x + c;
        }
        (p, dp)
    };

    let mut roots = Vec::new();
    for z in eig.iter() {
        if z.im.abs() > 1e-6 * (1.0 + z.re.abs()) {
            continue;
        }
        let mut x = z.re;
        for _ in 0..8 {
            let (p, dp) = eval(x);
            if dp == 0.0 {
                break;
            }
            let next = x - p / dp;
            if !next.is_finite() {
                break;
            }
            let done = (next - x).abs() <= 1e-15 * (1.0 + x.abs());
            x = next;
            if done {
                break;
            }
        }
        roots.push(x);
    }
    roots
}

struct Triangle {
    /// Squared side lengths opposite each ray pair: |P2P3|², |P1P3|², |P1P2|².
    a2: f64,
    b2: f64,
    c2: f64,
    /// Cosines between rays (2,3), (1,3), (1,2).
    cos_a: f64,
    cos_b: f64,
    cos_g: f64,
}

impl Triangle {
    /// Law-of-cosines residuals for distances `s`.
    fn residual(&self, s: &Vec3) -> Vec3 {
        Vec3::new(
            s[1] * s[1] + s[2] * s[2] - 2.0 * s[1] * s[2] * self.cos_a - self.a2,
            s[0] * s[0] + s[2] * s[2] - 2.0 * s[0] * s[2] * self.cos_b - self.b2,
            s[0] * s[0] + s[1] * s[1] - 2.0 * s[0] * s[1] * self.cos_g - self.c2,
        )
    }

    fn jacobian(&self, s: &Vec3) -> Matrix3<f64> {
        Matrix3::new(
            0.0,
            2.0 * s[1] - 2.0 * s[2] * self.cos_a,
            2.0 * s[2] - 2.0 * s[1] * self.cos_a,
            2.0 * s[0] - 2.0 * s[2] * self.cos_b,
            0.0,
            2.0 * s[2] - 2.0 * s[0] * self.cos_b,
            2.0 * s[0] - 2.0 * s[1] * self.cos_g,
            2.0 * s[1] - 2.0 * s[0] * self.cos_g,
            0.0,
        )
    }

    fn polish(&self, mut s: Vec3) -> Vec3 {
        for _ in 0..6 {
            let r = self.residual(&s);
            let Some(inv) = self.jacobian(&s).try_inverse() else { break };
            let next = s - inv * r;
            if !next.iter().all(|v| v.is_finite()) || self.residual(&next).norm() > r.norm() {
                break;
            }
            s = next;
        }
        s
    }

    /// Quartic coefficients `[A0, A1, A2, A3, A4]` in `v = s3 / s1`.
    fn quartic(&self) -> [f64; 5] {
        let (a2, b2, c2) = (self.a2, self.b2, self.c2);
        let (ca, cb, cg) = (self.cos_a, self.cos_b, self.cos_g);
        let amc = (a2 - c2) / b2;
        let apc = (a2 + c2) / b2;
        let a4 = (amc - 1.0).powi(2) - 4.0 * c2 / b2 * ca * ca;
        let a3 = 4.0 * (amc * (1.0 - amc) * cb - (1.0 - apc) * ca * cg + 2.0 * c2 / b2 * ca * ca * cb);
        let a2c = 2.0
            * (amc * amc - 1.0 + 2.0 * amc * amc * cb * cb + 2.0 * (b2 - c2) / b2 * ca * ca
                - 4.0 * apc * ca * cb * cg
                + 2.0 * (b2 - a2) / b2 * cg * cg);
        let a1 = 4.0 * (-amc * (1.0 + amc) * cb + 2.0 * a2 / b2 * cg * cg * cb - (1.0 - apc) * ca * cg);
        let a0 = (1.0 + amc).powi(2) - 4.0 * a2 / b2 * cg * cg;
        [a0, a1, a2c, a3, a4]
    }

    /// Candidate `u = s2 / s1` values for a root `v`.
    fn u_candidates(&self, v: f64) -> Vec<f64> {
        let amc = (self.a2 - self.c2) / self.b2;
        let mut out = Vec::with_capacity(3);
        let den = 2.0 * (self.cos_g - v * self.cos_a);
        if den.abs() > 1e-12 {
            out.push(((amc - 1.0) * v * v - 2.0 * amc * self.cos_b * v + 1.0 + amc) / den);
        }
        // fall back to the (1,2) equation: c² = s1²(1 + u² − 2u cosγ)
        let s1_sq = self.b2 / (1.0 + v * v - 2.0 * v * self.cos_b);
        let k = self.c2 / s1_sq;
        let disc = self.cos_g * self.cos_g - 1.0 + k;
        if disc >= 0.0 {
            let r = disc.sqrt();
            out.push(self.cos_g + r);
            out.push(self.cos_g - r);
        }
        out
    }
}

fn reprojection_px(intr: &CameraIntrinsics, pose: &RigidTransform, c: &Correspondence) -> f64 {
    match project(intr, &pose.apply(&c.world)) {
        Ok((u, v, _)) => ((u - c.pixel[0]).powi(2) + (v - c.pixel[1]).powi(2)).sqrt(),
        Err(_) => f64::INFINITY,
    }
}

/// Solves for up to four world-to-camera poses consistent with three
/// correspondences. Every returned pose reprojects all three world points
/// within [`P3P_TOLERANCE_PX`].
pub fn p3p_solve(c: &[Correspondence; 3], intr: &CameraIntrinsics) -> Result<Vec<RigidTransform>, PnpError> {
    let [p1, p2, p3] = [c[0].world, c[1].world, c[2].world];
    let area = 0.5 * (p2 - p1).cross(&(p3 - p1)).norm();
    if !(area > 1e-9) {
        return Err(PnpError::DegenerateGeometry("world points are collinear".into()));
    }
    for i in 0..3 {
        for j in i + 1..3 {
            if c[i].pixel == c[j].pixel {
                return Err(PnpError::DegenerateGeometry("duplicate pixels".into()));
            }
        }
    }
    let f = [
        bearing(intr, c[0].pixel[0], c[0].pixel[1]),
        bearing(intr, c[1].pixel[0], c[1].pixel[1]),
        bearing(intr, c[2].pixel[0], c[2].pixel[1]),
    ];
    let tri = Triangle {
        a2: (p2 - p3).norm_squared(),
        b2: (p1 - p3).norm_squared(),
        c2: (p1 - p2).norm_squared(),
        cos_a: f[1].dot(&f[2]),
        cos_b: f[0].dot(&f[2]),
        cos_g: f[0].dot(&f[1]),
    };
    let scale = tri.a2.max(tri.b2).max(tri.c2);

    let mut solutions: Vec<RigidTransform> = Vec::new();
    for v in real_polynomial_roots(&tri.quartic()) {
        if v <= 0.0 {
            continue;
        }
        let den = 1.0 + v * v - 2.0 * v * tri.cos_b;
        if den <= 0.0 {
            continue;
        }
        let s1 = (tri.b2 / den).sqrt();
        // Several u values can satisfy the system for nearly repeated roots;
        // every candidate that survives polishing is kept.
        for u in tri.u_candidates(v) {
            if u <= 0.0 {
                continue;
            }
            let s = tri.polish(Vec3::new(s1, u * s1, v * s1));
            if !s.iter().all(|x| *x > 0.0 && x.is_finite()) || tri.residual(&s).norm() > 1e-6 * scale {
                continue;
            }
            let cam = [f[0] * s[0], f[1] * s[1], f[2] * s[2]];
            let Ok(pose) = umeyama_rigid(&[p1, p2, p3], &cam) else { continue };
            if c.iter().any(|k| reprojection_px(intr, &pose, k) > P3P_TOLERANCE_PX) {
                continue;
            }
            let duplicate = solutions.iter().any(|q| {
                (q.rotation.matrix() - pose.rotation.matrix()).abs().max() < 1e-9
                    && (q.translation - pose.translation).norm() < 1e-9 * (1.0 + pose.translation.norm())
            });
            if !duplicate {
                solutions.push(pose);
            }
        }
    }
    if solutions.is_empty() {
        return Err(PnpError::NoRealSolution);
    }
    Ok(solutions)
}
