//! Gauss-Newton refinement of a pose on inlier reprojection error.
//!
//! The pose is updated as `R ← exp([δω]×) R`, `t ← exp([δω]×) t + δt`
//! (a left perturbation of the whole transform). A step that does not lower
//! the squared error is halved up to ten times; if none helps, refinement
//! stops, so the reprojection RMS never increases.

use nalgebra::{Matrix6, Vector6};

use super::Correspondence;
use crate::geometry::{CameraIntrinsics, RigidTransform, Rotation, Vec3};

fn residuals_sq(intr: &CameraIntrinsics, pose: &RigidTransform, corrs: &[&Correspondence]) -> f64 {
    let mut sum = 0.0;
    for c in corrs {
        let p = pose.apply(&c.world);
        if p.z <= 1e-9 {
            return f64::INFINITY;
        }
        let du = intr.fx * p.x / p.z + intr.cx - c.pixel[0];
        let dv = intr.fy * p.y / p.z + intr.cy - c.pixel[1];
        sum += du * du + dv * dv;
    }
    sum
}

/// Root-mean-square reprojection distance in pixels.
pub fn reprojection_rms(intr: &CameraIntrinsics, pose: &RigidTransform, corrs: &[&Correspondence]) -> f64 {
    if corrs.is_empty() {
        return 0.0;
    }
    (residuals_sq(intr, pose, corrs) / corrs.len() as f64).sqrt()
}

fn apply_update(pose: &RigidTransform, delta: &Vector6<f64>) -> RigidTransform {
    let w = Vec3::new(delta[0], delta[1], delta[2]);
    let dt = Vec3::new(delta[3], delta[4], delta[5]);
    let dr = Rotation::from_rotation_vector(&w);
    RigidTransform::new(dr.compose(&pose.rotation), dr.rotate(&pose.translation) + dt)
}

pub fn refine_pose(
    intr: &CameraIntrinsics,
    pose: &RigidTransform,
    corrs: &[&Correspondence],
    iterations: usize,
) -> RigidTransform {
    let mut pose = *pose;
    if corrs.len() < 3 {
        return pose;
    }
    let mut cost = residuals_sq(intr, &pose, corrs);
    if !cost.is_finite() {
        return pose;
    }
    for _ in 0..iterations {
        let mut jtj = Matrix6::<f64>::zeros();
        let mut jtr = Vector6::<f64>::zeros();
        for c in corrs {
            let p = pose.apply(&c.world);
            let (x, y, z) = (p.x, p.y, p.z);
            let iz = 1.0 / z;
            let ru = intr.fx * x * iz + intr.cx - c.pixel[0];
            let rv = intr.fy * y * iz + intr.cy - c.pixel[1];
            // d(u, v)/dp
            let du = Vec3::new(intr.fx * iz, 0.0, -intr.fx * x * iz * iz);
            let dv = Vec3::new(0.0, intr.fy * iz, -intr.fy * y * iz * iz);
            // dp/dω = -[p]×, dp/dt = I
            let ju_w = p.cross(&du);
            let jv_w = p.cross(&dv);
            let ju = Vector6::new(ju_w.x, ju_w.y, ju_w.z, du.x, du.y, du.z);
            let jv = Vector6::new(jv_w.x, jv_w.y, jv_w.z, dv.x, dv.y, dv.z);
            jtj += ju * ju.transpose() + jv * jv.transpose();
            jtr += ju * ru + jv * rv;
        }
        let Some(step) = jtj.cholesky().map(|ch| ch.solve(&(-jtr))) else { break };
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..10 {
            let candidate = apply_update(&pose, &(step * scale));
            let c = residuals_sq(intr, &candidate, corrs);
            if c < cost {
                pose = candidate;
                let improvement = cost - c;
                cost = c;
                accepted = true;
                if improvement <= 1e-12 * (1.0 + c) {
                    return pose;
                }
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    pose
}
