//! Kinematic model of a six-axis arm with UR5 geometry.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_PI_2, PI};

use crate::RigidTransform;

pub type Joints = [f64; 6];

const D: [f64; 6] = [0.089159, 0.0, 0.0, 0.10915, 0.09465, 0.0823];
const A: [f64; 6] = [0.0, -0.425, -0.39225, 0.0, 0.0, 0.0];
const ALPHA: [f64; 6] = [FRAC_PI_2, 0.0, 0.0, FRAC_PI_2, -FRAC_PI_2, 0.0];

/// FK residual accepted for an IK branch, meters and radians.
const IK_TOLERANCE: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobotModel {
    #[serde(rename = "reach_max_m")]
    pub reach_max: f64,
    #[serde(rename = "reach_min_m")]
    pub reach_min: f64,
    #[serde(rename = "repeatability_m")]
    pub repeatability_sigma: f64,
    /// Symmetric per-axis limits, radians.
    #[serde(default = "default_joint_limits")]
    pub joint_limits: [f64; 6],
}

fn default_joint_limits() -> [f64; 6] {
    [2.0 * PI; 6]
}

impl Default for RobotModel {
    fn default() -> Self {
        Self {
            reach_max: 0.85,
            reach_min: 0.15,
            repeatability_sigma: 1e-4,
            joint_limits: default_joint_limits(),
        }
    }
}

fn dh(i: usize, theta: f64) -> RigidTransform {
    let (st, ct) = theta.sin_cos();
    let (sa, ca) = ALPHA[i].sin_cos();
    let r = Matrix3::new(ct, -st * ca, st * sa, st, ct * ca, -ct * sa, 0.0, sa, ca);
    RigidTransform::from_parts(r, Vector3::new(A[i] * ct, A[i] * st, D[i]))
}

fn wrap(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w <= -PI {
        w + 2.0 * PI
    } else {
        w
    }
}

/// Base-to-flange transform for a joint configuration.
pub fn forward(q: &Joints) -> RigidTransform {
    (0..6).fold(RigidTransform::identity(), |t, i| t.compose(&dh(i, q[i])))
}

/// Closed-form inverse kinematics; every returned branch reproduces `target`
/// through `forward`.
pub fn inverse(target: &RigidTransform) -> Vec<Joints> {
    let r = target.rotation();
    let p = target.translation();
    let p05 = p - r.column(2) * D[5];
    let rxy = p05.x.hypot(p05.y);
    if rxy < D[3] {
        return Vec::new();
    }
    let psi = p05.y.atan2(p05.x);
    let phi = (D[3] / rxy).acos();
    let mut out = Vec::new();
    for s1 in [1.0, -1.0] {
        let t1 = psi + s1 * phi + FRAC_PI_2;
        let (st1, ct1) = t1.sin_cos();
        let c5 = (p.x * st1 - p.y * ct1 - D[3]) / D[5];
        if c5.abs() > 1.0 + 1e-12 {
            continue;
        }
        let acos5 = c5.clamp(-1.0, 1.0).acos();
        for s5 in [1.0, -1.0] {
            let t5 = s5 * acos5;
            let st5 = t5.sin();
            let t6 = if st5.abs() < 1e-10 {
                0.0
            } else {
                ((-r[(0, 1)] * st1 + r[(1, 1)] * ct1) / st5)
                    .atan2((r[(0, 0)] * st1 - r[(1, 0)] * ct1) / st5)
            };
            let t14 = dh(0, t1)
                .inverse()
                .compose(target)
                .compose(&dh(5, t6).inverse())
                .compose(&dh(4, t5).inverse());
            let p14 = t14.translation();
            let d2 = p14.x * p14.x + p14.y * p14.y;
            let c3 = (d2 - A[1] * A[1] - A[2] * A[2]) / (2.0 * A[1] * A[2]);
            if c3.abs() > 1.0 + 1e-12 {
                continue;
            }
            let acos3 = c3.clamp(-1.0, 1.0).acos();
            for s3 in [1.0, -1.0] {
                let t3 = s3 * acos3;
                let t2 = p14.y.atan2(p14.x) - (A[2] * t3.sin()).atan2(A[1] + A[2] * t3.cos());
                let r14 = t14.rotation();
                let t4 = r14[(1, 0)].atan2(r14[(0, 0)]) - t2 - t3;
                let q = [t1, t2, t3, t4, t5, t6].map(wrap);
                let (ang, dist) = forward(&q).distance_to(target);
                if ang < IK_TOLERANCE && dist < IK_TOLERANCE {
                    out.push(q);
                }
            }
        }
    }
    out
}

impl RobotModel {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.reach_min >= 0.0 && self.reach_min < self.reach_max) {
            return Err(format!(
                "reach_min {} must be in [0, reach_max {})",
                self.reach_min, self.reach_max
            ));
        }
        if !(self.repeatability_sigma >= 0.0) {
            return Err(format!(
                "repeatability {} must be non-negative",
                self.repeatability_sigma
            ));
        }
        if self.joint_limits.iter().any(|l| !(*l > 0.0)) {
            return Err("joint limits must be positive".into());
        }
        Ok(())
    }

    pub fn in_shell(&self, flange: &RigidTransform) -> bool {
        let r = flange.translation().norm();
        r >= self.reach_min && r <= self.reach_max
    }

    /// Shell test plus an IK branch inside the joint limits.
    pub fn is_reachable(&self, flange: &RigidTransform) -> bool {
        self.in_shell(flange) && self.solve(flange).is_some()
    }

    /// IK branch closest to the zero configuration among those within limits.
    pub fn solve(&self, flange: &RigidTransform) -> Option<Joints> {
        inverse(flange)
            .into_iter()
            .filter(|q| q.iter().zip(&self.joint_limits).all(|(a, l)| a.abs() <= *l))
            .min_by(|a, b| norm(a).total_cmp(&norm(b)))
    }
}

fn norm(q: &Joints) -> f64 {
    q.iter().map(|a| a * a).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_configuration() {
        let t = forward(&[0.0; 6]);
        let p = t.translation();
        assert!((p.x - (A[1] + A[2])).abs() < 1e-12);
        assert!((p.y + D[3] + D[5]).abs() < 1e-12);
        assert!((p.z - (D[0] - D[4])).abs() < 1e-12);
    }

    #[test]
    fn inverse_recovers_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let q: Joints = std::array::from_fn(|_| rng.random_range(-PI..PI));
            let t = forward(&q);
            let sols = inverse(&t);
            assert!(!sols.is_empty(), "no IK for {q:?}");
            let found = sols
                .iter()
                .any(|s| s.iter().zip(&q).all(|(a, b)| wrap(a - b).abs() < 1e-6));
            if q[4].sin().abs() > 1e-3 {
                assert!(found, "original branch missing for {q:?}");
            }
        }
    }

    #[test]
    fn far_target_unreachable() {
        let robot = RobotModel::default();
        let t = RigidTransform::from_translation(Vector3::new(2.0, 0.0, 0.0));
        assert!(!robot.is_reachable(&t));
        let q = [0.3, -1.2, 1.4, -1.6, -1.5, 0.2];
        assert!(robot.is_reachable(&forward(&q)));
    }
}
