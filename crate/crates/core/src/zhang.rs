//! Planar intrinsic calibration: homographies, closed-form initialization,
//! Levenberg-Marquardt refinement of intrinsics, distortion and board poses,
//! plus the color↔IR extrinsic and the linear depth correction.

use std::collections::HashMap;

use nalgebra::{
    DMatrix, Matrix2, Matrix3, Matrix6, Rotation3, SMatrix, SVector, Vector2, Vector3, Vector6,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{undistort, CameraError, MIN_PROJECTION_DEPTH};
use crate::geometry::{nearest_rotation, rotation_log};
use crate::target::CheckerboardSpec;
use crate::{DepthModel, Intrinsics, Pixel, RigidTransform};

/// Refined intrinsic parameters, in Jacobian column order:
/// `fx, fy, cx, cy, k1, k2, k3, p1, p2`.
pub const INTRINSIC_PARAMS: usize = 9;
pub const POSE_PARAMS: usize = 6;

pub type IntrinsicJacobian = SMatrix<f64, 2, INTRINSIC_PARAMS>;
/// Columns: left-multiplied rotation increment `ω`, then translation.
pub type PoseJacobian = SMatrix<f64, 2, POSE_PARAMS>;

type Mat9 = SMatrix<f64, 9, 9>;
type Mat96 = SMatrix<f64, 9, 6>;
type Vec9 = SVector<f64, 9>;

const ILL_CONDITIONED: f64 = 1e12;
/// Residual RMS below which data is considered exactly fitted, pixels.
const EXACT_FIT_RMS: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ZhangError {
    #[error("view {view_id}: need at least {needed} points, got {got}")]
    TooFewPoints {
        view_id: u64,
        needed: usize,
        got: usize,
    },
    #[error("view {view_id}: {board} board points but {image} image points")]
    LengthMismatch {
        view_id: u64,
        board: usize,
        image: usize,
    },
    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),
    #[error("need at least {needed} views, got {got}")]
    InsufficientViews { needed: usize, got: usize },
    #[error("closed-form system ill-conditioned (condition {condition:e})")]
    IllConditioned { condition: f64 },
    #[error("singular homography")]
    SingularHomography,
    #[error("cost increased on {rejections} consecutive damping escalations")]
    DivergenceDetected { rejections: usize },
    #[error("no view seen by both cameras")]
    NoCombinedViews,
    #[error("depth regression: {0}")]
    InvalidDepthData(String),
    #[error(transparent)]
    Camera(#[from] CameraError),
}

/// One detection of the planar board: board-frame `(x, y)` against pixels,
/// both in canonical corner order.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanarView {
    pub view_id: u64,
    pub board_points: Vec<Vector2<f64>>,
    pub image_points: Vec<Pixel>,
}

impl PlanarView {
    pub fn new(
        view_id: u64,
        board_points: Vec<Vector2<f64>>,
        image_points: Vec<Pixel>,
    ) -> Result<Self, ZhangError> {
        let v = Self {
            view_id,
            board_points,
            image_points,
        };
        v.validate()?;
        Ok(v)
    }

    /// Pairs canonical corner pixels with the board's corner grid.
    pub fn from_corners(
        spec: &CheckerboardSpec,
        view_id: u64,
        image_points: Vec<Pixel>,
    ) -> Result<Self, ZhangError> {
        let board = (0..spec.corner_count())
            .map(|i| spec.corner(i).xy())
            .collect();
        Self::new(view_id, board, image_points)
    }

    pub fn validate(&self) -> Result<(), ZhangError> {
        if self.board_points.len() != self.image_points.len() {
            return Err(ZhangError::LengthMismatch {
                view_id: self.view_id,
                board: self.board_points.len(),
                image: self.image_points.len(),
            });
        }
        if self.board_points.len() < 4 {
            return Err(ZhangError::TooFewPoints {
                view_id: self.view_id,
                needed: 4,
                got: self.board_points.len(),
            });
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.board_points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.board_points.is_empty()
    }

    fn board_point(&self, i: usize) -> Vector3<f64> {
        let b = self.board_points[i];
        Vector3::new(b.x, b.y, 0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntrinsicCalibrationResult {
    pub intrinsics: Intrinsics,
    /// `camera_from_board`, one per view in input order.
    pub per_view_poses: Vec<RigidTransform>,
    /// RMS of the 2D residual norm over all corners, pixels.
    pub mean_reprojection_error: f64,
    pub per_view_errors: Vec<f64>,
    /// Total squared error after each accepted step, starting with the
    /// initial cost.
    pub cost_trace: Vec<f64>,
    pub iterations: usize,
    /// False when the closed form failed and the nominal intrinsics seeded
    /// the refinement.
    pub closed_form_used: bool,
}

fn normalizing_transform(pts: &[Vector2<f64>]) -> Matrix3<f64> {
    let n = pts.len() as f64;
    let c = pts.iter().fold(Vector2::zeros(), |a, p| a + p) / n;
    let d = pts.iter().map(|p| (p - c).norm()).sum::<f64>() / n;
    let s = if d > 0.0 {
        std::f64::consts::SQRT_2 / d
    } else {
        1.0
    };
    Matrix3::new(s, 0.0, -s * c.x, 0.0, s, -s * c.y, 0.0, 0.0, 1.0)
}

fn is_collinear(pts: &[Vector2<f64>]) -> bool {
    let n = pts.len() as f64;
    let c = pts.iter().fold(Vector2::zeros(), |a, p| a + p) / n;
    let cov = pts.iter().fold(Matrix2::zeros(), |a, p| {
        let d = p - c;
        a + d * d.transpose()
    });
    let eig = cov.symmetric_eigenvalues();
    let (lo, hi) = (eig.min(), eig.max());
    !(hi > 0.0) || lo <= 1e-12 * hi
}

/// Null vector of `a` (smallest right singular vector) and the ratio of the
/// largest to the second-smallest singular value.
fn null_vector(a: DMatrix<f64>) -> (nalgebra::DVector<f64>, f64) {
    let cols = a.ncols();
    let a = if a.nrows() < cols {
        let mut p = DMatrix::zeros(cols, cols);
        p.rows_mut(0, a.nrows()).copy_from(&a);
        p
    } else {
        a
    };
    let svd = a.svd(false, true);
    let vt = svd.v_t.expect("v_t requested");
    let mut order: Vec<usize> = (0..cols).collect();
    order.sort_by(|&i, &j| svd.singular_values[i].total_cmp(&svd.singular_values[j]));
    let largest = svd.singular_values[order[cols - 1]];
    let second = svd.singular_values[order[1]];
    let cond = if second > 0.0 {
        largest / second
    } else {
        f64::INFINITY
    };
    (vt.row(order[0]).transpose(), cond)
}

/// Board plane → image homography by the normalized DLT.
pub fn estimate_homography(view: &PlanarView) -> Result<Matrix3<f64>, ZhangError> {
    view.validate()?;
    let img: Vec<Vector2<f64>> = view.image_points.iter().map(|p| p.to_vector()).collect();
    if is_collinear(&view.board_points) || is_collinear(&img) {
        return Err(ZhangError::DegenerateConfiguration(format!(
            "view {}: collinear points",
            view.view_id
        )));
    }
    let ts = normalizing_transform(&view.board_points);
    let td = normalizing_transform(&img);
    let mut a = DMatrix::zeros(2 * view.len(), 9);
    for (i, (b, p)) in view.board_points.iter().zip(&img).enumerate() {
        let s = ts * Vector3::new(b.x, b.y, 1.0);
        let d = td * Vector3::new(p.x, p.y, 1.0);
        let (x, y, u, v) = (s.x, s.y, d.x, d.y);
        let r0 = [-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u];
        let r1 = [0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v];
        for k in 0..9 {
            a[(2 * i, k)] = r0[k];
            a[(2 * i + 1, k)] = r1[k];
        }
    }
    let (h, cond) = null_vector(a);
    if !cond.is_finite() || cond > ILL_CONDITIONED {
        return Err(ZhangError::DegenerateConfiguration(format!(
            "view {}: rank-deficient DLT system",
            view.view_id
        )));
    }
    let hn = Matrix3::from_row_slice(h.as_slice());
    let td_inv = td
        .try_inverse()
        .ok_or_else(|| ZhangError::DegenerateConfiguration("normalization".into()))?;
    let mut hm = td_inv * hn * ts;
    if hm[(2, 2)].abs() > 1e-12 {
        hm /= hm[(2, 2)];
    }
    Ok(hm)
}

/// Focal lengths and principal point from at least two homographies, skew
/// fixed to zero and distortion zeroed.
pub fn intrinsics_closed_form(
    homographies: &[Matrix3<f64>],
    width: u32,
    height: u32,
) -> Result<Intrinsics, ZhangError> {
    if homographies.len() < 2 {
        return Err(ZhangError::InsufficientViews {
            needed: 2,
            got: homographies.len(),
        });
    }
    let (w, h) = (width as f64, height as f64);
    let s = 2.0 / (w + h);
    let norm = Matrix3::new(s, 0.0, -s * w / 2.0, 0.0, s, -s * h / 2.0, 0.0, 0.0, 1.0);
    // Unknowns b = [B11, B22, B13, B23, B33] of the image of the absolute conic.
    let v = |hm: &Matrix3<f64>, i: usize, j: usize| -> [f64; 5] {
        let (hi, hj) = (hm.column(i), hm.column(j));
        [
            hi[0] * hj[0],
            hi[1] * hj[1],
            hi[0] * hj[2] + hi[2] * hj[0],
            hi[1] * hj[2] + hi[2] * hj[1],
            hi[2] * hj[2],
        ]
    };
    let mut a = DMatrix::zeros(2 * homographies.len(), 5);
    for (k, hm) in homographies.iter().enumerate() {
        let mut hn = norm * hm;
        let f = hn.norm();
        if !(f > 0.0 && f.is_finite()) {
            return Err(ZhangError::SingularHomography);
        }
        hn /= f;
        let v01 = v(&hn, 0, 1);
        let v00 = v(&hn, 0, 0);
        let v11 = v(&hn, 1, 1);
        for c in 0..5 {
            a[(2 * k, c)] = v01[c];
            a[(2 * k + 1, c)] = v00[c] - v11[c];
        }
    }
    let (b, condition) = null_vector(a);
    if !condition.is_finite() || condition > ILL_CONDITIONED {
        return Err(ZhangError::IllConditioned { condition });
    }
    let b = if b[0] < 0.0 { -b } else { b };
    let (b11, b22, b13, b23, b33) = (b[0], b[1], b[2], b[3], b[4]);
    let lambda = b33 - b13 * b13 / b11 - b23 * b23 / b22;
    let fxn = (lambda / b11).sqrt();
    let fyn = (lambda / b22).sqrt();
    let cxn = -b13 / b11;
    let cyn = -b23 / b22;
    let k = Intrinsics::pinhole(
        fxn / s,
        fyn / s,
        cxn / s + w / 2.0,
        cyn / s + h / 2.0,
        width,
        height,
    );
    let valid = [k.fx, k.fy, k.cx, k.cy].iter().all(|x| x.is_finite())
        && b11 > 0.0
        && b22 > 0.0
        && k.fx > 0.0
        && k.fy > 0.0
        && (0.0..=w).contains(&k.cx)
        && (0.0..=h).contains(&k.cy);
    if !valid {
        return Err(ZhangError::IllConditioned { condition });
    }
    Ok(k)
}

fn camera_matrix(k: &Intrinsics) -> Matrix3<f64> {
    Matrix3::new(k.fx, k.skew, k.cx, 0.0, k.fy, k.cy, 0.0, 0.0, 1.0)
}

/// Board pose (`camera_from_board`) encoded by a homography.
pub fn extrinsics_from_homography(
    intr: &Intrinsics,
    h: &Matrix3<f64>,
) -> Result<RigidTransform, ZhangError> {
    let scale = h.norm();
    if !(scale > 0.0)
        || !h.iter().all(|x| x.is_finite())
        || h.determinant().abs() <= 1e-12 * scale.powi(3)
    {
        return Err(ZhangError::SingularHomography);
    }
    let kinv = camera_matrix(intr)
        .try_inverse()
        .ok_or(ZhangError::SingularHomography)?;
    let a1 = kinv * h.column(0);
    let a2 = kinv * h.column(1);
    let a3 = kinv * h.column(2);
    let mut lambda = 2.0 / (a1.norm() + a2.norm());
    if a3.z * lambda < 0.0 {
        lambda = -lambda;
    }
    let r1 = a1 * lambda;
    let r2 = a2 * lambda;
    let t = a3 * lambda;
    let r = Matrix3::from_columns(&[r1, r2, r1.cross(&r2)]);
    Ok(RigidTransform::from_parts(nearest_rotation(&r), t))
}

fn intrinsic_vector(k: &Intrinsics) -> Vec9 {
    Vec9::from([k.fx, k.fy, k.cx, k.cy, k.k1, k.k2, k.k3, k.p1, k.p2])
}

fn with_intrinsic_vector(k: &Intrinsics, p: &Vec9) -> Intrinsics {
    Intrinsics {
        fx: p[0],
        fy: p[1],
        cx: p[2],
        cy: p[3],
        k1: p[4],
        k2: p[5],
        k3: p[6],
        p1: p[7],
        p2: p[8],
        ..*k
    }
}

fn cross_matrix(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Pixel of board-frame point `p` with analytic derivatives with respect to
/// the intrinsics and to a left perturbation of the pose.
pub fn project_with_jacobian(
    intr: &Intrinsics,
    camera_from_board: &RigidTransform,
    p: &Vector3<f64>,
) -> Result<(Pixel, IntrinsicJacobian, PoseJacobian), CameraError> {
    let q = camera_from_board.rotation() * p;
    let pc = q + camera_from_board.translation();
    if !(pc.z > MIN_PROJECTION_DEPTH) {
        return Err(CameraError::BehindCamera { z: pc.z });
    }
    let iz = 1.0 / pc.z;
    let x = pc.x * iz;
    let y = pc.y * iz;
    let (d, jd) = intr.distort_with_jacobian(x, y);
    let px = intr.to_pixel(d.x, d.y);
    let a = Matrix2::new(intr.fx, intr.skew, 0.0, intr.fy);
    let jproj = SMatrix::<f64, 2, 3>::new(iz, 0.0, -x * iz, 0.0, iz, -y * iz);
    let jpc = a * jd * jproj;
    let mut jpose = PoseJacobian::zeros();
    jpose
        .fixed_view_mut::<2, 3>(0, 0)
        .copy_from(&(jpc * -cross_matrix(&q)));
    jpose.fixed_view_mut::<2, 3>(0, 3).copy_from(&jpc);

    let r2 = x * x + y * y;
    let r4 = r2 * r2;
    let dist = [
        Vector2::new(x * r2, y * r2),
        Vector2::new(x * r4, y * r4),
        Vector2::new(x * r4 * r2, y * r4 * r2),
        Vector2::new(2.0 * x * y, r2 + 2.0 * y * y),
        Vector2::new(r2 + 2.0 * x * x, 2.0 * x * y),
    ];
    let mut jk = IntrinsicJacobian::zeros();
    jk[(0, 0)] = d.x;
    jk[(1, 1)] = d.y;
    jk[(0, 2)] = 1.0;
    jk[(1, 3)] = 1.0;
    for (c, dd) in dist.iter().enumerate() {
        jk.set_column(4 + c, &(a * dd));
    }
    Ok((px, jk, jpose))
}

/// Which intrinsics the refinement may change.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefineOptions {
    pub max_iterations: usize,
    pub relative_tolerance: f64,
    pub initial_lambda: f64,
    pub max_rejections: usize,
    pub estimate_intrinsics: bool,
    pub estimate_k3: bool,
    pub estimate_tangential: bool,
}

impl Default for RefineOptions {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            relative_tolerance: 1e-12,
            initial_lambda: 1e-3,
            max_rejections: 10,
            estimate_intrinsics: true,
            estimate_k3: true,
            estimate_tangential: true,
        }
    }
}

impl RefineOptions {
    fn mask(&self) -> [bool; INTRINSIC_PARAMS] {
        let i = self.estimate_intrinsics;
        [
            i,
            i,
            i,
            i,
            i,
            i,
            i && self.estimate_k3,
            i && self.estimate_tangential,
            i && self.estimate_tangential,
        ]
    }
}

struct ViewBlock {
    hii: Mat9,
    hip: Mat96,
    hpp: Matrix6<f64>,
    gi: Vec9,
    gp: Vector6<f64>,
}

fn view_block(
    intr: &Intrinsics,
    pose: &RigidTransform,
    view: &PlanarView,
    mask: &[bool; 9],
) -> Result<ViewBlock, CameraError> {
    let mut b = ViewBlock {
        hii: Mat9::zeros(),
        hip: Mat96::zeros(),
        hpp: Matrix6::zeros(),
        gi: Vec9::zeros(),
        gp: Vector6::zeros(),
    };
    for i in 0..view.len() {
        let (px, mut jk, jp) = project_with_jacobian(intr, pose, &view.board_point(i))?;
        for (c, &on) in mask.iter().enumerate() {
            if !on {
                jk.set_column(c, &Vector2::zeros());
            }
        }
        let r = Vector2::new(px.u - view.image_points[i].u, px.v - view.image_points[i].v);
        b.hii += jk.transpose() * jk;
        b.hip += jk.transpose() * jp;
        b.hpp += jp.transpose() * jp;
        b.gi += jk.transpose() * r;
        b.gp += jp.transpose() * r;
    }
    Ok(b)
}

fn view_sq_error(
    intr: &Intrinsics,
    pose: &RigidTransform,
    view: &PlanarView,
) -> Result<f64, CameraError> {
    let mut s = 0.0;
    for i in 0..view.len() {
        let px = intr.project_point(&pose.apply(&view.board_point(i)))?;
        let du = px.u - view.image_points[i].u;
        let dv = px.v - view.image_points[i].v;
        s += du * du + dv * dv;
    }
    Ok(s)
}

fn total_cost(
    intr: &Intrinsics,
    poses: &[RigidTransform],
    views: &[PlanarView],
) -> Result<Vec<f64>, CameraError> {
    views
        .par_iter()
        .zip(poses.par_iter())
        .map(|(v, p)| view_sq_error(intr, p, v))
        .collect()
}

fn damped(m: &Matrix6<f64>, lambda: f64) -> Matrix6<f64> {
    let mut d = *m;
    for k in 0..6 {
        d[(k, k)] += lambda * m[(k, k)].max(1e-12);
    }
    d
}

/// Solves the damped normal equations by eliminating the pose blocks.
fn solve_step(
    blocks: &[ViewBlock],
    mask: &[bool; 9],
    lambda: f64,
) -> Option<(Vec9, Vec<Vector6<f64>>)> {
    let mut s = Mat9::zeros();
    let mut rhs = Vec9::zeros();
    for b in blocks {
        s += b.hii;
        rhs -= b.gi;
    }
    for (k, &on) in mask.iter().enumerate() {
        if on {
            s[(k, k)] += lambda * s[(k, k)].max(1e-12);
        } else {
            s[(k, k)] = 1.0;
        }
    }
    let mut inv = Vec::with_capacity(blocks.len());
    for b in blocks {
        let hpp_inv = damped(&b.hpp, lambda).cholesky()?.inverse();
        let w = b.hip * hpp_inv;
        s -= w * b.hip.transpose();
        rhs += w * b.gp;
        inv.push(hpp_inv);
    }
    let di = s.cholesky()?.solve(&rhs);
    let dp = blocks
        .iter()
        .zip(&inv)
        .map(|(b, hinv)| hinv * (-b.gp - b.hip.transpose() * di))
        .collect();
    Some((di, dp))
}

fn apply_pose_step(pose: &RigidTransform, d: &Vector6<f64>) -> RigidTransform {
    let w = Vector3::new(d[0], d[1], d[2]);
    let t = Vector3::new(d[3], d[4], d[5]);
    let r = Rotation3::new(w).into_inner() * pose.rotation();
    RigidTransform::from_parts(r, pose.translation() + t)
}

fn step_is_negligible(di: &Vec9, k: &Vec9, dp: &[Vector6<f64>], poses: &[RigidTransform]) -> bool {
    let tol = 1e-14;
    let intr_small = di
        .iter()
        .zip(k.iter())
        .all(|(d, x)| d.abs() <= tol * (1.0 + x.abs()));
    let pose_small = dp.iter().zip(poses).all(|(d, p)| {
        let tn = p.translation().norm();
        (0..3).all(|i| d[i].abs() <= tol) && (3..6).all(|i| d[i].abs() <= tol * (1.0 + tn))
    });
    intr_small && pose_small
}

/// Levenberg-Marquardt over intrinsics, distortion and all board poses.
pub fn refine(
    initial: &Intrinsics,
    initial_poses: &[RigidTransform],
    views: &[PlanarView],
    options: &RefineOptions,
) -> Result<IntrinsicCalibrationResult, ZhangError> {
    if views.is_empty() {
        return Err(ZhangError::InsufficientViews { needed: 1, got: 0 });
    }
    if initial_poses.len() != views.len() {
        return Err(ZhangError::DegenerateConfiguration(format!(
            "{} poses for {} views",
            initial_poses.len(),
            views.len()
        )));
    }
    for v in views {
        v.validate()?;
    }
    let mask = options.mask();
    let n_points: usize = views.iter().map(|v| v.len()).sum();
    let floor = n_points as f64 * EXACT_FIT_RMS * EXACT_FIT_RMS;

    let mut intr = *initial;
    let mut poses = initial_poses.to_vec();
    let mut per_view = total_cost(&intr, &poses, views)?;
    let mut cost: f64 = per_view.iter().sum();
    let mut trace = vec![cost];
    let mut lambda = options.initial_lambda;
    let mut rejections = 0;
    let mut iterations = 0;
    let mut blocks: Option<Vec<ViewBlock>> = None;

    while cost > floor && iterations < options.max_iterations {
        iterations += 1;
        if blocks.is_none() {
            let b: Result<Vec<_>, _> = views
                .par_iter()
                .zip(poses.par_iter())
                .map(|(v, p)| view_block(&intr, p, v, &mask))
                .collect();
            blocks = Some(b?);
        }
        let current = blocks.as_ref().expect("computed above");
        let trial = solve_step(current, &mask, lambda).and_then(|(di, dp)| {
            let kv = intrinsic_vector(&intr);
            let negligible = step_is_negligible(&di, &kv, &dp, &poses);
            let new_intr = with_intrinsic_vector(&intr, &(kv + di));
            let new_poses: Vec<_> = poses
                .iter()
                .zip(&dp)
                .map(|(p, d)| apply_pose_step(p, d))
                .collect();
            let costs = total_cost(&new_intr, &new_poses, views).ok()?;
            let c: f64 = costs.iter().sum();
            c.is_finite()
                .then_some((new_intr, new_poses, costs, c, negligible))
        });
        match trial {
            Some((new_intr, new_poses, costs, new_cost, negligible)) if new_cost < cost => {
                let rel = (cost - new_cost) / cost;
                intr = new_intr;
                poses = new_poses;
                per_view = costs;
                cost = new_cost;
                trace.push(cost);
                blocks = None;
                lambda = (lambda / 10.0).max(1e-7);
                rejections = 0;
                if rel < options.relative_tolerance || negligible {
                    break;
                }
            }
            other => {
                if let Some((_, _, _, new_cost, negligible)) = other {
                    if negligible || (new_cost - cost).abs() <= options.relative_tolerance * cost {
                        break;
                    }
                }
                lambda *= 10.0;
                rejections += 1;
                if rejections >= options.max_rejections {
                    return Err(ZhangError::DivergenceDetected { rejections });
                }
            }
        }
    }
    log::debug!("refine: {iterations} iterations, cost {cost:e}");
    let per_view_errors = views
        .iter()
        .zip(&per_view)
        .map(|(v, c)| (c / v.len() as f64).sqrt())
        .collect();
    Ok(IntrinsicCalibrationResult {
        intrinsics: intr,
        per_view_poses: poses,
        mean_reprojection_error: (cost / n_points as f64).sqrt(),
        per_view_errors,
        cost_trace: trace,
        iterations,
        closed_form_used: true,
    })
}

/// Full intrinsic calibration of one camera. `nominal` supplies the image
/// size and is the starting point when the closed form fails.
pub fn calibrate_camera(
    nominal: &Intrinsics,
    views: &[PlanarView],
    options: &RefineOptions,
) -> Result<IntrinsicCalibrationResult, ZhangError> {
    if views.is_empty() {
        return Err(ZhangError::InsufficientViews { needed: 1, got: 0 });
    }
    let hs = views
        .iter()
        .map(estimate_homography)
        .collect::<Result<Vec<_>, _>>()?;
    let (init, closed_form_used) = match intrinsics_closed_form(&hs, nominal.width, nominal.height)
    {
        Ok(k) => (k, true),
        Err(e) => {
            log::warn!("closed-form intrinsics failed ({e}); starting from nominal");
            (*nominal, false)
        }
    };
    let poses = hs
        .iter()
        .map(|h| extrinsics_from_homography(&init, h))
        .collect::<Result<Vec<_>, _>>()?;
    let mut res = refine(&init, &poses, views, options)?;
    res.closed_form_used = closed_form_used;
    Ok(res)
}

/// Board pose of one view for fixed intrinsics.
pub fn estimate_pose(intr: &Intrinsics, view: &PlanarView) -> Result<RigidTransform, ZhangError> {
    let normalized = view
        .image_points
        .iter()
        .map(|p| undistort(intr, p).map(|n| Pixel::new(n.x, n.y)))
        .collect::<Result<Vec<_>, _>>()?;
    let nview = PlanarView {
        view_id: view.view_id,
        board_points: view.board_points.clone(),
        image_points: normalized,
    };
    let h = estimate_homography(&nview)?;
    let unit = Intrinsics::pinhole(1.0, 1.0, 0.0, 0.0, intr.width, intr.height);
    let init = extrinsics_from_homography(&unit, &h)?;
    let opts = RefineOptions {
        estimate_intrinsics: false,
        ..Default::default()
    };
    let res = refine(intr, &[init], std::slice::from_ref(view), &opts)?;
    Ok(res.per_view_poses[0])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StereoCalibration {
    pub color_from_ir: RigidTransform,
    /// RMS geodesic deviation of the per-view estimates from the mean, rad.
    pub rotation_spread: f64,
    /// RMS translation deviation from the mean, meters.
    pub translation_spread: f64,
    pub pairs: usize,
}

/// Karcher mean of rotation matrices.
pub fn mean_rotation(rs: &[Matrix3<f64>]) -> Matrix3<f64> {
    let mut mean = rs[0];
    for _ in 0..100 {
        let delta = rs.iter().fold(Vector3::zeros(), |a, r| {
            a + rotation_log(&(mean.transpose() * r))
        }) / rs.len() as f64;
        mean = nearest_rotation(&(mean * Rotation3::new(delta).into_inner()));
        if delta.norm() < 1e-15 {
            break;
        }
    }
    mean
}

/// `color_from_ir` from views detected by both cameras, paired by id.
pub fn calibrate_stereo(
    color_views: &[PlanarView],
    ir_views: &[PlanarView],
    color_intr: &Intrinsics,
    ir_intr: &Intrinsics,
) -> Result<StereoCalibration, ZhangError> {
    let ir_by_id: HashMap<u64, &PlanarView> = ir_views.iter().map(|v| (v.view_id, v)).collect();
    let pairs: Vec<(&PlanarView, &PlanarView)> = color_views
        .iter()
        .filter_map(|c| ir_by_id.get(&c.view_id).map(|i| (c, *i)))
        .collect();
    if pairs.is_empty() {
        return Err(ZhangError::NoCombinedViews);
    }
    let estimates = pairs
        .par_iter()
        .map(|(c, i)| {
            let pc = estimate_pose(color_intr, c)?;
            let pi = estimate_pose(ir_intr, i)?;
            Ok(pc.compose(&pi.inverse()))
        })
        .collect::<Result<Vec<RigidTransform>, ZhangError>>()?;
    let rs: Vec<Matrix3<f64>> = estimates.iter().map(|e| *e.rotation()).collect();
    let r = mean_rotation(&rs);
    let n = estimates.len() as f64;
    let t = estimates
        .iter()
        .fold(Vector3::zeros(), |a, e| a + e.translation())
        / n;
    let rot_spread = (rs
        .iter()
        .map(|ri| rotation_log(&(r.transpose() * ri)).norm_squared())
        .sum::<f64>()
        / n)
        .sqrt();
    let tr_spread = (estimates
        .iter()
        .map(|e| (e.translation() - t).norm_squared())
        .sum::<f64>()
        / n)
        .sqrt();
    Ok(StereoCalibration {
        color_from_ir: RigidTransform::from_parts(r, t),
        rotation_spread: rot_spread,
        translation_spread: tr_spread,
        pairs: estimates.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthFit {
    pub model: DepthModel,
    /// RMS of the corrected-minus-predicted depth, meters.
    pub rms_residual: f64,
    pub samples: usize,
}

/// Linear correction mapping raw corner depth readings onto the z predicted
/// by the calibrated IR board poses. `depths[v][i]` is the raw reading of
/// corner `i` in view `v`.
pub fn fit_depth_model(
    ir_poses: &[RigidTransform],
    views: &[PlanarView],
    depths: &[Vec<Option<f64>>],
) -> Result<DepthFit, ZhangError> {
    if ir_poses.len() != views.len() || depths.len() != views.len() {
        return Err(ZhangError::InvalidDepthData(
            "poses, views and depths differ in length".into(),
        ));
    }
    let mut samples = Vec::new();
    for ((pose, view), d) in ir_poses.iter().zip(views).zip(depths) {
        for (i, m) in d.iter().enumerate().take(view.len()) {
            if let Some(m) = m.filter(|m| m.is_finite() && *m > 0.0) {
                samples.push((m, pose.apply(&view.board_point(i)).z));
            }
        }
    }
    let n = samples.len() as f64;
    if samples.len() < 2 {
        return Err(ZhangError::InvalidDepthData(format!(
            "{} samples",
            samples.len()
        )));
    }
    let mx = samples.iter().map(|s| s.0).sum::<f64>() / n;
    let my = samples.iter().map(|s| s.1).sum::<f64>() / n;
    let sxx: f64 = samples.iter().map(|s| (s.0 - mx).powi(2)).sum();
    let sxy: f64 = samples.iter().map(|s| (s.0 - mx) * (s.1 - my)).sum();
    if !(sxx > 1e-18 * n) {
        return Err(ZhangError::InvalidDepthData(
            "no spread in measured depth".into(),
        ));
    }
    let scale = sxy / sxx;
    let model = DepthModel {
        scale,
        offset: my - scale * mx,
    };
    let rms = (samples
        .iter()
        .map(|s| (model.correct(s.0) - s.1).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    Ok(DepthFit {
        model,
        rms_residual: rms,
        samples: samples.len(),
    })
}

/// RMS of the 2D residual norm over all corners, and per view.
pub fn reprojection_error(
    intr: &Intrinsics,
    poses: &[RigidTransform],
    views: &[PlanarView],
) -> Result<(f64, Vec<f64>), ZhangError> {
    if poses.len() != views.len() {
        return Err(ZhangError::DegenerateConfiguration(format!(
            "{} poses for {} views",
            poses.len(),
            views.len()
        )));
    }
    let per = total_cost(intr, poses, views)?;
    let n: usize = views.iter().map(|v| v.len()).sum();
    let per_view = views
        .iter()
        .zip(&per)
        .map(|(v, c)| (c / v.len().max(1) as f64).sqrt())
        .collect();
    Ok(((per.iter().sum::<f64>() / n.max(1) as f64).sqrt(), per_view))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    pub(crate) fn big_board() -> CheckerboardSpec {
        CheckerboardSpec {
            squares_cols: 11,
            squares_rows: 8,
            square_size: 0.04,
            marker_square: [0, 0],
        }
    }

    /// Board centered at `center` in the camera frame, rotated by rpy.
    pub(crate) fn board_pose(
        spec: &CheckerboardSpec,
        rpy: (f64, f64, f64),
        center: Vector3<f64>,
    ) -> RigidTransform {
        let r = RigidTransform::from_rpy(rpy.0, rpy.1, rpy.2);
        RigidTransform::from_translation(center)
            .compose(&r)
            .compose(&RigidTransform::from_translation(-spec.center()))
    }

    pub(crate) fn render(
        spec: &CheckerboardSpec,
        k: &Intrinsics,
        pose: &RigidTransform,
        id: u64,
    ) -> PlanarView {
        let px = (0..spec.corner_count())
            .map(|i| k.project_point(&pose.apply(&spec.corner(i))).unwrap())
            .collect();
        PlanarView::from_corners(spec, id, px).unwrap()
    }

    pub(crate) fn tilted_poses(
        spec: &CheckerboardSpec,
        n: usize,
        dist: f64,
    ) -> Vec<RigidTransform> {
        let d = 20f64.to_radians();
        let tilts = [
            (0.0, 0.0),
            (d, 0.0),
            (-d, 0.0),
            (0.0, d),
            (0.0, -d),
            (d, d),
            (-d, d),
            (d, -d),
            (-d, -d),
        ];
        let offs = [
            (0.0, 0.0),
            (-0.15, -0.1),
            (0.15, -0.1),
            (-0.15, 0.1),
            (0.15, 0.1),
            (0.0, 0.12),
            (0.0, -0.12),
        ];
        (0..n)
            .map(|i| {
                let (rx, ry) = tilts[i % tilts.len()];
                let (ox, oy) = offs[i % offs.len()];
                board_pose(
                    spec,
                    (rx, ry, 0.1 * (i as f64 % 3.0 - 1.0)),
                    Vector3::new(ox, oy, dist + 0.05 * (i % 4) as f64),
                )
            })
            .collect()
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-300)
    }

    fn transfer(h: &Matrix3<f64>, b: &Vector2<f64>) -> Vector2<f64> {
        let p = h * Vector3::new(b.x, b.y, 1.0);
        Vector2::new(p.x / p.z, p.y / p.z)
    }

    #[test]
    fn homography_identity() {
        let spec = CheckerboardSpec::default();
        let board: Vec<Vector2<f64>> = (0..24).map(|i| spec.corner(i).xy()).collect();
        let px = board.iter().map(|b| Pixel::new(b.x, b.y)).collect();
        let h = estimate_homography(&PlanarView::new(0, board, px).unwrap()).unwrap();
        assert!((h - Matrix3::identity()).abs().max() < 1e-9);
    }

    #[test]
    fn homography_matches_projection() {
        let spec = CheckerboardSpec::default();
        let k = Intrinsics::pinhole(500.0, 510.0, 320.0, 240.0, 640, 480);
        let pose = board_pose(&spec, (0.3, -0.2, 0.4), Vector3::new(0.05, -0.02, 0.6));
        let view = render(&spec, &k, &pose, 0);
        let h = estimate_homography(&view).unwrap();
        let r = pose.rotation();
        let expected = camera_matrix(&k)
            * Matrix3::from_columns(&[r.column(0).into(), r.column(1).into(), *pose.translation()]);
        let expected = expected / expected[(2, 2)];
        assert!((h - expected).abs().max() / expected.abs().max() < 1e-9);
        for (b, p) in view.board_points.iter().zip(&view.image_points) {
            assert!((transfer(&h, b) - p.to_vector()).norm() < 1e-9);
        }
    }

    #[test]
    fn homography_random_a4_board() {
        let spec = CheckerboardSpec::default();
        let k = Intrinsics::pinhole(1000.0, 1000.0, 960.0, 540.0, 1920, 1080);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let u = rand_distr::Uniform::new(-0.5, 0.5).unwrap();
        for _ in 0..20 {
            let pose = board_pose(
                &spec,
                (
                    u.sample(&mut rng),
                    u.sample(&mut rng),
                    3.0 * u.sample(&mut rng),
                ),
                Vector3::new(
                    u.sample(&mut rng) * 0.4,
                    u.sample(&mut rng) * 0.3,
                    1.0 + u.sample(&mut rng),
                ),
            );
            let view = render(&spec, &k, &pose, 0);
            let h = estimate_homography(&view).unwrap();
            for (b, p) in view.board_points.iter().zip(&view.image_points) {
                assert!((transfer(&h, b) - p.to_vector()).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn homography_rejects_collinear() {
        let board: Vec<Vector2<f64>> = (0..6)
            .map(|i| Vector2::new(i as f64, 2.0 * i as f64))
            .collect();
        let px = board.iter().map(|b| Pixel::new(b.x, b.y + 1.0)).collect();
        let view = PlanarView::new(0, board, px).unwrap();
        assert!(matches!(
            estimate_homography(&view),
            Err(ZhangError::DegenerateConfiguration(_))
        ));
        assert!(PlanarView::new(0, vec![Vector2::zeros(); 3], vec![Pixel::default(); 3]).is_err());
    }

    #[test]
    fn closed_form_recovers_pinhole() {
        let spec = big_board();
        let k = Intrinsics::pinhole(500.0, 500.0, 320.0, 240.0, 640, 480);
        let d = 20f64.to_radians();
        let tilts = [(d, 0.0), (-d, 0.0), (0.0, d), (0.0, -d), (d, -d)];
        let hs: Vec<_> = tilts
            .iter()
            .map(|&(rx, ry)| {
                estimate_homography(&render(
                    &spec,
                    &k,
                    &board_pose(&spec, (rx, ry, 0.0), Vector3::new(0.0, 0.0, 1.0)),
                    0,
                ))
                .unwrap()
            })
            .collect();
        let e = intrinsics_closed_form(&hs, 640, 480).unwrap();
        for (a, b) in [(e.fx, k.fx), (e.fy, k.fy), (e.cx, k.cx), (e.cy, k.cy)] {
            assert!(rel(a, b) < 1e-6, "{a} vs {b}");
        }
        let two = intrinsics_closed_form(&[hs[0], hs[2]], 640, 480).unwrap();
        for (a, b) in [
            (two.fx, k.fx),
            (two.fy, k.fy),
            (two.cx, k.cx),
            (two.cy, k.cy),
        ] {
            assert!(rel(a, b) < 1e-6, "{a} vs {b}");
        }
        assert!(matches!(
            intrinsics_closed_form(&hs[..1], 640, 480),
            Err(ZhangError::InsufficientViews { .. })
        ));
    }

    #[test]
    fn closed_form_rejects_fronto_parallel() {
        let spec = big_board();
        let k = Intrinsics::pinhole(500.0, 500.0, 320.0, 240.0, 640, 480);
        let hs: Vec<_> = (0..5)
            .map(|i| {
                let pose = board_pose(
                    &spec,
                    (0.0, 0.0, 0.2 * i as f64),
                    Vector3::new(0.02 * i as f64, 0.0, 0.8 + 0.1 * i as f64),
                );
                estimate_homography(&render(&spec, &k, &pose, 0)).unwrap()
            })
            .collect();
        assert!(matches!(
            intrinsics_closed_form(&hs, 640, 480),
            Err(ZhangError::IllConditioned { .. })
        ));
    }

    #[test]
    fn extrinsics_examples() {
        let spec = CheckerboardSpec::default();
        let k = Intrinsics::pinhole(600.0, 610.0, 330.0, 250.0, 640, 480);
        let pose = board_pose(&spec, (0.2, 0.3, -0.5), Vector3::new(0.1, 0.05, 0.9));
        let r = pose.rotation();
        let h = camera_matrix(&k)
            * Matrix3::from_columns(&[r.column(0).into(), r.column(1).into(), *pose.translation()]);
        let e = extrinsics_from_homography(&k, &h).unwrap();
        let (da, dt) = e.distance_to(&pose);
        assert!(da < 1e-9 && dt < 1e-9);
        let neg = extrinsics_from_homography(&k, &(-h * 3.0)).unwrap();
        let (da, dt) = neg.distance_to(&pose);
        assert!(da < 1e-9 && dt < 1e-9);
        let fronto = camera_matrix(&k) * Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        let e = extrinsics_from_homography(&k, &fronto).unwrap();
        assert!((e.translation() - Vector3::new(0.0, 0.0, 1.0)).norm() < 1e-12);
        assert!((e.rotation() - Matrix3::identity()).norm() < 1e-12);
        assert_eq!(
            extrinsics_from_homography(&k, &Matrix3::zeros()),
            Err(ZhangError::SingularHomography)
        );
    }

    pub(crate) fn distorted_camera() -> Intrinsics {
        Intrinsics::pinhole(800.0, 790.0, 322.0, 236.0, 640, 480)
            .with_distortion(-0.2, 0.05, 0.0, 0.0, 0.0)
    }

    #[test]
    fn refine_recovers_distortion() {
        let spec = big_board();
        let k = distorted_camera();
        let views: Vec<_> = tilted_poses(&spec, 12, 0.9)
            .iter()
            .enumerate()
            .map(|(i, p)| render(&spec, &k, p, i as u64))
            .collect();
        let res = calibrate_camera(
            &Intrinsics::from_fov(640, 480, 0.8, 0.6),
            &views,
            &RefineOptions::default(),
        )
        .unwrap();
        let e = res.intrinsics;
        for (a, b) in [
            (e.fx, k.fx),
            (e.fy, k.fy),
            (e.cx, k.cx),
            (e.cy, k.cy),
            (e.k1, k.k1),
            (e.k2, k.k2),
        ] {
            assert!(rel(a, b) < 1e-6, "{a} vs {b}");
        }
        for c in [e.k3, e.p1, e.p2] {
            assert!(c.abs() < 1e-6);
        }
        assert!(res.mean_reprojection_error < 1e-8);
        assert!(res.closed_form_used);
        assert!(res.cost_trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn refine_fixed_point() {
        let spec = big_board();
        let k = Intrinsics::pinhole(800.0, 790.0, 322.0, 236.0, 640, 480);
        let poses = tilted_poses(&spec, 6, 0.9);
        let views: Vec<_> = poses
            .iter()
            .enumerate()
            .map(|(i, p)| render(&spec, &k, p, i as u64))
            .collect();
        let res = refine(&k, &poses, &views, &RefineOptions::default()).unwrap();
        assert_eq!(res.iterations, 0);
        assert_eq!(res.intrinsics, k);
        assert_eq!(res.cost_trace.len(), 1);
    }

    fn noisy_views(
        spec: &CheckerboardSpec,
        k: &Intrinsics,
        poses: &[RigidTransform],
        sigma: f64,
        seed: u64,
    ) -> Vec<PlanarView> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0, sigma).unwrap();
        poses
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let mut v = render(spec, k, p, i as u64);
                for px in &mut v.image_points {
                    px.u += n.sample(&mut rng);
                    px.v += n.sample(&mut rng);
                }
                v
            })
            .collect()
    }

    #[test]
    fn refine_noise_floor() {
        // Per-axis residual RMS against σ; the 2D norm carries an extra √2.
        let spec = big_board();
        let k = distorted_camera();
        let views = noisy_views(&spec, &k, &tilted_poses(&spec, 30, 0.9), 0.5, 11);
        let res = calibrate_camera(
            &Intrinsics::from_fov(640, 480, 0.8, 0.6),
            &views,
            &RefineOptions::default(),
        )
        .unwrap();
        let per_axis = res.mean_reprojection_error / std::f64::consts::SQRT_2;
        assert!(per_axis > 0.5 / 1.2 && per_axis < 0.5 * 1.2, "{per_axis}");
        assert!(res.cost_trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn refine_is_order_invariant() {
        let spec = big_board();
        let k = distorted_camera();
        let views = noisy_views(&spec, &k, &tilted_poses(&spec, 10, 0.9), 0.3, 5);
        let nominal = Intrinsics::from_fov(640, 480, 0.8, 0.6);
        let a = calibrate_camera(&nominal, &views, &RefineOptions::default()).unwrap();
        let mut rev = views.clone();
        rev.reverse();
        let b = calibrate_camera(&nominal, &rev, &RefineOptions::default()).unwrap();
        let va = intrinsic_vector(&a.intrinsics);
        let vb = intrinsic_vector(&b.intrinsics);
        for i in 0..9 {
            assert!(
                (va[i] - vb[i]).abs() <= 1e-9 * va[i].abs().max(1.0),
                "param {i}: {} vs {}",
                va[i],
                vb[i]
            );
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let k = distorted_camera().with_distortion(-0.2, 0.05, 0.01, 0.002, -0.001);
        let pose = board_pose(
            &big_board(),
            (0.2, -0.3, 0.1),
            Vector3::new(0.05, 0.02, 0.8),
        );
        let p = Vector3::new(0.13, 0.21, 0.0);
        let (_, jk, jp) = project_with_jacobian(&k, &pose, &p).unwrap();
        let kv = intrinsic_vector(&k);
        for c in 0..9 {
            let h = 1e-6 * kv[c].abs().max(1e-3);
            let mut a = kv;
            let mut b = kv;
            a[c] += h;
            b[c] -= h;
            let pa = with_intrinsic_vector(&k, &a)
                .project_point(&pose.apply(&p))
                .unwrap();
            let pb = with_intrinsic_vector(&k, &b)
                .project_point(&pose.apply(&p))
                .unwrap();
            let fd = Vector2::new(pa.u - pb.u, pa.v - pb.v) / (2.0 * h);
            for r in 0..2 {
                assert!(
                    (jk[(r, c)] - fd[r]).abs() <= 1e-5 * fd[r].abs().max(1.0),
                    "k col {c}"
                );
            }
        }
        for c in 0..6 {
            let h = 1e-6;
            let mut d = Vector6::zeros();
            d[c] = h;
            let pa = k
                .project_point(&apply_pose_step(&pose, &d).apply(&p))
                .unwrap();
            let pb = k
                .project_point(&apply_pose_step(&pose, &-d).apply(&p))
                .unwrap();
            let fd = Vector2::new(pa.u - pb.u, pa.v - pb.v) / (2.0 * h);
            for r in 0..2 {
                assert!(
                    (jp[(r, c)] - fd[r]).abs() <= 1e-5 * fd[r].abs().max(1.0),
                    "pose col {c}"
                );
            }
        }
    }

    fn stereo_pair(
        spec: &CheckerboardSpec,
        n: usize,
        sigma: f64,
        seed: u64,
        color_from_ir: &RigidTransform,
    ) -> (Vec<PlanarView>, Vec<PlanarView>, Intrinsics, Intrinsics) {
        let kc = Intrinsics::pinhole(1060.0, 1060.0, 960.0, 540.0, 1920, 1080);
        let ki = Intrinsics::pinhole(365.0, 365.0, 256.0, 212.0, 512, 424)
            .with_distortion(0.09, -0.25, 0.0, 0.001, -0.0005);
        let poses = tilted_poses(spec, n, 1.2);
        let cv = noisy_views(spec, &kc, &poses, sigma, seed);
        let ir_poses: Vec<_> = poses
            .iter()
            .map(|p| color_from_ir.inverse().compose(p))
            .collect();
        let iv = noisy_views(spec, &ki, &ir_poses, sigma, seed + 1000);
        (cv, iv, kc, ki)
    }

    #[test]
    fn stereo_identity_and_baseline() {
        let spec = big_board();
        let (cv, _, kc, _) = stereo_pair(&spec, 4, 0.0, 0, &RigidTransform::identity());
        let s = calibrate_stereo(&cv, &cv, &kc, &kc).unwrap();
        let (da, dt) = s.color_from_ir.distance_to(&RigidTransform::identity());
        assert!(da < 1e-12 && dt < 1e-12);

        let truth = RigidTransform::from_translation(Vector3::new(0.052, 0.0, 0.0));
        let (cv, iv, kc, ki) = stereo_pair(&spec, 20, 0.0, 0, &truth);
        let s = calibrate_stereo(&cv, &iv, &kc, &ki).unwrap();
        let (da, dt) = s.color_from_ir.distance_to(&truth);
        assert!(da < 1e-9 && dt < 1e-9, "{da} {dt}");
        assert_eq!(s.pairs, 20);
        assert_eq!(
            calibrate_stereo(&cv, &[], &kc, &ki),
            Err(ZhangError::NoCombinedViews)
        );
    }

    #[test]
    fn stereo_spread_shrinks_with_views() {
        // Error of the mean estimate against the truth, averaged over seeds.
        let spec = CheckerboardSpec::default();
        let truth = RigidTransform::from_translation(Vector3::new(0.052, 0.0, 0.0));
        let mut err = [0.0; 2];
        for seed in 0..5 {
            for (slot, n) in [(0, 5), (1, 158)] {
                let (cv, iv, kc, ki) = stereo_pair(&spec, n, 0.5, seed, &truth);
                let s = calibrate_stereo(&cv, &iv, &kc, &ki).unwrap();
                err[slot] += s.color_from_ir.distance_to(&truth).1;
            }
        }
        assert!(err[0] > err[1], "{err:?}");
    }

    #[test]
    fn reprojection_error_examples() {
        let spec = big_board();
        let k = distorted_camera();
        let poses = tilted_poses(&spec, 8, 0.9);
        let views: Vec<_> = poses
            .iter()
            .enumerate()
            .map(|(i, p)| render(&spec, &k, p, i as u64))
            .collect();
        assert!(reprojection_error(&k, &poses, &views).unwrap().0 < 1e-12);
        let shifted: Vec<_> = views
            .iter()
            .map(|v| {
                let mut v = v.clone();
                v.image_points.iter_mut().for_each(|p| p.u += 1.0);
                v
            })
            .collect();
        let (m, per) = reprojection_error(&k, &poses, &shifted).unwrap();
        assert!((m - 1.0).abs() < 1e-9 && per.iter().all(|e| (e - 1.0).abs() < 1e-9));
        let noisy = noisy_views(&spec, &k, &poses, 0.5, 2);
        let (m, _) = reprojection_error(&k, &poses, &noisy).unwrap();
        assert!(
            (m / (0.5 * std::f64::consts::SQRT_2) - 1.0).abs() < 0.1,
            "{m}"
        );
    }

    #[test]
    fn depth_model_regression() {
        let spec = big_board();
        let k = distorted_camera();
        let poses = tilted_poses(&spec, 6, 0.9);
        let views: Vec<_> = poses
            .iter()
            .enumerate()
            .map(|(i, p)| render(&spec, &k, p, i as u64))
            .collect();
        let truth = DepthModel {
            scale: 1.012,
            offset: -0.008,
        };
        let depths: Vec<Vec<Option<f64>>> = poses
            .iter()
            .map(|p| {
                (0..spec.corner_count())
                    .map(|i| Some(truth.distort(p.apply(&spec.corner(i)).z)))
                    .collect()
            })
            .collect();
        let fit = fit_depth_model(&poses, &views, &depths).unwrap();
        assert!(
            rel(fit.model.scale, truth.scale) < 1e-9
                && (fit.model.offset - truth.offset).abs() < 1e-9
        );
        let flat = vec![vec![Some(1.0); spec.corner_count()]; 6];
        assert!(fit_depth_model(&poses, &views, &flat).is_err());
    }
}
