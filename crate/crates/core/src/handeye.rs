//! Eye-to-Hand estimation from corner correspondences, mount-offset
//! estimation from in-place tilts, and error reporting in robot-base axes.

use nalgebra::{Matrix3, SMatrix, SVector, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    estimate_rigid, estimate_rigid_ransac, GeometryError, PointId, RansacParams,
};
use crate::target::{BoardObservation, CheckerboardSpec};
use crate::{PointSet3, RigidTransform, SensorRig};

/// Largest allowed camera/robot timestamp difference of a pair.
pub const SYNC_WINDOW_NS: u64 = 30_000_000;
/// Tilt poses must span at least this rotation for the offset to be
/// observable, degrees.
pub const MIN_EXCITATION_DEG: f64 = 5.0;
const OFFSET_ROUNDS: usize = 20;
const OFFSET_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum HandEyeError {
    #[error("camera and robot timestamps differ by {delta_ns} ns")]
    TimestampSkew { delta_ns: u64 },
    #[error("observation orientation not resolved")]
    NotResolved,
    #[error("observation has no IR corners")]
    MissingIr,
    #[error("expected {expected} corners, got {got}")]
    CornerCountMismatch { expected: usize, got: usize },
    #[error("need at least {needed} poses, got {got}")]
    TooFewPoses { needed: usize, got: usize },
    #[error("tilt orientations span {span_deg:.2}°, below {MIN_EXCITATION_DEG}°")]
    InsufficientExcitation { span_deg: f64 },
    #[error("holdout set is empty")]
    EmptyHoldout,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// `(pose_id << 16) | corner`.
pub fn point_id(pose_id: u64, corner: usize) -> PointId {
    PointId((pose_id << 16) | corner as u64)
}

pub fn pose_of(id: PointId) -> u64 {
    id.0 >> 16
}

/// Board pose relative to the robot flange.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MountOffset {
    pub flange_from_board: RigidTransform,
}

impl MountOffset {
    pub fn new(flange_from_board: RigidTransform) -> Self {
        Self { flange_from_board }
    }
}

/// Flange pose reported by the robot encoders.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StampedPose {
    pub robot_from_flange: RigidTransform,
    pub timestamp_ns: u64,
}

/// Camera-frame corner positions of an orientation-resolved observation,
/// keyed by canonical corner index. Corners without a usable depth are
/// skipped.
pub fn observed_corners(
    obs: &BoardObservation,
    rig: &SensorRig,
) -> Result<Vec<(usize, Vector3<f64>)>, HandEyeError> {
    if !obs.orientation_resolved {
        return Err(HandEyeError::NotResolved);
    }
    let ir = obs.ir.as_ref().ok_or(HandEyeError::MissingIr)?;
    if ir.corners.len() != obs.corner_depths.len() {
        return Err(HandEyeError::CornerCountMismatch {
            expected: ir.corners.len(),
            got: obs.corner_depths.len(),
        });
    }
    Ok(ir
        .corners
        .iter()
        .zip(&obs.corner_depths)
        .enumerate()
        .filter_map(|(i, (px, d))| {
            let d = (*d)?;
            match rig.point_from_ir(px, d) {
                Ok(p) => Some((i, p)),
                Err(e) => {
                    log::debug!("corner {i} dropped: {e}");
                    None
                }
            }
        })
        .collect())
}

/// Paired camera-frame and robot-base-frame corner positions.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CorrespondenceSet {
    camera_points: PointSet3,
    robot_points: PointSet3,
    timestamps: Vec<u64>,
    pose_ids: Vec<u64>,
}

impl CorrespondenceSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.camera_points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.camera_points.is_empty()
    }

    pub fn camera_points(&self) -> &PointSet3 {
        &self.camera_points
    }

    pub fn robot_points(&self) -> &PointSet3 {
        &self.robot_points
    }

    pub fn timestamps(&self) -> &[u64] {
        &self.timestamps
    }

    /// Source pose of each pair.
    pub fn pose_ids(&self) -> &[u64] {
        &self.pose_ids
    }

    /// Distinct pose ids in insertion order.
    pub fn distinct_poses(&self) -> Vec<u64> {
        let mut out: Vec<u64> = Vec::new();
        for &p in &self.pose_ids {
            if out.last() != Some(&p) && !out.contains(&p) {
                out.push(p);
            }
        }
        out
    }

    /// Adds one correspondence. Ids must be unique.
    pub fn push(
        &mut self,
        id: PointId,
        camera: Vector3<f64>,
        robot: Vector3<f64>,
        timestamp_ns: u64,
    ) -> Result<(), HandEyeError> {
        self.camera_points.push(id, camera)?;
        self.robot_points.push(id, robot)?;
        self.timestamps.push(timestamp_ns);
        self.pose_ids.push(pose_of(id));
        Ok(())
    }

    /// Pairs whose source pose satisfies `keep`.
    pub fn filter_poses(&self, keep: impl Fn(u64) -> bool) -> Self {
        let mut out = Self::new();
        for (i, (id, c)) in self.camera_points.iter().enumerate() {
            if keep(self.pose_ids[i]) {
                out.push(id, c, self.robot_points.point(i), self.timestamps[i])
                    .expect("ids unique in source");
            }
        }
        out
    }

    /// One pair per pose: the centroids of its camera and robot points, at
    /// the pose's first timestamp, keyed as corner 0 of the pose.
    pub fn pose_centroids(&self) -> Self {
        let mut out = Self::new();
        for p in self.distinct_poses() {
            let idx: Vec<usize> = (0..self.len()).filter(|&i| self.pose_ids[i] == p).collect();
            let n = idx.len() as f64;
            let c = idx
                .iter()
                .map(|&i| self.camera_points.point(i))
                .sum::<Vector3<f64>>()
                / n;
            let r = idx
                .iter()
                .map(|&i| self.robot_points.point(i))
                .sum::<Vector3<f64>>()
                / n;
            out.push(point_id(p, 0), c, r, self.timestamps[idx[0]])
                .expect("pose ids distinct");
        }
        out
    }

    /// Splits off every `every`-th accumulated pose (1-based) as holdout.
    pub fn split_holdout(&self, every: usize) -> (Self, Self) {
        let poses = self.distinct_poses();
        let held: Vec<u64> = poses
            .iter()
            .enumerate()
            .filter(|(k, _)| (k + 1) % every.max(1) == 0)
            .map(|(_, p)| *p)
            .collect();
        (
            self.filter_poses(|p| !held.contains(&p)),
            self.filter_poses(|p| held.contains(&p)),
        )
    }

    /// Appends the corners of one observation taken at robot pose `robot`.
    /// Returns the number of pairs added.
    pub fn accumulate(
        &mut self,
        obs: &BoardObservation,
        rig: &SensorRig,
        robot: &StampedPose,
        offset: &MountOffset,
        spec: &CheckerboardSpec,
        pose_id: u64,
    ) -> Result<usize, HandEyeError> {
        let delta_ns = obs.timestamp_ns.abs_diff(robot.timestamp_ns);
        if delta_ns > SYNC_WINDOW_NS {
            return Err(HandEyeError::TimestampSkew { delta_ns });
        }
        let n = spec.corner_count();
        if obs.corner_depths.len() != n {
            return Err(HandEyeError::CornerCountMismatch {
                expected: n,
                got: obs.corner_depths.len(),
            });
        }
        let corners = observed_corners(obs, rig)?;
        let robot_from_board = robot.robot_from_flange.compose(&offset.flange_from_board);
        for (i, c) in &corners {
            self.push(
                point_id(pose_id, *i),
                *c,
                robot_from_board.apply(&spec.corner(*i)),
                obs.timestamp_ns,
            )?;
        }
        Ok(corners.len())
    }
}

/// Estimated `robot_from_camera` with residual statistics over the inliers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EyeToHandResult {
    pub robot_from_camera: RigidTransform,
    /// Homogeneous matrix of `robot_from_camera`, row-major.
    pub matrix: [[f64; 4]; 4],
    pub inlier_count: usize,
    pub total_count: usize,
    /// Meters.
    pub rms_residual: f64,
    /// Per robot-base axis, meters.
    pub per_axis_rms: [f64; 3],
    pub per_axis_mean_abs: [f64; 3],
    pub inlier_ids: Vec<PointId>,
}

struct ResidualStats {
    rms: f64,
    per_axis_rms: [f64; 3],
    per_axis_mean_abs: [f64; 3],
}

fn residual_stats(
    t: &RigidTransform,
    camera: &PointSet3,
    robot: &PointSet3,
) -> Option<ResidualStats> {
    let n = camera.len();
    if n == 0 {
        return None;
    }
    let mut sq = Vector3::zeros();
    let mut ab = Vector3::zeros();
    for (i, (_, c)) in camera.iter().enumerate() {
        let r = robot.point(i) - t.apply(&c);
        sq += r.component_mul(&r);
        ab += r.abs();
    }
    let nf = n as f64;
    Some(ResidualStats {
        rms: (sq.sum() / nf).sqrt(),
        per_axis_rms: [(sq.x / nf).sqrt(), (sq.y / nf).sqrt(), (sq.z / nf).sqrt()],
        per_axis_mean_abs: [ab.x / nf, ab.y / nf, ab.z / nf],
    })
}

/// RANSAC rigid fit of camera points onto robot points.
pub fn calibrate_eye_to_hand(
    set: &CorrespondenceSet,
    params: &RansacParams,
) -> Result<EyeToHandResult, HandEyeError> {
    let fit = estimate_rigid_ransac(&set.camera_points, &set.robot_points, params)?;
    let cam = set.camera_points.select(&fit.inlier_ids);
    let rob = set.robot_points.select(&fit.inlier_ids);
    let stats = residual_stats(&fit.transform, &cam, &rob)
        .ok_or(GeometryError::TooFewPoints { needed: 3, got: 0 })?;
    Ok(EyeToHandResult {
        robot_from_camera: fit.transform,
        matrix: fit.transform.to_rows(),
        inlier_count: fit.inlier_ids.len(),
        total_count: fit.total,
        rms_residual: stats.rms,
        per_axis_rms: stats.per_axis_rms,
        per_axis_mean_abs: stats.per_axis_mean_abs,
        inlier_ids: fit.inlier_ids,
    })
}

/// Holdout prediction error of `robot_from_camera`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionError {
    /// RMS of `|robot − T·camera|`, meters.
    pub overall: f64,
    /// RMS per robot-base axis, meters.
    pub per_axis: [f64; 3],
    pub per_axis_mean_abs: [f64; 3],
    pub count: usize,
}

pub fn prediction_error(
    robot_from_camera: &RigidTransform,
    holdout: &CorrespondenceSet,
) -> Result<PredictionError, HandEyeError> {
    let s = residual_stats(
        robot_from_camera,
        &holdout.camera_points,
        &holdout.robot_points,
    )
    .ok_or(HandEyeError::EmptyHoldout)?;
    Ok(PredictionError {
        overall: s.rms,
        per_axis: s.per_axis_rms,
        per_axis_mean_abs: s.per_axis_mean_abs,
        count: holdout.len(),
    })
}

/// RMS displacement `|estimate·truth⁻¹·w − w|` over robot-frame points `w`:
/// how far the estimate moves points the true transform places at `w`.
pub fn transfer_error(
    estimate: &RigidTransform,
    truth: &RigidTransform,
    points: &[Vector3<f64>],
) -> f64 {
    let d = estimate.compose(&truth.inverse());
    rms(points.iter().map(|w| (d.apply(w) - w).norm()))
}

/// Transfer error of the camera-2 → camera-1 transform implied by two
/// Eye-to-Hand estimates, over robot-frame points `w` seen by camera 2.
/// Bounded by the sum of the two individual transfer errors.
pub fn pair_transfer_error(
    estimate1: &RigidTransform,
    estimate2: &RigidTransform,
    truth1: &RigidTransform,
    truth2: &RigidTransform,
    points: &[Vector3<f64>],
) -> f64 {
    let est = estimate1.inverse().compose(estimate2);
    let tru = truth1.inverse().compose(truth2);
    let to_cam2 = truth2.inverse();
    rms(points.iter().map(|w| {
        let c2 = to_cam2.apply(w);
        (est.apply(&c2) - tru.apply(&c2)).norm()
    }))
}

fn rms(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v * v, n + 1));
    if n == 0 {
        0.0
    } else {
        (s / n as f64).sqrt()
    }
}

/// One tilt observation used for the offset estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct TiltSample {
    pub robot: StampedPose,
    pub observation: BoardObservation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MountOffsetEstimate {
    pub offset: MountOffset,
    pub robot_from_camera: RigidTransform,
    /// Total squared error before the first round and after each step.
    pub cost_trace: Vec<f64>,
    pub rounds: usize,
    pub rms_residual: f64,
}

struct TiltData {
    /// Per pose: flange pose, then (board point, camera point) pairs.
    poses: Vec<(RigidTransform, Vec<(Vector3<f64>, Vector3<f64>)>)>,
}

impl TiltData {
    fn cost(&self, t: &RigidTransform, x: &RigidTransform) -> f64 {
        self.poses
            .iter()
            .map(|(p, pairs)| {
                let px = p.compose(x);
                pairs
                    .iter()
                    .map(|(b, c)| (t.apply(c) - px.apply(b)).norm_squared())
                    .sum::<f64>()
            })
            .sum()
    }

    fn count(&self) -> usize {
        self.poses.iter().map(|(_, p)| p.len()).sum()
    }

    /// Offset minimizing the cost for fixed `t`.
    fn solve_offset(&self, t: &RigidTransform) -> Result<RigidTransform, GeometryError> {
        let mut src = PointSet3::new();
        let mut dst = PointSet3::new();
        let mut k = 0u64;
        for (p, pairs) in &self.poses {
            let flange_from_robot = p.inverse();
            for (b, c) in pairs {
                src.push(PointId(k), *b)?;
                dst.push(PointId(k), flange_from_robot.apply(&t.apply(c)))?;
                k += 1;
            }
        }
        Ok(estimate_rigid(&src, &dst)?.transform)
    }

    /// `robot_from_camera` minimizing the cost for fixed offset.
    fn solve_camera(&self, x: &RigidTransform) -> Result<RigidTransform, GeometryError> {
        let mut src = PointSet3::new();
        let mut dst = PointSet3::new();
        let mut k = 0u64;
        for (p, pairs) in &self.poses {
            let px = p.compose(x);
            for (b, c) in pairs {
                src.push(PointId(k), *c)?;
                dst.push(PointId(k), px.apply(b))?;
                k += 1;
            }
        }
        Ok(estimate_rigid(&src, &dst)?.transform)
    }

    /// Damped Gauss-Newton over both transforms jointly.
    fn polish(
        &self,
        t: RigidTransform,
        x: RigidTransform,
    ) -> (RigidTransform, RigidTransform, f64) {
        type M12 = SMatrix<f64, 12, 12>;
        type V12 = SVector<f64, 12>;
        let skew = |v: &Vector3<f64>| Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0);
        let (mut t, mut x) = (t, x);
        let mut cost = self.cost(&t, &x);
        let mut lambda = 1e-6;
        for _ in 0..50 {
            let mut h = M12::zeros();
            let mut g = V12::zeros();
            for (p, pairs) in &self.poses {
                let rp = p.rotation();
                let px = p.compose(&x);
                for (b, c) in pairs {
                    let tc = t.rotation() * c;
                    let r = tc + t.translation() - px.apply(b);
                    let xb = x.rotation() * b;
                    let mut j = SMatrix::<f64, 3, 12>::zeros();
                    j.fixed_view_mut::<3, 3>(0, 0).copy_from(&-skew(&tc));
                    j.fixed_view_mut::<3, 3>(0, 3)
                        .copy_from(&Matrix3::identity());
                    j.fixed_view_mut::<3, 3>(0, 6).copy_from(&(rp * skew(&xb)));
                    j.fixed_view_mut::<3, 3>(0, 9).copy_from(&-rp);
                    h += j.transpose() * j;
                    g += j.transpose() * r;
                }
            }
            let mut accepted = false;
            while lambda < 1e12 {
                let mut hd = h;
                for k in 0..12 {
                    hd[(k, k)] += lambda * h[(k, k)].max(1e-12);
                }
                let Some(ch) = hd.cholesky() else {
                    lambda *= 10.0;
                    continue;
                };
                let d = ch.solve(&-g);
                let nt = perturb(&t, &d.fixed_rows::<6>(0).into_owned());
                let nx = perturb(&x, &d.fixed_rows::<6>(6).into_owned());
                let nc = self.cost(&nt, &nx);
                if nc < cost {
                    let rel = (cost - nc) / cost;
                    t = nt;
                    x = nx;
                    cost = nc;
                    lambda = (lambda / 10.0).max(1e-12);
                    accepted = rel > 1e-14;
                    break;
                }
                lambda *= 10.0;
            }
            if !accepted {
                break;
            }
        }
        (t, x, cost)
    }
}

fn perturb(t: &RigidTransform, d: &SVector<f64, 6>) -> RigidTransform {
    let w = Vector3::new(d[0], d[1], d[2]);
    let r = RigidTransform::from_scaled_axis(w, Vector3::zeros());
    RigidTransform::from_parts(
        r.rotation() * t.rotation(),
        t.translation() + Vector3::new(d[3], d[4], d[5]),
    )
}

/// Largest rotation between any two flange orientations, degrees.
pub fn orientation_span_deg(poses: &[RigidTransform]) -> f64 {
    let mut span: f64 = 0.0;
    for (i, a) in poses.iter().enumerate() {
        for b in &poses[i + 1..] {
            span = span.max(a.distance_to(b).0);
        }
    }
    span.to_degrees()
}

/// Joint estimate of the mount offset and `robot_from_camera` from tilt
/// observations: alternating closed-form steps, then a joint polish.
pub fn estimate_mount_offset(
    samples: &[TiltSample],
    rig: &SensorRig,
    spec: &CheckerboardSpec,
    initial_offset: &MountOffset,
    provisional: &RigidTransform,
) -> Result<MountOffsetEstimate, HandEyeError> {
    if samples.len() < 3 {
        return Err(HandEyeError::TooFewPoses {
            needed: 3,
            got: samples.len(),
        });
    }
    let flanges: Vec<RigidTransform> = samples.iter().map(|s| s.robot.robot_from_flange).collect();
    let span_deg = orientation_span_deg(&flanges);
    if span_deg < MIN_EXCITATION_DEG {
        return Err(HandEyeError::InsufficientExcitation { span_deg });
    }
    let mut poses = Vec::with_capacity(samples.len());
    for s in samples {
        let corners = observed_corners(&s.observation, rig)?;
        let pairs = corners
            .into_iter()
            .map(|(i, c)| (spec.corner(i), c))
            .collect();
        poses.push((s.robot.robot_from_flange, pairs));
    }
    let data = TiltData { poses };
    let n = data.count();
    if n < 3 {
        return Err(GeometryError::TooFewPoints { needed: 3, got: n }.into());
    }

    let mut t = *provisional;
    let mut x = initial_offset.flange_from_board;
    let mut trace = vec![data.cost(&t, &x)];
    let mut rounds = 0;
    while rounds < OFFSET_ROUNDS {
        rounds += 1;
        let nx = data.solve_offset(&t)?;
        let nt = data.solve_camera(&nx)?;
        let (da, dt) = nx.distance_to(&x);
        x = nx;
        t = nt;
        trace.push(data.cost(&t, &x));
        if da < OFFSET_TOLERANCE && dt < OFFSET_TOLERANCE {
            break;
        }
    }
    let (t, x, cost) = data.polish(t, x);
    if cost < *trace.last().expect("non-empty") {
        trace.push(cost);
    }
    log::debug!(
        "mount offset: {rounds} rounds, rms {:.3e} m",
        (cost / n as f64).sqrt()
    );
    Ok(MountOffsetEstimate {
        offset: MountOffset::new(x),
        robot_from_camera: t,
        cost_trace: trace,
        rounds,
        rms_residual: (cost / n as f64).sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::Intrinsics as GenericIntrinsics;
    use crate::target::CornerDetection;
    use crate::{CameraId, DepthModel, Intrinsics};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn rig() -> SensorRig {
        SensorRig {
            color: Intrinsics::pinhole(1060.0, 1060.0, 960.0, 540.0, 1920, 1080),
            ir: GenericIntrinsics::pinhole(365.0, 365.0, 256.0, 212.0, 512, 424),
            color_from_ir: RigidTransform::from_translation(Vector3::new(0.052, 0.0, 0.0)),
            depth_model: DepthModel::identity(),
        }
    }

    fn truth_camera() -> RigidTransform {
        // Camera 1.2 m in front of the robot, looking back and down.
        let look = RigidTransform::from_rpy(-2.2, 0.0, std::f64::consts::FRAC_PI_2);
        look.with_translation(Vector3::new(1.4, 0.0, 0.9))
    }

    /// Renders a noiseless or noisy observation of the board at a flange pose.
    fn observe(
        spec: &CheckerboardSpec,
        rig: &SensorRig,
        robot_from_camera: &RigidTransform,
        flange: &RigidTransform,
        offset: &MountOffset,
        noise: Option<(&mut ChaCha8Rng, f64, f64)>,
    ) -> BoardObservation {
        let ir_from_robot = rig
            .color_from_ir
            .inverse()
            .compose(&robot_from_camera.inverse());
        let board = flange.compose(&offset.flange_from_board);
        let mut corners = Vec::new();
        let mut depths = Vec::new();
        let mut noise = noise;
        for i in 0..spec.corner_count() {
            let p = ir_from_robot.apply(&board.apply(&spec.corner(i)));
            let mut px = rig.ir.project_point(&p).unwrap();
            let mut z = p.z;
            if let Some((rng, lat, ax)) = noise.as_mut() {
                px.u += Normal::new(0.0, *lat).unwrap().sample(*rng);
                px.v += Normal::new(0.0, *lat).unwrap().sample(*rng);
                z += Normal::new(0.0, *ax).unwrap().sample(*rng);
            }
            corners.push(px);
            depths.push(Some(rig.depth_model.distort(z)));
        }
        BoardObservation {
            camera_id: CameraId::from("cam"),
            timestamp_ns: 0,
            color: None,
            ir: Some(CornerDetection {
                corners,
                marker_corner: 0,
            }),
            corner_depths: depths,
            orientation_resolved: true,
        }
    }

    fn workspace_flanges(n: usize) -> Vec<RigidTransform> {
        // Board roughly facing the camera, spread over the workspace.
        (0..n)
            .map(|k| {
                let a = k as f64 * 0.7;
                let base = RigidTransform::from_rpy(
                    0.3 * a.sin(),
                    1.2 + 0.2 * a.cos(),
                    0.2 * (2.0 * a).sin(),
                );
                base.with_translation(Vector3::new(
                    0.45 + 0.15 * a.cos(),
                    0.25 * a.sin(),
                    0.3 + 0.1 * (3.0 * a).sin(),
                ))
            })
            .collect()
    }

    fn stamped(p: &RigidTransform) -> StampedPose {
        StampedPose {
            robot_from_flange: *p,
            timestamp_ns: 0,
        }
    }

    fn build_set(n: usize, noise: Option<(u64, f64, f64)>) -> CorrespondenceSet {
        let spec = CheckerboardSpec::default();
        let rig = rig();
        let offset = MountOffset::default();
        let mut set = CorrespondenceSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(noise.map_or(0, |n| n.0));
        for (k, f) in workspace_flanges(n).iter().enumerate() {
            let obs = observe(
                &spec,
                &rig,
                &truth_camera(),
                f,
                &offset,
                noise.map(|(_, a, b)| (&mut rng, a, b)),
            );
            set.accumulate(&obs, &rig, &stamped(f), &offset, &spec, k as u64)
                .unwrap();
        }
        set
    }

    #[test]
    fn accumulate_examples() {
        let spec = CheckerboardSpec::default();
        let rig = rig();
        let f = workspace_flanges(1)[0];
        let offset = MountOffset::default();
        let obs = observe(&spec, &rig, &truth_camera(), &f, &offset, None);
        let mut set = CorrespondenceSet::new();
        assert_eq!(
            set.accumulate(&obs, &rig, &stamped(&f), &offset, &spec, 0)
                .unwrap(),
            24
        );
        let mut holes = obs.clone();
        for i in [1, 5, 9] {
            holes.corner_depths[i] = None;
        }
        let mut other = CorrespondenceSet::new();
        assert_eq!(
            other
                .accumulate(&holes, &rig, &stamped(&f), &offset, &spec, 0)
                .unwrap(),
            21
        );
        set.accumulate(&obs, &rig, &stamped(&f), &offset, &spec, 1)
            .unwrap();
        assert_eq!(set.len(), 48);
        assert_eq!(set.distinct_poses(), vec![0, 1]);
        let late = StampedPose {
            robot_from_flange: f,
            timestamp_ns: 31_000_000,
        };
        assert!(matches!(
            set.accumulate(&obs, &rig, &late, &offset, &spec, 2),
            Err(HandEyeError::TimestampSkew { .. })
        ));
        let mut unresolved = obs.clone();
        unresolved.orientation_resolved = false;
        assert_eq!(
            set.accumulate(&unresolved, &rig, &stamped(&f), &offset, &spec, 3),
            Err(HandEyeError::NotResolved)
        );
    }

    #[test]
    fn noiseless_recovery() {
        let set = build_set(10, None);
        let res = calibrate_eye_to_hand(&set, &RansacParams::default()).unwrap();
        let (da, dt) = res.robot_from_camera.distance_to(&truth_camera());
        assert!(da < 1e-9 && dt < 1e-9, "{da} {dt}");
        assert_eq!(res.inlier_count, 240);
        assert_eq!(res.matrix[3], [0.0, 0.0, 0.0, 1.0]);
        let holdout = build_set(3, None);
        assert!(
            prediction_error(&res.robot_from_camera, &holdout)
                .unwrap()
                .overall
                < 1e-9
        );
    }

    #[test]
    fn depth_noise_inflates_camera_axis() {
        // Camera looks along robot −x mostly, so depth noise lands on x and z.
        let mut axis = [0.0; 3];
        for seed in 0..10 {
            let set = build_set(30, Some((seed, 0.2, 0.005)));
            let res = calibrate_eye_to_hand(&set, &RansacParams::default()).unwrap();
            for a in 0..3 {
                axis[a] += res.per_axis_rms[a];
            }
        }
        let dir = truth_camera().rotation().column(2).into_owned();
        let dominant = (0..3)
            .max_by(|&a, &b| dir[a].abs().total_cmp(&dir[b].abs()))
            .unwrap();
        let weakest = (0..3)
            .min_by(|&a, &b| dir[a].abs().total_cmp(&dir[b].abs()))
            .unwrap();
        assert!(axis[dominant] > axis[weakest], "{axis:?}");
    }

    #[test]
    fn more_frames_less_error() {
        let mut e = [0.0; 2];
        for seed in 0..20 {
            for (slot, n) in [(0, 5), (1, 80)] {
                let set = build_set(n, Some((seed, 0.5, 0.004)));
                let res = calibrate_eye_to_hand(&set, &RansacParams::default()).unwrap();
                e[slot] += transfer_error(
                    &res.robot_from_camera,
                    &truth_camera(),
                    &[Vector3::new(0.45, 0.0, 0.3)],
                );
            }
        }
        assert!(e[0] > e[1], "{e:?}");
    }

    #[test]
    fn prediction_error_examples() {
        let holdout = build_set(4, None);
        let shifted =
            RigidTransform::from_translation(Vector3::new(0.01, 0.0, 0.0)).compose(&truth_camera());
        let p = prediction_error(&shifted, &holdout).unwrap();
        assert!((p.overall - 0.01).abs() < 1e-12);
        assert!(
            (p.per_axis[0] - 0.01).abs() < 1e-12 && p.per_axis[1] < 1e-12 && p.per_axis[2] < 1e-12
        );
        assert_eq!(
            prediction_error(&shifted, &CorrespondenceSet::new()),
            Err(HandEyeError::EmptyHoldout)
        );
    }

    #[test]
    fn pose_centroids_average_each_pose() {
        let set = build_set(3, None);
        let c = set.pose_centroids();
        assert_eq!(c.len(), 3);
        assert_eq!(c.distinct_poses(), set.distinct_poses());
        let first = set.filter_poses(|p| p == set.distinct_poses()[0]);
        let n = first.len() as f64;
        let mean = first
            .robot_points()
            .iter()
            .map(|(_, r)| r)
            .sum::<Vector3<f64>>()
            / n;
        assert!((c.robot_points().point(0) - mean).norm() < 1e-15);
        let p = prediction_error(&truth_camera(), &c).unwrap();
        assert!(p.overall < 1e-12);
    }

    #[test]
    fn holdout_split_every_fifth_pose() {
        let set = build_set(10, None);
        let (train, hold) = set.split_holdout(5);
        assert_eq!(hold.distinct_poses(), vec![4, 9]);
        assert_eq!(train.len() + hold.len(), set.len());
    }

    #[test]
    fn permutation_invariance() {
        let set = build_set(6, Some((3, 0.5, 0.004)));
        let mut rev = CorrespondenceSet::new();
        for i in (0..set.len()).rev() {
            let id = set.camera_points().ids()[i];
            rev.push(
                id,
                set.camera_points().point(i),
                set.robot_points().point(i),
                0,
            )
            .unwrap();
        }
        let a = calibrate_eye_to_hand(&set, &RansacParams::default()).unwrap();
        let b = calibrate_eye_to_hand(&rev, &RansacParams::default()).unwrap();
        let (da, dt) = a.robot_from_camera.distance_to(&b.robot_from_camera);
        assert!(da < 1e-12 && dt < 1e-12);
    }

    #[test]
    fn rigidity_of_estimate() {
        let set = build_set(5, Some((1, 0.5, 0.004)));
        let res = calibrate_eye_to_hand(&set, &RansacParams::default()).unwrap();
        let pts: Vec<_> = set
            .camera_points()
            .iter()
            .map(|(_, p)| p)
            .take(30)
            .collect();
        for a in &pts {
            for b in &pts {
                let d0 = (a - b).norm();
                let d1 = (res.robot_from_camera.apply(a) - res.robot_from_camera.apply(b)).norm();
                assert!((d0 - d1).abs() < 1e-12);
            }
        }
    }

    fn tilt_samples(offset: &MountOffset, n: usize, spread_deg: f64) -> Vec<TiltSample> {
        let spec = CheckerboardSpec::default();
        let rig = rig();
        let center = workspace_flanges(1)[0];
        (0..n)
            .map(|k| {
                let a = k as f64 / n as f64 * std::f64::consts::TAU;
                let d = spread_deg.to_radians();
                let tilt =
                    RigidTransform::from_rpy(d * a.cos(), d * a.sin(), 0.3 * d * (k % 3) as f64);
                let f = center.compose(&tilt);
                TiltSample {
                    robot: stamped(&f),
                    observation: observe(&spec, &rig, &truth_camera(), &f, offset, None),
                }
            })
            .collect()
    }

    #[test]
    fn mount_offset_identity_fixed_point() {
        let offset = MountOffset::default();
        let est = estimate_mount_offset(
            &tilt_samples(&offset, 8, 20.0),
            &rig(),
            &CheckerboardSpec::default(),
            &offset,
            &truth_camera(),
        )
        .unwrap();
        let (da, dt) = est
            .offset
            .flange_from_board
            .distance_to(&RigidTransform::identity());
        assert!(da < 1e-9 && dt < 1e-9);
    }

    #[test]
    fn mount_offset_recovery() {
        let truth = MountOffset::new(
            RigidTransform::from_rpy(0.0, 0.0, 10f64.to_radians())
                .with_translation(Vector3::new(0.04, 0.0, 0.0)),
        );
        let samples = tilt_samples(&truth, 10, 20.0);
        let spec = CheckerboardSpec::default();
        let rig = rig();
        // Provisional camera pose from the identity-offset assumption.
        let mut set = CorrespondenceSet::new();
        for (k, s) in samples.iter().enumerate() {
            set.accumulate(
                &s.observation,
                &rig,
                &s.robot,
                &MountOffset::default(),
                &spec,
                k as u64,
            )
            .unwrap();
        }
        let provisional = estimate_rigid(set.camera_points(), set.robot_points())
            .unwrap()
            .transform;
        let est =
            estimate_mount_offset(&samples, &rig, &spec, &MountOffset::default(), &provisional)
                .unwrap();
        let (da, dt) = est
            .offset
            .flange_from_board
            .distance_to(&truth.flange_from_board);
        assert!(
            da < 1e-6 && dt < 1e-6,
            "{da} {dt} after {} rounds",
            est.rounds
        );
        let (da, dt) = est.robot_from_camera.distance_to(&truth_camera());
        assert!(da < 1e-6 && dt < 1e-6);
        assert!(
            est.cost_trace
                .windows(2)
                .all(|w| w[1] <= w[0] * (1.0 + 1e-12)),
            "{:?}",
            est.cost_trace
        );
    }

    #[test]
    fn mount_offset_needs_excitation() {
        let offset = MountOffset::default();
        let samples = tilt_samples(&offset, 6, 0.0);
        let r = estimate_mount_offset(
            &samples,
            &rig(),
            &CheckerboardSpec::default(),
            &offset,
            &truth_camera(),
        );
        assert!(matches!(
            r,
            Err(HandEyeError::InsufficientExcitation { .. })
        ));
    }

    #[test]
    fn pair_error_triangle_inequality() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = Normal::new(0.0, 0.01).unwrap();
        let t1 = truth_camera();
        let t2 =
            RigidTransform::from_rpy(-2.2, 0.0, 0.3).with_translation(Vector3::new(1.0, -0.9, 0.9));
        let pts: Vec<_> = (0..50)
            .map(|k| Vector3::new(0.3 + 0.01 * k as f64, -0.2 + 0.008 * k as f64, 0.3))
            .collect();
        for _ in 0..100 {
            let mut jitter = || {
                RigidTransform::from_scaled_axis(
                    Vector3::new(n.sample(&mut rng), n.sample(&mut rng), n.sample(&mut rng)),
                    Vector3::new(n.sample(&mut rng), n.sample(&mut rng), n.sample(&mut rng)),
                )
            };
            let e1 = jitter().compose(&t1);
            let e2 = jitter().compose(&t2);
            let pair = pair_transfer_error(&e1, &e2, &t1, &t2, &pts);
            assert!(pair <= transfer_error(&e1, &t1, &pts) + transfer_error(&e2, &t2, &pts) + 1e-9);
        }
    }
}
