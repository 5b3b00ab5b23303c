//! Frame-count experiments: internal calibration accuracy against view
//! coverage and tilting, and Eye-to-Hand accuracy against the number of
//! frames used.

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{register_depth_to_color, undistort};
use crate::handeye::{calibrate_eye_to_hand, prediction_error, MountOffset, StampedPose};
use crate::orchestrator::{
    calibrate_internal, correspondences, run_session, CameraOutcome, FramePurpose, SavedFrame,
    SessionOptions, SessionResult,
};
use crate::planner::{
    board_pose, filter_reachable, generate_plan, sweep_tilt_limits, to_flange_targets,
    BoardOrientation, PlanOptions, Tilt, TiltLimits, FAR_PASS_FACTOR,
};
use crate::sim::{SimCamera, SimScene};
use crate::target::{resolve_orientation, BoardObservation};
use crate::{CameraId, Intrinsics, Pixel, RigidTransform, SensorRig};

/// Noise substream offset for experiment renders, clear of session frames.
const RENDER_FRAME_BASE: u64 = 1 << 40;
/// Every n-th pose of an Eye-to-Hand pool is held out for evaluation.
pub const HOLDOUT_EVERY: usize = 5;
const EYEHAND_POOL_OVERLAP: f64 = 0.75;
const DENSE_OVERLAP: f64 = 0.5;
const POOL_STAGES: usize = 12;
const MAX_DEPTH_PASSES: usize = 4;
/// Evaluation grid, columns × rows.
const GRID: (usize, usize) = (16, 12);
/// True depths at which color↔depth registration is evaluated, meters.
const REGISTRATION_DEPTHS: [f64; 2] = [1.0, 2.0];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExperimentError {
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("camera {0}: {1}")]
    Camera(CameraId, String),
    #[error(transparent)]
    Session(#[from] crate::orchestrator::OrchestratorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coverage {
    /// Positions spread over the whole image.
    #[default]
    Full,
    /// Positions within about one board footprint of the image center.
    Center,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InternalRow {
    pub combined_frames: usize,
    pub overlap: bool,
    pub tilting: bool,
    #[serde(default)]
    pub coverage: Coverage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InternalSchedule {
    pub row: Vec<InternalRow>,
}

impl InternalSchedule {
    /// Nine rows: dense tilted, sparse tilted, then untilted center-only.
    pub fn table() -> Self {
        let full = |n, overlap| InternalRow {
            combined_frames: n,
            overlap,
            tilting: true,
            coverage: Coverage::Full,
        };
        let center = |n| InternalRow {
            combined_frames: n,
            overlap: false,
            tilting: false,
            coverage: Coverage::Center,
        };
        Self {
            row: vec![
                full(158, true),
                full(81, true),
                full(55, false),
                full(45, false),
                full(33, false),
                full(26, false),
                center(14),
                center(7),
                center(5),
            ],
        }
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.row.is_empty() {
            return Err(ExperimentError::Schedule("no rows".into()));
        }
        if let Some(i) = self.row.iter().position(|r| r.combined_frames < 3) {
            return Err(ExperimentError::Schedule(format!(
                "row[{i}].combined_frames must be at least 3"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EyeHandRow {
    /// Training frames per camera in configuration order; a single entry
    /// applies to every camera.
    pub frames: Vec<usize>,
    pub overlap: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EyeHandSchedule {
    pub row: Vec<EyeHandRow>,
}

impl EyeHandSchedule {
    pub fn table() -> Self {
        let row = |frames: [usize; 3], overlap| EyeHandRow {
            frames: frames.to_vec(),
            overlap,
        };
        Self {
            row: vec![
                row([82, 80, 71], true),
                row([44, 45, 39], true),
                row([14, 14, 11], false),
                row([9, 10, 8], false),
                row([5, 6, 5], false),
            ],
        }
    }

    pub fn validate(&self, cameras: usize) -> Result<(), ExperimentError> {
        if self.row.is_empty() {
            return Err(ExperimentError::Schedule("no rows".into()));
        }
        for (i, r) in self.row.iter().enumerate() {
            if r.frames.len() != 1 && r.frames.len() != cameras {
                return Err(ExperimentError::Schedule(format!(
                    "row[{i}].frames has {} entries for {cameras} cameras",
                    r.frames.len()
                )));
            }
            if r.frames.contains(&0) {
                return Err(ExperimentError::Schedule(format!(
                    "row[{i}].frames must be positive"
                )));
            }
        }
        Ok(())
    }

    fn frames_for(&self, row: usize, camera: usize) -> usize {
        let f = &self.row[row].frames;
        if f.len() == 1 {
            f[0]
        } else {
            f[camera]
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InternalReportRow {
    pub exp: usize,
    pub color_frames: usize,
    pub ir_frames: usize,
    pub combined_frames: usize,
    pub overlap: bool,
    pub tilting: bool,
    pub color_err_px: f64,
    pub ir_err_px: f64,
    pub reproj_err_px: f64,
    pub time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EyeHandReportRow {
    pub exp: usize,
    pub cam: CameraId,
    pub frames: usize,
    pub overlap: bool,
    pub err_cm: f64,
    pub err_x_cm: f64,
    pub err_y_cm: f64,
    pub err_z_cm: f64,
    pub time_s: f64,
}

/// Mean pixel displacement between the true and estimated projections of the
/// rays through a grid spanning the whole image.
pub fn intrinsic_pixel_error(estimate: &Intrinsics, truth: &Intrinsics) -> f64 {
    let mut sum = 0.0;
    let mut n = 0;
    for px in image_grid(truth) {
        let Ok(ray) = undistort(truth, &px) else {
            continue;
        };
        if let Ok(p) = estimate.project_point(&Vector3::new(ray.x, ray.y, 1.0)) {
            sum += p.distance(&px);
            n += 1;
        }
    }
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

/// Mean color-image displacement of registered depth pixels, estimate vs
/// truth, over an IR grid at a few depths.
pub fn registration_error(estimate: &SensorRig, truth: &SensorRig) -> f64 {
    let mut sum = 0.0;
    let mut n = 0;
    for px in image_grid(&truth.ir) {
        for z in REGISTRATION_DEPTHS {
            let raw = truth.depth_model.distort(z);
            let (Ok(a), Ok(b)) = (
                register_depth_to_color(truth, &px, raw),
                register_depth_to_color(estimate, &px, raw),
            ) else {
                continue;
            };
            sum += a.distance(&b);
            n += 1;
        }
    }
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

fn image_grid(k: &Intrinsics) -> Vec<Pixel> {
    let (nu, nv) = GRID;
    let mut out = Vec::with_capacity(nu * nv);
    for j in 0..nv {
        for i in 0..nu {
            out.push(Pixel::new(
                (i as f64 + 0.5) * k.width as f64 / nu as f64,
                (j as f64 + 0.5) * k.height as f64 / nv as f64,
            ));
        }
    }
    out
}

/// A board pose in the camera frame and what the sensor made of it.
#[derive(Debug, Clone)]
struct Rendered {
    pose: RigidTransform,
    observation: Option<BoardObservation>,
}

impl Rendered {
    fn combined(&self) -> bool {
        self.observation.as_ref().is_some_and(|o| o.is_combined())
    }

    fn detected(&self) -> bool {
        self.observation.is_some()
    }
}

fn render(scene: &SimScene, cam: &SimCamera, pose: &RigidTransform, frame: u64) -> Rendered {
    let observation = scene
        .render_board(cam, pose, RENDER_FRAME_BASE + frame, 0)
        .into_observation()
        .and_then(|o| resolve_orientation(&scene.board, &o).ok());
    Rendered {
        pose: *pose,
        observation,
    }
}

/// Tilt limits found by sweeping at the image center without a robot.
fn direct_tilt_limits(scene: &SimScene, cam: &SimCamera, depth: f64) -> TiltLimits {
    let center = cam.nominal.color.center();
    let mut frame = 0u64;
    let mut probe = |t: Tilt| {
        frame += 1;
        board_pose(
            &cam.nominal.color,
            &scene.board,
            &center,
            depth,
            &t,
            BoardOrientation::Facing,
        )
        .ok()
        .is_some_and(|p| render(scene, cam, &p, frame).combined())
    };
    sweep_tilt_limits(&mut probe).unwrap_or_else(|_| TiltLimits::zero())
}

fn full_pool(
    scene: &SimScene,
    cam: &SimCamera,
    limits: &TiltLimits,
    base_depth: f64,
    row: &InternalRow,
    frame0: u64,
) -> Vec<Rendered> {
    let opts = PlanOptions {
        stages: POOL_STAGES,
        overlap: if row.overlap { DENSE_OVERLAP } else { 0.0 },
        tilting: row.tilting,
        orientation: BoardOrientation::Facing,
        ..PlanOptions::default()
    };
    let mut pool = Vec::new();
    let mut depth = base_depth;
    for _ in 0..MAX_DEPTH_PASSES {
        let Ok(plan) = generate_plan(&cam.nominal.color, &scene.board, limits, depth, &opts) else {
            break;
        };
        for t in &plan.targets {
            let frame = frame0 + pool.len() as u64;
            pool.push(render(scene, cam, &t.camera_from_board, frame));
        }
        if pool.iter().filter(|r| r.combined()).count() >= row.combined_frames {
            break;
        }
        depth *= FAR_PASS_FACTOR * FAR_PASS_FACTOR;
    }
    pool
}

/// Untilted positions on a grid of quarter footprints around the center, at
/// the base depth and one pass further out.
fn center_pool(scene: &SimScene, cam: &SimCamera, base_depth: f64, frame0: u64) -> Vec<Rendered> {
    let k = &cam.nominal.color;
    let (ew, eh) = scene.board.extent();
    let c = k.center();
    let mut pool = Vec::new();
    for depth in [base_depth, base_depth * FAR_PASS_FACTOR] {
        let (su, sv) = (0.25 * k.fx * ew / depth, 0.25 * k.fy * eh / depth);
        for j in -2i32..=2 {
            for i in -2i32..=2 {
                let px = Pixel::new(c.u + i as f64 * su, c.v + j as f64 * sv);
                let Ok(pose) = board_pose(
                    k,
                    &scene.board,
                    &px,
                    depth,
                    &Tilt::zero(),
                    BoardOrientation::Parallel,
                ) else {
                    continue;
                };
                let frame = frame0 + pool.len() as u64;
                pool.push(render(scene, cam, &pose, frame));
            }
        }
    }
    pool
}

/// `m` indices spread evenly over `0..n`.
pub fn stride_select(n: usize, m: usize) -> Vec<usize> {
    if m >= n {
        return (0..n).collect();
    }
    (0..m).map(|i| i * n / m).collect()
}

/// Picks combined detections by stride to reach `target`, plus the same
/// fraction of single-camera detections.
fn select_internal(pool: &[Rendered], target: usize) -> Vec<usize> {
    let combined: Vec<usize> = (0..pool.len()).filter(|&i| pool[i].combined()).collect();
    let single: Vec<usize> = (0..pool.len())
        .filter(|&i| pool[i].detected() && !pool[i].combined())
        .collect();
    let frac = target.min(combined.len()) as f64 / combined.len().max(1) as f64;
    let m_single = (frac * single.len() as f64).round() as usize;
    let mut out: Vec<usize> = stride_select(combined.len(), target)
        .into_iter()
        .map(|k| combined[k])
        .chain(
            stride_select(single.len(), m_single)
                .into_iter()
                .map(|k| single[k]),
        )
        .collect();
    out.sort_unstable();
    out
}

/// Board-center travel between consecutive poses plus a settle per pose.
fn motion_time_s(points: &[Vector3<f64>], options: &SessionOptions) -> f64 {
    let path: f64 = points.windows(2).map(|w| (w[1] - w[0]).norm()).sum();
    path / options.speed_m_s + options.settle_s * points.len() as f64
}

fn as_frames(
    camera: &CameraId,
    obs: impl Iterator<Item = (u64, BoardObservation, StampedPose)>,
) -> Vec<SavedFrame> {
    obs.map(|(pose_id, observation, robot)| SavedFrame {
        camera_id: camera.clone(),
        purpose: FramePurpose::Loop,
        pose_id,
        robot,
        observation,
    })
    .collect()
}

fn internal_row(
    scene: &SimScene,
    cam: &SimCamera,
    limits: &TiltLimits,
    options: &SessionOptions,
    exp: usize,
    row: &InternalRow,
) -> InternalReportRow {
    let frame0 = (exp as u64) << 20;
    let pool = match row.coverage {
        Coverage::Full => full_pool(scene, cam, limits, options.base_depth_m, row, frame0),
        Coverage::Center => center_pool(scene, cam, options.base_depth_m, frame0),
    };
    let chosen = select_internal(&pool, row.combined_frames);
    let still = StampedPose {
        robot_from_flange: RigidTransform::identity(),
        timestamp_ns: 0,
    };
    let frames = as_frames(
        &cam.id,
        chosen
            .iter()
            .filter_map(|&i| pool[i].observation.clone().map(|o| (i as u64, o, still))),
    );
    let count =
        |f: fn(&BoardObservation) -> bool| frames.iter().filter(|s| f(&s.observation)).count();
    let centers: Vec<Vector3<f64>> = chosen
        .iter()
        .map(|&i| pool[i].pose.apply(&scene.board.center()))
        .collect();
    let refs: Vec<&SavedFrame> = frames.iter().collect();
    let (color_err_px, ir_err_px, reproj_err_px) =
        match calibrate_internal(&refs, &scene.board, &cam.nominal, &options.refine) {
            Ok(cal) => (
                intrinsic_pixel_error(&cal.rig.color, &cam.truth.color),
                intrinsic_pixel_error(&cal.rig.ir, &cam.truth.ir),
                registration_error(&cal.rig, &cam.truth),
            ),
            Err(e) => {
                log::warn!("experiment {exp}: internal calibration failed: {e}");
                (f64::NAN, f64::NAN, f64::NAN)
            }
        };
    InternalReportRow {
        exp,
        color_frames: count(|o| o.color.is_some()),
        ir_frames: count(|o| o.ir.is_some()),
        combined_frames: count(|o| o.is_combined()),
        overlap: row.overlap,
        tilting: row.tilting,
        color_err_px,
        ir_err_px,
        reproj_err_px,
        time_s: motion_time_s(&centers, options),
    }
}

/// Internal calibration of one camera per schedule row, from board poses
/// rendered directly in the camera frame. Rows run in parallel; results are
/// in schedule order.
pub fn run_internal(
    scene: &SimScene,
    camera: &CameraId,
    options: &SessionOptions,
    schedule: &InternalSchedule,
) -> Result<Vec<InternalReportRow>, ExperimentError> {
    schedule.validate()?;
    let cam = scene
        .camera(camera)
        .map_err(|e| ExperimentError::Camera(camera.clone(), e.to_string()))?;
    let limits = direct_tilt_limits(scene, cam, options.base_depth_m);
    Ok(schedule
        .row
        .par_iter()
        .enumerate()
        .map(|(i, row)| internal_row(scene, cam, &limits, options, i + 1, row))
        .collect())
}

/// Frames of one camera's Eye-to-Hand pool with the flange path.
struct EyeHandPool {
    frames: Vec<SavedFrame>,
    flange_points: Vec<Vector3<f64>>,
}

fn eyehand_pool(
    scene: &SimScene,
    cam: &SimCamera,
    rig: &SensorRig,
    robot_from_camera: &RigidTransform,
    offset: &MountOffset,
    options: &SessionOptions,
) -> Result<EyeHandPool, String> {
    let opts = PlanOptions {
        stages: POOL_STAGES,
        overlap: EYEHAND_POOL_OVERLAP,
        tilting: false,
        orientation: BoardOrientation::Parallel,
        ..options.plan
    };
    let plan = generate_plan(
        &rig.color,
        &scene.board,
        &TiltLimits::zero(),
        options.base_depth_m,
        &opts,
    )
    .map_err(|e| e.to_string())?;
    let flanges = to_flange_targets(&plan.targets, robot_from_camera, offset);
    let (reachable, _) = filter_reachable(&flanges, &scene.robot);
    let mut frames = Vec::new();
    let mut flange_points = Vec::new();
    let move0 = RENDER_FRAME_BASE + (crate::sim::camera_tag(&cam.id) & 0xffff) * (1 << 20);
    for (k, &i) in reachable.iter().enumerate() {
        let idx = move0 + k as u64;
        let Ok(achieved) = scene.robot_move(&flanges[i], idx) else {
            continue;
        };
        let Ok(det) = scene.render_observation(&cam.id, &achieved, idx, 0) else {
            continue;
        };
        let Some(obs) = det.into_observation() else {
            continue;
        };
        let Ok(obs) = resolve_orientation(&scene.board, &obs) else {
            continue;
        };
        if obs.ir.is_none() {
            continue;
        }
        flange_points.push(*achieved.translation());
        frames.push(SavedFrame {
            camera_id: cam.id.clone(),
            purpose: FramePurpose::Repeat,
            pose_id: k as u64,
            robot: StampedPose {
                robot_from_flange: achieved,
                timestamp_ns: 0,
            },
            observation: obs,
        });
    }
    Ok(EyeHandPool {
        frames,
        flange_points,
    })
}

/// Outcome of the Eye-to-Hand experiment: report rows plus the session that
/// produced the internal calibrations.
#[derive(Debug, Clone)]
pub struct EyeHandReport {
    pub rows: Vec<EyeHandReportRow>,
    pub session: SessionResult,
}

/// Runs a full session, then for every calibrated camera renders a dense
/// untilted pool, holds out every fifth pose (scored at its board center),
/// and calibrates from strided subsets of the rest. Rows are ordered by experiment, then camera.
pub fn run_eyehand(
    scene: &SimScene,
    options: &SessionOptions,
    schedule: &EyeHandSchedule,
    config_sha256: &str,
) -> Result<EyeHandReport, ExperimentError> {
    schedule.validate(scene.cameras.len())?;
    let session = run_session(scene, options, config_sha256)?;
    let per_camera: Vec<Option<Vec<EyeHandReportRow>>> = scene
        .cameras
        .par_iter()
        .enumerate()
        .map(|(ci, cam)| {
            let result = session.outcomes.iter().find_map(|o| match o {
                CameraOutcome::Done(r) if r.camera_id == cam.id => Some(r),
                _ => None,
            })?;
            let rig = result.internal.rig;
            let offset = result.mount_offset.offset;
            let pool = match eyehand_pool(
                scene,
                cam,
                &rig,
                &result.eye_to_hand.robot_from_camera,
                &offset,
                options,
            ) {
                Ok(p) => p,
                Err(e) => {
                    log::warn!("{}: no Eye-to-Hand pool: {e}", cam.id);
                    return None;
                }
            };
            let refs: Vec<&SavedFrame> = pool.frames.iter().collect();
            let held: Vec<&SavedFrame> = refs
                .iter()
                .enumerate()
                .filter(|(k, _)| (k + 1) % HOLDOUT_EVERY == 0)
                .map(|(_, f)| *f)
                .collect();
            let train: Vec<usize> = (0..refs.len())
                .filter(|k| (k + 1) % HOLDOUT_EVERY != 0)
                .collect();
            // Robot position per held-out pose: the board center, predicted
            // from the mean of the camera corners.
            let holdout = match correspondences(&held, &rig, &offset, &scene.board) {
                Ok(h) => h.pose_centroids(),
                Err(e) => {
                    log::warn!("{}: holdout correspondences: {e}", cam.id);
                    return None;
                }
            };
            let rows = (0..schedule.row.len())
                .map(|ri| {
                    let want = schedule.frames_for(ri, ci);
                    let pick: Vec<usize> = stride_select(train.len(), want)
                        .into_iter()
                        .map(|k| train[k])
                        .collect();
                    let subset: Vec<&SavedFrame> = pick.iter().map(|&k| refs[k]).collect();
                    let path: Vec<Vector3<f64>> =
                        pick.iter().map(|&k| pool.flange_points[k]).collect();
                    let err = correspondences(&subset, &rig, &offset, &scene.board)
                        .ok()
                        .and_then(|set| calibrate_eye_to_hand(&set, &options.ransac).ok())
                        .and_then(|r| prediction_error(&r.robot_from_camera, &holdout).ok());
                    let (e, [x, y, z]) = match err {
                        Some(p) => (p.overall, p.per_axis),
                        None => (f64::NAN, [f64::NAN; 3]),
                    };
                    EyeHandReportRow {
                        exp: ri + 1,
                        cam: cam.id.clone(),
                        frames: subset.len(),
                        overlap: schedule.row[ri].overlap,
                        err_cm: e * 100.0,
                        err_x_cm: x * 100.0,
                        err_y_cm: y * 100.0,
                        err_z_cm: z * 100.0,
                        time_s: motion_time_s(&path, options),
                    }
                })
                .collect();
            Some(rows)
        })
        .collect();
    let mut rows = Vec::new();
    for ri in 0..schedule.row.len() {
        for cam_rows in per_camera.iter().flatten() {
            rows.push(cam_rows[ri].clone());
        }
    }
    Ok(EyeHandReport { rows, session })
}

fn float(x: f64) -> String {
    format!("{x:.8e}")
}

fn flag(b: bool) -> &'static str {
    if b {
        "yes"
    } else {
        "no"
    }
}

const TIME_NOTE: &str =
    "# time_s is simulated: Cartesian motion at the session speed plus a settle per pose";

pub fn internal_csv(rows: &[InternalReportRow]) -> String {
    let mut out = format!(
        "{TIME_NOTE}\nexp,color_frames,ir_frames,combined_frames,overlap,tilting,color_err_px,ir_err_px,reproj_err_px,time_s\n"
    );
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.exp,
            r.color_frames,
            r.ir_frames,
            r.combined_frames,
            flag(r.overlap),
            flag(r.tilting),
            float(r.color_err_px),
            float(r.ir_err_px),
            float(r.reproj_err_px),
            float(r.time_s)
        ));
    }
    out
}

pub fn eyehand_csv(rows: &[EyeHandReportRow]) -> String {
    let mut out =
        format!("{TIME_NOTE}\nexp,cam,frames,overlap,err_cm,err_x_cm,err_y_cm,err_z_cm,time_s\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.exp,
            r.cam,
            r.frames,
            flag(r.overlap),
            float(r.err_cm),
            float(r.err_x_cm),
            float(r.err_y_cm),
            float(r.err_z_cm),
            float(r.time_s)
        ));
    }
    out
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}
