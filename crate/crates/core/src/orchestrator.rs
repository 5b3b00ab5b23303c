//! Per-camera calibration sessions: message bus, passive observation,
//! camera handoff, the phase sequence, and the replayable session log.

use std::collections::{BTreeMap, HashMap};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geometry::{estimate_rigid_ransac, RansacParams};
use crate::handeye::{
    calibrate_eye_to_hand, estimate_mount_offset, CorrespondenceSet, EyeToHandResult, MountOffset,
    MountOffsetEstimate, StampedPose, TiltSample, SYNC_WINDOW_NS,
};
use crate::planner::{
    board_pose, flange_for, generate_plan, ir_only_targets, sweep_tilt_limits, BoardOrientation,
    MotionTarget, PlanOptions, Probe, Tilt, TiltLimits,
};
use crate::sim::{centered_offset, Detection, SimScene, WORKSPACE_CENTER};
use crate::target::{resolve_orientation, BoardObservation, CheckerboardSpec};
use crate::zhang::{
    calibrate_camera, calibrate_stereo, fit_depth_model, DepthFit, IntrinsicCalibrationResult,
    PlanarView, RefineOptions, StereoCalibration,
};
use crate::{CameraId, Pixel, RigidTransform, SensorRig};

pub const STALE_WINDOW_NS: u64 = 100_000_000;
pub const LOG_FORMAT_VERSION: u32 = 1;
/// Delay between a robot pose and the camera frames taken there.
const CAMERA_LATENCY_NS: u64 = 20_000_000;
const BOOTSTRAP_DETECTIONS: usize = 3;
const MIN_REPEAT_FRAMES: usize = 3;
/// Board elevation above the horizontal during the initial scan.
const SCAN_TILT_DEG: f64 = 45.0;

pub const ROBOT_POSE_TOPIC: &str = "/robot/pose";
pub const ROBOT_COMMAND_TOPIC: &str = "/robot/command";

pub fn camera_topic(id: &CameraId) -> String {
    format!("/camera/{id}/board")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Waiting,
    InitialEth,
    TiltSweep,
    OffsetEst,
    Moving,
    InternalCalib,
    RepeatEth,
    Done,
}

impl Phase {
    pub fn is_active(self) -> bool {
        !matches!(self, Phase::Waiting | Phase::Done)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OrchestratorError {
    #[error("calibration of {camera} aborted in {phase:?}: {cause}")]
    CalibrationAborted {
        camera: CameraId,
        phase: Phase,
        cause: String,
    },
    #[error("no cameras configured")]
    NoCameras,
    #[error("message on {topic} at {timestamp_ns} ns is older than the last one on that topic")]
    NonMonotonic { topic: String, timestamp_ns: u64 },
    #[error("session log does not match: {0}")]
    LogVersionMismatch(String),
    #[error("malformed session log: {0}")]
    MalformedLog(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Payload {
    Observation(BoardObservation),
    RobotPose(StampedPose),
    Command(RigidTransform),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BusMessage {
    pub topic: String,
    pub timestamp_ns: u64,
    pub payload: Payload,
}

/// Accepts messages at most `window_ns` old; the boundary is accepted.
pub fn stale_filter(msg: &BusMessage, now_ns: u64, window_ns: u64) -> bool {
    now_ns.saturating_sub(msg.timestamp_ns) <= window_ns
}

/// Single serialized queue ordered by timestamp, then topic, then arrival.
#[derive(Debug, Default)]
pub struct Bus {
    queue: BTreeMap<(u64, String, u64), BusMessage>,
    last: HashMap<String, u64>,
    seq: u64,
}

impl Bus {
    pub fn publish(&mut self, msg: BusMessage) -> Result<(), OrchestratorError> {
        if let Some(&t) = self.last.get(&msg.topic) {
            if msg.timestamp_ns < t {
                return Err(OrchestratorError::NonMonotonic {
                    topic: msg.topic,
                    timestamp_ns: msg.timestamp_ns,
                });
            }
        }
        self.last.insert(msg.topic.clone(), msg.timestamp_ns);
        self.seq += 1;
        self.queue
            .insert((msg.timestamp_ns, msg.topic.clone(), self.seq), msg);
        Ok(())
    }

    pub fn pop(&mut self) -> Option<BusMessage> {
        self.queue.pop_first().map(|(_, m)| m)
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PassiveBest {
    /// Pixel distance of the board center to the color image center.
    pub distance: f64,
    pub robot: StampedPose,
}

#[derive(Debug, Clone, Default)]
pub struct SessionState {
    /// Phase per camera, in configuration order.
    pub phases: Vec<(CameraId, Phase)>,
    pub active: Option<CameraId>,
    pub passive_best: BTreeMap<CameraId, PassiveBest>,
    pub latest_robot: Option<StampedPose>,
    pub trace: Vec<(CameraId, Phase)>,
}

impl SessionState {
    pub fn new(ids: &[CameraId]) -> Self {
        Self {
            phases: ids.iter().map(|i| (i.clone(), Phase::Waiting)).collect(),
            ..Default::default()
        }
    }

    pub fn phase(&self, id: &CameraId) -> Option<Phase> {
        self.phases.iter().find(|(i, _)| i == id).map(|(_, p)| *p)
    }

    pub fn set_phase(&mut self, id: &CameraId, phase: Phase) {
        if let Some(entry) = self.phases.iter_mut().find(|(i, _)| i == id) {
            entry.1 = phase;
        }
        self.active = if phase.is_active() {
            Some(id.clone())
        } else {
            None
        };
        self.trace.push((id.clone(), phase));
    }

    pub fn waiting(&self) -> Vec<CameraId> {
        self.phases
            .iter()
            .filter(|(_, p)| *p == Phase::Waiting)
            .map(|(i, _)| i.clone())
            .collect()
    }
}

/// Records a detection by an idle camera when it is the closest to the image
/// center so far. Detections without a robot pose inside the sync window
/// are ignored.
pub fn passive_observe(state: &mut SessionState, obs: &BoardObservation, image_center: &Pixel) {
    let Some(robot) = state.latest_robot else {
        return;
    };
    if obs.timestamp_ns.abs_diff(robot.timestamp_ns) > SYNC_WINDOW_NS {
        return;
    }
    let Some(distance) = obs.color_center_distance(image_center) else {
        return;
    };
    let better = state
        .passive_best
        .get(&obs.camera_id)
        .is_none_or(|b| distance < b.distance);
    if better {
        state
            .passive_best
            .insert(obs.camera_id.clone(), PassiveBest { distance, robot });
    }
}

/// Next waiting camera with a stored sighting, smallest center distance
/// first; ties go to configuration order.
pub fn handoff(state: &SessionState) -> Option<(CameraId, StampedPose)> {
    let mut best: Option<(CameraId, PassiveBest)> = None;
    for id in state.waiting() {
        if let Some(b) = state.passive_best.get(&id) {
            if best
                .as_ref()
                .is_none_or(|(_, cur)| b.distance < cur.distance)
            {
                best = Some((id, *b));
            }
        }
    }
    best.map(|(id, b)| (id, b.robot))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FramePurpose {
    Bootstrap,
    Tilt,
    Loop,
    Repeat,
}

/// A detection of the active camera kept for calibration, in canonical
/// corner order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SavedFrame {
    pub camera_id: CameraId,
    pub purpose: FramePurpose,
    pub pose_id: u64,
    pub robot: StampedPose,
    pub observation: BoardObservation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SessionOptions {
    pub plan: PlanOptions,
    /// Optical depth of the first pass, meters.
    pub base_depth_m: f64,
    pub scan_step_deg: f64,
    /// Board center of the initial scan pose, robot base frame.
    pub scan_center_m: [f64; 3],
    pub stale_window_ns: u64,
    pub max_consecutive_failures: usize,
    /// Robust fit of the final pose.
    pub ransac: RansacParams,
    /// Robust fit used only to steer the robot during the move loop.
    pub guidance_ransac: RansacParams,
    pub refine: RefineOptions,
    pub speed_m_s: f64,
    pub settle_s: f64,
}

impl Default for SessionOptions {
    fn default() -> Self {
        Self {
            plan: PlanOptions::default(),
            base_depth_m: 0.75,
            scan_step_deg: 15.0,
            scan_center_m: WORKSPACE_CENTER,
            stale_window_ns: STALE_WINDOW_NS,
            max_consecutive_failures: 3,
            ransac: RansacParams {
                inlier_threshold: 0.02,
                ..Default::default()
            },
            guidance_ransac: RansacParams {
                max_iterations: 100,
                inlier_threshold: 0.03,
                ..Default::default()
            },
            refine: RefineOptions {
                estimate_k3: false,
                ..Default::default()
            },
            speed_m_s: 0.1,
            settle_s: 2.0,
        }
    }
}

impl SessionOptions {
    /// Simulated duration of a Cartesian move of `distance` meters.
    pub fn move_duration_ns(&self, distance: f64) -> u64 {
        ((distance / self.speed_m_s + self.settle_s) * 1e9).round() as u64
    }
}

/// Internal calibration of one sensor from its saved frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InternalCalibration {
    pub color: IntrinsicCalibrationResult,
    pub ir: IntrinsicCalibrationResult,
    pub stereo: StereoCalibration,
    pub depth: DepthFit,
    pub rig: SensorRig,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FrameCounts {
    pub color: usize,
    pub ir: usize,
    pub combined: usize,
    pub tilt: usize,
    pub moving: usize,
    pub repeat: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraResult {
    pub camera_id: CameraId,
    pub internal: InternalCalibration,
    pub mount_offset: MountOffsetEstimate,
    pub eye_to_hand: EyeToHandResult,
    pub frames: FrameCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CameraOutcome {
    Done(Box<CameraResult>),
    Aborted {
        camera_id: CameraId,
        phase: Phase,
        cause: String,
    },
}

impl CameraOutcome {
    pub fn camera_id(&self) -> &CameraId {
        match self {
            Self::Done(r) => &r.camera_id,
            Self::Aborted { camera_id, .. } => camera_id,
        }
    }

    pub fn result(&self) -> Option<&CameraResult> {
        match self {
            Self::Done(r) => Some(r),
            Self::Aborted { .. } => None,
        }
    }
}

/// Inputs, beyond the frames, that determine every result of a camera.
#[derive(Debug, Clone, Copy)]
pub struct FinalizeContext<'a> {
    pub spec: &'a CheckerboardSpec,
    pub nominal: &'a SensorRig,
    pub options: &'a SessionOptions,
}

fn abort(phase: Phase, cause: impl std::fmt::Display) -> (Phase, String) {
    (phase, cause.to_string())
}

/// Intrinsics, color-to-IR transform and depth correction from the color and
/// IR detections of `frames`.
pub fn calibrate_internal(
    frames: &[&SavedFrame],
    spec: &CheckerboardSpec,
    nominal: &SensorRig,
    refine: &RefineOptions,
) -> Result<InternalCalibration, String> {
    let mut color_views = Vec::new();
    let mut ir_views = Vec::new();
    let mut depths = Vec::new();
    for f in frames {
        let obs = &f.observation;
        if let Some(c) = &obs.color {
            color_views.push(
                PlanarView::from_corners(spec, f.pose_id, c.corners.clone())
                    .map_err(|e| e.to_string())?,
            );
        }
        if let Some(i) = &obs.ir {
            ir_views.push(
                PlanarView::from_corners(spec, f.pose_id, i.corners.clone())
                    .map_err(|e| e.to_string())?,
            );
            depths.push(obs.corner_depths.clone());
        }
    }
    let color = calibrate_camera(&nominal.color, &color_views, refine)
        .map_err(|e| format!("color: {e}"))?;
    let ir = calibrate_camera(&nominal.ir, &ir_views, refine).map_err(|e| format!("ir: {e}"))?;
    let stereo = calibrate_stereo(&color_views, &ir_views, &color.intrinsics, &ir.intrinsics)
        .map_err(|e| format!("stereo: {e}"))?;
    let depth = fit_depth_model(&ir.per_view_poses, &ir_views, &depths)
        .map_err(|e| format!("depth: {e}"))?;
    let rig = SensorRig {
        color: color.intrinsics,
        ir: ir.intrinsics,
        color_from_ir: stereo.color_from_ir,
        depth_model: depth.model,
    };
    Ok(InternalCalibration {
        color,
        ir,
        stereo,
        depth,
        rig,
    })
}

/// Eye-to-Hand correspondences of the frames with an IR detection.
pub fn correspondences(
    frames: &[&SavedFrame],
    rig: &SensorRig,
    offset: &MountOffset,
    spec: &CheckerboardSpec,
) -> Result<CorrespondenceSet, String> {
    let mut set = CorrespondenceSet::new();
    for f in frames.iter().filter(|f| f.observation.ir.is_some()) {
        set.accumulate(&f.observation, rig, &f.robot, offset, spec, f.pose_id)
            .map_err(|e| e.to_string())?;
    }
    Ok(set)
}

fn tilt_samples(frames: &[&SavedFrame]) -> Vec<TiltSample> {
    frames
        .iter()
        .filter(|f| f.observation.ir.is_some())
        .map(|f| TiltSample {
            robot: f.robot,
            observation: f.observation.clone(),
        })
        .collect()
}

/// Calibrated rig and mount offset from the bootstrap, tilt and loop frames.
pub fn finalize_internal(
    frames: &[SavedFrame],
    ctx: &FinalizeContext,
) -> Result<(InternalCalibration, MountOffsetEstimate), (Phase, String)> {
    let pick = |p: &[FramePurpose]| {
        frames
            .iter()
            .filter(|f| p.contains(&f.purpose))
            .collect::<Vec<_>>()
    };
    let calib_frames = pick(&[FramePurpose::Tilt, FramePurpose::Loop]);
    let internal = calibrate_internal(&calib_frames, ctx.spec, ctx.nominal, &ctx.options.refine)
        .map_err(|e| abort(Phase::InternalCalib, e))?;
    let rig = internal.rig;
    let centered = centered_offset(ctx.spec);
    let boot = correspondences(&pick(&[FramePurpose::Bootstrap]), &rig, &centered, ctx.spec)
        .map_err(|e| abort(Phase::InternalCalib, e))?;
    let t_boot = estimate_rigid_ransac(
        boot.camera_points(),
        boot.robot_points(),
        &ctx.options.guidance_ransac,
    )
    .map_err(|e| abort(Phase::InternalCalib, e))?
    .transform;
    let tilt = tilt_samples(&pick(&[FramePurpose::Tilt]));
    let first = estimate_mount_offset(&tilt, &rig, ctx.spec, &centered, &t_boot)
        .map_err(|e| abort(Phase::InternalCalib, e))?;
    let all = tilt_samples(&calib_frames);
    let offset = estimate_mount_offset(
        &all,
        &rig,
        ctx.spec,
        &first.offset,
        &first.robot_from_camera,
    )
    .map_err(|e| abort(Phase::InternalCalib, e))?;
    Ok((internal, offset))
}

/// Every result of one camera, recomputed from its saved frames only.
pub fn finalize(
    camera: &CameraId,
    frames: &[SavedFrame],
    ctx: &FinalizeContext,
) -> Result<CameraResult, (Phase, String)> {
    let (internal, offset) = finalize_internal(frames, ctx)?;
    let repeat: Vec<&SavedFrame> = frames
        .iter()
        .filter(|f| f.purpose == FramePurpose::Repeat)
        .collect();
    let set = correspondences(&repeat, &internal.rig, &offset.offset, ctx.spec)
        .map_err(|e| abort(Phase::RepeatEth, e))?;
    let eye_to_hand =
        calibrate_eye_to_hand(&set, &ctx.options.ransac).map_err(|e| abort(Phase::RepeatEth, e))?;
    let count = |p: FramePurpose| frames.iter().filter(|f| f.purpose == p).count();
    let calib = frames
        .iter()
        .filter(|f| matches!(f.purpose, FramePurpose::Tilt | FramePurpose::Loop));
    let (mut color, mut ir, mut combined) = (0, 0, 0);
    for f in calib {
        color += f.observation.color.is_some() as usize;
        ir += f.observation.ir.is_some() as usize;
        combined += f.observation.is_combined() as usize;
    }
    Ok(CameraResult {
        camera_id: camera.clone(),
        internal,
        mount_offset: offset,
        eye_to_hand,
        frames: FrameCounts {
            color,
            ir,
            combined,
            tilt: count(FramePurpose::Tilt),
            moving: count(FramePurpose::Loop),
            repeat: count(FramePurpose::Repeat),
        },
    })
}

// ---------------------------------------------------------------- session log

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogHeader {
    pub format_version: u32,
    pub seed: u64,
    pub config_sha256: String,
    /// Hash over the fields above.
    pub integrity: String,
}

impl LogHeader {
    pub fn new(seed: u64, config_sha256: &str) -> Self {
        let integrity = Self::digest(LOG_FORMAT_VERSION, seed, config_sha256);
        Self {
            format_version: LOG_FORMAT_VERSION,
            seed,
            config_sha256: config_sha256.to_string(),
            integrity,
        }
    }

    fn digest(version: u32, seed: u64, config: &str) -> String {
        hex::encode(Sha256::digest(
            format!("robocal-log|{version}|{seed}|{config}").as_bytes(),
        ))
    }

    pub fn verify(&self, config_sha256: &str) -> Result<(), OrchestratorError> {
        if self.format_version != LOG_FORMAT_VERSION {
            return Err(OrchestratorError::LogVersionMismatch(format!(
                "format version {} (expected {LOG_FORMAT_VERSION})",
                self.format_version
            )));
        }
        if Self::digest(self.format_version, self.seed, &self.config_sha256) != self.integrity {
            return Err(OrchestratorError::LogVersionMismatch(
                "header integrity hash does not match".into(),
            ));
        }
        if self.config_sha256 != config_sha256 {
            return Err(OrchestratorError::LogVersionMismatch(
                "log was recorded with a different config".into(),
            ));
        }
        Ok(())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum LogEvent {
    Header(LogHeader),
    Phase {
        camera_id: CameraId,
        phase: Phase,
    },
    Command(RigidTransform),
    RobotPose(StampedPose),
    Plan {
        camera_id: CameraId,
        limits: TiltLimits,
        targets: Vec<MotionTarget>,
    },
    Skipped {
        camera_id: CameraId,
        target: usize,
    },
    Frame(SavedFrame),
    CameraDone(Box<CameraResult>),
    CameraAborted {
        camera_id: CameraId,
        phase: Phase,
        cause: String,
    },
    SessionEnd {
        sim_time_ns: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub timestamp_ns: u64,
    pub topic: String,
    pub event: LogEvent,
}

pub fn write_log(records: &[LogRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("log records serialize"));
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayOutcome {
    pub outcomes: Vec<CameraOutcome>,
    /// Results stored in the log, for comparison.
    pub recorded: Vec<CameraOutcome>,
    pub warnings: Vec<String>,
}

/// Recomputes every camera's results from the frames in a session log.
pub fn replay(
    log: &str,
    config_sha256: &str,
    rigs: &[(CameraId, SensorRig)],
    spec: &CheckerboardSpec,
    options: &SessionOptions,
) -> Result<ReplayOutcome, OrchestratorError> {
    let mut warnings = Vec::new();
    let mut records = Vec::new();
    for (n, line) in log.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<LogRecord>(line) {
            Ok(r) => records.push(r),
            Err(e) => {
                warnings.push(format!("log truncated at line {}: {e}", n + 1));
                break;
            }
        }
    }
    let header = match records.first().map(|r| &r.event) {
        Some(LogEvent::Header(h)) => h.clone(),
        _ => return Err(OrchestratorError::MalformedLog("missing header".into())),
    };
    header.verify(config_sha256)?;

    let mut frames: BTreeMap<CameraId, Vec<SavedFrame>> = BTreeMap::new();
    let mut order: Vec<CameraId> = Vec::new();
    let mut terminal: BTreeMap<CameraId, CameraOutcome> = BTreeMap::new();
    let mut ended = false;
    for r in &records[1..] {
        match &r.event {
            LogEvent::Frame(f) => frames
                .entry(f.camera_id.clone())
                .or_default()
                .push(f.clone()),
            LogEvent::Phase { camera_id, .. } if !order.contains(camera_id) => {
                order.push(camera_id.clone())
            }
            LogEvent::CameraDone(res) => {
                terminal.insert(res.camera_id.clone(), CameraOutcome::Done(res.clone()));
            }
            LogEvent::CameraAborted {
                camera_id,
                phase,
                cause,
            } => {
                terminal.insert(
                    camera_id.clone(),
                    CameraOutcome::Aborted {
                        camera_id: camera_id.clone(),
                        phase: *phase,
                        cause: cause.clone(),
                    },
                );
            }
            LogEvent::SessionEnd { .. } => ended = true,
            _ => {}
        }
    }
    if !ended {
        warnings.push("session log has no end record; results are partial".into());
    }

    let mut outcomes = Vec::new();
    let mut recorded = Vec::new();
    for id in order {
        let rig = rigs
            .iter()
            .find(|(c, _)| *c == id)
            .map(|(_, r)| r)
            .ok_or_else(|| {
                OrchestratorError::MalformedLog(format!("camera {id} is not in the config"))
            })?;
        let ctx = FinalizeContext {
            spec,
            nominal: rig,
            options,
        };
        let cam_frames = frames.remove(&id).unwrap_or_default();
        match terminal.remove(&id) {
            Some(CameraOutcome::Aborted {
                camera_id,
                phase,
                cause,
            }) => {
                let o = CameraOutcome::Aborted {
                    camera_id,
                    phase,
                    cause,
                };
                recorded.push(o.clone());
                outcomes.push(o);
            }
            Some(done) => {
                recorded.push(done);
                outcomes.push(match finalize(&id, &cam_frames, &ctx) {
                    Ok(r) => CameraOutcome::Done(Box::new(r)),
                    Err((phase, cause)) => CameraOutcome::Aborted {
                        camera_id: id.clone(),
                        phase,
                        cause,
                    },
                });
            }
            None if cam_frames.is_empty() => {}
            None => match finalize(&id, &cam_frames, &ctx) {
                Ok(r) => {
                    warnings.push(format!(
                        "camera {id}: session incomplete, results use the logged frames only"
                    ));
                    outcomes.push(CameraOutcome::Done(Box::new(r)));
                }
                Err((phase, cause)) => warnings.push(format!(
                    "camera {id}: incomplete log, no result ({phase:?}: {cause})"
                )),
            },
        }
    }
    Ok(ReplayOutcome {
        outcomes,
        recorded,
        warnings,
    })
}

// ---------------------------------------------------------------- live session

#[derive(Debug, Clone, PartialEq)]
pub struct SessionResult {
    pub outcomes: Vec<CameraOutcome>,
    pub trace: Vec<(CameraId, Phase)>,
    pub log: Vec<LogRecord>,
    pub sim_time_ns: u64,
    pub tilt_limits: BTreeMap<CameraId, TiltLimits>,
}

/// What one robot move produced for the active camera.
struct Sighting {
    robot: StampedPose,
    observation: Option<BoardObservation>,
}

struct Session<'a> {
    scene: &'a SimScene,
    options: &'a SessionOptions,
    bus: Bus,
    state: SessionState,
    clock_ns: u64,
    flange: RigidTransform,
    moves: u64,
    frame_counters: HashMap<CameraId, u64>,
    next_pose_id: u64,
    log: Vec<LogRecord>,
    frames: Vec<SavedFrame>,
    scan_hits: BTreeMap<CameraId, Vec<(StampedPose, BoardObservation)>>,
}

impl<'a> Session<'a> {
    fn record(&mut self, topic: &str, event: LogEvent) {
        self.log.push(LogRecord {
            timestamp_ns: self.clock_ns,
            topic: topic.to_string(),
            event,
        });
    }

    fn set_phase(&mut self, id: &CameraId, phase: Phase) {
        self.state.set_phase(id, phase);
        self.record(
            &camera_topic(id),
            LogEvent::Phase {
                camera_id: id.clone(),
                phase,
            },
        );
    }

    /// Commands one move, lets every camera publish, and drains the bus.
    /// `None` when the target is unreachable.
    fn move_to(&mut self, target: &RigidTransform) -> Option<Sighting> {
        self.record(ROBOT_COMMAND_TOPIC, LogEvent::Command(*target));
        let achieved = match self.scene.robot_move(target, self.moves) {
            Ok(p) => p,
            Err(e) => {
                log::debug!("move rejected: {e}");
                return None;
            }
        };
        self.moves += 1;
        let dist = (achieved.translation() - self.flange.translation()).norm();
        self.clock_ns += self.options.move_duration_ns(dist);
        self.flange = achieved;
        let robot = StampedPose {
            robot_from_flange: achieved,
            timestamp_ns: self.clock_ns,
        };
        self.record(ROBOT_POSE_TOPIC, LogEvent::RobotPose(robot));
        self.bus
            .publish(BusMessage {
                topic: ROBOT_POSE_TOPIC.into(),
                timestamp_ns: self.clock_ns,
                payload: Payload::RobotPose(robot),
            })
            .expect("robot clock is monotone");
        let shot = self.clock_ns + CAMERA_LATENCY_NS;
        for cam in &self.scene.cameras {
            let counter = self.frame_counters.entry(cam.id.clone()).or_insert(0);
            let frame = *counter;
            *counter += 1;
            let det = self.scene.render_board(
                cam,
                &self.scene.board_in_camera(cam, &achieved),
                frame,
                shot,
            );
            if let Detection::Observed(obs) = det {
                let msg = BusMessage {
                    topic: camera_topic(&cam.id),
                    timestamp_ns: shot,
                    payload: Payload::Observation(obs),
                };
                self.bus.publish(msg).expect("camera clock is monotone");
            }
        }
        let mut active_obs = None;
        while let Some(msg) = self.bus.pop() {
            if !stale_filter(&msg, shot, self.options.stale_window_ns) {
                log::debug!("dropping stale message on {}", msg.topic);
                continue;
            }
            match msg.payload {
                Payload::RobotPose(p) => self.state.latest_robot = Some(p),
                Payload::Command(_) => {}
                Payload::Observation(obs) => {
                    let obs = match resolve_orientation(&self.scene.board, &obs) {
                        Ok(o) => o,
                        Err(e) => {
                            log::warn!("{}: {e}", msg.topic);
                            continue;
                        }
                    };
                    if self.state.active.as_ref() == Some(&obs.camera_id) {
                        active_obs = Some(obs);
                    } else if let Ok(cam) = self.scene.camera(&obs.camera_id) {
                        let center = cam.nominal.color.center();
                        passive_observe(&mut self.state, &obs, &center);
                        if self.state.active.is_none() {
                            self.scan_hits
                                .entry(obs.camera_id.clone())
                                .or_default()
                                .push((robot, obs));
                        }
                    }
                }
            }
        }
        Some(Sighting {
            robot,
            observation: active_obs,
        })
    }

    fn save(
        &mut self,
        id: &CameraId,
        purpose: FramePurpose,
        robot: StampedPose,
        obs: BoardObservation,
    ) -> u64 {
        let pose_id = self.next_pose_id;
        self.next_pose_id += 1;
        let frame = SavedFrame {
            camera_id: id.clone(),
            purpose,
            pose_id,
            robot,
            observation: obs,
        };
        self.record(&camera_topic(id), LogEvent::Frame(frame.clone()));
        self.frames.push(frame);
        pose_id
    }

    /// Base-joint sweep of the upside-down L pose; every camera records what
    /// it sees.
    fn initial_scan(&mut self) {
        let w = Vector3::from(self.options.scan_center_m);
        // Visible face points up and radially outward.
        let board = RigidTransform::from_rpy(std::f64::consts::PI, SCAN_TILT_DEG.to_radians(), 0.0)
            .with_translation(w);
        let p0 = board.compose(
            &centered_offset(&self.scene.board)
                .flange_from_board
                .inverse(),
        );
        let steps = (360.0 / self.options.scan_step_deg).round().max(1.0) as usize;
        for k in 0..steps {
            let yaw = (k as f64 * self.options.scan_step_deg).to_radians();
            let target = RigidTransform::from_rpy(0.0, 0.0, yaw).compose(&p0);
            self.move_to(&target);
        }
    }

    fn run(mut self) -> SessionResult {
        let ids: Vec<CameraId> = self.scene.cameras.iter().map(|c| c.id.clone()).collect();
        self.state = SessionState::new(&ids);
        let mut outcomes = Vec::new();
        let mut limits = BTreeMap::new();
        self.initial_scan();
        let mut rescanned = false;
        loop {
            let waiting = self.state.waiting();
            if waiting.is_empty() {
                break;
            }
            let Some((id, start)) = handoff(&self.state) else {
                if rescanned {
                    for id in waiting {
                        let cause = "board never detected by this camera".to_string();
                        self.set_phase(&id, Phase::Done);
                        self.record(
                            &camera_topic(&id),
                            LogEvent::CameraAborted {
                                camera_id: id.clone(),
                                phase: Phase::Waiting,
                                cause: cause.clone(),
                            },
                        );
                        outcomes.push(CameraOutcome::Aborted {
                            camera_id: id,
                            phase: Phase::Waiting,
                            cause,
                        });
                    }
                    break;
                }
                self.initial_scan();
                rescanned = true;
                continue;
            };
            rescanned = false;
            let outcome = match self.calibrate(&id, &start, &mut limits) {
                Ok(r) => {
                    self.record(
                        &camera_topic(&id),
                        LogEvent::CameraDone(Box::new(r.clone())),
                    );
                    CameraOutcome::Done(Box::new(r))
                }
                Err((phase, cause)) => {
                    log::warn!("camera {id}: calibration aborted in {phase:?}: {cause}");
                    self.record(
                        &camera_topic(&id),
                        LogEvent::CameraAborted {
                            camera_id: id.clone(),
                            phase,
                            cause: cause.clone(),
                        },
                    );
                    CameraOutcome::Aborted {
                        camera_id: id.clone(),
                        phase,
                        cause,
                    }
                }
            };
            self.set_phase(&id, Phase::Done);
            outcomes.push(outcome);
        }
        let end = self.clock_ns;
        self.record("/session", LogEvent::SessionEnd { sim_time_ns: end });
        SessionResult {
            outcomes,
            trace: self.state.trace,
            log: self.log,
            sim_time_ns: end,
            tilt_limits: limits,
        }
    }

    fn calibrate(
        &mut self,
        id: &CameraId,
        start: &StampedPose,
        limits_out: &mut BTreeMap<CameraId, TiltLimits>,
    ) -> Result<CameraResult, (Phase, String)> {
        let cam = self
            .scene
            .camera(id)
            .map_err(|e| abort(Phase::Waiting, e))?
            .clone();
        let spec = self.scene.board;
        let nominal = cam.nominal;
        let centered = centered_offset(&spec);
        let opts = self.options;

        // initial Eye-to-Hand from the first detections
        self.set_phase(id, Phase::InitialEth);
        let mut boot = Vec::new();
        if let Some(s) = self.move_to(&start.robot_from_flange) {
            if let Some(o) = s.observation.filter(|o| o.ir.is_some()) {
                boot.push((s.robot, o));
            }
        }
        let hits = self.scan_hits.get(id).cloned().unwrap_or_default();
        for (robot, obs) in hits {
            if boot.len() >= BOOTSTRAP_DETECTIONS {
                break;
            }
            if obs.ir.is_some()
                && robot
                    .robot_from_flange
                    .distance_to(&start.robot_from_flange)
                    .1
                    > 1e-3
            {
                boot.push((robot, obs));
            }
        }
        let nudges = [
            (0.05, 0.0, 0.0),
            (0.0, 0.05, 0.0),
            (0.0, 0.0, 0.05),
            (-0.05, 0.0, 0.0),
            (0.0, -0.05, 0.0),
            (0.0, 0.0, -0.05),
        ];
        for d in nudges {
            if boot.len() >= BOOTSTRAP_DETECTIONS {
                break;
            }
            let base = start.robot_from_flange;
            let target = base.with_translation(base.translation() + Vector3::new(d.0, d.1, d.2));
            if let Some(Sighting {
                robot,
                observation: Some(o),
            }) = self.move_to(&target)
            {
                if o.ir.is_some() {
                    boot.push((robot, o));
                }
            }
        }
        if boot.len() < BOOTSTRAP_DETECTIONS {
            return Err(abort(
                Phase::InitialEth,
                format!("only {} initial detections", boot.len()),
            ));
        }
        let mut set = CorrespondenceSet::new();
        for (robot, obs) in boot {
            let pid = self.save(id, FramePurpose::Bootstrap, robot, obs.clone());
            set.accumulate(&obs, &nominal, &robot, &centered, &spec, pid)
                .map_err(|e| abort(Phase::InitialEth, e))?;
        }
        let t0 = estimate_rigid_ransac(
            set.camera_points(),
            set.robot_points(),
            &opts.guidance_ransac,
        )
        .map_err(|e| abort(Phase::InitialEth, e))?
        .transform;

        // tilt sweep about the image center
        self.set_phase(id, Phase::TiltSweep);
        let center = nominal.color.center();
        let depth = opts.base_depth_m;
        let pose_at = |tilt: &Tilt| {
            board_pose(
                &nominal.color,
                &spec,
                &center,
                depth,
                tilt,
                BoardOrientation::Facing,
            )
        };
        let start_flange = flange_for(
            &pose_at(&Tilt::zero()).map_err(|e| abort(Phase::TiltSweep, e))?,
            &t0,
            &centered,
        );
        let mut probe = SweepProbe {
            session: self,
            id,
            start: start_flange,
            t0,
            offset: centered,
            pose_at: &pose_at,
            saved: Vec::new(),
        };
        let limits = sweep_tilt_limits(&mut probe).map_err(|e| abort(Phase::TiltSweep, e))?;
        let tilt_frames = std::mem::take(&mut probe.saved);
        limits_out.insert(id.clone(), limits);

        // mount offset from the tilted views
        self.set_phase(id, Phase::OffsetEst);
        let samples: Vec<TiltSample> = tilt_frames
            .iter()
            .filter_map(|pid| self.frame(*pid))
            .filter(|f| f.observation.ir.is_some())
            .map(|f| TiltSample {
                robot: f.robot,
                observation: f.observation.clone(),
            })
            .collect();
        let est = estimate_mount_offset(&samples, &nominal, &spec, &centered, &t0)
            .map_err(|e| abort(Phase::OffsetEst, e))?;
        let offset = est.offset;
        let mut guide = est.robot_from_camera;

        // staged plan with closed-loop replanning
        self.set_phase(id, Phase::Moving);
        let plan = generate_plan(&nominal.color, &spec, &limits, depth, &opts.plan)
            .map_err(|e| abort(Phase::Moving, e))?;
        // positions only the IR camera sees widen its coverage
        let ir_extra = ir_only_targets(&nominal, &spec, &limits, depth, &opts.plan)
            .map_err(|e| abort(Phase::Moving, e))?;
        let moves: Vec<MotionTarget> = plan.targets.iter().cloned().chain(ir_extra).collect();
        self.record(
            &camera_topic(id),
            LogEvent::Plan {
                camera_id: id.clone(),
                limits,
                targets: moves.clone(),
            },
        );
        let mut guide_set = CorrespondenceSet::new();
        for pid in &tilt_frames {
            if let Some(f) = self.frame(*pid).cloned() {
                if f.observation.ir.is_some() {
                    guide_set
                        .accumulate(
                            &f.observation,
                            &nominal,
                            &f.robot,
                            &offset,
                            &spec,
                            f.pose_id,
                        )
                        .map_err(|e| abort(Phase::Moving, e))?;
                }
            }
        }
        let mut failures = 0;
        for (k, target) in moves.iter().enumerate() {
            let flange = flange_for(&target.camera_from_board, &guide, &offset);
            if !self.scene.robot.is_reachable(&flange) {
                self.record(
                    &camera_topic(id),
                    LogEvent::Skipped {
                        camera_id: id.clone(),
                        target: k,
                    },
                );
                continue;
            }
            let Some(s) = self.move_to(&flange) else {
                continue;
            };
            match s.observation {
                Some(obs) => {
                    failures = 0;
                    let pid = self.save(id, FramePurpose::Loop, s.robot, obs.clone());
                    if obs.ir.is_some() {
                        guide_set
                            .accumulate(&obs, &nominal, &s.robot, &offset, &spec, pid)
                            .map_err(|e| abort(Phase::Moving, e))?;
                        if let Ok(fit) = estimate_rigid_ransac(
                            guide_set.camera_points(),
                            guide_set.robot_points(),
                            &opts.guidance_ransac,
                        ) {
                            guide = fit.transform;
                        }
                    }
                }
                None => {
                    failures += 1;
                    if failures >= opts.max_consecutive_failures {
                        return Err(abort(
                            Phase::Moving,
                            format!("{failures} consecutive detection failures"),
                        ));
                    }
                }
            }
        }

        // internal calibration, then the saved frames converted through it
        self.set_phase(id, Phase::InternalCalib);
        let ctx = FinalizeContext {
            spec: &spec,
            nominal: &nominal,
            options: opts,
        };
        let mine: Vec<SavedFrame> = self
            .frames
            .iter()
            .filter(|f| &f.camera_id == id)
            .cloned()
            .collect();
        let (internal, est) = finalize_internal(&mine, &ctx)?;

        // repeat pass without tilt for the final Eye-to-Hand
        self.set_phase(id, Phase::RepeatEth);
        let mut seen: Vec<(Pixel, u64)> = Vec::new();
        let mut repeat = 0;
        for target in &plan.targets {
            let key = (target.intended_pixel, target.depth.to_bits());
            if seen.contains(&key) {
                continue;
            }
            seen.push(key);
            let pose = board_pose(
                &internal.rig.color,
                &spec,
                &target.intended_pixel,
                target.depth,
                &Tilt::zero(),
                BoardOrientation::Facing,
            )
            .map_err(|e| abort(Phase::RepeatEth, e))?;
            let flange = flange_for(&pose, &est.robot_from_camera, &est.offset);
            if !self.scene.robot.is_reachable(&flange) {
                continue;
            }
            if let Some(Sighting {
                robot,
                observation: Some(obs),
            }) = self.move_to(&flange)
            {
                if obs.ir.is_some() {
                    self.save(id, FramePurpose::Repeat, robot, obs);
                    repeat += 1;
                }
            }
        }
        if repeat < MIN_REPEAT_FRAMES {
            return Err(abort(
                Phase::RepeatEth,
                format!("only {repeat} repeat detections"),
            ));
        }
        let mine: Vec<SavedFrame> = self
            .frames
            .iter()
            .filter(|f| &f.camera_id == id)
            .cloned()
            .collect();
        finalize(id, &mine, &ctx)
    }

    fn frame(&self, pose_id: u64) -> Option<&SavedFrame> {
        self.frames.iter().rev().find(|f| f.pose_id == pose_id)
    }
}

struct SweepProbe<'s, 'a, F> {
    session: &'s mut Session<'a>,
    id: &'s CameraId,
    start: RigidTransform,
    t0: RigidTransform,
    offset: MountOffset,
    pose_at: &'s F,
    saved: Vec<u64>,
}

impl<F> Probe for SweepProbe<'_, '_, F>
where
    F: Fn(&Tilt) -> Result<RigidTransform, crate::planner::PlannerError>,
{
    fn detect(&mut self, tilt: Tilt) -> bool {
        let Ok(pose) = (self.pose_at)(&tilt) else {
            return false;
        };
        let flange = flange_for(&pose, &self.t0, &self.offset);
        match self.session.move_to(&flange) {
            Some(Sighting {
                robot,
                observation: Some(obs),
            }) if obs.is_combined() => {
                let pid = self.session.save(self.id, FramePurpose::Tilt, robot, obs);
                self.saved.push(pid);
                true
            }
            _ => false,
        }
    }

    fn return_to_start(&mut self) {
        let start = self.start;
        self.session.move_to(&start);
    }
}

/// Runs the full calibration program for every camera of a simulated scene.
pub fn run_session(
    scene: &SimScene,
    options: &SessionOptions,
    config_sha256: &str,
) -> Result<SessionResult, OrchestratorError> {
    if scene.cameras.is_empty() {
        return Err(OrchestratorError::NoCameras);
    }
    let mut session = Session {
        scene,
        options,
        bus: Bus::default(),
        state: SessionState::default(),
        clock_ns: 0,
        flange: RigidTransform::identity(),
        moves: 0,
        frame_counters: HashMap::new(),
        next_pose_id: 0,
        log: Vec::new(),
        frames: Vec::new(),
        scan_hits: BTreeMap::new(),
    };
    session.record(
        "/session",
        LogEvent::Header(LogHeader::new(scene.seed, config_sha256)),
    );
    Ok(session.run())
}
