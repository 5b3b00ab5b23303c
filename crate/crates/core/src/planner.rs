//! Calibration motion program: tilt sweep, staged ring layout over the
//! image, far pass and reachability filtering.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{undistort, CameraError};
use crate::handeye::MountOffset;
use crate::sim::RobotModel;
use crate::target::CheckerboardSpec;
use crate::{CameraId, Intrinsics, Pixel, RigidTransform, SensorRig};

pub const TILT_STEP_DEG: f64 = 5.0;
pub const ROLL_CLAMP_DEG: f64 = 45.0;
pub const PITCH_YAW_CLAMP_DEG: f64 = 85.0;
/// Depth of the second pass relative to the first.
pub const FAR_PASS_FACTOR: f64 = 1.2;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlannerError {
    #[error("board not detected at the sweep start pose")]
    StartNotDetected,
    #[error("board footprint {width_px:.0}x{height_px:.0} px does not fit the {image_w}x{image_h} image")]
    BoardTooLarge {
        width_px: f64,
        height_px: f64,
        image_w: u32,
        image_h: u32,
    },
    #[error("invalid plan parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Camera(#[from] CameraError),
}

/// Board rotation relative to the facing orientation. Roll turns about the
/// board normal, pitch about the board x axis and yaw about its y axis.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Tilt {
    pub roll: f64,
    pub pitch: f64,
    pub yaw: f64,
}

impl Tilt {
    pub fn new(roll: f64, pitch: f64, yaw: f64) -> Self {
        Self { roll, pitch, yaw }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn scaled(self, s: f64) -> Self {
        Self::new(self.roll * s, self.pitch * s, self.yaw * s)
    }

    fn axis(axis: usize, angle: f64) -> Self {
        let mut t = Self::zero();
        match axis {
            0 => t.roll = angle,
            1 => t.pitch = angle,
            _ => t.yaw = angle,
        }
        t
    }

    /// Rotation in board coordinates.
    pub fn board_rotation(&self) -> Matrix3<f64> {
        // columns: facing-frame x, y, z expressed on board axes z, x, y
        let c = Matrix3::new(0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0);
        c * RigidTransform::from_rpy(self.roll, self.pitch, self.yaw).rotation() * c.transpose()
    }
}

/// Largest tilts, radians, at which the board was still detected.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TiltLimits {
    pub roll_min: f64,
    pub roll_max: f64,
    pub pitch_min: f64,
    pub pitch_max: f64,
    pub yaw_min: f64,
    pub yaw_max: f64,
}

impl TiltLimits {
    pub fn zero() -> Self {
        Self {
            roll_min: 0.0,
            roll_max: 0.0,
            pitch_min: 0.0,
            pitch_max: 0.0,
            yaw_min: 0.0,
            yaw_max: 0.0,
        }
    }

    pub fn clamps() -> Self {
        let r = ROLL_CLAMP_DEG.to_radians();
        let p = PITCH_YAW_CLAMP_DEG.to_radians();
        Self {
            roll_min: -r,
            roll_max: r,
            pitch_min: -p,
            pitch_max: p,
            yaw_min: -p,
            yaw_max: p,
        }
    }

    fn get(&self, axis: usize, positive: bool) -> f64 {
        match (axis, positive) {
            (0, true) => self.roll_max,
            (0, false) => self.roll_min,
            (1, true) => self.pitch_max,
            (1, false) => self.pitch_min,
            (_, true) => self.yaw_max,
            (_, false) => self.yaw_min,
        }
    }

    fn set(&mut self, axis: usize, positive: bool, v: f64) {
        match (axis, positive) {
            (0, true) => self.roll_max = v,
            (0, false) => self.roll_min = v,
            (1, true) => self.pitch_max = v,
            (1, false) => self.pitch_min = v,
            (_, true) => self.yaw_max = v,
            (_, false) => self.yaw_min = v,
        }
    }

    /// The 13-entry tilt schedule: level, then half and full limits per axis.
    pub fn cycle(&self) -> Vec<Tilt> {
        let mut out = vec![Tilt::zero()];
        for axis in 0..3 {
            for frac in [0.5, 1.0] {
                for positive in [true, false] {
                    out.push(Tilt::axis(axis, frac * self.get(axis, positive)));
                }
            }
        }
        out
    }
}

/// Detection test used by the tilt sweep. Calls are strictly sequential.
pub trait Probe {
    /// Tilts the board from the start pose and reports whether it was seen.
    fn detect(&mut self, tilt: Tilt) -> bool;
    fn return_to_start(&mut self) {}
}

impl<F: FnMut(Tilt) -> bool> Probe for F {
    fn detect(&mut self, tilt: Tilt) -> bool {
        self(tilt)
    }
}

/// Steps each axis and direction in 5° increments until detection fails or
/// the clamp is reached.
pub fn sweep_tilt_limits<P: Probe + ?Sized>(probe: &mut P) -> Result<TiltLimits, PlannerError> {
    if !probe.detect(Tilt::zero()) {
        return Err(PlannerError::StartNotDetected);
    }
    let mut limits = TiltLimits::zero();
    for axis in 0..3 {
        let clamp = if axis == 0 {
            ROLL_CLAMP_DEG
        } else {
            PITCH_YAW_CLAMP_DEG
        };
        let steps = (clamp / TILT_STEP_DEG).floor() as usize;
        for positive in [true, false] {
            let sign = if positive { 1.0 } else { -1.0 };
            let mut last = 0.0;
            for k in 1..=steps {
                let angle = sign * (TILT_STEP_DEG * k as f64).to_radians();
                if !probe.detect(Tilt::axis(axis, angle)) {
                    break;
                }
                last = angle;
            }
            limits.set(axis, positive, last);
        }
        probe.return_to_start();
    }
    Ok(limits)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthPass {
    Near,
    Far,
}

/// How the untilted board is turned relative to the camera.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoardOrientation {
    /// Board normal along the viewing ray through its center.
    #[default]
    Facing,
    /// Board plane parallel to the image plane.
    Parallel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionTarget {
    /// Where the board center should appear.
    pub intended_pixel: Pixel,
    /// Depth of the board center along the optical axis.
    pub depth: f64,
    pub stage: usize,
    pub depth_pass: DepthPass,
    pub tilt: Tilt,
    pub camera_from_board: RigidTransform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionPlan {
    pub targets: Vec<MotionTarget>,
    pub board: CheckerboardSpec,
    pub camera_id: Option<CameraId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanOptions {
    pub stages: usize,
    /// Fraction of a board footprint shared by neighbouring positions.
    pub overlap: f64,
    pub tilting: bool,
    #[serde(default)]
    pub orientation: BoardOrientation,
    /// Border kept free around every footprint, fraction of the smaller image side.
    pub margin: f64,
}

impl Default for PlanOptions {
    fn default() -> Self {
        Self {
            stages: 3,
            overlap: 0.0,
            tilting: true,
            orientation: BoardOrientation::Facing,
            margin: 0.02,
        }
    }
}

/// `camera_from_board` placing the board center on the ray through `pixel`
/// at optical depth `depth`.
pub fn board_pose(
    intr: &Intrinsics,
    spec: &CheckerboardSpec,
    pixel: &Pixel,
    depth: f64,
    tilt: &Tilt,
    orientation: BoardOrientation,
) -> Result<RigidTransform, PlannerError> {
    let n = undistort(intr, pixel)?;
    let c = Vector3::new(n.x * depth, n.y * depth, depth);
    let face = match orientation {
        BoardOrientation::Parallel => Matrix3::identity(),
        BoardOrientation::Facing => {
            let z = c.normalize();
            let x = (Vector3::x() - z * z.x).normalize();
            Matrix3::from_columns(&[x, z.cross(&x), z])
        }
    };
    let r = face * tilt.board_rotation();
    Ok(RigidTransform::new(r, c).compose(&RigidTransform::from_translation(-spec.center())))
}

/// Plan laid out in the IR image, kept where the board would not fit in the
/// color image. Poses are converted to the color frame; `intended_pixel` and
/// `depth` stay in IR terms.
pub fn ir_only_targets(
    rig: &SensorRig,
    spec: &CheckerboardSpec,
    limits: &TiltLimits,
    base_depth: f64,
    options: &PlanOptions,
) -> Result<Vec<MotionTarget>, PlannerError> {
    let plan = generate_plan(&rig.ir, spec, limits, base_depth, options)?;
    let margin = options.margin * rig.color.width.min(rig.color.height) as f64;
    Ok(plan
        .targets
        .into_iter()
        .map(|t| MotionTarget {
            camera_from_board: rig.color_from_ir.compose(&t.camera_from_board),
            ..t
        })
        .filter(|t| !footprint_contained(&rig.color, spec, &t.camera_from_board, margin))
        .collect())
}

/// Whether all four outer corners project inside the image with `margin_px`.
pub fn footprint_contained(
    intr: &Intrinsics,
    spec: &CheckerboardSpec,
    pose: &RigidTransform,
    margin_px: f64,
) -> bool {
    let (w, h) = (intr.width as f64 - 1.0, intr.height as f64 - 1.0);
    spec.outer_corners()
        .iter()
        .all(|p| match intr.project_point(&pose.apply(p)) {
            Ok(px) => {
                px.u >= margin_px
                    && px.u <= w - margin_px
                    && px.v >= margin_px
                    && px.v <= h - margin_px
            }
            Err(_) => false,
        })
}

/// Ring offsets of stage `s` in grid units, ordered by pixel distance for
/// steps `(su, sv)`, then by angle.
fn ring(s: i64, su: f64, sv: f64) -> Vec<(i64, i64)> {
    let mut out: Vec<(i64, i64)> = (-s..=s)
        .flat_map(|i| (-s..=s).map(move |j| (i, j)))
        .filter(|(i, j)| i.abs().max(j.abs()) == s)
        .collect();
    let key = |&(i, j): &(i64, i64)| {
        let d = (i as f64 * su).hypot(j as f64 * sv);
        (
            d,
            (j as f64).atan2(i as f64).rem_euclid(std::f64::consts::TAU),
        )
    };
    out.sort_by(|a, b| {
        let (ka, kb) = (key(a), key(b));
        ka.0.total_cmp(&kb.0).then(ka.1.total_cmp(&kb.1))
    });
    out
}

/// Center-out layout of board poses over the image of `intr`, followed by the
/// same sequence at 1.2× depth.
pub fn generate_plan(
    intr: &Intrinsics,
    spec: &CheckerboardSpec,
    limits: &TiltLimits,
    base_depth: f64,
    options: &PlanOptions,
) -> Result<MotionPlan, PlannerError> {
    if !(base_depth > 0.0) || options.stages == 0 || !(0.0..1.0).contains(&options.overlap) {
        return Err(PlannerError::InvalidParameter(format!(
            "depth {base_depth}, stages {}, overlap {}",
            options.stages, options.overlap
        )));
    }
    let margin = options.margin * intr.width.min(intr.height) as f64;
    let center = intr.center();
    let (ew, eh) = spec.extent();
    let fw = intr.fx * ew / base_depth;
    let fh = intr.fy * eh / base_depth;
    let level = board_pose(
        intr,
        spec,
        &center,
        base_depth,
        &Tilt::zero(),
        options.orientation,
    )?;
    if !footprint_contained(intr, spec, &level, margin) {
        return Err(PlannerError::BoardTooLarge {
            width_px: fw,
            height_px: fh,
            image_w: intr.width,
            image_h: intr.height,
        });
    }
    let cycle = if options.tilting {
        limits.cycle()
    } else {
        vec![Tilt::zero()]
    };
    let (su, sv) = (
        (fw * (1.0 - options.overlap)).max(1.0),
        (fh * (1.0 - options.overlap)).max(1.0),
    );

    let place = |px: &Pixel,
                 tilt: &Tilt,
                 depth: f64,
                 stage: usize|
     -> Result<Option<MotionTarget>, PlannerError> {
        for t in [*tilt, tilt.scaled(0.5), Tilt::zero()] {
            let pose = board_pose(intr, spec, px, depth, &t, options.orientation)?;
            if footprint_contained(intr, spec, &pose, margin) {
                return Ok(Some(MotionTarget {
                    intended_pixel: *px,
                    depth,
                    stage,
                    depth_pass: DepthPass::Near,
                    tilt: t,
                    camera_from_board: pose,
                }));
            }
        }
        Ok(None)
    };

    let mut near = Vec::new();
    for t in &cycle {
        near.extend(place(&center, t, base_depth, 0)?);
    }
    // Ring positions whose untilted footprint leaves the image are pulled
    // toward the center until it fits; positions that collapse onto one are
    // visited once.
    let fits = |px: &Pixel| -> Result<bool, PlannerError> {
        let pose = board_pose(
            intr,
            spec,
            px,
            base_depth,
            &Tilt::zero(),
            options.orientation,
        )?;
        Ok(footprint_contained(intr, spec, &pose, margin))
    };
    let pull_in = |px: Pixel| -> Result<Pixel, PlannerError> {
        let (w, h) = (intr.width as f64 - 1.0, intr.height as f64 - 1.0);
        let px = Pixel::new(px.u.clamp(0.0, w), px.v.clamp(0.0, h));
        if fits(&px)? {
            return Ok(px);
        }
        let at = |s: f64| {
            Pixel::new(
                center.u + s * (px.u - center.u),
                center.v + s * (px.v - center.v),
            )
        };
        let (mut lo, mut hi) = (0.0, 1.0);
        for _ in 0..30 {
            let mid = 0.5 * (lo + hi);
            if fits(&at(mid))? {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(at(lo))
    };
    let mut visited = vec![center];
    let mut k = 1;
    for s in 1..options.stages {
        for (i, j) in ring(s as i64, su, sv) {
            let px = pull_in(Pixel::new(
                center.u + i as f64 * su,
                center.v + j as f64 * sv,
            ))?;
            if visited.iter().any(|q| q.distance(&px) < 1.0) {
                continue;
            }
            visited.push(px);
            if let Some(t) = place(&px, &cycle[k % cycle.len()], base_depth, s)? {
                near.push(t);
                k += 1;
            }
        }
    }
    let far = near
        .iter()
        .map(|t| {
            let depth = t.depth * FAR_PASS_FACTOR;
            let pose = board_pose(
                intr,
                spec,
                &t.intended_pixel,
                depth,
                &t.tilt,
                options.orientation,
            )?;
            Ok(MotionTarget {
                depth,
                stage: t.stage + options.stages,
                depth_pass: DepthPass::Far,
                camera_from_board: pose,
                ..*t
            })
        })
        .collect::<Result<Vec<_>, PlannerError>>()?;
    near.extend(far);
    Ok(MotionPlan {
        targets: near,
        board: *spec,
        camera_id: None,
    })
}

/// Flange pose that puts the board at `camera_from_board`.
pub fn flange_for(
    camera_from_board: &RigidTransform,
    robot_from_camera: &RigidTransform,
    offset: &MountOffset,
) -> RigidTransform {
    robot_from_camera
        .compose(camera_from_board)
        .compose(&offset.flange_from_board.inverse())
}

pub fn to_flange_targets(
    targets: &[MotionTarget],
    robot_from_camera: &RigidTransform,
    offset: &MountOffset,
) -> Vec<RigidTransform> {
    targets
        .iter()
        .map(|t| flange_for(&t.camera_from_board, robot_from_camera, offset))
        .collect()
}

/// Indices of reachable and unreachable flange poses.
pub fn filter_reachable(
    targets: &[RigidTransform],
    robot: &RobotModel,
) -> (Vec<usize>, Vec<usize>) {
    (0..targets.len()).partition(|&i| robot.is_reachable(&targets[i]))
}
