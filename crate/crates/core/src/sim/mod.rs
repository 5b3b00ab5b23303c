//! Ground-truth world: robot, cameras and synthetic board observations.

pub mod robot;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::CameraError;
use crate::handeye::MountOffset;
use crate::target::{
    robust_corner_depth, BoardObservation, CheckerboardSpec, CornerDetection, DepthWindowStack,
    GridSymmetry, DEPTH_VALID_RANGE, DEPTH_WINDOW_FRAMES, DEPTH_WINDOW_RADIUS,
};
use crate::{CameraId, DepthModel, Intrinsics, Pixel, RigidTransform, SensorRig};
pub use robot::RobotModel;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("target at {distance:.3} m from the base is unreachable")]
    Unreachable { distance: f64 },
    #[error("unknown camera {0}")]
    UnknownCamera(CameraId),
    #[error("duplicate camera id {0}")]
    DuplicateCamera(CameraId),
    #[error("invalid noise parameters: {0}")]
    InvalidNoise(String),
    #[error("invalid robot model: {0}")]
    InvalidRobot(String),
}

/// SplitMix64 finalizer, used to derive independent RNG substreams.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of substream `(a, b)` of `seed`.
pub fn stream_seed(seed: u64, a: u64, b: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ a) ^ b)
}

/// Stable 64-bit tag of a camera id, for substream derivation.
pub fn camera_tag(id: &CameraId) -> u64 {
    id.0.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseParams {
    pub pixel_sigma: f64,
    #[serde(rename = "depth_sigma_base_m")]
    pub depth_sigma_base: f64,
    /// Meters per square meter of depth.
    pub depth_sigma_slope: f64,
    /// Probability that a single depth sample reads zero.
    #[serde(default)]
    pub depth_dropout: f64,
    #[serde(default)]
    pub outlier_rate: f64,
    #[serde(default)]
    pub outlier_magnitude: OutlierMagnitude,
    #[serde(rename = "detect_tilt_limit_deg", with = "degrees")]
    pub detect_tilt_limit: f64,
    #[serde(rename = "detect_min_depth_m")]
    pub detect_min_depth: f64,
    #[serde(rename = "detect_max_depth_m")]
    pub detect_max_depth: f64,
}

mod degrees {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(rad: &f64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(rad.to_degrees())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        f64::deserialize(d).map(f64::to_radians)
    }
}

impl NoiseParams {
    pub fn validate(&self) -> Result<(), SimError> {
        let vals = [
            self.pixel_sigma,
            self.depth_sigma_base,
            self.depth_sigma_slope,
            self.depth_dropout,
            self.outlier_rate,
            self.outlier_magnitude.pixels,
            self.outlier_magnitude.depth_m,
            self.detect_tilt_limit,
            self.detect_min_depth,
        ];
        if vals.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(SimError::InvalidNoise(
                "all values must be finite and non-negative".into(),
            ));
        }
        if self.outlier_rate >= 1.0 || self.depth_dropout >= 1.0 {
            return Err(SimError::InvalidNoise("rates must be below 1".into()));
        }
        if !(self.detect_max_depth > self.detect_min_depth) {
            return Err(SimError::InvalidNoise(
                "detect_max_depth must exceed detect_min_depth".into(),
            ));
        }
        Ok(())
    }

    /// Same detection envelope with every random perturbation removed.
    pub fn noiseless(&self) -> Self {
        Self {
            pixel_sigma: 0.0,
            depth_sigma_base: 0.0,
            depth_sigma_slope: 0.0,
            depth_dropout: 0.0,
            outlier_rate: 0.0,
            ..*self
        }
    }

    pub fn depth_sigma(&self, z: f64) -> f64 {
        self.depth_sigma_base + self.depth_sigma_slope * z * z
    }

    pub fn is_noiseless(&self) -> bool {
        self.pixel_sigma == 0.0
            && self.depth_sigma(1.0) == 0.0
            && self.depth_dropout == 0.0
            && self.outlier_rate == 0.0
    }
}

/// Largest displacement of a corrupted corner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutlierMagnitude {
    pub pixels: f64,
    pub depth_m: f64,
}

impl Default for OutlierMagnitude {
    fn default() -> Self {
        Self {
            pixels: 15.0,
            depth_m: 0.08,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensorPreset {
    KinectV1,
    KinectV2,
}

impl SensorPreset {
    /// Datasheet rig: pinhole cameras from resolution and field of view.
    pub fn nominal_rig(self) -> SensorRig {
        let (color, ir, baseline) = match self {
            Self::KinectV2 => {
                let h = 70f64.to_radians();
                let v = 2.0 * ((h / 2.0).tan() * 1080.0 / 1920.0).atan();
                (
                    Intrinsics::from_fov(1920, 1080, h, v),
                    Intrinsics::from_fov(512, 424, h, 60f64.to_radians()),
                    0.052,
                )
            }
            Self::KinectV1 => (
                Intrinsics::from_fov(640, 480, 57f64.to_radians(), 43f64.to_radians()),
                Intrinsics::from_fov(320, 240, 57f64.to_radians(), 43f64.to_radians()),
                0.025,
            ),
        };
        SensorRig {
            color,
            ir,
            color_from_ir: RigidTransform::from_translation(Vector3::new(-baseline, 0.0, 0.0)),
            depth_model: DepthModel::identity(),
        }
    }

    /// The rig the simulator renders with: the datasheet values perturbed
    /// the way a real unit deviates from them.
    pub fn true_rig(self) -> SensorRig {
        let nominal = self.nominal_rig();
        let perturb = |k: Intrinsics, f: (f64, f64), c: (f64, f64)| Intrinsics {
            fx: k.fx * f.0,
            fy: k.fy * f.1,
            cx: k.cx + c.0 * k.width as f64,
            cy: k.cy + c.1 * k.height as f64,
            ..k
        };
        let color = perturb(nominal.color, (1.015, 1.012), (0.004, -0.003))
            .with_distortion(0.04, -0.08, 0.0, 0.0008, -0.0005);
        let ir = perturb(nominal.ir, (0.988, 0.99), (-0.005, 0.004))
            .with_distortion(0.09, -0.25, 0.0, 0.0012, 0.0007);
        let skew = RigidTransform::from_rpy(0.004, -0.006, 0.003)
            .with_translation(Vector3::new(0.002, -0.001, 0.0015));
        SensorRig {
            color,
            ir,
            color_from_ir: nominal.color_from_ir.compose(&skew),
            depth_model: DepthModel {
                scale: 1.012,
                offset: -0.008,
            },
        }
    }

    pub fn noise(self) -> NoiseParams {
        match self {
            Self::KinectV2 => NoiseParams {
                pixel_sigma: 0.3,
                depth_sigma_base: 0.0007,
                depth_sigma_slope: 0.0004,
                depth_dropout: 0.02,
                outlier_rate: 0.0,
                outlier_magnitude: OutlierMagnitude::default(),
                detect_tilt_limit: 47f64.to_radians(),
                detect_min_depth: 0.5,
                detect_max_depth: 4.5,
            },
            Self::KinectV1 => NoiseParams {
                pixel_sigma: 0.6,
                depth_sigma_base: 0.0015,
                depth_sigma_slope: 0.0012,
                depth_dropout: 0.05,
                outlier_rate: 0.0,
                outlier_magnitude: OutlierMagnitude::default(),
                detect_tilt_limit: 47f64.to_radians(),
                detect_min_depth: 0.4,
                detect_max_depth: 4.5,
            },
        }
    }
}

/// `robot_from_camera` of a camera at `eye` looking at `target`, image x
/// horizontal.
pub fn look_at(eye: &Vector3<f64>, target: &Vector3<f64>) -> RigidTransform {
    let z = (target - eye).normalize();
    let mut x = z.cross(&Vector3::z());
    if x.norm() < 1e-9 {
        x = Vector3::x();
    }
    let x = x.normalize();
    let y = z.cross(&x);
    RigidTransform::new(nalgebra::Matrix3::from_columns(&[x, y, z]), *eye)
}

/// Camera on a sphere around `center`: azimuth about base z, elevation above
/// the horizontal, looking at the center.
pub fn orbit_pose(
    center: &Vector3<f64>,
    azimuth: f64,
    elevation: f64,
    distance: f64,
) -> RigidTransform {
    let dir = Vector3::new(
        elevation.cos() * azimuth.cos(),
        elevation.cos() * azimuth.sin(),
        elevation.sin(),
    );
    look_at(&(center + dir * distance), center)
}

/// Board pose used by the initial scan and most tests.
pub const WORKSPACE_CENTER: [f64; 3] = [0.35, 0.0, 0.2];
/// Camera placement of the default scenes, relative to the workspace center.
pub const DEFAULT_ELEVATION_DEG: f64 = 60.0;
pub const DEFAULT_CAMERA_DISTANCE_M: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimCamera {
    pub id: CameraId,
    pub preset: Option<SensorPreset>,
    /// What the calibrator is told before calibrating.
    pub nominal: SensorRig,
    pub truth: SensorRig,
    pub robot_from_camera: RigidTransform,
    pub noise: NoiseParams,
}

impl SimCamera {
    pub fn from_preset(
        id: impl Into<CameraId>,
        preset: SensorPreset,
        robot_from_camera: RigidTransform,
    ) -> Self {
        Self {
            id: id.into(),
            preset: Some(preset),
            nominal: preset.nominal_rig(),
            truth: preset.true_rig(),
            robot_from_camera,
            noise: preset.noise(),
        }
    }

    pub fn noiseless(mut self) -> Self {
        self.noise = self.noise.noiseless();
        self
    }
}

/// Why the simulated detector found no board.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum FailureReason {
    BehindCamera,
    OutOfImage,
    Tilt { degrees: f64 },
    DepthRange { depth: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Detection {
    Observed(BoardObservation),
    Failed {
        color: FailureReason,
        ir: FailureReason,
    },
}

impl Detection {
    pub fn observation(&self) -> Option<&BoardObservation> {
        match self {
            Self::Observed(o) => Some(o),
            Self::Failed { .. } => None,
        }
    }

    pub fn into_observation(self) -> Option<BoardObservation> {
        match self {
            Self::Observed(o) => Some(o),
            Self::Failed { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimScene {
    pub cameras: Vec<SimCamera>,
    pub robot: RobotModel,
    pub mount_offset: MountOffset,
    pub board: CheckerboardSpec,
    pub seed: u64,
}

/// Stream ids below this are reserved for the robot.
const CAMERA_STREAM_BASE: u64 = 1 << 32;

impl SimScene {
    pub fn new(
        cameras: Vec<SimCamera>,
        robot: RobotModel,
        mount_offset: MountOffset,
        board: CheckerboardSpec,
        seed: u64,
    ) -> Result<Self, SimError> {
        for (i, c) in cameras.iter().enumerate() {
            if cameras[..i].iter().any(|o| o.id == c.id) {
                return Err(SimError::DuplicateCamera(c.id.clone()));
            }
            c.noise.validate()?;
        }
        robot.validate().map_err(SimError::InvalidRobot)?;
        Ok(Self {
            cameras,
            robot,
            mount_offset,
            board,
            seed,
        })
    }

    /// Three-sensor layout: two V2 units at ±45° azimuth, then a V1 facing
    /// the robot.
    pub fn default_scene(seed: u64) -> Self {
        let w = Vector3::from(WORKSPACE_CENTER);
        let elev = DEFAULT_ELEVATION_DEG.to_radians();
        let d = DEFAULT_CAMERA_DISTANCE_M;
        let cams = vec![
            SimCamera::from_preset(
                "v2_left",
                SensorPreset::KinectV2,
                orbit_pose(&w, 45f64.to_radians(), elev, d),
            ),
            SimCamera::from_preset(
                "v2_right",
                SensorPreset::KinectV2,
                orbit_pose(&w, -45f64.to_radians(), elev, d),
            ),
            SimCamera::from_preset(
                "v1_front",
                SensorPreset::KinectV1,
                orbit_pose(&w, 0.0, elev, d),
            ),
        ];
        let board = CheckerboardSpec::default();
        Self::new(
            cams,
            RobotModel::default(),
            default_mount_offset(&board),
            board,
            seed,
        )
        .expect("valid default scene")
    }

    pub fn camera(&self, id: &CameraId) -> Result<&SimCamera, SimError> {
        self.cameras
            .iter()
            .find(|c| &c.id == id)
            .ok_or_else(|| SimError::UnknownCamera(id.clone()))
    }

    /// Disables every noise source, robot included.
    pub fn noiseless(mut self) -> Self {
        self.cameras = self.cameras.into_iter().map(SimCamera::noiseless).collect();
        self.robot.repeatability_sigma = 0.0;
        self
    }

    /// Moves to `target`; the returned pose is the encoder readout. `move_index`
    /// selects the noise substream.
    pub fn robot_move(
        &self,
        target: &RigidTransform,
        move_index: u64,
    ) -> Result<RigidTransform, SimError> {
        if !self.robot.is_reachable(target) {
            return Err(SimError::Unreachable {
                distance: target.translation().norm(),
            });
        }
        let s = self.robot.repeatability_sigma;
        if s == 0.0 {
            return Ok(*target);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(self.seed, 0, move_index));
        let d = Vector3::from_fn(|_, _| s * rng.sample::<f64, _>(StandardNormal));
        Ok(target.with_translation(target.translation() + d))
    }

    /// True board pose in the color frame of `camera` for a flange pose.
    pub fn board_in_camera(&self, camera: &SimCamera, flange: &RigidTransform) -> RigidTransform {
        camera
            .robot_from_camera
            .inverse()
            .compose(flange)
            .compose(&self.mount_offset.flange_from_board)
    }

    /// Observation of the board held at `flange` by `camera_id`. `frame`
    /// selects the noise substream.
    pub fn render_observation(
        &self,
        camera_id: &CameraId,
        flange: &RigidTransform,
        frame: u64,
        timestamp_ns: u64,
    ) -> Result<Detection, SimError> {
        let cam = self.camera(camera_id)?;
        let pose = self.board_in_camera(cam, flange);
        Ok(self.render_board(cam, &pose, frame, timestamp_ns))
    }

    /// Observation of the board at a given pose in the camera's color frame.
    pub fn render_board(
        &self,
        cam: &SimCamera,
        color_from_board: &RigidTransform,
        frame: u64,
        timestamp_ns: u64,
    ) -> Detection {
        let spec = &self.board;
        let noise = &cam.noise;
        let ir_from_board = cam.truth.color_from_ir.inverse().compose(color_from_board);
        let color = visible_corners(spec, &cam.truth.color, color_from_board, noise);
        let ir = visible_corners(spec, &cam.truth.ir, &ir_from_board, noise);
        let (color, ir) = match (color, ir) {
            (Err(c), Err(i)) => return Detection::Failed { color: c, ir: i },
            (c, i) => (c.ok(), i.ok()),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(
            self.seed,
            CAMERA_STREAM_BASE ^ camera_tag(&cam.id),
            frame,
        ));
        let jitter = |mut px: Vec<Pixel>, rng: &mut ChaCha8Rng| {
            if noise.pixel_sigma > 0.0 {
                for p in &mut px {
                    p.u += noise.pixel_sigma * rng.sample::<f64, _>(StandardNormal);
                    p.v += noise.pixel_sigma * rng.sample::<f64, _>(StandardNormal);
                }
            }
            px
        };
        let color = color.map(|px| jitter(px, &mut rng));
        let ir = ir.map(|px| jitter(px, &mut rng));
        let depths: Vec<Option<f64>> = match &ir {
            Some(_) => (0..spec.corner_count())
                .map(|i| {
                    let z = ir_from_board.apply(&spec.corner(i)).z;
                    corner_depth_reading(z, noise, &cam.truth.depth_model, &mut rng)
                })
                .collect(),
            None => Vec::new(),
        };
        let color = color.map(|px| detector_order(spec, px));
        let (ir, corner_depths) = match ir {
            Some(px) => {
                let perm = raw_permutation(spec, &px);
                let mut raw_depths = vec![None; px.len()];
                for (c, &r) in perm.iter().enumerate() {
                    raw_depths[r] = depths[c];
                }
                (Some(apply_order(px, &perm)), raw_depths)
            }
            None => (None, Vec::new()),
        };
        Detection::Observed(BoardObservation {
            camera_id: cam.id.clone(),
            timestamp_ns,
            color,
            ir,
            corner_depths,
            orientation_resolved: false,
        })
    }
}

/// True offset of the default scene: the board center sits 40 mm off the
/// flange axis and is turned by 10°.
pub fn default_mount_offset(spec: &CheckerboardSpec) -> MountOffset {
    perturbed_offset(
        spec,
        &Vector3::new(0.02, -0.015, 0.03),
        (0.05, -0.04, 0.155),
    )
}

/// Offset placing the board center at `translation` in the flange frame,
/// rotated by `rpy` about it.
pub fn perturbed_offset(
    spec: &CheckerboardSpec,
    translation: &Vector3<f64>,
    rpy: (f64, f64, f64),
) -> MountOffset {
    let r = RigidTransform::from_rpy(rpy.0, rpy.1, rpy.2).with_translation(*translation);
    MountOffset::new(r.compose(&RigidTransform::from_translation(-spec.center())))
}

/// Offset assumed before estimation: board center on the flange origin.
pub fn centered_offset(spec: &CheckerboardSpec) -> MountOffset {
    MountOffset::new(RigidTransform::from_translation(-spec.center()))
}

fn visible_corners(
    spec: &CheckerboardSpec,
    intr: &Intrinsics,
    cam_from_board: &RigidTransform,
    noise: &NoiseParams,
) -> Result<Vec<Pixel>, FailureReason> {
    let c = cam_from_board.apply(&spec.center());
    if c.z <= 0.0 {
        return Err(FailureReason::BehindCamera);
    }
    let n = cam_from_board.rotation().column(2).into_owned();
    let tilt = n.dot(&c.normalize()).clamp(-1.0, 1.0).acos();
    if tilt > noise.detect_tilt_limit {
        return Err(FailureReason::Tilt {
            degrees: tilt.to_degrees(),
        });
    }
    if c.z < noise.detect_min_depth || c.z > noise.detect_max_depth {
        return Err(FailureReason::DepthRange { depth: c.z });
    }
    let project = |p: &Vector3<f64>| -> Result<Pixel, FailureReason> {
        let q = cam_from_board.apply(p);
        intr.project_point(&q)
            .map_err(|_: CameraError| FailureReason::BehindCamera)
    };
    for p in spec.outer_corners() {
        if !intr.contains(&project(&p)?) {
            return Err(FailureReason::OutOfImage);
        }
    }
    (0..spec.corner_count())
        .map(|i| project(&spec.corner(i)))
        .collect()
}

/// Raw reading of one corner: a window stack of noisy samples with a bias
/// shared by the stack, reduced by the same median the agents use.
fn corner_depth_reading(
    z: f64,
    noise: &NoiseParams,
    model: &DepthModel,
    rng: &mut ChaCha8Rng,
) -> Option<f64> {
    let sigma = noise.depth_sigma(z);
    if sigma == 0.0 && noise.depth_dropout == 0.0 {
        return Some(model.distort(z));
    }
    let bias = sigma * rng.sample::<f64, _>(StandardNormal);
    let side = 2 * DEPTH_WINDOW_RADIUS + 1;
    let frames = (0..DEPTH_WINDOW_FRAMES)
        .map(|_| {
            (0..side * side)
                .map(|_| {
                    let e: f64 = StandardNormal.sample(rng);
                    if noise.depth_dropout > 0.0 && rng.random::<f64>() < noise.depth_dropout {
                        0.0
                    } else {
                        model.distort(z + bias + sigma * e)
                    }
                })
                .collect()
        })
        .collect();
    let stack = DepthWindowStack::new(frames, DEPTH_WINDOW_RADIUS)
        .ok()?
        .with_valid_range(DEPTH_VALID_RANGE.0, DEPTH_VALID_RANGE.1);
    robust_corner_depth(&stack).ok()
}

/// `perm[canonical] = raw` for the order a detector would report: the first
/// row runs left to right in the image.
fn raw_permutation(spec: &CheckerboardSpec, canonical: &[Pixel]) -> Vec<usize> {
    let mut best: Option<(f64, Vec<usize>)> = None;
    for sym in GridSymmetry::candidates(spec) {
        let perm = sym.permutation(spec);
        let mut inv = vec![0; perm.len()];
        for (c, &r) in perm.iter().enumerate() {
            inv[r] = c;
        }
        let du = canonical[inv[1]].u - canonical[inv[0]].u;
        if best.as_ref().is_none_or(|(b, _)| du > *b) {
            best = Some((du, perm));
        }
    }
    best.expect("at least one symmetry").1
}

fn apply_order(canonical: Vec<Pixel>, perm: &[usize]) -> CornerDetection {
    let mut raw = canonical.clone();
    for (c, &r) in perm.iter().enumerate() {
        raw[r] = canonical[c];
    }
    CornerDetection {
        corners: raw,
        marker_corner: perm[0],
    }
}

fn detector_order(spec: &CheckerboardSpec, canonical: Vec<Pixel>) -> CornerDetection {
    let perm = raw_permutation(spec, &canonical);
    apply_order(canonical, &perm)
}

/// Replaces each corner with probability `rate` by a displaced copy; both
/// cameras and the depth reading of a corrupted corner move. Returns the
/// corrupted canonical corner indices. Expects a resolved observation.
pub fn inject_outliers(
    obs: &BoardObservation,
    rate: f64,
    magnitude: OutlierMagnitude,
    seed: u64,
) -> (BoardObservation, Vec<usize>) {
    let mut out = obs.clone();
    if rate <= 0.0 {
        return (out, Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = out
        .ir
        .as_ref()
        .or(out.color.as_ref())
        .map_or(0, |d| d.corners.len());
    let mut hit = Vec::new();
    let offset = |rng: &mut ChaCha8Rng, m: f64| {
        let s = if rng.random::<bool>() { 1.0 } else { -1.0 };
        s * m * rng.random_range(0.5..=1.0)
    };
    for i in 0..n {
        if rng.random::<f64>() >= rate {
            continue;
        }
        hit.push(i);
        for det in [out.color.as_mut(), out.ir.as_mut()].into_iter().flatten() {
            if let Some(p) = det.corners.get_mut(i) {
                p.u += offset(&mut rng, magnitude.pixels);
                p.v += offset(&mut rng, magnitude.pixels);
            }
        }
        if let Some(Some(d)) = out.corner_depths.get_mut(i) {
            *d += offset(&mut rng, magnitude.depth_m);
        }
    }
    (out, hit)
}
