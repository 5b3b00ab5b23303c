//! Scene configuration files (TOML).
//!
//! Unknown keys are rejected everywhere. A camera is placed either on an
//! orbit around the session's scan center or by an explicit pose.

use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::handeye::MountOffset;
use crate::orchestrator::{sha256_hex, SessionOptions};
use crate::sim::{
    default_mount_offset, orbit_pose, perturbed_offset, NoiseParams, RobotModel, SensorPreset,
    SimCamera, SimScene, DEFAULT_CAMERA_DISTANCE_M, DEFAULT_ELEVATION_DEG,
};
use crate::target::CheckerboardSpec;
use crate::{RigidTransform, SensorRig};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("{0}")]
    Parse(String),
    #[error("{field}: {message}")]
    Invalid { field: String, message: String },
}

fn invalid(field: impl Into<String>, message: impl std::fmt::Display) -> ConfigError {
    ConfigError::Invalid {
        field: field.into(),
        message: message.to_string(),
    }
}

/// Translation plus extrinsic roll/pitch/yaw in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseConfig {
    pub translation_m: [f64; 3],
    pub rpy_deg: [f64; 3],
}

impl PoseConfig {
    pub fn to_transform(&self) -> RigidTransform {
        let [r, p, y] = self.rpy_deg.map(f64::to_radians);
        RigidTransform::from_rpy(r, p, y).with_translation(Vector3::from(self.translation_m))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraConfig {
    pub id: String,
    pub preset: SensorPreset,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub azimuth_deg: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub elevation_deg: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distance_m: Option<f64>,
    /// `robot_from_camera`; excludes the orbit fields.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pose: Option<PoseConfig>,
    /// Replaces the preset's noise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoiseParams>,
    /// Replaces the preset's nominal rig (what the calibrator starts from).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nominal: Option<SensorRig>,
    /// Replaces the preset's true rig.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<SensorRig>,
}

impl CameraConfig {
    pub fn orbit(id: &str, preset: SensorPreset, azimuth_deg: f64) -> Self {
        Self {
            id: id.to_string(),
            preset,
            azimuth_deg: Some(azimuth_deg),
            elevation_deg: Some(DEFAULT_ELEVATION_DEG),
            distance_m: Some(DEFAULT_CAMERA_DISTANCE_M),
            pose: None,
            noise: None,
            nominal: None,
            truth: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationConfig {
    /// Turns off pixel, depth, outlier and robot repeatability noise.
    pub noiseless: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub seed: u64,
    #[serde(default)]
    pub board: CheckerboardSpec,
    #[serde(default)]
    pub robot: RobotModel,
    /// Board pose relative to a board centered on the flange; the default
    /// is a few centimeters and degrees off.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mount_offset: Option<PoseConfig>,
    #[serde(default)]
    pub session: SessionOptions,
    #[serde(default)]
    pub simulation: SimulationConfig,
    pub cameras: Vec<CameraConfig>,
}

impl SceneConfig {
    /// Two V2 sensors at ±45°, then a V1 between them.
    pub fn default_three_camera(seed: u64) -> Self {
        Self {
            seed,
            board: CheckerboardSpec::default(),
            robot: RobotModel::default(),
            mount_offset: None,
            session: SessionOptions::default(),
            simulation: SimulationConfig::default(),
            cameras: vec![
                CameraConfig::orbit("v2_left", SensorPreset::KinectV2, 45.0),
                CameraConfig::orbit("v2_right", SensorPreset::KinectV2, -45.0),
                CameraConfig::orbit("v1_front", SensorPreset::KinectV1, 0.0),
            ],
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_toml_str(&text).map_err(|e| match e {
            ConfigError::Parse(m) => ConfigError::Parse(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("scene config is always representable in TOML")
    }

    /// Hash of the canonical serialization; recorded in session logs.
    pub fn sha256(&self) -> String {
        sha256_hex(self.to_toml_string().as_bytes())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.board.validate().map_err(|e| invalid("board", e))?;
        self.robot.validate().map_err(|e| invalid("robot", e))?;
        let s = &self.session;
        if !(s.base_depth_m > 0.0) {
            return Err(invalid("session.base_depth_m", "must be positive"));
        }
        if !(s.scan_step_deg > 0.0 && s.scan_step_deg <= 360.0) {
            return Err(invalid("session.scan_step_deg", "must be in (0, 360]"));
        }
        if !(s.speed_m_s > 0.0) {
            return Err(invalid("session.speed_m_s", "must be positive"));
        }
        if s.plan.stages == 0 {
            return Err(invalid("session.plan.stages", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&s.plan.overlap) {
            return Err(invalid("session.plan.overlap", "must be in [0, 1)"));
        }
        s.ransac
            .validate()
            .map_err(|e| invalid("session.ransac", e))?;
        s.guidance_ransac
            .validate()
            .map_err(|e| invalid("session.guidance_ransac", e))?;
        if self.cameras.is_empty() {
            return Err(invalid("cameras", "at least one camera is required"));
        }
        for (i, c) in self.cameras.iter().enumerate() {
            let field = |name: &str| format!("cameras[{i}].{name}");
            if c.id.is_empty() {
                return Err(invalid(field("id"), "must not be empty"));
            }
            if let Some(j) = self.cameras[..i].iter().position(|o| o.id == c.id) {
                return Err(invalid(
                    field("id"),
                    format!("duplicate camera id {:?} (also cameras[{j}].id)", c.id),
                ));
            }
            let orbit =
                c.azimuth_deg.is_some() || c.elevation_deg.is_some() || c.distance_m.is_some();
            match (&c.pose, orbit) {
                (Some(_), true) => {
                    return Err(invalid(
                        field("pose"),
                        "give either pose or azimuth/elevation/distance, not both",
                    ))
                }
                (None, false) => {
                    return Err(invalid(
                        field("azimuth_deg"),
                        "camera needs azimuth_deg or pose",
                    ))
                }
                (None, true) if c.azimuth_deg.is_none() => {
                    return Err(invalid(
                        field("azimuth_deg"),
                        "required with elevation/distance",
                    ))
                }
                _ => {}
            }
            if let Some(d) = c.distance_m {
                if !(d > 0.0) {
                    return Err(invalid(field("distance_m"), "must be positive"));
                }
            }
            if let Some(n) = &c.noise {
                n.validate().map_err(|e| invalid(field("noise"), e))?;
            }
            for (name, rig) in [("nominal", &c.nominal), ("truth", &c.truth)] {
                if let Some(r) = rig {
                    r.color
                        .validate()
                        .map_err(|e| invalid(field(&format!("{name}.color")), e))?;
                    r.ir.validate()
                        .map_err(|e| invalid(field(&format!("{name}.ir")), e))?;
                }
            }
        }
        Ok(())
    }

    pub fn camera(&self, i: usize) -> SimCamera {
        let c = &self.cameras[i];
        let pose = match &c.pose {
            Some(p) => p.to_transform(),
            None => orbit_pose(
                &Vector3::from(self.session.scan_center_m),
                c.azimuth_deg.unwrap_or(0.0).to_radians(),
                c.elevation_deg
                    .unwrap_or(DEFAULT_ELEVATION_DEG)
                    .to_radians(),
                c.distance_m.unwrap_or(DEFAULT_CAMERA_DISTANCE_M),
            ),
        };
        let mut cam = SimCamera::from_preset(c.id.as_str(), c.preset, pose);
        if let Some(n) = c.noise {
            cam.noise = n;
        }
        if let Some(r) = c.nominal {
            cam.nominal = r;
        }
        if let Some(r) = c.truth {
            cam.truth = r;
        }
        cam
    }

    pub fn mount_offset(&self) -> MountOffset {
        match &self.mount_offset {
            Some(p) => {
                let [r, pi, y] = p.rpy_deg.map(f64::to_radians);
                perturbed_offset(&self.board, &Vector3::from(p.translation_m), (r, pi, y))
            }
            None => default_mount_offset(&self.board),
        }
    }

    pub fn to_scene(&self) -> Result<SimScene, ConfigError> {
        self.validate()?;
        let cams = (0..self.cameras.len()).map(|i| self.camera(i)).collect();
        let scene = SimScene::new(cams, self.robot, self.mount_offset(), self.board, self.seed)
            .map_err(|e| invalid("cameras", e))?;
        Ok(if self.simulation.noiseless {
            scene.noiseless()
        } else {
            scene
        })
    }
}
