//! Automatic robot-to-RGB-D-camera calibration.

// `!(x > 0.0)` rejects NaN as well
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod camera;
pub mod config;
pub mod experiment;
pub mod geometry;
pub mod handeye;
pub mod orchestrator;
pub mod planner;
pub mod scalar;
pub mod sim;
pub mod target;
pub mod zhang;

use serde::{Deserialize, Serialize};

/// Identifier of a sensor, as configured.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CameraId(pub String);

impl From<&str> for CameraId {
    fn from(s: &str) -> Self {
        CameraId(s.to_string())
    }
}

impl From<String> for CameraId {
    fn from(s: String) -> Self {
        CameraId(s)
    }
}

impl std::fmt::Display for CameraId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

pub type RigidTransform = geometry::RigidTransform<f64>;
pub type PointSet3 = geometry::PointSet3<f64>;
pub type Pixel = camera::Pixel<f64>;
pub type Intrinsics = camera::Intrinsics<f64>;
pub type DepthModel = camera::DepthModel<f64>;
pub type SensorRig = camera::SensorRig<f64>;

pub type RigidTransformF32 = geometry::RigidTransform<f32>;
pub type PointSet3F32 = geometry::PointSet3<f32>;
pub type PixelF32 = camera::Pixel<f32>;
pub type IntrinsicsF32 = camera::Intrinsics<f32>;
