//! Pinhole cameras with Brown–Conrady distortion, depth back-projection and
//! the color↔IR registration of an RGB-D sensor.
//!
//! Pixel origin is the top-left corner, `u` grows rightward and `v` downward,
//! and pixel centers sit at integer coordinates.

use nalgebra::{Matrix2, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::RigidTransform;
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CameraError {
    #[error("point is behind the camera (z = {z:e} m)")]
    BehindCamera { z: f64 },
    #[error("undistortion did not converge within {iterations} iterations")]
    NoConvergence { iterations: usize },
    #[error("depth must be positive, got {0}")]
    NonPositiveDepth(f64),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
}

/// Minimum camera-frame depth accepted by [`project`].
pub const MIN_PROJECTION_DEPTH: f64 = 1e-9;
pub const UNDISTORT_MAX_ITERATIONS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pixel<T: Real> {
    pub u: T,
    pub v: T,
}

impl<T: Real> Pixel<T> {
    pub fn new(u: T, v: T) -> Self {
        Self { u, v }
    }

    pub fn distance(&self, other: &Self) -> T {
        ((self.u - other.u) * (self.u - other.u) + (self.v - other.v) * (self.v - other.v)).sqrt()
    }

    pub fn to_vector(self) -> Vector2<T> {
        Vector2::new(self.u, self.v)
    }
}

/// Focal lengths, principal point and lens distortion of one camera.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Intrinsics<T: Real> {
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
    #[serde(default)]
    pub skew: T,
    #[serde(default)]
    pub k1: T,
    #[serde(default)]
    pub k2: T,
    #[serde(default)]
    pub k3: T,
    #[serde(default)]
    pub p1: T,
    #[serde(default)]
    pub p2: T,
    pub width: u32,
    pub height: u32,
}

impl<T: Real> Intrinsics<T> {
    /// Distortion-free pinhole.
    pub fn pinhole(fx: T, fy: T, cx: T, cy: T, width: u32, height: u32) -> Self {
        Self {
            fx,
            fy,
            cx,
            cy,
            skew: T::zero(),
            k1: T::zero(),
            k2: T::zero(),
            k3: T::zero(),
            p1: T::zero(),
            p2: T::zero(),
            width,
            height,
        }
    }

    /// Pinhole from image size and full horizontal/vertical fields of view
    /// (radians), principal point at the image center.
    pub fn from_fov(width: u32, height: u32, hfov: T, vfov: T) -> Self {
        let two = T::lit(2.0);
        let w = T::lit(width as f64);
        let h = T::lit(height as f64);
        let fx = w / two / (hfov / two).tan();
        let fy = h / two / (vfov / two).tan();
        Self::pinhole(
            fx,
            fy,
            (w - T::one()) / two,
            (h - T::one()) / two,
            width,
            height,
        )
    }

    pub fn validate(&self) -> Result<(), CameraError> {
        let fields = [
            self.fx, self.fy, self.cx, self.cy, self.skew, self.k1, self.k2, self.k3, self.p1,
            self.p2,
        ];
        if !fields.iter().all(|v| v.is_finite()) {
            return Err(CameraError::InvalidIntrinsics(
                "non-finite parameter".into(),
            ));
        }
        if !(self.fx > T::zero() && self.fy > T::zero()) {
            return Err(CameraError::InvalidIntrinsics(
                "focal lengths must be positive".into(),
            ));
        }
        let w = T::lit(self.width as f64);
        let h = T::lit(self.height as f64);
        if !(self.cx >= T::zero() && self.cx < w && self.cy >= T::zero() && self.cy < h) {
            return Err(CameraError::InvalidIntrinsics(
                "principal point outside the image".into(),
            ));
        }
        Ok(())
    }

    pub fn with_distortion(mut self, k1: T, k2: T, k3: T, p1: T, p2: T) -> Self {
        self.k1 = k1;
        self.k2 = k2;
        self.k3 = k3;
        self.p1 = p1;
        self.p2 = p2;
        self
    }

    pub fn without_distortion(mut self) -> Self {
        self.k1 = T::zero();
        self.k2 = T::zero();
        self.k3 = T::zero();
        self.p1 = T::zero();
        self.p2 = T::zero();
        self
    }

    pub fn has_distortion(&self) -> bool {
        [self.k1, self.k2, self.k3, self.p1, self.p2]
            .iter()
            .any(|v| *v != T::zero())
    }

    pub fn contains(&self, px: &Pixel<T>) -> bool {
        let half = T::lit(0.5);
        px.u >= -half
            && px.v >= -half
            && px.u <= T::lit(self.width as f64) - half
            && px.v <= T::lit(self.height as f64) - half
    }

    pub fn center(&self) -> Pixel<T> {
        let two = T::lit(2.0);
        Pixel::new(
            (T::lit(self.width as f64) - T::one()) / two,
            (T::lit(self.height as f64) - T::one()) / two,
        )
    }

    /// Normalized image coordinates → distorted normalized coordinates.
    #[inline]
    pub fn distort(&self, x: T, y: T) -> (T, T) {
        let (d, _) = self.distort_with_jacobian(x, y);
        (d.x, d.y)
    }

    /// Distortion and its 2×2 Jacobian with respect to `(x, y)`.
    pub fn distort_with_jacobian(&self, x: T, y: T) -> (Vector2<T>, Matrix2<T>) {
        let two = T::lit(2.0);
        let three = T::lit(3.0);
        let r2 = x * x + y * y;
        let r4 = r2 * r2;
        let r6 = r4 * r2;
        let radial = T::one() + self.k1 * r2 + self.k2 * r4 + self.k3 * r6;
        // d(radial)/d(r²)
        let dradial = self.k1 + two * self.k2 * r2 + three * self.k3 * r4;
        let xd = x * radial + two * self.p1 * x * y + self.p2 * (r2 + two * x * x);
        let yd = y * radial + self.p1 * (r2 + two * y * y) + two * self.p2 * x * y;
        let dxx = radial + two * x * x * dradial + two * self.p1 * y + T::lit(6.0) * self.p2 * x;
        let dxy = two * x * y * dradial + two * self.p1 * x + two * self.p2 * y;
        let dyx = two * x * y * dradial + two * self.p1 * x + two * self.p2 * y;
        let dyy = radial + two * y * y * dradial + T::lit(6.0) * self.p1 * y + two * self.p2 * x;
        (Vector2::new(xd, yd), Matrix2::new(dxx, dxy, dyx, dyy))
    }

    /// Distorted normalized coordinates → pixel.
    #[inline]
    pub fn to_pixel(&self, xd: T, yd: T) -> Pixel<T> {
        Pixel::new(
            self.fx * xd + self.skew * yd + self.cx,
            self.fy * yd + self.cy,
        )
    }

    /// Pixel → distorted normalized coordinates.
    #[inline]
    pub fn from_pixel(&self, px: &Pixel<T>) -> (T, T) {
        let yd = (px.v - self.cy) / self.fy;
        let xd = (px.u - self.cx - self.skew * yd) / self.fx;
        (xd, yd)
    }

    /// Projects a camera-frame point.
    pub fn project_point(&self, p: &Vector3<T>) -> Result<Pixel<T>, CameraError> {
        if !(p.z > T::lit(MIN_PROJECTION_DEPTH)) {
            return Err(CameraError::BehindCamera {
                z: p.z.to_f64_lossy(),
            });
        }
        let x = p.x / p.z;
        let y = p.y / p.z;
        let (xd, yd) = self.distort(x, y);
        Ok(self.to_pixel(xd, yd))
    }

    pub fn cast<U: Real>(&self) -> Intrinsics<U> {
        use crate::scalar::cast;
        Intrinsics {
            fx: cast(self.fx),
            fy: cast(self.fy),
            cx: cast(self.cx),
            cy: cast(self.cy),
            skew: cast(self.skew),
            k1: cast(self.k1),
            k2: cast(self.k2),
            k3: cast(self.k3),
            p1: cast(self.p1),
            p2: cast(self.p2),
            width: self.width,
            height: self.height,
        }
    }
}

/// Global linear depth correction: `corrected = scale·measured + offset`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DepthModel<T: Real> {
    pub scale: T,
    /// Meters.
    pub offset: T,
}

impl<T: Real> Default for DepthModel<T> {
    fn default() -> Self {
        Self::identity()
    }
}

impl<T: Real> DepthModel<T> {
    pub fn identity() -> Self {
        Self {
            scale: T::one(),
            offset: T::zero(),
        }
    }

    pub fn correct(&self, measured: T) -> T {
        self.scale * measured + self.offset
    }

    /// The raw reading a sensor with this distortion reports for a true depth.
    pub fn distort(&self, true_depth: T) -> T {
        (true_depth - self.offset) / self.scale
    }
}

/// Color and IR cameras of one RGB-D sensor. The sensor frame is the color
/// camera frame; depth is measured in the IR frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(
    deny_unknown_fields,
    bound(
        serialize = "T: Real + Serialize",
        deserialize = "T: Real + Deserialize<'de>"
    )
)]
pub struct SensorRig<T: Real> {
    pub color: Intrinsics<T>,
    pub ir: Intrinsics<T>,
    pub color_from_ir: RigidTransform<T>,
    #[serde(default)]
    pub depth_model: DepthModel<T>,
}

impl<T: Real> SensorRig<T> {
    /// Camera-frame (color frame) point of an IR pixel with a raw depth
    /// reading.
    pub fn point_from_ir(&self, ir_px: &Pixel<T>, depth: T) -> Result<Vector3<T>, CameraError> {
        let p_ir = backproject(&self.ir, ir_px, depth, &self.depth_model)?;
        Ok(self.color_from_ir.apply(&p_ir))
    }
}

/// Projects a world point through `camera_from_world` and the intrinsics.
pub fn project<T: Real>(
    intr: &Intrinsics<T>,
    camera_from_world: &RigidTransform<T>,
    p: &Vector3<T>,
) -> Result<Pixel<T>, CameraError> {
    intr.project_point(&camera_from_world.apply(p))
}

/// Inverts the distortion map by Newton iteration, returning undistorted
/// normalized coordinates `(x, y)` with `z = 1`.
pub fn undistort<T: Real>(intr: &Intrinsics<T>, px: &Pixel<T>) -> Result<Vector2<T>, CameraError> {
    let (xd, yd) = intr.from_pixel(px);
    let target = Vector2::new(xd, yd);
    if !intr.has_distortion() {
        return Ok(target);
    }
    let tol = T::tolerance(1e-15);
    let mut x = target;
    for _ in 0..UNDISTORT_MAX_ITERATIONS {
        let (d, j) = intr.distort_with_jacobian(x.x, x.y);
        let r = target - d;
        let step = match j.try_inverse() {
            Some(ji) => ji * r,
            None => r * T::lit(0.5),
        };
        x += step;
        if !x.iter().all(|v| v.is_finite()) {
            break;
        }
        if step.norm() <= tol * (T::one() + x.norm()) {
            return Ok(x);
        }
    }
    Err(CameraError::NoConvergence {
        iterations: UNDISTORT_MAX_ITERATIONS,
    })
}

/// Camera-frame point on the undistorted ray through `px` at corrected
/// z-depth `model.correct(depth)`.
pub fn backproject<T: Real>(
    intr: &Intrinsics<T>,
    px: &Pixel<T>,
    depth: T,
    model: &DepthModel<T>,
) -> Result<Vector3<T>, CameraError> {
    if !(depth > T::zero()) {
        return Err(CameraError::NonPositiveDepth(depth.to_f64_lossy()));
    }
    let z = model.correct(depth);
    if !(z > T::zero()) {
        return Err(CameraError::NonPositiveDepth(z.to_f64_lossy()));
    }
    let n = undistort(intr, px)?;
    Ok(Vector3::new(n.x * z, n.y * z, z))
}

/// Color-image pixel of an IR pixel with a raw depth reading.
pub fn register_depth_to_color<T: Real>(
    rig: &SensorRig<T>,
    ir_px: &Pixel<T>,
    depth: T,
) -> Result<Pixel<T>, CameraError> {
    let p = rig.point_from_ir(ir_px, depth)?;
    rig.color.project_point(&p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn basic() -> Intrinsics<f64> {
        Intrinsics::pinhole(500.0, 500.0, 320.0, 240.0, 640, 480)
    }

    #[test]
    fn project_examples() {
        let k = basic();
        let id = RigidTransform::identity();
        let p = project(&k, &id, &Vector3::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!(p, Pixel::new(320.0, 240.0));
        let p = project(&k, &id, &Vector3::new(0.1, 0.0, 1.0)).unwrap();
        assert_relative_eq!(p.u, 370.0, epsilon = 1e-12);
        assert_relative_eq!(p.v, 240.0, epsilon = 1e-12);
        // Positive k1 pushes outward: u = 320 + 500·0.2·(1 + 0.1·0.04) = 420.4.
        let kd = k.with_distortion(0.1, 0.0, 0.0, 0.0, 0.0);
        let p = project(&kd, &id, &Vector3::new(0.2, 0.0, 1.0)).unwrap();
        assert!(p.u > 420.0);
        assert_relative_eq!(p.u, 420.4, epsilon = 1e-12);
    }

    #[test]
    fn project_behind_camera() {
        let k = basic();
        let id = RigidTransform::identity();
        assert!(matches!(
            project(&k, &id, &Vector3::new(0.0, 0.0, 0.0)),
            Err(CameraError::BehindCamera { .. })
        ));
        assert!(matches!(
            project(&k, &id, &Vector3::new(0.0, 0.0, -1.0)),
            Err(CameraError::BehindCamera { .. })
        ));
    }

    #[test]
    fn undistort_examples() {
        let k = basic();
        let n = undistort(&k, &Pixel::new(370.0, 190.0)).unwrap();
        assert_relative_eq!(n, Vector2::new(0.1, -0.1), epsilon = 1e-15);
        let kd = k.with_distortion(-0.2, 0.0, 0.0, 0.0, 0.0);
        let c = undistort(&kd, &Pixel::new(320.0, 240.0)).unwrap();
        assert_eq!(c, Vector2::zeros());
        for (u, v) in [(10.0, 20.0), (600.0, 450.0), (100.0, 400.0), (500.0, 30.0)] {
            let px = Pixel::new(u, v);
            let n = undistort(&kd, &px).unwrap();
            let back = kd.project_point(&Vector3::new(n.x, n.y, 1.0)).unwrap();
            assert!(back.distance(&px) < 1e-6);
        }
    }

    #[test]
    fn undistort_reports_no_convergence() {
        // x − 0.5·x³ = 1 sends Newton into the 1 → 0 → 1 cycle.
        let kd = basic().with_distortion(-0.5, 0.0, 0.0, 0.0, 0.0);
        assert!(matches!(
            undistort(&kd, &Pixel::new(820.0, 240.0)),
            Err(CameraError::NoConvergence { .. })
        ));
        assert!(undistort(&kd, &Pixel::new(f64::NAN, 240.0)).is_err());
    }

    #[test]
    fn backproject_examples() {
        let k = basic();
        let m = DepthModel::identity();
        assert_eq!(
            backproject(&k, &Pixel::new(320.0, 240.0), 1.0, &m).unwrap(),
            Vector3::new(0.0, 0.0, 1.0)
        );
        assert_relative_eq!(
            backproject(&k, &Pixel::new(370.0, 240.0), 1.0, &m).unwrap(),
            Vector3::new(0.1, 0.0, 1.0),
            epsilon = 1e-15
        );
        assert!(matches!(
            backproject(&k, &Pixel::new(1.0, 1.0), 0.0, &m),
            Err(CameraError::NonPositiveDepth(_))
        ));
        let scaled = DepthModel {
            scale: 1.1,
            offset: -0.05,
        };
        assert_relative_eq!(
            backproject(&k, &Pixel::new(320.0, 240.0), 1.0, &scaled)
                .unwrap()
                .z,
            1.05,
            epsilon = 1e-15
        );
    }

    #[test]
    fn backproject_project_grid_round_trip() {
        let k = basic().with_distortion(-0.15, 0.04, 0.0, 0.001, -0.0005);
        let m = DepthModel::identity();
        for i in 0..=16 {
            for j in 0..=12 {
                let px = Pixel::new(40.0 + i as f64 * 35.0, 30.0 + j as f64 * 35.0);
                let p = backproject(&k, &px, 1.7, &m).unwrap();
                assert!(k.project_point(&p).unwrap().distance(&px) < 1e-6);
            }
        }
    }

    fn rig_identity() -> SensorRig<f64> {
        SensorRig {
            color: basic(),
            ir: basic(),
            color_from_ir: RigidTransform::identity(),
            depth_model: DepthModel::identity(),
        }
    }

    #[test]
    fn registration_examples() {
        let rig = rig_identity();
        let px = Pixel::new(123.0, 321.0);
        assert!(
            register_depth_to_color(&rig, &px, 2.0)
                .unwrap()
                .distance(&px)
                < 1e-12
        );

        let baseline = SensorRig {
            color_from_ir: RigidTransform::from_translation(Vector3::new(0.052, 0.0, 0.0)),
            ..rig
        };
        let near = register_depth_to_color(&baseline, &px, 0.5).unwrap();
        let far = register_depth_to_color(&baseline, &px, 4.0).unwrap();
        // Offset is fx·b/z.
        assert_relative_eq!(near.u - px.u, 500.0 * 0.052 / 0.5, epsilon = 1e-9);
        assert!((far.u - px.u).abs() < (near.u - px.u).abs());

        let inverse = SensorRig {
            color_from_ir: baseline.color_from_ir.inverse(),
            ..rig
        };
        let z_color = baseline.point_from_ir(&px, 1.3).unwrap().z;
        let back =
            register_depth_to_color(&inverse, &near_at(&baseline, &px, 1.3), z_color).unwrap();
        assert!(back.distance(&px) < 1e-6);
    }

    fn near_at(rig: &SensorRig<f64>, px: &Pixel<f64>, d: f64) -> Pixel<f64> {
        register_depth_to_color(rig, px, d).unwrap()
    }

    #[test]
    fn serde_field_names() {
        let k = basic().with_distortion(0.1, 0.2, 0.3, 0.4, 0.5);
        let v = serde_json::to_value(k).unwrap();
        for key in [
            "fx", "fy", "cx", "cy", "skew", "k1", "k2", "k3", "p1", "p2", "width", "height",
        ] {
            assert!(v.get(key).is_some(), "{key}");
        }
        let t: Intrinsics<f64> =
            toml::from_str("fx = 1.0\nfy = 2.0\ncx = 3.0\ncy = 4.0\nwidth = 10\nheight = 10\n")
                .unwrap();
        assert_eq!(t.skew, 0.0);
        assert!(toml::from_str::<Intrinsics<f64>>(
            "fx = 1.0\nfy = 2.0\ncx = 3.0\ncy = 4.0\nwidth = 10\nheight = 10\nk4 = 1.0\n"
        )
        .is_err());
    }

    #[test]
    fn validation() {
        assert!(basic().validate().is_ok());
        let mut k = basic();
        k.fx = -1.0;
        assert!(k.validate().is_err());
        let mut k = basic();
        k.cx = 640.0;
        assert!(k.validate().is_err());
    }

    #[test]
    fn generic_f32() {
        let k = Intrinsics::<f32>::pinhole(500.0, 500.0, 320.0, 240.0, 640, 480)
            .with_distortion(-0.2, 0.0, 0.0, 0.0, 0.0);
        let n = undistort(&k, &Pixel::new(600.0, 450.0)).unwrap();
        let back = k.project_point(&Vector3::new(n.x, n.y, 1.0)).unwrap();
        assert!(back.distance(&Pixel::new(600.0, 450.0)) < 1e-2);
    }

    proptest! {
        #[test]
        fn projection_is_ray_invariant(x in -0.5..0.5f64, y in -0.4..0.4f64, z in 0.3..5.0f64, lambda in 0.1..10.0f64) {
            let k = basic().with_distortion(0.05, -0.01, 0.0, 0.001, 0.002);
            let p = Vector3::new(x, y, z);
            let a = k.project_point(&p).unwrap();
            let b = k.project_point(&(p * lambda)).unwrap();
            prop_assert!(a.distance(&b) < 1e-9);
        }

        #[test]
        fn distortion_round_trip_central_region(k1 in -0.3..0.3f64, fu in 0.1..0.9f64, fv in 0.1..0.9f64) {
            let k = basic().with_distortion(k1, 0.0, 0.0, 0.0, 0.0);
            let px = Pixel::new(fu * 640.0, fv * 480.0);
            let n = undistort(&k, &px).unwrap();
            let back = k.project_point(&Vector3::new(n.x, n.y, 1.0)).unwrap();
            prop_assert!(back.distance(&px) < 1e-6);
        }

        #[test]
        fn backproject_inverts_project(x in -0.5..0.5f64, y in -0.4..0.4f64, z in 0.3..5.0f64) {
            let k = basic().with_distortion(-0.1, 0.02, 0.0, 0.0005, -0.0003);
            let p = Vector3::new(x, y, z);
            let px = k.project_point(&p).unwrap();
            let q = backproject(&k, &px, z, &DepthModel::identity()).unwrap();
            prop_assert!((q - p).norm() < 1e-9);
        }

        #[test]
        fn registration_offset_shrinks_with_depth(u in 50.0..590.0f64, v in 50.0..430.0f64, d in 0.5..4.0f64, dd in 0.01..0.5f64) {
            let rig = SensorRig { color_from_ir: RigidTransform::from_translation(Vector3::new(0.052, 0.0, 0.0)), ..rig_identity() };
            let px = Pixel::new(u, v);
            let a = register_depth_to_color(&rig, &px, d).unwrap().distance(&px);
            let b = register_depth_to_color(&rig, &px, d + dd).unwrap().distance(&px);
            prop_assert!(b <= a + 1e-12);
        }
    }
}
