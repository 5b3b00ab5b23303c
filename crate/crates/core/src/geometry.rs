//! Rigid-body transforms and 3D-3D point-set registration.
//!
//! [`RigidTransform`] maps points `p ↦ R·p + t`. Composition follows the
//! usual frame-naming rule: `a_from_b.compose(&b_from_c)` is `a_from_c`.
//!
//! Registration fits a rotation-constrained (SE(3)) model with the SVD-based
//! orthogonal Procrustes solution and a determinant correction, optionally
//! wrapped in RANSAC.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::Mul;

use nalgebra::{Matrix3, Matrix4, Rotation3, Unit, UnitQuaternion, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("too few correspondences: need {needed}, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("point sets differ in length ({src} vs {dst})")]
    LengthMismatch { src: usize, dst: usize },
    #[error("point id {0} has no counterpart in the destination set")]
    IdMismatch(PointId),
    #[error("duplicate point id {0}")]
    DuplicateId(PointId),
    #[error("degenerate geometry: source points are collinear or coincident")]
    DegenerateGeometry,
    #[error(
        "no consensus: best inlier fraction {inlier_fraction:.3} below required {required:.3}"
    )]
    NoConsensus { inlier_fraction: f64, required: f64 },
    #[error("matrix is not a rigid transform: {0}")]
    NotRigid(String),
}

/// Stable identifier of a 3D point inside a correspondence set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PointId(pub u64);

impl std::fmt::Display for PointId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Rotation plus translation (meters).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(
    try_from = "RigidTransformRepr<T>",
    into = "RigidTransformRepr<T>",
    bound(
        serialize = "T: Real + Serialize",
        deserialize = "T: Real + Deserialize<'de>"
    )
)]
pub struct RigidTransform<T: Real> {
    rotation: Matrix3<T>,
    translation: Vector3<T>,
}

/// Row-major wire form.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RigidTransformRepr<T> {
    rotation: [[T; 3]; 3],
    translation: [T; 3],
}

impl<T: Real> From<RigidTransform<T>> for RigidTransformRepr<T> {
    fn from(t: RigidTransform<T>) -> Self {
        let r = &t.rotation;
        RigidTransformRepr {
            rotation: [
                [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
                [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
                [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
            ],
            translation: [t.translation.x, t.translation.y, t.translation.z],
        }
    }
}

impl<T: Real> TryFrom<RigidTransformRepr<T>> for RigidTransform<T> {
    type Error = GeometryError;

    fn try_from(r: RigidTransformRepr<T>) -> Result<Self, Self::Error> {
        let rot = Matrix3::from_fn(|i, j| r.rotation[i][j]);
        let t = Vector3::new(r.translation[0], r.translation[1], r.translation[2]);
        RigidTransform::try_new(rot, t, 1e-6)
    }
}

impl<T: Real> Default for RigidTransform<T> {
    fn default() -> Self {
        Self::identity()
    }
}

impl<T: Real> RigidTransform<T> {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_translation(t: Vector3<T>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    /// Builds a transform, projecting `rotation` onto the nearest proper
    /// rotation matrix.
    pub fn new(rotation: Matrix3<T>, translation: Vector3<T>) -> Self {
        Self {
            rotation: nearest_rotation(&rotation),
            translation,
        }
    }

    /// Builds a transform from a matrix that must already be a rotation
    /// within `tol` (elementwise on `RᵀR − I` and on `det R − 1`). The matrix
    /// is stored as given.
    pub fn try_new(
        rotation: Matrix3<T>,
        translation: Vector3<T>,
        tol: f64,
    ) -> Result<Self, GeometryError> {
        let tol = T::tolerance(tol);
        let err = (rotation.transpose() * rotation - Matrix3::identity())
            .abs()
            .max();
        let det = rotation.determinant();
        if !(err <= tol) || !((det - T::one()).abs() <= tol) {
            return Err(GeometryError::NotRigid(format!(
                "orthonormality error {:e}, determinant {:e}",
                err.to_f64_lossy(),
                det.to_f64_lossy()
            )));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NotRigid("non-finite translation".into()));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    /// Stores `rotation` as given; callers guarantee it is a rotation.
    pub(crate) fn from_parts(rotation: Matrix3<T>, translation: Vector3<T>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_rotation(rotation: Rotation3<T>) -> Self {
        Self {
            rotation: rotation.into_inner(),
            translation: Vector3::zeros(),
        }
    }

    /// Rotation by `angle` radians about `axis`.
    pub fn from_axis_angle(axis: &Vector3<T>, angle: T) -> Self {
        Self::from_rotation(Rotation3::from_axis_angle(
            &Unit::new_normalize(*axis),
            angle,
        ))
    }

    /// Exponential map of a rotation vector (axis × angle) plus translation.
    pub fn from_scaled_axis(omega: Vector3<T>, translation: Vector3<T>) -> Self {
        Self {
            rotation: Rotation3::new(omega).into_inner(),
            translation,
        }
    }

    /// Extrinsic X-Y-Z: roll about X first, then pitch about Y, then yaw about
    /// Z, i.e. `R = Rz(yaw)·Ry(pitch)·Rx(roll)`.
    pub fn from_rpy(roll: T, pitch: T, yaw: T) -> Self {
        let rx = Rotation3::from_axis_angle(&Vector3::x_axis(), roll);
        let ry = Rotation3::from_axis_angle(&Vector3::y_axis(), pitch);
        let rz = Rotation3::from_axis_angle(&Vector3::z_axis(), yaw);
        Self::from_rotation(rz * ry * rx)
    }

    pub fn rotation(&self) -> &Matrix3<T> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<T> {
        &self.translation
    }

    pub fn with_translation(mut self, t: Vector3<T>) -> Self {
        self.translation = t;
        self
    }

    /// `self ∘ other`: maps `p ↦ self(other(p))`.
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `R·p + t`.
    #[inline]
    pub fn apply(&self, p: &Vector3<T>) -> Vector3<T> {
        self.rotation * p + self.translation
    }

    /// Rotates a direction (no translation).
    #[inline]
    pub fn apply_vector(&self, v: &Vector3<T>) -> Vector3<T> {
        self.rotation * v
    }

    /// Inverse of [`Self::from_rpy`]; pitch is returned in `[−π/2, π/2]`.
    pub fn to_rpy(&self) -> (T, T, T) {
        let r = &self.rotation;
        let sp = -r[(2, 0)];
        let sp = sp.clamp(-T::one(), T::one());
        let pitch = sp.asin();
        let roll = r[(2, 1)].atan2(r[(2, 2)]);
        let yaw = r[(1, 0)].atan2(r[(0, 0)]);
        (roll, pitch, yaw)
    }

    /// Rotation vector (log map of the rotation part).
    pub fn scaled_axis(&self) -> Vector3<T> {
        rotation_log(&self.rotation)
    }

    /// Rotation angle in `[0, π]`.
    pub fn rotation_angle(&self) -> T {
        rotation_log(&self.rotation).norm()
    }

    /// Homogeneous 4×4 matrix.
    pub fn to_matrix4(&self) -> Matrix4<T> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Row-major 4×4 array form.
    pub fn to_rows(&self) -> [[T; 4]; 4] {
        let m = self.to_matrix4();
        let mut out = [[T::zero(); 4]; 4];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = m[(i, j)];
            }
        }
        out
    }

    /// Relative motion `self⁻¹ ∘ other` split into rotation angle (rad) and
    /// translation distance.
    pub fn distance_to(&self, other: &Self) -> (T, T) {
        let d = self.inverse().compose(other);
        (d.rotation_angle(), d.translation.norm())
    }

    pub fn is_finite(&self) -> bool {
        self.rotation
            .iter()
            .chain(self.translation.iter())
            .all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> RigidTransform<U> {
        RigidTransform {
            rotation: self.rotation.map(crate::scalar::cast),
            translation: self.translation.map(crate::scalar::cast),
        }
    }
}

impl<T: Real> Mul for RigidTransform<T> {
    type Output = RigidTransform<T>;
    fn mul(self, rhs: Self) -> Self::Output {
        self.compose(&rhs)
    }
}

impl<T: Real> Mul<&RigidTransform<T>> for &RigidTransform<T> {
    type Output = RigidTransform<T>;
    fn mul(self, rhs: &RigidTransform<T>) -> Self::Output {
        self.compose(rhs)
    }
}

pub fn compose<T: Real>(a: &RigidTransform<T>, b: &RigidTransform<T>) -> RigidTransform<T> {
    a.compose(b)
}

pub fn apply<T: Real>(t: &RigidTransform<T>, p: &Vector3<T>) -> Vector3<T> {
    t.apply(p)
}

pub fn rotation_from_rpy<T: Real>(roll: T, pitch: T, yaw: T) -> RigidTransform<T> {
    RigidTransform::from_rpy(roll, pitch, yaw)
}

/// Log map of a rotation matrix. Goes through the quaternion so matrices
/// with rounding drift near the identity stay finite.
pub fn rotation_log<T: Real>(m: &Matrix3<T>) -> Vector3<T> {
    let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*m));
    let (mut v, mut w) = (q.imag(), q.w);
    if w < T::zero() {
        v = -v;
        w = -w;
    }
    let s = v.norm();
    if s <= T::default_epsilon() {
        return v * T::lit(2.0);
    }
    v * (T::lit(2.0) * s.atan2(w) / s)
}

/// Nearest proper rotation (Frobenius sense) via SVD.
pub fn nearest_rotation<T: Real>(m: &Matrix3<T>) -> Matrix3<T> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("u requested");
    let vt = svd.v_t.expect("v_t requested");
    let d = (u * vt).determinant();
    let s = Matrix3::from_diagonal(&Vector3::new(
        T::one(),
        T::one(),
        if d < T::zero() { -T::one() } else { T::one() },
    ));
    u * s * vt
}

/// Ordered 3D points with unique identifiers.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(bound(
    serialize = "T: Real + Serialize",
    deserialize = "T: Real + Deserialize<'de>"
))]
pub struct PointSet3<T: Real> {
    points: Vec<[T; 3]>,
    ids: Vec<PointId>,
}

impl<T: Real> PointSet3<T> {
    pub fn new() -> Self {
        Self {
            points: Vec::new(),
            ids: Vec::new(),
        }
    }

    pub fn from_points(points: Vec<Vector3<T>>, ids: Vec<PointId>) -> Result<Self, GeometryError> {
        if points.len() != ids.len() {
            return Err(GeometryError::LengthMismatch {
                src: points.len(),
                dst: ids.len(),
            });
        }
        let mut seen = BTreeSet::new();
        for id in &ids {
            if !seen.insert(*id) {
                return Err(GeometryError::DuplicateId(*id));
            }
        }
        Ok(Self {
            points: points.iter().map(|p| [p.x, p.y, p.z]).collect(),
            ids,
        })
    }

    /// Points with ids `0..n`.
    pub fn from_sequential(points: Vec<Vector3<T>>) -> Self {
        let ids = (0..points.len() as u64).map(PointId).collect();
        Self::from_points(points, ids).expect("sequential ids are unique")
    }

    pub fn push(&mut self, id: PointId, p: Vector3<T>) -> Result<(), GeometryError> {
        if self.ids.contains(&id) {
            return Err(GeometryError::DuplicateId(id));
        }
        self.ids.push(id);
        self.points.push([p.x, p.y, p.z]);
        Ok(())
    }

    /// Appends without the uniqueness scan; callers guarantee fresh ids.
    pub(crate) fn push_unchecked(&mut self, id: PointId, p: Vector3<T>) {
        self.ids.push(id);
        self.points.push([p.x, p.y, p.z]);
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn ids(&self) -> &[PointId] {
        &self.ids
    }

    pub fn point(&self, i: usize) -> Vector3<T> {
        let p = self.points[i];
        Vector3::new(p[0], p[1], p[2])
    }

    pub fn iter(&self) -> impl Iterator<Item = (PointId, Vector3<T>)> + '_ {
        self.ids
            .iter()
            .zip(&self.points)
            .map(|(id, p)| (*id, Vector3::new(p[0], p[1], p[2])))
    }

    pub fn transformed(&self, t: &RigidTransform<T>) -> Self {
        Self {
            points: self
                .iter()
                .map(|(_, p)| {
                    let q = t.apply(&p);
                    [q.x, q.y, q.z]
                })
                .collect(),
            ids: self.ids.clone(),
        }
    }

    /// Subset with the given ids, in the order given.
    pub fn select(&self, ids: &[PointId]) -> Self {
        let index: BTreeMap<PointId, usize> = self
            .ids
            .iter()
            .enumerate()
            .map(|(i, id)| (*id, i))
            .collect();
        let mut out = Self::new();
        for id in ids {
            if let Some(&i) = index.get(id) {
                out.push_unchecked(*id, self.point(i));
            }
        }
        out
    }
}

/// RANSAC configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RansacParams {
    pub max_iterations: usize,
    /// Meters.
    pub inlier_threshold: f64,
    pub min_inlier_fraction: f64,
    pub seed: u64,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self {
            max_iterations: 500,
            inlier_threshold: 0.010,
            min_inlier_fraction: 0.5,
            seed: 0,
        }
    }
}

impl RansacParams {
    pub fn validate(&self) -> Result<(), String> {
        if self.max_iterations < 1 {
            return Err("max_iterations must be at least 1".into());
        }
        if !(self.inlier_threshold > 0.0) {
            return Err("inlier_threshold must be positive".into());
        }
        if !(self.min_inlier_fraction > 0.0 && self.min_inlier_fraction <= 1.0) {
            return Err("min_inlier_fraction must lie in (0, 1]".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RigidFit<T: Real> {
    pub transform: RigidTransform<T>,
    /// Root-mean-square of `|dst − T(src)|`, meters.
    pub rms_residual: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RansacFit<T: Real> {
    pub transform: RigidTransform<T>,
    /// Sorted ascending.
    pub inlier_ids: Vec<PointId>,
    /// RMS over the inliers.
    pub rms_residual: T,
    pub total: usize,
}

/// Pairs `src` and `dst` by id, returning matched coordinates in src order.
fn match_by_id<T: Real>(
    src: &PointSet3<T>,
    dst: &PointSet3<T>,
) -> Result<Vec<(PointId, Vector3<T>, Vector3<T>)>, GeometryError> {
    if src.len() != dst.len() {
        return Err(GeometryError::LengthMismatch {
            src: src.len(),
            dst: dst.len(),
        });
    }
    if src.ids == dst.ids {
        return Ok(src
            .iter()
            .zip(dst.iter())
            .map(|((id, a), (_, b))| (id, a, b))
            .collect());
    }
    let index: BTreeMap<PointId, usize> =
        dst.ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();
    src.iter()
        .map(|(id, a)| {
            index
                .get(&id)
                .map(|&j| (id, a, dst.point(j)))
                .ok_or(GeometryError::IdMismatch(id))
        })
        .collect()
}

fn centroid<T: Real>(pts: impl Iterator<Item = Vector3<T>>) -> Vector3<T> {
    let mut sum = Vector3::zeros();
    let mut n = 0usize;
    for p in pts {
        sum += p;
        n += 1;
    }
    sum / T::lit(n as f64)
}

/// Singular values of the centered point cloud, descending.
pub fn spread_singular_values<T: Real>(pts: &[Vector3<T>]) -> Vector3<T> {
    let c = centroid(pts.iter().copied());
    let mut scatter = Matrix3::zeros();
    for p in pts {
        let d = p - c;
        scatter += d * d.transpose();
    }
    let mut ev: Vec<T> = scatter
        .symmetric_eigenvalues()
        .iter()
        .map(|v| v.max(T::zero()).sqrt())
        .collect();
    ev.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    Vector3::new(ev[0], ev[1], ev[2])
}

/// Collinear or coincident within relative tolerance `1e-9`.
fn is_degenerate<T: Real>(pts: &[Vector3<T>]) -> bool {
    let sv = spread_singular_values(pts);
    !(sv[0] > T::zero()) || sv[1] < T::tolerance(1e-9) * sv[0]
}

/// Least-squares rigid fit on already paired points.
fn fit_pairs<T: Real>(
    src: &[Vector3<T>],
    dst: &[Vector3<T>],
) -> Result<RigidTransform<T>, GeometryError> {
    if src.len() < 3 {
        return Err(GeometryError::TooFewPoints {
            needed: 3,
            got: src.len(),
        });
    }
    if is_degenerate(src) {
        return Err(GeometryError::DegenerateGeometry);
    }
    let cs = centroid(src.iter().copied());
    let cd = centroid(dst.iter().copied());
    let mut h = Matrix3::zeros();
    for (a, b) in src.iter().zip(dst) {
        h += (a - cs) * (b - cd).transpose();
    }
    let svd = h.svd(true, true);
    let u = svd.u.ok_or(GeometryError::DegenerateGeometry)?;
    let vt = svd.v_t.ok_or(GeometryError::DegenerateGeometry)?;
    let v = vt.transpose();
    let d = (v * u.transpose()).determinant();
    let s = Matrix3::from_diagonal(&Vector3::new(
        T::one(),
        T::one(),
        if d < T::zero() { -T::one() } else { T::one() },
    ));
    let r = v * s * u.transpose();
    let t = cd - r * cs;
    Ok(RigidTransform {
        rotation: r,
        translation: t,
    })
}

fn rms<T: Real>(t: &RigidTransform<T>, src: &[Vector3<T>], dst: &[Vector3<T>]) -> T {
    if src.is_empty() {
        return T::zero();
    }
    let sse = src.iter().zip(dst).fold(T::zero(), |acc, (a, b)| {
        acc + (b - t.apply(a)).norm_squared()
    });
    (sse / T::lit(src.len() as f64)).sqrt()
}

/// Least-squares rigid transform mapping `src` onto `dst` (matched by id).
pub fn estimate_rigid<T: Real>(
    src: &PointSet3<T>,
    dst: &PointSet3<T>,
) -> Result<RigidFit<T>, GeometryError> {
    let pairs = match_by_id(src, dst)?;
    let (a, b): (Vec<_>, Vec<_>) = pairs.into_iter().map(|(_, a, b)| (a, b)).unzip();
    let transform = fit_pairs(&a, &b)?;
    let rms_residual = rms(&transform, &a, &b);
    Ok(RigidFit {
        transform,
        rms_residual,
    })
}

/// RANSAC-robustified [`estimate_rigid`]. Minimal samples of three points; the
/// best consensus set is refit (in ascending id order) until it stops
/// changing. Bit-reproducible for a given seed.
pub fn estimate_rigid_ransac<T: Real>(
    src: &PointSet3<T>,
    dst: &PointSet3<T>,
    params: &RansacParams,
) -> Result<RansacFit<T>, GeometryError> {
    let mut pairs = match_by_id(src, dst)?;
    let n = pairs.len();
    if n < 3 {
        return Err(GeometryError::TooFewPoints { needed: 3, got: n });
    }
    // Scoring does not depend on input order once sorted by id.
    pairs.sort_by_key(|(id, _, _)| *id);
    let a: Vec<Vector3<T>> = pairs.iter().map(|p| p.1).collect();
    let b: Vec<Vector3<T>> = pairs.iter().map(|p| p.2).collect();
    let thr2 = T::lit(params.inlier_threshold * params.inlier_threshold);

    let score = |t: &RigidTransform<T>| -> (Vec<usize>, T) {
        let mut inl = Vec::new();
        let mut sse = T::zero();
        for i in 0..n {
            let r2 = (b[i] - t.apply(&a[i])).norm_squared();
            if r2 <= thr2 {
                inl.push(i);
                sse += r2;
            }
        }
        (inl, sse)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut best: Option<(Vec<usize>, T)> = None;
    for _ in 0..params.max_iterations.max(1) {
        let idx = sample(&mut rng, n, 3);
        let sa: Vec<_> = idx.iter().map(|i| a[i]).collect();
        let sb: Vec<_> = idx.iter().map(|i| b[i]).collect();
        let Ok(model) = fit_pairs(&sa, &sb) else {
            continue;
        };
        let (inl, sse) = score(&model);
        let better = match &best {
            None => true,
            Some((bi, bs)) => inl.len() > bi.len() || (inl.len() == bi.len() && sse < *bs),
        };
        if better {
            best = Some((inl, sse));
        }
    }

    let Some((mut inliers, _)) = best else {
        return Err(GeometryError::NoConsensus {
            inlier_fraction: 0.0,
            required: params.min_inlier_fraction,
        });
    };
    let mut model = None;
    for _ in 0..20 {
        let sa: Vec<_> = inliers.iter().map(|&i| a[i]).collect();
        let sb: Vec<_> = inliers.iter().map(|&i| b[i]).collect();
        let m = match fit_pairs(&sa, &sb) {
            Ok(m) => m,
            Err(_) => break,
        };
        let (next, _) = score(&m);
        model = Some(m);
        if next == inliers || next.len() < 3 {
            break;
        }
        inliers = next;
    }
    let fraction = inliers.len() as f64 / n as f64;
    let Some(transform) = model else {
        return Err(GeometryError::NoConsensus {
            inlier_fraction: fraction,
            required: params.min_inlier_fraction,
        });
    };
    if fraction < params.min_inlier_fraction {
        return Err(GeometryError::NoConsensus {
            inlier_fraction: fraction,
            required: params.min_inlier_fraction,
        });
    }
    let sa: Vec<_> = inliers.iter().map(|&i| a[i]).collect();
    let sb: Vec<_> = inliers.iter().map(|&i| b[i]).collect();
    Ok(RansacFit {
        rms_residual: rms(&transform, &sa, &sb),
        inlier_ids: inliers.iter().map(|&i| pairs[i].0).collect(),
        transform,
        total: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};
    use std::f64::consts::FRAC_PI_2;

    type T64 = RigidTransform<f64>;

    fn random_transform(rng: &mut ChaCha8Rng) -> T64 {
        let w = Vector3::new(
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
        );
        let t = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        T64::from_scaled_axis(w, t)
    }

    fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vector3<f64>> {
        (0..n)
            .map(|_| {
                Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                )
            })
            .collect()
    }

    fn assert_transform_eq(a: &T64, b: &T64, tol: f64) {
        assert_relative_eq!(a.rotation(), b.rotation(), epsilon = tol);
        assert_relative_eq!(a.translation(), b.translation(), epsilon = tol);
    }

    #[test]
    fn compose_identity_and_inverse() {
        let id = T64::identity();
        assert_eq!(id.compose(&id), id);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let t = random_transform(&mut rng);
            assert_transform_eq(&t.compose(&t.inverse()), &id, 1e-12);
            assert_transform_eq(&t.inverse().compose(&t), &id, 1e-12);
        }
    }

    #[test]
    fn compose_quarter_turns() {
        let rz = T64::from_rpy(0.0, 0.0, FRAC_PI_2);
        let p = rz.compose(&rz).apply(&Vector3::x());
        // Direct product of the two z-rotation matrices.
        let m = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        let oracle = m * m * Vector3::x();
        assert_relative_eq!(p, oracle, epsilon = 1e-15);
        assert_relative_eq!(p, Vector3::new(-1.0, 0.0, 0.0), epsilon = 1e-15);
    }

    #[test]
    fn apply_examples() {
        let p = Vector3::new(1.0, 2.0, 3.0);
        assert_eq!(T64::identity().apply(&p), p);
        let t = T64::from_translation(Vector3::new(0.1, 0.0, 0.0));
        assert_eq!(t.apply(&Vector3::zeros()), Vector3::new(0.1, 0.0, 0.0));
        let rt = T64::from_rpy(0.0, 0.0, FRAC_PI_2).with_translation(Vector3::new(1.0, 0.0, 0.0));
        assert_relative_eq!(
            rt.apply(&Vector3::x()),
            Vector3::new(1.0, 1.0, 0.0),
            epsilon = 1e-15
        );
    }

    #[test]
    fn rpy_examples_and_order() {
        assert_eq!(T64::from_rpy(0.0, 0.0, 0.0), T64::identity());
        let r = T64::from_rpy(0.0, 0.0, std::f64::consts::PI);
        assert_relative_eq!(
            r.apply(&Vector3::x()),
            Vector3::new(-1.0, 0.0, 0.0),
            epsilon = 1e-15
        );
        // Extrinsic XYZ: roll is applied first.
        let (roll, pitch, yaw): (f64, f64, f64) = (0.3, -0.2, 1.1);
        let rx = Matrix3::new(
            1.0,
            0.0,
            0.0,
            0.0,
            roll.cos(),
            -roll.sin(),
            0.0,
            roll.sin(),
            roll.cos(),
        );
        let ry = Matrix3::new(
            pitch.cos(),
            0.0,
            pitch.sin(),
            0.0,
            1.0,
            0.0,
            -pitch.sin(),
            0.0,
            pitch.cos(),
        );
        let rz = Matrix3::new(
            yaw.cos(),
            -yaw.sin(),
            0.0,
            yaw.sin(),
            yaw.cos(),
            0.0,
            0.0,
            0.0,
            1.0,
        );
        assert_relative_eq!(
            *T64::from_rpy(roll, pitch, yaw).rotation(),
            rz * ry * rx,
            epsilon = 1e-15
        );
    }

    #[test]
    fn serde_rejects_non_rotation() {
        let bad = r#"{"rotation":[[2,0,0],[0,1,0],[0,0,1]],"translation":[0,0,0]}"#;
        assert!(serde_json::from_str::<T64>(bad).is_err());
        let t = T64::from_rpy(0.1, 0.2, 0.3).with_translation(Vector3::new(1.0, 2.0, 3.0));
        let back: T64 = serde_json::from_str(&serde_json::to_string(&t).unwrap()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn estimate_identity_on_equal_sets() {
        let pts = vec![
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
            Vector3::new(0.3, 0.2, 1.0),
        ];
        let s = PointSet3::from_sequential(pts);
        let fit = estimate_rigid(&s, &s).unwrap();
        assert_transform_eq(&fit.transform, &T64::identity(), 1e-12);
        assert!(fit.rms_residual < 1e-12);
    }

    #[test]
    fn estimate_recovers_forward_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let t0 = random_transform(&mut rng);
            let src = PointSet3::from_sequential(random_points(&mut rng, 10));
            let dst = src.transformed(&t0);
            let fit = estimate_rigid(&src, &dst).unwrap();
            assert_transform_eq(&fit.transform, &t0, 1e-9);
        }
    }

    #[test]
    fn estimate_planar_points_is_not_degenerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t0 = random_transform(&mut rng);
        let pts: Vec<_> = (0..6)
            .flat_map(|i| (0..4).map(move |j| Vector3::new(i as f64 * 0.03, j as f64 * 0.03, 0.0)))
            .collect();
        let src = PointSet3::from_sequential(pts);
        let fit = estimate_rigid(&src, &src.transformed(&t0)).unwrap();
        assert_transform_eq(&fit.transform, &t0, 1e-9);
    }

    #[test]
    fn estimate_matches_by_id_not_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let t0 = random_transform(&mut rng);
        let pts = random_points(&mut rng, 8);
        let src = PointSet3::from_sequential(pts.clone());
        let ids: Vec<_> = (0..8u64).rev().map(PointId).collect();
        let moved: Vec<_> = pts.iter().rev().map(|p| t0.apply(p)).collect();
        let dst = PointSet3::from_points(moved, ids).unwrap();
        let fit = estimate_rigid(&src, &dst).unwrap();
        assert_transform_eq(&fit.transform, &t0, 1e-9);
    }

    #[test]
    fn estimate_noise_monte_carlo() {
        // Translation error for 50 points with 1 mm noise, averaged over seeds.
        let noise = Normal::new(0.0, 1e-3).unwrap();
        let mut errs = Vec::new();
        for seed in 0..40 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let t0 = random_transform(&mut rng);
            let src = PointSet3::from_sequential(random_points(&mut rng, 50));
            let noisy: Vec<_> = src
                .iter()
                .map(|(_, p)| {
                    t0.apply(&p)
                        + Vector3::new(
                            noise.sample(&mut rng),
                            noise.sample(&mut rng),
                            noise.sample(&mut rng),
                        )
                })
                .collect();
            let dst = PointSet3::from_sequential(noisy);
            let fit = estimate_rigid(&src, &dst).unwrap();
            errs.push((fit.transform.translation() - t0.translation()).norm());
        }
        let mean = errs.iter().sum::<f64>() / errs.len() as f64;
        assert!(mean < 1e-3, "mean translation error {mean}");
    }

    #[test]
    fn estimate_errors() {
        let two = PointSet3::<f64>::from_sequential(vec![Vector3::zeros(), Vector3::x()]);
        assert!(matches!(
            estimate_rigid(&two, &two),
            Err(GeometryError::TooFewPoints { .. })
        ));
        let line = PointSet3::from_sequential(
            (0..5)
                .map(|i| Vector3::new(i as f64, 2.0 * i as f64, 0.5))
                .collect(),
        );
        assert_eq!(
            estimate_rigid(&line, &line),
            Err(GeometryError::DegenerateGeometry)
        );
        let other =
            PointSet3::from_points(vec![Vector3::zeros(); 5], (10..15).map(PointId).collect())
                .unwrap();
        assert!(matches!(
            estimate_rigid(&line, &other),
            Err(GeometryError::IdMismatch(_))
        ));
    }

    #[test]
    fn ransac_clean_equals_plain_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let t0 = random_transform(&mut rng);
        let src = PointSet3::from_sequential(random_points(&mut rng, 30));
        let dst = src.transformed(&t0);
        let plain = estimate_rigid(&src, &dst).unwrap();
        let robust = estimate_rigid_ransac(&src, &dst, &RansacParams::default()).unwrap();
        assert_eq!(robust.inlier_ids.len(), 30);
        assert_transform_eq(&robust.transform, &plain.transform, 1e-12);
    }

    #[test]
    fn ransac_rejects_known_outliers() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let t0 = random_transform(&mut rng);
        let pts = random_points(&mut rng, 100);
        let src = PointSet3::from_sequential(pts.clone());
        let dst: Vec<_> = pts
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let q = t0.apply(p);
                if i % 5 == 0 {
                    let dir = Vector3::new(
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                    )
                    .normalize();
                    q + dir * 0.5
                } else {
                    q
                }
            })
            .collect();
        let dst = PointSet3::from_sequential(dst);
        let params = RansacParams {
            inlier_threshold: 0.005,
            ..Default::default()
        };
        let fit = estimate_rigid_ransac(&src, &dst, &params).unwrap();
        let expected: Vec<_> = (0..100u64).filter(|i| i % 5 != 0).map(PointId).collect();
        assert_eq!(fit.inlier_ids, expected);
        assert_transform_eq(&fit.transform, &t0, 1e-9);
    }

    #[test]
    fn ransac_fully_corrupted_has_no_consensus() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let src = PointSet3::from_sequential(random_points(&mut rng, 100));
        let dst = PointSet3::from_sequential(random_points(&mut rng, 100));
        let r = estimate_rigid_ransac(&src, &dst, &RansacParams::default());
        assert!(matches!(r, Err(GeometryError::NoConsensus { .. })), "{r:?}");
    }

    #[test]
    fn ransac_is_reproducible_and_order_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let t0 = random_transform(&mut rng);
        let pts = random_points(&mut rng, 40);
        let noise = Normal::new(0.0, 2e-3).unwrap();
        let moved: Vec<_> = pts
            .iter()
            .map(|p| {
                t0.apply(p)
                    + Vector3::new(
                        noise.sample(&mut rng),
                        noise.sample(&mut rng),
                        noise.sample(&mut rng),
                    )
            })
            .collect();
        let src = PointSet3::from_sequential(pts.clone());
        let dst = PointSet3::from_sequential(moved.clone());
        let params = RansacParams {
            seed: 99,
            ..Default::default()
        };
        let a = estimate_rigid_ransac(&src, &dst, &params).unwrap();
        let b = estimate_rigid_ransac(&src, &dst, &params).unwrap();
        assert_eq!(a, b);
        let ids: Vec<_> = (0..40u64).rev().map(PointId).collect();
        let src_r = PointSet3::from_points(pts.into_iter().rev().collect(), ids.clone()).unwrap();
        let dst_r = PointSet3::from_points(moved.into_iter().rev().collect(), ids).unwrap();
        let c = estimate_rigid_ransac(&src_r, &dst_r, &params).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn f32_instantiation() {
        let t = RigidTransform::<f32>::from_rpy(0.1, 0.2, 0.3)
            .with_translation(Vector3::new(0.5, 0.0, -0.2));
        let src = PointSet3::<f32>::from_sequential(vec![
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
            Vector3::new(0.0, 0.0, 1.0),
        ]);
        let fit = estimate_rigid(&src, &src.transformed(&t)).unwrap();
        assert!((fit.transform.rotation() - t.rotation()).abs().max() < 1e-5);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn transform_strategy() -> impl Strategy<Value = T64> {
            (
                prop::array::uniform3(-3.0..3.0f64),
                prop::array::uniform3(-2.0..2.0f64),
            )
                .prop_map(|(w, t)| T64::from_scaled_axis(Vector3::from(w), Vector3::from(t)))
        }

        proptest! {
            #[test]
            fn inverse_cancels(t in transform_strategy()) {
                let e = t.compose(&t.inverse());
                prop_assert!((e.rotation() - Matrix3::identity()).abs().max() < 1e-9);
                prop_assert!(e.translation().norm() < 1e-9);
                prop_assert!((t.rotation().determinant() - 1.0).abs() < 1e-9);
            }

            #[test]
            fn rpy_round_trip(roll in -3.1..3.1f64, pitch in -1.5..1.5f64, yaw in -3.1..3.1f64) {
                let (r, p, y) = T64::from_rpy(roll, pitch, yaw).to_rpy();
                prop_assert!((r - roll).abs() < 1e-9 && (p - pitch).abs() < 1e-9 && (y - yaw).abs() < 1e-9);
            }

            #[test]
            fn fit_is_equivariant(g in transform_strategy(), t0 in transform_strategy(), seed in 0u64..1000) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let noise = Normal::new(0.0, 1e-2).unwrap();
                let pts = random_points(&mut rng, 12);
                let moved: Vec<_> = pts.iter().map(|p| t0.apply(p) + Vector3::new(noise.sample(&mut rng), noise.sample(&mut rng), noise.sample(&mut rng))).collect();
                let src = PointSet3::from_sequential(pts);
                let dst = PointSet3::from_sequential(moved);
                let base = estimate_rigid(&src, &dst).unwrap().transform;
                let moved_fit = estimate_rigid(&src.transformed(&g), &dst.transformed(&g)).unwrap().transform;
                let expected = g.compose(&base).compose(&g.inverse());
                prop_assert!((moved_fit.rotation() - expected.rotation()).abs().max() < 1e-9);
                prop_assert!((moved_fit.translation() - expected.translation()).abs().max() < 1e-9);
            }

            #[test]
            fn fit_never_worse_than_identity(t0 in transform_strategy(), seed in 0u64..1000) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let src = PointSet3::from_sequential(random_points(&mut rng, 8));
                let dst = PointSet3::from_sequential(random_points(&mut rng, 8).iter().zip(src.iter()).map(|(n, (_, p))| t0.apply(&p) + n * 0.05).collect());
                let fit = estimate_rigid(&src, &dst).unwrap();
                let a: Vec<_> = src.iter().map(|x| x.1).collect();
                let b: Vec<_> = dst.iter().map(|x| x.1).collect();
                prop_assert!(fit.rms_residual <= rms(&T64::identity(), &a, &b) + 1e-12);
            }
        }
    }
}
