//! Checkerboard target: corner grid, orientation disambiguation from the
//! hollow marker square, and robust per-corner depth.
//!
//! Canonical corner order is row-major over the interior corner grid, with
//! index 0 at the interior corner adjacent to the marker square. The board
//! frame puts that corner at the origin, `x` along the first row, `y` down
//! the columns and `z = x × y`.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::Pixel;
use crate::geometry::PointSet3;
use crate::scalar::Real;
use crate::CameraId;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TargetError {
    #[error("invalid checkerboard: {0}")]
    InvalidSpec(String),
    #[error("marker corner {marker} is consistent with {matches} grid symmetries")]
    MarkerAmbiguous { marker: usize, matches: usize },
    #[error("expected {expected} corners, got {got}")]
    CornerCountMismatch { expected: usize, got: usize },
    #[error("no valid depth sample in the window")]
    NoValidDepth,
    #[error("invalid depth window: {0}")]
    InvalidWindow(String),
}

/// Physical calibration board.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckerboardSpec {
    pub squares_cols: u32,
    pub squares_rows: u32,
    /// Edge length of one square, meters.
    #[serde(rename = "square_size_m")]
    pub square_size: f64,
    /// `[col, row]` of the hollow square; must be one of the four corner
    /// squares.
    pub marker_square: [u32; 2],
}

impl Default for CheckerboardSpec {
    /// 7 × 5 squares of 30 mm with the marker top-left.
    fn default() -> Self {
        Self {
            squares_cols: 7,
            squares_rows: 5,
            square_size: 0.030,
            marker_square: [0, 0],
        }
    }
}

impl CheckerboardSpec {
    pub fn validate(&self) -> Result<(), TargetError> {
        if self.squares_cols < 3 || self.squares_rows < 3 {
            return Err(TargetError::InvalidSpec(
                "at least 3 squares per side required".into(),
            ));
        }
        if !(self.square_size > 0.0 && self.square_size.is_finite()) {
            return Err(TargetError::InvalidSpec(
                "square_size_m must be positive".into(),
            ));
        }
        let [c, r] = self.marker_square;
        let corner_col = c == 0 || c == self.squares_cols - 1;
        let corner_row = r == 0 || r == self.squares_rows - 1;
        if !(corner_col && corner_row) {
            return Err(TargetError::InvalidSpec(format!(
                "marker_square [{c}, {r}] is not a corner square"
            )));
        }
        Ok(())
    }

    /// Interior corners along a row.
    pub fn corners_x(&self) -> usize {
        self.squares_cols as usize - 1
    }

    /// Interior corners along a column.
    pub fn corners_y(&self) -> usize {
        self.squares_rows as usize - 1
    }

    pub fn corner_count(&self) -> usize {
        self.corners_x() * self.corners_y()
    }

    /// Center of the board (and of the interior grid) in the board frame.
    pub fn center(&self) -> Vector3<f64> {
        Vector3::new(
            (self.corners_x() - 1) as f64 * self.square_size / 2.0,
            (self.corners_y() - 1) as f64 * self.square_size / 2.0,
            0.0,
        )
    }

    /// The four outer board corners in the board frame.
    pub fn outer_corners(&self) -> [Vector3<f64>; 4] {
        let s = self.square_size;
        let x1 = self.corners_x() as f64 * s;
        let y1 = self.corners_y() as f64 * s;
        [
            Vector3::new(-s, -s, 0.0),
            Vector3::new(x1, -s, 0.0),
            Vector3::new(x1, y1, 0.0),
            Vector3::new(-s, y1, 0.0),
        ]
    }

    /// Outer width and height, meters.
    pub fn extent(&self) -> (f64, f64) {
        (
            self.squares_cols as f64 * self.square_size,
            self.squares_rows as f64 * self.square_size,
        )
    }

    /// Board-frame position of canonical corner `i`.
    pub fn corner(&self, i: usize) -> Vector3<f64> {
        let nx = self.corners_x();
        Vector3::new(
            (i % nx) as f64 * self.square_size,
            (i / nx) as f64 * self.square_size,
            0.0,
        )
    }
}

/// Interior corners in the board frame (z = 0), canonical order, ids `0..n`.
pub fn corner_grid<T: Real>(spec: &CheckerboardSpec) -> PointSet3<T> {
    let pts = (0..spec.corner_count())
        .map(|i| spec.corner(i).map(T::lit))
        .collect();
    PointSet3::from_sequential(pts)
}

/// Symmetries of the interior corner grid that keep its shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GridSymmetry {
    Identity,
    Rot90,
    Rot180,
    Rot270,
}

impl GridSymmetry {
    /// Symmetries a detector can confuse for this grid. Quarter turns change
    /// the grid shape unless it is square.
    pub fn candidates(spec: &CheckerboardSpec) -> Vec<GridSymmetry> {
        if spec.corners_x() == spec.corners_y() {
            vec![Self::Identity, Self::Rot90, Self::Rot180, Self::Rot270]
        } else {
            vec![Self::Identity, Self::Rot180]
        }
    }

    /// `perm[canonical] = raw` index mapping.
    pub fn permutation(self, spec: &CheckerboardSpec) -> Vec<usize> {
        let nx = spec.corners_x();
        let ny = spec.corners_y();
        (0..nx * ny)
            .map(|i| {
                let (c, r) = (i % nx, i / nx);
                let (rc, rr) = match self {
                    Self::Identity => (c, r),
                    Self::Rot180 => (nx - 1 - c, ny - 1 - r),
                    Self::Rot90 => (ny - 1 - r, c),
                    Self::Rot270 => (r, nx - 1 - c),
                };
                rr * nx + rc
            })
            .collect()
    }
}

/// Corners found in one image, in detector order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CornerDetection {
    pub corners: Vec<Pixel<f64>>,
    /// Index (into `corners`) of the corner adjacent to the hollow square.
    pub marker_corner: usize,
}

impl CornerDetection {
    pub fn centroid(&self) -> Pixel<f64> {
        let n = self.corners.len().max(1) as f64;
        let (su, sv) = self
            .corners
            .iter()
            .fold((0.0, 0.0), |(a, b), p| (a + p.u, b + p.v));
        Pixel::new(su / n, sv / n)
    }
}

/// One detection of the board by an RGB-D sensor. Depths are raw sensor
/// readings aligned with the IR corners.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoardObservation {
    pub camera_id: CameraId,
    pub timestamp_ns: u64,
    pub color: Option<CornerDetection>,
    pub ir: Option<CornerDetection>,
    pub corner_depths: Vec<Option<f64>>,
    pub orientation_resolved: bool,
}

impl BoardObservation {
    /// Seen by both the color and the IR camera.
    pub fn is_combined(&self) -> bool {
        self.color.is_some() && self.ir.is_some()
    }

    /// Pixel distance of the board center from the color image center.
    pub fn color_center_distance(&self, center: &Pixel<f64>) -> Option<f64> {
        self.color.as_ref().map(|d| d.centroid().distance(center))
    }
}

fn permute<T: Clone>(values: &[T], perm: &[usize]) -> Vec<T> {
    perm.iter().map(|&raw| values[raw].clone()).collect()
}

/// Grid symmetry that moves `marker_corner` to canonical index 0.
pub fn orientation_for_marker(
    spec: &CheckerboardSpec,
    marker_corner: usize,
) -> Result<GridSymmetry, TargetError> {
    let matches: Vec<_> = GridSymmetry::candidates(spec)
        .into_iter()
        .filter(|s| s.permutation(spec)[0] == marker_corner)
        .collect();
    match matches.as_slice() {
        [one] => Ok(*one),
        _ => Err(TargetError::MarkerAmbiguous {
            marker: marker_corner,
            matches: matches.len(),
        }),
    }
}

/// Reorders every detection of `obs` into canonical order using the marker
/// corner each camera reported. Idempotent.
pub fn resolve_orientation(
    spec: &CheckerboardSpec,
    obs: &BoardObservation,
) -> Result<BoardObservation, TargetError> {
    let n = spec.corner_count();
    let mut out = obs.clone();
    if let Some(det) = &obs.color {
        if det.corners.len() != n {
            return Err(TargetError::CornerCountMismatch {
                expected: n,
                got: det.corners.len(),
            });
        }
        let perm = orientation_for_marker(spec, det.marker_corner)?.permutation(spec);
        out.color = Some(CornerDetection {
            corners: permute(&det.corners, &perm),
            marker_corner: 0,
        });
    }
    if let Some(det) = &obs.ir {
        if det.corners.len() != n {
            return Err(TargetError::CornerCountMismatch {
                expected: n,
                got: det.corners.len(),
            });
        }
        if obs.corner_depths.len() != n {
            return Err(TargetError::CornerCountMismatch {
                expected: n,
                got: obs.corner_depths.len(),
            });
        }
        let perm = orientation_for_marker(spec, det.marker_corner)?.permutation(spec);
        out.ir = Some(CornerDetection {
            corners: permute(&det.corners, &perm),
            marker_corner: 0,
        });
        out.corner_depths = permute(&obs.corner_depths, &perm);
    }
    out.orientation_resolved = true;
    Ok(out)
}

/// Frames averaged per corner.
pub const DEPTH_WINDOW_FRAMES: usize = 5;
/// Half-width of the square neighborhood around a corner, pixels.
pub const DEPTH_WINDOW_RADIUS: usize = 10;
/// Sensor depth range outside of which samples are discarded, meters.
pub const DEPTH_VALID_RANGE: (f64, f64) = (0.4, 4.5);

/// Depth patches around one corner over consecutive frames.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthWindowStack<T: Real> {
    frames: Vec<Vec<T>>,
    radius: usize,
    valid_range: (T, T),
}

impl<T: Real> DepthWindowStack<T> {
    /// `frames` must hold [`DEPTH_WINDOW_FRAMES`] patches of `(2r+1)²`
    /// samples each.
    pub fn new(frames: Vec<Vec<T>>, radius: usize) -> Result<Self, TargetError> {
        if frames.len() != DEPTH_WINDOW_FRAMES {
            return Err(TargetError::InvalidWindow(format!(
                "expected {DEPTH_WINDOW_FRAMES} frames, got {}",
                frames.len()
            )));
        }
        let side = 2 * radius + 1;
        if let Some(bad) = frames.iter().find(|f| f.len() != side * side) {
            return Err(TargetError::InvalidWindow(format!(
                "patch of {} samples, expected {}",
                bad.len(),
                side * side
            )));
        }
        Ok(Self {
            frames,
            radius,
            valid_range: (T::lit(DEPTH_VALID_RANGE.0), T::lit(DEPTH_VALID_RANGE.1)),
        })
    }

    pub fn with_valid_range(mut self, min: T, max: T) -> Self {
        self.valid_range = (min, max);
        self
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn frames(&self) -> &[Vec<T>] {
        &self.frames
    }
}

/// Median of all valid samples pooled across the frames of the window.
pub fn robust_corner_depth<T: Real>(stack: &DepthWindowStack<T>) -> Result<T, TargetError> {
    let (lo, hi) = stack.valid_range;
    let mut valid: Vec<T> = stack
        .frames
        .iter()
        .flatten()
        .copied()
        .filter(|d| d.is_finite() && *d > T::zero() && *d >= lo && *d <= hi)
        .collect();
    median(&mut valid).ok_or(TargetError::NoValidDepth)
}

/// Median (mean of the two central values for even counts); reorders `v`.
pub(crate) fn median<T: Real>(v: &mut [T]) -> Option<T> {
    let n = v.len();
    if n == 0 {
        return None;
    }
    let cmp = |a: &T, b: &T| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal);
    let mid = n / 2;
    let (lower, m, _) = v.select_nth_unstable_by(mid, cmp);
    let m = *m;
    if n % 2 == 1 {
        return Some(m);
    }
    let below = lower
        .iter()
        .copied()
        .fold(None, |acc: Option<T>, x| Some(acc.map_or(x, |a| a.max(x))))?;
    Some((below + m) / T::lit(2.0))
}
