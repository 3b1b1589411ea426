//! Pinhole camera model, rigid poses and pose-error metrics.
//!
//! Conventions used throughout the crate:
//!
//! * A [`Pose`] maps world coordinates into the camera frame: `q = R·p + t`.
//! * The camera frame is x right, y down, z forward.
//! * Pixels are half-open unit squares: a continuous image coordinate `x`
//!   lands in pixel `floor(x)`.
//! * Euler angles are intrinsic yaw–pitch–roll about the camera Y, X and Z
//!   axes, applied in that order: `R = Ry(yaw) · Rx(pitch) · Rz(roll)`.
//!   Yaw therefore turns the camera about its vertical (down) axis.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Tolerance for the orthonormality and determinant checks on rotations.
pub const ROTATION_TOLERANCE: f64 = 1e-9;

/// Largest `|RᵀR − I|` that [`Pose::new_projected`] repairs.
pub const PROJECTION_TOLERANCE: f64 = 1e-6;

/// Points closer than this to the image plane count as behind the camera.
pub const MIN_DEPTH: f64 = 1e-6;

/// Pinhole intrinsics of the feature map (not of the raw image).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    /// Intrinsics with the principal point at the map centre and the given
    /// horizontal field of view (degrees). Square pixels.
    pub fn from_fov(width: usize, height: usize, hfov_deg: f64) -> Result<Self> {
        if !(hfov_deg > 0.0 && hfov_deg < 180.0) {
            return Err(invalid(format!("horizontal fov {hfov_deg} outside (0, 180)")));
        }
        let f = (width as f64 / 2.0) / (hfov_deg.to_radians() / 2.0).tan();
        Self::new(f, f, width as f64 / 2.0, height as f64 / 2.0, width, height)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 1 || self.height < 1 {
            return Err(invalid("feature map must be at least 1x1"));
        }
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return Err(invalid(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64) {
            return Err(invalid(format!("cx={} outside [0, {})", self.cx, self.width)));
        }
        if !(self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(invalid(format!("cy={} outside [0, {})", self.cy, self.height)));
        }
        Ok(())
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Continuous image coordinates of a camera-frame point, `None` when the
    /// point is behind (or on) the image plane.
    #[inline]
    pub fn to_image(&self, q: &Vector3<f64>) -> Option<(f64, f64)> {
        if q.z <= MIN_DEPTH {
            return None;
        }
        Some((self.fx * q.x / q.z + self.cx, self.fy * q.y / q.z + self.cy))
    }

    /// Row-major pixel index of a camera-frame point, or `None` if it falls
    /// outside the frustum.
    #[inline]
    pub fn pixel_index(&self, q: &Vector3<f64>) -> Option<usize> {
        let (x, y) = self.to_image(q)?;
        // floor and truncation agree on the accepted range
        if x >= 0.0 && x < self.width as f64 && y >= 0.0 && y < self.height as f64 {
            Some(y as usize * self.width + x as usize)
        } else {
            None
        }
    }
}

/// Rigid world-to-camera transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Pose {
    /// Builds a pose, rejecting rotations that are not orthonormal with
    /// determinant one.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        check_rotation(&rotation)?;
        if !translation.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("pose translation".into()));
        }
        Ok(Self { rotation, translation })
    }

    /// Like [`Pose::new`], but accepts rotations that are orthonormal to
    /// within `1e-6` (e.g. read back from rounded text) and projects them onto
    /// the nearest rotation.
    pub fn new_projected(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        if check_rotation(&rotation).is_ok() {
            return Pose::new(rotation, translation);
        }
        if !rotation.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("rotation matrix".into()));
        }
        let dev = (rotation.transpose() * rotation - Matrix3::identity()).amax();
        if dev > PROJECTION_TOLERANCE || rotation.determinant() <= 0.0 {
            return Err(invalid(format!("rotation not orthonormal (|RᵀR - I| = {dev:e})")));
        }
        let svd = rotation.svd(true, true);
        let (u, v_t) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
        Pose::new(u * v_t, translation)
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    #[inline]
    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Camera centre in world coordinates, `-Rᵀ t`.
    pub fn camera_center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

/// On-disk form: 3×3 row-major rotation plus translation.
#[derive(Serialize, Deserialize)]
struct PoseRepr {
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
}

impl Serialize for Pose {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let r = &self.rotation;
        PoseRepr {
            rotation: [
                [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
                [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
                [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
            ],
            translation: [self.translation.x, self.translation.y, self.translation.z],
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Pose {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let repr = PoseRepr::deserialize(d)?;
        let r = repr.rotation;
        let rotation = Matrix3::new(
            r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
        );
        Pose::new_projected(rotation, Vector3::from(repr.translation)).map_err(serde::de::Error::custom)
    }
}

fn check_rotation(r: &Matrix3<f64>) -> Result<()> {
    if !r.iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite("rotation matrix".into()));
    }
    let dev = (r.transpose() * r - Matrix3::identity()).amax();
    if dev > ROTATION_TOLERANCE {
        return Err(invalid(format!("rotation not orthonormal (|RᵀR - I| = {dev:e})")));
    }
    let det = r.determinant();
    if (det - 1.0).abs() > ROTATION_TOLERANCE {
        return Err(invalid(format!("rotation determinant {det} != 1")));
    }
    Ok(())
}

/// A point that landed inside the image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelCoord {
    pub u: usize,
    pub v: usize,
    pub depth: f64,
}

/// Scene points in world coordinates (meters).
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Vector3<f64>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vector3<f64>>) -> Result<Self> {
        if points.is_empty() {
            return Err(invalid("point cloud must contain at least one point"));
        }
        if let Some(i) = points.iter().position(|p| !p.iter().all(|x| x.is_finite())) {
            return Err(Error::NonFinite(format!("point {i}")));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Projects a world point through `pose` and `intrinsics`.
pub fn project(point: &Vector3<f64>, pose: &Pose, intrinsics: &CameraIntrinsics) -> Option<PixelCoord> {
    let q = pose.transform(point);
    let idx = intrinsics.pixel_index(&q)?;
    Some(PixelCoord {
        u: idx % intrinsics.width,
        v: idx / intrinsics.width,
        depth: q.z,
    })
}

/// Continuous (pre-floor) image coordinates of an in-frustum point.
pub fn project_continuous(point: &Vector3<f64>, pose: &Pose, intrinsics: &CameraIntrinsics) -> Option<(f64, f64)> {
    let q = pose.transform(point);
    intrinsics.pixel_index(&q)?;
    intrinsics.to_image(&q)
}

/// `delta_rotation · base.rotation`, `base.translation + delta_translation`.
pub fn compose_pose(base: &Pose, delta_rotation: &Matrix3<f64>, delta_translation: &Vector3<f64>) -> Result<Pose> {
    check_rotation(delta_rotation)?;
    Ok(Pose {
        rotation: delta_rotation * base.rotation,
        translation: base.translation + delta_translation,
    })
}

/// Rotation from intrinsic yaw (Y), pitch (X), roll (Z) angles in degrees.
pub fn euler_to_rotation(yaw_deg: f64, pitch_deg: f64, roll_deg: f64) -> Matrix3<f64> {
    let (sy, cy) = yaw_deg.to_radians().sin_cos();
    let (sp, cp) = pitch_deg.to_radians().sin_cos();
    let (sr, cr) = roll_deg.to_radians().sin_cos();
    let ry = Matrix3::new(cy, 0.0, sy, 0.0, 1.0, 0.0, -sy, 0.0, cy);
    let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, cp, -sp, 0.0, sp, cp);
    let rz = Matrix3::new(cr, -sr, 0.0, sr, cr, 0.0, 0.0, 0.0, 1.0);
    ry * rx * rz
}

/// Rotation and translation error between two poses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseError {
    /// Geodesic rotation angle, degrees in [0, 180].
    pub rre: f64,
    /// Euclidean translation distance, meters.
    pub rte: f64,
}

/// Relative rotation error (geodesic angle of `R_estᵀ R_truth`) and relative
/// translation error (`‖t_est − t_truth‖₂`).
///
/// The angle is evaluated as `atan2(‖skew‖, trace − 1)`, which equals
/// `arccos((trace − 1) / 2)` but stays exact near zero. Every entry of the
/// relative rotation is summed in a fixed order so that swapping the
/// arguments transposes the matrix bit-for-bit.
pub fn pose_errors(estimate: &Pose, truth: &Pose) -> PoseError {
    let a = &estimate.rotation;
    let b = &truth.rotation;
    let m = |i: usize, j: usize| a[(0, i)] * b[(0, j)] + a[(1, i)] * b[(1, j)] + a[(2, i)] * b[(2, j)];
    let trace = m(0, 0) + m(1, 1) + m(2, 2);
    let sx = m(2, 1) - m(1, 2);
    let sy = m(0, 2) - m(2, 0);
    let sz = m(1, 0) - m(0, 1);
    let sin2 = (sx * sx + sy * sy + sz * sz).sqrt();
    let rre = sin2.atan2(trace - 1.0).to_degrees().clamp(0.0, 180.0);
    let rte = (estimate.translation - truth.translation).norm();
    PoseError { rre, rte }
}

/// `mask[j]` is true iff point `j` projects inside the image.
pub fn frustum_mask(cloud: &PointCloud, pose: &Pose, intrinsics: &CameraIntrinsics) -> Vec<bool> {
    cloud
        .points()
        .iter()
        .map(|p| intrinsics.pixel_index(&pose.transform(p)).is_some())
        .collect()
}
