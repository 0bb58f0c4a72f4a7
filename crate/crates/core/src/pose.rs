//! Camera rotations, poses and pinhole projection.
//!
//! Poses map world points into the camera frame, `X_c = R·X_w + T`. Cameras
//! follow the right-down-forward convention. The ground plane is `y = 0` and
//! cameras built by [`look_at_pose`] sit on its `y > 0` side, so image "down"
//! points along world `-y` projected into the view.

use std::ops::Mul;

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};

use crate::error::{Error, Result};

pub type Translation = Vector3<f64>;

/// A proper orthonormal 3x3 matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationMatrix(Matrix3<f64>);

impl RotationMatrix {
    pub const TOLERANCE: f64 = 1e-9;

    pub fn new(m: Matrix3<f64>) -> Result<Self> {
        if !m.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidPose("rotation has non-finite entries".into()));
        }
        let ortho = (m.transpose() * m - Matrix3::identity()).abs().max();
        if ortho > Self::TOLERANCE {
            return Err(Error::InvalidPose(format!(
                "rotation is not orthonormal (max deviation {ortho:.3e})"
            )));
        }
        let det = m.determinant();
        if (det - 1.0).abs() > Self::TOLERANCE {
            return Err(Error::InvalidPose(format!(
                "rotation determinant is {det}, expected 1"
            )));
        }
        Ok(Self(m))
    }

    /// Nearest rotation to `m` in the Frobenius sense.
    pub fn closest_to(m: &Matrix3<f64>) -> Result<Self> {
        let svd = m.svd(true, true);
        let (u, v_t) = match (svd.u, svd.v_t) {
            (Some(u), Some(v_t)) => (u, v_t),
            _ => return Err(Error::InvalidPose("SVD failed".into())),
        };
        let d = (u * v_t).determinant().signum();
        let r = u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * v_t;
        Self::new(r)
    }

    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        let r = Rotation3::from_axis_angle(&Unit::new_normalize(*axis), angle);
        Self(*r.matrix())
    }

    pub fn rot_x(angle: f64) -> Self {
        Self::from_axis_angle(&Vector3::x(), angle)
    }

    pub fn rot_y(angle: f64) -> Self {
        Self::from_axis_angle(&Vector3::y(), angle)
    }

    pub fn rot_z(angle: f64) -> Self {
        Self::from_axis_angle(&Vector3::z(), angle)
    }

    #[inline]
    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    /// Row `i` as a column vector.
    pub fn row(&self, i: usize) -> Vector3<f64> {
        self.0.row(i).transpose()
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }
}

impl Mul for RotationMatrix {
    type Output = RotationMatrix;

    fn mul(self, rhs: RotationMatrix) -> RotationMatrix {
        RotationMatrix(self.0 * rhs.0)
    }
}

impl Mul<Vector3<f64>> for RotationMatrix {
    type Output = Vector3<f64>;

    fn mul(self, rhs: Vector3<f64>) -> Vector3<f64> {
        self.0 * rhs
    }
}

/// `Ri·Rjᵀ`.
pub fn relative_rotation(ri: &RotationMatrix, rj: &RotationMatrix) -> RotationMatrix {
    RotationMatrix(ri.0 * rj.0.transpose())
}

/// World-to-camera rigid transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    pub rotation: RotationMatrix,
    pub translation: Translation,
}

impl CameraPose {
    pub fn new(rotation: RotationMatrix, translation: Translation) -> Result<Self> {
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidPose("translation has non-finite entries".into()));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: RotationMatrix::identity(),
            translation: Translation::zeros(),
        }
    }

    /// Pose whose camera sits at `center` with orientation `rotation`.
    pub fn from_center(rotation: RotationMatrix, center: &Vector3<f64>) -> Self {
        Self {
            rotation,
            translation: -(rotation.0 * center),
        }
    }

    #[inline]
    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.0 * p + self.translation
    }

    #[inline]
    pub fn camera_to_world(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.0.transpose() * (p - self.translation)
    }

    /// Camera center in world coordinates, `-Rᵀ·T`.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.0.transpose() * self.translation)
    }

    pub fn inverse(&self) -> CameraPose {
        let rt = self.rotation.transpose();
        CameraPose {
            rotation: rt,
            translation: -(rt.0 * self.translation),
        }
    }

    /// `self ∘ first`: applies `first`, then `self`.
    pub fn compose(&self, first: &CameraPose) -> CameraPose {
        CameraPose {
            rotation: self.rotation * first.rotation,
            translation: self.rotation.0 * first.translation + self.translation,
        }
    }
}

/// Pinhole intrinsics for an `width × height` image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite()) {
            return Err(Error::InvalidIntrinsics(format!(
                "focal lengths must be positive, got ({fx}, {fy})"
            )));
        }
        if !(0.0..width as f64).contains(&cx) || !(0.0..height as f64).contains(&cy) {
            return Err(Error::InvalidIntrinsics(format!(
                "principal point ({cx}, {cy}) outside {width}x{height} image"
            )));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    /// Square pixels, centered principal point, horizontal field of view in degrees.
    pub fn from_fov(width: usize, height: usize, hfov_deg: f64) -> Result<Self> {
        if !(hfov_deg > 0.0 && hfov_deg < 180.0) {
            return Err(Error::InvalidIntrinsics(format!(
                "field of view {hfov_deg} outside (0, 180)"
            )));
        }
        let f = width as f64 / 2.0 / (hfov_deg.to_radians() / 2.0).tan();
        Self::new(f, f, width as f64 / 2.0, height as f64 / 2.0, width, height)
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Pixel position of a camera-frame point.
    pub fn project(&self, p: &Vector3<f64>) -> Result<[f64; 2]> {
        if !(p.z > 0.0) {
            return Err(Error::BehindCamera(p.z));
        }
        Ok([self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy])
    }

    /// Camera-frame ray direction (unnormalized, `z = 1`) through pixel position `(x, y)`.
    #[inline]
    pub fn ray(&self, x: f64, y: f64) -> Vector3<f64> {
        Vector3::new((x - self.cx) / self.fx, (y - self.cy) / self.fy, 1.0)
    }
}

/// Camera on the sphere of radius `distance` around the world origin, looking
/// at the origin. `pitch` is the elevation above the ground plane in degrees
/// (90 is nadir) and `yaw` the azimuth about world `y`; yaw 0 puts the camera
/// over the `+z` half-plane.
pub fn look_at_pose(distance: f64, pitch: f64, yaw: f64) -> Result<CameraPose> {
    if !(pitch > 0.0 && pitch < 90.0) {
        return Err(Error::InvalidPose(format!(
            "pitch {pitch} outside the open interval (0, 90)"
        )));
    }
    if !(distance > 0.0 && distance.is_finite()) || !yaw.is_finite() {
        return Err(Error::InvalidPose(format!(
            "distance must be positive and finite, got {distance}"
        )));
    }
    let (sp, cp) = pitch.to_radians().sin_cos();
    let (sy, cy) = yaw.to_radians().sin_cos();
    let center = Vector3::new(distance * cp * sy, distance * sp, distance * cp * cy);
    let forward = -center / distance;
    let right = Vector3::new(cy, 0.0, -sy);
    let down = forward.cross(&right);
    let m = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
    Ok(CameraPose::from_center(RotationMatrix::new(m)?, &center))
}

/// Rows of a rotation projected onto the ground plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedOrientation {
    pub rows: [Vector3<f64>; 3],
}

/// `r̂ᵢ = rᵢ − (rᵢ·c)c` with `c = (0, −1, 0)`, i.e. the second component zeroed.
pub fn projected_orientation(r: &RotationMatrix) -> ProjectedOrientation {
    ProjectedOrientation {
        rows: [0, 1, 2].map(|i| {
            let row = r.row(i);
            Vector3::new(row.x, 0.0, row.z)
        }),
    }
}

impl ProjectedOrientation {
    pub fn project_again(&self) -> ProjectedOrientation {
        ProjectedOrientation {
            rows: self.rows.map(|v| Vector3::new(v.x, 0.0, v.z)),
        }
    }
}
