//! Rigid poses, the pinhole camera and projection helpers.
//!
//! Conventions used throughout the crate:
//!
//! * Euler angles compose intrinsically Z-Y-X: `R = Rz(θz) · Ry(θy) · Rx(θx)`.
//! * Camera frame: `+z` forward into the scene, `+x` right, `+y` down.
//! * Depth is the camera-frame `z` (perpendicular distance to the image plane),
//!   never the Euclidean ray length.
//! * Pixel `(col, row)` has its centre at image coordinates `(col, row)`.
//! * A transform attached to a frame maps points *from* that frame *into* its
//!   parent, so a camera pose maps camera coordinates to world coordinates.

use nalgebra::{Matrix3, Matrix4, Vector3};
use thiserror::Error;

use crate::scalar::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid camera model: {0}")]
    InvalidCamera(String),
}

/// 6-DoF pose as translation in meters plus Z-Y-X Euler angles in radians.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Pose6D<T> {
    pub x: T,
    pub y: T,
    pub z: T,
    pub theta_x: T,
    pub theta_y: T,
    pub theta_z: T,
}

impl<T: Real> Pose6D<T> {
    pub fn new(x: T, y: T, z: T, theta_x: T, theta_y: T, theta_z: T) -> Self {
        Self {
            x,
            y,
            z,
            theta_x,
            theta_y,
            theta_z,
        }
    }

    pub fn identity() -> Self {
        Self::from_array([T::zero(); 6])
    }

    pub fn from_array(a: [T; 6]) -> Self {
        Self::new(a[0], a[1], a[2], a[3], a[4], a[5])
    }

    pub fn to_array(&self) -> [T; 6] {
        [
            self.x,
            self.y,
            self.z,
            self.theta_x,
            self.theta_y,
            self.theta_z,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    pub fn translation(&self) -> Vector3<T> {
        Vector3::new(self.x, self.y, self.z)
    }

    pub fn to_transform(&self) -> RigidTransform<T> {
        pose_to_transform(self)
    }
}

/// Rotation matrix for Z-Y-X Euler angles.
pub fn euler_zyx_to_matrix<T: Real>(theta_x: T, theta_y: T, theta_z: T) -> Matrix3<T> {
    let (sx, cx) = theta_x.sin_cos();
    let (sy, cy) = theta_y.sin_cos();
    let (sz, cz) = theta_z.sin_cos();
    Matrix3::new(
        cz * cy,
        cz * sy * sx - sz * cx,
        cz * sy * cx + sz * sx,
        sz * cy,
        sz * sy * sx + cz * cx,
        sz * sy * cx - cz * sx,
        -sy,
        cy * sx,
        cy * cx,
    )
}

/// Inverse of [`euler_zyx_to_matrix`], returning `(θx, θy, θz)`.
///
/// At gimbal lock (`|θy| = π/2`) `θx` is set to zero.
pub fn matrix_to_euler_zyx<T: Real>(r: &Matrix3<T>) -> (T, T, T) {
    let sy = -r[(2, 0)];
    let sy = sy.clamp(-T::one(), T::one());
    let theta_y = sy.asin();
    let cy = (r[(0, 0)] * r[(0, 0)] + r[(1, 0)] * r[(1, 0)]).sqrt();
    if cy > T::lit(1e-12) {
        let theta_x = r[(2, 1)].atan2(r[(2, 2)]);
        let theta_z = r[(1, 0)].atan2(r[(0, 0)]);
        (theta_x, theta_y, theta_z)
    } else {
        let theta_z = (-r[(0, 1)]).atan2(r[(1, 1)]);
        (T::zero(), theta_y, theta_z)
    }
}

pub fn pose_to_transform<T: Real>(p: &Pose6D<T>) -> RigidTransform<T> {
    RigidTransform {
        rotation: euler_zyx_to_matrix(p.theta_x, p.theta_y, p.theta_z),
        translation: p.translation(),
    }
}

/// Rotation plus translation acting as `p ↦ R·p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform<T: Real> {
    pub rotation: Matrix3<T>,
    pub translation: Vector3<T>,
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

    pub fn new(rotation: Matrix3<T>, translation: Vector3<T>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(t: Vector3<T>) -> Self {
        Self::new(Matrix3::identity(), t)
    }

    /// `self ∘ other`: applies `other` first, then `self`.
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

    #[inline]
    pub fn transform_point(&self, p: &Vector3<T>) -> Vector3<T> {
        self.rotation * p + self.translation
    }

    #[inline]
    pub fn transform_vector(&self, v: &Vector3<T>) -> Vector3<T> {
        self.rotation * v
    }

    pub fn to_matrix4(&self) -> Matrix4<T> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn from_matrix4(m: &Matrix4<T>) -> Self {
        Self {
            rotation: m.fixed_view::<3, 3>(0, 0).into_owned(),
            translation: m.fixed_view::<3, 1>(0, 3).into_owned(),
        }
    }

    pub fn to_pose(&self) -> Pose6D<T> {
        let (ax, ay, az) = matrix_to_euler_zyx(&self.rotation);
        Pose6D::new(
            self.translation.x,
            self.translation.y,
            self.translation.z,
            ax,
            ay,
            az,
        )
    }

    /// Rotation angle of the rotation part, radians in `[0, π]`.
    pub fn rotation_angle(&self) -> T {
        let two = T::lit(2.0);
        let c = (self.rotation.trace() - T::one()) / two;
        c.clamp(-T::one(), T::one()).acos()
    }

    /// Max deviation of `RᵀR` from identity and of `det R` from one.
    pub fn orthonormality_error(&self) -> T {
        let e = self.rotation.transpose() * self.rotation - Matrix3::identity();
        let det = (self.rotation.determinant() - T::one()).abs();
        e.abs().max().max(det)
    }

    /// Projects the rotation onto SO(3) via SVD.
    pub fn orthonormalized(&self) -> Self {
        Self {
            rotation: orthonormalize(&self.rotation),
            translation: self.translation,
        }
    }
}

/// Nearest rotation matrix in Frobenius norm, det forced to +1.
pub fn orthonormalize<T: Real>(m: &Matrix3<T>) -> Matrix3<T> {
    let svd = m.svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Matrix3::identity(),
    };
    let mut r = u * v_t;
    if r.determinant() < T::zero() {
        let mut u = u;
        let mut col = u.column_mut(2);
        col.neg_mut();
        r = u * v_t;
    }
    r
}

/// Pinhole camera without distortion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraModel<T> {
    pub width: usize,
    pub height: usize,
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
    pub z_near: T,
    pub z_far: T,
}

/// Result of projecting a camera-frame point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection<T> {
    pub u: T,
    pub v: T,
    pub depth: T,
}

impl<T: Real> CameraModel<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        width: usize,
        height: usize,
        fx: T,
        fy: T,
        cx: T,
        cy: T,
        z_near: T,
        z_far: T,
    ) -> Result<Self, GeometryError> {
        let cam = Self {
            width,
            height,
            fx,
            fy,
            cx,
            cy,
            z_near,
            z_far,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.width == 0 || self.height == 0 {
            return Err(GeometryError::InvalidCamera(format!(
                "image size {}x{} must be positive",
                self.width, self.height
            )));
        }
        if !(self.fx > T::zero() && self.fy > T::zero()) {
            return Err(GeometryError::InvalidCamera(
                "focal lengths must be positive".into(),
            ));
        }
        if !(self.cx.is_finite() && self.cy.is_finite()) {
            return Err(GeometryError::InvalidCamera(
                "principal point must be finite".into(),
            ));
        }
        if !(self.z_near > T::zero() && self.z_near < self.z_far && self.z_far.is_finite()) {
            return Err(GeometryError::InvalidCamera(
                "clip planes must satisfy 0 < z_near < z_far".into(),
            ));
        }
        Ok(())
    }

    /// TUM fr3 intrinsics at 640x480.
    pub fn tum_fr3() -> Self {
        Self {
            width: 640,
            height: 480,
            fx: T::lit(535.4),
            fy: T::lit(539.2),
            cx: T::lit(320.1),
            cy: T::lit(247.6),
            z_near: T::lit(0.1),
            z_far: T::lit(10.0),
        }
    }

    /// Same camera at a different resolution. Pixel-centre convention is kept,
    /// so `c' = (c + ½)·s − ½` per axis.
    pub fn resized(&self, width: usize, height: usize) -> Self {
        let half = T::lit(0.5);
        let sx = T::from_usize(width).unwrap() / T::from_usize(self.width).unwrap();
        let sy = T::from_usize(height).unwrap() / T::from_usize(self.height).unwrap();
        Self {
            width,
            height,
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: (self.cx + half) * sx - half,
            cy: (self.cy + half) * sy - half,
            ..*self
        }
    }

    /// Camera for an image subsampled by `factor` (every `factor`-th pixel kept).
    pub fn subsampled(&self, factor: usize) -> Self {
        let f = T::from_usize(factor.max(1)).unwrap();
        Self {
            width: self.width.div_ceil(factor.max(1)),
            height: self.height.div_ceil(factor.max(1)),
            fx: self.fx / f,
            fy: self.fy / f,
            cx: self.cx / f,
            cy: self.cy / f,
            ..*self
        }
    }

    pub fn with_clip(&self, z_near: T, z_far: T) -> Self {
        Self {
            z_near,
            z_far,
            ..*self
        }
    }

    /// Projects a camera-frame point; `None` when the point is not in front of
    /// the camera (`z ≤ 0`).
    #[inline]
    pub fn project(&self, p: &Vector3<T>) -> Option<Projection<T>> {
        if !(p.z > T::zero()) {
            return None;
        }
        Some(Projection {
            u: self.fx * p.x / p.z + self.cx,
            v: self.fy * p.y / p.z + self.cy,
            depth: p.z,
        })
    }

    /// Camera-frame point at image coordinates `(u, v)` and depth `z`.
    #[inline]
    pub fn backproject(&self, u: T, v: T, depth: T) -> Vector3<T> {
        Vector3::new(
            (u - self.cx) * depth / self.fx,
            (v - self.cy) * depth / self.fy,
            depth,
        )
    }

    /// Direction through `(u, v)` scaled so that its `z` component is one.
    #[inline]
    pub fn ray(&self, u: T, v: T) -> Vector3<T> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, T::one())
    }

    #[inline]
    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Nearest pixel `(col, row)` to image coordinates, if inside the image.
    #[inline]
    pub fn pixel_at(&self, u: T, v: T) -> Option<(usize, usize)> {
        let half = T::lit(0.5);
        let col = (u + half).floor();
        let row = (v + half).floor();
        if col < T::zero() || row < T::zero() {
            return None;
        }
        let col = col.to_usize()?;
        let row = row.to_usize()?;
        (col < self.width && row < self.height).then_some((col, row))
    }
}
