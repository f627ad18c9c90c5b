//! Surface normals from a depth image by smoothed central differences.

use image::{Rgb, RgbImage};
use nalgebra::Vector3;

use crate::depth::DepthImage;
use crate::filter::gaussian_blur_valid;
use crate::geometry::CameraModel;
use crate::scalar::Real;

/// Default smoothing before differentiation, in pixels.
pub const DEFAULT_NORMAL_SIGMA: f64 = 2.0;

/// Per-pixel unit normals in the camera frame; invalid entries hold NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalImage<T: Real> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<Vector3<T>>,
}

impl<T: Real> NormalImage<T> {
    pub fn invalid(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![Vector3::repeat(T::NAN); width * height],
        }
    }

    #[inline]
    pub fn get(&self, col: usize, row: usize) -> Option<Vector3<T>> {
        let n = self.data[row * self.width + col];
        (!n.x.is_nan_value()).then_some(n)
    }

    pub fn valid_count(&self) -> usize {
        self.data.iter().filter(|n| !n.x.is_nan_value()).count()
    }

    /// RGB picture using [`normal_to_rgb`]; invalid pixels are black.
    pub fn to_rgb(&self) -> RgbImage {
        let mut img = RgbImage::new(self.width as u32, self.height as u32);
        for (i, px) in img.pixels_mut().enumerate() {
            if let Some(n) = self.get(i % self.width, i / self.width) {
                *px = Rgb(normal_to_rgb(&n));
            }
        }
        img
    }
}

/// Smooths `d` (invalid-aware, `sigma` pixels) and crosses the backprojected
/// central-difference tangents. The normal is oriented towards the camera.
/// Pixels on the border or with an invalid 4-neighbour get no normal.
pub fn estimate_normals<T: Real>(d: &DepthImage<T>, cam: &CameraModel<T>, sigma: T) -> NormalImage<T> {
    let (w, h) = (d.width, d.height);
    let mut out = NormalImage::invalid(w, h);
    if w < 3 || h < 3 {
        return out;
    }
    let s = gaussian_blur_valid(d, sigma);
    let point = |col: usize, row: usize| {
        cam.backproject(
            T::from_usize(col).unwrap(),
            T::from_usize(row).unwrap(),
            s.raw(col, row),
        )
    };
    for row in 1..h - 1 {
        for col in 1..w - 1 {
            let stencil = [(col, row), (col - 1, row), (col + 1, row), (col, row - 1), (col, row + 1)];
            if stencil.iter().any(|&(c, r)| d.raw(c, r).is_nan_value()) {
                continue;
            }
            let tx = point(col + 1, row) - point(col - 1, row);
            let ty = point(col, row + 1) - point(col, row - 1);
            let n = ty.cross(&tx);
            let len = n.norm();
            if !(len > T::zero()) {
                continue;
            }
            let mut n = n / len;
            let ray = cam.ray(T::from_usize(col).unwrap(), T::from_usize(row).unwrap());
            if n.dot(&ray) > T::zero() {
                n = -n;
            }
            out.data[row * w + col] = n;
        }
    }
    out
}

/// `channel = round((c + 1) / 2 · 255)` for each component.
pub fn normal_to_rgb<T: Real>(n: &Vector3<T>) -> [u8; 3] {
    let enc = |c: T| {
        let v = ((c.as_f64().clamp(-1.0, 1.0) + 1.0) * 0.5 * 255.0).round();
        v as u8
    };
    [enc(n.x), enc(n.y), enc(n.z)]
}

/// Inverse of [`normal_to_rgb`] per component; not renormalized.
pub fn rgb_to_normal<T: Real>(rgb: [u8; 3]) -> Vector3<T> {
    let dec = |b: u8| T::lit(b as f64 / 255.0 * 2.0 - 1.0);
    Vector3::new(dec(rgb[0]), dec(rgb[1]), dec(rgb[2]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn plane_depth(cam: &CameraModel<f64>, n: Vector3<f64>, d: f64) -> DepthImage<f64> {
        // n·X = d with X = z·ray
        DepthImage::from_fn(cam.width, cam.height, |c, r| d / n.dot(&cam.ray(c as f64, r as f64)))
    }

    #[test]
    fn fronto_parallel() {
        let cam = CameraModel::tum_fr3().resized(64, 48);
        let d = DepthImage::from_fn(64, 48, |_, _| 2.0f64);
        let n = estimate_normals(&d, &cam, 2.0);
        assert_eq!(n.valid_count(), 62 * 46);
        for v in n.data.iter().filter(|v| !v.x.is_nan()) {
            assert!((v - Vector3::new(0.0, 0.0, -1.0)).norm() < 1e-6);
        }
    }

    #[test]
    fn inclined_plane() {
        let cam = CameraModel::tum_fr3().resized(160, 120);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        // 45° about the x axis, facing the camera
        let normal = Vector3::new(0.0, s, -s);
        let d = plane_depth(&cam, normal, -1.5);
        let n = estimate_normals(&d, &cam, 2.0);
        let mut worst: f64 = 0.0;
        for row in 3..117 {
            for col in 3..157 {
                let v = n.get(col, row).unwrap();
                worst = worst.max(v.dot(&normal).clamp(-1.0, 1.0).acos().to_degrees());
            }
        }
        assert!(worst < 1.0, "worst {worst}°");
    }

    #[test]
    fn hole_poisons_stencil() {
        let cam = CameraModel::tum_fr3().resized(32, 24);
        let mut d = DepthImage::from_fn(32, 24, |_, _| 1.0f64);
        d.data[10 * 32 + 10] = f64::NAN;
        let n = estimate_normals(&d, &cam, 2.0);
        for (c, r) in [(10, 10), (9, 10), (11, 10), (10, 9), (10, 11)] {
            assert!(n.get(c, r).is_none());
        }
        assert!(n.get(9, 9).is_some());
        assert!(n.get(0, 5).is_none() && n.get(5, 23).is_none());
    }

    #[test]
    fn faces_camera() {
        let cam = CameraModel::tum_fr3().resized(64, 48);
        let d = plane_depth(&cam, Vector3::new(0.3, -0.2, -0.9).normalize(), -1.0);
        let n = estimate_normals(&d, &cam, 1.0);
        for row in 1..47 {
            for col in 1..63 {
                let v = n.get(col, row).unwrap();
                assert!(v.dot(&cam.ray(col as f64, row as f64)) < 0.0);
                assert!((v.norm() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn rgb_examples() {
        assert_eq!(normal_to_rgb(&Vector3::new(0.0, 0.0, -1.0)), [128, 128, 0]);
        assert_eq!(normal_to_rgb(&Vector3::new(1.0, 0.0, 0.0)), [255, 128, 128]);
    }

    proptest! {
        #[test]
        fn rgb_round_trip(x in -1.0f64..1.0, y in -1.0f64..1.0, z in -1.0f64..1.0) {
            let v = Vector3::new(x, y, z);
            prop_assume!(v.norm() > 1e-3);
            let v = v.normalize();
            let back: Vector3<f64> = rgb_to_normal(normal_to_rgb(&v));
            for k in 0..3 {
                prop_assert!((back[k] - v[k]).abs() <= 1.0 / 255.0);
            }
        }
    }
}
