//! Metric depth images with a NaN sentinel for missing returns.

use nalgebra::Vector3;
use thiserror::Error;

use crate::geometry::CameraModel;
use crate::scalar::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DepthError {
    #[error("depth buffer has {got} values, expected {width}x{height}")]
    SizeMismatch {
        width: usize,
        height: usize,
        got: usize,
    },
    #[error("depth value {value} at ({col}, {row}) is neither a positive finite range nor the invalid sentinel")]
    BadValue { col: usize, row: usize, value: f64 },
}

/// Row-major grid of ranges in meters. Missing returns hold `NaN`.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage<T> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<T>,
    pub timestamp: Option<f64>,
}

impl<T: Real> DepthImage<T> {
    /// Checks that every value is either `NaN` or finite and positive.
    pub fn new(width: usize, height: usize, data: Vec<T>) -> Result<Self, DepthError> {
        if data.len() != width * height {
            return Err(DepthError::SizeMismatch {
                width,
                height,
                got: data.len(),
            });
        }
        if let Some(i) = data
            .iter()
            .position(|v| !(v.is_nan_value() || (v.is_finite() && *v > T::zero())))
        {
            return Err(DepthError::BadValue {
                col: i % width,
                row: i / width,
                value: data[i].as_f64(),
            });
        }
        Ok(Self {
            width,
            height,
            data,
            timestamp: None,
        })
    }

    /// Builds an image from a per-pixel closure; anything that is not a
    /// positive finite number becomes invalid.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for row in 0..height {
            for col in 0..width {
                let v = f(col, row);
                data.push(if v.is_finite() && v > T::zero() {
                    v
                } else {
                    T::NAN
                });
            }
        }
        Self {
            width,
            height,
            data,
            timestamp: None,
        }
    }

    pub fn invalid(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![T::NAN; width * height],
            timestamp: None,
        }
    }

    pub fn with_timestamp(mut self, t: f64) -> Self {
        self.timestamp = Some(t);
        self
    }

    #[inline]
    pub fn get(&self, col: usize, row: usize) -> Option<T> {
        let v = self.data[row * self.width + col];
        (!v.is_nan_value()).then_some(v)
    }

    #[inline]
    pub fn raw(&self, col: usize, row: usize) -> T {
        self.data[row * self.width + col]
    }

    pub fn valid_count(&self) -> usize {
        self.data.iter().filter(|v| !v.is_nan_value()).count()
    }

    /// Keeps every `factor`-th pixel in both directions. Pairs with
    /// [`CameraModel::subsampled`].
    pub fn subsampled(&self, factor: usize) -> Self {
        let f = factor.max(1);
        let w = self.width.div_ceil(f);
        let h = self.height.div_ceil(f);
        let mut data = Vec::with_capacity(w * h);
        for row in 0..h {
            for col in 0..w {
                data.push(self.raw(col * f, row * f));
            }
        }
        Self {
            width: w,
            height: h,
            data,
            timestamp: self.timestamp,
        }
    }

    /// Invalidates returns farther than `max_range`.
    pub fn clipped(&self, max_range: T) -> Self {
        let data = self
            .data
            .iter()
            .map(|&v| if v > max_range { T::NAN } else { v })
            .collect();
        Self {
            data,
            ..self.clone()
        }
    }

    /// Camera-frame point of every valid pixel, in row-major order.
    pub fn to_points(&self, cam: &CameraModel<T>) -> Vec<Vector3<T>> {
        let mut pts = Vec::with_capacity(self.valid_count());
        for row in 0..self.height {
            for col in 0..self.width {
                if let Some(z) = self.get(col, row) {
                    pts.push(cam.backproject(
                        T::from_usize(col).unwrap(),
                        T::from_usize(row).unwrap(),
                        z,
                    ));
                }
            }
        }
        pts
    }

    pub fn matches_camera(&self, cam: &CameraModel<T>) -> bool {
        self.width == cam.width && self.height == cam.height
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_positive_values() {
        assert!(DepthImage::new(2, 1, vec![1.0, 0.0]).is_err());
        assert!(DepthImage::new(2, 1, vec![1.0, -2.0]).is_err());
        assert!(DepthImage::new(2, 1, vec![1.0, f64::INFINITY]).is_err());
        assert!(DepthImage::new(2, 1, vec![1.0, f64::NAN]).is_ok());
        assert!(DepthImage::new(2, 2, vec![1.0, 1.0]).is_err());
    }

    #[test]
    fn from_fn_sanitizes() {
        let d = DepthImage::<f64>::from_fn(3, 1, |c, _| c as f64);
        assert_eq!(d.get(0, 0), None);
        assert_eq!(d.get(1, 0), Some(1.0));
    }

    #[test]
    fn subsample_picks_block_origin() {
        let d = DepthImage::<f64>::from_fn(5, 3, |c, r| 1.0 + c as f64 + 10.0 * r as f64);
        let s = d.subsampled(2);
        assert_eq!((s.width, s.height), (3, 2));
        assert_eq!(s.get(2, 1), Some(1.0 + 4.0 + 20.0));
    }

    #[test]
    fn clipping_invalidates_far_returns() {
        let d = DepthImage::new(3, 1, vec![1.0, 4.0, 4.5]).unwrap();
        let c = d.clipped(4.0);
        assert_eq!(c.get(1, 0), Some(4.0));
        assert_eq!(c.get(2, 0), None);
    }
}
