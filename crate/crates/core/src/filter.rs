//! Separable Gaussian smoothing of depth images that skips invalid pixels.

use crate::depth::DepthImage;
use crate::scalar::Real;

/// Normalized 1-D kernel with radius `ceil(3σ)`.
pub fn gaussian_kernel<T: Real>(sigma: T) -> Vec<T> {
    if !(sigma > T::zero()) {
        return vec![T::one()];
    }
    let radius = (sigma * T::lit(3.0)).ceil().to_usize().unwrap_or(0);
    let two_s2 = T::lit(2.0) * sigma * sigma;
    let mut k: Vec<T> = (0..=2 * radius)
        .map(|i| {
            let x = T::from_usize(i).unwrap() - T::from_usize(radius).unwrap();
            (-(x * x) / two_s2).exp()
        })
        .collect();
    let sum = k.iter().fold(T::zero(), |a, &b| a + b);
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Blurs valid pixels; invalid pixels stay invalid. A kernel tap is used only
/// when its mirror tap about the centre is usable too (inside the image and
/// valid), and the remaining weights are renormalized, so depth that is linear
/// in the pixel grid passes through unchanged next to borders and holes.
pub fn gaussian_blur_valid<T: Real>(d: &DepthImage<T>, sigma: T) -> DepthImage<T> {
    let k = gaussian_kernel(sigma);
    if k.len() == 1 {
        return d.clone();
    }
    let r = k.len() / 2;
    let (w, h) = (d.width, d.height);
    let horiz = blur_1d(&d.data, w, h, &k, r, 1, w);
    let vert = blur_1d(&horiz, w, h, &k, r, w, h);
    DepthImage {
        data: vert,
        ..d.clone()
    }
}

/// One pass along an axis: `stride` between neighbours, `len` samples per line.
fn blur_1d<T: Real>(src: &[T], w: usize, h: usize, k: &[T], r: usize, stride: usize, len: usize) -> Vec<T> {
    let mut out = src.to_vec();
    for (i, o) in out.iter_mut().enumerate() {
        let c = src[i];
        if c.is_nan_value() {
            continue;
        }
        let pos = if stride == 1 { i % w } else { i / w };
        let reach = r.min(pos).min(len - 1 - pos);
        let (mut s, mut ws) = (k[r] * c, k[r]);
        for j in 1..=reach {
            let a = src[i - j * stride];
            let b = src[i + j * stride];
            if !(a.is_nan_value() || b.is_nan_value()) {
                s += k[r - j] * (a + b);
                ws += k[r - j] + k[r + j];
            }
        }
        *o = s / ws;
    }
    debug_assert_eq!(out.len(), w * h);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_sums_to_one() {
        let k = gaussian_kernel(2.0f64);
        assert_eq!(k.len(), 13);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(k[6] > k[5] && (k[5] - k[7]).abs() < 1e-15);
    }

    #[test]
    fn constant_image_unchanged_with_holes() {
        let mut d = DepthImage::from_fn(20, 15, |_, _| 2.5f64);
        d.data[7 * 20 + 9] = f64::NAN;
        let b = gaussian_blur_valid(&d, 2.0);
        assert!(b.get(9, 7).is_none());
        for v in b.data.iter().filter(|v| !v.is_nan()) {
            assert!((v - 2.5).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_ramp_preserved_everywhere() {
        let mut d = DepthImage::from_fn(40, 30, |c, r| 1.0 + 0.01 * c as f64 + 0.02 * r as f64);
        d.data[10 * 40 + 12] = f64::NAN;
        d.data[11 * 40 + 30] = f64::NAN;
        let b = gaussian_blur_valid(&d, 1.5);
        for (x, y) in b.data.iter().zip(&d.data) {
            assert!(x.is_nan() == y.is_nan());
            if !x.is_nan() {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn smooths_noise() {
        let d = DepthImage::from_fn(30, 30, |c, r| 2.0f64 + if (c + r) % 2 == 0 { 0.01 } else { -0.01 });
        let b = gaussian_blur_valid(&d, 2.0);
        assert!((b.raw(15, 15) - 2.0).abs() < 1e-3);
    }
}
