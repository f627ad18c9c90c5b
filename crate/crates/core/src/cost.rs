//! Z-buffer comparison cost: per-pixel verdicts summed into a scalar
//! alignment error.

use image::{Rgb, RgbImage};
use thiserror::Error;

use crate::geometry::{CameraModel, Pose6D};
use crate::meshify::LabeledMesh;
use crate::raster::{render, LabeledRender, MeshInstance, PixelLabel, RenderedPixel};
use crate::scalar::Real;

/// Default inlier threshold in meters.
pub const DEFAULT_EPS: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CostError {
    #[error("render sizes differ: {a:?} vs {b:?}")]
    DimensionMismatch { a: (usize, usize), b: (usize, usize) },
    #[error("inlier threshold must be positive, got {0}")]
    BadEps(f64),
    #[error("scan render is {scan:?} but the camera is {camera:?}")]
    CameraMismatch {
        scan: (usize, usize),
        camera: (usize, usize),
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Verdict {
    Reward,
    Penalize,
    Ignore,
}

impl Verdict {
    pub fn value(self) -> i64 {
        match self {
            Verdict::Reward => -1,
            Verdict::Penalize => 1,
            Verdict::Ignore => 0,
        }
    }
}

/// Classifies one map pixel `p_r` against the scan pixel `p_s` at the same
/// location, with `Δz = d(p_r) − d(p_s)`.
pub fn classify_pixel<T: Real>(p_r: RenderedPixel<T>, p_s: RenderedPixel<T>, eps: T) -> Verdict {
    use PixelLabel::*;
    let dz = p_r.depth - p_s.depth;
    match (p_r.label, p_s.label) {
        (FreeOccupied, FreeOccupied) => {
            if dz.abs() <= eps {
                Verdict::Reward
            } else {
                Verdict::Penalize
            }
        }
        (FreeOccupied, FreeUnknown) => {
            if dz <= T::zero() {
                Verdict::Penalize
            } else {
                Verdict::Reward
            }
        }
        (FreeUnknown, FreeOccupied) => {
            if dz > T::zero() {
                Verdict::Penalize
            } else {
                Verdict::Reward
            }
        }
        // FU/FU, anything unknown-occupied, anything without a surface
        _ => Verdict::Ignore,
    }
}

/// Per-verdict scores. Defaults to −1 / +1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostWeights {
    pub reward: i64,
    pub penalty: i64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            reward: 1,
            penalty: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostOptions<T> {
    pub eps: T,
    pub weights: CostWeights,
    /// Gaussian blur (pixels) applied to the scan depth before it is
    /// meshified. Off when `None`.
    pub blur_sigma: Option<T>,
}

impl<T: Real> Default for CostOptions<T> {
    fn default() -> Self {
        Self {
            eps: T::lit(DEFAULT_EPS),
            weights: CostWeights::default(),
            blur_sigma: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub total: i64,
    pub rewards: usize,
    pub penalties: usize,
    pub ignored: usize,
    /// Pixel counts indexed `[map label][scan label]` by [`PixelLabel::index`].
    pub cells: [[usize; 4]; 4],
    pub pixel_count: usize,
    /// Non-ignored pixels over all pixels.
    pub valid_overlap_fraction: f64,
}

impl CostReport {
    fn empty(pixel_count: usize) -> Self {
        Self {
            total: 0,
            rewards: 0,
            penalties: 0,
            ignored: 0,
            cells: [[0; 4]; 4],
            pixel_count,
            valid_overlap_fraction: 0.0,
        }
    }
}

fn check_eps<T: Real>(eps: T) -> Result<(), CostError> {
    if eps > T::zero() {
        Ok(())
    } else {
        Err(CostError::BadEps(eps.as_f64()))
    }
}

fn check_dims<T: Real>(a: &LabeledRender<T>, b: &LabeledRender<T>) -> Result<(), CostError> {
    if a.width != b.width || a.height != b.height {
        return Err(CostError::DimensionMismatch {
            a: (a.width, a.height),
            b: (b.width, b.height),
        });
    }
    Ok(())
}

/// Sums the verdicts over all pixels with unit weights.
pub fn cost<T: Real>(
    z_r: &LabeledRender<T>,
    z_s: &LabeledRender<T>,
    eps: T,
) -> Result<CostReport, CostError> {
    cost_weighted(z_r, z_s, eps, CostWeights::default())
}

pub fn cost_weighted<T: Real>(
    z_r: &LabeledRender<T>,
    z_s: &LabeledRender<T>,
    eps: T,
    weights: CostWeights,
) -> Result<CostReport, CostError> {
    check_eps(eps)?;
    check_dims(z_r, z_s)?;
    let mut rep = CostReport::empty(z_r.len());
    for i in 0..z_r.len() {
        let (a, b) = (z_r.pixel_at(i), z_s.pixel_at(i));
        rep.cells[a.label.index()][b.label.index()] += 1;
        match classify_pixel(a, b, eps) {
            Verdict::Reward => rep.rewards += 1,
            Verdict::Penalize => rep.penalties += 1,
            Verdict::Ignore => rep.ignored += 1,
        }
    }
    rep.total = weights.penalty * rep.penalties as i64 - weights.reward * rep.rewards as i64;
    if rep.pixel_count > 0 {
        rep.valid_overlap_fraction =
            (rep.rewards + rep.penalties) as f64 / rep.pixel_count as f64;
    }
    Ok(rep)
}

/// Renders `map` with the camera at pose `x` and costs it against `z_s`.
pub fn evaluate_pose<T: Real>(
    map: &LabeledMesh<T>,
    z_s: &LabeledRender<T>,
    cam: &CameraModel<T>,
    x: &Pose6D<T>,
    opts: &CostOptions<T>,
) -> Result<CostReport, CostError> {
    evaluate_pose_with_render(map, z_s, cam, x, opts).map(|(r, _)| r)
}

/// As [`evaluate_pose`], also returning the map render.
pub fn evaluate_pose_with_render<T: Real>(
    map: &LabeledMesh<T>,
    z_s: &LabeledRender<T>,
    cam: &CameraModel<T>,
    x: &Pose6D<T>,
    opts: &CostOptions<T>,
) -> Result<(CostReport, LabeledRender<T>), CostError> {
    check_eps(opts.eps)?;
    if z_s.width != cam.width || z_s.height != cam.height {
        return Err(CostError::CameraMismatch {
            scan: (z_s.width, z_s.height),
            camera: (cam.width, cam.height),
        });
    }
    let z_r = render(&[MeshInstance::at_origin(map)], cam, &x.to_transform());
    let rep = cost_weighted(&z_r, z_s, opts.eps, opts.weights)?;
    Ok((rep, z_r))
}

pub const COLOR_REWARD: [u8; 3] = [0, 0, 255];
pub const COLOR_PENALTY: [u8; 3] = [0, 255, 255];
pub const COLOR_SCAN_MISSING: [u8; 3] = [255, 255, 0];
pub const COLOR_MAP_MISSING: [u8; 3] = [255, 150, 0];
pub const COLOR_BOTH_UNKNOWN: [u8; 3] = [255, 0, 0];
/// Reward or penalty where one side is a free-unknown surface.
pub const COLOR_MIXED_REWARD: [u8; 3] = [0, 150, 0];
pub const COLOR_MIXED_PENALTY: [u8; 3] = [255, 0, 255];
/// Remaining ignored cells (unknown-occupied).
pub const COLOR_OTHER: [u8; 3] = [128, 128, 128];

/// Per-pixel verdict picture.
pub fn classification_image<T: Real>(
    z_r: &LabeledRender<T>,
    z_s: &LabeledRender<T>,
    eps: T,
) -> Result<RgbImage, CostError> {
    check_eps(eps)?;
    check_dims(z_r, z_s)?;
    use PixelLabel::*;
    let mut img = RgbImage::new(z_r.width as u32, z_r.height as u32);
    for (i, px) in img.pixels_mut().enumerate() {
        let (a, b) = (z_r.pixel_at(i), z_s.pixel_at(i));
        let verdict = classify_pixel(a, b, eps);
        let c = match (a.label, b.label, verdict) {
            (_, Background, _) => COLOR_SCAN_MISSING,
            (Background, _, _) => COLOR_MAP_MISSING,
            (FreeUnknown, FreeUnknown, _) => COLOR_BOTH_UNKNOWN,
            (FreeOccupied, FreeOccupied, Verdict::Reward) => COLOR_REWARD,
            (FreeOccupied, FreeOccupied, Verdict::Penalize) => COLOR_PENALTY,
            (_, _, Verdict::Reward) => COLOR_MIXED_REWARD,
            (_, _, Verdict::Penalize) => COLOR_MIXED_PENALTY,
            _ => COLOR_OTHER,
        };
        *px = Rgb(c);
    }
    Ok(img)
}
